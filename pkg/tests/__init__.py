"""Test suite for HSTU generative recommenders."""

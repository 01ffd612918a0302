"""Integration tests for the hstu-recommenders CLI."""

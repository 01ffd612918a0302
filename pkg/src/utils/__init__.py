"""Utility modules for the generative recommenders package."""

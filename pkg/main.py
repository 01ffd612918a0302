"""Command-line entry point for HSTU generative recommenders."""

from src.main import cli

if __name__ == "__main__":
    cli()

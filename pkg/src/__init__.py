"""Generative recommenders: HSTU encoders, streaming training and M-FALCON serving."""

__version__ = "0.1.0"
__author__ = "HSTU Recommenders Contributors"
__description__ = "Desk-scale HSTU generative recommenders with cached batched inference"

"""Custom exceptions for the generative recommenders package."""

from typing import Optional


class GenerativeRecommenderError(Exception):
    """Base exception for generative recommender operations."""

    def __init__(self, message: str, error_code: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        self.error_code = error_code


class ConfigurationError(GenerativeRecommenderError):
    """Exception raised for configuration-related errors."""

    pass


class ValidationError(GenerativeRecommenderError):
    """Exception raised for validation errors."""

    pass


class ShapeError(ValidationError):
    """Exception raised when operand shapes do not line up."""

    pass


class FileProcessingError(GenerativeRecommenderError):
    """Exception raised for file processing errors."""

    pass


class CheckpointError(FileProcessingError):
    """Exception raised for unreadable or malformed checkpoints."""

    pass


class DataFormatError(FileProcessingError):
    """Exception raised for malformed event logs, records or histograms."""

    pass


class NumericError(GenerativeRecommenderError):
    """Exception raised when a computation produces non-finite values."""

    pass


class DivergenceError(NumericError):
    """Exception raised when training loss or gradients blow up."""

    pass


class ServingError(GenerativeRecommenderError):
    """Exception raised for invalid scoring requests."""

    pass

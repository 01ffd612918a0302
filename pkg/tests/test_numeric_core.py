"""Tests for numeric core module."""

import math

import numpy as np
import pytest

from src import numeric_core as nc
from src.utils.exceptions import DivergenceError, NumericError, ShapeError, ValidationError


class TestMatmul:
    """Test cases for the matrix product."""

    def test_identity(self):
        a = nc.as_matrix([[1, 2], [3, 4]])
        assert np.array_equal(nc.matmul(np.eye(2), a), a)

    def test_scalar_matrices(self):
        assert nc.matmul(nc.as_matrix([[2]]), nc.as_matrix([[3]]))[0, 0] == 6

    def test_hand_computed_product(self):
        result = nc.matmul(nc.as_matrix([[1, 2], [3, 4]]), nc.as_matrix([[5, 6], [7, 8]]))
        assert np.array_equal(result, np.array([[19, 22], [43, 50]], dtype=np.float64))

    def test_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc_info:
            nc.matmul(nc.zeros(2, 3), nc.zeros(2, 3))
        assert "2x3" in str(exc_info.value)

    def test_empty_matrix_width(self):
        assert nc.as_matrix([], cols=4).shape == (0, 4)


class TestActivations:
    """Test cases for SiLU, sigmoid and GELU."""

    def test_silu_zero(self):
        assert nc.silu(np.array([0.0]))[0] == 0.0

    def test_silu_asymptote(self):
        assert abs(nc.silu(np.array([20.0]))[0] - 20.0) < 1e-8

    def test_silu_one(self):
        expected = 1.0 / (1.0 + math.exp(-1.0))
        assert nc.silu(np.array([1.0]))[0] == pytest.approx(expected, abs=1e-12)

    def test_sigmoid_extremes_are_finite(self):
        values = nc.sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(values))
        assert values[0] == pytest.approx(0.0, abs=1e-300)
        assert values[1] == pytest.approx(1.0)

    def test_silu_grad_matches_formula(self):
        s = 1.0 / (1.0 + math.exp(-1.0))
        assert nc.silu_grad(np.array([1.0]))[0] == pytest.approx(s * (1 + (1 - s)), abs=1e-12)


class TestLayerNorm:
    """Test cases for layer normalization."""

    def test_constant_row_is_zero(self):
        assert np.allclose(nc.layer_norm(np.array([[5.0, 5.0, 5.0]])), 0.0)

    def test_unit_variance_row_unchanged(self):
        result = nc.layer_norm(np.array([[1.0, -1.0]]), eps=1e-15)
        assert np.allclose(result, [[1.0, -1.0]])

    def test_population_variance(self):
        result = nc.layer_norm(np.array([[1.0, 3.0]]), eps=0.0)
        assert np.allclose(result, [[-1.0, 1.0]])


class TestSoftmaxRows:
    """Test cases for masked softmax."""

    def test_symmetric_row(self):
        assert np.allclose(nc.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_single_entry(self):
        assert np.allclose(nc.softmax_rows(np.array([[7.3]])), [[1.0]])

    def test_hand_computed(self):
        result = nc.softmax_rows(np.array([[math.log(1.0), math.log(3.0)]]))
        assert np.allclose(result, [[0.25, 0.75]])

    def test_masked_entries_are_exactly_zero(self):
        mask = np.array([[True, False, True]])
        result = nc.softmax_rows(np.array([[1.0, 100.0, 1.0]]), mask)
        assert result[0, 1] == 0.0
        assert np.allclose(result, [[0.5, 0.0, 0.5]])

    def test_fully_masked_row_is_zero(self):
        result = nc.softmax_rows(np.array([[1.0, 2.0]]), np.array([[False, False]]))
        assert np.array_equal(result, np.zeros((1, 2)))


class TestPrecision:
    """Test cases for precision switching."""

    def test_precision_mode_restores(self):
        assert nc.get_precision() == "float64"
        with nc.precision_mode("float32"):
            assert nc.as_matrix([[1.0]]).dtype == np.float32
        assert nc.get_precision() == "float64"

    def test_unknown_precision(self):
        with pytest.raises(ValidationError):
            nc.set_precision("float16")

    def test_ensure_finite(self):
        with pytest.raises(NumericError):
            nc.ensure_finite(np.array([1.0, np.nan]), "loss")
        with pytest.raises(DivergenceError, match="1 of 2"):
            nc.ensure_finite(np.array([np.inf, 0.0]), "gradient", DivergenceError)
        values = np.array([1.0, 2.0])
        assert nc.ensure_finite(values) is values

"""Tests for training losses and evaluation metrics."""

import math

import numpy as np
import pytest

from src import grad_tape as gt
from src.embedding_store import EmbeddingTable
from src.losses import (
    labels_from_bitmasks,
    multitask_bce_loss,
    sample_negatives,
    sampled_softmax_loss,
    softmax_loss_from_logits,
)
from src.metrics import (
    RankingAccumulator,
    hr_ndcg,
    hr_ndcg_from_rank,
    log_perplexity,
    log_perplexity_from_logits,
    normalized_entropy,
    target_rank,
)
from src.utils.exceptions import ValidationError


class TestSampledSoftmax:
    """Test cases for the sampled softmax loss."""

    def test_uniform_logits(self):
        loss = softmax_loss_from_logits(gt.Tensor([0.5]), gt.Tensor([[0.5, 0.5, 0.5, 0.5]]))
        assert loss.item() == pytest.approx(math.log(5))

    def test_confident_positive(self):
        loss = softmax_loss_from_logits(gt.Tensor([40.0]), gt.Tensor([[0.0]]))
        assert loss.item() < 1e-12

    def test_hand_computed(self):
        loss = softmax_loss_from_logits(gt.Tensor([math.log(3.0)]), gt.Tensor([[math.log(1.0)]]))
        assert loss.item() == pytest.approx(-math.log(0.75), abs=1e-6)
        assert loss.item() == pytest.approx(0.287682, abs=1e-6)

    def test_table_loss_gradients(self):
        table = EmbeddingTable(32, 3, rng=np.random.default_rng(0))
        hidden = gt.Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
        negatives = np.array([[4, 5, 6], [7, 8, 9]])

        def loss():
            return sampled_softmax_loss(hidden, [1, 2], negatives, table)

        assert gt.grad_check(loss, [hidden, table.weights]) < 1e-6

    def test_negative_equal_to_positive(self):
        table = EmbeddingTable(8, 2)
        with pytest.raises(ValidationError):
            sampled_softmax_loss(gt.Tensor(np.ones(2)), 3, np.array([3, 4]), table)


class TestNegativeSampling:
    """Test cases for negative draws."""

    def test_shape_and_exclusion(self):
        rng = np.random.default_rng(0)
        negatives = sample_negatives([1, 2, 3], 50, rng, id_bound=5)
        assert negatives.shape == (3, 50)
        assert not np.any(negatives == np.array([[1], [2], [3]]))
        assert negatives.min() >= 0 and negatives.max() < 5

    def test_corpus_draws(self):
        rng = np.random.default_rng(1)
        corpus = np.array([10, 20, 30])
        negatives = sample_negatives([20], 100, rng, corpus=corpus)
        assert set(negatives.ravel().tolist()) <= {10, 30}

    def test_needs_two_ids(self):
        with pytest.raises(ValidationError):
            sample_negatives([0], 4, np.random.default_rng(0), id_bound=1)

    def test_needs_a_source(self):
        with pytest.raises(ValidationError):
            sample_negatives([0], 4, np.random.default_rng(0))


class TestMultitaskBCE:
    """Test cases for ranking losses."""

    @pytest.mark.parametrize("label", [0, 1])
    def test_zero_logit(self, label):
        loss = multitask_bce_loss(gt.Tensor([[0.0]]), [label])
        assert loss.item() == pytest.approx(math.log(2))

    def test_confident_correct(self):
        assert multitask_bce_loss(gt.Tensor([[40.0]]), [1]).item() < 1e-12

    def test_bitmask_labels(self):
        assert labels_from_bitmasks([0b10, 0b01], 2).tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_task_weights(self):
        logits = gt.Tensor([[0.0, 0.0]])
        loss = multitask_bce_loss(logits, [0b11], task_weights=[1.0, 0.0])
        assert loss.item() == pytest.approx(math.log(2))
        with pytest.raises(ValidationError):
            multitask_bce_loss(logits, [1], task_weights=[1.0])

    def test_gradients(self):
        logits = gt.Tensor(np.random.default_rng(2).normal(size=(3, 2)), requires_grad=True)
        assert gt.grad_check(lambda: multitask_bce_loss(logits, [0, 1, 3], [0.5, 2.0]), [logits]) < 1e-6


class TestRankingMetrics:
    """Test cases for HR@K and NDCG@K."""

    def test_top_rank(self):
        hr, ndcg = hr_ndcg_from_rank(1, [10])
        assert hr[10] == 1.0 and ndcg[10] == 1.0

    def test_outside_k(self):
        hr, ndcg = hr_ndcg_from_rank(11, [10])
        assert hr[10] == 0.0 and ndcg[10] == 0.0

    def test_third_place(self):
        _, ndcg = hr_ndcg_from_rank(3, [10])
        assert ndcg[10] == pytest.approx(0.5)

    def test_ties_rank_smaller_ids_first(self):
        scores = np.array([1.0, 1.0, 1.0])
        ids = np.array([7, 3, 5])
        assert target_rank(scores, ids, 3) == 1
        assert target_rank(scores, ids, 7) == 3

    def test_hr_ndcg_from_scores(self):
        hr, _ = hr_ndcg(np.array([0.1, 0.9, 0.5]), np.array([0, 1, 2]), 2, ks=[1, 2])
        assert hr == {1: 0.0, 2: 1.0}

    def test_missing_target(self):
        with pytest.raises(ValidationError):
            target_rank(np.zeros(2), np.array([0, 1]), 5)

    def test_accumulator(self):
        acc = RankingAccumulator([1, 10])
        acc.add_rank(1)
        acc.add_rank(3)
        hr, ndcg = acc.summary()
        assert hr == {1: 0.5, 10: 1.0}
        assert ndcg[10] == pytest.approx(0.75)


class TestNormalizedEntropy:
    """Test cases for NE."""

    def test_base_rate_predictions(self):
        labels = [1, 0, 0, 1, 1]
        assert normalized_entropy([0.6] * 5, labels) == pytest.approx(1.0)

    def test_near_perfect(self):
        labels = np.array([1, 0] * 50)
        predictions = np.clip(labels.astype(float), 1e-9, 1 - 1e-9)
        assert normalized_entropy(predictions, labels) < 1e-6

    def test_hand_computed(self):
        assert normalized_entropy([0.8, 0.4], [1, 0]) == pytest.approx(0.529366, abs=1e-6)

    @pytest.mark.parametrize("labels", [[0, 0], [1, 1]])
    def test_undefined_base_rate(self, labels):
        with pytest.raises(ValidationError):
            normalized_entropy([0.5, 0.5], labels)


class TestLogPerplexity:
    """Test cases for log perplexity."""

    def test_uniform(self):
        assert log_perplexity(np.full((2, 8), 1 / 8), [0, 5]) == pytest.approx(math.log(8))

    def test_certain(self):
        assert log_perplexity(np.array([[0.0, 1.0]]), [1]) == pytest.approx(0.0)

    def test_quarter(self):
        assert log_perplexity(np.array([[0.25, 0.75], [0.75, 0.25]]), [0, 1]) == pytest.approx(1.386294, abs=1e-6)

    def test_from_logits(self):
        assert log_perplexity_from_logits(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4))

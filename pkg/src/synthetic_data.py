"""Dirichlet-Process record generator over a growing item vocabulary.

Every item id is assigned to one category when the dataset is created. Each
record picks up to ``categories_per_record_max`` categories, a Dirichlet(1)
prior over them and a concentration ``alpha``; its categories then follow the
Chinese-restaurant rule: position ``n`` draws a fresh category from the prior
with probability ``alpha / (alpha + n)``, otherwise it repeats the category of
a uniformly chosen earlier position. Only ids below the availability bound of
the record's index may be emitted, so the usable vocabulary grows over the
stream.
"""

import logging
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .utils.exceptions import ConfigurationError, ValidationError
from .utils.file_utils import file_checksum, write_jsonl

logger = logging.getLogger(__name__)


@dataclass
class DPConfig:
    num_items: int = 2000
    num_categories: int = 20
    num_records: int = 50000
    record_length: int = 64
    train_fraction: float = 0.9
    initial_available_fraction: float = 0.4
    categories_per_record_max: int = 5
    alpha_min: float = 1.0
    alpha_max: float = 500.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_items", "num_categories", "num_records", "record_length", "categories_per_record_max"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"synthetic.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("train_fraction", "initial_available_fraction"):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise ConfigurationError(f"synthetic.{name} must be in (0, 1], got {value}")
        if not (0.0 < self.alpha_min <= self.alpha_max):
            raise ConfigurationError(
                f"synthetic alpha range must satisfy 0 < min <= max, got ({self.alpha_min}, {self.alpha_max})"
            )

    @classmethod
    def full(cls, seed: int = 0) -> "DPConfig":
        return cls(
            num_items=20000,
            num_categories=100,
            num_records=1000000,
            record_length=128,
            seed=seed,
        )

    @classmethod
    def desk(cls, seed: int = 0) -> "DPConfig":
        return cls(seed=seed)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DPConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        base = cls.full() if preset == "full" else cls.desk()
        values = asdict(base)
        unknown = set(data) - set(values)
        if unknown:
            raise ConfigurationError(f"Unknown synthetic config keys: {sorted(unknown)}")
        values.update(data)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def availability_bound(record_index: int, config: DPConfig) -> int:
    """Exclusive upper bound on item ids usable by record ``record_index``.

    ``floor((init + (1 - init) * r / num_records) * num_items)``, evaluated
    exactly, and never below 1.
    """
    init = Fraction(str(config.initial_available_fraction))
    share = init + (1 - init) * Fraction(int(record_index), config.num_records)
    return max(1, min(config.num_items, int(share * config.num_items)))


def dp_category_sequence(
    alpha: float, prior: np.ndarray, length: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices into ``prior`` for ``length`` positions under the restaurant rule."""
    draws = np.empty(length, dtype=np.int64)
    if length == 0:
        return draws
    fresh = rng.choice(prior.size, size=length, p=prior)
    uniforms = rng.random(length)
    picks = rng.random(length)
    draws[0] = fresh[0]
    for n in range(1, length):
        if uniforms[n] < alpha / (alpha + n):
            draws[n] = fresh[n]
        else:
            draws[n] = draws[int(picks[n] * n)]
    return draws


class DPRecordGenerator:
    """Streams records for one ``DPConfig``; same seed gives the same stream."""

    def __init__(self, config: DPConfig) -> None:
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.item_category = self.rng.integers(0, config.num_categories, size=config.num_items)
        self.category_items: List[np.ndarray] = [
            np.flatnonzero(self.item_category == c) for c in range(config.num_categories)
        ]
        self.fallback_draws = 0

    def _item_for(self, category: int, bound: int) -> int:
        pool = self.category_items[category]
        available = int(np.searchsorted(pool, bound))
        if available == 0:
            self.fallback_draws += 1
            return int(self.rng.integers(0, bound))
        return int(pool[self.rng.integers(0, available)])

    def generate_record(self, record_index: int) -> List[int]:
        cfg = self.config
        k = int(self.rng.integers(1, min(cfg.categories_per_record_max, cfg.num_categories) + 1))
        categories = self.rng.choice(cfg.num_categories, size=k, replace=False)
        prior = self.rng.dirichlet(np.ones(k))
        alpha = float(self.rng.uniform(cfg.alpha_min, cfg.alpha_max))
        drawn = dp_category_sequence(alpha, prior, cfg.record_length, self.rng)
        bound = availability_bound(record_index, cfg)
        return [self._item_for(int(categories[c]), bound) for c in drawn]

    def records(self) -> Iterator[List[int]]:
        for r in range(self.config.num_records):
            yield self.generate_record(r)
        if self.fallback_draws:
            logger.warning(
                f"{self.fallback_draws} draws fell back to any available item "
                f"(category had no id below the availability bound)"
            )


def generate_dp_dataset(config: DPConfig) -> List[List[int]]:
    """All records of the stream, in order."""
    return list(DPRecordGenerator(config).records())


def split_train_test(records: Sequence, train_fraction: float) -> Tuple[List, List]:
    """Prefix/suffix split at ``floor(train_fraction * len(records))``."""
    if not (0.0 < train_fraction <= 1.0):
        raise ValidationError(f"train_fraction must be in (0, 1], got {train_fraction}")
    cut = int(Fraction(str(train_fraction)) * len(records))
    return list(records[:cut]), list(records[cut:])


def write_dp_dataset(config: DPConfig, path: str) -> Tuple[int, str]:
    """Stream the dataset to JSON lines with the config as a '#' header.

    Returns ``(records written, sha256 of the file)``.
    """
    header = {"generator": "dirichlet_process", "config": config.to_dict()}
    generator = DPRecordGenerator(config)
    count = write_jsonl(path, ({"items": items} for items in generator.records()), header=header)
    checksum = file_checksum(path)
    logger.info(f"✅ Wrote {count} synthetic records to {path} (sha256 {checksum[:12]})")
    return count, checksum

#!/usr/bin/env python3
"""
MovieLens-1M leave-one-out run with the small HSTU preset.

Download ml-1m and point ``paths.ratings`` (or --ratings) at ratings.dat.
This takes hours on a CPU.
"""

import os
import sys

import click
import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.config_manager import ConfigManager  # noqa: E402
from src.data_loaders import load_dataset  # noqa: E402
from src.main import setup_logging  # noqa: E402
from src.recommender_model import GenerativeRecommender, ModelConfig  # noqa: E402
from src.trainer import TrainConfig, Trainer, evaluate  # noqa: E402
from src.utils.file_utils import write_json  # noqa: E402

REFERENCE_HR_AT_10 = 0.3097
RELATIVE_TOLERANCE = 0.15


@click.command()
@click.option("--config", "config_path", default="movielens_1m", help="Run configuration name or path")
@click.option("--ratings", default=None, help="Override paths.ratings")
@click.option("--epochs", type=int, default=None, help="Override train.epochs")
def main(config_path, ratings, epochs):
    """Train and evaluate on MovieLens-1M, then compare HR@10 with the reference value."""
    setup_logging()
    manager = ConfigManager()
    config = manager.apply_overrides(
        manager.load_config(config_path), {"paths.ratings": ratings, "train.epochs": epochs}
    )
    manager.apply_app_config()
    if not os.path.exists(config["paths"]["ratings"] or ""):
        print(f"✗ Ratings file not found: {config['paths']['ratings']}")
        sys.exit(2)

    split = load_dataset(config["paths"], config["evaluation"])
    model = GenerativeRecommender(ModelConfig.from_dict(config["model"]), np.random.default_rng(config["seed"]))
    train_config = TrainConfig.from_dict(
        {**config["train"], "task": model.config.task, "seed": config["seed"]}, config["stochastic_length"]
    )
    result = Trainer(model, train_config, corpus=split.corpus).train(split.train)
    report = evaluate(model, split.test, config["evaluation"]["ks"], corpus=split.corpus)

    write_json(os.path.join(config["paths"]["reports"], "movielens_report.json"),
               {"train": result.to_dict(), "metrics": report.to_dict()})
    hr = report.hr_at_k[10]
    within = abs(hr - REFERENCE_HR_AT_10) <= RELATIVE_TOLERANCE * REFERENCE_HR_AT_10
    print(f"{'✓' if within else '✗'} HR@10 {hr:.4f} (reference {REFERENCE_HR_AT_10}, ±{RELATIVE_TOLERANCE:.0%})")
    print(f"  NDCG@10 {report.ndcg_at_k[10]:.4f}, log perplexity {report.log_pplx:.4f}")
    sys.exit(0 if within else 1)


if __name__ == "__main__":
    main()

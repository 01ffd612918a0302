"""Command-line entry point: generate, train, eval, infer, bench and sl-report."""

import functools
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np

from . import __version__
from .config_manager import ConfigManager
from .data_loaders import impression_histories, load_dataset, load_events_jsonl, user_histories
from .mfalcon_serving import ScoreRequest, ServingConfig, mfalcon_score
from .recommender_model import GenerativeRecommender, ModelConfig, load_model_checkpoint, save_model_checkpoint
from .sequence_pipeline import build_sequence
from .session_cache import SessionCacheStore
from .stochastic_length import load_length_histogram, plot_sl_report, sl_report_table
from .synthetic_data import DPConfig, write_dp_dataset
from .throughput_bench import plot_throughput, throughput_bench
from .trainer import TrainConfig, Trainer, evaluate, truncate_sequence
from .utils.exceptions import (
    ConfigurationError,
    FileProcessingError,
    NumericError,
    ServingError,
    ValidationError,
)
from .utils.file_utils import ensure_directory_exists, file_checksum, read_id_lines, require_file, write_json, write_jsonl
from .utils.metric_logger import MetricTimeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
MANIFEST_VERSION = 1

config_manager = ConfigManager()


def setup_logging() -> None:
    """Setup logging configuration."""
    log_level = os.environ.get("LOG_LEVEL", "INFO").upper()
    verbose_logging = os.environ.get("VERBOSE_LOGGING", "true").lower() == "true"

    # If verbose logging is disabled, increase the default log level
    if not verbose_logging and log_level in ["DEBUG", "INFO"]:
        log_level = "WARNING"

    root = logging.getLogger()
    root.setLevel(getattr(logging, log_level, logging.INFO))

    if not any(getattr(h, "hstu_console", False) for h in root.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        console_handler.hstu_console = True  # type: ignore[attr-defined]
        root.addHandler(console_handler)

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    if not verbose_logging:
        logging.getLogger("training_metrics").setLevel(logging.WARNING)


def describe_version() -> str:
    """``v<package version>`` plus ``git describe`` output when run from a checkout."""
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"v{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def run_command(name: str) -> Callable:
    """Map domain exceptions to exit codes: 2 for config/input errors, 3 for numeric failures."""

    def decorator(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> None:
            try:
                fn(*args, **kwargs)
            except NumericError as e:
                logger.error(f"❌ {name} failed: {e.message}")
                click.echo(f"Error: {e.message}", err=True)
                sys.exit(EXIT_NUMERIC)
            except (ConfigurationError, ValidationError, FileProcessingError, ServingError) as e:
                logger.error(f"❌ {name} failed: {e.message}")
                click.echo(f"Error: {e.message}", err=True)
                sys.exit(EXIT_USAGE)
            except FileNotFoundError as e:
                click.echo(f"Error: {e}", err=True)
                sys.exit(EXIT_USAGE)

        return wrapper

    return decorator


def load_run_config(config_path: Optional[str], flags: Dict[str, Any]) -> Dict[str, Any]:
    config = config_manager.load_config(config_path)
    return config_manager.apply_overrides(config, flags)


def write_manifest(command: str, config: Dict[str, Any], outputs: List[str], started: float) -> str:
    """Record what a command did so it can be rerun from this file alone."""
    reports = config["paths"]["reports"]
    ensure_directory_exists(reports)
    path = os.path.join(reports, f"{command}_manifest.json")
    config_path = os.path.join(reports, f"{command}_config.json")
    config_manager.save_config(config, config_path)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "version": describe_version(),
        "seed": config["seed"],
        "config": config,
        "resolved_config": config_path,
        "outputs": {p: file_checksum(p) for p in outputs if os.path.isfile(p)},
        "wall_seconds": round(time.perf_counter() - started, 6),
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    write_json(path, manifest)
    logger.info(f"Wrote manifest {path}")
    return path


def build_model(config: Dict[str, Any]) -> GenerativeRecommender:
    return GenerativeRecommender(ModelConfig.from_dict(config["model"]), np.random.default_rng(config["seed"]))


def load_or_build_model(checkpoint: Optional[str], config: Dict[str, Any]) -> GenerativeRecommender:
    if checkpoint:
        require_file(checkpoint, "model checkpoint")
        return load_model_checkpoint(checkpoint)
    logger.info("No checkpoint given; using a freshly initialized model")
    return build_model(config)


# CLI interface
@click.group()
@click.version_option(__version__, prog_name="hstu-recommenders")
def cli() -> None:
    """Generative recommenders with HSTU encoders and M-FALCON serving."""
    setup_logging()


@cli.command("generate")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--output", "-o", required=False, help="Records file (default: paths.data)")
@click.option("--seed", type=int, required=False, help="Generator seed")
@click.option("--preset", type=click.Choice(["desk", "full"]), required=False, help="Synthetic preset")
@click.option("--num-records", type=int, required=False, help="Number of records to generate")
@run_command("generate")
def generate_cli(config_path, output, seed, preset, num_records) -> None:
    """Write a Dirichlet-Process synthetic dataset as JSON lines."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {"seed": seed, "synthetic.preset": preset, "synthetic.num_records": num_records, "paths.data": output},
    )
    dp_config = DPConfig.from_dict({**config["synthetic"], "seed": config["seed"]})
    path = config["paths"]["data"]
    count, checksum = write_dp_dataset(dp_config, path)
    write_manifest("generate", config, [path], started)
    click.echo(f"Wrote {count} records to {path} (sha256 {checksum})")


@cli.command("train")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--data", required=False, help="Synthetic records file")
@click.option("--events", required=False, help="Event log (JSON lines)")
@click.option("--ratings", required=False, help="MovieLens-style ratings file")
@click.option("--checkpoint", required=False, help="Where to write the model checkpoint")
@click.option("--mode", type=click.Choice(["streaming", "multi_epoch"]), required=False)
@click.option("--epochs", type=int, required=False)
@click.option("--shuffle/--no-shuffle", default=None)
@click.option("--learning-rate", "--lr", "learning_rate", type=float, required=False)
@click.option("--batch-size", type=int, required=False)
@click.option("--architecture", type=click.Choice(["hstu", "transformer"]), required=False)
@click.option("--attention", type=click.Choice(["pointwise", "softmax"]), required=False)
@click.option("--seed", type=int, required=False)
@click.option("--reports", required=False, help="Directory for timeline, report and manifest")
@run_command("train")
def train_cli(
    config_path, data, events, ratings, checkpoint, mode, epochs, shuffle, learning_rate,
    batch_size, architecture, attention, seed, reports,
) -> None:
    """Train a model and evaluate it on the held-out split."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {
            "paths.data": data,
            "paths.events": events,
            "paths.ratings": ratings,
            "paths.checkpoint": checkpoint,
            "paths.reports": reports,
            "train.mode": mode,
            "train.epochs": epochs,
            "train.shuffle": shuffle,
            "train.learning_rate": learning_rate,
            "train.batch_size": batch_size,
            "model.architecture": architecture,
            "model.attention": attention,
            "seed": seed,
        },
    )
    app_config = config_manager.apply_app_config()
    split = load_dataset(config["paths"], config["evaluation"])
    model = build_model(config)
    train_config = TrainConfig.from_dict(
        {**config["train"], "task": model.config.task, "seed": config["seed"]}, config["stochastic_length"]
    )
    histories = split.train
    if train_config.emission == "generative":
        histories = impression_histories(split.train)

    timeline = MetricTimeline(log_interval=train_config.log_interval)
    result = Trainer(model, train_config, timeline, corpus=split.corpus).train(histories)
    report = evaluate(
        model,
        split.test,
        config["evaluation"]["ks"],
        corpus=split.corpus,
        positive_mask=train_config.positive_mask,
        threads=app_config["threads"],
    )

    reports_dir = config["paths"]["reports"]
    ensure_directory_exists(reports_dir)
    outputs = save_model_checkpoint(model, config["paths"]["checkpoint"])
    timeline_path = os.path.join(reports_dir, "train_timeline.csv")
    timeline.to_csv(timeline_path)
    report_path = os.path.join(reports_dir, "train_report.json")
    write_json(report_path, {"train": result.to_dict(), "metrics": report.to_dict()})
    outputs += [timeline_path, report_path]
    write_manifest("train", config, outputs, started)
    click.echo(f"Trained {result.steps} steps on {result.examples_seen} examples; report: {report_path}")


@cli.command("eval")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--checkpoint", required=False, help="Model checkpoint (default: paths.checkpoint)")
@click.option("--untrained", is_flag=True, help="Evaluate a freshly initialized model")
@click.option("--data", required=False, help="Synthetic records file")
@click.option("--events", required=False, help="Event log (JSON lines)")
@click.option("--ratings", required=False, help="MovieLens-style ratings file")
@click.option("--seed", type=int, required=False)
@click.option("--reports", required=False, help="Directory for report and manifest")
@run_command("eval")
def eval_cli(config_path, checkpoint, untrained, data, events, ratings, seed, reports) -> None:
    """HR@K / NDCG@K / log perplexity (retrieval) or NE (ranking) on the held-out split."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {
            "paths.checkpoint": checkpoint,
            "paths.data": data,
            "paths.events": events,
            "paths.ratings": ratings,
            "paths.reports": reports,
            "seed": seed,
        },
    )
    app_config = config_manager.apply_app_config()
    model = build_model(config) if untrained else load_or_build_model(config["paths"]["checkpoint"], config)
    split = load_dataset(config["paths"], config["evaluation"])
    report = evaluate(
        model,
        split.test,
        config["evaluation"]["ks"],
        corpus=split.corpus,
        positive_mask=config["train"]["positive_mask"],
        threads=app_config["threads"],
    )
    ensure_directory_exists(config["paths"]["reports"])
    report_path = os.path.join(config["paths"]["reports"], "eval_report.json")
    write_json(report_path, report.to_dict())
    write_manifest("eval", config, [report_path], started)
    for k in sorted(report.hr_at_k):
        click.echo(f"HR@{k}={report.hr_at_k[k]:.4f} NDCG@{k}={report.ndcg_at_k[k]:.4f}")
    for task, value in sorted(report.ne.items()):
        click.echo(f"NE[{task}]={value:.4f}")


@cli.command("infer")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--checkpoint", required=True, help="Model checkpoint")
@click.option("--events", required=True, help="Event log holding each user's history")
@click.option("--candidates", required=True, help="Candidate ids, one per line")
@click.option("--bm", "microbatch_size", type=int, required=False, help="Microbatch size b_m")
@click.option("--cache", "cache_mode", type=click.Choice(["off", "request", "session"]), required=False)
@click.option("--output", "-o", required=False, help="Predictions file (default: <reports>/predictions.jsonl)")
@run_command("infer")
def infer_cli(config_path, checkpoint, events, candidates, microbatch_size, cache_mode, output) -> None:
    """Score candidates for every user in an event log with M-FALCON."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {"paths.checkpoint": checkpoint, "serving.microbatch_size": microbatch_size, "serving.cache_mode": cache_mode},
    )
    config_manager.apply_app_config()
    serving = ServingConfig.from_dict(config["serving"])
    require_file(checkpoint, "model checkpoint")
    model = load_model_checkpoint(checkpoint)
    require_file(events, "events file")
    history_events = load_events_jsonl(events)
    candidate_ids = read_id_lines(require_file(candidates, "candidates file").as_posix())
    if not candidate_ids:
        raise ServingError(f"Candidates file {candidates} lists no ids")

    store = SessionCacheStore(serving.session_ttl_seconds, serving.max_sessions)
    max_history = max(1, model.config.encoder.max_seq_len - 1)
    rows = []
    for history in user_histories(history_events):
        seq = build_sequence(
            model.config.task,
            history.contents,
            history.actions,
            history.timestamps,
            positive_mask=config["train"]["positive_mask"],
            contextual=history.contextual,
            user_id=history.user_id,
        )
        request = ScoreRequest(
            truncate_sequence(seq, max_history),
            candidate_ids,
            microbatch_size=serving.microbatch_size,
            cache_mode=serving.cache_mode,
            user_id=history.user_id,
        )
        result = mfalcon_score(request, model, session_store=store)
        rows.extend({"user_id": history.user_id, **row} for row in result.to_rows())

    output = output or os.path.join(config["paths"]["reports"], "predictions.jsonl")
    count = write_jsonl(output, rows)
    write_manifest("infer", config, [output], started)
    click.echo(f"Wrote {count} predictions to {output}")


@cli.command("bench")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--checkpoint", required=False, help="Model checkpoint (default: fresh model)")
@click.option("--history-tokens", type=int, required=False, help="History length n in tokens")
@click.option("--num-candidates", type=int, required=False, help="Candidates m per request")
@click.option("--bm", "microbatch_sizes", type=int, multiple=True, help="Microbatch sizes (repeatable)")
@click.option("--repetitions", type=int, required=False)
@click.option("--plot/--no-plot", default=None, help="Also write a throughput plot")
@click.option("--output", "-o", required=False, help="CSV path (default: <reports>/bench.csv)")
@click.option("--seed", type=int, required=False)
@run_command("bench")
def bench_cli(config_path, checkpoint, history_tokens, num_candidates, microbatch_sizes, repetitions, plot, output, seed) -> None:
    """Time naive, batched and cached candidate scoring across microbatch sizes."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {
            "bench.history_tokens": history_tokens,
            "bench.num_candidates": num_candidates,
            "bench.microbatch_sizes": list(microbatch_sizes) or None,
            "bench.repetitions": repetitions,
            "bench.plot": plot,
            "seed": seed,
        },
    )
    config_manager.apply_app_config()
    bench = config["bench"]
    model = load_or_build_model(checkpoint, config)
    table = throughput_bench(
        model,
        bench["history_tokens"],
        bench["num_candidates"],
        bench["microbatch_sizes"],
        bench["repetitions"],
        seed=config["seed"],
    )
    output = output or os.path.join(config["paths"]["reports"], "bench.csv")
    ensure_directory_exists(os.path.dirname(os.path.abspath(output)))
    try:
        table.to_csv(output, index=False)
    except OSError as e:
        raise FileProcessingError(f"Failed to write benchmark table {output}: {e}")
    outputs = [output]
    if bench["plot"] and not table.empty:
        plot_path = os.path.splitext(output)[0] + ".png"
        plot_throughput(table, plot_path)
        outputs.append(plot_path)
    write_manifest("bench", config, outputs, started)
    click.echo(f"Wrote {len(table)} benchmark rows to {output}")


@cli.command("sl-report")
@click.option("--config", "-c", "config_path", required=False, help="Run configuration JSON file or name")
@click.option("--histogram", required=False, help="Length histogram, JSON lines of {length, count}")
@click.option("--alpha", "alphas", type=float, multiple=True, help="SL alpha (repeatable)")
@click.option("--max-length", "max_lengths", type=int, multiple=True, help="Max sequence length N (repeatable)")
@click.option("--plot/--no-plot", default=None, help="Also write a sparsity plot")
@click.option("--output", "-o", required=False, help="CSV path (default: <reports>/sl_report.csv)")
@run_command("sl-report")
def sl_report_cli(config_path, histogram, alphas, max_lengths, plot, output) -> None:
    """Sparsity and s2 of Stochastic Length over a length histogram."""
    started = time.perf_counter()
    config = load_run_config(
        config_path,
        {
            "paths.length_histogram": histogram,
            "sl_report.alphas": list(alphas) or None,
            "sl_report.max_lengths": list(max_lengths) or None,
            "sl_report.plot": plot,
        },
    )
    histogram_path = config["paths"]["length_histogram"]
    if not histogram_path:
        raise ConfigurationError("sl-report needs --histogram or paths.length_histogram")
    lengths = load_length_histogram(histogram_path)
    report = config["sl_report"]
    table = sl_report_table(lengths, report["alphas"], report["max_lengths"])
    output = output or os.path.join(config["paths"]["reports"], "sl_report.csv")
    ensure_directory_exists(os.path.dirname(os.path.abspath(output)))
    try:
        table.to_csv(output, index=False)
    except OSError as e:
        raise FileProcessingError(f"Failed to write SL report {output}: {e}")
    outputs = [output]
    if report["plot"]:
        plot_path = os.path.splitext(output)[0] + ".png"
        plot_sl_report(table, plot_path)
        outputs.append(plot_path)
    write_manifest("sl-report", config, outputs, started)
    click.echo(table.to_string(index=False))


if __name__ == "__main__":
    cli()

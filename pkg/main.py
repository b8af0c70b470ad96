# pylint: disable=too-many-arguments
"""Command-line entry point: python main.py <command> [options]"""

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
from attrs import evolve

from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.config import RunConfig, load_config
from src.errors import ConfigError, GradcheckError, PretrainError, TokenSelectError
from src.evaluation import (
    SweepReport,
    bench_forward,
    budget_sweep,
    dump_scores,
    evaluate,
)
from src.gradcheck import run_gradcheck
from src.pipeline import full_token_accuracy, pretrain_backbone
from src.synth_data import generate, load_dataset, save_dataset
from src.training import train_scorer
from src.utils import Selector

LOG_LEVEL_ENV = "TOKENSELECT_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

logger = logging.getLogger("tokenselect")


def configure_logging():
    name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    level = getattr(logging, name, None)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.INFO, format=LOG_FORMAT
    )


def fail(error: Exception, code: int):
    click.echo(f"error: {error}", err=True)
    sys.exit(code)


def handle_errors(command):
    """Maps the error hierarchy onto exit codes 1, 2 and 3"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (PretrainError, GradcheckError) as error:
            fail(error, 3)
        except OSError as error:
            fail(error, 2)
        except TokenSelectError as error:
            fail(error, 1)

    return wrapper


class CommandGroup(click.Group):
    """Usage errors exit with 1 like every other configuration error"""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent, **extra)
        except click.UsageError as error:
            error.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as error:
            error.exit_code = 1
            raise


def config_options(command):
    command = click.option(
        "--seed", type=int, default=None, help="Override the run seed."
    )(command)
    command = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="TOML config file, settings.py defaults when omitted.",
    )(command)
    return command


def dataset_option(command):
    return click.option(
        "--dataset",
        type=click.Path(file_okay=False),
        default=None,
        help="Dataset directory.",
    )(command)


def budget_option(command):
    return click.option(
        "--budget", type=float, default=None, help="Retention budget in (0, 1)."
    )(command)


def checkpoint_option(command):
    return click.option(
        "--checkpoint",
        type=click.Path(dir_okay=False),
        default=None,
        help="Input checkpoint.",
    )(command)


def out_option(command):
    return click.option(
        "--out", type=click.Path(), default=None, help="Output location."
    )(command)


def split_path(config: RunConfig, split: str) -> Path:
    return Path(config.paths.data_dir) / f"{split}.dtks"


def load_split(config: RunConfig, split: str):
    spec, batch, _ = load_dataset(split_path(config, split))
    logger.debug("loaded %d %s sequences", len(batch), split)
    return spec, batch


def prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


@click.group(cls=CommandGroup)
def cli():
    """Learned token selection under a retention budget.

    \b
    Exit codes:
      0  success
      1  usage, configuration, task spec, budget or input error
      2  I/O error: missing or unreadable file, integrity check failure
      3  numeric failure: gradcheck failure, backbone below accuracy threshold

    Log verbosity comes from the TOKENSELECT_LOG_LEVEL environment variable.
    """
    configure_logging()


@cli.command("gen-data")
@config_options
@out_option
@handle_errors
def gen_data(config_path, seed, out):
    """Generate the train, val and clean validation splits."""
    config = load_config(config_path).with_overrides(seed=seed, data_dir=out)
    Path(config.paths.data_dir).mkdir(parents=True, exist_ok=True)

    splits = {
        "train": (config.task, config.train_size),
        "val": (config.task, config.val_size),
        "clean": (config.task.clean(), config.val_size),
    }
    for split_seed, (split, (spec, count)) in enumerate(splits.items()):
        batch = generate(spec, count, split_seed)
        path = split_path(config, split)
        save_dataset(path, spec, batch, split_seed, config.to_dict())
        click.echo(f"wrote {count} {split} sequences to {path}")


@cli.command("pretrain-backbone")
@config_options
@dataset_option
@out_option
@handle_errors
def pretrain(config_path, seed, dataset, out):
    """Pretrain the stand-in backbone on full tokens and freeze it."""
    config = load_config(config_path).with_overrides(
        seed=seed, data_dir=dataset, backbone=out
    )
    spec, train = load_split(config, "train")
    _, val = load_split(config, "val")
    _, clean = load_split(config, "clean")

    options = config.pretrain
    backbone = pretrain_backbone(
        train,
        clean,
        spec.num_classes,
        epochs=options.epochs,
        seed=config.seed,
        hidden_dim=options.hidden_dim,
        lr=options.lr,
        batch_size=options.batch_size,
        min_accuracy=options.min_accuracy,
    )

    path = prepare(config.paths.backbone)
    save_checkpoint(path, Checkpoint(backbone, config=config.to_dict()))
    clean_accuracy = full_token_accuracy(clean, backbone)
    click.echo(
        f"backbone saved to {path}: clean accuracy {clean_accuracy:.4f}, "
        f"val accuracy {full_token_accuracy(val, backbone):.4f}"
    )


@cli.command("train-scorer")
@config_options
@budget_option
@dataset_option
@checkpoint_option
@out_option
@handle_errors
def train(config_path, seed, budget, dataset, checkpoint, out):
    """Train the scorer on the frozen backbone.

    --checkpoint takes a backbone checkpoint, or a scorer checkpoint to resume.
    """
    config = load_config(config_path).with_overrides(
        seed=seed, budget=budget, data_dir=dataset, scorer=out
    )
    source = load_checkpoint(checkpoint or config.paths.backbone)
    _, train_split = load_split(config, "train")
    _, val = load_split(config, "val")

    path = prepare(config.paths.scorer)
    result = train_scorer(
        evolve(config.train, checkpoint_path=str(path)),
        train_split,
        source.backbone,
        val=val,
        resume=source if source.scorer is not None else None,
        log_path=path.with_suffix(".jsonl"),
        config_echo=config.to_dict(),
    )

    evals = [record for record in result.metrics if record["kind"] == "eval"]
    summary = ""
    if evals:
        last = evals[-1]
        summary = (
            f", val retention {last['retention']:.4f}, "
            f"recall {last['signal_recall']:.4f}"
        )
    click.echo(f"scorer saved to {path} after {result.checkpoint.step} steps{summary}")


def load_scorer(config: RunConfig, checkpoint) -> Checkpoint:
    state = load_checkpoint(checkpoint or config.paths.scorer)
    if state.scorer is None:
        raise ConfigError(
            f"{checkpoint or config.paths.scorer} holds no trained scorer"
        )
    return state


@cli.command("eval")
@config_options
@budget_option
@dataset_option
@checkpoint_option
@out_option
@click.option(
    "--selector",
    type=click.Choice([selector.value for selector in Selector]),
    default=Selector.LEARNED.value,
    show_default=True,
)
@handle_errors
def evaluate_command(config_path, seed, budget, dataset, checkpoint, out, selector):
    """Evaluate one selector at one budget on the val split."""
    config = load_config(config_path).with_overrides(
        seed=seed, budget=budget, data_dir=dataset
    )
    state = load_scorer(config, checkpoint)
    _, val = load_split(config, "val")

    full = full_token_accuracy(val, state.backbone)
    row = evaluate(
        Selector(selector),
        config.train.budget,
        val,
        state.backbone,
        state.scorer,
        config.seed,
        full,
    )

    path = prepare(out or Path(config.paths.reports) / "eval.json")
    SweepReport([row], full, config.to_dict()).to_json(path, timing=config.eval.timing)
    click.echo(
        f"{row.selector} at budget {row.budget}: accuracy {row.accuracy:.4f}, "
        f"retention {row.retention:.4f}, recall {row.signal_recall:.4f}"
    )


@cli.command("sweep")
@config_options
@budget_option
@dataset_option
@checkpoint_option
@out_option
@click.option("--workers", type=int, default=None, help="Sweep cells run in parallel.")
@handle_errors
def sweep(config_path, seed, budget, dataset, checkpoint, out, workers):
    """Evaluate every selector at every configured budget."""
    config = load_config(config_path).with_overrides(
        seed=seed, budget=budget, data_dir=dataset, reports=out
    )
    if workers is not None:
        config = evolve(config, eval=evolve(config.eval, workers=workers))

    state = load_scorer(config, checkpoint)
    _, val = load_split(config, "val")

    report = budget_sweep(
        state.scorer,
        val,
        state.backbone,
        budgets=config.eval.budgets,
        seed=config.seed,
        workers=config.eval.workers,
        config=config.to_dict(),
    )

    reports = Path(config.paths.reports)
    reports.mkdir(parents=True, exist_ok=True)
    report.to_csv(reports / "sweep.csv", timing=config.eval.timing)
    report.to_json(reports / "sweep.json", timing=config.eval.timing)

    click.echo(f"full-token accuracy {report.full_accuracy:.4f}")
    for row in report.rows:
        click.echo(
            f"{row.selector:>8} b={row.budget:.2f} accuracy {row.accuracy:.4f} "
            f"retention {row.retention:.4f} recall {row.signal_recall:.4f}"
        )


@cli.command("gradcheck")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option(
    "--configs",
    type=int,
    default=100,
    show_default=True,
    help="Random soft Top-K rows.",
)
@click.option("--n-min", type=int, default=4, show_default=True)
@click.option("--n-max", type=int, default=64, show_default=True)
@click.option("--flip-sign", is_flag=True, hidden=True)
@handle_errors
def gradcheck(seed, configs, n_min, n_max, flip_sign):
    """Check every hand-written gradient against finite differences."""
    config = load_config().with_overrides(seed=seed)
    if not 2 <= n_min <= n_max:
        raise ConfigError(f"need 2 <= n-min <= n-max, got {n_min} and {n_max}")

    report = run_gradcheck(config.seed, configs, (n_min, n_max), flip_sign=flip_sign)
    for case in report.cases:
        status = "ok" if case.passed else "FAIL"
        click.echo(
            f"{case.name:>12}: max relative error {case.max_rel_error:.3e} "
            f"< {case.tolerance:.0e} {status}"
        )

    if not report.passed:
        raise GradcheckError("gradient check failed")


@cli.command("bench")
@config_options
@budget_option
@checkpoint_option
@out_option
@click.option(
    "--repeats", type=int, default=None, help="Timed repetitions, at least 10."
)
@handle_errors
def bench(config_path, seed, budget, checkpoint, out, repeats):
    """Time the downstream forward on full against pruned sequences."""
    config = load_config(config_path).with_overrides(seed=seed, budget=budget)
    backbone = load_checkpoint(checkpoint).backbone if checkpoint else None

    report = bench_forward(
        config.train.budget,
        n_tokens=config.eval.bench_tokens,
        repeats=repeats or config.eval.bench_repeats,
        batch_size=config.eval.bench_batch,
        feature_dim=config.task.feature_dim,
        backbone=backbone,
        seed=config.seed,
    )

    if out:
        text = json.dumps(report.to_dict(), indent=2) + "\n"
        prepare(out).write_text(text, encoding="utf-8")

    click.echo(
        f"{report.n_tokens} tokens, k={report.k}: full {report.full_ms:.3f} ms "
        f"(IQR {report.full_iqr_ms:.3f}), pruned {report.pruned_ms:.3f} ms "
        f"(IQR {report.pruned_iqr_ms:.3f}), scorer {report.scorer_ms:.3f} ms"
    )
    click.echo(
        f"speedup {report.speedup:.2f}x, flop ratio {report.flop_ratio:.4f}, "
        f"token ratio {report.token_flop_ratio:.4f}"
    )


@cli.command("dump-scores")
@config_options
@budget_option
@dataset_option
@checkpoint_option
@out_option
@click.option(
    "--limit", type=int, default=16, show_default=True, help="Sequences to dump."
)
@handle_errors
def dump(config_path, seed, budget, dataset, checkpoint, out, limit):
    """Write per-token scores and selections of val sequences as CSV."""
    config = load_config(config_path).with_overrides(
        seed=seed, budget=budget, data_dir=dataset
    )
    state = load_scorer(config, checkpoint)
    _, val = load_split(config, "val")

    path = prepare(out or Path(config.paths.reports) / "scores.csv")
    head = val.take(range(min(limit, len(val))))
    dump_scores(state.scorer, head, path, config.train.budget)
    click.echo(f"scores written to {path}")


if __name__ == "__main__":
    cli()  # pylint: disable=no-value-for-parameter

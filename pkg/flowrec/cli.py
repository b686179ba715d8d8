import logging
from collections.abc import Callable, Sequence
from datetime import datetime
from pathlib import Path

import click

from .checkpoint import load_checkpoint, read_checkpoint
from .config import ENCODER_BACKENDS, RunConfig, load_config, parse_override
from .dataset import PreparedData, make_batches, prepare, read_snapshot, write_snapshot
from .errors import ConfigError, FlowRecError
from .evaluation import (
    EvalReport,
    evaluate,
    popularity_baseline,
    steps_sweep,
    timing_report,
    write_csv,
)
from .logs import configure_logging
from .sampler import collect_trajectories, dump_rankings, iter_rankings, trace_export
from .trainer import train

logger = logging.getLogger(__name__)

USAGE_EXIT = 2
RUNTIME_EXIT = 1

ABLATIONS: dict[str, dict[str, object]] = {
    "full": {},
    "no_prior": {"train.use_prior_loss": False},
    "no_cfm": {"train.use_cfm_loss": False},
    "no_align": {"train.use_align_loss": False},
    "gru": {"model.encoder": "gru"},
}


class FlowRecGroup(click.Group):
    """Maps domain errors to exit codes: 2 for usage/config, 1 otherwise."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (ConfigError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(USAGE_EXIT)
        except FlowRecError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(RUNTIME_EXIT)


# --------------------------------------------------------------------------
# Shared options
# --------------------------------------------------------------------------


def config_options(func: Callable) -> Callable:
    func = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override one config value, e.g. --set train.alpha=5 (repeatable).",
    )(func)
    func = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="YAML run configuration; defaults apply to missing keys.",
    )(func)
    return func


def data_options(func: Callable) -> Callable:
    return click.option(
        "--snapshot",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="Use a preprocessed snapshot instead of re-running the data pipeline.",
    )(func)


def run_dir_option(func: Callable) -> Callable:
    return click.option(
        "--run-dir",
        type=click.Path(file_okay=False, path_type=Path),
        default=None,
        help="Output directory; defaults to <output_dir>/<config hash>-<timestamp>.",
    )(func)


def build_config(
    config_path: Path | None,
    overrides: Sequence[str],
    extra: dict[str, object] | None = None,
) -> RunConfig:
    """Defaults, then the config file, then --set values, then dedicated flags."""
    if config_path is not None and not config_path.is_file():
        raise ConfigError(f"Config file {config_path} does not exist.")
    config = load_config(config_path)
    merged = dict(parse_override(text) for text in overrides)
    merged.update(extra or {})
    return config.with_overrides(merged) if merged else config


def make_run_dir(config: RunConfig, run_dir: Path | None) -> Path:
    if run_dir is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path(config.output_dir) / f"{config.config_hash()}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def load_data(config: RunConfig, snapshot: Path | None) -> PreparedData:
    if snapshot is None:
        return prepare(config.data, seed=config.seed)
    data, header = read_snapshot(snapshot)
    logger.info(f"Loaded snapshot {snapshot} (config {header.get('config_hash')}).")
    return data


def finish_report(report: EvalReport, config: RunConfig) -> EvalReport:
    report.config = config.to_dict()
    report.config_hash = config.config_hash()
    return report


def held_out_batches(data: PreparedData, config: RunConfig):
    return make_batches(
        data.split, "test", config.train.batch_size, config.data.max_len
    )


def show(report: EvalReport) -> None:
    overall = ", ".join(f"{k} {v:.4f}" for k, v in report.to_dict()["overall"].items())
    label = f"{report.ranker} {report.phase} (T={report.steps}, {report.users} users)"
    click.echo(f"{label}: {overall}")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


@click.group(cls=FlowRecGroup)
@click.option(
    "--log-level", default=None, help="Overrides FLOWREC_LOG_LEVEL (default INFO)."
)
def cli(log_level: str | None) -> None:
    """Sequential recommendation with flow matching."""
    configure_logging(log_level)


@cli.command()
@config_options
@run_dir_option
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=None)
def preprocess(
    config_path: Path | None,
    overrides: tuple[str, ...],
    run_dir: Path | None,
    output: Path | None,
):
    """Filter, sequence and split the interaction log into a snapshot."""
    config = build_config(config_path, overrides)
    data = prepare(config.data, seed=config.seed)
    if output is None:
        output = make_run_dir(config, run_dir) / "snapshot.jsonl"
    digest = write_snapshot(output, data, config)
    click.echo(data.stats.format_table())
    click.echo(f"snapshot {output} sha256 {digest}")


@cli.command(name="train")
@config_options
@data_options
@run_dir_option
@click.option("--no-prior", is_flag=True, help="Drop the prior loss.")
@click.option("--no-cfm", is_flag=True, help="Drop the flow-matching loss.")
@click.option("--no-align", is_flag=True, help="Drop the alignment loss.")
@click.option("--encoder", type=click.Choice(ENCODER_BACKENDS), default=None)
@click.option(
    "--resume",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Continue from a last.pt checkpoint.",
)
def train_command(
    config_path: Path | None,
    overrides: tuple[str, ...],
    snapshot: Path | None,
    run_dir: Path | None,
    no_prior: bool,
    no_cfm: bool,
    no_align: bool,
    encoder: str | None,
    resume: Path | None,
):
    """Train a model; writes checkpoints, the epoch log and a test report."""
    extra: dict[str, object] = {}
    if no_prior:
        extra["train.use_prior_loss"] = False
    if no_cfm:
        extra["train.use_cfm_loss"] = False
    if no_align:
        extra["train.use_align_loss"] = False
    if encoder is not None:
        extra["model.encoder"] = encoder
    config = build_config(config_path, overrides, extra)
    if resume is not None and run_dir is None:
        run_dir = resume.parent
    out = make_run_dir(config, run_dir)
    data = load_data(config, snapshot)
    state, history = train(data, config, output_dir=out, resume=resume)
    report = evaluate(
        state.model,
        data.split,
        config.sampler,
        data.groups,
        batch_size=config.train.batch_size,
        workers=config.train.workers,
    )
    report.timing = timing_report(
        state.model,
        data.split,
        [config.sampler.steps],
        steps=config.sampler.steps,
        history=history,
    )
    finish_report(report, config).write(out / "report.json")
    write_csv([report.to_csv_row()], out / "report.csv")
    show(report)
    click.echo(f"run directory {out}")


@cli.command(name="eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@data_options
@click.option(
    "--steps", type=int, default=None, help="Euler steps (default sampler.steps)."
)
@click.option(
    "--groups/--no-groups", default=True, help="Head/tail and length breakdown."
)
@click.option("--prior", is_flag=True, help="Rank with the prior state x0 (no flow).")
@click.option("--trace", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--dump", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=None)
def eval_command(
    checkpoint: Path,
    overrides: tuple[str, ...],
    snapshot: Path | None,
    steps: int | None,
    groups: bool,
    prior: bool,
    trace: Path | None,
    dump: Path | None,
    workers: int | None,
    output: Path | None,
):
    """Evaluate a saved model on the test split."""
    saved = read_checkpoint(checkpoint)
    extra = {"sampler.steps": steps} if steps is not None else {}
    config = saved.config.with_overrides(
        dict(parse_override(o) for o in overrides) | extra
    )
    data = load_data(config, snapshot)
    state = load_checkpoint(checkpoint, config=config, num_items=data.catalog.num_items)
    model = state.model
    report = evaluate(
        model,
        data.split,
        config.sampler,
        data.groups if groups else None,
        batch_size=config.train.batch_size,
        workers=workers or config.train.workers,
        from_prior=prior,
    )
    finish_report(report, config)
    suffix = "prior" if prior else f"T{config.sampler.steps}"
    report.write(output or checkpoint.parent / f"eval-{suffix}.json")
    show(report)
    if trace is not None:
        trajectories = []
        for batch in held_out_batches(data, config):
            found = collect_trajectories(model, batch, config.sampler.steps)
            trajectories.extend(found)
        trace_export(trajectories, trace)
    if dump is not None:
        batches = held_out_batches(data, config)
        rankings = iter_rankings(
            model,
            batches,
            config.sampler.steps,
            config.sampler.dump_top,
            mask_history=config.sampler.mask_history,
        )
        dump_rankings(dump, rankings, item_ids=data.catalog.item_ids)


@cli.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False, path_type=Path))
@data_options
@click.option(
    "--users",
    type=int,
    default=5,
    show_default=True,
    help="Number of test users to trace.",
)
@click.option("--steps", type=int, default=None)
@click.option(
    "--output", type=click.Path(dir_okay=False, path_type=Path), required=True
)
def trace(
    checkpoint: Path, snapshot: Path | None, users: int, steps: int | None, output: Path
):
    """Export Euler trajectories of the first test users as CSV."""
    saved = read_checkpoint(checkpoint)
    config = saved.config
    if steps is not None:
        config = config.with_overrides({"sampler.steps": steps})
    data = load_data(config, snapshot)
    state = load_checkpoint(checkpoint, config=config, num_items=data.catalog.num_items)
    batch = next(
        make_batches(data.split, "test", max(users, 1), config.data.max_len), None
    )
    trajectories = []
    if batch is not None:
        trajectories = collect_trajectories(state.model, batch, config.sampler.steps)
    trajectories = trajectories[:users]
    trace_export(trajectories, output, dim=config.model.dim)
    click.echo(f"trace {output}: {len(trajectories)} user(s), T={config.sampler.steps}")


@cli.command()
@config_options
@data_options
@run_dir_option
def baseline(
    config_path: Path | None,
    overrides: tuple[str, ...],
    snapshot: Path | None,
    run_dir: Path | None,
):
    """Rank every item by training popularity."""
    config = build_config(config_path, overrides)
    data = load_data(config, snapshot)
    report = popularity_baseline(
        data.split,
        data.catalog.num_items,
        data.groups,
        batch_size=config.train.batch_size,
        max_len=config.data.max_len,
        workers=config.train.workers,
        mask_history=config.sampler.mask_history,
    )
    out = make_run_dir(config, run_dir)
    finish_report(report, config).write(out / "baseline.json")
    show(report)


@cli.command()
@config_options
@data_options
@run_dir_option
@click.option(
    "--kind", type=click.Choice(["steps", "weights", "ablation"]), required=True
)
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Trained model for --kind steps.",
)
def sweep(
    config_path: Path | None,
    overrides: tuple[str, ...],
    snapshot: Path | None,
    run_dir: Path | None,
    kind: str,
    checkpoint: Path | None,
):
    """Sampling-step, loss-weight or ablation sweeps; one CSV row per setting."""
    config = build_config(config_path, overrides)
    out = make_run_dir(config, run_dir)
    rows: list[dict[str, object]] = []
    match kind:
        case "steps":
            if checkpoint is None:
                raise ConfigError("--kind steps needs --checkpoint.")
            config = read_checkpoint(checkpoint).config.with_overrides(
                dict(parse_override(o) for o in overrides)
            )
            data = load_data(config, snapshot)
            state = load_checkpoint(
                checkpoint, config=config, num_items=data.catalog.num_items
            )
            model = state.model
            sweep_metrics = steps_sweep(
                model,
                data.split,
                config.sampler.grid,
                batch_size=config.train.batch_size,
                workers=config.train.workers,
            )
            timing = timing_report(
                model, data.split, config.sampler.grid, steps=config.sampler.steps
            )
            for steps, metrics in sweep_metrics.items():
                report = EvalReport(
                    phase="test",
                    steps=steps,
                    users=len(data.split.evaluable),
                    overall=metrics,
                )
                finish_report(report, config)
                rows.append(
                    report.to_csv_row(inference_seconds=timing.inference_seconds[steps])
                )
        case "weights":
            data = load_data(config, snapshot)
            for alpha in config.train.alpha_grid:
                for beta in config.train.beta_grid:
                    variant = config.with_overrides(
                        {"train.alpha": alpha, "train.beta": beta}
                    )
                    run = out / f"alpha{alpha:g}-beta{beta:g}"
                    rows.append(
                        _train_and_report(variant, data, run, alpha=alpha, beta=beta)
                    )
        case "ablation":
            data = load_data(config, snapshot)
            for name, change in ABLATIONS.items():
                variant = config.with_overrides(change) if change else config
                rows.append(_train_and_report(variant, data, out / name, variant=name))
    path = write_csv(rows, out / f"sweep-{kind}.csv")
    click.echo(f"sweep {kind}: {len(rows)} row(s) written to {path}")


def _train_and_report(
    config: RunConfig, data: PreparedData, out: Path, **labels: object
) -> dict[str, object]:
    state, _ = train(data, config, output_dir=out)
    report = evaluate(
        state.model,
        data.split,
        config.sampler,
        data.groups,
        batch_size=config.train.batch_size,
        workers=config.train.workers,
    )
    finish_report(report, config).write(out / "report.json")
    show(report)
    return report.to_csv_row(**labels)


def main() -> None:
    cli(prog_name="flowrec")

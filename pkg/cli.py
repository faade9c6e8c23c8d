#!/usr/bin/env python3
"""HushDiff command line: corpora, training, enhancement, evaluation and sweeps."""
import asyncio
import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from checkpoint import load_checkpoint
from config import SWEEP_SETTINGS, get_config, load_experiment_config, write_resolved_config
from errors import HushDiffError
from experiment import run_datagen, run_enhance, run_eval, run_sweep, run_train
from logger import RunLogger
from metrics import aggregate, stationarity_means, system_means
from models import ExperimentConfig, Split, SweepAxis

console = Console()
logger = logging.getLogger("hushdiff")

SPLITS = [s.value for s in Split] + ["all"]


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def exit_on_error(fn: Callable) -> Callable:
    """Map domain errors to their exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HushDiffError as e:
            console.print(f"[bold red]Error:[/bold red] {e}")
            sys.exit(e.exit_code)

    return wrapper


def resolve_config(config_path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    cfg = load_experiment_config(config_path)
    return cfg if seed is None else cfg.with_seed(seed)


def out_dir_for(out: Optional[str], command: str) -> Path:
    return Path(out) if out else Path(get_config().output_dir) / command


def echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    path = write_resolved_config(cfg, out_dir)
    console.print(f"[dim]Resolved config written to {path}[/dim]")


def run_logged(command: str, run_id: str, work: Callable[[RunLogger], Any], **start: Any) -> Any:
    """Run ``work`` in a worker thread while the run log drains on the event loop."""

    async def runner():
        async with RunLogger(get_config().log_path, run_id=run_id, command=command) as run_logger:
            await run_logger.log("start", **start)
            try:
                result = await asyncio.to_thread(work, run_logger)
            except HushDiffError as e:
                await run_logger.log(
                    "error", error=type(e).__name__, message=str(e), exit_code=e.exit_code
                )
                raise
            await run_logger.log("done")
            return result

    return asyncio.run(runner())


def split_option(value: str) -> Optional[Split]:
    return None if value == "all" else Split(value)


def print_means(title: str, cells) -> None:
    si, seg = system_means(cells, "si_sdr"), system_means(cells, "seg_snr")
    by_kind = stationarity_means(cells)
    table = Table(title=title)
    table.add_column("System", style="cyan")
    table.add_column("SI-SDR (dB)", style="green")
    table.add_column("SegSNR (dB)", style="green")
    table.add_column("Stationary", style="white")
    table.add_column("Non-stationary", style="white")
    for system in sorted(si):
        kinds: Dict[str, float] = by_kind.get(system, {})
        table.add_row(
            system,
            f"{si[system]:.2f}",
            f"{seg[system]:.2f}",
            f"{kinds['stationary']:.2f}" if "stationary" in kinds else "-",
            f"{kinds['non-stationary']:.2f}" if "non-stationary" in kinds else "-",
        )
    console.print(table)


@click.group()
@click.option("--log-level", default=None, help="Logging level (default from HUSHDIFF_LOG_LEVEL)")
def cli(log_level: Optional[str]):
    """HushDiff - noise-aware conditional diffusion enhancement on synthetic signals."""
    setup_logging((log_level or get_config().log_level).upper())


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="Experiment config (JSON)")
@click.option("--out", type=click.Path(), help="Corpus directory")
@click.option("--seed", type=int, help="Override the config seed")
@click.option("--threads", type=int, default=None, help="Record-generation threads")
@exit_on_error
def datagen(config_path: Optional[str], out: Optional[str], seed: Optional[int], threads: Optional[int]):
    """Generate a labelled synthetic corpus."""
    cfg = resolve_config(config_path, seed)
    out_dir = out_dir_for(out, "datagen")
    echo_config(cfg, out_dir)
    threads = threads or get_config().threads

    with console.status("[bold green]Generating corpus..."):
        manifest = run_logged(
            "datagen",
            f"datagen-{cfg.name}-{cfg.seed}",
            lambda _: run_datagen(cfg, out_dir, threads),
            out=str(out_dir),
            threads=threads,
        )

    table = Table(title="Corpus")
    table.add_column("Split", style="cyan")
    table.add_column("Records", style="green")
    table.add_column("Families", style="white")
    for split in Split:
        records = manifest.split(split)
        table.add_row(split.value, str(len(records)), ", ".join(sorted({r.family for r in records})))
    console.print(table)
    console.print(f"[dim]Manifest: {out_dir / 'manifest.json'}[/dim]")


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="Experiment config (JSON)")
@click.option("--manifest", required=True, type=click.Path(), help="Corpus manifest (or its directory)")
@click.option("--out", type=click.Path(), help="Run directory")
@click.option("--seed", type=int, help="Override the config seed")
@exit_on_error
def train(config_path: Optional[str], manifest: str, out: Optional[str], seed: Optional[int]):
    """Train the conditioner and denoiser jointly."""
    cfg = resolve_config(config_path, seed)
    out_dir = out_dir_for(out, "train")
    echo_config(cfg, out_dir)

    def work(run_logger: RunLogger):
        def on_epoch(stats):
            run_logger.log_threadsafe("epoch", **stats.model_dump(mode="json"))
            logger.info(
                f"epoch {stats.epoch} [{stats.phase.value}] diff={stats.diff_loss} "
                f"nc={stats.nc_loss} acc={stats.nc_accuracy}"
            )

        return run_train(cfg, manifest, out_dir, on_epoch)

    artifacts = run_logged("train", f"train-{cfg.name}-{cfg.seed}", work, manifest=str(manifest), out=str(out_dir))

    table = Table(title="Training")
    table.add_column("Epoch", style="cyan")
    table.add_column("Phase", style="white")
    table.add_column("Diffusion loss", style="green")
    table.add_column("NC loss", style="green")
    table.add_column("NC accuracy", style="green")

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    for stats in artifacts.report.epochs:
        table.add_row(str(stats.epoch), stats.phase.value, fmt(stats.diff_loss), fmt(stats.nc_loss), fmt(stats.nc_accuracy))
    console.print(table)
    console.print(f"[dim]Checkpoint: {artifacts.checkpoint}[/dim]")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(), help="Trained checkpoint")
@click.option("--manifest", required=True, type=click.Path(), help="Corpus manifest (or its directory)")
@click.option("--out", type=click.Path(), help="Output directory")
@click.option("--split", type=click.Choice(SPLITS), default="test", help="Which records to enhance")
@click.option("--seed", type=int, help="Override the sampler seed")
@click.option("--stride", type=int, default=None, help="Keep every n-th reverse step")
@exit_on_error
def enhance(
    checkpoint: str,
    manifest: str,
    out: Optional[str],
    split: str,
    seed: Optional[int],
    stride: Optional[int],
):
    """Enhance noisy records with a trained checkpoint."""
    ckpt = load_checkpoint(checkpoint)
    sampler: Dict[str, Any] = {}
    if seed is not None:
        sampler["seed"] = seed
    if stride is not None:
        sampler["stride"] = stride
    cfg = ckpt.config.with_overrides({"sampler": sampler}) if sampler else ckpt.config
    out_dir = out_dir_for(out, "enhance")
    echo_config(cfg, out_dir)

    with console.status("[bold green]Running the reverse process..."):
        artifacts = run_logged(
            "enhance",
            f"enhance-{cfg.name}-{cfg.sampler.seed}",
            lambda _: run_enhance(checkpoint, manifest, out_dir, split_option(split), cfg.sampler),
            checkpoint=str(checkpoint),
            manifest=str(manifest),
            split=split,
        )

    print_means(f"Enhancement ({split})", aggregate(artifacts.scores))
    console.print(f"[dim]Enhanced signals: {artifacts.enhanced_dir}[/dim]")


@cli.command(name="eval")
@click.option("--manifest", required=True, type=click.Path(), help="Corpus manifest (or its directory)")
@click.option("--enhanced", required=True, type=click.Path(), help="Directory written by enhance")
@click.option("--config", "config_path", type=click.Path(), help="Experiment config (metric options)")
@click.option("--out", type=click.Path(), help="Report directory")
@click.option("--split", type=click.Choice(SPLITS), default="all", help="Restrict to one split")
@click.option("--seed", type=int, help="Override the config seed")
@exit_on_error
def evaluate(
    manifest: str,
    enhanced: str,
    config_path: Optional[str],
    out: Optional[str],
    split: str,
    seed: Optional[int],
):
    """Score enhanced signals and write the report tables."""
    cfg = resolve_config(config_path, seed)
    out_dir = out_dir_for(out, "eval")
    echo_config(cfg, out_dir)

    report = run_logged(
        "eval",
        f"eval-{cfg.name}-{cfg.seed}",
        lambda _: run_eval(manifest, enhanced, out_dir, cfg.metrics, split_option(split)),
        manifest=str(manifest),
        enhanced=str(enhanced),
    )

    print_means("Evaluation", report.cells)
    if report.nc_accuracy is not None:
        console.print(f"NC accuracy: [green]{report.nc_accuracy:.3f}[/green]")
    if report.separability is not None:
        console.print(f"Embedding separability: [green]{report.separability:.3f}[/green]")
    if report.intra_similarity is not None:
        console.print(
            f"Cosine similarity within classes: [green]{report.intra_similarity:.3f}[/green], "
            f"across classes: [green]{report.inter_similarity:.3f}[/green]"
        )


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="Experiment config (JSON)")
@click.option(
    "--axis",
    required=True,
    type=click.Choice([a.value for a in SweepAxis]),
    help="Ablation axis",
)
@click.option("--out", type=click.Path(), help="Sweep directory")
@click.option("--seed", type=int, help="Override the config seed")
@click.option("--repeats", type=int, default=1, help="Consecutive seeds per setting")
@click.option("--threads", type=int, default=None, help="Worker processes")
@exit_on_error
def sweep(
    config_path: Optional[str],
    axis: str,
    out: Optional[str],
    seed: Optional[int],
    repeats: int,
    threads: Optional[int],
):
    """Run one ablation axis and emit a comparison table."""
    cfg = resolve_config(config_path, seed)
    out_dir = out_dir_for(out, "sweep")
    echo_config(cfg, out_dir)
    workers = threads or get_config().threads
    axis = SweepAxis(axis)
    console.print(f"\n[bold]{SWEEP_SETTINGS[axis]['description']}[/bold]")

    with console.status(f"[bold green]Sweeping {axis.value}..."):
        rows = run_logged(
            "sweep",
            f"sweep-{axis.value}-{cfg.name}-{cfg.seed}",
            lambda _: run_sweep(cfg, axis, out_dir, repeats, workers),
            axis=axis.value,
            repeats=repeats,
            workers=workers,
        )

    table = Table(title=f"Sweep: {axis.value}")
    table.add_column("Setting", style="cyan")
    table.add_column("NC accuracy", style="green")
    table.add_column("SI-SDR in", style="white")
    table.add_column("SI-SDR test", style="green")
    table.add_column("SI-SDR unseen", style="green")
    table.add_column("SegSNR test", style="green")
    for row in rows:
        table.add_row(
            row.setting,
            "-" if row.nc_accuracy is None else f"{row.nc_accuracy:.3f}",
            f"{row.si_sdr_input:.2f}",
            f"{row.si_sdr_test:.2f}",
            f"{row.si_sdr_unseen:.2f}",
            f"{row.seg_snr_test:.2f}",
        )
    console.print(table)
    console.print(f"[dim]Comparison table: {out_dir / 'sweep.csv'}[/dim]")


if __name__ == "__main__":
    cli()

"""Command orchestration: corpus generation, training, enhancement, evaluation, sweeps.

Every ``run_*`` function is synchronous and validates what it wrote before
returning; the CLI wraps them.
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import sweep_settings, write_resolved_config
from datagen import build_corpus, load_arrays, load_manifest, read_signal, write_signal
from denoiser import Architecture
from errors import ConfigError, EmptyInputError, MissingFileError, OutputError, SchemaError
from metrics import (
    accuracy,
    aggregate,
    class_similarity,
    read_embeddings_csv,
    separability,
    seg_snr,
    si_sdr,
    write_cells_csv,
    write_embeddings_csv,
    write_grid_csv,
    write_scores_csv,
)
from models import (
    CorpusManifest,
    EpochStats,
    EvalReport,
    ExperimentConfig,
    ManifestRecord,
    MetricOptions,
    Phase,
    SamplerConfig,
    Split,
    SweepAxis,
    SweepRow,
    TrainReport,
    UtteranceScore,
)
from sampling import enhance
from schedule import schedule_from_spec
from training import TrainingSet, TrainState, train

logger = logging.getLogger(__name__)

ENHANCE_BATCH = 64
CHECKPOINT_NAME = "checkpoint.hshd"
UNPROCESSED = "unprocessed"


@dataclass
class TrainArtifacts:
    checkpoint: Path
    report_csv: Path
    report: TrainReport


@dataclass
class EnhanceArtifacts:
    enhanced_dir: Path
    scores: List[UtteranceScore]
    embeddings: Optional[np.ndarray] = None


def validate_outputs(paths: Iterable[Path]) -> None:
    """Every path must exist and be non-empty."""
    for path in paths:
        path = Path(path)
        if not path.exists() or (path.is_file() and path.stat().st_size == 0):
            raise OutputError(f"expected output missing or empty: {path}")


# --- datagen -----------------------------------------------------------------


def run_datagen(cfg: ExperimentConfig, out_dir, threads: int = 1) -> CorpusManifest:
    out_dir = Path(out_dir)
    manifest = build_corpus(cfg.corpus, out_dir, threads)
    validate_outputs(
        [out_dir / "manifest.json"]
        + [out_dir / r.noisy_path for r in manifest.records]
        + [out_dir / r.clean_path for r in manifest.records]
    )
    return manifest


# --- training ----------------------------------------------------------------


def _corpus_root(manifest_path) -> Path:
    path = Path(manifest_path)
    return path if path.is_dir() else path.parent


def write_report_csv(path, report: TrainReport) -> None:
    fields = list(EpochStats.model_fields)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in report.epochs:
            writer.writerow({k: ("" if v is None else v) for k, v in row.model_dump(mode="json").items()})


def load_training_set(cfg: ExperimentConfig, manifest_path) -> TrainingSet:
    manifest = load_manifest(manifest_path)
    if manifest.classes != list(cfg.corpus.seen_families):
        raise ConfigError(
            f"manifest classes {manifest.classes} differ from config {cfg.corpus.seen_families}"
        )
    if manifest.signal_length != cfg.model.signal_length:
        raise ConfigError("manifest signal length differs from the model's")
    records = manifest.split(Split.train)
    if not records:
        raise EmptyInputError("manifest has no training records")
    return TrainingSet(*load_arrays(manifest, _corpus_root(manifest_path), records))


def run_train(
    cfg: ExperimentConfig,
    manifest_path,
    out_dir,
    on_epoch_event: Optional[Callable[[EpochStats], None]] = None,
) -> TrainArtifacts:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_set(cfg, manifest_path)
    schedule = schedule_from_spec(cfg.schedule)
    latest: Dict[str, TrainState] = {}
    written: List[Path] = []

    def snapshot(state: TrainState, epoch: int) -> Checkpoint:
        rng_states = {name: rng.state for name, rng in state.rngs.items()}
        return Checkpoint(cfg, schedule, state.params, epoch, rng_states)

    def on_epoch(stats: EpochStats, state: TrainState) -> None:
        latest["state"] = state
        every = cfg.train.checkpoint_every
        if every and stats.epoch % every == 0:
            path = out_dir / f"checkpoint-epoch{stats.epoch:03d}.hshd"
            written.append(save_checkpoint(path, snapshot(state, stats.epoch)))
        if on_epoch_event is not None:
            on_epoch_event(stats)

    _, report = train(cfg, data, schedule, on_epoch)
    ckpt_path = save_checkpoint(out_dir / CHECKPOINT_NAME, snapshot(latest["state"], len(report.epochs)))
    report_path = out_dir / "train_report.csv"
    write_report_csv(report_path, report)
    (out_dir / "train_report.json").write_text(report.model_dump_json(indent=2) + "\n")
    validate_outputs([ckpt_path, report_path, *written])
    return TrainArtifacts(ckpt_path, report_path, report)


# --- enhancement -------------------------------------------------------------


def score_utterance(
    record: ManifestRecord,
    clean: np.ndarray,
    est: np.ndarray,
    system: str,
    options: MetricOptions,
    predicted: Optional[int] = None,
) -> UtteranceScore:
    return UtteranceScore(
        id=record.id,
        system=system,
        family=record.family,
        label=record.label,
        snr_db=record.snr_db,
        si_sdr=si_sdr(est, clean, options.sdr_clamp_db),
        seg_snr=seg_snr(
            est,
            clean,
            options.seg_frame,
            options.seg_hop,
            options.seg_floor_db,
            options.seg_ceiling_db,
        ),
        predicted_label=predicted,
    )


def _select(manifest: CorpusManifest, split: Optional[Split]) -> List[ManifestRecord]:
    return manifest.records if split is None else manifest.split(split)


def run_enhance(
    checkpoint_path,
    manifest_path,
    out_dir,
    split: Optional[Split] = Split.test,
    sampler: Optional[SamplerConfig] = None,
) -> EnhanceArtifacts:
    """Enhance every record of ``split``; writes signals, scores and embeddings."""
    ckpt = load_checkpoint(checkpoint_path)
    manifest = load_manifest(manifest_path)
    root = _corpus_root(manifest_path)
    records = _select(manifest, split)
    if not records:
        raise EmptyInputError(f"no records to enhance in split {split.value if split else 'all'}")
    if manifest.signal_length != ckpt.config.model.signal_length:
        raise SchemaError("manifest signal length differs from the checkpoint model")

    cfg = ckpt.config
    sampler = sampler or cfg.sampler
    arch = Architecture.from_config(cfg, ckpt.schedule)
    out_dir = Path(out_dir)
    enhanced_dir = out_dir / "enhanced"
    enhanced_dir.mkdir(parents=True, exist_ok=True)

    scores: List[UtteranceScore] = []
    embeddings: List[np.ndarray] = []
    predictions: List[int] = []
    for start in range(0, len(records), ENHANCE_BATCH):
        chunk = records[start : start + ENHANCE_BATCH]
        x0, y, _ = load_arrays(manifest, root, chunk)
        result = enhance(ckpt.params, ckpt.schedule, y, sampler, arch)
        preds = np.argmax(result.probs, axis=-1) if result.probs is not None else [None] * len(chunk)
        for i, rec in enumerate(chunk):
            write_signal(enhanced_dir / f"{rec.id}.f64", result.signal[i])
            pred = None if preds[i] is None else int(preds[i])
            scores.append(score_utterance(rec, x0[i], y[i], UNPROCESSED, cfg.metrics))
            scores.append(score_utterance(rec, x0[i], result.signal[i], "enhanced", cfg.metrics, pred))
        if result.embedding is not None:
            embeddings.append(result.embedding)
            predictions.extend(int(p) for p in preds)
        logger.info(f"enhanced {min(start + ENHANCE_BATCH, len(records))}/{len(records)} records")

    outputs = [out_dir / "scores.csv"] + [enhanced_dir / f"{r.id}.f64" for r in records]
    write_scores_csv(out_dir / "scores.csv", scores)
    emb = None
    if embeddings:
        emb = np.concatenate(embeddings)
        write_embeddings_csv(
            out_dir / "embeddings.csv",
            cfg.name,
            [r.id for r in records],
            [r.family for r in records],
            [r.label for r in records],
            predictions,
            emb,
        )
        outputs.append(out_dir / "embeddings.csv")
    validate_outputs(outputs)
    return EnhanceArtifacts(enhanced_dir, scores, emb)


# --- evaluation --------------------------------------------------------------


def run_eval(
    manifest_path,
    enhanced_dir,
    out_dir,
    options: Optional[MetricOptions] = None,
    split: Optional[Split] = None,
    n_classes: Optional[int] = None,
) -> EvalReport:
    """Score enhanced files against the manifest's clean references."""
    options = options or MetricOptions()
    manifest = load_manifest(manifest_path)
    root = _corpus_root(manifest_path)
    enhanced_dir = Path(enhanced_dir)
    if not enhanced_dir.exists():
        raise MissingFileError(f"enhanced directory not found: {enhanced_dir}")
    signals_dir = enhanced_dir / "enhanced" if (enhanced_dir / "enhanced").is_dir() else enhanced_dir
    records = [r for r in _select(manifest, split) if (signals_dir / f"{r.id}.f64").exists()]
    if not records:
        raise EmptyInputError(f"no enhanced signals for the manifest in {signals_dir}")

    L = manifest.signal_length
    scores: List[UtteranceScore] = []
    for rec in records:
        clean = read_signal(root / rec.clean_path, L)
        scores.append(score_utterance(rec, clean, read_signal(root / rec.noisy_path, L), UNPROCESSED, options))
        scores.append(score_utterance(rec, clean, read_signal(signals_dir / f"{rec.id}.f64", L), "enhanced", options))

    stationary = {r.family: r.stationary for r in manifest.records}
    cells = aggregate(scores, stationary)
    report = EvalReport(cells=cells)

    # enhance writes embeddings.csv next to its enhanced/ directory
    candidates = [enhanced_dir / "embeddings.csv", signals_dir.parent / "embeddings.csv"]
    conditioner_csv = next((p for p in candidates if p.exists()), None)
    if conditioner_csv is not None:
        wanted = {r.id for r in records}
        rows, emb = read_embeddings_csv(conditioner_csv)
        keep = [i for i, r in enumerate(rows) if r["id"] in wanted]
        n_classes = n_classes or len(manifest.classes)
        seen = [i for i in keep if int(rows[i]["label"]) < n_classes and rows[i]["predicted"] != ""]
        if seen:
            report.nc_accuracy = accuracy(
                [int(rows[i]["predicted"]) for i in seen], [int(rows[i]["label"]) for i in seen]
            )
        families = [rows[i]["noise_class"] for i in keep]
        if len(set(families)) >= 2:
            report.separability = separability(emb[keep], families)
            if len(set(families)) < len(families):
                report.intra_similarity, report.inter_similarity = class_similarity(emb[keep], families)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snr_grid = sorted({c.snr_db for c in cells})
    write_scores_csv(out_dir / "eval_scores.csv", scores)
    write_cells_csv(out_dir / "eval_cells.csv", cells)
    write_grid_csv(out_dir / "table_si_sdr.csv", cells, snr_grid, "si_sdr")
    write_grid_csv(out_dir / "table_seg_snr.csv", cells, snr_grid, "seg_snr")
    (out_dir / "eval_report.json").write_text(report.model_dump_json(indent=2) + "\n")
    validate_outputs(
        out_dir / name
        for name in ("eval_scores.csv", "eval_cells.csv", "table_si_sdr.csv", "table_seg_snr.csv", "eval_report.json")
    )
    return report


# --- sweeps ------------------------------------------------------------------


def _mean_enhanced(scores: Sequence[UtteranceScore], metric: str, system: str = "enhanced") -> float:
    return float(np.mean([getattr(s, metric) for s in scores if s.system == system]))


def _sweep_job(job: Tuple[str, Dict, int, str, str, str]) -> Dict:
    """Train and score one (setting, seed); runs in a worker process."""
    name, overrides, seed, cfg_json, corpus_dir, run_dir = job
    cfg = ExperimentConfig.model_validate_json(cfg_json).with_seed(seed).with_overrides(overrides)
    run_dir = Path(run_dir)
    write_resolved_config(cfg, run_dir)
    trained = run_train(cfg, corpus_dir, run_dir)
    test = run_enhance(trained.checkpoint, corpus_dir, run_dir / "test", Split.test)
    unseen = run_enhance(trained.checkpoint, corpus_dir, run_dir / "unseen", Split.unseen)
    joint = [e for e in trained.report.epochs if e.phase is Phase.joint]
    return {
        "setting": name,
        "seed": seed,
        "nc_accuracy": joint[-1].nc_accuracy if joint else None,
        "si_sdr_input": _mean_enhanced(test.scores, "si_sdr", UNPROCESSED),
        "si_sdr_test": _mean_enhanced(test.scores, "si_sdr"),
        "si_sdr_unseen": _mean_enhanced(unseen.scores, "si_sdr"),
        "seg_snr_test": _mean_enhanced(test.scores, "seg_snr"),
        "unseen_scores": [s.model_dump(mode="json") for s in unseen.scores],
    }


def run_sweep(
    cfg: ExperimentConfig,
    axis: SweepAxis,
    out_dir,
    repeats: int = 1,
    workers: int = 1,
) -> List[SweepRow]:
    """Run every setting of ``axis`` over ``repeats`` consecutive seeds and average."""
    axis = SweepAxis(axis)
    out_dir = Path(out_dir)
    seeds = [cfg.seed + i for i in range(repeats)]
    settings = sweep_settings(axis)

    corpora = {}
    for seed in seeds:
        corpus_dir = out_dir / f"corpus-seed{seed}"
        run_datagen(cfg.with_seed(seed), corpus_dir)
        corpora[seed] = str(corpus_dir)

    cfg_json = cfg.model_dump_json()
    jobs = [
        (name, overrides, seed, cfg_json, corpora[seed], str(out_dir / name / f"seed{seed}"))
        for name, overrides in settings
        for seed in seeds
    ]
    logger.info(f"sweep {axis.value}: {len(settings)} settings x {len(seeds)} seeds, {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(job) for job in jobs]

    rows = []
    for name, overrides in settings:
        mine = [r for r in results if r["setting"] == name]
        accs = [r["nc_accuracy"] for r in mine if r["nc_accuracy"] is not None]
        rows.append(
            SweepRow(
                setting=name,
                overrides=overrides,
                seeds=seeds,
                nc_accuracy=float(np.mean(accs)) if accs else None,
                si_sdr_input=float(np.mean([r["si_sdr_input"] for r in mine])),
                si_sdr_test=float(np.mean([r["si_sdr_test"] for r in mine])),
                si_sdr_unseen=float(np.mean([r["si_sdr_unseen"] for r in mine])),
                seg_snr_test=float(np.mean([r["seg_snr_test"] for r in mine])),
            )
        )

    unseen_scores = []
    for r in results:
        for s in r["unseen_scores"]:
            score = UtteranceScore.model_validate(s)
            if score.system == UNPROCESSED:
                # one copy of the unprocessed scores per seed
                if r["setting"] != settings[0][0]:
                    continue
            else:
                score.system = r["setting"]
            unseen_scores.append(score)
    cells = aggregate(unseen_scores)
    write_grid_csv(out_dir / "unseen_grid_si_sdr.csv", cells, cfg.corpus.unseen_snrs, "si_sdr")

    write_sweep_csv(out_dir / "sweep.csv", rows)
    (out_dir / "sweep.json").write_text(
        json.dumps([r.model_dump(mode="json") for r in rows], indent=2) + "\n"
    )
    validate_outputs([out_dir / "sweep.csv", out_dir / "sweep.json", out_dir / "unseen_grid_si_sdr.csv"])
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    fields = ["setting", "nc_accuracy", "si_sdr_input", "si_sdr_test", "si_sdr_unseen", "seg_snr_test", "seeds"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            data = row.model_dump(mode="json")
            writer.writerow(
                {
                    **{k: ("" if data[k] is None else data[k]) for k in fields[:-1]},
                    "seeds": " ".join(str(s) for s in row.seeds),
                }
            )

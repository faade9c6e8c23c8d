"""Signal-quality and conditioner metrics, plus their CSV reports."""

import csv
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from errors import MetricError, MissingFileError
from models import EvalCell, UtteranceScore

logger = logging.getLogger(__name__)


def si_sdr(est, ref, clamp: float = 100.0) -> float:
    """Scale-invariant SDR in dB, clamped to [-clamp, clamp]."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.size == 0:
        raise MetricError(f"si_sdr needs equal non-empty shapes, got {est.shape} and {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise MetricError("si_sdr reference is all zeros")
    target = (float(np.dot(est, ref)) / ref_energy) * ref
    error = est - target
    num, den = float(np.dot(target, target)), float(np.dot(error, error))
    if num == 0.0:
        return -clamp
    if den == 0.0:
        return clamp
    return float(np.clip(10.0 * math.log10(num / den), -clamp, clamp))


def seg_snr(
    est,
    ref,
    frame: int = 32,
    hop: int = 16,
    floor: float = -10.0,
    ceiling: float = 35.0,
) -> float:
    """Mean of per-frame SNRs, each clamped to [floor, ceiling] dB."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1:
        raise MetricError(f"seg_snr needs equal 1-D shapes, got {est.shape} and {ref.shape}")
    if est.size < frame or frame < 1 or hop < 1:
        raise MetricError(f"cannot frame {est.size} samples with frame={frame} hop={hop}")
    windows = np.lib.stride_tricks.sliding_window_view
    ref_f = windows(ref, frame)[::hop]
    err_f = windows(ref - est, frame)[::hop]
    signal_e = np.sum(ref_f**2, axis=1)
    noise_e = np.sum(err_f**2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(signal_e / noise_e)
    snr = np.where(noise_e == 0.0, ceiling, snr)
    snr = np.where(signal_e == 0.0, floor, snr)
    return float(np.mean(np.clip(snr, floor, ceiling)))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise MetricError("accuracy of an empty prediction set")
    if preds.shape != labels.shape:
        raise MetricError(f"{preds.size} predictions for {labels.size} labels")
    return float(np.mean(preds == labels))


def separability(embeddings, labels: Sequence[int]) -> float:
    """Mean silhouette over points; singleton clusters contribute 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[0] != labels.size:
        raise MetricError(f"separability needs (N, d) embeddings with N labels, got {x.shape}")
    classes = np.unique(labels)
    if classes.size < 2:
        raise MetricError("separability needs at least 2 distinct labels")

    dist = cdist(x, x)
    members = {c: labels == c for c in classes}
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = members[labels[i]]
        n_own = int(own.sum())
        if n_own == 1:
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, members[c]].mean() for c in classes if c != labels[i])
        top = max(a, b)
        scores[i] = 0.0 if top == 0.0 else (b - a) / top
    return float(np.mean(scores))


def class_similarity(embeddings, labels: Sequence) -> Tuple[float, float]:
    """Mean cosine similarity within classes and across classes."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labels.size:
        raise MetricError(f"class_similarity needs (N, d) embeddings with N labels, got {x.shape}")
    if np.any(np.linalg.norm(x, axis=1) == 0.0):
        raise MetricError("cosine similarity of a zero embedding")
    sim = 1.0 - cdist(x, x, "cosine")
    same = labels[:, None] == labels[None, :]
    within = same & ~np.eye(labels.size, dtype=bool)
    if not within.any() or same.all():
        raise MetricError("class_similarity needs a repeated label and at least 2 classes")
    return float(sim[within].mean()), float(sim[~same].mean())


# --- aggregation -------------------------------------------------------------


def aggregate(
    scores: Iterable[UtteranceScore], stationary: Optional[Dict[str, bool]] = None
) -> List[EvalCell]:
    """Average per-utterance scores into (system, family, SNR) cells."""
    groups = defaultdict(list)
    for s in scores:
        groups[(s.system, s.family, s.snr_db)].append(s)
    if not groups:
        raise MetricError("no scores to aggregate")
    stationary = stationary or {}
    return [
        EvalCell(
            system=system,
            family=family,
            snr_db=snr,
            si_sdr=float(np.mean([s.si_sdr for s in rows])),
            seg_snr=float(np.mean([s.seg_snr for s in rows])),
            count=len(rows),
            stationary=stationary.get(family),
        )
        for (system, family, snr), rows in sorted(groups.items())
    ]


def system_means(cells: Sequence[EvalCell], metric: str = "si_sdr") -> Dict[str, float]:
    """Count-weighted mean of ``metric`` per system."""
    totals: Dict[str, List[float]] = defaultdict(lambda: [0.0, 0])
    for c in cells:
        totals[c.system][0] += getattr(c, metric) * c.count
        totals[c.system][1] += c.count
    return {k: v[0] / v[1] for k, v in totals.items()}


def stationarity_means(cells: Sequence[EvalCell], metric: str = "si_sdr") -> Dict[str, Dict[str, float]]:
    """Per system, mean ``metric`` over stationary and non-stationary families."""
    tagged = [c for c in cells if c.stationary is not None]
    out: Dict[str, Dict[str, float]] = defaultdict(dict)
    for flag, label in ((True, "stationary"), (False, "non-stationary")):
        subset = [c for c in tagged if c.stationary is flag]
        for system, value in system_means(subset, metric).items():
            out[system][label] = value
    return dict(out)


# --- CSV ---------------------------------------------------------------------

SCORE_FIELDS = list(UtteranceScore.model_fields)
CELL_FIELDS = list(EvalCell.model_fields)


def write_scores_csv(path, scores: Sequence[UtteranceScore]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SCORE_FIELDS)
        writer.writeheader()
        for s in scores:
            writer.writerow({k: ("" if v is None else v) for k, v in s.model_dump(mode="json").items()})


def read_scores_csv(path) -> List[UtteranceScore]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"scores file not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [UtteranceScore.model_validate({k: (None if v == "" else v) for k, v in r.items()}) for r in rows]


def write_cells_csv(path, cells: Sequence[EvalCell]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CELL_FIELDS)
        writer.writeheader()
        for c in cells:
            writer.writerow({k: ("" if v is None else v) for k, v in c.model_dump(mode="json").items()})


def write_grid_csv(path, cells: Sequence[EvalCell], snr_grid: Sequence[float], metric: str = "si_sdr") -> None:
    """Rows are systems, columns the SNR grid plus Avg, one block per family."""
    table = defaultdict(dict)
    for c in cells:
        table[(c.family, c.system)][c.snr_db] = c
    families = sorted({c.family for c in cells})
    systems = sorted({c.system for c in cells})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["family", "system"] + [f"{s:g}" for s in snr_grid] + ["Avg"])
        for family in families:
            for system in systems:
                row = table.get((family, system))
                if not row:
                    continue
                values = [getattr(row[s], metric) if s in row else None for s in snr_grid]
                present = [v for v in values if v is not None]
                avg = float(np.mean(present)) if present else None
                writer.writerow(
                    [family, system]
                    + ["" if v is None else f"{v:.4f}" for v in values]
                    + ["" if avg is None else f"{avg:.4f}"]
                )


EMBEDDING_META = ["run_id", "id", "noise_class", "label", "predicted"]


def write_embeddings_csv(
    path,
    run_id: str,
    ids: Sequence[str],
    families: Sequence[str],
    labels: Sequence[int],
    predicted: Sequence[int],
    embeddings: np.ndarray,
) -> None:
    """One row per utterance: run id, record id, noise class, labels, embedding components."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
        raise MetricError(f"{len(ids)} ids for embeddings of shape {embeddings.shape}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(EMBEDDING_META + [f"e{i}" for i in range(embeddings.shape[1])])
        for uid, family, label, pred, row in zip(ids, families, labels, predicted, embeddings):
            writer.writerow([run_id, uid, family, label, pred] + [repr(float(v)) for v in row])


def read_embeddings_csv(path) -> Tuple[List[Dict[str, str]], np.ndarray]:
    """Inverse of ``write_embeddings_csv``: (metadata rows, (N, d) array)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"embeddings file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = list(reader)
    if header is None or header[: len(EMBEDDING_META)] != EMBEDDING_META:
        raise MetricError(f"{path} is not an embeddings export")
    k = len(EMBEDDING_META)
    meta = [dict(zip(EMBEDDING_META, r[:k])) for r in rows]
    values = np.array([[float(v) for v in r[k:]] for r in rows], dtype=np.float64)
    return meta, values.reshape(len(rows), len(header) - k)

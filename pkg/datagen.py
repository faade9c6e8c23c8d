"""Synthetic labelled corpus: harmonic clean signals mixed with parametric noises.

Layout on disk::

    <root>/manifest.json
    <root>/clean/<id>.f64     little-endian float64, signal_length samples
    <root>/noisy/<id>.f64

Frequencies below are in cycles per sample.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import signal

from errors import ConfigError, DataError, EmptyInputError, MissingFileError, SchemaError
from models import CorpusManifest, CorpusSpec, ManifestRecord, Split
from tensor import Rng

logger = logging.getLogger(__name__)

SIGNAL_DTYPE = np.dtype("<f8")
PEAK = 0.5

Generator = Callable[[int, Rng], np.ndarray]


@dataclass(frozen=True)
class NoiseFamily:
    name: str
    index: int
    stationary: bool
    generate: Generator


# --- clean signals -----------------------------------------------------------


def gen_clean(rng: Rng, length: int = 256) -> np.ndarray:
    """2-4 harmonics of an integer-bin fundamental under a raised-Hann envelope."""
    n = np.arange(length)
    k0 = rng.integers(3, 9)
    n_harmonics = rng.integers(2, 5)
    amps = rng.uniform((n_harmonics,), 0.3, 1.0) / np.arange(1, n_harmonics + 1)
    phases = rng.uniform((n_harmonics,), 0.0, 2.0 * math.pi)
    x = sum(
        a * np.sin(2.0 * math.pi * h * k0 * n / length + p)
        for h, a, p in zip(range(1, n_harmonics + 1), amps, phases)
    )
    depth = float(rng.uniform((), 0.0, 0.5))
    x = x * ((1.0 - depth) + depth * signal.get_window("hann", length))
    return PEAK * x / np.max(np.abs(x))


# --- noise generators --------------------------------------------------------


def _white(length: int, rng: Rng) -> np.ndarray:
    return rng.normal((length,))


def _pink(length: int, rng: Rng) -> np.ndarray:
    spectrum = np.fft.rfft(rng.normal((length,)))
    k = np.arange(spectrum.size)
    spectrum[1:] /= np.sqrt(k[1:])
    spectrum[0] = 0.0
    return np.fft.irfft(spectrum, n=length)


def _bandpass(x: np.ndarray, low: float, high: float, order: int = 4) -> np.ndarray:
    sos = signal.butter(order, [2.0 * low, 2.0 * high], btype="bandpass", output="sos")
    return signal.sosfilt(sos, x)


def _lowpass(x: np.ndarray, cutoff: float, order: int = 4) -> np.ndarray:
    sos = signal.butter(order, 2.0 * cutoff, btype="lowpass", output="sos")
    return signal.sosfilt(sos, x)


def _band(length: int, rng: Rng) -> np.ndarray:
    centre = float(rng.uniform((), 0.2, 0.35))
    return _bandpass(rng.normal((length,)), centre - 0.04, centre + 0.04)


def _am_tone(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    fc, fm = float(rng.uniform((), 0.05, 0.15)), float(rng.uniform((), 0.005, 0.02))
    p1, p2 = rng.uniform((2,), 0.0, 2.0 * math.pi)
    return (1.0 + 0.9 * np.cos(2 * math.pi * fm * n + p1)) * np.sin(2 * math.pi * fc * n + p2)


def _fm_tone(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    fc, fm = float(rng.uniform((), 0.1, 0.2)), float(rng.uniform((), 0.01, 0.03))
    index = float(rng.uniform((), 2.0, 5.0))
    p = float(rng.uniform((), 0.0, 2.0 * math.pi))
    return np.sin(2 * math.pi * fc * n + index * np.sin(2 * math.pi * fm * n) + p)


def _impulse_train(length: int, rng: Rng) -> np.ndarray:
    period = rng.integers(12, 25)
    offset = rng.integers(0, period)
    x = 0.05 * rng.normal((length,))
    x[offset::period] += 3.0
    return x


def _chirp(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length, dtype=np.float64)
    f0, f1 = float(rng.uniform((), 0.01, 0.05)), float(rng.uniform((), 0.25, 0.45))
    return signal.chirp(n, f0=f0, t1=length, f1=f1, phi=float(rng.uniform((), 0.0, 360.0)))


def _two_tone_beat(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    f1, beat = float(rng.uniform((), 0.15, 0.3)), float(rng.uniform((), 0.005, 0.02))
    p1, p2 = rng.uniform((2,), 0.0, 2.0 * math.pi)
    return np.sin(2 * math.pi * f1 * n + p1) + np.sin(2 * math.pi * (f1 + beat) * n + p2)


def _gated_bursts(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    rate, duty = float(rng.uniform((), 0.02, 0.05)), float(rng.uniform((), 0.2, 0.4))
    phase = float(rng.uniform((), 0.0, 2 * math.pi))
    gate = signal.square(2 * math.pi * rate * n + phase, duty) > 0
    return rng.normal((length,)) * gate + 0.02 * rng.normal((length,))


def _babble(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    x = np.zeros(length)
    for _ in range(rng.integers(3, 6)):
        centre = float(rng.uniform((), 0.04, 0.18))
        voice = _bandpass(rng.normal((length,)), centre - 0.015, centre + 0.015)
        rate, phase = float(rng.uniform((), 0.005, 0.02)), float(rng.uniform((), 0, 2 * math.pi))
        x += voice * (1.0 + 0.5 * np.sin(2 * math.pi * rate * n + phase))
    return x


def _helicopter(length: int, rng: Rng) -> np.ndarray:
    n = np.arange(length)
    rotor = float(rng.uniform((), 0.02, 0.04))
    bed = _lowpass(rng.normal((length,)), 0.05)
    blades = np.maximum(0.0, np.cos(2 * math.pi * rotor * n + float(rng.uniform((), 0, 2 * math.pi))))
    return bed * (0.1 + blades) ** 2


def _baby_cry(length: int, rng: Rng) -> np.ndarray:
    x = 0.01 * rng.normal((length,))
    for _ in range(rng.integers(1, 4)):
        span = rng.integers(min(30, length // 2), min(60, length // 2) + 1)
        start = rng.integers(0, length - span + 1)
        t = np.arange(span, dtype=np.float64)
        f0, f1 = float(rng.uniform((), 0.1, 0.15)), float(rng.uniform((), 0.2, 0.3))
        burst = signal.chirp(t, f0=f0, t1=span, f1=f1, method="quadratic", vertex_zero=False)
        x[start : start + span] += burst * signal.get_window("hann", span)
    return x


def _crowd_party(length: int, rng: Rng) -> np.ndarray:
    return _bandpass(_pink(length, rng) + 0.3 * rng.normal((length,)), 0.02, 0.25, order=2)


NOISE_GENERATORS: Dict[str, Tuple[Generator, bool]] = {
    "white": (_white, True),
    "pink": (_pink, True),
    "band": (_band, True),
    "am_tone": (_am_tone, False),
    "fm_tone": (_fm_tone, False),
    "impulse_train": (_impulse_train, False),
    "chirp": (_chirp, False),
    "two_tone_beat": (_two_tone_beat, False),
    "gated_bursts": (_gated_bursts, False),
    "babble": (_babble, False),
    "helicopter": (_helicopter, False),
    "baby_cry": (_baby_cry, False),
    "crowd_party": (_crowd_party, True),
}


def families_for(spec: CorpusSpec) -> List[NoiseFamily]:
    """Seen families take labels 0..n-1 in order; held-out ones follow."""
    names = list(spec.seen_families) + list(spec.held_out_families)
    unknown = [n for n in names if n not in NOISE_GENERATORS]
    if unknown:
        raise ConfigError(f"unknown noise families {unknown}; known: {sorted(NOISE_GENERATORS)}")
    return [
        NoiseFamily(name, i, NOISE_GENERATORS[name][1], NOISE_GENERATORS[name][0])
        for i, name in enumerate(names)
    ]


def gen_noise(family: NoiseFamily, rng: Rng, length: int = 256) -> np.ndarray:
    """Unit-RMS noise of the given family."""
    x = np.asarray(family.generate(length, rng), dtype=np.float64)
    rms = math.sqrt(float(np.mean(x * x)))
    if not rms > 0.0 or not math.isfinite(rms):
        raise DataError(f"{family.name} generator produced a degenerate noise")
    return x / rms


def mix(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """clean + g * noise with g chosen so that 10 log10(P_clean / P_scaled) == snr_db."""
    if not math.isfinite(snr_db):
        raise DataError(f"SNR must be finite, got {snr_db}")
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise DataError(f"clean {clean.shape} and noise {noise.shape} differ in shape")
    p_clean, p_noise = float(np.mean(clean**2)), float(np.mean(noise**2))
    if p_clean == 0.0 or p_noise == 0.0:
        raise DataError("cannot mix at a fixed SNR with a zero-power signal")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    residual = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * math.log10(float(np.mean(clean**2)) / float(np.mean(residual**2)))


# --- corpus ------------------------------------------------------------------


@dataclass(frozen=True)
class _Job:
    index: int
    split: Split
    family: NoiseFamily
    snr_db: float
    seed: int


def record_seed(corpus_seed: int, index: int) -> int:
    """63-bit seed of record ``index``, independent of generation order."""
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def corpus_seed(spec: CorpusSpec) -> int:
    return 0 if spec.seed is None else spec.seed


def plan_corpus(spec: CorpusSpec) -> List[_Job]:
    families = families_for(spec)
    seen, held = families[: len(spec.seen_families)], families[len(spec.seen_families) :]
    rows: List[Tuple[Split, NoiseFamily, float]] = []
    for split, count in ((Split.train, spec.n_train), (Split.test, spec.n_test)):
        for fam in seen:
            rows += [(split, fam, spec.train_snrs[j % len(spec.train_snrs)]) for j in range(count)]
    for fam in held:
        for snr in spec.unseen_snrs:
            rows += [(Split.unseen, fam, snr)] * spec.n_unseen
    return [
        _Job(i, split, fam, float(snr), record_seed(corpus_seed(spec), i))
        for i, (split, fam, snr) in enumerate(rows)
    ]


def _write_signal(path: Path, x: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(x, dtype=SIGNAL_DTYPE).tobytes())


def _generate(job: _Job, spec: CorpusSpec, root: Path) -> ManifestRecord:
    rng = Rng(job.seed, "record")
    clean = gen_clean(rng.child("clean"), spec.signal_length)
    noise = gen_noise(job.family, rng.child("noise"), spec.signal_length)
    noisy = mix(clean, noise, job.snr_db)
    rec_id = f"{job.split.value}-{job.index:05d}"
    clean_path, noisy_path = f"clean/{rec_id}.f64", f"noisy/{rec_id}.f64"
    _write_signal(root / clean_path, clean)
    _write_signal(root / noisy_path, noisy)
    return ManifestRecord(
        id=rec_id,
        split=job.split,
        family=job.family.name,
        label=job.family.index,
        snr_db=job.snr_db,
        seed=job.seed,
        stationary=job.family.stationary,
        clean_path=clean_path,
        noisy_path=noisy_path,
    )


def build_corpus(spec: CorpusSpec, root, threads: int = 1) -> CorpusManifest:
    """Generate every record, write the signal files and ``manifest.json``."""
    root = Path(root)
    for sub in ("clean", "noisy"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    jobs = plan_corpus(spec)
    logger.info(f"generating {len(jobs)} records into {root} with {threads} thread(s)")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda j: _generate(j, spec, root), jobs))
    else:
        records = [_generate(j, spec, root) for j in jobs]

    manifest = CorpusManifest(
        signal_length=spec.signal_length,
        sample_rate=spec.sample_rate,
        seed=corpus_seed(spec),
        classes=list(spec.seen_families),
        held_out=list(spec.held_out_families),
        records=records,
    )
    (root / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n")
    return manifest


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        return CorpusManifest.model_validate_json(path.read_text())
    except ValidationError as e:
        raise SchemaError(f"invalid manifest {path}: {e}")


def read_signal(path, length: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"signal file not found: {path}")
    x = np.fromfile(path, dtype=SIGNAL_DTYPE).astype(np.float64)
    if x.shape != (length,):
        raise SchemaError(f"{path}: expected {length} samples, found {x.size}")
    return x


def write_signal(path, x: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_signal(path, x)


def load_arrays(
    manifest: CorpusManifest, root, records: Sequence[ManifestRecord]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (clean, noisy, labels) for ``records``."""
    if not records:
        raise EmptyInputError("no records selected")
    root = Path(root)
    L = manifest.signal_length
    x0 = np.stack([read_signal(root / r.clean_path, L) for r in records])
    y = np.stack([read_signal(root / r.noisy_path, L) for r in records])
    return x0, y, np.array([r.label for r in records], dtype=np.int64)

"""Log filterbank energy (LFBE) frontend, corpus ingestion and a synthetic keyword corpus."""

from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 64
F_MIN = 20.0
F_MAX = 7600.0
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"LFBE"
CACHE_VERSION = 1


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, 64)
    frame_shift_ms: int = 10
    frame_len_ms: int = 25
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] != N_MELS:
            raise FeatureError(f"expected (T>=1, {N_MELS}) frames, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class LabeledUtterance:
    features: FeatureSequence
    label: int
    source_id: str


@dataclass(frozen=True)
class SynthCorpusSpec:
    num_classes: int = 10
    utterances_per_class: int = 200
    utterance_sec: float = 1.0
    seed: int = 0
    noise_level: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise FeatureError("num_classes must be >= 2")
        if self.utterances_per_class < 1:
            raise FeatureError("utterances_per_class must be >= 1")
        if not self.utterance_sec > 0:
            raise FeatureError("utterance_sec must be > 0")
        if self.noise_level < 0:
            raise FeatureError("noise_level must be >= 0")


def num_frames(num_samples: int) -> int:
    if num_samples < FRAME_LEN:
        raise FeatureError("utterance too short")
    return 1 + (num_samples - FRAME_LEN) // FRAME_SHIFT


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """Triangular HTK-mel filters, shape (64, N_FFT // 2 + 1)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(F_MIN), _hz_to_mel(F_MAX), N_MELS + 2))
    freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    n = np.arange(FRAME_LEN)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / FRAME_LEN)  # periodic Hann
    w.setflags(write=False)
    return w


def _as_float_pcm(pcm) -> np.ndarray:
    pcm = np.asarray(pcm)
    if np.issubdtype(pcm.dtype, np.integer):
        return pcm.astype(np.float64) / 32768.0
    return pcm.astype(np.float64)


def compute_lfbe(pcm, sample_rate: int = SAMPLE_RATE) -> FeatureSequence:
    """Compute 64-band log mel filterbank energies.

    Integer input is treated as 16-bit PCM and scaled to [-1, 1); float input
    is used as is.

    Args:
        pcm: 1-D waveform at 16 kHz.
        sample_rate: declared rate of ``pcm``; anything but 16000 is rejected.

    Returns:
        FeatureSequence with ``1 + (N - 400) // 160`` frames.
    """
    if sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    x = _as_float_pcm(pcm)
    if x.ndim != 1:
        raise FeatureError("pcm must be one-dimensional")
    t = num_frames(len(x))
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_SHIFT * np.arange(t)[:, None]
    frames = x[idx] * _window()
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energy = power @ mel_filterbank().T
    return FeatureSequence(np.log(np.maximum(energy, LOG_FLOOR)))


# --- WAV and feature cache IO -------------------------------------------------


def read_wav(path) -> np.ndarray:
    """Read a mono PCM16 16 kHz RIFF file into an int16 array."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2 or f.getnchannels() != 1:
            raise FeatureError(f"{path}: expected mono 16-bit PCM")
        if f.getframerate() != SAMPLE_RATE:
            raise FeatureError(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()}")
        data = f.readframes(f.getnframes())
    return np.frombuffer(data, dtype="<i2").copy()


def write_wav(path, pcm: np.ndarray) -> None:
    pcm = np.asarray(pcm, dtype="<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def write_feature_cache(path, feats: FeatureSequence) -> None:
    t, d = feats.frames.shape
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, t, d)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(feats.frames, dtype="<f4").tobytes())


def read_feature_cache(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FeatureError(f"{path}: bad magic")
    version, t, d = struct.unpack("<III", raw[4:16])
    if version != CACHE_VERSION:
        raise FeatureError(f"{path}: unsupported cache version {version}")
    body = np.frombuffer(raw[16:], dtype="<f4")
    if body.size != t * d:
        raise FeatureError(f"{path}: truncated cache ({body.size} != {t}x{d})")
    return FeatureSequence(body.reshape(t, d).astype(np.float64))


# --- corpora ------------------------------------------------------------------


@dataclass
class LoadStats:
    loaded: int = 0
    skipped: int = 0


def _fit_length(pcm: np.ndarray, n: int) -> np.ndarray:
    if len(pcm) >= n:
        return pcm[:n]
    return np.concatenate([pcm, np.zeros(n - len(pcm), dtype=pcm.dtype)])


def load_gsc_layout(
    root_dir, clip_sec: Optional[float] = 1.0, stats: Optional[LoadStats] = None
) -> Tuple[List[LabeledUtterance], dict]:
    """Load ``<root>/<class>/*.wav`` into labeled LFBE utterances.

    Classes are indexed in lexicographic order of their directory names.
    Each clip is zero-padded or cropped to ``clip_sec`` (``None`` keeps the
    native length). Unreadable files are skipped and counted in ``stats``.
    """
    root = Path(root_dir)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise FeatureError(f"no class directories under {root}")
    stats = stats if stats is not None else LoadStats()
    class_map = {d.name: i for i, d in enumerate(class_dirs)}
    target_len = None if clip_sec is None else int(round(clip_sec * SAMPLE_RATE))
    out = []
    for d in class_dirs:
        for wav_path in sorted(d.glob("*.wav")):
            try:
                pcm = read_wav(wav_path)
                if target_len is not None:
                    pcm = _fit_length(pcm, target_len)
                feats = compute_lfbe(pcm)
            except (FeatureError, wave.Error, EOFError, OSError) as e:
                stats.skipped += 1
                logger.warning("skipping %s: %s", wav_path, e)
                continue
            stats.loaded += 1
            out.append(LabeledUtterance(feats, class_map[d.name], str(wav_path.relative_to(root))))
    if stats.skipped:
        logger.warning("skipped %d unreadable files under %s", stats.skipped, root)
    return out, class_map


def class_template(k: int, num_samples: int) -> np.ndarray:
    """Noiseless waveform for class ``k``: harmonic stack on 120 + 60k Hz with AM envelope."""
    t = np.arange(num_samples) / SAMPLE_RATE
    f0 = 120.0 + 60.0 * k
    dur = num_samples / SAMPLE_RATE
    carrier = np.zeros(num_samples)
    for h in range(1, int(4000.0 // f0) + 1):
        carrier += np.sin(2.0 * np.pi * h * f0 * t + 0.3 * h * k) / h
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * t / dur)
    envelope *= 1.0 + 0.5 * np.sin(2.0 * np.pi * (2.0 + 0.5 * k) * t)
    x = envelope * carrier
    return x / np.max(np.abs(x))


SYNTH_LEVEL = 0.05  # fraction of int16 full scale per unit of template/noise amplitude


def synthesize_pcm(spec: SynthCorpusSpec) -> Iterator[Tuple[int, str, np.ndarray]]:
    n = int(round(spec.utterance_sec * SAMPLE_RATE))
    num_frames(n)
    rng = np.random.default_rng(spec.seed)
    templates = [class_template(k, n) for k in range(spec.num_classes)]
    for k in range(spec.num_classes):
        for j in range(spec.utterances_per_class):
            x = templates[k] + spec.noise_level * rng.standard_normal(n)
            pcm = np.clip(np.round(SYNTH_LEVEL * 32767.0 * x), -32768, 32767).astype(np.int16)
            yield k, f"synth/{k:03d}/{j:05d}", pcm


def synthesize_corpus(spec: SynthCorpusSpec) -> List[LabeledUtterance]:
    """Deterministic toy keyword corpus; a pure function of ``spec``."""
    return [
        LabeledUtterance(compute_lfbe(pcm), k, sid) for k, sid, pcm in synthesize_pcm(spec)
    ]


def stack_frames(utts: Sequence[LabeledUtterance]) -> np.ndarray:
    """Stack equal-length utterances into a (N, T, 64) array."""
    lengths = {u.features.num_frames for u in utts}
    if len(lengths) != 1:
        raise FeatureError(f"utterances must share one length to batch, got {sorted(lengths)}")
    return np.stack([u.features.frames for u in utts])


# --- on-disk corpora ----------------------------------------------------------

INDEX_FILE = "index.csv"


def save_corpus(out_dir, utts: Sequence[LabeledUtterance], class_names: Sequence[str]) -> None:
    """Write LFBE caches under ``features/`` plus ``index.csv`` (path,label,source_id) and ``classes.txt``."""
    out = Path(out_dir)
    rows = ["path,label,source_id"]
    for i, u in enumerate(utts):
        rel = Path("features") / f"{i:06d}.lfbe"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_feature_cache(out / rel, u.features)
        rows.append(f"{rel.as_posix()},{u.label},{u.source_id}")
    (out / INDEX_FILE).write_text("\n".join(rows) + "\n")
    (out / "classes.txt").write_text("\n".join(class_names) + "\n")


def load_corpus(path) -> Tuple[List[LabeledUtterance], dict]:
    """Load either a cached corpus (``index.csv``) or a GSC-layout WAV tree."""
    root = Path(path)
    if not root.is_dir():
        raise FeatureError(f"data directory not found: {root}")
    if not (root / INDEX_FILE).is_file():
        return load_gsc_layout(root)
    names = (root / "classes.txt").read_text().split()
    utts = []
    lines = (root / INDEX_FILE).read_text().splitlines()[1:]
    for line in lines:
        rel, label, sid = line.split(",", 2)
        utts.append(LabeledUtterance(read_feature_cache(root / rel), int(label), sid))
    if not utts:
        raise FeatureError(f"{root}: empty corpus")
    return utts, {n: i for i, n in enumerate(names)}


def synth_class_names(num_classes: int) -> List[str]:
    return [f"kw{k:02d}" for k in range(num_classes)]

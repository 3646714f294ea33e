"""Acoustic frontend: WAV I/O, log-mel features, SpecAugment time masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import InputError


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    """Time-major (T, F) log-mel matrix."""

    frames: np.ndarray
    frame_rate: float = 100.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length


@dataclass
class SpecAugmentPolicy:
    num_time_masks: int = 2
    max_mask_width: int = 10
    fill: str = "zero"  # or "mean"
    seed: int = 0

    def __post_init__(self):
        if self.num_time_masks < 0 or self.max_mask_width < 0:
            raise InputError("mask count and width must be non-negative")
        if self.fill not in ("zero", "mean"):
            raise InputError(f"unknown mask fill {self.fill!r}")


def read_wav(path: str | Path) -> Waveform:
    """Read a mono PCM16 or float WAV file into [-1, 1] floats."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InputError(f"{path}: expected single-channel audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """HTK-style triangular filters, shape (n_mels, n_fft // 2 + 1), peak 1."""
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    mel_edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    bin_mel = hz_to_mel(np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate))
    lo, mid, hi = mel_edges[:-2, None], mel_edges[1:-1, None], mel_edges[2:, None]
    up = (bin_mel[None, :] - lo) / (mid - lo)
    down = (hi - bin_mel[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def compute_log_mel(wave: Waveform, cfg: FrontendConfig | None = None) -> FeatureSequence:
    """Frame without padding: T = (len - window) // hop + 1."""
    cfg = cfg or FrontendConfig(sample_rate=wave.sample_rate)
    if wave.sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate {wave.sample_rate} != frontend rate {cfg.sample_rate}")
    x = wave.samples
    if not np.all(np.isfinite(x)):
        raise InputError("waveform contains non-finite samples")
    win, hop = cfg.window_length, cfg.hop_length
    if len(x) < win:
        raise InputError(f"utterance too short: {len(x)} samples < window of {win}")
    n_frames = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return FeatureSequence(np.log(mel + cfg.log_floor), cfg.frame_rate)


def apply_time_masks(feats: FeatureSequence, policy: SpecAugmentPolicy) -> FeatureSequence:
    rng = np.random.default_rng(policy.seed)
    out = feats.frames.copy()
    T = out.shape[0]
    fill = 0.0 if policy.fill == "zero" else feats.frames.mean(axis=0)
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, policy.max_mask_width + 1))
        start = int(rng.integers(0, T))
        out[start : min(T, start + width)] = fill
    return FeatureSequence(out, feats.frame_rate)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = field(default=1e-5, repr=False)

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "NormStats":
        return cls(frames.mean(axis=0), frames.std(axis=0))

    @classmethod
    def from_corpus(cls, sequences) -> "NormStats":
        # Streamed sums keep memory flat over the corpus.
        total = sq = None
        count = 0
        for f in sequences:
            a = f.frames if isinstance(f, FeatureSequence) else np.asarray(f)
            total = a.sum(0) if total is None else total + a.sum(0)
            sq = (a**2).sum(0) if sq is None else sq + (a**2).sum(0)
            count += a.shape[0]
        if not count:
            raise InputError("cannot compute statistics over an empty corpus")
        mean = total / count
        return cls(mean, np.sqrt(np.maximum(sq / count - mean**2, 0.0)))

    def save(self, path: str | Path) -> None:
        lines = [f"{m!r} {s!r}" for m, s in zip(self.mean.tolist(), self.std.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        arr = np.array([[float(a), float(b)] for a, b in rows])
        return cls(arr[:, 0], arr[:, 1])


def normalize(feats: FeatureSequence, stats: NormStats | None = None) -> FeatureSequence:
    """Per-bin standardization; falls back to the utterance's own statistics."""
    stats = stats if stats is not None else NormStats.from_frames(feats.frames)
    if len(stats.mean) != feats.num_bins or len(stats.std) != feats.num_bins:
        raise InputError(f"stats have {len(stats.mean)} bins, features have {feats.num_bins}")
    std = np.maximum(stats.std, stats.eps)
    return FeatureSequence((feats.frames - stats.mean) / std, feats.frame_rate)

"""Manifests, corpus mixing, condition filters and the synthetic toy corpus."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import DataError
from .frontend import Waveform, write_wav

log = logging.getLogger(__name__)

DIALECTS = ("SG", "US", "IRI", "OTHER")
STYLES = ("whisper", "normal")
HEADER = ("utt_id", "audio_path", "dialect", "style", "duration_s", "transcript")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    audio_path: str
    dialect: str
    style: str
    duration: float
    transcript: str
    root: str = field(default="", compare=False, repr=False)

    @property
    def audio(self) -> Path:
        p = Path(self.audio_path)
        return p if p.is_absolute() or not self.root else Path(self.root) / p


def load_manifest(path: str | Path, missing_audio: str = "warn") -> list[ManifestEntry]:
    """Parse a TSV manifest. ``missing_audio`` is one of ``warn``, ``fail``, ``ignore``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    lines = text.splitlines()
    if tuple(lines[0].split("\t")) != HEADER:
        raise DataError(f"{path}:1: header must be {'<TAB>'.join(HEADER)}")
    entries, seen = [], set()
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(HEADER):
            raise DataError(f"{path}:{n}: expected {len(HEADER)} columns, got {len(cols)}")
        utt, audio, dialect, style, dur, text_ = cols
        if dialect not in DIALECTS:
            raise DataError(f"{path}:{n}: unknown dialect {dialect!r}")
        if style not in STYLES:
            raise DataError(f"{path}:{n}: unknown style {style!r}")
        if utt in seen:
            raise DataError(f"{path}:{n}: duplicate utt_id {utt!r}")
        try:
            duration = float(dur)
        except ValueError:
            raise DataError(f"{path}:{n}: bad duration {dur!r}") from None
        if not duration > 0:
            raise DataError(f"{path}:{n}: duration must be positive")
        seen.add(utt)
        e = ManifestEntry(utt, audio, dialect, style, duration, text_, str(path.parent))
        if missing_audio != "ignore" and not e.audio.exists():
            if missing_audio == "fail":
                raise DataError(f"{path}:{n}: missing audio file {e.audio}")
            log.warning("%s:%d: missing audio file %s", path, n, e.audio)
        entries.append(e)
    return entries


def write_manifest(path: str | Path, entries) -> None:
    rows = ["\t".join(HEADER)]
    for e in entries:
        rows.append("\t".join([e.utt_id, e.audio_path, e.dialect, e.style,
                               repr(float(e.duration)), e.transcript]))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass
class MixSpec:
    """Sources as ``(entries, weight)``; ``weight=None`` takes a source whole.

    Weighted sources share ``num_draws`` items in proportion to their weights.
    """

    sources: list
    num_draws: int = 0
    seed: int = 0


def mix(spec: MixSpec) -> list[ManifestEntry]:
    rng = np.random.default_rng(spec.seed)
    out: list[ManifestEntry] = []
    weighted = [(list(s), w) for s, w in spec.sources if w is not None]
    if any(w < 0 for _, w in weighted):
        raise DataError("mix weights must be non-negative")
    for src, w in spec.sources:
        if w is None:
            out.extend(src)
    total_w = sum(w for _, w in weighted)
    if weighted and total_w > 0 and spec.num_draws > 0:
        # largest-remainder allocation keeps each count within one of exact
        exact = [spec.num_draws * w / total_w for _, w in weighted]
        counts = [int(np.floor(x)) for x in exact]
        order = sorted(range(len(exact)), key=lambda i: -(exact[i] - counts[i]))
        for i in order[: spec.num_draws - sum(counts)]:
            counts[i] += 1
        for (src, _), k in zip(weighted, counts):
            if k and not src:
                raise DataError("cannot draw from an empty source")
            picks = []
            while len(picks) < k:
                picks.extend(rng.permutation(len(src)).tolist())
            for rep, idx in enumerate(picks[:k]):
                e = src[idx]
                cycle = rep // len(src)
                out.append(replace(e, utt_id=f"{e.utt_id}#{cycle}") if cycle else e)
    if not out:
        raise DataError("mix produced an empty manifest")
    return [out[i] for i in rng.permutation(len(out))]


def filter_manifest(entries, dialect: str | None = None, style: str | None = None):
    return [e for e in entries
            if (dialect is None or e.dialect == dialect) and (style is None or e.style == style)]


def batch_by_length(entries, batch_size: int, seed: int = 0) -> list[list[ManifestEntry]]:
    """Sort by duration, cut contiguous batches, shuffle batch order."""
    ordered = sorted(entries, key=lambda e: (e.duration, e.utt_id))
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    perm = np.random.default_rng(seed).permutation(len(batches))
    return [batches[i] for i in perm]


def padding_fraction(batches) -> float:
    padded = total = 0.0
    for b in batches:
        longest = max(e.duration for e in b)
        padded += longest * len(b)
        total += sum(e.duration for e in b)
    return 1.0 - total / padded if padded else 0.0


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

WORDS = ("RED", "BLUE", "GREEN", "YELLOW", "ONE", "TWO",
         "THREE", "FOUR", "UP", "DOWN", "LEFT", "RIGHT")
SAMPLE_RATE = 16000
_DIALECT_SHIFT = {"SG": 1.0, "US": 1.04, "IRI": 0.96, "OTHER": 1.0}
_DIALECT_TEMPO = {"SG": 1.0, "US": 0.95, "IRI": 1.05, "OTHER": 1.0}


def _word_patterns(n_segments: int = 3, seed: int = 1234):
    """Fixed per-word segment formants (F1, F2, F3) in Hz; independent of corpus seed."""
    rng = np.random.default_rng(seed)
    return {w: [(rng.uniform(250, 900), rng.uniform(900, 2400), rng.uniform(2400, 3600))
                for _ in range(n_segments)] for w in WORDS}


_PATTERNS = _word_patterns()


def _envelope(freqs, formants, bandwidth=120.0):
    return sum(np.exp(-0.5 * ((freqs - f) / (bandwidth * (1 + k))) ** 2) / (1 + k)
               for k, f in enumerate(formants))


def _segment(formants, n, style, f0, rng):
    if style == "normal":
        t = np.arange(n) / SAMPLE_RATE
        harmonics = np.arange(1, int(4000 / f0) + 1) * f0
        gains = _envelope(harmonics, formants)
        phases = rng.uniform(0, 2 * np.pi, len(harmonics))
        sig = (gains[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t + phases[:, None])).sum(0)
    else:
        # aperiodic source: white noise shaped by the same formant envelope
        spec = np.fft.rfft(rng.standard_normal(n))
        sig = np.fft.irfft(spec * _envelope(np.fft.rfftfreq(n, 1 / SAMPLE_RATE), formants), n)
    ramp = min(n // 4, 80)
    win = np.ones(n)
    win[:ramp] = win[-ramp:][::-1] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    sig = sig * win
    return sig / (np.sqrt(np.mean(sig**2)) + 1e-12)


def synthesize(words, dialect: str, style: str, rng) -> np.ndarray:
    shift, tempo = _DIALECT_SHIFT[dialect], _DIALECT_TEMPO[dialect]
    f0 = rng.uniform(100, 180)
    parts = [np.zeros(int(0.1 * SAMPLE_RATE))]
    for w in words:
        for formants in _PATTERNS[w]:
            n = int(rng.uniform(0.07, 0.10) * tempo * SAMPLE_RATE)
            jitter = rng.uniform(0.97, 1.03)
            parts.append(_segment([f * shift * jitter for f in formants], n, style, f0, rng))
        parts.append(np.zeros(int(rng.uniform(0.04, 0.12) * SAMPLE_RATE)))
    parts.append(np.zeros(int(0.1 * SAMPLE_RATE)))
    sig = np.concatenate(parts) * 0.1
    if style == "whisper":
        sig *= 10 ** (-12 / 20)
    sig += rng.standard_normal(len(sig)) * 0.002
    return np.clip(sig, -1.0, 1.0)


def make_toy_corpus(out_dir: str | Path, n_utts: int = 200, seed: int = 0,
                    n_other: int | None = None) -> dict[str, list[ManifestEntry]]:
    """Write a deterministic toy corpus and its manifests under ``out_dir``.

    ``n_utts`` dialect-tagged utterances rotate over SG/US/IRI with alternating
    styles; ``n_other`` extra OTHER/normal utterances (default ``n_utts // 2``)
    play the large normal-speech corpus. Splits follow the evaluation design:
    train = SG (both styles, 4 of every 5) + IRI normal + OTHER; test = held-out
    SG, all US, IRI whisper; dev = every 10th training utterance.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise DataError(f"{out} is not writable")
    n_other = n_utts // 2 if n_other is None else n_other
    tagged, other = [], []
    for i in range(n_utts + n_other):
        rng = np.random.default_rng([seed, i])
        if i < n_utts:
            dialect, style = ("SG", "US", "IRI")[i % 3], STYLES[(i // 3) % 2]
        else:
            dialect, style = "OTHER", "normal"
        words = [WORDS[k] for k in rng.integers(0, len(WORDS), rng.integers(2, 7))]
        samples = synthesize(words, dialect, style, rng)
        utt = f"toy{i:05d}"
        rel = f"wav/{utt}.wav"
        write_wav(out / rel, Waveform(samples, SAMPLE_RATE))
        e = ManifestEntry(utt, rel, dialect, style, len(samples) / SAMPLE_RATE, " ".join(words), str(out))
        (tagged if i < n_utts else other).append(e)

    sg = filter_manifest(tagged, "SG")
    sg_test = [e for k, e in enumerate(sg) if k % 5 == 4]
    sg_train = [e for k, e in enumerate(sg) if k % 5 != 4]
    pool = sg_train + filter_manifest(tagged, "IRI", "normal") + other
    dev = pool[9::10]
    dev_ids = {e.utt_id for e in dev}
    train = mix(MixSpec([([e for e in pool if e.utt_id not in dev_ids], None)], seed=seed))
    test = sg_test + filter_manifest(tagged, "US") + filter_manifest(tagged, "IRI", "whisper")
    manifests = {"all": tagged, "other": other, "train": train, "dev": dev, "test": test}
    for name, entries in manifests.items():
        write_manifest(out / f"{name}.tsv", entries)
    return manifests

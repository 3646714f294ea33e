"""Glue between manifests, features, the model and search."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from .frontend import (FeatureSequence, FrontendConfig, NormStats, SpecAugmentPolicy,
                       apply_time_masks, compute_log_mel, normalize, read_wav)
from .search import ModelScorer, beam_search, greedy_decode
from .tokenizer import PAD, Vocab

WORKERS_ENV = "CONMAMBA_WORKERS"


def extract_features(entries, cfg: FrontendConfig | None = None) -> dict[str, np.ndarray]:
    cfg = cfg or FrontendConfig()
    return {e.utt_id: compute_log_mel(read_wav(e.audio), cfg).frames for e in entries}


def collate(frames: list[np.ndarray], stats: NormStats | None, policies=None, dtype=torch.float32):
    """Normalize, optionally time-mask, and zero-pad to a (B, T, F) batch."""
    feats = []
    for k, f in enumerate(frames):
        seq = normalize(FeatureSequence(f), stats)
        if policies is not None:
            seq = apply_time_masks(seq, policies[k])
        feats.append(seq.frames)
    lengths = torch.tensor([len(f) for f in feats])
    out = np.zeros((len(feats), int(lengths.max()), feats[0].shape[1]))
    for k, f in enumerate(feats):
        out[k, : len(f)] = f
    return torch.as_tensor(out, dtype=dtype), lengths


def collate_tokens(token_lists: list[list[int]]):
    """Teacher-forcing inputs (drop last) and targets (drop first), PAD-filled."""
    T = max(len(t) for t in token_lists) - 1
    inputs = torch.full((len(token_lists), T), PAD, dtype=torch.long)
    targets = torch.full((len(token_lists), T), PAD, dtype=torch.long)
    for k, t in enumerate(token_lists):
        inputs[k, : len(t) - 1] = torch.tensor(t[:-1])
        targets[k, : len(t) - 1] = torch.tensor(t[1:])
    return inputs, targets


def time_mask_policies(n: int, seed: int, num_masks: int, max_width: int):
    rng = np.random.default_rng(seed)
    return [SpecAugmentPolicy(num_masks, max_width, "zero", int(s))
            for s in rng.integers(0, 2**31 - 1, n)]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@torch.no_grad()
def recognize_one(model, vocab: Vocab, frames: np.ndarray, stats, mode: str = "beam",
                  beam_size: int = 8, alpha: float = 0.6, max_len: int = 200):
    feats, lengths = collate([frames], stats)
    enc = model.encode(feats, lengths)
    scorer = ModelScorer(model, enc, vocab.bos_id, vocab.eos_id)
    if mode == "greedy":
        hyp = greedy_decode(scorer, max_len)
    elif mode == "beam":
        hyp = beam_search(scorer, beam_size, alpha, max_len)[0]
    else:
        raise ValueError(f"unknown search mode {mode!r}")
    return vocab.decode(hyp.tokens), hyp


def recognize(model, vocab: Vocab, features: dict, stats, entries, mode: str = "beam",
              beam_size: int = 8, alpha: float = 0.6, max_len: int = 200, workers: int | None = None):
    """Decode entries; returns ``[(utt_id, text, Hypothesis)]`` in manifest order."""
    model.eval()
    workers = workers or worker_count()

    def run(e):
        text, hyp = recognize_one(model, vocab, features[e.utt_id], stats, mode, beam_size, alpha, max_len)
        hyp.state = None
        return e.utt_id, text, hyp

    if workers == 1:
        return [run(e) for e in entries]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, entries))

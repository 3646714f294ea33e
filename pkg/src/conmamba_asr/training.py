"""Loss, AdamW, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import ConfigError, DataError, NumericError
from .data import batch_by_length
from .frontend import FrontendConfig, NormStats
from .model import PRESET_NAMES, ASRModel, ModelConfig
from .pipeline import collate, collate_tokens, extract_features, time_mask_policies
from .tokenizer import PAD, Vocab

log = logging.getLogger(__name__)

LOSS_HEADER = ("epoch", "step", "split", "loss", "lr")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 1000
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    grad_clip_norm: float = 5.0
    seed: int = 0
    preset: str = "Ver1-small"
    spec_augment: bool = True
    num_time_masks: int = 2
    max_mask_width: int = 10
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "peak_lr", "warmup_steps", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        for name in ("weight_decay", "label_smoothing", "dropout"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be non-negative")
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}")


# ---------------------------------------------------------------------------
# Loss, optimizer, schedule
# ---------------------------------------------------------------------------


def label_smoothed_ce(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.1,
                      pad_id: int = PAD) -> torch.Tensor:
    """Mean over non-pad positions of KL(q || softmax(logits)).

    q puts ``1 - smoothing`` on the target and spreads ``smoothing`` evenly over
    every non-pad symbol (the target included). With ``smoothing = 0`` this is
    plain cross-entropy. Gradients flow through autograd.
    """
    V = logits.shape[-1]
    logits = logits.reshape(-1, V)
    targets = targets.reshape(-1)
    keep = targets != pad_id
    if not bool(keep.any()):
        raise DataError("all target positions are padding")
    logp = torch.log_softmax(logits[keep], dim=-1)
    tgt = targets[keep]
    q = torch.full_like(logp, smoothing / (V - 1))
    q[:, pad_id] = 0.0
    q.scatter_add_(1, tgt.unsqueeze(1), torch.full_like(logp[:, :1], 1.0 - smoothing))
    pos = q > 0
    kl = torch.where(pos, q * (torch.log(torch.where(pos, q, torch.ones_like(q))) - logp),
                     torch.zeros_like(q))
    return kl.sum(-1).mean()


class AdamW:
    """Adam with decoupled weight decay over a list of tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params]
        self.beta1, self.beta2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step_count = 0
        self.skipped = 0

    @torch.no_grad()
    def step(self, lr: float, grads=None) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite grads."""
        grads = grads if grads is not None else [p.grad for p in self.params]
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient, skipping step (%d skipped so far)", self.skipped)
            return False
        self.step_count += 1
        bc1 = 1 - self.beta1**self.step_count
        bc2 = 1 - self.beta2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            if self.weight_decay:
                p.mul_(1 - lr * self.weight_decay)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))
        return True

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


def adamw_step(params, grads, state: AdamW, lr: float) -> bool:
    return state.step(lr, grads)


def lr_at(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Noam shape: linear warmup to ``peak_lr``, then inverse square-root decay."""
    step = max(step, 1)
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-6))
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"CMASRP01"
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_t) for dt, (code, np_t) in _DTYPES.items()}


def save_params(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    """Named, shape-tagged, little-endian blob: magic, count, then per tensor
    ``u32 name_len | name | u8 dtype | u32 ndim | u64 dims... | data``."""
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            code, np_t = _DTYPES[t.dtype]
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", code, t.dim()))
            f.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            f.write(t.detach().cpu().numpy().astype(np_t).tobytes())


def load_params(path: str | Path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise DataError(f"{path}: not a parameter blob")
    (count,), off = struct.unpack_from("<I", buf, 8), 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        dt, np_t = _CODES[code]
        size = int(np.prod(shape)) * np.dtype(np_t).itemsize
        arr = np.frombuffer(buf, dtype=np_t, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        out[name] = torch.from_numpy(arr.astype(np.dtype(np_t).newbyteorder("="))).to(dt)
    return out


def save_checkpoint(ckpt_dir: str | Path, model: ASRModel, vocab: Vocab, stats: NormStats | None,
                    extra: dict | None = None) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "params.bin", model.state_dict())
    vocab.save(d / "vocab.txt")
    if stats is not None:
        stats.save(d / "norm_stats.txt")
    snapshot = {"model": model.cfg.to_dict(), **(extra or {})}
    (d / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(ckpt_dir: str | Path):
    """Return ``(model, vocab, stats, snapshot)``; the model is in eval mode."""
    d = Path(ckpt_dir)
    if not (d / "params.bin").exists():
        raise DataError(f"{d} is not a checkpoint directory")
    snapshot = json.loads((d / "config.json").read_text())
    model = ASRModel(ModelConfig.from_dict(snapshot["model"]))
    model.load_state_dict(load_params(d / "params.bin"))
    model.eval()
    stats = NormStats.load(d / "norm_stats.txt") if (d / "norm_stats.txt").exists() else None
    return model, Vocab.load(d / "vocab.txt"), stats, snapshot


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class LossLogRecord:
    epoch: int
    step: int
    split: str
    loss: float
    lr: float

    def row(self):
        return [self.epoch, self.step, self.split, f"{self.loss:.6f}", f"{self.lr:.8g}"]


@dataclass
class TrainResult:
    out_dir: Path
    best_dir: Path
    final_dir: Path
    records: list
    seconds: float


def _batch_loss(model, feats_by_id, stats, vocab, batch, cfg: TrainConfig, policies=None):
    feats, lengths = collate([feats_by_id[e.utt_id] for e in batch], stats, policies)
    inputs, targets = collate_tokens([vocab.encode(e.transcript) for e in batch])
    logits = model(feats, lengths, inputs)
    return label_smoothed_ce(logits, targets, cfg.label_smoothing)


@torch.no_grad()
def evaluate_loss(model, feats_by_id, stats, vocab, entries, cfg: TrainConfig) -> float:
    model.eval()
    total = count = 0.0
    for batch in batch_by_length(entries, cfg.batch_size, seed=0):
        n = sum(len(vocab.encode(e.transcript)) - 1 for e in batch)
        total += float(_batch_loss(model, feats_by_id, stats, vocab, batch, cfg)) * n
        count += n
    return total / count


def train(cfg: TrainConfig, train_entries, dev_entries, vocab: Vocab, out_dir: str | Path,
          model_cfg: ModelConfig | None = None, frontend: FrontendConfig | None = None,
          features: dict | None = None, snapshot: dict | None = None) -> TrainResult:
    """Train and write ``loss.csv`` (per epoch), ``loss_steps.csv`` and the
    ``best``/``final`` checkpoints under ``out_dir``."""
    start = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries, dev_entries = list(train_entries), list(dev_entries)
    if not train_entries:
        raise DataError("empty training manifest")
    frontend = frontend or FrontendConfig()
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    if features is None:
        features = extract_features(train_entries + dev_entries, frontend)
    stats = NormStats.from_corpus(features[e.utt_id] for e in train_entries)
    if model_cfg is None:
        model_cfg = ModelConfig.from_preset(cfg.preset, len(vocab), frontend.n_mels, dropout=cfg.dropout)
    model_cfg = model_cfg.with_vocab(len(vocab))
    model = ASRModel(model_cfg)
    params = list(model.parameters())
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    extra = {"train": asdict(cfg), "frontend": asdict(frontend), **(snapshot or {})}
    (out / "config.json").write_text(json.dumps({"model": model_cfg.to_dict(), **extra},
                                                indent=2, sort_keys=True) + "\n")

    records: list[LossLogRecord] = []
    epoch_file = open(out / "loss.csv", "w", newline="")
    step_file = open(out / "loss_steps.csv", "w", newline="")
    epoch_log, step_log = csv.writer(epoch_file), csv.writer(step_file)
    epoch_log.writerow(LOSS_HEADER)
    step_log.writerow(LOSS_HEADER)
    best = math.inf
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            losses = []
            for b, batch in enumerate(batch_by_length(train_entries, cfg.batch_size, seed=cfg.seed * 1000 + epoch)):
                policies = None
                if cfg.spec_augment:
                    policies = time_mask_policies(len(batch), cfg.seed * 7919 + step,
                                                  cfg.num_time_masks, cfg.max_mask_width)
                step += 1
                lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps)
                for p in params:
                    p.grad = None
                loss = _batch_loss(model, features, stats, vocab, batch, cfg, policies)
                if not torch.isfinite(loss):
                    log.warning("non-finite loss at step %d", step)
                    losses.append(math.inf)
                    continue
                loss.backward()
                clip_grad_norm(params, cfg.grad_clip_norm)
                opt.step(lr)
                losses.append(loss.item())
                step_log.writerow(LossLogRecord(epoch, step, "train", losses[-1], lr).row())
            finite = [x for x in losses if math.isfinite(x)]
            if not finite:
                raise NumericError(f"training diverged: no finite loss in epoch {epoch}")
            rec = LossLogRecord(epoch, step, "train", float(np.mean(finite)), lr)
            records.append(rec)
            epoch_log.writerow(rec.row())
            if dev_entries:
                dev_loss = evaluate_loss(model, features, stats, vocab, dev_entries, cfg)
                rec = LossLogRecord(epoch, step, "eval", dev_loss, lr)
                records.append(rec)
                epoch_log.writerow(rec.row())
            else:
                dev_loss = records[-1].loss
            epoch_file.flush()
            step_file.flush()
            log.info("epoch %d step %d train %.4f eval %.4f", epoch, step, records[-2 if dev_entries else -1].loss, dev_loss)
            if dev_loss < best:
                best = dev_loss
                save_checkpoint(out / "best", model, vocab, stats, extra)
    finally:
        epoch_file.close()
        step_file.close()
    save_checkpoint(out / "final", model, vocab, stats, extra)
    return TrainResult(out, out / "best", out / "final", records, time.time() - start)


def read_loss_csv(path: str | Path) -> list[LossLogRecord]:
    with open(path, newline="") as f:
        return [LossLogRecord(int(r["epoch"]), int(r["step"]), r["split"], float(r["loss"]), float(r["lr"]))
                for r in csv.DictReader(f)]


def config_from_dict(kind, values: dict):
    names = {f.name for f in fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)

"""Unidirectional Mamba decoder with multi-head cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import InputError
from .encoder import EncodedSequence, FeedForward
from .ssm import MambaBlock, ScanState


@dataclass
class DecoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 144
    d_ff: int = 576
    vocab_size: int = 32
    d_state: int = 16
    expand: int = 2
    dropout: float = 0.1
    tie_embeddings: bool = True
    sinusoidal_positions: bool = False

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise InputError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")


class CrossAttention(nn.Module):
    """Scaled dot-product attention from decoder positions onto encoder frames."""

    def __init__(self, d_model: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.h, self.dh = num_heads, d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.h, self.dh).transpose(1, 2)

    def memory(self, enc: torch.Tensor):
        """Per-head keys and values for encoder frames (B, Te, d)."""
        return self._split(self.k_proj(enc)), self._split(self.v_proj(enc))

    def forward(self, q, enc=None, enc_mask=None, memory=None, return_weights=False):
        k, v = memory if memory is not None else self.memory(enc)
        if enc_mask is not None and not bool(enc_mask.any(-1).all()):
            raise InputError("cross-attention over a fully masked encoder sequence")
        scores = self._split(self.q_proj(q)) @ k.transpose(-1, -2) / math.sqrt(self.dh)
        if enc_mask is not None:
            scores = scores.masked_fill(~enc_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).flatten(2)
        out = self.out_proj(ctx)
        return (out, weights) if return_weights else out


@dataclass
class DecoderState:
    """Incremental decoding state: per-layer Mamba carries plus cached K/V."""

    layers: list  # ScanState per layer, or None before the first token
    memory: list  # (k, v) per layer
    mask: torch.Tensor  # (B_mem, Te)
    step: int = 0

    def select(self, index: torch.Tensor) -> "DecoderState":
        layers = [None if s is None else s.select(index) for s in self.layers]
        memory, mask = self.memory, self.mask
        if mask.shape[0] > 1:
            memory = [(k.index_select(0, index), v.index_select(0, index)) for k, v in memory]
            mask = mask.index_select(0, index)
        return DecoderState(layers, memory, mask, self.step)


class DecoderLayer(nn.Module):
    """y + Mamba(LN y) -> + CrossAttn(LN ., enc) -> + FFN(LN .)."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_mamba, self.mamba = nn.LayerNorm(d), MambaBlock(d, cfg.d_state, cfg.expand)
        self.ln_attn, self.attn = nn.LayerNorm(d), CrossAttention(d, cfg.num_heads, cfg.dropout)
        self.ln_ff, self.ff = nn.LayerNorm(d), FeedForward(d, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, enc_mask, state: ScanState | None = None, mode="parallel"):
        m, state = self.mamba(self.ln_mamba(y), state, mode)
        y = y + self.dropout(m)
        y = y + self.dropout(self.attn(self.ln_attn(y), enc_mask=enc_mask, memory=memory))
        y = y + self.dropout(self.ff(self.ln_ff(y)))
        return y, state


def sinusoid(positions: torch.Tensor, d: int) -> torch.Tensor:
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float32) / d)
    ang = positions.float().unsqueeze(-1) * inv
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-2)[..., :d]


class MambaDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        nn.init.normal_(self.embed.weight, std=cfg.d_model**-0.5)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        self.ln_out = nn.LayerNorm(cfg.d_model)
        self.output = None if cfg.tie_embeddings else nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def _embed(self, tokens, offset: int = 0):
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise InputError(f"token id out of vocabulary (size {self.cfg.vocab_size})")
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model)
        if self.cfg.sinusoidal_positions:
            pos = torch.arange(offset, offset + tokens.shape[1])
            x = x + sinusoid(pos, self.cfg.d_model).to(x.dtype)
        return x

    def _logits(self, y):
        y = self.ln_out(y)
        if self.output is None:
            return y @ self.embed.weight.t()
        return self.output(y)

    def init_state(self, enc: EncodedSequence) -> DecoderState:
        memory = [layer.attn.memory(enc.frames) for layer in self.layers]
        return DecoderState([None] * len(self.layers), memory, enc.mask, 0)

    def forward(self, tokens: torch.Tensor, enc: EncodedSequence) -> torch.Tensor:
        """Teacher-forced logits (B, Tq, V); row t scores token t + 1."""
        logits, _ = self._run(tokens, self.init_state(enc), "parallel")
        return logits

    forward_teacher_forced = forward

    def decode_step(self, state: DecoderState, last_token: torch.Tensor):
        """Consume one token per hypothesis (B,), return next-token logits (B, V)."""
        logits, state = self._run(last_token.unsqueeze(1), state, "sequential")
        return logits[:, 0], state

    def _run(self, tokens, state: DecoderState, mode):
        y = self._embed(tokens, state.step)
        new_layers = []
        for layer, mem, st in zip(self.layers, state.memory, state.layers):
            y, st = layer(y, mem, state.mask, st, mode)
            new_layers.append(st)
        new_state = DecoderState(new_layers, state.memory, state.mask, state.step + tokens.shape[1])
        return self._logits(y), new_state


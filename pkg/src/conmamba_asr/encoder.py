"""ConMamba encoder: 4x conv subsampling followed by Macaron ConMamba layers.

Frame-rate chain: features at 100 Hz -> stride 2 -> stride 2 -> 25 Hz, so an
input of T frames yields ``(T // 2) // 2`` encoder frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import InputError
from .ssm import MambaBlock, mamba_block_forward


@dataclass
class EncoderConfig:
    num_layers: int = 12
    d_model: int = 144
    d_ff: int = 576
    conv_kernel: int = 31
    subsample_factor: int = 4
    subsample_channels: int = 64
    n_mels: int = 80
    d_state: int = 16
    expand: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.subsample_factor != 4:
            raise InputError("subsample_factor must be 4 (100 Hz -> 25 Hz)")
        if self.num_layers < 1:
            raise InputError("encoder needs at least one layer")


@dataclass
class EncodedSequence:
    frames: torch.Tensor  # (B, T', d_model)
    lengths: torch.Tensor  # (B,)

    @property
    def mask(self) -> torch.Tensor:
        return length_mask(self.lengths, self.frames.shape[1])


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    """(B, T) boolean mask, True on valid frames."""
    return torch.arange(T, device=lengths.device).unsqueeze(0) < lengths.unsqueeze(1)


def subsampled_length(T):
    return (T // 2) // 2


class Conv2dSubsampling(nn.Module):
    """Two 3x3 stride-2 convolutions over (time, mel), then a linear map to d_model.

    Time is padded by one frame on the left only, which gives ``T -> T // 2`` per
    stage and keeps every valid output frame inside its utterance.
    """

    def __init__(self, n_mels: int, d_model: int, channels: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(1, channels, 3, stride=2, bias=False)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, bias=False)
        f_out = ((n_mels - 3) // 2 + 1 - 3) // 2 + 1
        self.out = nn.Linear(channels * f_out, d_model)

    def forward(self, feats, lengths=None):
        B, T, _ = feats.shape
        if T < 4 or (lengths is not None and int(lengths.min()) < 4):
            raise InputError("utterance too short for 4x subsampling (need >= 4 frames)")
        x = feats.unsqueeze(1)
        x = F.relu(self.conv1(F.pad(x, (0, 0, 1, 0))))
        x = F.relu(self.conv2(F.pad(x, (0, 0, 1, 0))))
        x = self.out(x.permute(0, 2, 1, 3).flatten(2))
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        return x, subsampled_length(lengths)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.1):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.lin2(self.dropout(F.silu(self.lin1(x))))


class ConvModule(nn.Module):
    """pointwise -> GLU -> depthwise -> LayerNorm -> Swish -> pointwise.

    LayerNorm stands in for BatchNorm so padded frames never leak into valid ones.
    """

    def __init__(self, d_model: int, kernel: int = 31, dropout: float = 0.1):
        super().__init__()
        if kernel % 2 == 0:
            raise InputError("conv module kernel must be odd")
        self.pw1 = nn.Linear(d_model, 2 * d_model)
        self.dw = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.norm = nn.LayerNorm(d_model)
        self.pw2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        x = F.glu(self.pw1(x), dim=-1)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        x = self.dw(x.transpose(1, 2)).transpose(1, 2)
        return self.dropout(self.pw2(F.silu(self.norm(x))))


class BiMamba(nn.Module):
    """Sum of a forward and an independently parameterized backward Mamba block."""

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2):
        super().__init__()
        self.fwd = MambaBlock(d_model, d_state, expand)
        self.bwd = MambaBlock(d_model, d_state, expand)

    def forward(self, x, lengths=None):
        y_f, _ = mamba_block_forward(x, self.fwd, "forward")
        y_b, _ = mamba_block_forward(x, self.bwd, "backward", lengths=lengths)
        return y_f + y_b


def bidirectional_mamba(x, fwd: MambaBlock, bwd: MambaBlock, lengths=None):
    return mamba_block_forward(x, fwd, "forward")[0] + \
        mamba_block_forward(x, bwd, "backward", lengths=lengths)[0]


class ConMambaLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_ff1, self.ff1 = nn.LayerNorm(d), FeedForward(d, cfg.d_ff, cfg.dropout)
        self.ln_mamba, self.mamba = nn.LayerNorm(d), BiMamba(d, cfg.d_state, cfg.expand)
        self.ln_conv, self.conv = nn.LayerNorm(d), ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ln_ff2, self.ff2 = nn.LayerNorm(d), FeedForward(d, cfg.d_ff, cfg.dropout)
        self.ln_out = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, lengths=None):
        mask = None if lengths is None else length_mask(lengths, x.shape[1])
        x = x + 0.5 * self.dropout(self.ff1(self.ln_ff1(x)))
        x = x + self.dropout(self.mamba(self.ln_mamba(x), lengths))
        x = x + self.conv(self.ln_conv(x), mask)
        x = x + 0.5 * self.dropout(self.ff2(self.ln_ff2(x)))
        return self.ln_out(x)


class ConMambaEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsample = Conv2dSubsampling(cfg.n_mels, cfg.d_model, cfg.subsample_channels)
        self.layers = nn.ModuleList(ConMambaLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor | None = None) -> EncodedSequence:
        """Encode a padded (B, T, n_mels) batch; toggle dropout with ``train()``/``eval()``."""
        if feats.shape[0] == 0:
            raise InputError("empty batch")
        if feats.shape[-1] != self.cfg.n_mels:
            raise InputError(f"expected {self.cfg.n_mels} mel bins, got {feats.shape[-1]}")
        x, lengths = self.subsample(feats, lengths)
        mask = length_mask(lengths, x.shape[1]).unsqueeze(-1)
        x = x * mask
        for layer in self.layers:
            x = layer(x, lengths) * mask
        return EncodedSequence(x, lengths)

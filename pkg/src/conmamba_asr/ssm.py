"""Selective state-space scan and the Mamba block.

Recurrence per channel d and state index n::

    a_t = exp(delta_t[d] * A[d, n])
    h_t = a_t * h_{t-1} + delta_t[d] * B_t[n] * x_t[d]
    y_t[d] = sum_n C_t[n] * h_t[d, n] + D[d] * x_t[d]

Scan paths over the pairs ``(a_t, b_t)`` compute ``h``: a plain time loop
(``sequential``), a chunked O(T) scan whose chunks run together (``parallel``)
and a recursive-doubling tree (``tree``). All share the readout and a
hand-written backward pass (:class:`SelectiveScanFn`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import InputError, NumericError

CHUNK = 64


# ---------------------------------------------------------------------------
# Linear recurrence kernels on (a, b) pairs, time on dim 1
# ---------------------------------------------------------------------------


def combine(left, right):
    """Associative operator: apply ``left`` then ``right``."""
    a1, b1 = left
    a2, b2 = right
    return a2 * a1, a2 * b1 + b2


def _doubling_scan(a, b):
    # Hillis-Steele inclusive scan along dim 1; returns cumulative (a, b).
    T = a.shape[1]
    stride = 1
    while stride < T:
        a_new, b_new = combine((a[:, :-stride], b[:, :-stride]), (a[:, stride:], b[:, stride:]))
        a = torch.cat([a[:, :stride], a_new], dim=1)
        b = torch.cat([b[:, :stride], b_new], dim=1)
        stride *= 2
    return a, b


def linear_scan_sequential(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """All states of ``h_t = a_t h_{t-1} + b_t``; ``a``, ``b`` are (batch, T, ...)."""
    h = torch.zeros_like(b[:, 0]) if h0 is None else h0
    out = []
    for t in range(a.shape[1]):
        h = a[:, t] * h + b[:, t]
        out.append(h)
    return torch.stack(out, dim=1)


def linear_scan_tree(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Recursive-doubling scan: O(T log T) work, O(log T) depth."""
    if h0 is not None:
        b = torch.cat([b[:, :1] + a[:, :1] * h0.unsqueeze(1), b[:, 1:]], dim=1)
    return _doubling_scan(a, b)[1]


def linear_scan_parallel(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Chunked scan with O(T) work.

    Each chunk of CHUNK steps is reduced to one ``(a, b)`` summary by folding
    :func:`combine`; all chunks are processed together. The summaries are
    scanned recursively to obtain every chunk's incoming state, and each chunk
    is then replayed from that state. A sequence that fits in one chunk is a
    plain loop.
    """
    B, T = a.shape[:2]
    if T <= CHUNK:
        return linear_scan_sequential(a, b, h0)
    tail = a.shape[2:]
    n = -(-T // CHUNK)
    pad = n * CHUNK - T
    if pad:
        a = torch.cat([a, a.new_ones((B, pad) + tail)], dim=1)
        b = torch.cat([b, b.new_zeros((B, pad) + tail)], dim=1)
    a = a.reshape((B, n, CHUNK) + tail)
    b = b.reshape((B, n, CHUNK) + tail)
    summary = (a[:, :, 0], b[:, :, 0])
    for t in range(1, CHUNK):
        summary = combine(summary, (a[:, :, t], b[:, :, t]))
    ends = linear_scan_parallel(summary[0], summary[1], h0)
    start = torch.zeros_like(ends[:, :1]) if h0 is None else h0.unsqueeze(1)
    h = torch.cat([start, ends[:, :-1]], dim=1)
    out = []
    for t in range(CHUNK):
        h = a[:, :, t] * h + b[:, :, t]
        out.append(h)
    return torch.stack(out, dim=2).reshape((B, n * CHUNK) + tail)[:, :T]


_SCANS = {"parallel": linear_scan_parallel, "sequential": linear_scan_sequential, "tree": linear_scan_tree}


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        bad = (~torch.isfinite(t)).reshape(t.shape[0], t.shape[1], -1).any(-1).any(0)
        step = int(bad.nonzero()[0])
        raise NumericError(f"non-finite {what} at timestep {step}")


def _adjoint_scan(a, src, g_last):
    """Solve ``g_t = src_t + a_{t+1} g_{t+1}`` backwards from ``g_T = src_T + g_last``.

    Returns ``(g, ag)`` with ``ag_t = a_t g_t`` (reused by the gradients).
    """
    T = a.shape[1]
    if T <= CHUNK:
        g_steps, ag_steps = [None] * T, [None] * T
        carry = g_last
        for t in range(T - 1, -1, -1):
            g = src[:, t] + carry
            carry = a[:, t] * g
            g_steps[t], ag_steps[t] = g, carry
        return torch.stack(g_steps, 1), torch.stack(ag_steps, 1)
    a_next = torch.cat([a[:, 1:], torch.ones_like(a[:, :1])], dim=1)
    g = linear_scan_parallel(a_next.flip(1), src.flip(1), g_last).flip(1)
    return g, a * g


class SelectiveScanFn(torch.autograd.Function):
    """Discretize, scan and read out, with a hand-derived backward pass.

    Shapes: x, delta (B, T, D); A (D, N); Bm, Cm (B, T, N); Dskip (D,);
    h0 (B, D, N). Returns y (B, T, D) and the final state (B, D, N).
    """

    @staticmethod
    def forward(ctx, x, delta, A, Bm, Cm, Dskip, h0, mode):
        a = torch.exp(delta.unsqueeze(-1) * A)
        b = (delta * x).unsqueeze(-1) * Bm.unsqueeze(2)
        h = _SCANS[mode](a, b, h0)
        y = torch.einsum("btdn,btn->btd", h, Cm) + Dskip * x
        _check_finite(y, "scan output")
        ctx.save_for_backward(x, delta, A, Bm, Cm, Dskip, h0, h, a)
        return y, h[:, -1]

    @staticmethod
    def backward(ctx, gy, ghT):
        x, delta, A, Bm, Cm, Dskip, h0, h, a = ctx.saved_tensors
        src = gy.unsqueeze(-1) * Cm.unsqueeze(2)  # dL/dh_t from the readout
        g, ag = _adjoint_scan(a, src, ghT)
        # dL/d(delta_t * A) = g_t * a_t * h_{t-1}
        ga = ag.clone()
        ga[:, 1:] *= h[:, :-1]
        ga[:, 0] *= h0
        dx = delta * x
        gBm = torch.einsum("btdn,btd->btn", g, dx)
        gbx = torch.einsum("btdn,btn->btd", g, Bm)  # dL/d(delta * x)
        gx = gy * Dskip + gbx * delta
        gdelta = torch.einsum("btdn,dn->btd", ga, A) + gbx * x
        gA = torch.einsum("btdn,btd->dn", ga, delta)
        gCm = torch.einsum("btd,btdn->btn", gy, h)
        gD = (gy * x).sum((0, 1))
        return gx, gdelta, gA, gBm, gCm, gD, ag[:, 0], None


def selective_scan_core(x, delta, A, Bm, Cm, Dskip, h0=None, mode="parallel"):
    """Run the scan on already-projected inputs. Accepts unbatched (T, D) inputs."""
    if mode not in _SCANS:
        raise InputError(f"unknown scan mode {mode!r}")
    squeeze = x.dim() == 2
    if squeeze:
        x, delta, Bm, Cm = (t.unsqueeze(0) for t in (x, delta, Bm, Cm))
        h0 = None if h0 is None else h0.unsqueeze(0)
    if x.shape[1] == 0:
        raise InputError("cannot scan an empty sequence")
    if h0 is None:
        h0 = x.new_zeros(x.shape[0], x.shape[2], A.shape[1])
    y, hT = SelectiveScanFn.apply(x, delta, A, Bm, Cm, Dskip, h0, mode)
    if squeeze:
        return y[0], hT[0]
    return y, hT


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class SsmParams(nn.Module):
    """Selective SSM parameters for ``d_inner`` channels with ``d_state`` states.

    Delta uses a low-rank factorization ``dt_proj(x_proj(x))`` as in Mamba;
    the product is the single projection applied to ``x``.
    """

    def __init__(self, d_inner: int, d_state: int = 16, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_inner, self.d_state = d_inner, d_state
        self.dt_rank = dt_rank or max(1, math.ceil(d_inner / 32))
        self.x_proj = nn.Linear(d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, d_inner, bias=True)
        # -A spans 1..N per channel
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(d_inner, 1))
        self.D = nn.Parameter(torch.ones(d_inner))
        with torch.no_grad():
            dt = torch.exp(torch.rand(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        self.A_override: torch.Tensor | None = None  # test hook, e.g. A = 0

    @property
    def A(self) -> torch.Tensor:
        if self.A_override is not None:
            return self.A_override
        return -torch.exp(self.A_log)

    def project(self, x):
        """Return (delta, B, C) for input ``x`` of shape (..., T, d_inner)."""
        dbc = self.x_proj(x)
        dt, Bm, Cm = torch.split(dbc, [self.dt_rank, self.d_state, self.d_state], dim=-1)
        return F.softplus(self.dt_proj(dt)), Bm, Cm


def selective_scan_sequential(x, params: SsmParams, h0=None):
    delta, Bm, Cm = params.project(x)
    return selective_scan_core(x, delta, params.A, Bm, Cm, params.D, h0, mode="sequential")


def selective_scan_parallel(x, params: SsmParams, h0=None):
    delta, Bm, Cm = params.project(x)
    return selective_scan_core(x, delta, params.A, Bm, Cm, params.D, h0, mode="parallel")


@dataclass
class ScanState:
    """Carry for incremental processing: SSM state and causal-conv history."""

    h: torch.Tensor  # (B, d_inner, N)
    conv_cache: torch.Tensor  # (B, d_inner, K - 1)

    def select(self, index: torch.Tensor) -> "ScanState":
        return ScanState(self.h.index_select(0, index), self.conv_cache.index_select(0, index))


class MambaBlock(nn.Module):
    """in_proj -> (x, z); causal depthwise conv -> SiLU -> scan; gate by SiLU(z); out_proj."""

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2, d_conv: int = 4,
                 dt_rank: int | None = None):
        super().__init__()
        self.d_model, self.d_inner, self.d_conv = d_model, expand * d_model, d_conv
        self.in_proj = nn.Linear(d_model, 2 * self.d_inner)
        self.conv = nn.Conv1d(self.d_inner, self.d_inner, d_conv, groups=self.d_inner)
        self.ssm = SsmParams(self.d_inner, d_state, dt_rank)
        self.out_proj = nn.Linear(self.d_inner, d_model)

    def empty_state(self, batch: int, like: torch.Tensor) -> ScanState:
        return ScanState(like.new_zeros(batch, self.d_inner, self.ssm.d_state),
                         like.new_zeros(batch, self.d_inner, self.d_conv - 1))

    def forward(self, u, state: ScanState | None = None, mode: str = "parallel"):
        """Causal pass over u (B, T, d_model). Returns (y, new_state)."""
        if u.shape[-1] != self.d_model:
            raise InputError(f"expected d_model={self.d_model}, got {u.shape[-1]}")
        B, T, _ = u.shape
        state = state or self.empty_state(B, u)
        xz = self.in_proj(u)
        x, z = xz.chunk(2, dim=-1)
        xc = torch.cat([state.conv_cache, x.transpose(1, 2)], dim=2)
        new_cache = xc[:, :, -(self.d_conv - 1):]
        x = F.silu(self.conv(xc)).transpose(1, 2)
        delta, Bm, Cm = self.ssm.project(x)
        y, hT = selective_scan_core(x, delta, self.ssm.A, Bm, Cm, self.ssm.D, state.h, mode)
        y = y * F.silu(z)
        return self.out_proj(y), ScanState(hT, new_cache)


def reverse_padded(x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Reverse each sequence within its valid length; padding stays at the end."""
    if lengths is None:
        return x.flip(1)
    T = x.shape[1]
    t = torch.arange(T, device=x.device).unsqueeze(0)
    L = lengths.to(x.device).unsqueeze(1)
    idx = torch.where(t < L, L - 1 - t, t)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


def mamba_block_forward(u, block: MambaBlock, direction: str = "forward",
                        state: ScanState | None = None, lengths=None, mode: str = "parallel"):
    """Run ``block`` over ``u`` in the given direction.

    ``backward`` reverses each sequence, runs the causal pipeline and reverses
    the output back.
    """
    if direction == "forward":
        return block(u, state, mode)
    if direction == "backward":
        y, st = block(reverse_padded(u, lengths), state, mode)
        return reverse_padded(y, lengths), st
    raise InputError(f"unknown direction {direction!r}")


def grad_check(fn, tensors: dict, epsilon: float = 1e-5, max_entries: int | None = 64,
               floor: float = 1e-6, seed: int = 0) -> dict:
    """Compare analytic gradients of ``sum(fn())`` with central differences.

    ``tensors`` maps group names to leaf tensors that ``fn`` closes over; they
    are perturbed in place. Returns the max relative error per group, where the
    relative error of one entry is ``|g - fd| / max(|g|, |fd|, floor)``. At most
    ``max_entries`` entries per group are probed (chosen at random).
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise InputError("epsilon must lie in [1e-5, 1e-3]")

    def total():
        out = fn()
        if isinstance(out, (tuple, list)):
            return sum(o.sum() for o in out if isinstance(o, torch.Tensor))
        return out.sum()

    leaves = list(tensors.values())
    for t in leaves:
        t.grad = None
        t.requires_grad_(True)
    grads = torch.autograd.grad(total(), leaves, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    report = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        n = flat.numel()
        probe = range(n) if max_entries is None or n <= max_entries else \
            torch.randperm(n, generator=gen)[:max_entries].tolist()
        worst = 0.0
        with torch.no_grad():
            for i in probe:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = total().item()
                flat[i] = orig - epsilon
                down = total().item()
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                an = g.reshape(-1)[i].item()
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
        report[name] = worst
    return report

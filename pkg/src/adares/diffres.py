"""Differentiable temporal resolution layer.

Pipeline per clip: importance scores from a 1-D conv stack, rescale to a
budget of ``t`` output frames, build a t x T warp matrix from the running
sum of scores, rebalance it so each output row carries unit weight, then
warp the spectrogram (mean and max aggregation) and transport a sinusoidal
position code through the same matrix.

All layer functions accept batched (N, ...) inputs; the unbatched helpers
used in the tests are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import tensor as tn
from .autodiff.nn import Module, ResConv1D
from .autodiff.tensor import Tensor

# slack for running sums that overshoot an integer boundary by rounding
CUMSUM_TOL = 1e-9
NEG_TOL = 1e-9
ROW_TOL = 1e-6


class WarpError(ValueError):
    pass


def output_frames(T, delta):
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    return max(1, int(round((1.0 - delta) * T)))


@dataclass(frozen=True)
class DiffResConfig:
    delta: float = 0.5
    lam: float = 0.5
    epsilon: float = 1e-4
    aggregations: tuple = ("mean", "max")
    emit_resolution_encoding: bool = True

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        bad = set(self.aggregations) - {"mean", "max"}
        if bad or not self.aggregations:
            raise ValueError(f"unknown aggregations {sorted(bad)}")

    def t(self, T):
        return output_frames(T, self.delta)

    @property
    def n_channels(self):
        return len(self.aggregations) + int(self.emit_resolution_encoding)


IMPORTANCE_CHANNELS = (64, 32, 16, 8, 1)


class FrameImportanceNet(Module):
    """Five ResConv1D blocks mapping (N, F, T) to (N, 1, T) logits."""

    def __init__(self, in_channels=128, rng=None, channels=IMPORTANCE_CHANNELS, kernel_size=5):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = in_channels
        widths = (in_channels,) + tuple(channels)
        self.blocks = [ResConv1D(a, b, rng, kernel_size) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        if x.shape[-2] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-2]}")
        for block in self.blocks:
            x = block(x)
        return x


def _batched(x):
    x = tn.as_tensor(x)
    return (x, False) if x.ndim == 3 else (tn.reshape(x, (1,) + x.shape), True)


def estimate_importance(X, net):
    """Raw scores s' = sigmoid(H(X)) in (0, 1); (N, T) for batched input."""
    Xb, single = _batched(X)
    logits = net(Xb)
    s = tn.sigmoid(tn.reshape(logits, (Xb.shape[0], Xb.shape[2])))
    return tn.reshape(s, (s.shape[1],)) if single else s


def rescale(s_raw, t):
    """s_check = s' * t / sum(s'), s = s_check / max(s_check, 1), per row."""
    s_raw = tn.as_tensor(s_raw)
    total = tn.sum_(s_raw, axis=-1, keepdims=True)
    if np.any(total.data <= 0):
        raise ValueError("importance scores sum to zero")
    checked = s_raw * (float(t) / total)
    return checked / tn.maximum(checked, 1.0)


def warp_rows(s, t):
    """Output row of each input frame under the half-open (i, i+1] rule.

    A running sum landing exactly on an integer belongs to the lower row.
    Zero-score frames follow the running sum, so every row's run of frames
    stays contiguous; they carry no weight either way.
    """
    s = np.asarray(s, dtype=np.float64)
    c = np.cumsum(s, axis=-1)
    if np.any(c[..., -1] > t + CUMSUM_TOL):
        raise WarpError(f"cumulative importance {c[..., -1].max():.12g} exceeds t={t}")
    return np.clip(np.ceil(c).astype(np.int64) - 1, 0, t - 1)


def routing_mask(s, t):
    """(..., t, T) one-hot routing of input frames onto output rows."""
    rows = warp_rows(s, t)
    return (rows[..., None, :] == np.arange(t)[:, None]).astype(np.float64)


@dataclass
class WarpMatrix:
    W: Tensor
    provenance: str  # "raw" or "normalized"
    mask: np.ndarray = field(repr=False)  # routing of the raw matrix

    @property
    def values(self):
        return self.W.data

    def check_invariants(self, s, tol=ROW_TOL):
        """Row sums of 1 and column sums equal to ``s``; raises on violation."""
        W = self.values
        s = np.asarray(s)
        if not np.allclose(W.sum(axis=-2), s, atol=tol, rtol=0):
            raise WarpError("column sums differ from importance scores")
        if not np.allclose(W.sum(axis=-1), 1.0, atol=tol, rtol=0):
            raise WarpError("rows do not sum to one")


def build_raw_warp(s, t):
    """Raw warp matrix: W0[i, j] = s_j when row(j) == i, else 0."""
    s = tn.as_tensor(s)
    if np.any(s.data < 0) or np.any(s.data > 1 + NEG_TOL):
        raise WarpError("importance scores must lie in [0, 1]")
    mask = routing_mask(s.data, t)
    W0 = tn.reshape(s, s.shape[:-1] + (1, s.shape[-1])) * mask
    return WarpMatrix(W0, "raw", mask)


def _check_nonnegative(W):
    if np.min(W) < -NEG_TOL:
        raise WarpError("warp normalization produced a negative weight")


def normalize_warp_naive(warp):
    """Row-by-row rebalancing of a raw warp matrix (reference version).

    Walks along each row summing its weights; at the first column after
    the row's run it tops the row up to 1 and takes that amount from the
    next row in the same column. Works on plain arrays or on a Tensor, in
    which case the result stays on the tape. Single matrix only.
    """
    W0 = warp.W if isinstance(warp, WarpMatrix) else warp
    use_tape = isinstance(W0, Tensor)
    values = W0.data if use_tape else np.asarray(W0, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("normalize_warp_naive expects a single t x T matrix")
    t, T = values.shape
    # branch on the routing pattern rather than the running values, which can
    # round to +-1e-17 where the exact result is a small positive weight
    positive = warp.mask > 0 if isinstance(warp, WarpMatrix) else values > 0
    if np.any(~positive.any(axis=0) & (np.arange(T) < _last_nonzero_col(positive))):
        raise WarpError("a frame with zero importance inside the warp breaks row rebalancing")
    if use_tape:
        cells = [[W0[i, j] for j in range(T)] for i in range(t)]
    else:
        cells = values.tolist()
    i = j = 0
    acc = 0.0
    while i < t - 1 and j < T:
        if positive[i, j]:
            acc = acc + cells[i][j]
            j += 1
        else:
            cells[i][j] = 1.0 - acc
            cells[i + 1][j] = cells[i + 1][j] - cells[i][j]
            i += 1
            acc = 0.0
    if use_tape:
        rows = [tn.stack([tn.as_tensor(c) for c in row]) for row in cells]
        W = tn.stack(rows)
    else:
        W = Tensor(np.array(cells, dtype=np.float64))
    _check_nonnegative(W.data)
    mask = warp.mask if isinstance(warp, WarpMatrix) else positive.astype(np.float64)
    return WarpMatrix(W, "normalized", mask)


def _last_nonzero_col(positive):
    cols = np.flatnonzero(positive.any(axis=0))
    return cols[-1] if cols.size else -1


def edge_pattern(M):
    """Q: +1 where a row's run starts, -1 at the first zero after it ends.

    Correlates the routing pattern M (sign(W0) when every score is
    positive) with a [-1, 1] kernel along time, no padding, and prepends a
    zero column so Q keeps the t x T shape.
    """
    M = np.sign(M)
    Q = np.zeros_like(M)
    Q[..., 1:] = -M[..., :-1] + M[..., 1:]
    return Q


def normalize_warp_vectorized(warp):
    """Matrix-op form of :func:`normalize_warp_naive`, batched over leading axes.

    P broadcasts the running deficit (1 - row sum) of each row; U adds it at
    the first zero after the row's run, V takes it back from the start of
    the next row: W = U - V + W0.
    """
    W0 = warp.W if isinstance(warp, WarpMatrix) else tn.as_tensor(warp)
    if W0.ndim < 2:
        raise ValueError("warp matrix must be at least 2-D")
    t = W0.shape[-2]
    deficit = 1.0 - tn.sum_(W0, axis=-1, keepdims=True)  # (..., t, 1)
    P = tn.cumsum(deficit, axis=-2)
    Q = edge_pattern(warp.mask if isinstance(warp, WarpMatrix) else W0.data)
    U = P * np.maximum(-Q, 0.0)
    if t > 1:
        lead = W0.shape[:-2]
        upper = tn.getitem(P, (Ellipsis, slice(0, t - 1), slice(None)))
        shifted = upper * np.maximum(Q[..., 1:, :], 0.0)
        V = tn.concat([np.zeros(lead + (1, W0.shape[-1])), shifted], axis=-2)
        W = U - V + W0
    else:
        W = U + W0
    _check_nonnegative(W.data)
    mask = warp.mask if isinstance(warp, WarpMatrix) else (W0.data > 0).astype(np.float64)
    return WarpMatrix(W, "normalized", mask)


def _check_mean_rows(W):
    """Rows carry weight at most 1; once a row falls short, all later rows are empty.

    This is the shape rebalancing produces, including when clipped scores
    leave total weight below t.
    """
    sums = W.sum(axis=-1)
    if np.any(sums > 1 + ROW_TOL):
        raise WarpError("warp rows exceed unit weight; normalize before mean aggregation")
    short = sums < 1 - ROW_TOL
    after_short = np.maximum.accumulate(short, axis=-1)
    after_short[..., 1:] = after_short[..., :-1].copy()
    after_short[..., 0] = False
    if np.any(after_short & (sums > ROW_TOL)):
        raise WarpError("warp rows are not normalized; normalize before mean aggregation")


def support_indices(W_values):
    """Column indices of each row's support, padded by repeating the first one.

    Returns (idx, counts) with idx of shape (..., t, L), L the widest support.
    """
    support = W_values > 0
    counts = support.sum(axis=-1)
    L = max(1, int(counts.max()) if counts.size else 1)
    order = np.argsort(~support, axis=-1, kind="stable")[..., :L]
    pos = np.arange(L)
    idx = np.where(pos < counts[..., None], order, order[..., :1])
    return idx, counts


def warp_frames(X, warp, agg="mean"):
    """Warp (..., F, T) frames with a (..., t, T) matrix into (..., F, t).

    mean: O[f, i] = sum_j X[f, j] W[i, j]
    max:  O[f, i] = max over the support of row i of X[f, j] W[i, j]; rows
          with no support give 0.
    """
    W = warp.W if isinstance(warp, WarpMatrix) else tn.as_tensor(warp)
    X = tn.as_tensor(X)
    if X.shape[-1] != W.shape[-1]:
        raise ValueError(f"frame count mismatch: X has {X.shape[-1]}, W has {W.shape[-1]}")
    if agg == "mean":
        if isinstance(warp, WarpMatrix) and warp.provenance != "normalized":
            raise WarpError("mean aggregation needs a normalized warp matrix")
        _check_mean_rows(W.data)
        return tn.matmul(X, tn.transpose(W))
    if agg != "max":
        raise ValueError(f"unknown aggregation {agg!r}")
    Xb, single = _batched(X)
    Wb = W if W.ndim == 3 else tn.reshape(W, (1,) + W.shape)
    n, F, T = Xb.shape
    t = Wb.shape[1]
    idx, _ = support_indices(Wb.data)
    L = idx.shape[-1]
    Xg = tn.take_along_axis(Xb, idx.reshape(idx.shape[0], 1, t * L), axis=2)
    Wg = tn.take_along_axis(Wb, idx, axis=2)
    prod = tn.reshape(Xg, (n, F, t, L)) * tn.reshape(Wg, (Wg.shape[0], 1, t, L))
    out = tn.max_(prod, axis=-1)
    return tn.reshape(out, (F, t)) if single else out


def positional_encoding(F, T, base=10000.0):
    """(F, T) sinusoidal code; even rows sin, odd rows cos, column = position."""
    pos = np.arange(T, dtype=np.float64)[None, :]
    i = np.arange(F)[:, None]
    rate = base ** (-(2 * (i // 2)) / F)
    angle = pos * rate
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def resolution_encoding(warp, F):
    """E @ W^T with E the (F, T) positional code."""
    W = warp.W if isinstance(warp, WarpMatrix) else tn.as_tensor(warp)
    E = positional_encoding(F, W.shape[-1])
    return tn.matmul(E, tn.transpose(W))


def activeness(s, energy, delta, epsilon=1e-4):
    """Population std of scores over frames with energy > epsilon, divided by delta.

    Zero when fewer than two frames are active.
    """
    if delta <= 0:
        raise ValueError("activeness is undefined for delta = 0")
    s = np.asarray(s, dtype=np.float64)
    active = np.asarray(energy) > epsilon
    if s.shape != active.shape:
        raise ValueError("scores and energies must have the same shape")
    if s.ndim == 2:
        return np.array([activeness(a, e, delta, epsilon) for a, e in zip(s, energy)])
    if active.sum() <= 1:
        return 0.0
    return float(np.std(s[active]) / delta)


@dataclass
class WarpedFeature:
    mean_channel: Tensor | None
    max_channel: Tensor | None
    resolution_encoding: Tensor | None
    s_raw: Tensor
    s: Tensor
    warp: WarpMatrix

    def channels(self):
        """Stacked (N, C, F, t) (or (C, F, t)) feature in mean, max, resenc order."""
        parts = [c for c in (self.mean_channel, self.max_channel, self.resolution_encoding)
                 if c is not None]
        axis = -3
        parts = [tn.reshape(p, p.shape[:-2] + (1,) + p.shape[-2:]) for p in parts]
        return tn.concat(parts, axis=axis)

    @property
    def rows(self):
        return warp_rows(self.s.data, self.warp.W.shape[-2])


class DiffRes(Module):
    """The full layer: importance -> rescale -> warp -> aggregate + encode."""

    def __init__(self, cfg=DiffResConfig(), n_mels=128, rng=None):
        self.cfg = cfg
        self.n_mels = n_mels
        self.net = FrameImportanceNet(n_mels, rng)

    def forward(self, X):
        return diffres_forward(X, self.net, self.cfg)


def diffres_forward(X, net, cfg):
    X = tn.as_tensor(X)
    F, T = X.shape[-2], X.shape[-1]
    t = cfg.t(T)
    s_raw = estimate_importance(X, net)
    s = rescale(s_raw, t)
    warp = normalize_warp_vectorized(build_raw_warp(s, t))
    mean_c = warp_frames(X, warp, "mean") if "mean" in cfg.aggregations else None
    max_c = warp_frames(X, warp, "max") if "max" in cfg.aggregations else None
    enc = resolution_encoding(warp, F) if cfg.emit_resolution_encoding else None
    return WarpedFeature(mean_c, max_c, enc, s_raw, s, warp)

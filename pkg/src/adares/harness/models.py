"""Toy classifier, temporal-reduction baselines and the variant pipelines."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from ..autodiff import tensor as tn
from ..autodiff.nn import BatchNorm1d, Conv1d, Linear, Module, ResConv1D
from ..diffres import DiffRes, DiffResConfig
from ..dsp import SpectrogramConfig, Waveform, mel_spectrogram

VARIANTS = ("diffres", "chsize", "avgpool", "convavgpool", "mel")
_ALIASES = {"mel-100fps": "mel"}


def canonical_variant(name):
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return name


def reduction_factor(delta):
    """Integer pooling / hop factor 1/(1 - delta); rejects non-integer ratios."""
    f = 1.0 / (1.0 - delta)
    k = int(round(f))
    if abs(f - k) > 1e-9:
        raise ValueError(f"delta={delta} does not give an integer reduction factor")
    return k


class ToyClassifier(Module):
    """(N, C, F, t) features -> conv blocks over time -> mean pool -> sigmoid head.

    Feature channels and mel bins are folded together as conv input channels.
    """

    def __init__(self, n_feature_channels, n_mels, n_classes, rng, width=32, n_blocks=2):
        cin = n_feature_channels * n_mels
        self.in_features = cin
        self.norm = BatchNorm1d(cin)
        widths = [cin] + [width] * n_blocks
        self.convs = [Conv1d(a, b, 3, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.bns = [BatchNorm1d(b) for b in widths[1:]]
        self.head = Linear(width, n_classes, rng)

    def logits(self, x):
        n, t = x.shape[0], x.shape[-1]
        x = tn.reshape(x, (n, -1, t))
        if x.shape[1] != self.in_features:
            raise ValueError(f"classifier expects {self.in_features} input rows, got {x.shape[1]}")
        x = self.norm(x)
        for conv, bn in zip(self.convs, self.bns):
            x = tn.leaky_relu(bn(conv(x)))
        return self.head(tn.mean(x, axis=2))

    def forward(self, x):
        return tn.sigmoid(self.logits(x))


def avg_pool(X, factor):
    """Non-overlapping temporal mean over (..., F, T); the tail is padded by repeating the last frame."""
    X = tn.as_tensor(X)
    factor = int(factor)
    if factor < 1:
        raise ValueError("pool factor must be >= 1")
    T = X.shape[-1]
    rem = (-T) % factor
    if rem:
        last = tn.getitem(X, (Ellipsis, slice(T - 1, T)))
        X = tn.concat([X] + [last] * rem, axis=-1)
    shape = X.shape[:-1] + (X.shape[-1] // factor, factor)
    return tn.mean(tn.reshape(X, shape), axis=-1)


def block_warp(T, factor):
    """Uniform block warp matrix equivalent to :func:`avg_pool` when factor divides T."""
    t = T // factor
    W = np.zeros((t, T))
    for i in range(t):
        W[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return W


class ConvEncoder(Module):
    """Three ResConv1D(F, F) blocks used by the ConvAvgPool baseline."""

    def __init__(self, n_mels=128, rng=None, n_blocks=3):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = n_mels
        self.blocks = [ResConv1D(n_mels, n_mels, rng) for _ in range(n_blocks)]

    def forward(self, x):
        if x.shape[-2] != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} channels, got {x.shape[-2]}")
        for block in self.blocks:
            x = block(x)
        return x


def conv_avg_pool(X, encoder, factor):
    X = tn.as_tensor(X)
    single = X.ndim == 2
    if single:
        X = tn.reshape(X, (1,) + X.shape)
    out = avg_pool(encoder(X), factor)
    return tn.reshape(out, out.shape[1:]) if single else out


def chsize_config(spec_cfg, factor):
    """Mel config with the hop enlarged by ``factor`` (window grows to the hop if needed)."""
    hop = spec_cfg.hop_ms * factor
    window = max(spec_cfg.window_length_ms, hop)
    n_fft = spec_cfg.n_fft
    win_samples = int(round(spec_cfg.sample_rate * window / 1000.0))
    while n_fft < win_samples:
        n_fft *= 2
    return replace(spec_cfg, hop_ms=hop, window_length_ms=window, n_fft=n_fft)


def chsize(w: Waveform, factor, spec_cfg=SpectrogramConfig()):
    cfg = chsize_config(spec_cfg, factor)
    if cfg.n_frames(len(w)) < 1 or len(w) < cfg.hop_length:
        raise ValueError("enlarged hop leaves fewer than one frame")
    return mel_spectrogram(w, cfg)


class Pipeline(Module):
    """Front-end for one variant plus the toy classifier.

    ``forward(X)`` takes (N, F, T) log-mel at the variant's input hop and
    returns (probabilities, diagnostics); diagnostics is the DiffRes output
    for the diffres variant and None otherwise.
    """

    def __init__(self, variant, n_classes, delta=0.5, n_mels=128, rng=None,
                 lam=0.5, epsilon=1e-4, width=32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.variant = canonical_variant(variant)
        self.delta = delta
        self.factor = 1 if self.variant in ("mel", "diffres") else reduction_factor(delta)
        n_ch = 1
        if self.variant == "diffres":
            self.diffres = DiffRes(DiffResConfig(delta=delta, lam=lam, epsilon=epsilon), n_mels, rng)
            n_ch = self.diffres.cfg.n_channels
        elif self.variant == "convavgpool":
            self.encoder = ConvEncoder(n_mels, rng)
        self.classifier = ToyClassifier(n_ch, n_mels, n_classes, rng, width=width)

    def input_config(self, spec_cfg):
        return chsize_config(spec_cfg, self.factor) if self.variant == "chsize" else spec_cfg

    def features(self, X):
        X = tn.as_tensor(X)
        v = self.variant
        if v == "diffres":
            out = self.diffres(X)
            return out.channels(), out
        if v == "avgpool":
            feat = avg_pool(X, self.factor)
        elif v == "convavgpool":
            feat = avg_pool(self.encoder(X), self.factor)
        else:
            feat = X
        return tn.reshape(feat, (feat.shape[0], 1) + feat.shape[1:]), None

    def forward(self, X):
        feat, diag = self.features(X)
        return self.classifier(feat), diag

    def output_frames(self, T):
        if self.variant == "diffres":
            return self.diffres.cfg.t(T)
        if self.variant in ("avgpool", "convavgpool"):
            return math.ceil(T / self.factor)
        return T

"""Fixed-resolution log-mel front-end and frame energies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError("waveform must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class SpectrogramConfig:
    window_length_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    sample_rate: int = 16000
    log_floor: float = 1e-10
    n_fft: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if self.hop_ms <= 0 or self.window_length_ms <= 0:
            raise ValueError("hop and window length must be positive")
        if self.hop_ms > self.window_length_ms:
            raise ValueError("hop_ms must not exceed window_length_ms")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.win_length > self.n_fft:
            raise ValueError("n_fft must be at least the window length in samples")

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.window_length_ms / 1000.0))

    @property
    def fps(self):
        return 1000.0 / self.hop_ms

    def n_frames(self, n_samples):
        return math.ceil(n_samples / self.hop_length)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    linear_values: np.ndarray
    fps: float

    @property
    def F(self):
        return self.values.shape[0]

    @property
    def T(self):
        return self.values.shape[1]


def load_wav(path, sample_rate=16000):
    """Read a PCM16 or float32 WAV as a mono waveform in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise AudioError(f"cannot parse WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample format {data.dtype}; need PCM16 or float32")
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sample_rate is not None and rate != sample_rate:
        raise AudioError(f"sample rate {rate} Hz does not match expected {sample_rate} Hz")
    return Waveform(data, rate)


def save_wav(path, waveform, dtype=np.int16):
    x = np.asarray(waveform.samples)
    if dtype == np.int16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(path, waveform.sample_rate, data)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(n_mels, n_fft, sample_rate):
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (ctr - lo)
    down = (hi - freqs) / (hi - ctr)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg):
    """(n_mels, n_fft//2 + 1) HTK-mel triangles with unit peak."""
    return _filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)


def mel_center_frequencies(cfg):
    return mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))[1:-1]


@lru_cache(maxsize=16)
def _window(kind, length):
    w = get_window(kind, length, fftbins=True)
    w.setflags(write=False)
    return w


def linear_mel(samples, cfg):
    """Linear mel magnitudes for a batch of equal-length signals.

    samples: (L,) or (N, L). Frame k is centred on sample k*hop, boundaries
    are reflect-padded, and there are ceil(L / hop) frames.
    """
    x = np.asarray(samples, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    hop, win = cfg.hop_length, cfg.win_length
    L = x.shape[1]
    if L < hop:
        raise AudioError(f"waveform of {L} samples is shorter than one hop ({hop})")
    if not np.all(np.isfinite(x)):
        raise AudioError("waveform contains non-finite samples")
    T = cfg.n_frames(L)
    pad = win // 2
    xp = np.pad(x, ((0, 0), (pad, win - pad)), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, win, axis=1)[:, : (T - 1) * hop + 1 : hop]
    spec = np.abs(np.fft.rfft(frames * _window(cfg.window, win), n=cfg.n_fft, axis=-1))
    mel = np.einsum("mk,ntk->nmt", mel_filterbank(cfg), spec, optimize=True)
    return mel[0] if single else mel


def mel_spectrogram(w, cfg=SpectrogramConfig()):
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(f"waveform rate {w.sample_rate} Hz differs from config {cfg.sample_rate} Hz")
    lin = linear_mel(w.samples, cfg)
    return Spectrogram(np.log(lin + cfg.log_floor), lin, cfg.fps)


def frame_energy(sp):
    """Per-frame RMS of the linear mel frame after scaling the clip to max 1."""
    return frame_energy_linear(sp.linear_values)


def frame_energy_linear(linear):
    """Same as :func:`frame_energy` on raw (F, T) or batched (N, F, T) arrays."""
    lin = np.asarray(linear, dtype=np.float64)
    peak = lin.max(axis=(-2, -1), keepdims=True)
    norm = np.divide(lin, peak, out=np.zeros_like(lin), where=peak > 0)
    return np.sqrt(np.mean(norm ** 2, axis=-2))

"""Synthetic sparse tone-burst clips for desk-scale training."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..dsp import SpectrogramConfig, frame_energy_linear, linear_mel


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    n_classes: int = 4
    clip_seconds: float = 1.0
    event_length_ms: float = 150.0
    events_per_clip: int = 2
    tone_frequencies: tuple = (500.0, 1000.0, 2000.0, 4000.0)
    noise_floor: float = 1e-5
    seed: int = 0
    n_train: int = 512
    n_test: int = 128
    sample_rate: int = 16000
    amplitude_range: tuple = (0.3, 0.8)
    fade_ms: float = 5.0
    # when set, the last class has no events
    background_class: bool = False

    @property
    def clip_samples(self):
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def event_samples(self):
        return int(round(self.event_length_ms * self.sample_rate / 1000.0))

    @property
    def n_tone_classes(self):
        return self.n_classes - int(self.background_class)

    def validate(self):
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.events_per_clip < 0:
            raise ValueError("events_per_clip must be >= 0")
        if self.events_per_clip == 0 and not self.background_class:
            raise ValueError("events_per_clip = 0 needs a background class")
        if len(self.tone_frequencies) < self.n_tone_classes:
            raise ValueError("need one tone frequency per non-background class")
        if any(f >= self.sample_rate / 2 for f in self.tone_frequencies[: self.n_tone_classes]):
            raise ValueError("tone frequencies must be below Nyquist")
        if self.events_per_clip * self.event_samples > self.clip_samples:
            raise ValueError("events do not fit in the clip")


@dataclass
class Dataset:
    waveforms: np.ndarray  # (N, L)
    labels: np.ndarray  # (N,) int
    events: list  # per clip: list of (start, stop) sample ranges
    n_classes: int
    sample_rate: int

    def __len__(self):
        return len(self.labels)

    @property
    def onehot(self):
        return np.eye(self.n_classes)[self.labels]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.waveforms[idx], self.labels[idx], [self.events[i] for i in idx],
                       self.n_classes, self.sample_rate)


def _tone(n, freq, amp, fade, rate, phase):
    t = np.arange(n) / rate
    x = amp * np.sin(2 * np.pi * freq * t + phase)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return x


def _clip(rng, cfg, label):
    L, n = cfg.clip_samples, cfg.event_samples
    x = cfg.noise_floor * rng.standard_normal(L)
    events = []
    if cfg.background_class and label == cfg.n_classes - 1:
        return x, events
    k = cfg.events_per_clip
    free = L - k * n
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    fade = int(round(cfg.fade_ms * cfg.sample_rate / 1000.0))
    freq = cfg.tone_frequencies[label]
    for i, c in enumerate(cuts):
        start = int(c) + i * n
        amp = rng.uniform(*cfg.amplitude_range)
        x[start:start + n] += _tone(n, freq, amp, fade, cfg.sample_rate, rng.uniform(0, 2 * np.pi))
        events.append((start, start + n))
    return x, events


def generate_dataset(cfg):
    """Return (train, test) datasets, fully determined by ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_test
    if cfg.events_per_clip == 0:
        labels = np.full(total, cfg.n_classes - 1)
    else:
        labels = rng.integers(0, cfg.n_classes, size=total)
    waves, events = [], []
    for label in labels:
        x, ev = _clip(rng, cfg, int(label))
        waves.append(x)
        events.append(ev)
    full = Dataset(np.stack(waves), labels.astype(np.int64), events, cfg.n_classes, cfg.sample_rate)
    return full.subset(range(cfg.n_train)), full.subset(range(cfg.n_train, total))


def thread_count():
    try:
        return max(1, int(os.environ.get("ADARES_THREADS", "1")))
    except ValueError:
        return 1


def featurize(waveforms, spec_cfg, chunk=64):
    """Linear mel (N, F, T) for a stack of clips, chunked over ADARES_THREADS workers."""
    waveforms = np.asarray(waveforms)
    chunks = [waveforms[i:i + chunk] for i in range(0, len(waveforms), chunk)]
    workers = thread_count()
    if workers == 1 or len(chunks) == 1:
        parts = [linear_mel(c, spec_cfg) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: linear_mel(c, spec_cfg), chunks))
    return np.concatenate(parts, axis=0)


@dataclass
class Features:
    log_mel: np.ndarray  # (N, F, T)
    energy: np.ndarray  # (N, T)
    labels: np.ndarray
    n_classes: int


def features_for(dataset, spec_cfg=SpectrogramConfig()):
    lin = featurize(dataset.waveforms, spec_cfg)
    return Features(np.log(lin + spec_cfg.log_floor), frame_energy_linear(lin),
                    dataset.labels, dataset.n_classes)

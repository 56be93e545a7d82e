"""Front-end throughput benchmark."""

from __future__ import annotations

import time

import numpy as np
from threadpoolctl import threadpool_limits

from ..dsp import SpectrogramConfig, linear_mel
from .models import Pipeline, canonical_variant

BENCH_COLUMNS = ("variant", "fps_in", "fps_out", "clips_per_second", "mean_ms", "std_ms")
CLASSIFIER_SUFFIX = "+classifier"


def _bench_clips(n, seconds, rate, seed):
    rng = np.random.default_rng(seed)
    L = int(round(seconds * rate))
    t = np.arange(L) / rate
    x = 1e-3 * rng.standard_normal((n, L))
    x += 0.5 * np.sin(2 * np.pi * rng.uniform(200, 4000, (n, 1)) * t)
    return x


def bench_throughput(variants=("mel", "diffres", "avgpool"), seconds=1.0, repetitions=10,
                     batch=16, fps_out=25.0, spec_cfg=SpectrogramConfig(), seed=0,
                     with_classifier=True):
    """Time waveform -> feature (and -> prediction) for each variant.

    Returns rows with BENCH_COLUMNS; per-clip times in milliseconds. Rows
    for the full pipeline carry the variant name with a "+classifier" suffix.
    """
    fps_in = spec_cfg.fps
    if not 0 < fps_out <= fps_in:
        raise ValueError("fps_out must lie in (0, fps_in]")
    delta = 1.0 - fps_out / fps_in
    waves = _bench_clips(batch, seconds, spec_cfg.sample_rate, seed)
    stages = []
    with threadpool_limits(limits=1):
        for name in variants:
            variant = canonical_variant(name)
            pipe = Pipeline(variant, 4, delta if variant != "mel" else 0.0, spec_cfg.n_mels,
                            np.random.default_rng(seed)).eval()
            cfg = pipe.input_config(spec_cfg)

            def frontend(pipe=pipe, cfg=cfg):
                X = np.log(linear_mel(waves, cfg) + cfg.log_floor)
                return pipe.features(X)[0]

            def full(pipe=pipe, frontend=frontend):
                return pipe.classifier(frontend())

            out_fps = pipe.output_frames(cfg.n_frames(waves.shape[1])) / seconds
            stages.append((variant, out_fps, frontend))
            if with_classifier:
                stages.append((variant + CLASSIFIER_SUFFIX, out_fps, full))
        for _, _, fn in stages:
            fn()  # warm-up
        # round-robin so every stage sees the same machine state
        times = [[] for _ in stages]
        for _ in range(repetitions):
            for k, (_, _, fn) in enumerate(stages):
                t0 = time.perf_counter()
                fn()
                times[k].append((time.perf_counter() - t0) * 1000.0 / batch)
    rows = []
    for (label, out_fps, _), ms in zip(stages, times):
        ms = np.array(ms)
        rows.append({
            "variant": label,
            "fps_in": fps_in,
            "fps_out": out_fps,
            "clips_per_second": 1000.0 / float(ms.mean()),
            "mean_ms": float(ms.mean()),
            "std_ms": float(ms.std()),
        })
    return rows

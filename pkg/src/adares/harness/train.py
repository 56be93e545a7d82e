"""Training, evaluation, checkpoints and run artifacts."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import container
from ..autodiff import Tape
from ..diffres import activeness
from ..dsp import SpectrogramConfig
from ..losses import LossConfig, bce_loss, guide_loss, total_loss
from .data import Features, SyntheticDatasetConfig, features_for, generate_dataset
from .models import Pipeline, canonical_variant
from .optim import Adam

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "variant", "loss_total", "loss_bce", "loss_guide", "rho", "acc")
DIAG_COLUMNS = ("step", "clip_id", "rho", "guide_loss", "mean_score_empty", "mean_score_active")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "diffres"
    delta: float = 0.5
    lam: float = 0.5
    epsilon: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    hop_ms: float = 10.0
    window_ms: float = 25.0
    n_mels: int = 128
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def spec_config(self, sample_rate=16000):
        return SpectrogramConfig(window_length_ms=self.window_ms, hop_ms=self.hop_ms,
                                 n_mels=self.n_mels, sample_rate=sample_rate)

    def build_pipeline(self, n_classes, rng=None):
        rng = np.random.default_rng(self.seed) if rng is None else rng
        return Pipeline(self.variant, n_classes, self.delta, self.n_mels, rng,
                        self.lam, self.epsilon, self.width)


@dataclass
class TrainResult:
    pipeline: Pipeline
    history: list
    diagnostics: list = field(default_factory=list)

    def column(self, name):
        return np.array([row[name] for row in self.history], dtype=np.float64)


def _mean_or_nan(values):
    return float(np.mean(values)) if len(values) else math.nan


def clip_diagnostics(s, energy, cfg):
    """Per-clip guide loss, activeness and mean scores on empty / active frames."""
    s = np.asarray(s)
    energy = np.asarray(energy)
    empty = energy < cfg.epsilon
    active = energy > cfg.epsilon
    hinge = np.maximum(s / cfg.delta - cfg.lam, 0.0)
    return {
        "rho": activeness(s, energy, cfg.delta, cfg.epsilon),
        "guide_loss": float(hinge[empty].mean()) if empty.any() else 0.0,
        "mean_score_empty": _mean_or_nan(s[empty]),
        "mean_score_active": _mean_or_nan(s[active]),
    }


def train(cfg, features: Features, log_diagnostics=True):
    """Adam on BCE (+ guide loss for diffres); one history row per step."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, order_rng = (np.random.default_rng(s) for s in seeds)
    pipeline = cfg.build_pipeline(features.n_classes, init_rng).train()
    opt = Adam(pipeline.parameters(), lr=cfg.lr)
    loss_cfg = LossConfig(cfg.delta, cfg.lam, cfg.epsilon) if cfg.variant == "diffres" else None
    onehot = np.eye(features.n_classes)[features.labels]
    n = len(features.labels)
    history, diags = [], []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    probs, diag = pipeline(features.log_mel[idx])
                    bce = bce_loss(probs, onehot[idx])
                    guide = guide_loss(diag.s, features.energy[idx], loss_cfg) if loss_cfg else None
                    loss = total_loss(bce, guide) if guide is not None else bce
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite forward pass at step {step}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
            opt.zero_grad()
            tape.backward(loss)
            if loss_cfg is not None:
                for p in pipeline.diffres.parameters():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise TrainingDiverged(f"non-finite DiffRes gradient at step {step}")
            opt.step()

            acc = float(np.mean(probs.data.argmax(axis=1) == features.labels[idx]))
            rho = math.nan
            if diag is not None:
                per_clip = [clip_diagnostics(s, e, loss_cfg)
                            for s, e in zip(diag.s.data, features.energy[idx])]
                rho = float(np.mean([d["rho"] for d in per_clip]))
                if log_diagnostics:
                    diags.extend({"step": step, "clip_id": int(c), **d} for c, d in zip(idx, per_clip))
            history.append({
                "step": step,
                "variant": cfg.variant,
                "loss_total": loss.item(),
                "loss_bce": bce.item(),
                "loss_guide": guide.item() if guide is not None else 0.0,
                "rho": rho,
                "acc": acc,
            })
            step += 1
        log.info("epoch %d: loss %.4f acc %.3f", epoch, history[-1]["loss_total"], history[-1]["acc"])
    return TrainResult(pipeline, history, diags)


def predict(pipeline, features, batch_size=64):
    pipeline.eval()
    probs, scores = [], []
    for start in range(0, len(features.labels), batch_size):
        p, diag = pipeline(features.log_mel[start:start + batch_size])
        probs.append(p.data)
        if diag is not None:
            scores.append(diag.s.data)
    return np.concatenate(probs), (np.concatenate(scores) if scores else None)


def confusion_matrix(labels, predicted, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predicted), 1)
    return cm


def accuracy_report(labels, predicted, n_classes):
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    if labels.shape != predicted.shape:
        raise ValueError("labels and predictions differ in length")
    if predicted.size and (predicted.max() >= n_classes or labels.max() >= n_classes):
        raise ValueError("class index out of range")
    per_class = {}
    for k in range(n_classes):
        sel = labels == k
        per_class[k] = float(np.mean(predicted[sel] == k)) if sel.any() else math.nan
    return {
        "accuracy": float(np.mean(labels == predicted)) if labels.size else math.nan,
        "per_class": per_class,
        "confusion": confusion_matrix(labels, predicted, n_classes).tolist(),
    }


def evaluate(pipeline, features, loss_cfg=None):
    """Argmax accuracy (overall and per class); for diffres also score statistics."""
    n_out = pipeline.classifier.head.bias.size
    if n_out != features.n_classes:
        raise ValueError(f"model predicts {n_out} classes, data has {features.n_classes}")
    probs, scores = predict(pipeline, features)
    report = accuracy_report(features.labels, probs.argmax(axis=1), features.n_classes)
    if scores is not None:
        loss_cfg = loss_cfg or LossConfig(pipeline.delta)
        empty = features.energy < loss_cfg.epsilon
        active = features.energy > loss_cfg.epsilon
        report["mean_score_empty"] = _mean_or_nan(scores[empty])
        report["mean_score_active"] = _mean_or_nan(scores[active])
        report["rho"] = float(np.mean(activeness(scores, features.energy, loss_cfg.delta,
                                                 loss_cfg.epsilon)))
    return report


# artifacts

def save_checkpoint(path, pipeline):
    container.save_named(path, pipeline.state_dict())


def load_checkpoint(path, pipeline):
    state = container.load(path)
    if not isinstance(state, dict):
        raise container.ContainerError("checkpoint must be a named-tensor ADRS file")
    try:
        pipeline.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise container.ContainerError(f"checkpoint does not match the model: {exc}") from exc
    return pipeline


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, **sections):
    manifest = {
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "git_describe": git_describe(),
        **sections,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


GNUPLOT = """\
set datafile separator ','
set key autotitle columnhead
set multiplot layout 3,1
plot 'metrics.csv' using 1:5 with lines title 'guide loss'
plot 'metrics.csv' using 1:6 with lines title 'activeness'
plot 'metrics.csv' using 1:7 with lines title 'batch accuracy'
unset multiplot
"""


def run_training(cfg: TrainConfig, data_cfg: SyntheticDatasetConfig, out_dir, flags=None):
    """Generate data, train, evaluate on the held-out split and write all run files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    train_set, test_set = generate_dataset(data_cfg)
    pipe_probe = cfg.build_pipeline(data_cfg.n_classes)
    spec = pipe_probe.input_config(cfg.spec_config(data_cfg.sample_rate))
    result = train(cfg, features_for(train_set, spec))
    report = evaluate(result.pipeline, features_for(test_set, spec))
    write_csv(out / "metrics.csv", result.history, METRIC_COLUMNS)
    if result.diagnostics:
        write_csv(out / "diagnostics.csv", result.diagnostics, DIAG_COLUMNS)
    (out / "plot.gp").write_text(GNUPLOT)
    save_checkpoint(out / "checkpoint.adrs", result.pipeline)
    (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out / "manifest.json", command="train", flags=flags or {},
                   train=asdict(cfg), data=asdict(data_cfg), started=started)
    return result, report


def load_run(run_dir):
    """Rebuild (pipeline, TrainConfig, SyntheticDatasetConfig) from a run directory."""
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = TrainConfig(**manifest["train"])
    data = dict(manifest["data"])
    for key in ("tone_frequencies", "amplitude_range"):
        data[key] = tuple(data[key])
    data_cfg = SyntheticDatasetConfig(**data)
    pipeline = load_checkpoint(run / "checkpoint.adrs", cfg.build_pipeline(data_cfg.n_classes))
    return pipeline, cfg, data_cfg

import csv
import json

import numpy as np
import pytest

from adares.autodiff import Tape
from adares.autodiff import tensor as tn
from adares.autodiff.gradcheck import grad_check_params
from adares.diffres import WarpMatrix, warp_frames
from adares.dsp import SpectrogramConfig, Waveform, hz_to_mel, mel_center_frequencies, mel_spectrogram
from adares.harness.bench import BENCH_COLUMNS, bench_throughput
from adares.harness.data import SyntheticDatasetConfig, features_for, generate_dataset
from adares.harness.models import (
    ConvEncoder,
    Pipeline,
    avg_pool,
    block_warp,
    canonical_variant,
    chsize,
    conv_avg_pool,
    reduction_factor,
)
from adares.harness.train import (
    TrainConfig,
    accuracy_report,
    evaluate,
    load_run,
    run_training,
    train,
)
from adares.losses import LossConfig, guide_loss

SMALL = SyntheticDatasetConfig(n_train=64, n_test=32, seed=3)
SPEC16 = SpectrogramConfig(n_mels=16)


@pytest.fixture(scope="module")
def small_features():
    tr, te = generate_dataset(SMALL)
    return features_for(tr, SPEC16), features_for(te, SPEC16)


# data

def test_dataset_is_deterministic():
    a, _ = generate_dataset(SMALL)
    b, _ = generate_dataset(SMALL)
    assert a.waveforms.tobytes() == b.waveforms.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    c, _ = generate_dataset(SyntheticDatasetConfig(n_train=64, n_test=32, seed=4))
    assert a.waveforms.tobytes() != c.waveforms.tobytes()


def test_dataset_config_rejections():
    with pytest.raises(ValueError):
        generate_dataset(SyntheticDatasetConfig(events_per_clip=0))
    with pytest.raises(ValueError):
        generate_dataset(SyntheticDatasetConfig(events_per_clip=8, event_length_ms=150))
    tr, _ = generate_dataset(SyntheticDatasetConfig(events_per_clip=0, background_class=True,
                                                    n_train=4, n_test=1))
    assert np.all(tr.labels == 3)
    assert np.abs(tr.waveforms).max() < 1e-3


def test_events_carry_class_tone():
    tr, _ = generate_dataset(SMALL)
    centers = hz_to_mel(mel_center_frequencies(SpectrogramConfig()))
    for k in range(8):
        label = tr.labels[k]
        start, stop = tr.events[k][0]
        sp = mel_spectrogram(Waveform(tr.waveforms[k]), SpectrogramConfig())
        mid = (start + stop) // 2 // 160
        expect = int(np.argmin(np.abs(centers - hz_to_mel(SMALL.tone_frequencies[label]))))
        assert abs(int(sp.linear_values[:, mid].argmax()) - expect) <= 1


def test_features_have_empty_and_active_frames(small_features):
    tr, _ = small_features
    empty = tr.energy < 1e-4
    assert 0.3 < empty.mean() < 0.9
    assert tr.log_mel.shape == (64, 16, 100)


# baselines

def test_avg_pool_examples():
    np.testing.assert_allclose(avg_pool(np.array([[1.0, 3, 5, 7]]), 2).data, [[2, 6]])
    np.testing.assert_allclose(avg_pool(np.full((3, 8), 4.2), 4).data, 4.2)
    np.testing.assert_allclose(avg_pool(np.array([[1.0, 3, 5]]), 2).data, [[2, 5]])


def test_avg_pool_equals_block_warp():
    X = np.random.default_rng(0).standard_normal((5, 24))
    for k in (1, 2, 3, 4):
        W = block_warp(24, k)
        warp = WarpMatrix(tn.Tensor(W), "normalized", (W > 0).astype(float))
        np.testing.assert_allclose(avg_pool(X, k).data, warp_frames(X, warp, "mean").data, atol=1e-12)


def test_chsize_factors():
    w = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 16000))
    assert chsize(w, 4).T == 25
    np.testing.assert_array_equal(chsize(w, 1).values, mel_spectrogram(w).values)
    with pytest.raises(ValueError):
        chsize(Waveform(np.zeros(800)), 8)


def test_reduction_factor():
    assert reduction_factor(0.5) == 2 and reduction_factor(0.75) == 4
    with pytest.raises(ValueError):
        reduction_factor(0.3)
    assert canonical_variant("mel-100fps") == "mel"
    with pytest.raises(ValueError):
        canonical_variant("leaf")


def test_conv_encoder_count_and_shape():
    enc = ConvEncoder(128, np.random.default_rng(0))
    assert enc.num_parameters() == 493824
    out = conv_avg_pool(np.random.default_rng(1).standard_normal((128, 40)), enc, 4)
    assert out.shape == (128, 10)
    with pytest.raises(ValueError):
        conv_avg_pool(np.ones((64, 40)), enc, 4)


def test_conv_avg_pool_gradcheck():
    rng = np.random.default_rng(2)
    enc = ConvEncoder(6, rng)
    X = rng.standard_normal((3, 6, 16))
    R = rng.standard_normal((3, 6, 4))
    err = grad_check_params(lambda: tn.sum_(conv_avg_pool(X, enc, 4) * R), enc.parameters(),
                            max_coords=6, rng=rng)
    assert err < 1e-4


def test_guide_loss_does_not_reach_classifier():
    rng = np.random.default_rng(3)
    pipe = Pipeline("diffres", 4, 0.5, 8, rng, width=4)
    X = rng.standard_normal((2, 8, 20))
    energy = np.where(rng.uniform(size=(2, 20)) < 0.5, 0.0, 1.0)
    with Tape() as tape:
        _, diag = pipe(X)
        loss = guide_loss(diag.s, energy, LossConfig(0.5))
    tape.backward(loss)
    assert all(p.grad is None for p in pipe.classifier.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in pipe.diffres.parameters())


@pytest.mark.parametrize("variant", ["diffres", "avgpool", "convavgpool", "chsize", "mel"])
def test_pipeline_output_frames(variant):
    pipe = Pipeline(variant, 4, 0.75, 16, np.random.default_rng(0), width=4)
    spec = pipe.input_config(SPEC16)
    T = spec.n_frames(16000)
    X = np.random.default_rng(1).standard_normal((2, 16, T))
    feat, _ = pipe.features(X)
    assert feat.shape[-1] == pipe.output_frames(T)
    expected = 100 if variant == "mel" else 25
    assert feat.shape[-1] == expected


# training

@pytest.mark.parametrize("variant", ["diffres", "avgpool", "convavgpool", "chsize", "mel"])
def test_train_smoke(tmp_path, variant):
    cfg = TrainConfig(variant=variant, epochs=1, batch_size=32, n_mels=16, width=8, seed=1)
    data = SyntheticDatasetConfig(n_train=64, n_test=16, seed=1)
    result, report = run_training(cfg, data, tmp_path)
    assert len(result.history) == 2
    assert all(np.isfinite(result.column("loss_total")))
    assert 0.0 <= report["accuracy"] <= 1.0
    for name in ("metrics.csv", "checkpoint.adrs", "eval.json", "manifest.json", "plot.gp"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "variant", "loss_total", "loss_bce", "loss_guide", "rho", "acc"]
    assert (tmp_path / "diagnostics.csv").exists() == (variant == "diffres")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {"git_describe", "created", "train", "data"} <= set(manifest)

    pipeline, cfg2, data2 = load_run(tmp_path)
    assert cfg2 == cfg and data2 == data
    _, te = generate_dataset(data)
    again = evaluate(pipeline, features_for(te, pipeline.input_config(cfg.spec_config())))
    assert again["accuracy"] == pytest.approx(report["accuracy"])


def test_training_is_deterministic(small_features):
    tr, _ = small_features
    cfg = TrainConfig(variant="diffres", epochs=1, batch_size=16, n_mels=16, width=8, seed=5)
    a, b = train(cfg, tr), train(cfg, tr)
    for col in ("loss_total", "rho", "acc"):
        np.testing.assert_array_equal(a.column(col), b.column(col))
    assert [d["rho"] for d in a.diagnostics] == [d["rho"] for d in b.diagnostics]


def test_diffres_gradients_finite_and_guide_logged(small_features):
    tr, _ = small_features
    cfg = TrainConfig(variant="diffres", epochs=2, batch_size=16, n_mels=16, width=8, seed=2)
    res = train(cfg, tr)
    assert np.all(np.isfinite(res.column("loss_guide")))
    assert np.all(res.column("loss_guide") >= 0)
    assert len(res.diagnostics) == 2 * 64


def test_accuracy_report_against_confusion_trace():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 400)
    pred = np.where(rng.uniform(size=400) < 0.6, labels, rng.integers(0, 4, 400))
    rep = accuracy_report(labels, pred, 4)
    cm = np.array(rep["confusion"])
    assert cm.sum() == 400
    assert rep["accuracy"] == pytest.approx(np.trace(cm) / 400)
    assert accuracy_report(labels, labels, 4)["accuracy"] == 1.0
    chance = accuracy_report(labels, rng.integers(0, 4, 400), 4)["accuracy"]
    assert abs(chance - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 400)
    with pytest.raises(ValueError):
        accuracy_report(labels, pred[:10], 4)


def test_evaluate_rejects_class_mismatch(small_features):
    _, te = small_features
    pipe = Pipeline("avgpool", 3, 0.5, 16, np.random.default_rng(0), width=4)
    with pytest.raises(ValueError):
        evaluate(pipe, te)


# bench

@pytest.mark.parametrize("reps", [1, 3])
def test_bench_schema(reps):
    rows = bench_throughput(["mel", "avgpool"], seconds=1.0, repetitions=reps, batch=2,
                            spec_cfg=SPEC16)
    assert [r["variant"] for r in rows] == ["mel", "mel+classifier", "avgpool", "avgpool+classifier"]
    for r in rows:
        assert tuple(r) == BENCH_COLUMNS
        assert r["clips_per_second"] > 0 and r["mean_ms"] > 0 and r["std_ms"] >= 0
    assert rows[0]["fps_out"] == 100.0 and rows[2]["fps_out"] == 25.0

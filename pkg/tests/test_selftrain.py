import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gstuda import pgm, pipeline
from gstuda.selftrain import (GstConfig, adapt_round, generate_pseudo_labels, p_schedule, pretrain, retrain, run_gst,
                              source_loss, target_loss)
from gstuda.synthdata import generate_image_pair, preset_specs
from gstuda.tensor import Tensor, backward, sgd_step
from gstuda.translator import ModelConfig, build_model, forward

SIZE = (16, 16)


def domain(preset, n_source=8, n_target=4, seed=0):
    src, tgt = preset_specs(preset, seed)
    s = [generate_image_pair(src, i, size=SIZE) for i in range(n_source)]
    t = [generate_image_pair(tgt, i, size=SIZE) for i in range(n_target)]
    x_s, y_s = np.stack([a for a, _ in s]), np.stack([b for _, b in s])
    return (x_s, y_s), np.stack([a for a, _ in t]), np.stack([b for _, b in t])


# ---------------------------------------------------------------- losses

def test_source_loss_examples():
    y = np.random.default_rng(0).random((1, 4, 4)).astype(np.float32)
    assert source_loss(y, Tensor(y)).item() == 0.0
    assert source_loss(np.ones(2), Tensor(np.zeros(2))).item() == 2.0


def test_source_loss_matches_naive_oracle():
    rng = np.random.default_rng(1)
    y, yt = rng.random((3, 1, 5, 5)), rng.random((3, 1, 5, 5))
    naive = 0.0
    for idx in np.ndindex(*y.shape):
        naive += (y[idx] - yt[idx]) ** 2
    assert abs(source_loss(y, Tensor(yt)).item() - naive / 3) < 1e-6


def test_target_loss_examples():
    z = np.zeros((1, 3, 3))
    assert target_loss(z + 0.3, Tensor(z), Tensor(z + 0.7), z).item() == 0.0
    one = np.ones((1, 1, 1))
    v = target_loss(one * 0.5, Tensor(one * 0.0, dtype=np.float64), Tensor(one * math.log(0.25)), one).item()
    assert v == pytest.approx(1 - math.log(4), abs=1e-4)
    assert v == pytest.approx(-0.3863, abs=1e-4)


def test_target_loss_regularizer_scope():
    rng = np.random.default_rng(0)
    lv = rng.standard_normal((1, 4, 4))
    mask = np.zeros((1, 4, 4))
    z = np.zeros((1, 4, 4))
    assert target_loss(z, Tensor(z), Tensor(lv), mask, mask_regularizer=True).item() == 0.0
    assert target_loss(z, Tensor(z), Tensor(lv), mask, mask_regularizer=False).item() == pytest.approx(lv.sum())


def test_target_loss_gives_no_gradient_to_labels():
    y_hat = Tensor(np.full((1, 2, 2), 0.4), requires_grad=True)
    y_t = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    backward(target_loss(y_hat, y_t, Tensor(np.zeros((1, 2, 2))), np.ones((1, 2, 2))))
    assert y_hat.grad is None and y_t.grad is not None


def test_heteroscedastic_optimum_by_sgd():
    r, beta = 0.5, 1.0
    lv = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True)
    y_hat, y = np.full(1, r), Tensor(np.zeros(1, dtype=np.float64))
    for step in range(5000):
        lv.grad = None
        backward(target_loss(y_hat, y, lv, np.ones(1), beta))
        sgd_step({"lv": lv}, 0.1)
        if abs(math.exp(lv.data[0]) - r * r / beta) < 1e-4:
            break
    assert abs(math.exp(lv.data[0]) - 0.25) < 1e-4
    assert step < 5000


# ---------------------------------------------------------------- schedule

def test_p_schedule():
    assert p_schedule(GstConfig()) == [0.30, 0.40, 0.50, 0.60, 0.70, 0.80]
    assert p_schedule(GstConfig(rounds=1)) == [0.30]
    d = GstConfig()
    assert (d.K, d.beta) == (20, 1.0)
    with pytest.raises(ValueError):
        GstConfig(ablation="gst_x")
    with pytest.raises(ValueError):
        GstConfig(p_start=0.9, p_end=0.3)


# ---------------------------------------------------------------- training

def test_pretrain_zero_epochs_is_identity():
    (x, y), _, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2))
    out, history = pretrain(params, x, y, GstConfig(pretrain_epochs=0))
    assert out.equal(params) and history == []


def test_pretrain_descends_and_is_reproducible():
    (x, y), _, _ = domain("cross_scanner", n_source=16)
    cfg = GstConfig(pretrain_epochs=6)
    params = build_model(ModelConfig(input_size=SIZE, base_channels=4))

    def val_loss(p):
        mean, _ = forward(p, x)
        return float(np.sum((mean.data - y) ** 2))

    a, hist = pretrain(params, x, y, cfg)
    b, _ = pretrain(params, x, y, cfg)
    assert a.equal(b)
    assert val_loss(a) < val_loss(params)
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_degenerate_epistemic_only_round():
    source, x_t, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2, dropout_rate=0.0))
    cfg = GstConfig(K=3, ablation="gst_a", epochs_per_round=1)
    _, report = adapt_round(params, source, x_t, 0.3, cfg)
    n = SIZE[0] * SIZE[1]
    k = math.floor(0.3 * n)
    for pl in report.pseudo_labels:
        expected = np.zeros(n, dtype=np.float32)
        expected[:k] = 1
        np.testing.assert_array_equal(pl.mask.reshape(-1), expected)
    assert report.masked_fraction == k / n


def test_rate_zero_gst_e_matches_full():
    source, x_t, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2, dropout_rate=0.0))
    cfg = GstConfig(K=3, rounds=2, epochs_per_round=1)
    full, rep_full = run_gst(cfg, params, source, x_t)
    ale, rep_ale = run_gst(cfg.replace(ablation="gst_e"), params, source, x_t)
    assert full.equal(ale)
    assert [r.batch_losses for r in rep_full] == [r.batch_losses for r in rep_ale]


def test_run_gst_reproducible_and_logged(tmp_path):
    source, x_t, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2))
    cfg = GstConfig(K=4, rounds=3, epochs_per_round=1)
    a, reports = run_gst(cfg, params, source, x_t, out_dir=tmp_path)
    b, _ = run_gst(cfg, params, source, x_t)
    assert a.equal(b)
    assert [r.p for r in reports] == [0.3, 0.55, 0.8]
    rows = list(csv.DictReader(open(tmp_path / "rounds.csv")))
    assert [float(r["p"]) for r in rows] == [0.3, 0.55, 0.8]
    assert sorted(f.name for f in tmp_path.glob("round_*.ckpt")) == ["round_0.ckpt", "round_1.ckpt", "round_2.ckpt"]
    fractions = [r.masked_fraction for r in reports]
    assert fractions == sorted(fractions) and len(set(fractions)) == 3


def test_training_never_reads_target_oracle(tmp_path, monkeypatch):
    data = tmp_path / "data"
    pipeline.generate_data("cross_scanner", data, 0, n_source=6, n_target=3)
    opened = []
    real = pgm.read_pgm

    def audited(path):
        opened.append(str(path))
        return real(path)

    monkeypatch.setattr(pgm, "read_pgm", audited)
    cfg = GstConfig(pretrain_epochs=1, rounds=1, epochs_per_round=1, K=2)
    ckpt = pipeline.run_pretrain(data, tmp_path / "pre", ModelConfig(base_channels=2), cfg)
    pipeline.run_adapt(data, ckpt, tmp_path / "adapt", cfg)
    touched_target = [p for p in opened if "/target/" in p]
    assert touched_target and not any("clean" in p for p in touched_target)
    opened.clear()
    pipeline.evaluate(data / "target.jsonl", tmp_path / "ev", checkpoint=tmp_path / "adapt" / "final.ckpt")
    assert any("/target/clean" in p for p in opened)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.2, 4.0))
def test_sigma2_optimum_closed_form(r, beta):
    lv = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True)
    y_hat, y = np.full(1, r), Tensor(np.zeros(1, dtype=np.float64))
    target = r * r / beta
    for _ in range(20000):
        lv.grad = None
        backward(target_loss(y_hat, y, lv, np.ones(1), beta))
        # curvature at the optimum is beta in log-variance coordinates
        sgd_step({"lv": lv}, 0.5 / beta)
        if abs(math.exp(lv.data[0]) - target) < 1e-7:
            break
    assert abs(math.exp(lv.data[0]) - target) < 1e-6


def test_step_b_repeatable_from_frozen_labels():
    source, x_t, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2))
    cfg = GstConfig(K=3, epochs_per_round=1)
    labels = generate_pseudo_labels(params, x_t, 0.5, cfg)
    a, b = params.copy(), params.copy()
    la = retrain(a, *source, x_t, labels, cfg, np.random.default_rng(0))
    lb = retrain(b, *source, x_t, labels, cfg, np.random.default_rng(0))
    assert a.equal(b) and la == lb


def test_total_loss_decomposes():
    source, x_t, _ = domain("cross_scanner")
    params = build_model(ModelConfig(input_size=SIZE, base_channels=2))
    _, report = adapt_round(params, source, x_t, 0.4, GstConfig(K=3, epochs_per_round=2))
    assert report.batch_losses
    for total, src, tgt in report.batch_losses:
        assert abs(total - (src + tgt)) <= 1e-6 * max(1.0, abs(total))

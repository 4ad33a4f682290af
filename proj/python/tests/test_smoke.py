import math

import numpy as np
import pytest

import ctdg


def test_positional_encoding_first_slot():
    assert ctdg.positional_encoding(0) == [0, 1, 0, 1, 0, 1, 0, 1]
    pe = ctdg.positional_encoding(3)
    assert pe[0] == pytest.approx(math.sin(3.0))
    assert pe[1] == pytest.approx(math.cos(3.0))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    feat = rng.normal(size=(2, 5, 3, 6))
    w = ctdg.attention_weights(feat, np.ones((2, 3)))
    assert w.shape == (2, 3, 4)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert (w >= 0).all()


def test_spectral_sigma_matches_svd():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(6, 9))
    assert ctdg.spectral_sigma(m, 200) == pytest.approx(np.linalg.svd(m, compute_uv=False)[0], rel=1e-6)


def test_gradient_penalty_anchors():
    for norm, expected in [(0.0, 10.0), (1.0, 0.0), (2.0, 10.0)]:
        g = np.zeros((1, 4))
        g[0, 0] = norm
        assert ctdg.gradient_penalty(g, 10.0) == expected


def test_auc_pairwise():
    scores = [0.1, 0.4, 0.4, 0.9, 0.2]
    labels = [0, 1, 0, 1, 0]
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    oracle = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
    assert ctdg.rank_auc(scores, labels) == oracle
    with pytest.raises(ValueError):
        ctdg.rank_auc([1.0, 2.0], [1, 1])


def test_regularity_range():
    r = ctdg.regularity([3.0, 1.0, 2.0])
    assert min(r) == 0.0 and max(r) == 1.0


def test_error_measures():
    a = np.zeros((2, 4, 4, 4))
    b = np.full((2, 4, 4, 4), 0.5)
    assert ctdg.prediction_error(a, b) == pytest.approx(0.25)
    assert ctdg.psnr(b, a) == pytest.approx(10 * math.log10(0.5 / 0.25), rel=1e-6)


def test_pipeline(tmp_path):
    train = str(tmp_path / "train.ctds")
    test = str(tmp_path / "test.ctds")
    ctdg.synth("moving-squares", "train", 3, resolution=32, clips=2, frames=10, out=train)
    ctdg.synth("moving-squares", "test", 3, resolution=32, clips=1, frames=64, out=test)
    images, flows, labels = ctdg.load_clip(test, 0)
    assert images.shape == (64, 32, 32) and flows.shape == (64, 32, 32, 3) and len(labels) == 64
    model = str(tmp_path / "m.ckpt")
    initial, final, steps = ctdg.train(train, model, model="tiny", max_steps=3, batch=2)
    assert steps == 3 and math.isfinite(initial) and math.isfinite(final)
    scores = ctdg.score(test, model)
    assert len(scores["regularity"]) == len(scores["label"]) > 0
    fraction, row_err = ctdg.perturb(test, model, windows=4)
    assert 0.0 <= fraction <= 1.0 and row_err < 1e-9


def test_invalid_input_raises():
    with pytest.raises(ValueError):
        ctdg.synth("nope", "train", 1, out="/tmp/never.ctds")

import json
import math

import numpy as np
import pytest

import hydramix as hm


def test_sharpen_matches_numpy():
    d = np.array([0.5, 0.3, 0.2], dtype=np.float32)
    got = hm.sharpen(d, 0.5)
    powered = d.astype(np.float64) ** 2.0
    want = powered / powered.sum()
    np.testing.assert_allclose(got, want, rtol=1e-6)
    assert got.sum() == pytest.approx(1.0, abs=1e-6)


def test_sharpen_rejects_bad_temperature():
    with pytest.raises(ValueError):
        hm.sharpen(np.array([0.5, 0.5], dtype=np.float32), 0.0)


def test_sample_gamma_range():
    rng = hm.Rng(3)
    draws = [hm.sample_gamma(0.75, 0.75, rng) for _ in range(200)]
    assert all(0.5 <= g <= 1.0 for g in draws)
    assert len(set(draws)) > 1


def test_mixup_convexity_and_centroid():
    image_a = np.array([0.0, 1.0], dtype=np.float32)
    image_b = np.array([1.0, 0.0], dtype=np.float32)
    label_a = np.array([1.0, 0.0], dtype=np.float32)
    label_b = np.array([0.0, 1.0], dtype=np.float32)
    image, label, cx, cy = hm.mixup(image_a, label_a, 0.25, 0.75, image_b, label_b, 0.6)
    np.testing.assert_allclose(image, [0.4, 0.6], rtol=1e-6)
    np.testing.assert_allclose(label, [0.6, 0.4], rtol=1e-6)
    assert (cx, cy) == (0.25, 0.75)


def test_losses_match_closed_forms():
    target = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
    pred = np.array([[0.7, 0.2, 0.1]], dtype=np.float32)
    assert hm.cross_entropy(target, pred) == pytest.approx(-math.log(0.7), abs=1e-6)
    # zero target entries hit the clamp: -(0.7*0 + 0.2*(-4) + 0.1*(-4)) with log 1 = 0
    assert hm.reverse_cross_entropy(target, pred, -4.0) == pytest.approx(1.2, abs=1e-6)
    assert hm.sce(target, pred, 1.0, 0.5, -4.0) == pytest.approx(
        -math.log(0.7) + 0.5 * 1.2, abs=1e-6
    )


def test_joint_loss_parts_combine():
    n, c = 2, 3
    rng = np.random.default_rng(5)
    probs = lambda: rng.dirichlet(np.ones(c), size=n).astype(np.float32)
    coords = lambda: rng.uniform(size=n).astype(np.float32)
    args = [probs(), coords(), coords(), probs(), coords(), coords()] * 2
    parts = hm.joint_loss(*args, mu=0.8)
    want = 0.8 * (parts["sce_labelled"] + parts["sce_unlabelled"]) + 0.2 * (
        parts["mse_labelled"] + parts["mse_unlabelled"]
    )
    assert parts["total"] == pytest.approx(want, rel=1e-6)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "corpus"
    hm.generate_dataset(str(out), n_train=45, n_test=15, seed=9)
    return str(out)


def test_dataset_roundtrip_and_split(corpus):
    summary = hm.dataset_summary(corpus)
    assert summary["classes"] == ["tumour", "lymphocyte", "background"]
    assert (summary["n_train"], summary["n_test"]) == (45, 15)

    labelled, unlabelled = hm.make_split(corpus, budget=9, seed=1)
    assert len(labelled) == 9
    assert len(unlabelled) == 36
    assert not set(labelled) & set(unlabelled)

    with pytest.raises(ValueError):
        hm.make_split(corpus, budget=2, seed=1)


def test_train_run_and_eval(corpus, tmp_path):
    out = tmp_path / "run"
    history = hm.train_run(
        str(corpus), str(out), mode="hydramix", budget=9, seed=3, epochs=1, batch_size=8
    )
    assert len(history) == 1
    assert 0.0 <= history[0]["test_accuracy"] <= 1.0

    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["test_accuracy"] == history[0]["test_accuracy"]

    result = hm.evaluate_checkpoint(str(out / "ckpt_final.hmxw"), str(corpus))
    assert result["test_accuracy"] == history[-1]["test_accuracy"]
    assert result["confusion"] == history[-1]["confusion"]

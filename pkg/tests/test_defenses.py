import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from baatbench import defenses as dfn
from baatbench.models import build_model
from baatbench.training import TrainConfig, TrainedModel, UnsupportedArchitecture, benign_accuracy
from baatbench.triggers import badnets


class FixedProbs:
    """Stands in for a model in STRIP: same probability vector for every input."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=np.float64)

    def probs(self, x):
        return np.tile(self.p, (len(x), 1))


def test_report_ranges():
    with pytest.raises(ValueError):
        dfn.DefenseReport("x", ba_before=101.0)
    with pytest.raises(ValueError):
        dfn.DefenseReport("x", auroc=1.2)
    assert dfn.DefenseReport("x", ba_before=50.0, auroc=0.5).to_dict()["defense"] == "x"
    assert set(dfn.RESERVED_DEFENSES) == {"MCR", "NAD", "AutoEncoder"}


def test_benign_fraction(easy4):
    sub = dfn.benign_fraction(easy4.train, 0.5, seed=1)
    assert len(sub) == len(easy4.train) // 2
    assert np.array_equal(sub.images, dfn.benign_fraction(easy4.train, 0.5, seed=1).images)
    with pytest.raises(ValueError):
        dfn.benign_fraction(easy4.train, 0.0)


# --- fine-tuning


def test_fine_tune_zero_lr_is_identity(tiny_model, easy4):
    tuned, trace = dfn.fine_tune(tiny_model, easy4.train, epochs=2, lr=0.0, test=easy4.test, trigger=badnets(3),
                                 target_class=1)
    assert np.array_equal(tuned.logits(easy4.test.images), tiny_model.logits(easy4.test.images))
    assert [t["epoch"] for t in trace] == [1, 2] and trace[0]["ba"] == trace[1]["ba"]


def test_fine_tune_touches_only_fc(tiny_model, easy4):
    tuned, trace = dfn.fine_tune(tiny_model, easy4.train.take(range(64)), epochs=2, lr=0.05, batch_size=32,
                                 test=easy4.test)
    fc = {id(p) for p in tuned.model.fc_parameters()}
    changed_fc = False
    for (name, p), q in zip(tuned.model.state_dict().items(), tiny_model.model.state_dict().values()):
        is_fc = any(p.data_ptr() == f.data_ptr() for f in tuned.model.fc_parameters())
        if is_fc:
            changed_fc |= not torch.equal(p, q)
        else:
            assert torch.equal(p, q), name
    assert changed_fc and len(fc) == 4
    assert [t["epoch"] for t in trace] == [1, 2] and trace[0]["asr"] is None
    # the original model is untouched
    assert all(p.requires_grad for p in tiny_model.model.parameters())


def test_fine_tune_needs_data(tiny_model, easy4):
    with pytest.raises(dfn.DefenseError):
        dfn.fine_tune(tiny_model, easy4.train.take([]))


# --- pruning


def test_prune_zero_is_identity(tiny_model, easy4):
    pruned = dfn.prune_channels(tiny_model, easy4.train, 0.0)
    assert np.array_equal(pruned.logits(easy4.test.images), tiny_model.logits(easy4.test.images))


def test_prune_zeroes_least_active(tiny_model, easy4):
    act = dfn.channel_activations(tiny_model, easy4.train.images)
    pruned = dfn.prune_channels(tiny_model, easy4.train, 0.5)
    mask = pruned.model.channel_mask.numpy()
    C = len(act)
    assert (mask == 0).sum() == C // 2
    assert act[mask == 0].max() <= act[mask == 1].min()
    # architecture intact: same parameters, only the mask buffer differs
    for k, v in tiny_model.model.state_dict().items():
        if k != "channel_mask":
            assert torch.equal(v, pruned.model.state_dict()[k])
    assert tiny_model.model.channel_mask.min() == 1


def test_prune_sweep_grid(tiny_model, easy4):
    rows = dfn.prune_sweep(tiny_model, easy4.train, easy4.test, badnets(3), 1)
    assert [r["beta"] for r in rows][:3] == [0.0, 0.02, 0.04] and rows[-1]["beta"] == 0.98
    assert rows[-1]["pruned"] == int(0.98 * 32)
    assert rows[0]["ba"] == benign_accuracy(tiny_model, easy4.test)


def test_prune_rejects_mlp_and_bad_beta(tiny_model, easy4):
    mlp = TrainedModel("mlp", build_model("mlp", 4), 4, (3, 32, 32), TrainConfig())
    with pytest.raises(UnsupportedArchitecture):
        dfn.prune_channels(mlp, easy4.train, 0.1)
    with pytest.raises(ValueError):
        dfn.prune_channels(tiny_model, easy4.train, 1.0)


# --- ShrinkPad


@settings(max_examples=30, deadline=None)
@given(s=st.integers(0, 7), seed=st.integers(0, 100), c=st.sampled_from([1, 3]))
def test_shrink_pad_shape(s, seed, c):
    img = np.random.default_rng(seed).integers(0, 256, size=(c, 8, 8)).astype(np.uint8)
    out = dfn.shrink_pad(img, s, seed)
    assert out.shape == img.shape and out.dtype == np.uint8
    if s == 0:
        assert np.array_equal(out, img)
    else:
        assert (out == 0).sum() >= c * (8 * 8 - (8 - s) ** 2)  # padding border


def test_shrink_pad_bounds():
    with pytest.raises(ValueError):
        dfn.shrink_pad(np.zeros((3, 8, 8), np.uint8), 8)


def test_shrink_pad_report(tiny_model, easy4):
    r = dfn.shrink_pad_report(tiny_model, easy4.test, badnets(3), 1, shrink_pixels=4)
    assert r.params["shrink_pixels"] == 4 and 0 <= r.ba_after <= 100


# --- STRIP


def test_strip_uniform_and_onehot():
    pool = np.zeros((10, 3, 4, 4), np.uint8)
    x = np.ones((3, 4, 4), np.uint8)
    assert dfn.strip_entropy(FixedProbs(np.full(8, 1 / 8)), x, pool, n=5) == pytest.approx(3.0)
    assert dfn.strip_entropy(FixedProbs([0, 1, 0]), x, pool, n=5) == 0.0


def test_strip_pool_order_invariant(tiny_model, easy4):
    pool = easy4.train.images[:50]
    x = easy4.test.images[:3]
    a = dfn.strip_entropy(tiny_model, x, pool, n=16, seed=2)
    b = dfn.strip_entropy(tiny_model, x, pool[::-1].copy(), n=16, seed=2)
    assert np.array_equal(a, b)


def test_strip_variance_shrinks_with_n(tiny_model, easy4):
    pool = easy4.train.images
    x = easy4.test.images[0]

    def spread(n):
        return np.var([dfn.strip_entropy(tiny_model, x, pool, n=n, seed=s) for s in range(12)])

    assert spread(64) < spread(2)


def test_strip_checks(tiny_model, easy4):
    with pytest.raises(ValueError):
        dfn.strip_entropy(tiny_model, easy4.test.images[0], easy4.train.images, n=0)
    with pytest.raises(ValueError):
        dfn.strip_entropy(tiny_model, easy4.test.images[0], easy4.train.images[:0])


# --- SCALE-UP and AUROC


def test_scale_set_one(tiny_model, easy4):
    scores = dfn.scale_up_score(tiny_model, easy4.test.images[:10], (1,))
    assert np.all(scores == 1.0)
    auroc, _, _ = dfn.scale_up_auroc(tiny_model, easy4.test.images[:5], easy4.test.images[5:10], (1,))
    assert auroc == 0.5
    with pytest.raises(ValueError):
        dfn.scale_up_score(tiny_model, easy4.test.images[:2], ())
    with pytest.raises(ValueError):
        dfn.scale_up_score(tiny_model, easy4.test.images[:2], (0.5, 2))


def test_roc_auc_basics():
    assert dfn.roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert dfn.roc_auc([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert dfn.roc_auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        dfn.roc_auc([1, 2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(scores=st.lists(st.integers(0, 5), min_size=4, max_size=40), seed=st.integers(0, 1000))
def test_auroc_label_flip(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, size=len(scores))
    labels[0], labels[1] = 0, 1
    a = dfn.roc_auc(scores, labels)
    assert dfn.roc_auc(scores, 1 - labels) == pytest.approx(1 - a, abs=1e-12)


def test_scores_csv(tmp_path):
    dfn.write_scores_csv(tmp_path / "s.csv", [0.1, 0.25], [1, 0])
    rows = list(csv.reader(open(tmp_path / "s.csv", encoding="utf-8")))
    assert rows == [["score", "label"], ["0.1", "1"], ["0.25", "0"]]


# --- Neural Cleanse


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(0.1, 1000), min_size=3, max_size=12), scale=st.floats(0.01, 100))
def test_anomaly_index_scale_invariant(values, scale):
    a = dfn.anomaly_indices(values)
    b = dfn.anomaly_indices(np.asarray(values) * scale)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)


def test_anomaly_index_golden():
    # median 3, deviations 2, 1, 0, 1, 7 -> MAD 1
    np.testing.assert_allclose(dfn.anomaly_indices([1, 2, 3, 4, 10]), np.array([2, 1, 0, 1, 7]) / 1.4826)
    assert dfn.anomaly_indices([2, 2, 2, 5]).tolist() == [0, 0, 0, np.inf]


def test_mask_statistics():
    truth = np.zeros((8, 8), bool)
    truth[-2:, -2:] = True
    mask = np.zeros((8, 8))
    mask[-2:, -3:] = 0.8
    assert dfn.mask_iou(mask, truth) == pytest.approx(4 / 6)
    assert dfn.mask_iou(np.zeros((8, 8)), truth) == 0.0
    assert dfn.mask_concentration(mask) == 1.0 and dfn.is_concentrated(mask)
    assert dfn.mask_concentration(np.ones((8, 8))) == pytest.approx(0.25)
    assert not dfn.is_concentrated(np.ones((8, 8)))


def test_flip_iou():
    truth = np.zeros((8, 8), bool)
    truth[-2:, -2:] = True
    mirrored = np.zeros((8, 8))
    mirrored[-2:, :2] = 1.0
    assert dfn.mask_iou(mirrored, truth) == 0.0 and dfn.flip_iou(mirrored, truth) == 1.0
    assert dfn.flip_iou(truth.astype(float), truth) == 1.0


def test_synthesized_mask_range():
    with pytest.raises(ValueError):
        dfn.SynthesizedTrigger(0, np.full((2, 2), 1.5), np.zeros((3, 2, 2)), 6.0, 1.0)


def test_neural_cleanse_runs(tiny_model, easy4, tmp_path):
    res = dfn.neural_cleanse(tiny_model, easy4.test.images, steps=15, batch_size=16)
    assert [t.class_index for t in res.triggers] == [0, 1, 2, 3]
    for t in res.triggers:
        assert t.mask.shape == (32, 32) and 0 <= t.mask.min() and t.mask.max() <= 1
        assert t.pattern.shape == (3, 32, 32) and t.l1 == pytest.approx(t.mask.sum())
    assert set(res.anomaly_index) == {0, 1, 2, 3}
    assert set(res.flagged_small) <= set(res.flagged)
    assert all(p.requires_grad for p in tiny_model.model.parameters())
    rep = dfn.neural_cleanse_report(res, 1, np.zeros((32, 32), bool))
    assert "target_iou" in rep.scores and rep.notes
    assert len(dfn.save_synthesized(res, tmp_path)) == 16


def test_neural_cleanse_divergence_is_per_class(tiny_model, easy4, monkeypatch):
    real = dfn._reverse_one

    def flaky(net, pool_x, c, *a):
        if c == 2:
            raise FloatingPointError("boom")
        return real(net, pool_x, c, *a)

    monkeypatch.setattr(dfn, "_reverse_one", flaky)
    res = dfn.neural_cleanse(tiny_model, easy4.test.images, steps=5, batch_size=8)
    failed = res.trigger_for(2)
    assert failed.failed and "boom" in failed.note and np.isnan(res.anomaly_index[2])
    assert res.summary()["failed"] == [2]

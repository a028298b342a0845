"""Regression checks on trained desk models against their frozen calibration values.

The models come from the shared checkpoint cache (trained on first use).
"""
import pytest

import desk_oracles as desk
import oracles
from baatbench.experiments import Cache

pytestmark = pytest.mark.desk

FROZEN = oracles.frozen()
CHANCE = 100 / 10


@pytest.fixture(scope="module")
def cache():
    return Cache()


def frozen(key):
    if key not in FROZEN:
        pytest.fail(f"{key} not frozen; run tools/freeze_derived.py --desk")
    return FROZEN[key]


def test_easy_k4_floor(cache):
    acc = desk.easy_k4_accuracy(cache)
    assert acc > 95 and acc == pytest.approx(frozen("easy_k4_accuracy"), abs=1.0)


def test_desk_clean_baseline(cache):
    ba = desk.clean_baseline(cache)
    assert ba == pytest.approx(frozen("desk_clean_ba"), abs=1.0)
    assert ba > 5 * CHANCE


def test_pgd_breaks_desk_model(cache):
    acc = desk.pgd_accuracy(cache)
    assert acc < 30 and acc == pytest.approx(frozen("pgd_accuracy"), abs=3.0)


def test_uap_fools_above_base(cache):
    r = desk.uap_fooling(cache)
    assert r["fooling_rate"] >= 3 * r["base_rate"]
    assert r["fooling_rate"] == pytest.approx(frozen("uap_fooling")["fooling_rate"], abs=0.03)


def test_gradcam_localizes_patch(cache):
    iou = desk.gradcam_iou(cache)
    ref = frozen("gradcam_iou_badnets")
    assert iou["element"] > 0.25
    for w in ("channel", "element"):
        assert iou[w] == pytest.approx(ref[w], abs=0.05)


def test_fine_tune_regression(cache):
    r = desk.fine_tune_badnets(cache)
    ref = frozen("fine_tune_badnets")
    assert r["asr_before"] - r["asr_after"] == pytest.approx(ref["asr_before"] - ref["asr_after"], abs=5.0)
    assert r["ba_after"] == pytest.approx(ref["ba_after"], abs=2.0)


def test_prune_sacrifices_accuracy(cache):
    r = desk.prune_badnets(cache)
    assert r["ba_at_098"] < r["ba_at_0"] - 30
    assert r["ba_at_098"] == pytest.approx(frozen("prune_badnets")["ba_at_098"], abs=3.0)


def test_neural_cleanse_finds_patch(cache):
    r = desk.neural_cleanse_on("badnets", cache)
    ref = frozen("nc_badnets")
    assert r["target_iou"] == pytest.approx(ref["target_iou"], abs=0.1)
    assert r["anomaly_index"]["1"] == pytest.approx(ref["anomaly_index"]["1"], rel=0.2)


def test_neural_cleanse_clean_and_baat(cache):
    clean = desk.neural_cleanse_on("clean", cache)
    baat = desk.neural_cleanse_on("baat", cache)
    # flags on the clean model are logged in the frozen record rather than asserted
    assert clean["flagged"] == frozen("nc_clean")["flagged"]
    assert baat["target_concentration"] == pytest.approx(frozen("nc_baat")["target_concentration"], abs=0.05)

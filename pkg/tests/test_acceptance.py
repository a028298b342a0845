"""The twelve acceptance criteria, one test each.

Every test prints one ``PASS``/``FAIL`` line (collected into the terminal
summary) and then asserts. Desk runs share the default checkpoint cache, so
only the first run pays for training.
"""
import subprocess
import sys
import time
from pathlib import Path

import pytest

from baatbench import theory
from baatbench.experiments import Cache, run_experiment
from baatbench.experiments.presets import FIG2_AMPLIFICATION, attack_config, table2
from oracles import ACCEPTANCE_KEY

SEEDS = (0, 1, 2)
TESTS = Path(__file__).parent

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def cache():
    return Cache()


@pytest.fixture
def verdict(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line
    return record


def attack(cache, name, seed=0, **kw):
    r = run_experiment(attack_config(name, seed, **kw), cache)
    assert r.ok, f"{name} seed {seed}: {r.failed_stage}: {r.error}"
    return r


def ba_asr(r):
    return r.attack["benign_accuracy"], r.attack["attack_success_rate"]


def majority(flags):
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)


def fmt(xs):
    return "[" + ", ".join(f"{x:.1f}" for x in xs) + "]"


def test_1_theorem(verdict):
    t0 = time.perf_counter()
    reports, failures = theory.theorem_sweep(range(100), num_queries=500)
    deg = theory.confidence_gap(theory.build_paired_instances(seed=0, force_equal=True), 500, 0).gap
    took = time.perf_counter() - t0
    passing = 100 - len(failures)
    verdict(1, passing >= 95 and deg == 0.0 and took < 60,
            f"{passing}/100 seeds with gap >= -3 SE, degenerate gap {deg}, {took:.1f}s")


def test_2_oracle_agreement(verdict):
    diffs = []
    for s in range(10):
        pair = theory.build_paired_instances(d=1, seed=s)
        oracle, _ = theory.exhaustive_gap_oracle(pair, 4000)
        diffs.append(abs(oracle - theory.confidence_gap(pair, 10_000, seed=s).gap))
    verdict(2, max(diffs) < 0.01, f"max |oracle - MC| over 10 d=1 pairs = {max(diffs):.5f}")


def test_3_clean_label_specific_fails(cache, verdict):
    warp = [ba_asr(attack(cache, "warp_clean", s))[1] for s in SEEDS]
    spec = [ba_asr(attack(cache, "specific_clean", s))[1] for s in SEEDS]
    ok = majority(a < 20 for a in warp) and majority(a < 20 for a in spec)
    verdict(3, ok, f"warp-clean ASR {fmt(warp)}, specific-clean ASR {fmt(spec)} (need < 20, 2 of 3)")


def test_4_badnets_sanity(cache, verdict):
    rows = []
    for s in SEEDS:
        clean_ba = ba_asr(attack(cache, "clean", s))[0]
        ba, asr = ba_asr(attack(cache, "badnets", s))
        rows.append((asr, ba, clean_ba))
    ok = majority(asr > 80 and abs(ba - cb) <= 3 for asr, ba, cb in rows)
    detail = ", ".join(f"seed {s}: ASR {a:.1f} BA {b:.1f} vs clean {c:.1f}" for s, (a, b, c) in zip(SEEDS, rows))
    verdict(4, ok, detail)


def test_5_baat_superiority(cache, verdict):
    per_seed, flags = [], []
    for s in SEEDS:
        baat = ba_asr(attack(cache, "baat", s))[1]
        others = {a: ba_asr(attack(cache, a, s))[1] for a in ("warp_clean", "specific_clean", "lc", "tuap")}
        flags.append(all(baat - v >= 20 for v in others.values()))
        per_seed.append(f"seed {s}: BAAT {baat:.1f} vs " + " ".join(f"{k} {v:.1f}" for k, v in others.items()))
    verdict(5, majority(flags), "; ".join(per_seed))


def test_6_agnostic_vs_specific(cache, verdict):
    rates = (0.01, 0.02, 0.05)
    amp = FIG2_AMPLIFICATION
    frozen = [ba_asr(attack(cache, "frozen_poisoned", rate=r, intensity=amp))[1] for r in rates]
    specific = [ba_asr(attack(cache, "specific_poisoned", rate=r, intensity=amp))[1] for r in rates]
    ok = all(f >= s for f, s in zip(frozen, specific)) and frozen[0] - specific[0] > 10
    verdict(6, ok, f"rates {list(rates)}, amplification {amp}: agnostic ASR {fmt(frozen)}, "
                   f"specific ASR {fmt(specific)}")


def test_7_intensity_monotonicity(cache, verdict):
    strengths = (0, 0.5, 1, 1.5, 2)
    warp = [ba_asr(run_experiment(attack_config("warp_clean").with_path("poison.trigger.intensity", s),
                                  cache))[1] for s in strengths]
    amps = (0, 2, 4, 6, 8)
    spec = [ba_asr(run_experiment(attack_config("specific_clean").with_path("poison.trigger.intensity", a),
                                  cache))[1] for a in amps]
    ok = all(b >= a - 3 for a, b in zip(warp, warp[1:])) and all(a < 20 for a in spec)
    verdict(7, ok, f"warp-clean ASR over s {fmt(warp)}; specific-clean ASR over amplification {fmt(spec)}")


def test_8_robust_feature_trend(cache, verdict, tmp_path):
    rows = table2(0, tmp_path, cache, epsilons=(0, 4, 8, 16))["rows"]
    acc = [r["ba"] for r in rows]
    ok = all(b <= a + 2 for a, b in zip(acc, acc[1:])) and acc[-1] > 2 * 100 / 10
    verdict(8, ok, f"accuracy over eps 0/4/8/16 (/255): {fmt(acc)}")


def nc_scores(cache, name, seed):
    r = run_experiment(attack_config(name, seed, defenses=({"name": "neural_cleanse", "params": {}},)), cache)
    assert r.ok, r.error
    return r.defenses[0]["scores"]


def test_9_neural_cleanse(cache, verdict):
    flags, parts = [], []
    for s in SEEDS:
        b = nc_scores(cache, "badnets", s)
        a = nc_scores(cache, "baat", s)
        baat_max = max(v for v in a["anomaly_index"].values() if v == v)
        flags.append(b["target_anomaly_index"] > 2 and b["target_iou"] > 0.3 and baat_max <= 2)
        parts.append(f"seed {s}: BadNets index {b['target_anomaly_index']:.2f} IoU {b['target_iou']:.2f}, "
                     f"BAAT max index {baat_max:.2f}")
    verdict(9, majority(flags), "; ".join(parts))


def test_10_detection_ordering(cache, verdict):
    suite = ({"name": "strip", "params": {"n": 64, "alpha": 0.5, "num_samples": 100}},
             {"name": "scale_up", "params": {"num_samples": 200}})
    out = {}
    for name in ("badnets", "baat"):
        r = run_experiment(attack_config(name, 0, defenses=suite), cache)
        assert r.ok, r.error
        strip, scale = r.defenses
        out[name] = (strip["scores"]["mean_entropy_poisoned"], scale["auroc"])
    ok = out["badnets"][0] < out["baat"][0] and out["badnets"][1] - out["baat"][1] >= 0.2
    verdict(10, ok, f"STRIP entropy BadNets {out['badnets'][0]:.3f} vs BAAT {out['baat'][0]:.3f}; "
                    f"SCALE-UP AUROC BadNets {out['badnets'][1]:.3f} vs BAAT {out['baat'][1]:.3f}")


def test_11_lc_transfer(cache, verdict):
    same = ba_asr(attack(cache, "lc", 0, arch="conv_small"))[1]
    cross = ba_asr(attack(cache, "lc", 0, arch="conv_deeper"))[1]
    verdict(11, same - cross >= 10, f"LC ASR conv_small {same:.1f}, conv_deeper {cross:.1f} (deficit "
                                    f"{same - cross:.1f})")


PROPERTY_TESTS = [
    "test_triggers.py",
    "test_poisoning.py",
    "test_theory.py::test_prediction_is_probability_vector",
    "test_theory.py::test_target_confidence_is_component",
    "test_dataset.py",
    "test_defenses.py::test_shrink_pad_shape",
    "test_defenses.py::test_auroc_label_flip",
    "test_kernels.py",
]


def test_12_unit_invariants(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / t) for t in PROPERTY_TESTS]], capture_output=True, text=True, cwd=TESTS)
    took = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(12, proc.returncode == 0 and took < 60, f"{tail} ({took:.0f}s)")

"""Run orchestration: poison -> train -> evaluate -> defend, with checkpoints."""
import csv
import json
import platform
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .. import _accel, defenses as dfn
from ..dataset import SyntheticSpec, generate_synthetic, load_cifar10, subset
from ..poisoning import assemble_poisoned_dataset
from ..training import TrainConfig, evaluate, train
from ..triggers import (PerturbationSpec, frozen_specific, patch_mask, patch_spec, pgd_perturb, uap,
                        universal_perturbation)
from .cache import Cache, key
from .config import ConfigError, ExperimentConfig, get_path

STAGES = ("data", "surrogate", "trigger", "poison", "train", "evaluate", "defend")


class StageFailure(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


@dataclass
class RunReport:
    config_hash: str
    config: dict
    attack: dict = None  # AttackReport.to_dict()
    defenses: list = field(default_factory=list)
    wall_clock: float = 0.0
    environment: dict = field(default_factory=dict)
    failed_stage: str = None
    error: str = None
    artifacts: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.failed_stage is None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def environment_fingerprint():
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "numba": None if _accel.numba is None else _accel.numba.__version__,
        "kernel_backend": _accel.backend_name(),
    }


# ---------------------------------------------------------------------------
# Stages


def _load_data(cfg: ExperimentConfig, cache: Cache):
    dc = cfg.dataset
    k = key("data", asdict(dc))
    train_ds, test_ds = cache.get_dataset(k + "-train"), cache.get_dataset(k + "-test")
    if train_ds is not None and test_ds is not None:
        return train_ds, test_ds, k
    if dc.source == "synthetic":
        pair = generate_synthetic(SyntheticSpec(dc.num_classes, dc.per_class_train, dc.per_class_test,
                                                dc.image_size, dc.seed, difficulty=dc.difficulty))
    else:
        from ..dataset import cifar10_dir_from_env
        d = dc.cifar10_dir or cifar10_dir_from_env()
        if d is None:
            raise ConfigError("cifar10 source needs cifar10_dir or BAATBENCH_CIFAR10")
        pair = subset(load_cifar10(d), range(dc.num_classes), dc.per_class_train, dc.per_class_test, dc.seed)
    cache.put_dataset(k + "-train", pair.train)
    cache.put_dataset(k + "-test", pair.test)
    return pair.train, pair.test, k


def train_cached(arch, dataset, config: TrainConfig, cache: Cache, log=None):
    """Train, or load the checkpoint keyed by (arch, dataset content, config)."""
    k = key("model", arch, dataset.fingerprint(), config.to_dict())
    m = cache.get_model(k)
    if m is None:
        m = train(arch, dataset, config, log=log)
        cache.put_model(k, m)
    return m, k


def _surrogate(cfg, train_ds, cache, log):
    sc = cfg.surrogate
    tc = sc.train if sc.adversarial is None else replace(sc.train, adversarial_training=sc.adversarial)
    return train_cached(sc.arch, train_ds, tc, cache, log)


def _resolve_trigger(cfg, plan, train_ds, test_ds, surrogate, sur_key, cache):
    src = cfg.trigger_source
    if src is None:
        return plan
    if src["kind"] == "frozen_specific":
        img = train_ds.images[int(src.get("index", 0))]
        trig = frozen_specific(img, float(src.get("amplification", 1.0)), int(src.get("master_seed", 0)))
        return replace(plan, trigger=trig)
    eps = float(src.get("epsilon", 4 / 255))
    k = key("uap", sur_key, src, plan.target_class)
    pattern = cache.get_array(k)
    if pattern is None:
        res = universal_perturbation(surrogate.model, train_ds, plan.target_class,
                                     PerturbationSpec(epsilon=eps), holdout=test_ds,
                                     epochs=int(src.get("epochs", 5)), seed=int(src.get("seed", 0)))
        pattern = res.pattern
        cache.put_array(k, pattern)
    return replace(plan, trigger=uap(pattern, eps))


def _distort(cfg, train_ds, surrogate, sur_key, cache):
    d = cfg.distortion
    spec = PerturbationSpec(epsilon=float(d["epsilon"]), steps=int(d.get("steps", 10)))
    k = key("distort", sur_key, train_ds.fingerprint(), asdict(spec))
    ds = cache.get_dataset(k)
    if ds is None:
        imgs = pgd_perturb(surrogate.model, train_ds.images, train_ds.labels, spec)
        ds = train_ds.replace(images=imgs, name=f"{train_ds.name}-distorted")
        cache.put_dataset(k, ds)
    return ds


def _poison(plan, train_ds, surrogate, sur_key, cache):
    k = key("poison", train_ds.fingerprint(), plan.to_dict(), sur_key)
    ds = cache.get_dataset(k)
    if ds is None:
        ds = assemble_poisoned_dataset(train_ds, plan, surrogate=surrogate.model if surrogate else None).assembled
        cache.put_dataset(k, ds)
    return ds, k


def _run_defense(entry, model, train_ds, test_ds, trigger, target, seed, out_dir):
    name = entry["name"]
    p = dict(entry.get("params", {}))
    if name == "fine_tune":
        benign = dfn.benign_fraction(train_ds, p.get("fraction", 0.5), seed)
        before = evaluate(model, test_ds, trigger, target)
        tuned, trace = dfn.fine_tune(model, benign, epochs=p.get("epochs", 30), lr=p.get("lr", 0.01), seed=seed,
                                     test=test_ds, trigger=trigger, target_class=target)
        after = evaluate(tuned, test_ds, trigger, target)
        return dfn.DefenseReport(name, p, before.benign_accuracy, before.attack_success_rate,
                                 after.benign_accuracy, after.attack_success_rate, trace=trace)
    if name == "prune":
        benign = dfn.benign_fraction(train_ds, p.get("fraction", 0.1), seed)
        rows = dfn.prune_sweep(model, benign, test_ds, trigger, target, p.get("betas"))
        last = rows[-1]
        return dfn.DefenseReport(name, p, rows[0]["ba"], rows[0]["asr"], last["ba"], last["asr"], trace=rows)
    if name == "shrink_pad":
        return dfn.shrink_pad_report(model, test_ds, trigger, target, p.get("shrink_pixels", 4), seed)
    poisoned, clean = _detection_sets(model, test_ds, trigger, target, p.get("num_samples", 100), seed)
    if name == "strip":
        return dfn.strip_report(model, train_ds.images[:500], poisoned, clean, p.get("n", 64), p.get("alpha", 0.5),
                                seed)
    if name == "scale_up":
        scales = tuple(p.get("scales", dfn.SCALE_SET))
        auroc, scores, labels = dfn.scale_up_auroc(model, poisoned, clean, scales)
        if out_dir is not None:
            dfn.write_scores_csv(Path(out_dir) / "scale_up_scores.csv", scores, labels)
        return dfn.DefenseReport(name, p, scores={"mean_spc_poisoned": float(scores[labels == 1].mean()),
                                                  "mean_spc_clean": float(scores[labels == 0].mean())},
                                 auroc=auroc)
    if name == "neural_cleanse":
        pool = test_ds.images
        res = dfn.neural_cleanse(model, pool, steps=p.get("steps", 400), seed=seed)
        truth = None
        if trigger is not None and trigger.kind == "patch":
            C, H, W = test_ds.shape
            truth = patch_mask(patch_spec(trigger, C), H, W)
        if out_dir is not None:
            dfn.save_synthesized(res, Path(out_dir) / "neural_cleanse")
        return dfn.neural_cleanse_report(res, target, truth, p,
                                         mirrored=model.config.augmentation == "horizontal_flip")
    raise ConfigError(f"unknown defense {name!r}")


def _detection_sets(model, test_ds, trigger, target, n, seed):
    from ..triggers import apply_trigger
    if trigger is None:
        raise ConfigError("detection defenses need a trigger")
    rng = np.random.default_rng([seed, 0xD37])
    non_target = np.flatnonzero(test_ds.labels != target)
    pick = np.sort(rng.permutation(non_target)[:n])
    poisoned = apply_trigger(test_ds.images[pick], trigger, model=model.model, labels=test_ds.labels[pick])
    clean = test_ds.images[np.sort(rng.permutation(len(test_ds))[:n])]
    return poisoned, clean


# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    """Everything up to (and including) the trained model of one config."""

    train_ds: object
    test_ds: object
    model: object
    model_key: str
    plan: object = None
    trigger: object = None
    target: int = None
    surrogate: object = None
    artifacts: dict = field(default_factory=dict)


def prepare(cfg: ExperimentConfig, cache: Cache = None, log=None):
    """Data, surrogate, trigger, poison and train stages, all through the cache.

    Raises ``StageFailure`` naming the stage that failed; ``ConfigError``
    passes through unchanged.
    """
    cache = cache or Cache()
    stage = "data"
    artifacts = {}
    try:
        train_ds, test_ds, _ = _load_data(cfg, cache)
        surrogate, sur_key = None, None
        if cfg.surrogate is not None:
            stage = "surrogate"
            surrogate, sur_key = _surrogate(cfg, train_ds, cache, log)
            artifacts["surrogate"] = sur_key
        plan = cfg.effective_plan
        if plan is not None:
            stage = "trigger"
            plan = _resolve_trigger(cfg, plan, train_ds, test_ds, surrogate, sur_key, cache)
        base = train_ds
        if cfg.distortion is not None:
            stage = "poison"
            base = _distort(cfg, train_ds, surrogate, sur_key, cache)
        if plan is not None:
            stage = "poison"
            base, pk = _poison(plan, base, surrogate, sur_key, cache)
            artifacts["poisoned_dataset"] = pk
        stage = "train"
        model, mk = train_cached(cfg.arch, base, cfg.effective_train, cache, log)
        artifacts["model"] = mk
    except ConfigError:
        raise
    except Exception as e:  # noqa: BLE001
        if log:
            log(traceback.format_exc())
        raise StageFailure(stage, f"{type(e).__name__}: {e}") from e
    trigger = cfg.eval_trigger or (plan.trigger if plan is not None else None)
    target = plan.target_class if plan is not None else None
    if trigger is not None and target is None:
        raise ConfigError("eval_trigger without a poison plan has no target class")
    return Prepared(train_ds, test_ds, model, mk, plan, trigger, target, surrogate, artifacts)


def run_experiment(cfg: ExperimentConfig, cache: Cache = None, log=None, reuse_report=True):
    """Run every stage; a failing stage yields a partial report naming it."""
    cache = cache or Cache()
    h = cfg.hash()
    if reuse_report:
        cached = cache.get_json("reports", h)
        if cached is not None:
            report = RunReport.from_dict(cached)
            _write_outputs(cfg, report)
            return report
    t0 = time.perf_counter()
    report = RunReport(h, cfg.to_dict(), environment=environment_fingerprint())
    stage = "evaluate"
    try:
        p = prepare(cfg, cache, log)
        report.artifacts.update(p.artifacts)
        attack = evaluate(p.model, p.test_ds, p.trigger if "asr" in cfg.evaluations else None, p.target,
                          provenance={"config_hash": h, "model": p.model_key})
        report.attack = attack.to_dict()
        for entry in cfg.defenses:
            stage = f"defend:{entry['name']}"
            out = None if cfg.output_dir is None else Path(cfg.output_dir) / entry["name"]
            dr = _run_defense(entry, p.model, p.train_ds, p.test_ds, p.trigger, p.target, cfg.seed, out)
            report.defenses.append(dr.to_dict())
    except ConfigError:
        raise
    except StageFailure as e:
        report.failed_stage, report.error = e.stage, e.message
    except Exception as e:  # noqa: BLE001 - any stage failure becomes a partial report
        report.failed_stage = stage
        report.error = f"{type(e).__name__}: {e}"
        if log:
            log(traceback.format_exc())
    report.wall_clock = time.perf_counter() - t0
    # normalize through JSON so fresh and cached reports compare equal
    report = RunReport.from_dict(json.loads(json.dumps(report.to_dict(), default=_jsonable)))
    if report.ok:
        cache.put_json("reports", h, report.to_dict())
    _write_outputs(cfg, report)
    return report


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def _write_outputs(cfg, report):
    if cfg.output_dir is None:
        return
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"report-{report.config_hash}.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1, default=str)


def sweep(cfg: ExperimentConfig, parameter_path, values, cache: Cache = None, log=None, csv_path=None,
          workers=1):
    """One run per value (shared seeds), collated into long-form rows."""
    get_path(cfg.to_dict(), parameter_path)
    configs = [cfg.with_path(parameter_path, v) for v in values]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        root = (cache or Cache()).root
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_run_in_worker, configs, [str(root)] * len(configs)))
    else:
        reports = [run_experiment(c, cache, log) for c in configs]
    rows = long_form_rows(reports, parameter_path, values)
    if csv_path is not None:
        write_rows(csv_path, rows)
    return reports


def _run_in_worker(cfg, root):
    return run_experiment(cfg, Cache(root))


ROW_FIELDS = ("config_hash", "name", "parameter", "value", "seed", "metric", "result")


def long_form_rows(reports, parameter_path=None, values=None):
    rows = []
    values = values if values is not None else [None] * len(reports)
    for r, v in zip(reports, values):
        base = {"config_hash": r.config_hash, "name": r.config.get("name"), "parameter": parameter_path,
                "value": v, "seed": r.config.get("seed")}
        if r.attack is not None:
            rows.append({**base, "metric": "ba", "result": r.attack["benign_accuracy"]})
            rows.append({**base, "metric": "asr", "result": r.attack["attack_success_rate"]})
        for d in r.defenses:
            for m in ("ba_after", "asr_after", "auroc"):
                if d.get(m) is not None:
                    rows.append({**base, "metric": f"{d['defense']}.{m}", "result": d[m]})
        if r.failed_stage:
            rows.append({**base, "metric": "failed_stage", "result": r.failed_stage})
    return rows


def write_rows(path, rows, fields=ROW_FIELDS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path

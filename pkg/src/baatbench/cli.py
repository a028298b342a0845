"""Command-line entry point: ``baatbench <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import defenses as dfn
from .experiments import (Cache, ConfigError, ExperimentConfig, PRESETS, load_config, render_report,
                          run_experiment, run_preset, sweep)
from .experiments.runner import RunReport, _load_data

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("baatbench")


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1, default=str)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _cache(args):
    return Cache(args.cache_dir, enabled=not args.no_cache)


def _config(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def cmd_poison(args):
    from .experiments.runner import _resolve_trigger, _surrogate
    from .poisoning import assemble_poisoned_dataset, poisoning_rate, save_poisoned_dataset
    cfg = _config(args)
    if cfg.effective_plan is None:
        raise ConfigError("config has no poison plan")
    cache = _cache(args)
    train_ds, test_ds, _ = _load_data(cfg, cache)
    sur, sk = (None, None)
    if cfg.surrogate is not None:
        sur, sk = _surrogate(cfg, train_ds, cache, log.info)
    plan = _resolve_trigger(cfg, cfg.effective_plan, train_ds, test_ds, sur, sk, cache)
    poisoned = assemble_poisoned_dataset(train_ds, plan, surrogate=sur.model if sur else None)
    out = Path(args.out or "poisoned")
    save_poisoned_dataset(poisoned, out)
    _dump({"directory": str(out), "modified": len(poisoned.modified), "rate": str(poisoning_rate(poisoned))})
    return EXIT_OK


def _report_exit(report: RunReport, path=None):
    _dump(report.to_dict(), path)
    if not report.ok:
        print(f"stage failed: {report.failed_stage}: {report.error}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    d = cfg.to_dict()
    d["defenses"] = []
    return _report_exit(run_experiment(ExperimentConfig.from_dict(d), _cache(args), log.info), args.report)


def cmd_evaluate(args):
    cfg = _config(args)
    return _report_exit(run_experiment(cfg, _cache(args), log.info), args.report)


def cmd_defend(args):
    cfg = _config(args)
    if args.defense:
        d = cfg.to_dict()
        d["defenses"] = [{"name": n, "params": {}} for n in args.defense]
        cfg = ExperimentConfig.from_dict(d)
    if not cfg.defenses:
        raise ConfigError("no defenses configured; pass --defense or set 'defenses' in the config")
    return _report_exit(run_experiment(cfg, _cache(args), log.info), args.report)


def cmd_sweep(args):
    cfg = _config(args)
    try:
        values = json.loads(args.values)
    except json.JSONDecodeError as e:
        raise ConfigError(f"--values must be a JSON list: {e}") from e
    if not isinstance(values, list):
        raise ConfigError("--values must be a JSON list")
    out = Path(args.out or "sweep")
    reports = sweep(cfg, args.path, values, _cache(args), log.info, csv_path=out / "sweep.csv",
                    workers=args.workers)
    render_report(reports, out, args.path, values)
    failed = [r for r in reports if not r.ok]
    print(f"{len(reports)} runs written to {out}")
    return EXIT_STAGE if failed else EXIT_OK


def cmd_report(args):
    reports = []
    for p in args.reports:
        try:
            with open(p, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read report {p}: {e}") from e
        reports += [RunReport.from_dict(d) for d in (data if isinstance(data, list) else [data])]
    files = render_report(reports, args.out, args.parameter)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_theory(args):
    from .experiments.presets import theory_verify
    res = theory_verify(seed=args.seed or 0, out_dir=args.out or "results/theory", num_seeds=args.seeds,
                        num_queries=args.queries)
    _dump(res["rows"][0])
    row = res["rows"][0]
    ok = row["passing_seeds"] >= 0.95 * row["num_seeds"] and row["degenerate_gap"] == 0.0
    return EXIT_OK if ok else EXIT_STAGE


def cmd_preset(args):
    if args.action == "list":
        for name, fn in sorted(PRESETS.items()):
            doc = (fn.__doc__ or "").strip().splitlines()
            print(f"{name:14s} {doc[0] if doc else ''}")
        return EXIT_OK
    if not args.name:
        raise ConfigError("preset run needs a preset name")
    try:
        res = run_preset(args.name, seed=args.seed or 0, out_dir=args.out, cache=_cache(args), log=log.info)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from e
    _dump(res["rows"])
    failed = [r for r in res["rows"] if isinstance(r, dict) and r.get("failed_stage")]
    return EXIT_STAGE if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="baatbench", description="Desk-scale backdoor attack/defense benchmark")
    p.add_argument("--cache-dir", default=None, help="checkpoint cache (default $BAATBENCH_CACHE)")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp, out_help="output path"):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help=out_help)
        return sp

    with_config(sub.add_parser("poison", help="assemble and save a poisoned training set"),
                "directory for PNGs + manifest").set_defaults(fn=cmd_poison)
    for verb, fn, h in (("train", cmd_train, "train the (poisoned) model"),
                        ("evaluate", cmd_evaluate, "train if needed and report BA/ASR")):
        sp = with_config(sub.add_parser(verb, help=h), "output directory")
        sp.add_argument("--report", default=None, help="write the JSON report here")
        sp.set_defaults(fn=fn)
    sp = with_config(sub.add_parser("defend", help="run defenses on the attacked model"), "output directory")
    sp.add_argument("--defense", action="append", choices=dfn.DEFENSES)
    sp.add_argument("--report", default=None)
    sp.set_defaults(fn=cmd_defend)
    sp = with_config(sub.add_parser("sweep", help="one run per value of a config scalar"), "output directory")
    sp.add_argument("--path", required=True, help="dotted config path, e.g. poison.trigger.intensity")
    sp.add_argument("--values", required=True, help="JSON list of values")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)
    sp = sub.add_parser("report", help="render CSV + plots from saved reports")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", default="report")
    sp.add_argument("--parameter", default=None)
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("theory", help="kernel-regression theorem check")
    sp.add_argument("action", choices=["verify"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--queries", type=int, default=500)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_theory)
    sp = sub.add_parser("preset", help="list or run named reproductions")
    sp.add_argument("action", choices=["list", "run"])
    sp.add_argument("name", nargs="?")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_preset)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"stage failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

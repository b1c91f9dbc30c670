"""Command-line entry point.

Every subcommand takes a run configuration file plus optional ``--seed``
and ``--out``.  Stages exchange files under
``<out>/<config-hash>/seed<k>/``; ``audit`` runs everything for all seeds
and writes ``<out>/<config-hash>/report.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, bench, models, pipeline
from .config import load_config
from .errors import ConfigurationError

log = logging.getLogger("sysaudit")

DEFAULT_OUT = "sysaudit-out"


def _dataset_name(cfg, stem: str) -> str:
    return stem + (".csv" if cfg.task == bench.EVENT else ".jsonl")


class _Stage:
    def __init__(self, args):
        cfg = load_config(args.config)
        out = args.out or cfg.output_dir or os.environ.get(pipeline.OUT_ENV) or DEFAULT_OUT
        self.cfg = replace(cfg, output_dir=str(out))
        self.seed = cfg.seeds[0] if args.seed is None else args.seed
        if args.seed is not None:
            self.cfg = replace(self.cfg, seeds=(args.seed,))
        self.dir = pipeline.seed_dir(self.cfg, self.seed)

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigurationError(f"{p} not found; run '{producer}' first")
        return p

    def nominal(self):
        return bench.read_dataset(self.need(_dataset_name(self.cfg, "nominal"), "generate"))

    def adversarial(self):
        return bench.read_dataset(self.need(_dataset_name(self.cfg, "adversarial"), "attack"))

    def checkpoint(self, name: str = "nominal"):
        return models.load_checkpoint(self.need(f"model_{name}.json", "train"))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pipeline.dumps_report(obj))


def cmd_generate(args) -> int:
    st = _Stage(args)
    data = pipeline.generate_seed(st.cfg, st.seed)
    st.dir.mkdir(parents=True, exist_ok=True)
    bench.write_dataset(data, st.path(_dataset_name(st.cfg, "nominal")))
    print(f"wrote {len(data)} events to {st.path(_dataset_name(st.cfg, 'nominal'))}")
    return 0


def cmd_train(args) -> int:
    st = _Stage(args)
    data = st.nominal()
    ckpt = pipeline.train_nominal(st.cfg, data, st.seed)
    models.save_checkpoint(ckpt, st.path("model_nominal.json"))
    print(f"wrote {st.path('model_nominal.json')}")
    return 0


def cmd_attack(args) -> int:
    st = _Stage(args)
    data = st.nominal()
    out = pipeline.attack_seed(st.cfg, st.checkpoint(), data, st.seed)
    bench.write_dataset(out.data, st.path(_dataset_name(st.cfg, "adversarial")))
    attacks.save_deviation(out.deviation, st.path("z.npz"))
    print(f"attacked {len(data)} events in {out.batches} batches; wrote {st.path('z.npz')}")
    return 0


def cmd_validate(args) -> int:
    st = _Stage(args)
    data, adv = st.nominal(), st.adversarial()
    dev = attacks.load_deviation(st.need("z.npz", "attack"))
    aux = pipeline.validate_indistinguishability(pipeline.samples(data), pipeline.samples(adv), st.cfg.model,
                                                 st.seed, st.cfg.train, st.cfg.split_fractions)
    checks = pipeline.distribution_checks(st.cfg, data, adv, dev, st.seed)
    result = {"aux_auc": aux, "validation": checks}
    gates = pipeline.evaluate_gates(pipeline.aggregate([{"status": pipeline.COMPLETE, "metrics": result}]))
    _write_json(st.path("validation.json"), {"metrics": result, "gates": gates})
    print(json.dumps(gates, indent=2, sort_keys=True))
    return 0 if all(g["passed"] for g in gates.values()) else 1


def cmd_evaluate(args) -> int:
    st = _Stage(args)
    data, adv = st.nominal(), st.adversarial()
    test = data.split == 2
    y = data.labels[test]
    cut_nom = bench.cut_baseline(st.cfg.task, data, st.cfg.gen.etmiss_threshold)
    cut_adv = bench.cut_baseline(st.cfg.task, adv, st.cfg.gen.etmiss_threshold)
    target = float(np.mean(cut_nom[test][y == 0] == 0))
    result = {"working_point_rejection": target}
    cn, ca = pipeline.cut_bundle(cut_nom[test], y), pipeline.cut_bundle(cut_adv[test], y)
    result["cut"] = {"nominal": cn.to_dict(), "adversarial": ca.to_dict(), "auc_diff": cn.auc - ca.auc}
    nt, at = pipeline.samples(data, 2), pipeline.samples(adv, 2)
    for name in ("nominal", "adversarial", "combined"):
        if name != "nominal" and not st.path(f"model_{name}.json").exists():
            continue
        ck = st.checkpoint(name)
        result[name] = pipeline.paired_evaluation(models.predict(ck, nt.x, nt.mask),
                                                  models.predict(ck, at.x, at.mask), y, target)
    _write_json(st.path("evaluation.json"), result)
    for name in ("cut", "nominal", "adversarial", "combined"):
        if name in result:
            print(f"{name:12s} AUC nominal {result[name]['nominal']['auc']:.4f}  "
                  f"adversarial {result[name]['adversarial']['auc']:.4f}  diff {result[name]['auc_diff']:+.4f}")
    return 0


def cmd_audit(args) -> int:
    st = _Stage(args)
    report = pipeline.run_audit(st.cfg)
    print(summarize(report))
    print(f"report: {pipeline.output_root(st.cfg) / 'report.json'}")
    return 0 if report["passed"] else 1


def cmd_report(args) -> int:
    if args.report:
        path = Path(args.report)
    else:
        st = _Stage(args)
        path = pipeline.output_root(st.cfg) / "report.json"
    report = pipeline.load_report(path)
    print(summarize(report))
    return 0 if report["passed"] else 1


def summarize(report: dict) -> str:
    agg = report["aggregate"]
    lines = [f"config {report['config_hash']}  task {report['config']['task']}  "
             f"seeds {report['provenance']['seeds']}"]
    for s in report["seeds"]:
        if s["status"] != pipeline.COMPLETE:
            lines.append(f"  seed {s['seed']}: {s['status']} ({s['diagnostic']})")
    for model in ("cut", "nominal", "adversarial", "combined"):
        key = f"{model}.auc_diff"
        if key in agg:
            nom = agg[f"{model}.nominal.auc"]
            eff = agg[f"{model}.nominal.efficiency"]
            lines.append(f"  {model:12s} AUC {nom['mean']:.4f}  eff {eff['mean']:.4f}  "
                         f"AUC diff {agg[key]['mean']:+.4f} +- {agg[key]['rms']:.4f}  "
                         f"eff diff {agg[f'{model}.efficiency_diff']['mean']:+.4f}")
    for name, g in sorted(report["gates"].items()):
        value = g["value"]
        shown = f"{value:.4f}" if isinstance(value, float) else json.dumps(value, sort_keys=True)
        lines.append(f"  gate {name:12s} {'PASS' if g['passed'] else 'FAIL'}  {shown}")
    lines.append("PASSED" if report["passed"] else "FAILED")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sysaudit", description="Robustness audit of classifiers under uncertainty-constrained perturbations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": (cmd_generate, "generate the nominal dataset"),
        "train": (cmd_train, "train the nominal model"),
        "attack": (cmd_attack, "attack the dataset with the nominal model"),
        "validate": (cmd_validate, "check indistinguishability of nominal and adversarial data"),
        "evaluate": (cmd_evaluate, "evaluate cut baseline and models on both test splits"),
        "audit": (cmd_audit, "run the full pipeline for every seed"),
        "report": (cmd_report, "print a stored report"),
    }
    for name, (fn, text) in commands.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="run configuration (INI)")
        p.add_argument("--seed", type=int, help="seed override (default: first configured seed)")
        p.add_argument("--out", help=f"artifact directory (default: ${pipeline.OUT_ENV} or ./{DEFAULT_OUT})")
        if name == "report":
            p.add_argument("--report", help="explicit report path")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, OSError) as exc:
        print(f"sysaudit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

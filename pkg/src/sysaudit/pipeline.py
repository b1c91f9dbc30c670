"""End-to-end robustness audit.

For every seed: generate data, split it, train the nominal model, evaluate
the cut baseline, attack the full dataset with the nominal model, check that
the adversarial sample is indistinguishable from the nominal one, measure the
performance shift, retrain on adversarial-only and combined samples, and
evaluate everything on the paired test splits.  Results are aggregated as
mean and RMS over seeds.
"""
from __future__ import annotations

import datetime
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks, bench, metrics, models
from .attacks import AttackConfig
from .bench import EVENT, ETMISS, QUARK_GLUON, GenConfig
from .errors import ConfigurationError
from .models import Checkpoint, ModelSpec, Samples, TrainConfig
from .uncertainty import UncertaintyModel, default_uncertainty

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "SYSAUDIT_OUT"
COMPLETE = "complete"
FAILED = "failed"

# indistinguishability gates
AUX_AUC_WINDOW = (0.47, 0.53)
CHI2_NDF_WINDOW = (0.5, 2.0)
MAX_PEARSON = 0.02
MAX_Z_MEAN = 0.05
MAX_Z_SKEW = 0.3


@dataclass(frozen=True)
class RunConfig:
    task: str = EVENT
    gen: GenConfig = GenConfig()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    uncertainty: UncertaintyModel = field(default_factory=lambda: default_uncertainty(EVENT))
    attack: AttackConfig = AttackConfig()
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    chi2_bins: int = 32
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.task not in bench.TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 \
                or not np.isclose(sum(self.split_fractions), 1.0):
            raise ConfigurationError(f"split fractions {self.split_fractions} must be 3 non-negative values summing to 1")
        if self.model.n_features != len(_feature_names(self.task)):
            raise ConfigurationError(f"model expects {self.model.n_features} features, task {self.task!r} has "
                                     f"{len(_feature_names(self.task))}")
        if (self.model.family == models.DENSE) != (self.task == EVENT):
            raise ConfigurationError(f"task {self.task!r} needs a "
                                     f"{'dense' if self.task == EVENT else 'pooled-set'} model")
        self.gen.validate()
        self.uncertainty.fractions(_feature_names(self.task))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "gen": asdict(self.gen),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "uncertainty": self.uncertainty.to_dict(),
            "attack": self.attack.to_dict(),
            "seeds": list(self.seeds),
            "split_fractions": list(self.split_fractions),
            "chi2_bins": self.chi2_bins,
            "output_dir": self.output_dir,
        }


def _feature_names(task: str) -> tuple[str, ...]:
    return {EVENT: bench.EVENT_FEATURES, QUARK_GLUON: bench.QG_FEATURES, ETMISS: bench.ETMISS_FEATURES}[task]


def default_model(task: str) -> ModelSpec:
    if task == EVENT:
        return models.dense_spec(len(bench.EVENT_FEATURES))
    return models.pooled_set_spec(len(_feature_names(task)))


def default_run_config(task: str = EVENT, n_events: int = 50_000, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                       output_dir: str | None = None) -> RunConfig:
    return RunConfig(task=task, gen=bench.default_gen_config(task, n_events), model=default_model(task),
                     uncertainty=default_uncertainty(task), attack=attacks.default_attack(task),
                     seeds=tuple(seeds), output_dir=output_dir)


def _canonical(obj) -> str:
    def fix(o):
        if isinstance(o, float) and not np.isfinite(o):
            return repr(o)
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        return o
    return json.dumps(fix(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    """Stable 16-hex-digit digest of every setting except the output location."""
    d = config.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(_canonical(d).encode()).hexdigest()[:16]


def output_root(config: RunConfig) -> Path | None:
    base = config.output_dir or os.environ.get(OUT_ENV)
    return None if not base else Path(base) / config_hash(config)


def seed_dir(config: RunConfig, seed: int) -> Path | None:
    root = output_root(config)
    return None if root is None else root / f"seed{seed}"


# ---------------------------------------------------------------------------
# stages


def generate_seed(config: RunConfig, seed: int):
    """Dataset for one seed with split tags attached."""
    state = np.random.SeedSequence([config.gen.seed, int(seed)]).generate_state(1)[0]
    data = bench.generate(config.task, replace(config.gen, seed=int(state)))
    data.split = models.split_indices(len(data), seed, config.split_fractions)
    return data


def samples(data, part: int | None = None) -> Samples:
    idx = slice(None) if part is None else np.flatnonzero(data.split == part)
    mask = getattr(data, "mask", None)
    return Samples(data.features[idx], data.labels[idx], None if mask is None else mask[idx])


def train_model(config: RunConfig, train_set: Samples, val_set: Samples, seed: int) -> tuple[Checkpoint, list]:
    ckpt = models.init(config.model, seed)
    ckpt.shift, ckpt.scale = models.fit_standardization(train_set)
    return models.train(ckpt, train_set, val_set, replace(config.train, seed=seed))


def train_nominal(config: RunConfig, data, seed: int) -> Checkpoint:
    return train_model(config, samples(data, 0), samples(data, 1), seed)[0]


def attack_seed(config: RunConfig, ckpt: Checkpoint, data, seed: int) -> attacks.AttackOutput:
    return attacks.attack_dataset(ckpt, data, config.uncertainty, replace(config.attack, seed=seed))


def feature_rows(data, idx=None) -> np.ndarray:
    """Per-row feature matrix: events for tables, valid tracks for track sets."""
    x = data.features if idx is None else data.features[idx]
    mask = getattr(data, "mask", None)
    if mask is None:
        return x
    m = mask if idx is None else mask[idx]
    return x[m > 0]


def validate_indistinguishability(nominal: Samples, adversarial: Samples, spec: ModelSpec, seed: int,
                                  train_config: TrainConfig = TrainConfig(),
                                  fractions=(0.8, 0.1, 0.1)) -> float:
    """Test AUC of a fresh classifier trained to tell nominal from adversarial rows."""
    split = models.build_indistinguishability_task(nominal, adversarial, seed, fractions)
    ckpt = models.init(spec, seed)
    ckpt.shift, ckpt.scale = models.fit_standardization(split.train)
    ckpt, _ = models.train(ckpt, split.train, split.val, replace(train_config, seed=seed))
    scores = models.predict(ckpt, split.test.x, split.test.mask)
    return metrics.roc_auc(scores, split.test.labels).auc


def distribution_checks(config: RunConfig, data, adv_data, deviation, seed: int) -> dict:
    """Split-half hard-histogram chi2/ndf, Pearson shift and z moments.

    The chi-square compares the nominal sample of one random half of the
    events with the adversarial sample of the other half, so the two
    histograms are statistically independent as in a comparison against
    separately simulated events.
    """
    names = data.feature_names
    perturbed = config.uncertainty.perturbed(names)
    half = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC42])).permutation(len(data))
    a, b = np.sort(half[: len(half) // 2]), np.sort(half[len(half) // 2:])
    nom_rows = feature_rows(data, a)[:, perturbed]
    adv_rows = feature_rows(adv_data, b)[:, perturbed]
    chi2 = metrics.hist_chi2_hard(nom_rows, adv_rows, config.chi2_bins)
    pearson = metrics.pearson_delta(feature_rows(data), feature_rows(adv_data))
    z = metrics.z_stats(deviation)
    return {
        "chi2_ndf": {n: float(v) for n, v in zip(np.asarray(names)[perturbed], chi2)},
        "max_pearson": pearson.max_abs,
        "z_mean": z.mean, "z_std": z.std, "z_skew": z.skew,
    }


def cut_bundle(decisions, labels) -> metrics.MetricBundle:
    d = np.asarray(decisions) > 0.5
    y = np.asarray(labels) > 0.5
    return metrics.MetricBundle(float(d[y].mean()), float((~d[~y]).mean()), metrics.roc_auc(d, y).auc)


def paired_evaluation(nom_scores, adv_scores, labels, target: float) -> dict:
    """Metrics on the nominal and adversarial versions of the same test events."""
    nom = metrics.evaluate_scores(nom_scores, labels, target)
    adv = metrics.evaluate_scores(adv_scores, labels, target)
    adv.fooling_ratio = attacks.fooling_ratio(nom_scores, adv_scores)
    return {"nominal": nom.to_dict(), "adversarial": adv.to_dict(),
            "auc_diff": nom.auc - adv.auc, "efficiency_diff": nom.efficiency - adv.efficiency,
            "fooling_ratio": adv.fooling_ratio}


def retrain_strategies(data, adv_data, config: RunConfig, seed: int,
                       nominal: Checkpoint | None = None) -> dict[str, Checkpoint]:
    """Nominal-only, adversarial-only and combined checkpoints.

    Combined training concatenates both training splits, so every training
    event appears once nominal and once perturbed; no reweighting.
    """
    if nominal is None:
        nominal = train_nominal(config, data, seed)
    adv = train_nominal(config, adv_data, seed)
    both_train = Samples.concat([samples(data, 0), samples(adv_data, 0)])
    both_val = Samples.concat([samples(data, 1), samples(adv_data, 1)])
    combined = train_model(config, both_train, both_val, seed)[0]
    return {"nominal": nominal, "adversarial": adv, "combined": combined}


@dataclass
class SeedResult:
    seed: int
    status: str
    diagnostic: str = ""
    metrics: dict = field(default_factory=dict)
    paired: dict = field(default_factory=dict)  # per-event test arrays, stored in a sidecar

    def to_dict(self) -> dict:
        return {"seed": self.seed, "status": self.status, "diagnostic": self.diagnostic, "metrics": self.metrics}


def _save_artifacts(out: Path, data, adv_data, deviation, ckpts: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".csv" if config_is_table(data) else ".jsonl"
    bench.write_dataset(data, out / f"nominal{suffix}")
    bench.write_dataset(adv_data, out / f"adversarial{suffix}")
    attacks.save_deviation(deviation, out / "z.npz")
    for name, ck in ckpts.items():
        models.save_checkpoint(ck, out / f"model_{name}.json")


def config_is_table(data) -> bool:
    return isinstance(data, bench.EventTable)


def run_seed(config: RunConfig, seed: int) -> SeedResult:
    stage = "generate"
    try:
        data = generate_seed(config, seed)
        test = data.split == 2
        y = data.labels[test]
        stage = "train nominal"
        nominal = train_nominal(config, data, seed)
        stage = "cut baseline"
        cut_nom = bench.cut_baseline(config.task, data, config.gen.etmiss_threshold)
        target = float(np.mean(cut_nom[test][y == 0] == 0))
        stage = "attack"
        attacked = attack_seed(config, nominal, data, seed)
        adv_data = attacked.data
        cut_adv = bench.cut_baseline(config.task, adv_data, config.gen.etmiss_threshold)
        stage = "validate"
        aux_auc = validate_indistinguishability(samples(data), samples(adv_data), config.model, seed,
                                                config.train, config.split_fractions)
        checks = distribution_checks(config, data, adv_data, attacked.deviation, seed)
        stage = "retrain"
        ckpts = retrain_strategies(data, adv_data, config, seed, nominal)
        stage = "evaluate"
        out = {"working_point_rejection": target, "aux_auc": aux_auc, "validation": checks}
        cn, ca = cut_bundle(cut_nom[test], y), cut_bundle(cut_adv[test], y)
        ca.fooling_ratio = attacks.fooling_ratio(cut_nom[test], cut_adv[test])
        out["cut"] = {"nominal": cn.to_dict(), "adversarial": ca.to_dict(), "auc_diff": cn.auc - ca.auc,
                      "efficiency_diff": cn.efficiency - ca.efficiency, "fooling_ratio": ca.fooling_ratio}
        nom_test, adv_test = samples(data, 2), samples(adv_data, 2)
        paired = {"labels": y, "cut_nominal": cut_nom[test], "cut_adversarial": cut_adv[test]}
        for name, ck in ckpts.items():
            s_nom = models.predict(ck, nom_test.x, nom_test.mask)
            s_adv = models.predict(ck, adv_test.x, adv_test.mask)
            out[name] = paired_evaluation(s_nom, s_adv, y, target)
            paired[f"{name}_nominal"], paired[f"{name}_adversarial"] = s_nom, s_adv
        fooled = (paired["nominal_nominal"] > 0.5) != (paired["nominal_adversarial"] > 0.5)
        out["boundary_p"] = metrics.boundary_test(paired["nominal_nominal"], fooled) if fooled.any() else 1.0
        target_dir = seed_dir(config, seed)
        if target_dir is not None:
            stage = "write artifacts"
            _save_artifacts(target_dir, data, adv_data, attacked.deviation, ckpts)
            np.savez_compressed(target_dir / "paired.npz", **paired)
        return SeedResult(seed, COMPLETE, "", out, paired)
    except Exception as exc:  # any stage failure aborts this seed only
        log.exception("seed %d failed during %s", seed, stage)
        return SeedResult(seed, FAILED, f"{stage}: {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# aggregation and gates


def _flatten(d: dict, prefix: str = "") -> dict[str, float]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool) and v is not None:
            out[key] = float(v)
    return out


def aggregate(results: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Mean and RMS (population spread) of every numeric metric over complete seeds."""
    flat = [_flatten(r["metrics"]) for r in results if r["status"] == COMPLETE]
    if not flat:
        return {}
    keys = sorted(set.intersection(*(set(f) for f in flat)))
    out = {}
    for k in keys:
        v = np.array([f[k] for f in flat])
        out[k] = {"mean": float(v.mean()), "rms": float(v.std()), "n": len(v)}
    return out


def evaluate_gates(agg: dict) -> dict[str, dict]:
    """Indistinguishability gates on seed-averaged values."""
    if not agg:
        return {"complete": {"value": None, "passed": False}}
    gates = {}
    aux = agg["aux_auc"]["mean"]
    gates["aux_auc"] = {"value": aux, "passed": AUX_AUC_WINDOW[0] <= aux <= AUX_AUC_WINDOW[1]}
    chi2 = {k.split(".", 2)[2]: v["mean"] for k, v in agg.items() if k.startswith("validation.chi2_ndf.")}
    gates["chi2_ndf"] = {"value": chi2,
                         "passed": bool(chi2) and all(CHI2_NDF_WINDOW[0] <= v <= CHI2_NDF_WINDOW[1]
                                                      for v in chi2.values())}
    pear = agg["validation.max_pearson"]["mean"]
    gates["max_pearson"] = {"value": pear, "passed": pear < MAX_PEARSON}
    zm = agg["validation.z_mean"]["mean"]
    gates["z_mean"] = {"value": zm, "passed": abs(zm) < MAX_Z_MEAN}
    zs = agg["validation.z_skew"]["mean"]
    gates["z_skew"] = {"value": zs, "passed": abs(zs) < MAX_Z_SKEW}
    return gates


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def build_report(config: RunConfig, results: Sequence[SeedResult]) -> dict:
    seeds = [r.to_dict() for r in results]
    agg = aggregate(seeds)
    gates = evaluate_gates(agg)
    complete = all(r.status == COMPLETE for r in results)
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "provenance": {"created": _timestamp(), "seeds": list(config.seeds),
                       "combined_training": "concatenation, unweighted"},
        "seeds": seeds,
        "aggregate": agg,
        "gates": gates,
        "complete": complete,
        "passed": complete and all(g["passed"] for g in gates.values()),
    }


def run_audit(config: RunConfig, keep_paired: bool = False):
    """Run every seed and return the report (plus per-seed results when asked)."""
    results = [run_seed(config, s) for s in config.seeds]
    report = build_report(config, results)
    root = output_root(config)
    if root is not None:
        emit_report(report, root / "report.json")
    return (report, results) if keep_paired else report


# ---------------------------------------------------------------------------
# report I/O


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"


def emit_report(report: dict, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_report(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> dict:
    path = Path(path)
    try:
        report = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not a valid report: {exc}") from exc
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported report schema {report.get('schema_version')!r}")
    return report


def strip_timestamps(report: dict) -> dict:
    r = json.loads(dumps_report(report))
    r["provenance"].pop("created", None)
    return r

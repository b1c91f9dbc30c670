import json
from dataclasses import replace

import numpy as np
import pytest

from sysaudit import models, pipeline
from sysaudit.errors import ConfigurationError
from sysaudit.metrics import roc_auc
from sysaudit.models import Samples, TrainConfig


def tiny(task="event", n=1500, seeds=(0,), **attack):
    cfg = pipeline.default_run_config(task, n, seeds)
    model = models.dense_spec(12, (16,)) if task == "event" else models.pooled_set_spec(
        cfg.model.n_features, (8,), (8,))
    return replace(cfg, model=model, train=TrainConfig(max_epochs=3, batch_size=128),
                   attack=replace(cfg.attack, iterations=4, **attack))


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        pipeline.RunConfig(seeds=())
    with pytest.raises(ConfigurationError):
        pipeline.RunConfig(split_fractions=(0.5, 0.3, 0.1))
    with pytest.raises(ConfigurationError):
        pipeline.RunConfig(task="higgs")
    with pytest.raises(ConfigurationError):
        pipeline.RunConfig(task="etmiss", model=models.dense_spec(4))
    cfg = pipeline.default_run_config()
    assert cfg.split_fractions == (0.8, 0.1, 0.1) and len(cfg.seeds) == 5


def test_config_hash_tracks_attack_settings_only_in_content():
    cfg = pipeline.default_run_config()
    h = pipeline.config_hash(cfg)
    assert len(h) == 16 and h == pipeline.config_hash(pipeline.default_run_config())
    for change in ({"step_size": 0.05}, {"iterations": 21}, {"lambda_chi2": 0.4}, {"lambda_prior": 0.6},
                   {"kappa": 0.1}, {"batch_size": 256}, {"n_bins": 16}, {"kind": "cw"}):
        assert pipeline.config_hash(replace(cfg, attack=replace(cfg.attack, **change))) != h
    assert pipeline.config_hash(replace(cfg, output_dir="/elsewhere")) == h


def test_paired_split_invariant():
    cfg = tiny(n=800)
    data = pipeline.generate_seed(cfg, 0)
    ck = pipeline.train_nominal(cfg, data, 0)
    out = pipeline.attack_seed(cfg, ck, data, 0)
    np.testing.assert_array_equal(out.data.split, data.split)
    np.testing.assert_array_equal(out.data.labels, data.labels)
    assert np.isclose(np.mean(data.split == 0), 0.8, atol=0.01)


def test_null_attack_changes_nothing():
    report = pipeline.run_audit(tiny(n_sigma=0.0))
    m = report["seeds"][0]["metrics"]
    for name in ("cut", "nominal", "adversarial", "combined"):
        assert m[name]["fooling_ratio"] == 0.0
        assert m[name]["auc_diff"] == 0.0
        assert m[name]["nominal"]["efficiency"] == m[name]["adversarial"]["efficiency"]


def test_zero_step_attack_gives_chance_aux_auc():
    cfg = tiny(n=6000, step_size=0.0)
    data = pipeline.generate_seed(cfg, 0)
    ck = pipeline.train_nominal(cfg, data, 0)
    out = pipeline.attack_seed(cfg, ck, data, 0)
    np.testing.assert_array_equal(out.data.features, data.features)
    auc = pipeline.validate_indistinguishability(pipeline.samples(data), pipeline.samples(out.data),
                                                 cfg.model, 0, cfg.train)
    assert 0.45 <= auc <= 0.55


def test_aux_classifier_detects_coherent_shift():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6000, 3)) * [1.0, 2.0, 0.5]
    y = rng.integers(0, 2, 6000).astype(float)
    shifted = x.copy()
    shifted[:, 1] += 5 * 2.0
    auc = pipeline.validate_indistinguishability(Samples(x, y), Samples(shifted, y), models.dense_spec(3, (8,)), 0,
                                                 TrainConfig(max_epochs=5))
    assert auc > 0.9


def test_identical_data_makes_strategies_equivalent():
    cfg = tiny(n=3000, step_size=0.0)
    aucs = {k: [] for k in ("nominal", "adversarial", "combined")}
    for seed in (0, 1, 2):
        data = pipeline.generate_seed(cfg, seed)
        ckpts = pipeline.retrain_strategies(data, data, cfg, seed)
        test = pipeline.samples(data, 2)
        for k, ck in ckpts.items():
            aucs[k].append(roc_auc(models.predict(ck, test.x), test.labels).auc)
    rms = max(np.std(v) for v in aucs.values())
    for a in ("adversarial", "combined"):
        assert abs(np.mean(aucs[a]) - np.mean(aucs["nominal"])) < 2 * rms + 0.01
    # nominal and adversarial-only training see identical inputs with identical seeds
    np.testing.assert_array_equal(aucs["nominal"], aucs["adversarial"])


def test_retrained_checkpoints_are_reproducible():
    cfg = tiny(n=800)
    data = pipeline.generate_seed(cfg, 1)
    adv = data.with_features(data.features * 1.001)
    a = pipeline.retrain_strategies(data, adv, cfg, 1)
    b = pipeline.retrain_strategies(data, adv, cfg, 1)
    for k in a:
        np.testing.assert_array_equal(a[k].params, b[k].params)


def test_audit_determinism_and_report_round_trip(tmp_path):
    cfg = replace(tiny(n=1000, seeds=(0, 1)), output_dir=str(tmp_path))
    r1 = pipeline.run_audit(cfg)
    r2 = pipeline.run_audit(cfg)
    assert pipeline.strip_timestamps(r1) == pipeline.strip_timestamps(r2)
    path = tmp_path / pipeline.config_hash(cfg) / "report.json"
    first = path.read_bytes()
    again = tmp_path / "again.json"
    pipeline.emit_report(pipeline.load_report(path), again)
    assert again.read_bytes() == first
    seed_dir = tmp_path / pipeline.config_hash(cfg) / "seed0"
    for name in ("nominal.csv", "adversarial.csv", "z.npz", "model_nominal.json", "model_combined.json",
                 "paired.npz"):
        assert (seed_dir / name).exists()


def test_aggregate_matches_direct_computation():
    report = pipeline.run_audit(tiny(n=1000, seeds=(3, 4)))
    agg = report["aggregate"]
    for key in ("nominal.auc_diff", "aux_auc", "cut.nominal.efficiency", "validation.z_mean"):
        head, *rest = key.split(".")
        vals = []
        for s in report["seeds"]:
            v = s["metrics"][head]
            for r in rest:
                v = v[r]
            vals.append(v)
        assert agg[key]["mean"] == pytest.approx(np.mean(vals), rel=1e-12, abs=1e-15)
        assert agg[key]["rms"] == pytest.approx(np.std(vals), rel=1e-9, abs=1e-15)
        assert agg[key]["n"] == 2


def test_failed_seed_is_recorded(monkeypatch):
    cfg = tiny(n=600, seeds=(0, 1))
    real = pipeline.attack_seed

    def flaky(config, ckpt, data, seed):
        if seed == 1:
            raise RuntimeError("synthetic failure")
        return real(config, ckpt, data, seed)

    monkeypatch.setattr(pipeline, "attack_seed", flaky)
    report = pipeline.run_audit(cfg)
    bad = [s for s in report["seeds"] if s["seed"] == 1][0]
    assert bad["status"] == pipeline.FAILED
    assert bad["diagnostic"] == "attack: RuntimeError: synthetic failure"
    assert report["complete"] is False and report["passed"] is False
    assert report["aggregate"]["aux_auc"]["n"] == 1
    assert "synthetic failure" in pipeline.dumps_report(report)


def test_load_report_rejects_other_schema(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ConfigurationError):
        pipeline.load_report(p)
    with pytest.raises(OSError, match="missing.json"):
        pipeline.load_report(tmp_path / "missing.json")


def test_gates_use_windows():
    agg = {"aux_auc": {"mean": 0.5}, "validation.chi2_ndf.a": {"mean": 1.0}, "validation.chi2_ndf.b": {"mean": 2.5},
           "validation.max_pearson": {"mean": 0.01}, "validation.z_mean": {"mean": -0.06},
           "validation.z_skew": {"mean": 0.1}}
    gates = pipeline.evaluate_gates(agg)
    assert gates["aux_auc"]["passed"] and gates["max_pearson"]["passed"] and gates["z_skew"]["passed"]
    assert not gates["chi2_ndf"]["passed"] and not gates["z_mean"]["passed"]
    assert not pipeline.evaluate_gates({})["complete"]["passed"]


@pytest.mark.parametrize("task", ["quark-gluon", "etmiss"])
def test_track_tasks_run_end_to_end(task):
    report = pipeline.run_audit(tiny(task, n=300))
    seed = report["seeds"][0]
    assert seed["status"] == pipeline.COMPLETE, seed["diagnostic"]
    assert 0 <= seed["metrics"]["nominal"]["fooling_ratio"] <= 1


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(pipeline.OUT_ENV, str(tmp_path))
    cfg = pipeline.default_run_config()
    assert pipeline.output_root(cfg) == tmp_path / pipeline.config_hash(cfg)
    monkeypatch.delenv(pipeline.OUT_ENV)
    assert pipeline.output_root(cfg) is None

"""Run the complete audit from a configuration file and summarize the report.

    python3 demos/04_full_audit.py demos/configs/event_small.ini
"""
import sys

from sysaudit import pipeline
from sysaudit.config import load_config

cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else "demos/configs/event_small.ini")
report = pipeline.run_audit(cfg)
agg = report["aggregate"]
print(f"task {cfg.task}, seeds {list(cfg.seeds)}, config hash {report['config_hash']}")
for name in ("cut", "nominal", "adversarial", "combined"):
    d = agg[f"{name}.auc_diff"]
    print(f"{name:>11}: AUC(nominal) - AUC(adversarial) = {d['mean']:+.4f} +- {d['rms']:.4f}")
for gate, res in report["gates"].items():
    print(f"gate {gate}: {'pass' if res['passed'] else 'FAIL'}")

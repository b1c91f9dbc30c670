"""Compare the margin attack with PGD on the same trained model.

Kappa is tuned by bisection so both attacks fool the model on a similar
fraction of events, then the distribution checks are repeated for CW.
"""
from dataclasses import replace

import numpy as np

from sysaudit import attacks, models, pipeline

cfg = pipeline.default_run_config("event", 20_000, seeds=(0,))
data = pipeline.generate_seed(cfg, 0)
ckpt = pipeline.train_nominal(cfg, data, 0)
sub = data.take(np.arange(2560))
base = models.predict(ckpt, sub.features)

pgd = attacks.attack_dataset(ckpt, sub, cfg.uncertainty, replace(cfg.attack, seed=0))
target = attacks.fooling_ratio(base, models.predict(ckpt, pgd.data.features))
search = attacks.tune_kappa(ckpt, sub, cfg.uncertainty, replace(cfg.attack, kind="cw"), target, steps=4)
print(f"PGD fooling ratio {target:.4f}")
for kappa, fr in search.trials:
    print(f"  kappa {kappa:+.3f}: CW fooling ratio {fr:.4f}")

cw = attacks.attack_dataset(ckpt, sub, cfg.uncertainty, replace(cfg.attack, kind="cw", kappa=search.kappa))
for name, out in (("pgd", pgd), ("cw", cw)):
    c = pipeline.distribution_checks(cfg, sub, out.data, out.deviation, 0)
    chi2 = list(c["chi2_ndf"].values())
    print(f"{name}: chi2/ndf in [{min(chi2):.2f}, {max(chi2):.2f}], max dPearson {c['max_pearson']:.4f}, "
          f"z mean {c['z_mean']:+.3f}")

"""Train the nominal event classifier on one seed and attack its test events with PGD."""
from dataclasses import replace

import numpy as np

from sysaudit import attacks, metrics, models, pipeline

cfg = pipeline.default_run_config("event", 20_000, seeds=(0,))
data = pipeline.generate_seed(cfg, 0)
ckpt = pipeline.train_nominal(cfg, data, 0)
test = data.take(np.flatnonzero(data.split == 2))
print(f"model with {cfg.model.n_params} parameters trained on {np.sum(data.split == 0)} events")

out = attacks.attack_dataset(ckpt, test, cfg.uncertainty, replace(cfg.attack, seed=0))
s_nom = models.predict(ckpt, test.features)
s_adv = models.predict(ckpt, out.data.features)
auc_nom = metrics.roc_auc(s_nom, test.labels).auc
auc_adv = metrics.roc_auc(s_adv, test.labels).auc
z = metrics.z_stats(out.deviation)
print(f"test AUC nominal {auc_nom:.4f}, adversarial {auc_adv:.4f}")
print(f"fooling ratio {attacks.fooling_ratio(s_nom, s_adv):.4f}")
print(f"z mean {z.mean:+.3f}, std {z.std:.3f}, skew {z.skew:+.3f}")

fooled = (s_nom > 0.5) != (s_adv > 0.5)
print(f"fooled events sit near the threshold: median |s - 0.5| {np.median(np.abs(s_nom[fooled] - 0.5)):.3f} "
      f"vs {np.median(np.abs(s_nom - 0.5)):.3f} overall (p = {metrics.boundary_test(s_nom, fooled):.1e})")

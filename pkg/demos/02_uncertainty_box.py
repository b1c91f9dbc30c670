"""Uncertainty envelopes: widths, projection and standardized deviations on real benchmark rows."""
import numpy as np

from sysaudit import bench, default_uncertainty, project, sigma, standardize

table = bench.gen_event_table(bench.default_gen_config("event", 5, seed=1))
unc = default_uncertainty("event")
names = table.feature_names
x = table.features
s = sigma(x, unc, names)
print("features:", ", ".join(names))
print("first event:", np.round(x[0], 3))
print("sigma      :", np.round(s[0], 4))

# push every feature far outside the envelope and project back
wild = x + 10 * np.maximum(np.abs(x), 1)
back = project(wild, x, unc, names)
dev = standardize(back, x, unc, names)
print("after projection |z| max:", np.abs(dev.z[dev.valid]).max())
print("n_jets untouched:", np.array_equal(back[:, names.index("n_jets")], x[:, names.index("n_jets")]))
print("phi within [-pi, pi]:", bool(np.all(np.abs(back[:, [i for i, n in enumerate(names) if n.endswith('_phi')]])
                                           <= np.pi)))

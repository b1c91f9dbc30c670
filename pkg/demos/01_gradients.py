"""Build a small graph by hand and compare reverse-mode gradients with finite differences."""
import numpy as np

from sysaudit import Graph

rng = np.random.default_rng(0)
g = Graph()
x, w, b = g.input("x"), g.input("w"), g.input("b")
hidden = g.tanh(g.add(g.matmul(x, w), b))
loss = g.mean(g.bce_with_logits(g.sum(hidden, axis=1), np.array([0.0, 1.0, 1.0, 0.0])))

bind = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 5)), "b": np.zeros(5)}
trace = g.forward(bind, loss)
grads = trace.backward(loss, wrt=["w"])
print(f"loss = {float(trace.value):.6f}")

# one entry of dL/dw by central differences
eps = 1e-6
up, down = dict(bind), dict(bind)
up["w"], down["w"] = bind["w"].copy(), bind["w"].copy()
up["w"][1, 2] += eps
down["w"][1, 2] -= eps
numeric = (float(g.forward(up, loss).value) - float(g.forward(down, loss).value)) / (2 * eps)
print(f"dL/dw[1,2]: reverse mode {grads[w.id][1, 2]:.9f}, finite difference {numeric:.9f}")

# the soft histogram is differentiable too; with a narrow kernel it approaches np.histogram
values = rng.normal(size=20_000)
edges = np.linspace(-3, 3, 13)
h = Graph()
soft = h.forward({"v": values[:, None]}, h.soft_histogram(h.input("v"), edges[None, :], 0.005)).value[0]
print("soft bins:", np.round(soft).astype(int))
print("hard bins:", np.histogram(values, edges)[0])

"""Uncertainty-constrained adversarial attacks.

Both attacks move inputs only inside the per-feature envelope of an
:class:`~sysaudit.uncertainty.UncertaintyModel` and penalize visible
distortions through a differentiable-histogram chi-square and a Gaussian
prior on the standardized deviations ``z = delta / sigma``.

``pgd``
    Signed-gradient ascent on ``CE - l_chi2 * chi2 - l_prior * <z^2>`` with
    Gaussian step damping ``exp(-z^2 / 2)`` and projection after each step.
``cw``
    Margin attack minimizing ``sum z^2 + c * max(kappa - s * logit, 0)``
    plus the same penalties (prior also penalizes the batch mean of z),
    with a per-event binary search over ``c``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import models
from .autodiff import Graph, Node
from .bench import EventTable, TrackSet
from .errors import AttackError, ConfigurationError, ShapeError
from .uncertainty import Deviation, UncertaintyModel, inverse_sigma, project, sigma, standardize

log = logging.getLogger(__name__)

PGD = "pgd"
CW = "cw"
CHI2_EPS = 1.0


@dataclass(frozen=True)
class AttackConfig:
    kind: str = PGD
    step_size: float = 0.04
    iterations: int = 20
    lambda_chi2: float = 0.5
    lambda_prior: float = 0.5
    n_bins: int = 32
    bandwidth: float = 0.5  # in units of the bin width
    n_sigma: float | None = None  # overrides the uncertainty model when set
    step_units: str = "sigma"  # or "raw"
    kappa: float = 0.0
    c_min: float = 1e-2
    c_max: float = 1e2
    binary_search_steps: int = 8
    inner_steps: int = 50
    inner_step_size: float = 0.01
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (PGD, CW):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.step_units not in ("sigma", "raw"):
            raise ConfigurationError(f"step_units must be 'sigma' or 'raw', not {self.step_units!r}")
        if self.step_size < 0 or self.inner_step_size < 0:
            raise ConfigurationError("step sizes must be non-negative")
        if self.iterations < 1 or self.inner_steps < 1 or self.binary_search_steps < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if self.lambda_chi2 < 0 or self.lambda_prior < 0:
            raise ConfigurationError("penalty weights must be non-negative")
        if not 0 < self.c_min <= self.c_max:
            raise ConfigurationError("c range must be positive and ordered")
        if self.n_bins < 1 or self.bandwidth <= 0 or self.batch_size < 1:
            raise ConfigurationError("n_bins, bandwidth and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def default_attack(task: str, kind: str = PGD) -> AttackConfig:
    if task == "etmiss":
        return AttackConfig(kind=kind, step_size=0.02, iterations=15)
    return AttackConfig(kind=kind)


# ---------------------------------------------------------------------------
# histogram penalty


@dataclass
class HistSpec:
    """Frozen binning plus nominal bin masses for the chi-square penalty."""

    edges: np.ndarray  # (features, bins + 3), outer edges are -inf / +inf guards
    bandwidth: np.ndarray  # (features,)
    nominal: np.ndarray  # (features, bins + 2)
    weights: np.ndarray | None
    n_norm: int


def histogram_edges(values, n_bins: int, weights=None) -> np.ndarray:
    """``n_bins`` equal bins over each column's [min, max] plus two open guard bins."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if weights is not None:
        v = v[np.asarray(weights) > 0]
    if len(v) == 0:
        raise ShapeError("cannot bin an empty batch")
    lo, hi = v.min(axis=0), v.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    inner = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, n_bins + 1)[None, :]
    guard = np.full((len(lo), 1), np.inf)
    return np.hstack([-guard, inner, guard])


def soft_histogram(values, edges, bandwidth, weights=None) -> np.ndarray:
    """Gaussian-kernel bin masses.  1-D ``values``/``edges`` give a 1-D result."""
    v = np.asarray(values, dtype=np.float64)
    e = np.asarray(edges, dtype=np.float64)
    one_d = v.ndim == 1
    if one_d:
        v, e = v[:, None], e[None, :]
    g = Graph()
    g.soft_histogram(g.input("v"), e, bandwidth, weights)
    out = g.forward({"v": v}).value
    return out[0] if one_d else out


def make_hist_spec(nominal_rows, cfg: AttackConfig, perturbed: np.ndarray, weights=None) -> HistSpec:
    rows = np.asarray(nominal_rows, dtype=np.float64)
    edges = histogram_edges(rows, cfg.n_bins, weights)
    bw = cfg.bandwidth * (edges[:, 2] - edges[:, 1])
    nominal = soft_histogram(rows, edges, bw, weights)
    return HistSpec(edges, bw, nominal, None if weights is None else np.asarray(weights, dtype=np.float64),
                    max(int(np.sum(perturbed)), 1))


def chi2_node(g: Graph, rows: Node, hist: HistSpec) -> Node:
    """sum_f sum_b (m_adv - m_nom)^2 / (m_nom + 1), divided by the perturbed-feature count."""
    m = g.soft_histogram(rows, hist.edges, hist.bandwidth, hist.weights)
    diff = g.sub(m, hist.nominal)
    terms = g.mul(g.square(diff), 1.0 / (hist.nominal + CHI2_EPS))
    return g.mul(g.sum(terms), 1.0 / hist.n_norm)


def chi2_soft(nominal, adversarial, cfg: AttackConfig = AttackConfig(), perturbed=None, weights=None) -> float:
    """Soft chi-square between two batches of rows, nominal binning frozen."""
    nominal = np.asarray(nominal, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if len(nominal) == 0:
        raise ShapeError("empty batch")
    if nominal.shape[1:] != adversarial.shape[1:]:
        raise ShapeError(f"schemas differ: {nominal.shape} vs {adversarial.shape}")
    perturbed = np.ones(nominal.shape[1], bool) if perturbed is None else perturbed
    hist = make_hist_spec(nominal, cfg, perturbed, weights)
    g = Graph()
    root = chi2_node(g, g.input("x"), hist)
    return float(g.forward({"x": adversarial}, root).value)


def prior_node(g: Graph, z: Node, kind: str, inv_count) -> Node:
    """Mean of z^2 over perturbable entries; ``cw`` adds the squared mean of z."""
    second = g.mul(g.sum(g.square(z)), inv_count)
    if kind == PGD:
        return second
    first = g.mul(g.sum(z), inv_count)
    return g.add(second, g.square(first))


def prior_loss(z, kind: str = PGD, valid=None) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise AttackError("non-finite standardized deviation")
    count = z.size if valid is None else int(np.sum(valid))
    g = Graph()
    root = prior_node(g, g.input("z"), kind, 1.0 / max(count, 1))
    return float(g.forward({"z": np.where(valid, z, 0.0) if valid is not None else z}, root).value)


# ---------------------------------------------------------------------------
# per-batch attack graphs


@dataclass
class _Problem:
    """Everything fixed for one batch during an attack."""

    x0: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None
    sig: np.ndarray
    inv_sig: np.ndarray
    inv_count: float
    unc: UncertaintyModel
    names: Sequence[str]
    graph: Graph
    nodes: dict
    base: dict

    def evaluate(self, x: np.ndarray, extra=None, root: str = "objective"):
        bind = dict(self.base)
        bind["x"] = x
        if extra:
            bind.update(extra)
        trace = self.graph.forward(bind, self.nodes[root])
        return trace

    def project(self, x: np.ndarray) -> np.ndarray:
        return project(x, self.x0, self.unc, self.names, self.mask, sig=self.sig)


def _prepare(ckpt, x, labels, unc, cfg: AttackConfig, names, mask) -> _Problem:
    x0 = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    spec = ckpt.spec
    tracks = spec.family == models.POOLED_SET
    if tracks and mask is None:
        raise ShapeError("track-set attack needs a mask")
    if x0.shape[-1] != len(names):
        raise ShapeError(f"batch has {x0.shape[-1]} features, names list {len(names)}")
    if cfg.n_sigma is not None:
        unc = unc.with_n_sigma(cfg.n_sigma)
    sig = sigma(x0, unc, names, mask)
    inv_sig = inverse_sigma(sig)
    n_valid = int(np.count_nonzero(sig))
    perturbed = unc.perturbed(names)
    n_feat = x0.shape[-1]
    rows = x0.reshape(-1, n_feat)
    weights = None if mask is None else np.asarray(mask, dtype=np.float64).ravel()
    hist = make_hist_spec(rows, cfg, perturbed, weights)

    g = Graph()
    xn = g.input("x")
    mn = g.input("mask") if tracks else None
    logit = models.build_network(g, spec, xn, mn)
    flat = g.reshape(xn, (-1, n_feat)) if tracks else xn
    chi2 = chi2_node(g, flat, hist)
    z = g.mul(g.sub(xn, g.input("x0")), g.input("inv_sigma"))
    inv_count = 1.0 / max(n_valid, 1)
    prior = prior_node(g, z, cfg.kind, inv_count)
    nodes = {"logit": logit, "chi2": chi2, "prior": prior}
    if cfg.kind == PGD:
        ce = g.sum(g.bce_with_logits(logit, g.input("y")))
        nodes["ce"] = ce
        nodes["objective"] = g.sub(g.sub(ce, g.mul(chi2, cfg.lambda_chi2)), g.mul(prior, cfg.lambda_prior))
    else:
        margin = g.relu(g.sub(g.input("kappa"), g.mul(g.input("s"), logit)))
        size = g.sum(g.square(z))
        penalties = g.add(g.mul(chi2, cfg.lambda_chi2), g.mul(prior, cfg.lambda_prior))
        # batch-level penalties are scaled by the batch size to match the per-event sums
        nodes["margin"] = margin
        nodes["objective"] = g.add(g.add(size, g.sum(g.mul(g.input("c"), margin))),
                                   g.mul(penalties, float(len(x0))))

    base = models.bindings(ckpt, x0, mask)
    base.update({"x0": x0, "inv_sigma": inv_sig, "y": labels})
    return _Problem(x0, labels, mask, sig, inv_sig, inv_count, unc, names, g, nodes, base)


def _gradient(prob: _Problem, x: np.ndarray, extra=None, where: str = "") -> tuple[float, np.ndarray]:
    trace = prob.evaluate(x, extra)
    value = float(trace.value)
    grad = trace.backward(prob.nodes["objective"], wrt=["x"])[prob.graph.node("x").id]
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise AttackError(f"non-finite attack objective or gradient {where}")
    return value, grad


def pgd_attack(ckpt: models.Checkpoint, batch, labels, unc: UncertaintyModel, cfg: AttackConfig,
               names: Sequence[str], mask=None, history: list | None = None) -> np.ndarray:
    """Projected signed-gradient ascent inside the uncertainty box.

    Each step moves every entry by ``step * w(z) * sign(grad)`` with
    ``w(z) = exp(-z^2/2)``; ``step`` is ``step_size * sigma`` (or the raw
    ``step_size`` with ``step_units="raw"``).  Per-iteration objective values
    are appended to ``history`` when given.
    """
    prob = _prepare(ckpt, batch, labels, unc, cfg, names, mask)
    movable = prob.sig > 0
    base_step = cfg.step_size * (prob.sig if cfg.step_units == "sigma" else movable.astype(np.float64))
    x = prob.x0.copy()
    for it in range(cfg.iterations):
        value, grad = _gradient(prob, x, where=f"at iteration {it}")
        if history is not None:
            history.append(value)
        z = (x - prob.x0) * prob.inv_sig
        x = prob.project(x + base_step * np.exp(-0.5 * z * z) * np.sign(grad))
    return x


@dataclass
class CWResult:
    x: np.ndarray
    success: np.ndarray
    c: np.ndarray


def cw_attack(ckpt: models.Checkpoint, batch, labels, unc: UncertaintyModel, cfg: AttackConfig,
              names: Sequence[str], mask=None, details: bool = False):
    """Margin attack with per-event binary search over the trade-off constant.

    The target sign ``s`` is that of the opposite class (+1 for true
    background, -1 for true signal), so ``f = 0`` means the decision has been
    pushed past the threshold by at least ``kappa`` in logit space.  Returns
    the smallest-``sum z^2`` successful iterate per event, else the final
    iterate of the largest ``c`` tried.
    """
    prob = _prepare(ckpt, batch, labels, unc, cfg, names, mask)
    n = len(prob.x0)
    s = 1.0 - 2.0 * prob.labels
    lo = np.full(n, cfg.c_min)
    hi = np.full(n, cfg.c_max)
    c = np.sqrt(lo * hi)
    best = prob.x0.copy()
    best_norm = np.full(n, np.inf)
    fallback = prob.x0.copy()
    fallback_c = np.full(n, -np.inf)
    tried_c = np.zeros(n)
    lead = (slice(None),) + (None,) * (prob.x0.ndim - 1)
    step = cfg.inner_step_size * (prob.sig ** 2 if cfg.step_units == "sigma" else (prob.sig > 0))
    extra = {"s": s, "kappa": np.float64(cfg.kappa)}
    sum_axes = tuple(range(1, prob.x0.ndim))
    for bs in range(cfg.binary_search_steps):
        extra["c"] = c
        x = prob.x0.copy()
        for it in range(cfg.inner_steps):
            _, grad = _gradient(prob, x, extra, where=f"at search step {bs}, iteration {it}")
            x = prob.project(x - step * grad)
        logit = prob.evaluate(x, extra, root="logit").value
        ok = s * logit >= cfg.kappa
        z = (x - prob.x0) * prob.inv_sig
        norm = (z * z).sum(axis=sum_axes)
        better = ok & (norm < best_norm)
        best[better] = x[better]
        best_norm[better] = norm[better]
        larger = c > fallback_c
        fallback[larger] = x[larger]
        fallback_c[larger] = c[larger]
        tried_c = np.where(better, c, tried_c)
        hi = np.where(ok, c, hi)
        lo = np.where(ok, lo, c)
        c = np.sqrt(lo * hi)
    found = np.isfinite(best_norm)
    out = np.where(found[lead], best, fallback)
    if details:
        return CWResult(out, found, np.where(found, tried_c, fallback_c))
    return out


def fooling_ratio(pred_nominal, pred_adversarial) -> float:
    """Fraction of rows whose decision at threshold 0.5 differs."""
    a = np.asarray(pred_nominal, dtype=np.float64)
    b = np.asarray(pred_adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a > 0.5) != (b > 0.5)))


# ---------------------------------------------------------------------------
# dataset-level driver


@dataclass
class AttackOutput:
    data: EventTable | TrackSet
    deviation: Deviation
    batches: int
    history: list = field(default_factory=list)


def check_box(x_adv, x0, unc: UncertaintyModel, names, mask=None, slack: float = 1e-9) -> None:
    """Raise :class:`AttackError` unless every entry respects the envelope."""
    s = sigma(x0, unc, names, mask)
    excess = np.abs(x_adv - x0) - unc.n_sigma * s - slack
    if np.any(excess > 0):
        raise AttackError(f"box constraint violated by {excess.max():.3e}")
    frozen = s == 0
    if np.any(x_adv[frozen] != x0[frozen]):
        raise AttackError("masked entries were modified")


def attack_dataset(ckpt: models.Checkpoint, data, unc: UncertaintyModel, cfg: AttackConfig) -> AttackOutput:
    """Attack every event in seeded mini-batches of ``cfg.batch_size``.

    Labels used by the attack are the true category labels.
    """
    names = data.feature_names
    x0 = data.features
    mask = getattr(data, "mask", None)
    if cfg.n_sigma is not None:
        unc = unc.with_n_sigma(cfg.n_sigma)
    order = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xA77])).permutation(len(data))
    x_adv = np.empty_like(x0)
    history = []
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = np.sort(order[start:start + cfg.batch_size])
        m = None if mask is None else mask[idx]
        if cfg.kind == PGD:
            h: list = []
            x_adv[idx] = pgd_attack(ckpt, x0[idx], data.labels[idx], unc, cfg, names, m, history=h)
            history.append(h)
        else:
            x_adv[idx] = cw_attack(ckpt, x0[idx], data.labels[idx], unc, cfg, names, m)
        n_batches += 1
    check_box(x_adv, x0, unc, names, mask)
    return AttackOutput(data.with_features(x_adv), standardize(x_adv, x0, unc, names, mask), n_batches, history)


def save_deviation(dev: Deviation, path) -> None:
    np.savez_compressed(path, delta=dev.delta, z=dev.z, valid=dev.valid)


def load_deviation(path) -> Deviation:
    with np.load(path) as f:
        return Deviation(f["delta"], f["z"], f["valid"])


@dataclass
class KappaSearch:
    kappa: float
    fooling_ratio: float
    target: float
    trials: list  # (kappa, fooling ratio) in evaluation order


def tune_kappa(ckpt: models.Checkpoint, data, unc: UncertaintyModel, cfg: AttackConfig, target: float,
               lo: float = -1.0, hi: float = 3.0, steps: int = 6) -> KappaSearch:
    """Bisect the CW confidence so its fooling ratio approaches ``target``.

    Assumes the fooling ratio grows with kappa.  Keeps the kappa with the
    smallest mismatch, preferring the smaller one on ties.  When the attack
    saturates below the target the search ends near ``hi``.
    """
    nominal = models.predict(ckpt, data.features, getattr(data, "mask", None))
    trials = []
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        out = attack_dataset(ckpt, data, unc, replace(cfg, kind=CW, kappa=mid))
        fr = fooling_ratio(nominal, models.predict(ckpt, out.data.features, getattr(out.data, "mask", None)))
        trials.append((mid, fr))
        log.info("kappa %.4f: fooling ratio %.4f (target %.4f)", mid, fr, target)
        if fr < target:
            lo = mid
        else:
            hi = mid
    best = min(trials, key=lambda t: (abs(t[1] - target), t[0]))
    return KappaSearch(best[0], best[1], float(target), trials)

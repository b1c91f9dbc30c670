"""Synthetic collider-style benchmarks, jet observables and cut baselines.

Three tasks are generated from simple parametric spectra:

``event``
    t tbar-like signal vs WW-like background, 12 high-level columns.
``quark-gluon``
    per-jet track sets (pt, eta, phi, charge, d0, z0); label 1 = quark.
``etmiss``
    per-event track sets (px, py, pz, d0); label 1 = true missing pT > 60 GeV.

All generators are deterministic in ``GenConfig.seed``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

EVENT = "event"
QUARK_GLUON = "quark-gluon"
ETMISS = "etmiss"
TASKS = (EVENT, QUARK_GLUON, ETMISS)

EVENT_FEATURES = (
    "lep_pt", "lep_eta", "lep_phi",
    "jet1_pt", "jet1_eta", "jet1_phi",
    "jet2_pt", "jet2_eta", "jet2_phi",
    "n_jets", "met", "ht",
)
EVENT_UNITS = ("GeV", "", "rad", "GeV", "", "rad", "GeV", "", "rad", "", "GeV", "GeV")
QG_FEATURES = ("pt", "eta", "phi", "charge", "d0", "z0")
QG_UNITS = ("GeV", "", "rad", "e", "mm", "mm")
ETMISS_FEATURES = ("px", "py", "pz", "d0")
ETMISS_UNITS = ("GeV", "GeV", "GeV", "mm")

SPLIT_NAMES = ("train", "val", "test")


def wrap_phi(phi):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(phi, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


# ---------------------------------------------------------------------------
# data carriers


@dataclass
class EventTable:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] = EVENT_FEATURES
    units: tuple[str, ...] = EVENT_UNITS
    split: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def with_features(self, features) -> "EventTable":
        return replace(self, features=np.asarray(features, dtype=np.float64))

    def take(self, idx) -> "EventTable":
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       split=None if self.split is None else self.split[idx])

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]


@dataclass
class TrackSet:
    """Padded track arrays (events, max_tracks, features) with a validity mask.

    ``truth`` optionally carries the generator's hidden truth vector (etmiss).
    """

    tracks: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    units: tuple[str, ...]
    split: np.ndarray | None = None
    truth: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def features(self) -> np.ndarray:
        return self.tracks

    def with_features(self, tracks) -> "TrackSet":
        return replace(self, tracks=np.asarray(tracks, dtype=np.float64))

    def take(self, idx) -> "TrackSet":
        return replace(self, tracks=self.tracks[idx], mask=self.mask[idx], labels=self.labels[idx],
                       split=None if self.split is None else self.split[idx],
                       truth=None if self.truth is None else self.truth[idx])

    @property
    def n_tracks(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)


@dataclass(frozen=True)
class CategoryParams:
    """Spectral parameters of one generated category."""

    pt_loc: float
    pt_scale: float
    angular_width: float
    multiplicity_mean: float


_EVENT_DEFAULTS = {
    "signal": CategoryParams(pt_loc=110.0, pt_scale=0.45, angular_width=1.0, multiplicity_mean=1.6),
    "background": CategoryParams(pt_loc=85.0, pt_scale=0.5, angular_width=1.3, multiplicity_mean=0.5),
}
_QG_DEFAULTS = {
    "signal": CategoryParams(pt_loc=100.0, pt_scale=0.3, angular_width=0.1, multiplicity_mean=2.5),
    "background": CategoryParams(pt_loc=100.0, pt_scale=0.3, angular_width=0.12, multiplicity_mean=5.0),
}
# signal = neutrino pT spectrum, background = pile-up track spectrum
_ETMISS_DEFAULTS = {
    "signal": CategoryParams(pt_loc=38.0, pt_scale=0.45, angular_width=1.5, multiplicity_mean=6.0),
    "background": CategoryParams(pt_loc=1.5, pt_scale=0.6, angular_width=2.0, multiplicity_mean=8.0),
}
_DEFAULTS = {EVENT: _EVENT_DEFAULTS, QUARK_GLUON: _QG_DEFAULTS, ETMISS: _ETMISS_DEFAULTS}


@dataclass(frozen=True)
class GenConfig:
    n_events: int = 50_000
    seed: int = 0
    signal: CategoryParams = _EVENT_DEFAULTS["signal"]
    background: CategoryParams = _EVENT_DEFAULTS["background"]
    signal_fraction: float = 0.5
    etmiss_threshold: float = 60.0
    max_tracks: int = 50

    def validate(self) -> None:
        if self.n_events <= 0 or self.max_tracks <= 0:
            raise ConfigurationError("n_events and max_tracks must be positive")
        if not 0.0 < self.signal_fraction < 1.0:
            raise ConfigurationError("signal_fraction must lie in (0, 1)")
        for cat in (self.signal, self.background):
            if cat.pt_loc <= 0 or cat.pt_scale <= 0 or cat.angular_width <= 0:
                raise ConfigurationError(f"spectral scales must be positive: {cat}")
            if cat.multiplicity_mean < 0:
                raise ConfigurationError(f"multiplicity mean must be non-negative: {cat}")


def default_gen_config(task: str, n_events: int = 50_000, seed: int = 0) -> GenConfig:
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    d = _DEFAULTS[task]
    return GenConfig(n_events=n_events, seed=seed, signal=d["signal"], background=d["background"])


# ---------------------------------------------------------------------------
# generators


def _lognormal(rng, loc, scale, size):
    return loc * np.exp(scale * rng.standard_normal(size))


def _uniform_phi(rng, size):
    return np.pi - rng.uniform(0.0, 2 * np.pi, size)


def gen_event_table(config: GenConfig) -> EventTable:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1]))
    n = config.n_events
    labels = (rng.random(n) < config.signal_fraction).astype(np.float64)
    sig = labels == 1
    pick = lambda attr: np.where(sig, getattr(config.signal, attr), getattr(config.background, attr))

    n_jets = 2.0 + rng.poisson(pick("multiplicity_mean"))
    # extra jets harden the leading jet a little
    jet1_pt = 25.0 + _lognormal(rng, pick("pt_loc"), pick("pt_scale"), n) * (1.0 + 0.06 * (n_jets - 2))
    jet2_pt = np.maximum(20.0, jet1_pt * rng.beta(np.where(sig, 4.0, 3.0), 2.0))
    lep_pt = 20.0 + _lognormal(rng, np.where(sig, 35.0, 32.0), 0.55, n)
    met = _lognormal(rng, np.where(sig, 55.0, 42.0), 0.5, n) + 0.1 * lep_pt

    width = pick("angular_width")
    lep_eta = np.clip(rng.normal(0.0, 1.1, n), -2.5, 2.5)
    jet1_eta = np.clip(rng.normal(0.0, width), -4.5, 4.5)
    jet2_eta = np.clip(rng.normal(0.0, width), -4.5, 4.5)
    lep_phi, jet1_phi = _uniform_phi(rng, n), _uniform_phi(rng, n)
    # signal jets are less back-to-back than the WW dijet system
    dphi = np.pi - np.abs(rng.normal(0.0, np.where(sig, 1.3, 0.8)))
    jet2_phi = wrap_phi(jet1_phi + np.where(rng.random(n) < 0.5, dphi, -dphi))
    # scalar sum over all jets: unlisted extra jets plus soft activity below threshold
    extra = n_jets - 2
    ht = jet1_pt + jet2_pt + 20.0 * extra + rng.gamma(np.maximum(extra, 1e-9), 12.0) * (extra > 0) \
        + rng.gamma(2.0, 8.0, n)

    x = np.column_stack([lep_pt, lep_eta, lep_phi, jet1_pt, jet1_eta, jet1_phi,
                         jet2_pt, jet2_eta, jet2_phi, n_jets, met, ht])
    return EventTable(x, labels)


def _pad(rows: list[np.ndarray], max_tracks: int, n_feat: int) -> tuple[np.ndarray, np.ndarray]:
    tracks = np.zeros((len(rows), max_tracks, n_feat))
    mask = np.zeros((len(rows), max_tracks))
    for i, r in enumerate(rows):
        k = min(len(r), max_tracks)
        tracks[i, :k] = r[:k]
        mask[i, :k] = 1.0
    return tracks, mask


def _gen_quark_gluon(config: GenConfig, rng) -> TrackSet:
    n = config.n_events
    labels = (rng.random(n) < config.signal_fraction).astype(np.float64)
    rows = []
    for i in range(n):
        cat = config.signal if labels[i] == 1 else config.background
        # both categories share one jet-pT spectrum (stands in for pT reweighting)
        jet_pt = _lognormal(rng, config.signal.pt_loc, config.signal.pt_scale, None)
        k = min(1 + rng.poisson(cat.multiplicity_mean), config.max_tracks)
        conc = 0.7 if labels[i] == 1 else 1.4
        frac = rng.dirichlet(np.full(k, conc)) if k > 1 else np.ones(1)
        pt = np.maximum(np.sort(jet_pt * frac)[::-1], 0.5)
        eta0 = rng.uniform(-2.0, 2.0)
        phi0 = _uniform_phi(rng, None)
        eta = eta0 + rng.normal(0.0, cat.angular_width, k)
        phi = wrap_phi(phi0 + rng.normal(0.0, cat.angular_width, k))
        charge = np.where(rng.random(k) < 0.5, -1.0, 1.0)
        d0 = rng.normal(0.0, 0.05, k)
        z0 = rng.normal(0.0, 0.1, k)
        rows.append(np.column_stack([pt, eta, phi, charge, d0, z0]))
    tracks, mask = _pad(rows, config.max_tracks, len(QG_FEATURES))
    return TrackSet(tracks, mask, labels, QG_FEATURES, QG_UNITS)


def _gen_etmiss(config: GenConfig, rng) -> TrackSet:
    """W -> mu nu surrogate.  The neutrino transverse vector is the hidden truth."""
    n = config.n_events
    nu_cat, pu_cat = config.signal, config.background
    rows, truth = [], np.zeros((n, 2))
    for i in range(n):
        # W transverse boost plus a back-to-back decay in the W frame
        w_pt = _lognormal(rng, 20.0, 0.8, None)
        w_phi = _uniform_phi(rng, None)
        p_w = w_pt * np.array([np.cos(w_phi), np.sin(w_phi)])
        q_pt = _lognormal(rng, nu_cat.pt_loc, nu_cat.pt_scale, None)
        q_phi = _uniform_phi(rng, None)
        q = q_pt * np.array([np.cos(q_phi), np.sin(q_phi)])
        nu = 0.5 * p_w + q
        mu = 0.5 * p_w - q
        truth[i] = nu
        # hadronic recoil balances the W; only a charged fraction is seen as tracks
        n_had = max(1, rng.poisson(nu_cat.multiplicity_mean))
        share = rng.dirichlet(np.ones(n_had)) * rng.uniform(0.3, 0.8)
        had = -share[:, None] * p_w[None, :] + rng.normal(0.0, 1.0, (n_had, 2))
        n_pu = rng.poisson(pu_cat.multiplicity_mean)
        pu_pt = _lognormal(rng, pu_cat.pt_loc, pu_cat.pt_scale, n_pu)
        pu_phi = _uniform_phi(rng, n_pu)
        pu = pu_pt[:, None] * np.column_stack([np.cos(pu_phi), np.sin(pu_phi)])
        pxy = np.vstack([mu[None, :], had, pu])
        eta = rng.normal(0.0, nu_cat.angular_width, len(pxy))
        pz = np.hypot(pxy[:, 0], pxy[:, 1]) * np.sinh(eta)
        d0 = rng.normal(0.0, 0.02, len(pxy))
        ev = np.column_stack([pxy, pz, d0])
        order = np.argsort(-np.hypot(ev[:, 0], ev[:, 1]), kind="stable")
        rows.append(ev[order])
    tracks, mask = _pad(rows, config.max_tracks, len(ETMISS_FEATURES))
    labels = (np.hypot(truth[:, 0], truth[:, 1]) > config.etmiss_threshold).astype(np.float64)
    return TrackSet(tracks, mask, labels, ETMISS_FEATURES, ETMISS_UNITS, truth=truth)


def gen_track_sets(config: GenConfig, task: str) -> TrackSet:
    config.validate()
    if task == QUARK_GLUON:
        return _gen_quark_gluon(config, np.random.default_rng(np.random.SeedSequence([int(config.seed), 2])))
    if task == ETMISS:
        return _gen_etmiss(config, np.random.default_rng(np.random.SeedSequence([int(config.seed), 3])))
    raise ConfigurationError(f"task {task!r} has no track-set generator")


def generate(task: str, config: GenConfig):
    return gen_event_table(config) if task == EVENT else gen_track_sets(config, task)


# ---------------------------------------------------------------------------
# observables and cut baselines


def cut_ttbar(features) -> np.ndarray | bool:
    """t tbar candidate iff n_jets > 2, jet1 pT > 60 GeV and jet2 pT > 40 GeV.

    Accepts one event row or a (events, 12) matrix in :data:`EVENT_FEATURES`
    order.
    """
    x = np.asarray(features, dtype=np.float64)
    col = EVENT_FEATURES.index
    sel = (x[..., col("n_jets")] > 2) & (x[..., col("jet1_pt")] > 60.0) & (x[..., col("jet2_pt")] > 40.0)
    return bool(sel) if sel.ndim == 0 else sel


def _valid(tracks, mask):
    tracks = np.atleast_2d(np.asarray(tracks, dtype=np.float64))
    if mask is not None:
        tracks = tracks[np.asarray(mask) > 0]
    if len(tracks) == 0:
        raise DomainError("jet has no valid tracks")
    return tracks


def _axis_offsets(pt, eta, phi):
    total = pt.sum(axis=-1, keepdims=True)
    eta_axis = (pt * eta).sum(axis=-1, keepdims=True) / total
    # weighted mean of phi, unwrapped around the leading track
    lead = np.take_along_axis(phi, np.argmax(pt, axis=-1)[..., None], axis=-1)
    rel = wrap_phi(phi - lead)
    phi_axis = lead + (pt * rel).sum(axis=-1, keepdims=True) / total
    return eta - eta_axis, wrap_phi(phi - phi_axis)


def girth(tracks, mask=None) -> float:
    """pT-weighted mean distance of tracks from the jet axis.

    ``tracks`` rows start with (pt, eta, phi); the axis is the pT-weighted
    centroid of the tracks themselves.
    """
    t = _valid(tracks, mask)
    pt, eta, phi = t[:, 0], t[:, 1], t[:, 2]
    if pt.sum() <= 0:
        raise DomainError("total track pT is zero")
    deta, dphi = _axis_offsets(pt, eta, phi)
    return float((pt * np.hypot(deta, dphi)).sum() / pt.sum())


def ptd(tracks, mask=None) -> float:
    t = _valid(tracks, mask)
    pt = t[:, 0]
    if pt.sum() <= 0:
        raise DomainError("total track pT is zero")
    return float(np.sqrt((pt * pt).sum()) / pt.sum())


def jet_observables(ts: TrackSet) -> dict[str, np.ndarray]:
    """Vectorized n_tracks, pT D and girth for every jet of a quark-gluon set."""
    m = ts.mask > 0
    if np.any(m.sum(axis=1) == 0):
        raise DomainError("jet without valid tracks")
    pt = np.where(m, ts.tracks[..., 0], 0.0)
    total = pt.sum(axis=1)
    if np.any(total <= 0):
        raise DomainError("jet with zero total track pT")
    eta = ts.tracks[..., 1]
    phi = ts.tracks[..., 2]
    deta, dphi = _axis_offsets(pt, eta, phi)
    g = (pt * np.hypot(deta, dphi)).sum(axis=1) / total
    d = np.sqrt((pt * pt).sum(axis=1)) / total
    return {"n_tracks": m.sum(axis=1).astype(np.float64), "ptd": d, "girth": g}


@dataclass(frozen=True)
class QuarkGluonCuts:
    max_tracks: float = 3
    max_ptd: float = 2.5
    girth_low: float = 0.1
    girth_high: float = 0.5


def qg_cut(n_tracks, ptd_value, girth_value, cuts: QuarkGluonCuts = QuarkGluonCuts()):
    """Quark iff n_tracks <= 3 and pT D < 2.5 and (girth > 0.1 or girth > 0.5)."""
    n_tracks, ptd_value, girth_value = map(np.asarray, (n_tracks, ptd_value, girth_value))
    sel = ((n_tracks <= cuts.max_tracks) & (ptd_value < cuts.max_ptd)
           & ((girth_value > cuts.girth_low) | (girth_value > cuts.girth_high)))
    return bool(sel) if sel.ndim == 0 else sel


def cut_quark_gluon(tracks, mask=None, cuts: QuarkGluonCuts = QuarkGluonCuts()) -> bool:
    t = _valid(tracks, mask)
    return qg_cut(len(t), ptd(t), girth(t), cuts)


def etmiss_baseline(tracks, mask=None, threshold: float = 60.0) -> tuple[float, bool]:
    """Track-sum missing transverse momentum magnitude and its > threshold label."""
    t = np.atleast_2d(np.asarray(tracks, dtype=np.float64))
    if mask is not None:
        t = t[np.asarray(mask) > 0]
    mag = float(np.hypot(-t[:, 0].sum(), -t[:, 1].sum()))
    return mag, mag > threshold


def etmiss_magnitudes(ts: TrackSet) -> np.ndarray:
    m = ts.mask > 0
    px = np.where(m, ts.tracks[..., 0], 0.0).sum(axis=1)
    py = np.where(m, ts.tracks[..., 1], 0.0).sum(axis=1)
    return np.hypot(px, py)


def cut_baseline(task: str, data, threshold: float = 60.0) -> np.ndarray:
    """Binary cut-based decision (1 = signal category) for every event."""
    if task == EVENT:
        return cut_ttbar(data.features).astype(np.float64)
    if task == QUARK_GLUON:
        obs = jet_observables(data)
        return qg_cut(obs["n_tracks"], obs["ptd"], obs["girth"]).astype(np.float64)
    if task == ETMISS:
        return (etmiss_magnitudes(data) > threshold).astype(np.float64)
    raise ConfigurationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# file formats


def _split_names(split, n):
    if split is None:
        return [""] * n
    return [SPLIT_NAMES[int(s)] for s in split]


def _split_codes(names):
    if all(s == "" for s in names):
        return None
    return np.array([SPLIT_NAMES.index(s) for s in names], dtype=np.int8)


def write_event_table(table: EventTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*table.feature_names, "label", "split"])
        for row, y, s in zip(table.features, table.labels, _split_names(table.split, len(table))):
            w.writerow([repr(float(v)) for v in row] + [int(y), s])


def read_event_table(path) -> EventTable:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    if header[-2:] != ["label", "split"]:
        raise ConfigurationError(f"{path}: expected trailing label,split columns")
    names = tuple(header[:-2])
    x = np.array([[float(v) for v in row[:-2]] for row in rows]).reshape(len(rows), len(names))
    units = EVENT_UNITS if names == EVENT_FEATURES else ("",) * len(names)
    return EventTable(x, np.array([float(row[-2]) for row in rows]), names, units,
                      _split_codes([row[-1] for row in rows]))


def write_track_set(ts: TrackSet, path) -> None:
    """One JSON record per line; the first line is a header with the schema."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"feature_names": list(ts.feature_names), "units": list(ts.units),
                             "max_tracks": ts.tracks.shape[1]}) + "\n")
        splits = _split_names(ts.split, len(ts))
        for i in range(len(ts)):
            rec = {"mask": ts.mask[i].astype(int).tolist(), "tracks": ts.tracks[i].tolist(),
                   "label": int(ts.labels[i]), "split": splits[i]}
            if ts.truth is not None:
                rec["truth"] = ts.truth[i].tolist()
            fh.write(json.dumps(rec) + "\n")


def read_track_set(path) -> TrackSet:
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    names = tuple(header["feature_names"])
    tracks = np.array([r["tracks"] for r in recs], dtype=np.float64).reshape(
        len(recs), header["max_tracks"], len(names))
    mask = np.array([r["mask"] for r in recs], dtype=np.float64).reshape(len(recs), header["max_tracks"])
    truth = np.array([r["truth"] for r in recs]) if recs and "truth" in recs[0] else None
    return TrackSet(tracks, mask, np.array([float(r["label"]) for r in recs]), names,
                    tuple(header["units"]), _split_codes([r["split"] for r in recs]), truth)


def write_dataset(data, path) -> None:
    (write_event_table if isinstance(data, EventTable) else write_track_set)(data, path)


def read_dataset(path):
    path = Path(path)
    return read_track_set(path) if path.suffix == ".jsonl" else read_event_table(path)

"""Classifier families, training loop and checkpoint serialization.

Two families produce exactly one logit per example:

* ``dense``: standardized features -> ReLU MLP -> logit.
* ``pooled-set``: per-track ReLU embedding -> masked mean pool -> ReLU head
  -> logit.  Invariant under permutations of valid tracks and under the
  content of padding rows.

Inputs are standardized inside the network with statistics fitted on the
training split; the statistics live in the checkpoint next to the flat
parameter vector but are not trainable.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigurationError, ShapeError, TrainingError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DENSE = "dense"
POOLED_SET = "pooled-set"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    For ``dense`` models ``hidden`` lists the hidden widths.  For
    ``pooled-set`` models ``embed`` lists the per-track widths and ``hidden``
    the head widths after pooling.  ``dropout`` holds one rate per hidden
    layer (embedding layers first); a scalar is broadcast.
    """

    family: str = DENSE
    n_features: int = 12
    hidden: tuple[int, ...] = (64, 64, 32)
    embed: tuple[int, ...] = ()
    dropout: tuple[float, ...] | float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "embed", tuple(int(h) for h in self.embed))
        n_layers = len(self.embed) + len(self.hidden)
        rates = self.dropout
        if np.isscalar(rates):
            rates = (float(rates),) * n_layers
        object.__setattr__(self, "dropout", tuple(float(r) for r in rates))
        if self.family not in (DENSE, POOLED_SET):
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if self.n_features < 1 or any(w < 1 for w in self.hidden + self.embed):
            raise ConfigurationError("layer widths and feature count must be positive")
        if len(self.dropout) != n_layers:
            raise ConfigurationError(f"need {n_layers} dropout rates, got {len(self.dropout)}")
        if any(not 0.0 <= r < 1.0 for r in self.dropout):
            raise ConfigurationError("dropout rates must lie in [0, 1)")
        if self.family == DENSE and self.embed:
            raise ConfigurationError("dense models have no embedding layers")
        if self.family == POOLED_SET and not self.embed:
            raise ConfigurationError("pooled-set models need at least one embedding layer")

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.n_features, *self.embed, *self.hidden, 1]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"], d["embed"], d["dropout"] = list(self.hidden), list(self.embed), list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(family=d["family"], n_features=d["n_features"], hidden=tuple(d["hidden"]),
                   embed=tuple(d.get("embed", ())), dropout=tuple(d["dropout"]))


def dense_spec(n_features: int = 12, hidden=(64, 64, 32), dropout=0.1) -> ModelSpec:
    return ModelSpec(DENSE, n_features, tuple(hidden), (), dropout)


def pooled_set_spec(n_features: int, embed=(32, 32), head=(32,), dropout=0.1) -> ModelSpec:
    return ModelSpec(POOLED_SET, n_features, tuple(head), tuple(embed), dropout)


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: np.ndarray
    seed: int
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ConfigurationError(
                f"parameter vector has {self.params.size} entries, spec needs {self.spec.n_params}")
        n = self.spec.n_features
        self.shift = np.zeros(n) if self.shift is None else np.asarray(self.shift, dtype=np.float64)
        self.scale = np.ones(n) if self.scale is None else np.asarray(self.scale, dtype=np.float64)

    def copy(self) -> "Checkpoint":
        return replace(self, params=self.params.copy(), shift=self.shift.copy(), scale=self.scale.copy())

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "spec": self.spec.to_dict(),
            "seed": int(self.seed),
            "parameters": self.params.tolist(),
            "input_shift": self.shift.tolist(),
            "input_scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"checkpoint format {version!r} is not supported (expected {FORMAT_VERSION})")
        return cls(ModelSpec.from_dict(d["spec"]), np.array(d["parameters"], dtype=np.float64),
                   int(d["seed"]), np.array(d["input_shift"]), np.array(d["input_scale"]), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(ckpt.to_dict()))


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Samples:
    """Model inputs plus binary labels.  ``mask`` is set for track sets."""

    x: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
        if len(self.labels) != len(self.x):
            raise ShapeError(f"{len(self.x)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Samples":
        return Samples(self.x[idx], self.labels[idx], None if self.mask is None else self.mask[idx])

    @staticmethod
    def concat(parts: list["Samples"]) -> "Samples":
        masks = [p.mask for p in parts]
        mask = None if masks[0] is None else np.concatenate(masks)
        return Samples(np.concatenate([p.x for p in parts]), np.concatenate([p.labels for p in parts]), mask)


# ---------------------------------------------------------------------------
# graph construction


def _param_names(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    names = []
    for k, (i, o) in enumerate(spec.layer_shapes()):
        names.append((f"W{k}", (i, o)))
        names.append((f"b{k}", (o,)))
    return names


def unflatten(spec: ModelSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in _param_names(spec):
        n = int(np.prod(shape))
        out[name] = params[pos:pos + n].reshape(shape)
        pos += n
    return out


def build_network(g: Graph, spec: ModelSpec, x: Node, mask: Node | None = None, train: bool = False) -> Node:
    """Append the network to ``g`` and return the (N,) logit node.

    Declares inputs ``W*``/``b*``, ``shift``, ``inv_scale`` and, in training
    mode, one dropout mask ``drop<k>`` per hidden layer.
    """
    h = g.mul(g.sub(x, g.input("shift")), g.input("inv_scale"))
    shapes = spec.layer_shapes()
    last = len(shapes) - 1
    for k in range(len(shapes)):
        h = g.add(g.matmul(h, g.input(f"W{k}")), g.input(f"b{k}"))
        if k == last:
            break
        h = g.relu(h)
        if train and spec.dropout[k] > 0:
            h = g.mul(h, g.input(f"drop{k}"))
        if spec.family == POOLED_SET and k == len(spec.embed) - 1:
            if mask is None:
                raise ShapeError("pooled-set network needs a mask input")
            h = g.masked_mean_pool(h, mask)
    n = g.reshape(h, (-1,))
    return n


@dataclass(frozen=True)
class _Compiled:
    graph: Graph
    logit: Node
    loss: Node | None
    param_nodes: tuple[Node, ...]


@lru_cache(maxsize=None)
def _compile(spec: ModelSpec, train: bool) -> _Compiled:
    g = Graph()
    x = g.input("x")
    mask = g.input("mask") if spec.family == POOLED_SET else None
    logit = build_network(g, spec, x, mask, train=train)
    loss = g.mean(g.bce_with_logits(logit, g.input("y")))
    params = tuple(g.node(name) for name, _ in _param_names(spec))
    return _Compiled(g, logit, loss, params)


def bindings(ckpt: Checkpoint, x, mask=None) -> dict[str, np.ndarray]:
    """Input bindings for a network built with :func:`build_network`."""
    b = unflatten(ckpt.spec, ckpt.params)
    b["shift"] = ckpt.shift
    b["inv_scale"] = 1.0 / ckpt.scale
    b["x"] = x
    if ckpt.spec.family == POOLED_SET:
        if mask is None:
            raise ShapeError("pooled-set model needs a track mask")
        b["mask"] = mask
    return b


def _check_inputs(spec: ModelSpec, x, mask) -> None:
    want = 3 if spec.family == POOLED_SET else 2
    if x.ndim != want or x.shape[-1] != spec.n_features:
        raise ShapeError(f"{spec.family} model with {spec.n_features} features cannot take input of shape {x.shape}")
    if mask is not None and mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match tracks {x.shape}")


# ---------------------------------------------------------------------------
# public operations


def init(spec: ModelSpec, seed: int) -> Checkpoint:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_out))
    return Checkpoint(spec, np.concatenate(parts), seed)


def _chunk_size(spec: ModelSpec) -> int:
    return 1024 if spec.family == POOLED_SET else 8192


def logits(ckpt: Checkpoint, x, mask=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mask = None if mask is None else np.asarray(mask, dtype=np.float64)
    _check_inputs(ckpt.spec, x, mask)
    comp = _compile(ckpt.spec, False)
    base = bindings(ckpt, x[:0], None if mask is None else mask[:0])
    step = _chunk_size(ckpt.spec)
    out = []
    for start in range(0, len(x), step):
        base["x"] = x[start:start + step]
        if mask is not None:
            base["mask"] = mask[start:start + step]
        out.append(comp.graph.forward(base, comp.logit).value)
    return np.concatenate(out) if out else np.zeros(0)


def predict(ckpt: Checkpoint, x, mask=None) -> np.ndarray:
    z = logits(ckpt, x, mask)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_standardization(samples: Samples) -> tuple[np.ndarray, np.ndarray]:
    x = samples.x
    if samples.mask is not None:
        x = x[samples.mask > 0]
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return shift, scale


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 40
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience, batch_size and max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def mean_loss(ckpt: Checkpoint, samples: Samples) -> float:
    """Mean binary cross-entropy over ``samples`` with dropout disabled."""
    z = logits(ckpt, samples.x, samples.mask)
    y = samples.labels
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def train(ckpt: Checkpoint, train_set: Samples, val_set: Samples, config: TrainConfig = TrainConfig()):
    """Adam training with early stopping on the validation loss.

    Returns ``(best_checkpoint, history)``; the returned parameters are those
    of the epoch with the lowest validation loss.
    """
    spec = ckpt.spec
    _check_inputs(spec, train_set.x, train_set.mask)
    _check_inputs(spec, val_set.x, val_set.mask)
    if not np.all(np.isin(train_set.labels, (0.0, 1.0))):
        raise ConfigurationError("labels must be binary")

    ckpt = ckpt.copy()
    ckpt.shift, ckpt.scale = fit_standardization(train_set)
    comp = _compile(spec, True)
    theta = ckpt.params.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    n = len(train_set)
    keep = [1.0 - r for r in spec.dropout]
    widths = [*spec.embed, *spec.hidden]

    best = ckpt.copy()
    best_loss = mean_loss(best, val_set)
    history = []
    stale = 0
    for epoch in range(config.max_epochs):
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            ckpt.params = theta
            bind = bindings(ckpt, train_set.x[idx], None if train_set.mask is None else train_set.mask[idx])
            bind["y"] = train_set.labels[idx]
            lead = (len(idx), train_set.x.shape[1]) if spec.family == POOLED_SET else (len(idx),)
            for k, (width, p) in enumerate(zip(widths, keep)):
                if p < 1.0:
                    shape = lead + (width,) if k < len(spec.embed) else (len(idx), width)
                    bind[f"drop{k}"] = (rng.random(shape) < p) / p
            trace = comp.graph.forward(bind, comp.loss)
            loss = float(trace.value)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = trace.backward(comp.loss, wrt=comp.param_nodes)
            grad = np.concatenate([grads[p.id].ravel() for p in comp.param_nodes])
            t += 1
            m = config.beta1 * m + (1 - config.beta1) * grad
            v = config.beta2 * v + (1 - config.beta2) * grad * grad
            mhat = m / (1 - config.beta1 ** t)
            vhat = v / (1 - config.beta2 ** t)
            theta = theta - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
            total += loss * len(idx)
            count += len(idx)
        ckpt.params = theta
        val_loss = mean_loss(ckpt, val_set)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss})
        log.debug("epoch %d train %.5f val %.5f", epoch, total / count, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best = ckpt.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.seed = config.seed
    return best, history


@dataclass
class TaskSplit:
    train: Samples
    val: Samples
    test: Samples


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> np.ndarray:
    """Seeded assignment of ``n`` rows to 0=train, 1=val, 2=test."""
    if not np.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ConfigurationError(f"split fractions {fractions} must be non-negative and sum to 1")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B1])).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.empty(n, dtype=np.int8)
    tags[order[:n_train]] = 0
    tags[order[n_train:n_train + n_val]] = 1
    tags[order[n_train + n_val:]] = 2
    return tags


def build_indistinguishability_task(nominal: Samples, adversarial: Samples, seed: int,
                                    fractions=(0.8, 0.1, 0.1)) -> TaskSplit:
    """Label nominal rows 0 and adversarial rows 1, ignoring the physics labels.

    Paired inputs (equal length) keep each nominal/adversarial pair in the
    same partition so no pair straddles train and test.
    """
    if nominal.x.shape[1:] != adversarial.x.shape[1:] or (nominal.mask is None) != (adversarial.mask is None):
        raise ShapeError(f"schemas differ: {nominal.x.shape[1:]} vs {adversarial.x.shape[1:]}")
    nom = Samples(nominal.x, np.zeros(len(nominal)), nominal.mask)
    adv = Samples(adversarial.x, np.ones(len(adversarial)), adversarial.mask)
    if len(nom) == len(adv):
        tags = split_indices(len(nom), seed, fractions)
        tags = np.concatenate([tags, tags])
    else:
        tags = split_indices(len(nom) + len(adv), seed, fractions)
    pool = Samples.concat([nom, adv])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAD5]))
    parts = []
    for k in range(3):
        idx = np.flatnonzero(tags == k)
        parts.append(pool.take(rng.permutation(idx)))
    return TaskSplit(*parts)

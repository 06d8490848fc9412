"""Numpy multilayer perceptrons, Adam, and the FNN / cascaded allocators.

Networks regress ``log1p(y / scale)``: the squared error on that output is
exactly the log-MSE loss on the natural-unit prediction ``expm1(z) * scale``.
Inputs go through an optional per-feature transform (``db`` or ``log1p``)
and are then standardized with statistics stored in the model.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SERVICES
from .errors import DivergenceError, InvalidInputError

FORMAT_TAG = "qosra-model"
FORMAT_VERSION = 1
INIT_MODES = ("he", "unit")


def _tf_db(v):
    return 10.0 * np.log10(np.maximum(v, 1e-300))


_TRANSFORMS = {"id": lambda v: v, "db": _tf_db, "log1p": lambda v: np.log1p(np.maximum(v, 0.0))}


# ---------------------------------------------------------------------------
# model

@dataclass
class MlpModel:
    """Fully connected ReLU net; ``weights[l]`` has shape ``(n_l, n_{l+1})``."""

    layer_sizes: list
    weights: list
    biases: list
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None
    transforms: list | None = None
    out_scale: np.ndarray | None = None
    init: str = "he"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise InvalidInputError("need at least input and output sizes >= 1")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise InvalidInputError("one weight matrix and bias per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[l], self.layer_sizes[l + 1]) or b.shape != (self.layer_sizes[l + 1],):
                raise InvalidInputError(f"layer {l} shapes do not chain")
        n0, nl = self.layer_sizes[0], self.layer_sizes[-1]
        self.in_mean = np.zeros(n0) if self.in_mean is None else np.asarray(self.in_mean, dtype=float)
        self.in_std = np.ones(n0) if self.in_std is None else np.asarray(self.in_std, dtype=float)
        self.out_scale = np.ones(nl) if self.out_scale is None else np.asarray(self.out_scale, dtype=float)
        if self.transforms is None:
            self.transforms = ["id"] * n0
        if len(self.transforms) != n0 or any(t not in _TRANSFORMS for t in self.transforms):
            raise InvalidInputError("one known transform per input feature required")
        if not (np.all(np.isfinite(self.in_mean)) and np.all(np.isfinite(self.in_std)) and np.all(self.in_std > 0)):
            raise InvalidInputError("normalization statistics must be finite with positive spread")
        if self.init not in INIT_MODES:
            raise InvalidInputError(f"init must be one of {INIT_MODES}")

    @classmethod
    def random(cls, layer_sizes, rng: np.random.Generator, init: str = "he", **kw) -> "MlpModel":
        """Gaussian weights, zero biases. ``he`` uses variance 2/fan-in, ``unit`` variance 1."""
        if init not in INIT_MODES:
            raise InvalidInputError(f"init must be one of {INIT_MODES}")
        ws, bs = [], []
        for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
            std = math.sqrt(2.0 / a) if init == "he" else 1.0
            ws.append(rng.normal(0.0, std, size=(a, b)))
            bs.append(np.zeros(b))
        return cls(list(layer_sizes), ws, bs, init=init, **kw)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        s = self.layer_sizes
        return sum(s[l] * s[l + 1] + s[l + 1] for l in range(len(s) - 1))

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.in_mean.copy(), self.in_std.copy(), list(self.transforms), self.out_scale.copy(),
                        self.init, json.loads(json.dumps(self.meta)))

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for j, t in enumerate(self.transforms):
            out[..., j] = _TRANSFORMS[t](x[..., j])
        return out

    def fit_normalization(self, x_raw) -> None:
        z = self.transform(np.atleast_2d(x_raw))
        self.in_mean = z.mean(axis=0)
        sd = z.std(axis=0)
        self.in_std = np.where(sd > 1e-12, sd, 1.0)

    def prepare(self, x_raw) -> np.ndarray:
        return (self.transform(x_raw) - self.in_mean) / self.in_std

    def predict(self, x_raw) -> np.ndarray:
        """Natural-unit outputs ``max(expm1(z), 0) * out_scale``."""
        return np.maximum(np.expm1(forward(self, x_raw)), 0.0) * self.out_scale

    def targets(self, y) -> np.ndarray:
        """Training targets ``log1p(y / out_scale)`` for natural-unit labels."""
        y = np.asarray(y, dtype=float)
        if np.any(y / self.out_scale <= -1):
            raise InvalidInputError("labels must be > -1")
        return np.log1p(y / self.out_scale)

    def parameters(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output for one input vector or a batch (rows)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layer_sizes[0]:
        raise InvalidInputError(f"input width {x.shape[-1]} != {model.layer_sizes[0]}")
    a = model.prepare(x)
    last = model.depth - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if l < last:
            a = np.maximum(a, 0.0)
    return a


def loss_log_mse(pred, label) -> float:
    """Mean of ``(log1p(pred) - log1p(label))**2`` over outputs and batch."""
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise InvalidInputError("pred and label shapes differ")
    if np.any(pred <= -1) or np.any(label <= -1):
        raise InvalidInputError("entries must be > -1")
    return float(np.mean((np.log1p(pred) - np.log1p(label)) ** 2))


def loss_and_grads(model: MlpModel, x_raw, target) -> tuple:
    """Squared error on the raw output against ``target`` and its parameter gradients."""
    a = model.prepare(np.atleast_2d(x_raw))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    acts = [a]
    last = model.depth - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if l < last:
            a = np.maximum(a, 0.0)
        acts.append(a)
    err = acts[-1] - target
    loss = float(np.mean(err**2))
    d = 2.0 * err / err.size
    gw, gb = [None] * model.depth, [None] * model.depth
    for l in range(last, -1, -1):
        gw[l] = acts[l].T @ d
        gb[l] = d.sum(axis=0)
        if l > 0:
            d = (d @ model.weights[l].T) * (acts[l] > 0)
    return loss, gw, gb


# ---------------------------------------------------------------------------
# Adam

@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init: str = "he"
    lr_final: float | None = None  # exponential decay to this rate over ``epochs`` steps

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.eps > 0:
            raise InvalidInputError("rates must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            raise InvalidInputError("rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.init not in INIT_MODES:
            raise InvalidInputError(f"init must be one of {INIT_MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def rate(self, t: int) -> float:
        if self.lr_final is None or self.epochs == 0:
            return self.learning_rate
        frac = min(t, self.epochs) / self.epochs
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac


@dataclass
class AdamState:
    """First/second moments per layer. Layers listed in ``frozen`` are never touched."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0
    frozen: frozenset = frozenset()

    @classmethod
    def zeros(cls, model: MlpModel, frozen=()) -> "AdamState":
        frozen = frozenset(int(l) for l in frozen)
        if any(l < 0 or l >= model.depth for l in frozen):
            raise InvalidInputError("frozen layer index out of range")
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases], [np.zeros_like(b) for b in model.biases], 0, frozen)


def backward_and_adam_step(model: MlpModel, batch: tuple, cfg: TrainConfig, state: AdamState) -> float:
    """One Adam update on ``batch = (x_raw, target)``; returns the pre-update loss.

    ``target`` is in network-output space (see :meth:`MlpModel.targets`).
    """
    x, target = batch
    loss, gw, gb = loss_and_grads(model, x, target)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in gw + gb):
        raise DivergenceError(f"non-finite loss or gradient at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    lr = cfg.rate(state.t)
    for l in range(model.depth):
        if l in state.frozen:
            continue
        for p, g, m, v in ((model.weights[l], gw[l], state.m_w[l], state.v_w[l]),
                           (model.biases[l], gb[l], state.m_b[l], state.v_b[l])):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return loss


def fit(model: MlpModel, x_raw, target, cfg: TrainConfig, rng: np.random.Generator, epochs: int,
        state: AdamState | None = None) -> list:
    """Run ``epochs`` mini-batch steps; one epoch is one batch of ``cfg.batch_size``."""
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if len(x_raw) < 1:
        raise InvalidInputError("need at least one training sample")
    state = state or AdamState.zeros(model)
    m = len(x_raw)
    bs = min(cfg.batch_size, m)
    losses = []
    for _ in range(epochs):
        idx = rng.choice(m, size=bs, replace=False) if bs < m else np.arange(m)
        losses.append(backward_and_adam_step(model, (x_raw[idx], target[idx]), cfg, state))
    return losses


# ---------------------------------------------------------------------------
# samples and the two allocator architectures

@dataclass
class TrainingSample:
    """``x = [alpha_1..alpha_K, c_1..c_K]`` with optimal labels and per-user power curves."""

    x: np.ndarray
    n_star: np.ndarray
    p_star: np.ndarray
    services: tuple
    curves: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.n_star = np.asarray(self.n_star, dtype=np.int64)
        self.p_star = np.asarray(self.p_star, dtype=float)
        k = len(self.services)
        if self.x.shape != (2 * k,) or self.n_star.shape != (k,) or self.p_star.shape != (k,):
            raise InvalidInputError("sample widths do not match the user layout")
        if self.curves is not None:
            self.curves = np.asarray(self.curves, dtype=float)

    @property
    def K(self) -> int:
        return len(self.services)

    @property
    def alpha(self) -> np.ndarray:
        return self.x[: self.K]

    @property
    def c(self) -> np.ndarray:
        return self.x[self.K:]

    @property
    def active(self) -> np.ndarray:
        return self.c > 0


def _stack(samples):
    if not samples:
        raise InvalidInputError("need at least one sample")
    services = samples[0].services
    if any(s.services != services for s in samples):
        raise InvalidInputError("samples mix different user layouts")
    x = np.array([s.x for s in samples])
    n = np.array([s.n_star for s in samples], dtype=float)
    p = np.array([s.p_star for s in samples])
    return services, x, n, p


def slot_permutations(services) -> list:
    """Every relabelling of user slots that only swaps users of the same service."""
    groups = [[k for k, s in enumerate(services) if s == sv] for sv in SERVICES]
    out = []
    for combo in itertools.product(*[itertools.permutations(g) for g in groups]):
        perm = list(range(len(services)))
        for g, pg in zip(groups, combo):
            for a, b in zip(g, pg):
                perm[a] = b
        out.append(np.array(perm))
    return out


def permutation_augment(samples, limit: int = 64) -> list:
    """Samples plus their within-service slot permutations (the optimum is equivariant to them).

    At most ``limit`` permutations per sample are used, identity first. The
    copies are for training only and carry no power curves.
    """
    if not samples:
        return []
    perms = slot_permutations(samples[0].services)[:limit]
    K = samples[0].K
    out = []
    for s in samples:
        for p in perms:
            out.append(TrainingSample(np.r_[s.x[:K][p], s.x[K:][p]], s.n_star[p], s.p_star[p], s.services))
    return out


def phi_ii_tuples(samples, service: str):
    """Per-user training tuples ``([n_k, alpha_k, c_k], p_k)`` of one service (active users only)."""
    rows, ys = [], []
    for s in samples:
        for k, sv in enumerate(s.services):
            if sv == service and s.c[k] > 0 and s.n_star[k] > 0:
                rows.append((float(s.n_star[k]), s.alpha[k], s.c[k]))
                ys.append(s.p_star[k])
    return np.array(rows).reshape(-1, 3), np.array(ys).reshape(-1, 1)


_COUNT_CEIL = 2.0 ** 50


def quantize_bandwidth(fractional, N_max: int) -> np.ndarray:
    """Round half up, floor at zero, then trim to ``N_max`` subcarriers.

    While the sum is too large, the entry with the smallest rounding-up
    margin ``x - (n - 0.5)`` (the one that only just earned its current count)
    loses one subcarrier. On ties the lowest index keeps its count, so the
    highest tied index loses. Inputs are capped at 2**50.
    """
    x = np.asarray(fractional, dtype=float)
    if np.any(np.isnan(x)):
        raise InvalidInputError("fractional counts must not be NaN")
    x = np.minimum(np.maximum(x, 0.0), _COUNT_CEIL)
    n = np.floor(x + 0.5).astype(np.int64)
    excess = int(n.sum()) - int(N_max)
    if excess > len(n):
        # successive trims of entry k cost m_k, m_k + 1, ...; drop every trim below a threshold at once
        m = np.where(n > 0, x - (n - 0.5), np.inf)

        def trims(t):
            return np.minimum(n, np.maximum(0, np.ceil(t - m))).astype(np.int64)

        lo, hi = 0.0, float(n.max()) + 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if trims(mid).sum() <= excess else (lo, mid)
        cut = trims(lo)
        n -= cut
        excess -= int(cut.sum())
    while excess > 0:
        margin = np.where(n > 0, x - (n - 0.5), np.inf)
        k = len(n) - 1 - int(np.argmin(margin[::-1]))
        n[k] -= 1
        excess -= 1
    return n


def _finalize_counts(frac, active, N_max):
    n = quantize_bandwidth(np.where(active, frac, 0.0), N_max)
    # every active user needs at least one subcarrier; borrow from the largest holder
    for k in np.flatnonzero(active & (n == 0)):
        if n.sum() >= N_max:
            j = int(np.argmax(n))
            if n[j] <= 1:
                break
            n[j] -= 1
        n[k] = 1
    return n


def phi_i_transforms(K: int) -> list:
    return ["db"] * K + ["log1p"] * K


PHI_II_TRANSFORMS = ["log1p", "db", "log1p"]


@dataclass
class CascadedModel:
    phi_I: MlpModel
    phi_II: dict
    services: tuple
    N_max: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        K = len(self.services)
        if self.phi_I.layer_sizes[-1] != K or self.phi_I.layer_sizes[0] != 2 * K:
            raise InvalidInputError("phi_I must map 2K features to K counts")
        for sv, net in self.phi_II.items():
            if sv not in SERVICES:
                raise InvalidInputError(f"unknown service {sv!r}")
            if net.layer_sizes[0] != 3 or net.layer_sizes[-1] != 1:
                raise InvalidInputError("phi_II nets map [n, alpha, c] to one power")

    def copy(self) -> "CascadedModel":
        return CascadedModel(self.phi_I.copy(), {k: v.copy() for k, v in self.phi_II.items()}, tuple(self.services),
                             self.N_max, json.loads(json.dumps(self.meta)))

    def allocate(self, x) -> tuple:
        """Integer counts and powers for a batch of feature rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        K = len(self.services)
        active = x[:, K:] > 0
        frac = self.phi_I.predict(x)
        n = np.array([_finalize_counts(frac[i], active[i], self.N_max) for i in range(len(x))])
        p = np.zeros(n.shape)
        for sv, net in self.phi_II.items():
            cols = [k for k, s in enumerate(self.services) if s == sv]
            if not cols:
                continue
            feats = np.stack([n[:, cols], x[:, cols], x[:, [K + c for c in cols]]], axis=-1).reshape(-1, 3)
            p[:, cols] = net.predict(feats).reshape(len(x), len(cols))
        for sv in set(self.services) - set(self.phi_II):
            raise InvalidInputError(f"no phi_II net for service {sv!r}")
        return n, np.where(n > 0, p, 0.0)


def fnn_allocate(model: MlpModel, x, N_max: int) -> tuple:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = model.layer_sizes[-1] // 2
    out = model.predict(x)
    active = x[:, K:] > 0
    n = np.array([_finalize_counts(out[i, :K], active[i], N_max) for i in range(len(x))])
    return n, np.where(n > 0, out[:, K:], 0.0)


def allocate(model, x, N_max: int | None = None) -> tuple:
    """``(n, p)`` predicted by a cascaded model or an FNN."""
    if isinstance(model, CascadedModel):
        return model.allocate(x)
    if N_max is None:
        N_max = int(model.meta["N_max"])
    return fnn_allocate(model, x, N_max)


def train_fnn(samples, hidden=(64, 64), cfg: TrainConfig | None = None, power_unit: float = 1e-3,
              N_max: int | None = None, augment: bool = True) -> MlpModel:
    """Single net ``X -> [N; P]`` trained with the log-MSE loss on both blocks."""
    cfg = cfg or TrainConfig()
    if augment:
        samples = permutation_augment(samples)
    services, x, n, p = _stack(samples)
    K = len(services)
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel.random([2 * K, *hidden, 2 * K], rng, cfg.init, transforms=phi_i_transforms(K),
                            out_scale=np.r_[np.ones(K), np.full(K, power_unit)])
    model.fit_normalization(x)
    losses = fit(model, x, model.targets(np.hstack([n, p])), cfg, rng, cfg.epochs)
    model.meta.update(kind="fnn", services=list(services), N_max=N_max or int(n.sum(axis=1).max()),
                      epochs=cfg.epochs, seed=cfg.seed, final_loss=losses[-1] if losses else None)
    return model


def new_cascaded(services, N_max: int, rng: np.random.Generator, phi_I_hidden=(64, 64),
                 phi_II_hidden=(20, 20, 20, 20), init: str = "he", power_unit: float = 1e-3) -> CascadedModel:
    K = len(services)
    phi_I = MlpModel.random([2 * K, *phi_I_hidden, K], rng, init, transforms=phi_i_transforms(K))
    phi_II = {sv: MlpModel.random([3, *phi_II_hidden, 1], rng, init, transforms=list(PHI_II_TRANSFORMS),
                                  out_scale=np.array([power_unit]))
              for sv in SERVICES if sv in services}
    return CascadedModel(phi_I, phi_II, tuple(services), int(N_max))


@dataclass
class CascadedTrainer:
    """Alternating mini-batch training of ``phi_I`` and every ``phi_II``.

    One epoch is one Adam step on each net. ``frozen`` maps net names
    (``"phi_I"`` or a service) to frozen layer indices.
    """

    model: CascadedModel
    samples: list
    cfg: TrainConfig
    frozen: dict = field(default_factory=dict)
    refit_normalization: bool = True

    def __post_init__(self):
        services, x, n, _ = _stack(self.samples)
        if tuple(services) != tuple(self.model.services):
            raise InvalidInputError("samples do not match the model's user layout")
        self.rng = np.random.default_rng(self.cfg.seed)
        self.x = x
        net_I = self.model.phi_I
        if self.refit_normalization:
            net_I.fit_normalization(x)
        self.t_I = net_I.targets(n)
        self.state_I = AdamState.zeros(net_I, self.frozen.get("phi_I", ()))
        self.data_II = {}
        for sv, net in self.model.phi_II.items():
            xs, ys = phi_ii_tuples(self.samples, sv)
            if len(xs) == 0:
                continue
            if self.refit_normalization:
                net.fit_normalization(xs)
            self.data_II[sv] = (xs, net.targets(ys), AdamState.zeros(net, self.frozen.get(sv, ())))
        self.epochs_done = 0

    def step(self) -> dict:
        out = {"phi_I": self._one(self.model.phi_I, self.x, self.t_I, self.state_I)}
        for sv, (xs, ys, st) in self.data_II.items():
            out[sv] = self._one(self.model.phi_II[sv], xs, ys, st)
        self.epochs_done += 1
        return out

    def _one(self, net, x, t, state):
        m = len(x)
        bs = min(self.cfg.batch_size, m)
        idx = self.rng.choice(m, size=bs, replace=False) if bs < m else np.arange(m)
        return backward_and_adam_step(net, (x[idx], t[idx]), self.cfg, state)

    def run(self, epochs: int, callback=None) -> list:
        losses = []
        for _ in range(epochs):
            losses.append(self.step())
            if callback is not None:
                callback(self.epochs_done, self.model)
        return losses


def train_cascaded(samples, phi_I_hidden=(64, 64), phi_II_hidden=(20, 20, 20, 20), cfg: TrainConfig | None = None,
                   N_max: int | None = None, power_unit: float = 1e-3, callback=None,
                   augment: bool = True) -> CascadedModel:
    """``phi_I`` on ``X -> N*`` and one ``phi_II`` per service on per-user tuples."""
    cfg = cfg or TrainConfig()
    if augment:
        samples = permutation_augment(samples)
    services, _, n, _ = _stack(samples)
    rng = np.random.default_rng(cfg.seed)
    model = new_cascaded(services, N_max or int(n.sum(axis=1).max()), rng, phi_I_hidden, phi_II_hidden,
                         cfg.init, power_unit)
    trainer = CascadedTrainer(model, samples, TrainConfig(**{**cfg.__dict__, "seed": int(rng.integers(2**63))}))
    losses = trainer.run(cfg.epochs, callback)
    model.meta.update(kind="cascaded", epochs=cfg.epochs, seed=cfg.seed,
                      final_loss=losses[-1] if losses else None)
    return model


def flop_count(model, M_T: int | None = None) -> int:
    """Multiplications of one forward pass: ``sum n_l n_{l+1}``; cascaded adds ``M_T`` phi_II passes."""
    if isinstance(model, CascadedModel):
        nets = list(model.phi_II.values())
        if M_T is None:
            M_T = len(nets)
        if not nets:
            return flop_count(model.phi_I)
        per = max(flop_count(n) for n in nets)
        return flop_count(model.phi_I) + M_T * per
    s = model.layer_sizes
    return sum(s[l] * s[l + 1] for l in range(len(s) - 1))


# ---------------------------------------------------------------------------
# persistence

def _fmt(v) -> str:
    return " ".join("%.17g" % float(x) for x in np.ravel(v))


def _net_lines(name: str, net: MlpModel) -> list:
    lines = [f"net {name}", "sizes " + " ".join(map(str, net.layer_sizes)), f"init {net.init}",
             "transforms " + " ".join(net.transforms), "in_mean " + _fmt(net.in_mean),
             "in_std " + _fmt(net.in_std), "out_scale " + _fmt(net.out_scale),
             "meta " + json.dumps(net.meta, sort_keys=True)]
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W {l}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"b {l} " + _fmt(b))
    lines.append("end")
    return lines


def dumps_model(model) -> str:
    if isinstance(model, CascadedModel):
        head = ["kind cascaded", "services " + " ".join(model.services), f"N_max {model.N_max}",
                "meta " + json.dumps(model.meta, sort_keys=True)]
        body = _net_lines("phi_I", model.phi_I)
        for sv in sorted(model.phi_II):
            body += _net_lines(sv, model.phi_II[sv])
    else:
        head, body = ["kind mlp"], _net_lines("net", model)
    return "\n".join([f"{FORMAT_TAG} {FORMAT_VERSION}", *head, *body]) + "\n"


def _floats(s: str) -> np.ndarray:
    return np.array([float(t) for t in s.split()]) if s.strip() else np.zeros(0)


def _parse_net(lines, i):
    def field_(prefix):
        nonlocal i
        line = lines[i]
        if not line.startswith(prefix + " ") and line != prefix:
            raise InvalidInputError(f"model file: expected {prefix!r} at line {i + 1}")
        i += 1
        return line[len(prefix) + 1:]

    sizes = [int(t) for t in field_("sizes").split()]
    init = field_("init")
    transforms = field_("transforms").split()
    in_mean, in_std, out_scale = _floats(field_("in_mean")), _floats(field_("in_std")), _floats(field_("out_scale"))
    meta = json.loads(field_("meta"))
    ws, bs = [], []
    for l in range(len(sizes) - 1):
        field_(f"W {l}")
        ws.append(np.array([_floats(lines[i + r]) for r in range(sizes[l])]).reshape(sizes[l], sizes[l + 1]))
        i += sizes[l]
        bs.append(_floats(field_(f"b {l}")))
    field_("end")
    return MlpModel(sizes, ws, bs, in_mean, in_std, transforms, out_scale, init, meta), i


def loads_model(text: str):
    lines = text.splitlines()
    try:
        tag, version = lines[0].split()
        if tag != FORMAT_TAG:
            raise InvalidInputError("not a model file")
        if int(version) != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported model format version {version}")
        kind = lines[1].split()[1]
        if kind == "mlp":
            if not lines[2].startswith("net "):
                raise InvalidInputError("model file: missing net section")
            net, _ = _parse_net(lines, 3)
            return net
        services = tuple(lines[2].split()[1:])
        N_max = int(lines[3].split()[1])
        meta = json.loads(lines[4][5:])
        i, nets = 5, {}
        while i < len(lines) and lines[i].startswith("net "):
            name = lines[i][4:]
            nets[name], i = _parse_net(lines, i + 1)
        phi_I = nets.pop("phi_I")
        return CascadedModel(phi_I, nets, services, N_max, meta)
    except (IndexError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"malformed model file: {exc}") from exc


def save_model(model, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_text())


def model_digest(model) -> str:
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()[:16]

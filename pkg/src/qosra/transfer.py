"""Fine-tuning, service retargeting and multi-service stacking of trained nets.

Frozen layers are excluded from the optimizer entirely, so their weights and
biases stay bit-identical. Adam moments start from zero for the trainable
layers at every transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SERVICES, SystemConfig
from .errors import InvalidInputError, InvalidPlanError, MissingSourceError
from .evaluation import accuracy_eta
from .neural import (
    AdamState,
    CascadedModel,
    CascadedTrainer,
    MlpModel,
    TrainConfig,
    backward_and_adam_step,
    model_digest,
    phi_i_transforms,
    permutation_augment,
    phi_ii_tuples,
)


def default_frozen(net: MlpModel) -> int:
    """All hidden layers but the last: ``depth - 2`` leading weight layers."""
    return max(0, net.depth - 2)


@dataclass
class TransferPlan:
    """How a source model is adapted.

    ``frozen`` maps a net name (``"phi_I"``, a service name, or ``"net"``
    for a plain MLP) to the number of leading weight layers kept fixed.
    Missing names mean nothing is frozen in that net.
    """

    frozen: dict = field(default_factory=dict)
    replace_output: bool = False
    epochs: int = 0
    eval_every: int = 1
    mode: str = "batch"
    cfg: TrainConfig = field(default_factory=TrainConfig)
    source_digest: str | None = None
    augment: bool = True  # within-service slot permutations of the target samples

    def __post_init__(self):
        if self.mode not in ("batch", "online"):
            raise InvalidInputError("mode must be 'batch' or 'online'")
        if self.epochs < 0 or self.eval_every < 1:
            raise InvalidInputError("epochs >= 0 and eval_every >= 1 required")
        if any(int(v) < 0 for v in self.frozen.values()):
            raise InvalidPlanError("frozen layer counts must be >= 0")

    def check(self, nets: dict) -> None:
        for name, count in self.frozen.items():
            if name not in nets:
                continue
            if count >= nets[name].depth:
                raise InvalidPlanError(f"plan freezes all {nets[name].depth} layers of {name}")

    def to_dict(self) -> dict:
        return {"frozen": dict(self.frozen), "replace_output": self.replace_output, "epochs": self.epochs,
                "eval_every": self.eval_every, "mode": self.mode, "cfg": dict(self.cfg.__dict__),
                "source_digest": self.source_digest, "augment": self.augment}


def _nets(model) -> dict:
    if isinstance(model, CascadedModel):
        return {"phi_I": model.phi_I, **model.phi_II}
    return {"net": model}


def frozen_snapshot(model, plan: TransferPlan) -> dict:
    """Byte copies of every frozen weight/bias block, for bit-identity checks."""
    snap = {}
    for name, net in _nets(model).items():
        for l in range(int(plan.frozen.get(name, 0))):
            snap[(name, l)] = (net.weights[l].tobytes(), net.biases[l].tobytes())
    return snap


def _record_lineage(model, plan: TransferPlan, source, kind: str, epochs: int) -> None:
    meta = model.meta
    lineage = list(meta.get("lineage", []))
    lineage.append({"kind": kind, "source_digest": plan.source_digest or model_digest(source),
                    "frozen": dict(plan.frozen), "epochs": int(epochs), "mode": plan.mode})
    meta["lineage"] = lineage
    meta["plan"] = plan.to_dict()


@dataclass
class TraceRow:
    epoch: int
    eta: float
    samples_used: int


def fine_tune(model, plan: TransferPlan, samples, test_samples=None, system: SystemConfig | None = None) -> tuple:
    """Retrain the unfrozen layers of a copy of ``model`` on target samples.

    Batch mode draws mini-batches from ``samples``; online mode consumes one
    new sample per epoch from the iterable ``samples``. Returns the new model
    and a trace of held-out accuracy (epoch 0 is the untouched copy).
    """
    source = model
    model = model.copy()
    nets = _nets(model)
    plan.check(nets)
    if plan.source_digest is None:
        plan.source_digest = model_digest(source)
    evaluate = test_samples is not None
    if evaluate and system is None:
        raise InvalidInputError("system config required to evaluate accuracy")
    trace = []

    def log(epoch, used):
        if evaluate and (epoch % plan.eval_every == 0 or epoch == plan.epochs):
            trace.append(TraceRow(epoch, accuracy_eta(model, test_samples, system), used))

    frozen = {name: range(int(plan.frozen.get(name, 0))) for name in nets}
    log(0, 0)
    if plan.epochs == 0:
        _record_lineage(model, plan, source, "fine_tune", 0)
        return model, trace
    if plan.mode == "batch":
        samples = list(samples)
        if plan.augment:
            samples = permutation_augment(samples)
        if isinstance(model, CascadedModel):
            trainer = CascadedTrainer(model, samples, plan.cfg, frozen)
            trainer.run(plan.epochs, lambda e, m: log(e, 0))
        else:
            _fit_mlp(model, samples, plan, frozen["net"], log)
    else:
        if not isinstance(model, CascadedModel):
            raise InvalidInputError("online mode is implemented for cascaded models")
        _online(model, iter(samples), plan, frozen, log)
    _record_lineage(model, plan, source, "fine_tune", plan.epochs)
    return model, trace


def _fit_mlp(model: MlpModel, samples, plan, frozen, log):
    x = np.array([s.x for s in samples])
    y = np.hstack([np.array([s.n_star for s in samples], dtype=float), np.array([s.p_star for s in samples])])
    model.fit_normalization(x)
    t = model.targets(y)
    rng = np.random.default_rng(plan.cfg.seed)
    state = AdamState.zeros(model, frozen)
    bs = min(plan.cfg.batch_size, len(x))
    for e in range(1, plan.epochs + 1):
        idx = rng.choice(len(x), size=bs, replace=False) if bs < len(x) else np.arange(len(x))
        backward_and_adam_step(model, (x[idx], t[idx]), plan.cfg, state)
        log(e, 0)


def _online(model: CascadedModel, stream, plan, frozen, log):
    """One freshly labelled sample joins the pool per epoch; batches come from the pool."""
    rng = np.random.default_rng(plan.cfg.seed)
    states = {name: AdamState.zeros(net, frozen[name]) for name, net in _nets(model).items()}
    pool = []
    for e in range(1, plan.epochs + 1):
        try:
            pool.append(next(stream))
        except StopIteration:
            raise InvalidInputError(f"online stream exhausted after {e - 1} samples") from None
        bs = min(plan.cfg.batch_size, len(pool))
        batch = [pool[i] for i in rng.choice(len(pool), size=bs, replace=False)]
        x = np.array([s.x for s in batch])
        n = np.array([s.n_star for s in batch], dtype=float)
        backward_and_adam_step(model.phi_I, (x, model.phi_I.targets(n)), plan.cfg, states["phi_I"])
        for sv, net in model.phi_II.items():
            xs, ys = phi_ii_tuples(batch, sv)
            if len(xs):
                backward_and_adam_step(net, (xs, net.targets(ys)), plan.cfg, states[sv])
        log(e, len(pool))


def retarget_service(source: CascadedModel, target_type: str, plan: TransferPlan, samples,
                     test_samples=None, system: SystemConfig | None = None, phi_II_hidden=None) -> tuple:
    """Reuse a tolerant-service ``phi_I`` for another service with a fresh ``phi_II``.

    If the source already has a ``phi_II`` for ``target_type`` (and no new
    hidden sizes are requested) that net is reused instead. The leading
    ``plan.frozen['phi_I']`` layers (default: all hidden layers but the last)
    stay fixed; the rest of ``phi_I`` and the ``phi_II`` net train.
    """
    if target_type not in SERVICES:
        raise InvalidInputError(f"unknown service {target_type!r}")
    samples = list(samples)
    if not samples:
        raise InvalidInputError("target samples required")
    layout = tuple(samples[0].services)
    if len(layout) != len(source.services):
        raise InvalidInputError("target layout width differs from the source")
    if any(s != target_type for s in layout):
        raise InvalidInputError("target samples must all request the target service")
    template = source.phi_II.get(target_type) or next(iter(source.phi_II.values()))
    if target_type in source.phi_II and phi_II_hidden is None:
        power_net = template.copy()
    else:
        hidden = list(phi_II_hidden) if phi_II_hidden is not None else template.layer_sizes[1:-1]
        rng = np.random.default_rng(plan.cfg.seed)
        power_net = MlpModel.random([3, *hidden, 1], rng, plan.cfg.init, transforms=list(template.transforms),
                                    out_scale=template.out_scale.copy())
    new = CascadedModel(source.phi_I.copy(), {target_type: power_net}, layout, source.N_max, dict(source.meta))
    frozen = dict(plan.frozen)
    frozen.setdefault("phi_I", default_frozen(new.phi_I))
    sub = TransferPlan(frozen, plan.replace_output, plan.epochs, plan.eval_every, plan.mode, plan.cfg,
                       plan.source_digest or model_digest(source), plan.augment)
    out, trace = fine_tune(new, sub, samples, test_samples, system)
    out.meta["lineage"][-1]["kind"] = f"retarget:{target_type}"
    plan.frozen = frozen
    return out, trace


def stack_multi_service(sources: dict, plan: TransferPlan, samples, test_samples=None,
                        system: SystemConfig | None = None) -> tuple:
    """Build a multi-service ``phi_I`` from single-service sources and fine-tune its head.

    Each source ``phi_I`` (keyed by service) must take the features of that
    service's slots in the mixed layout. Its leading ``depth - 2`` layers are
    placed side by side (block diagonal); a fresh hidden layer of the source
    width and a fresh output layer of width ``K`` replace the last two.
    ``plan.frozen['phi_I']`` fixes the reused block (default) or ``0`` fine-tunes
    everything. ``phi_II`` nets are reused unchanged.
    """
    samples = list(samples)
    if not samples:
        raise InvalidInputError("mixed samples required")
    layout = tuple(samples[0].services)
    K = len(layout)
    wanted = [sv for sv in SERVICES if sv in layout]
    for sv in wanted:
        if sv not in sources:
            raise MissingSourceError(f"no source model for service {sv!r}")
    slots = {sv: [k for k, s in enumerate(layout) if s == sv] for sv in wanted}
    for sv in wanted:
        net = sources[sv].phi_I
        if net.layer_sizes[0] != 2 * len(slots[sv]):
            raise InvalidInputError(f"source {sv} expects {net.layer_sizes[0] // 2} users, mix has {len(slots[sv])}")
    if len(wanted) == 1:
        src = sources[wanted[0]]
        single = CascadedModel(src.phi_I.copy(), {k: v.copy() for k, v in src.phi_II.items()}, layout, src.N_max,
                               dict(src.meta))
        return fine_tune(single, plan, samples, test_samples, system)
    depths = {sv: sources[sv].phi_I.depth for sv in wanted}
    if len(set(depths.values())) != 1 or next(iter(depths.values())) < 3:
        raise InvalidInputError("sources need equal depth >= 3 to reuse their early layers")
    reuse = next(iter(depths.values())) - 2
    cfg = plan.cfg
    rng = np.random.default_rng(cfg.seed)

    in_mean, in_std = np.zeros(2 * K), np.ones(2 * K)
    widths = [[2 * K]]
    for l in range(reuse):
        widths.append([sources[sv].phi_I.layer_sizes[l + 1] for sv in wanted])
    sizes = [2 * K] + [sum(w) for w in widths[1:]]
    weights = [np.zeros((sizes[l], sizes[l + 1])) for l in range(reuse)]
    biases = [np.zeros(sizes[l + 1]) for l in range(reuse)]
    for j, sv in enumerate(wanted):
        net = sources[sv].phi_I
        rows = slots[sv] + [K + k for k in slots[sv]]
        in_mean[rows] = net.in_mean
        in_std[rows] = net.in_std
        for l in range(reuse):
            c0 = sum(widths[l + 1][:j])
            c1 = c0 + widths[l + 1][j]
            if l == 0:
                weights[0][rows, c0:c1] = net.weights[0]
            else:
                r0 = sum(widths[l][:j])
                weights[l][r0:r0 + widths[l][j], c0:c1] = net.weights[l]
            biases[l][c0:c1] = net.biases[l]
    head_width = sources[wanted[0]].phi_I.layer_sizes[reuse + 1]
    head = MlpModel.random([sizes[-1], head_width, K], rng, cfg.init)
    phi_I = MlpModel(sizes + [head_width, K], weights + head.weights, biases + head.biases, in_mean, in_std,
                     phi_i_transforms(K), None, cfg.init, {"stacked_from": {sv: model_digest(sources[sv]) for sv in wanted}})
    phi_II = {sv: sources[sv].phi_II[sv].copy() for sv in wanted}
    N_max = max(sources[sv].N_max for sv in wanted)
    stacked = CascadedModel(phi_I, phi_II, layout, N_max, {"kind": "cascaded"})
    frozen = dict(plan.frozen)
    frozen.setdefault("phi_I", reuse)
    for sv in wanted:
        frozen.setdefault(sv, phi_II[sv].depth)  # reused unchanged
    sub = TransferPlan(frozen, True, plan.epochs, plan.eval_every, plan.mode, plan.cfg, plan.source_digest,
                       plan.augment)
    # phi_II nets are entirely fixed, which a plain plan check would reject
    checked = {k: v for k, v in frozen.items() if k == "phi_I"}
    TransferPlan(checked).check({"phi_I": phi_I})
    plan.frozen = frozen
    return _fine_tune_stacked(stacked, sub, samples, test_samples, system)


def _fine_tune_stacked(model: CascadedModel, plan: TransferPlan, samples, test_samples, system):
    source_digest = plan.source_digest or model_digest(model)
    plan.source_digest = source_digest
    evaluate = test_samples is not None
    trace = []

    def log(epoch, used):
        if evaluate and (epoch % plan.eval_every == 0 or epoch == plan.epochs):
            trace.append(TraceRow(epoch, accuracy_eta(model, test_samples, system), used))

    log(0, 0)
    if plan.augment:
        samples = permutation_augment(samples)
    x = np.array([s.x for s in samples])
    n = np.array([s.n_star for s in samples], dtype=float)
    t = model.phi_I.targets(n)
    state = AdamState.zeros(model.phi_I, range(int(plan.frozen.get("phi_I", 0))))
    rng = np.random.default_rng(plan.cfg.seed)
    bs = min(plan.cfg.batch_size, len(x))
    for e in range(1, plan.epochs + 1):
        idx = rng.choice(len(x), size=bs, replace=False) if bs < len(x) else np.arange(len(x))
        backward_and_adam_step(model.phi_I, (x[idx], t[idx]), plan.cfg, state)
        log(e, 0)
    _record_lineage(model, plan, model, "stack", plan.epochs)
    return model, trace


def epochs_to_reach(trace, target: float):
    """First traced epoch whose accuracy is at least ``target`` (``None`` if never)."""
    for row in trace:
        if row.eta >= target:
            return row.epoch
    return None

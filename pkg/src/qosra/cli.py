"""Command-line interface: ``qosra generate | train | transfer | eval | validate-conditions | solve``.

Every subcommand accepts ``--config`` (YAML/JSON document) and repeated
``--set section.key=value`` overrides. Failures print one JSON error record
on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .allocator import PowerTable, Scenario, exhaustive_oracle, greedy_min_total, greedy_min_transmit, validate_conditions
from .config import URLLC, UserSpec, load_config_document, system_from_dict
from .datasets import generate_dataset, load_dataset
from .errors import DigestMismatchError, InvalidInputError, QosraError
from .evaluation import (
    EvalConfig,
    OraclePredictor,
    accuracy_eta,
    power_vs_users,
    qos_violation_curve,
    violation_rows,
    write_jsonl,
    write_tsv,
)
from .neural import TrainConfig, load_model, model_digest, save_model, train_cascaded, train_fnn
from .solver import SolverConfig
from .transfer import TransferPlan, fine_tune, retarget_service, stack_multi_service

SEED_ENV = "QOSRA_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(f"{self.prog}: {message}")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidInputError(f"override {item!r} is not KEY=VALUE")
        out[key] = yaml.safe_load(value)
    return out


def _settings(args):
    s = load_config_document(args.config, _overrides(args.set))
    if args.seed is not None:
        s.seed = args.seed
    elif "seed" not in _overrides(args.set) and os.environ.get(SEED_ENV):
        s.seed = int(os.environ[SEED_ENV])
    return s


def _train_cfg(settings, **extra) -> TrainConfig:
    d = {"seed": settings.seed, **settings.train, **{k: v for k, v in extra.items() if v is not None}}
    return TrainConfig.from_dict(d)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_generate(args):
    s = _settings(args)
    ds = generate_dataset(s.system, s.template, args.count, s.seed, args.workers)
    ds.save(args.out)
    _emit({"out": args.out, "count": len(ds), "feasible": sum(r["feasible"] for r in ds.records),
           "system_digest": ds.header["system_digest"], "digest": ds.digest()})


def cmd_train(args):
    s = _settings(args)
    ds = load_dataset(args.data)
    train, _ = ds.split(args.train_fraction)
    cfg = _train_cfg(s, epochs=args.epochs)
    arch = s.arch
    if args.arch == "fnn":
        model = train_fnn(train, tuple(arch.get("fnn_hidden", (64, 64))), cfg,
                          power_unit=arch.get("power_unit", 1e-3), N_max=ds.system.N_max)
    else:
        model = train_cascaded(train, tuple(arch.get("phi_I_hidden", (64, 64))),
                               tuple(arch.get("phi_II_hidden", (20, 20, 20, 20))), cfg,
                               N_max=ds.system.N_max, power_unit=arch.get("power_unit", 1e-3))
    model.meta.update(system_digest=ds.header["system_digest"], dataset_digest=ds.digest())
    save_model(model, args.out)
    _emit({"out": args.out, "digest": model_digest(model), "samples": len(train)})


def _frozen(pairs) -> dict:
    out = {}
    for item in pairs or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise InvalidInputError(f"--frozen expects NAME=COUNT, got {item!r}")
        out[name] = int(value)
    return out


def _trace_out(path, trace, figure):
    if path:
        write_tsv(path, ["epoch", "eta", "samples_used"], [(r.epoch, r.eta, r.samples_used) for r in trace], figure)


def cmd_transfer(args):
    s = _settings(args)
    ds = load_dataset(args.data)
    train, test = ds.split(args.train_fraction)
    cfg = _train_cfg(s)
    plan = TransferPlan(_frozen(args.frozen), epochs=args.epochs, eval_every=args.eval_every, cfg=cfg)
    if args.mode == "stack":
        sources = {}
        for item in args.source or []:
            sv, _, path = item.partition("=")
            sources[sv] = load_model(path)
        model, trace = stack_multi_service(sources, plan, train, test, ds.system)
        figure = "fig8"
    else:
        source = load_model(args.model)
        if args.mode == "retarget":
            if not args.target_service:
                raise InvalidInputError("--target-service is required for retarget")
            model, trace = retarget_service(source, args.target_service, plan, train, test, ds.system)
            figure = "fig7"
        else:
            model, trace = fine_tune(source, plan, train, test, ds.system)
            figure = "fig6"
    model.meta.update(system_digest=ds.header["system_digest"], dataset_digest=ds.digest())
    save_model(model, args.out)
    _trace_out(args.trace, trace, figure)
    _emit({"out": args.out, "digest": model_digest(model), "final_eta": trace[-1].eta if trace else None})


def cmd_eval(args):
    s = _settings(args)
    ds = load_dataset(args.data)
    _, test = ds.split(args.train_fraction)
    if args.oracle:
        model = OraclePredictor(test)
    else:
        model = load_model(args.model)
        want = model.meta.get("system_digest")
        if want is not None and want != ds.header["system_digest"]:
            raise DigestMismatchError(f"model trained under system {want}, dataset is {ds.header['system_digest']}")
    ecfg = EvalConfig(**s.eval)
    eta = accuracy_eta(model, test, ds.system)
    curve = qos_violation_curve(model, test, ds.system, ecfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = violation_rows(curve)
    write_tsv(out / "fig4_violation.tsv", ["service", "delta_P_times_K", "violation_probability"], rows, "fig4",
              f"{len(test)} test samples")
    write_jsonl(out / "fig4_violation.jsonl", ["service", "delta_P_times_K", "violation_probability"], rows, "fig4")
    summary = {"eta": eta, "test_samples": len(test), "violation_at_zero": curve["all"][0][1]}
    if not args.oracle and not args.skip_users:
        pvu = power_vs_users(model, test, ds.system)
        write_tsv(out / "fig5_power_vs_users.tsv", ["K", "optimal_total_W", "model_total_W", "mean_gap"], pvu, "fig5")
        summary["power_gap_full"] = pvu[-1][3]
    _emit(summary)


def cmd_validate(args):
    s = _settings(args)
    rng = np.random.default_rng(s.seed)
    rows, bad = [], 0
    for nt in args.nt:
        cfg = s.system.with_(N_T=nt, N_max=max(s.system.N_max, 200))
        user = UserSpec(URLLC, args.alpha, packet_bits=args.packet_bits, eps_max=args.eps_max)
        closed = validate_conditions(user, range(1, 3), cfg, closed_form=True)
        top = args.n_max or closed.n_acute
        for mode in ("closed_form", "monte_carlo"):
            rep = validate_conditions(user, range(1, top + 1), cfg, rng=rng, draws=args.draws,
                                      closed_form=mode == "closed_form")
            bad += len(rep.cond1_violations) + len(rep.cond2_violations)
            rows += [(nt, mode, n, p, d) for n, p, d in rep.rows()]
            _emit({"N_T": nt, "mode": mode, "n_acute": rep.n_acute, "cond1_violations": rep.cond1_violations,
                   "cond2_violations": rep.cond2_violations})
    if args.out:
        write_tsv(args.out, ["N_T", "mode", "n", "power_W", "delta_W"], rows, "fig3",
                  f"URLLC, B={args.packet_bits} bits, alpha={args.alpha}")
    if bad:
        raise QosraError(f"{bad} condition violations")


def _system_keys(section: dict) -> list:
    """SystemConfig field names set by a (possibly unit-suffixed) system section."""
    from .config import _UNIT_KEYS

    return [_UNIT_KEYS[k][0] if k in _UNIT_KEYS else k for k in section]


def _scenario(doc: dict, settings):
    overrides = system_from_dict(doc.get("system", {})).to_dict()
    given = {k: overrides[k] for k in _system_keys(doc.get("system", {}))}
    system = settings.system.with_(**given)
    users = [UserSpec.from_dict(u) for u in doc["users"]]
    scn = Scenario(users, system)
    if "gain" in doc:
        pools = np.full((len(users), 1, system.N_max), float(doc["gain"]))
    else:
        rng = np.random.default_rng(doc.get("seed", settings.seed))
        pools = rng.standard_gamma(system.N_T, size=(len(users), int(doc.get("draws", 1000)), system.N_max))
    return scn, PowerTable(scn, pools=pools, sol=SolverConfig(**settings.solver))


def cmd_solve(args):
    s = _settings(args)
    try:
        doc = json.loads(Path(args.scenario).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed scenario file: {exc}") from exc
    scn, table = _scenario(doc, s)
    if args.oracle:
        res = exhaustive_oracle(scn, args.objective, table=table)
    elif args.objective == "transmit":
        res = greedy_min_transmit(scn, table=table)
    else:
        res = greedy_min_total(scn, table=table)
    _emit({"n": res.alloc.n.tolist(), "p": res.alloc.p.tolist(), "feasible": res.feasible,
           "total_power": res.total_power, "transmit_power": res.transmit_power, "limiting": res.limiting,
           "objective": res.objective})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qosra", description="QoS-aware OFDMA resource allocation with cascaded neural nets")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON configuration document")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. system.N_T=16")
        sp.add_argument("--seed", type=int, help=f"seed (default from ${SEED_ENV}, else config)")

    g = sub.add_parser("generate", help="generate a labelled dataset")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a cascaded model or the FNN baseline")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--arch", choices=("cascaded", "fnn"), default="cascaded")
    t.add_argument("--epochs", type=int)
    t.add_argument("--train-fraction", type=float, default=0.9)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="fine-tune, retarget or stack trained models")
    common(x)
    x.add_argument("--mode", choices=("finetune", "retarget", "stack"), default="finetune")
    x.add_argument("--model", help="source model (finetune, retarget)")
    x.add_argument("--source", action="append", metavar="SERVICE=PATH", help="source per service (stack)")
    x.add_argument("--target-service")
    x.add_argument("--data", required=True)
    x.add_argument("--frozen", action="append", metavar="NET=COUNT")
    x.add_argument("--epochs", type=int, default=500)
    x.add_argument("--eval-every", type=int, default=25)
    x.add_argument("--train-fraction", type=float, default=0.9)
    x.add_argument("--trace", help="accuracy trace TSV")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="accuracy, violation curve and power-vs-users tables")
    common(e)
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--oracle", action="store_true", help="use the labels as predictions")
    e.add_argument("--train-fraction", type=float, default=0.9)
    e.add_argument("--skip-users", action="store_true")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate-conditions", help="check Conditions 1-2 for URLLC users")
    common(v)
    v.add_argument("--nt", type=int, nargs="+", default=[4, 8, 16])
    v.add_argument("--alpha", type=float, default=1e-11)
    v.add_argument("--packet-bits", type=float, default=160.0)
    v.add_argument("--eps-max", type=float, default=5e-8)
    v.add_argument("--n-max", type=int, help="largest n checked (default: closed-form minimiser)")
    v.add_argument("--draws", type=int, default=10000)
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate)

    so = sub.add_parser("solve", help="allocate subcarriers and power for one scenario file")
    common(so)
    so.add_argument("--scenario", required=True)
    so.add_argument("--objective", choices=("total", "transmit"), default="total")
    so.add_argument("--oracle", action="store_true", help="exhaustive search instead of greedy")
    so.set_defaults(func=cmd_solve)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except QosraError as exc:
        print(json.dumps(exc.to_record(), sort_keys=True), file=sys.stderr)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(json.dumps({"error": "invalid-input", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())

"""Labelled dataset generation and line-delimited persistence.

A dataset file holds one JSON header line followed by one JSON record per
sample. Record ``i`` is generated from ``SeedSequence([seed, i])`` alone, so
it is the same whichever worker produces it, and it can be replayed.
Floats are written with ``repr`` (shortest exact round trip), keys sorted,
so ``save(load(f))`` reproduces ``f`` byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocator import PowerTable, Scenario, greedy_min_total
from .channel import ChannelParams, large_scale_gain, place_users
from .config import SENSITIVE, SERVICES, TOLERANT, URLLC, DatasetTemplate, SystemConfig, UserSpec
from .errors import DigestMismatchError, InvalidInputError, QosraError
from .neural import TrainingSample

SCHEMA = "qosra-dataset"
SCHEMA_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _curve_out(c):
    return [None if not math.isfinite(v) else float(v) for v in c]


def _curve_in(c):
    return np.array([math.inf if v is None else v for v in c], dtype=float)


def draw_users(template: DatasetTemplate, rng: np.random.Generator, N_T: int) -> list:
    """Users of one record: placement, shadowing, traffic, activity, in that draw order."""
    params = ChannelParams(cell_radius=template.cell_radius, shadowing_sigma=template.shadowing_sigma,
                           N_T=N_T, min_distance=template.min_distance)
    K = len(template.users)
    dist = place_users(K, params, rng)
    alpha = [large_scale_gain(d, params, rng) for d in dist]
    users = []
    for k, sv in enumerate(template.users):
        on = bool(rng.random() < template.active_probability)
        if sv == TOLERANT:
            rate = rng.uniform(*template.arrival_rate)
            users.append(UserSpec(TOLERANT, alpha[k], arrival_rate=rate if on else 0.0))
        elif sv == SENSITIVE:
            nu_a = rng.uniform(*template.nu_a)
            size = rng.uniform(*template.packet_size)
            users.append(UserSpec(SENSITIVE, alpha[k], nu_a=nu_a if on else 0.0, nu_s=1.0 / size,
                                  delay_bound=template.delay_bound, eps_q=template.eps_q))
        elif sv == URLLC:
            bits = rng.uniform(*template.packet_bits)
            users.append(UserSpec(URLLC, alpha[k], packet_bits=bits if on else 0.0, eps_max=template.eps_max))
        else:
            raise InvalidInputError(f"unknown service {sv!r} in template")
    return users


def features(users) -> list:
    return [u.alpha for u in users] + [u.feature for u in users]


def label_record(cfg: SystemConfig, template: DatasetTemplate, seed: int, index: int) -> dict:
    """Generate and label record ``index``; solver failures are recorded, not raised."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    users = draw_users(template, rng, cfg.N_T)
    K = len(users)
    pools = rng.standard_gamma(cfg.N_T, size=(K, template.draws, cfg.N_max))
    rec = {"index": int(index), "seed": [int(seed), int(index)], "users": [u.to_dict() for u in users],
           "x": features(users), "error": None}
    try:
        scn = Scenario(users, cfg)
        table = PowerTable(scn, pools=pools)
        res = greedy_min_total(scn, table=table)
        rec.update(n_star=[int(v) for v in res.alloc.n], p_star=[float(v) for v in res.alloc.p],
                   feasible=bool(res.feasible), total_power=float(res.total_power),
                   transmit_power=float(res.transmit_power) if math.isfinite(res.transmit_power) else None,
                   limiting=res.limiting, curves=[_curve_out(table.curve(k)) for k in range(K)])
    except QosraError as exc:
        rec.update(n_star=None, p_star=None, feasible=False, total_power=None, transmit_power=None,
                   limiting=None, curves=None, error=exc.to_record())
    return rec


def _label_star(args):
    return label_record(*args)


@dataclass
class Dataset:
    header: dict
    records: list

    @property
    def system(self) -> SystemConfig:
        return SystemConfig(**self.header["system"])

    @property
    def template(self) -> DatasetTemplate:
        return DatasetTemplate.from_dict(self.header["template"])

    @property
    def services(self) -> tuple:
        return tuple(self.header["layout"])

    def __len__(self) -> int:
        return len(self.records)

    def dumps(self) -> str:
        return "".join(_dumps(obj) + "\n" for obj in [self.header, *self.records])

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def split_indices(self, train_fraction: float = 0.9) -> tuple:
        """Index split: the first ``train_fraction`` of records train, the rest test."""
        cut = int(round(train_fraction * len(self.records)))
        return range(0, cut), range(cut, len(self.records))

    def samples(self, indices=None, feasible_only: bool = True) -> list:
        indices = range(len(self.records)) if indices is None else indices
        out = []
        for i in indices:
            r = self.records[i]
            if feasible_only and not r["feasible"]:
                continue
            if r["n_star"] is None:
                continue
            out.append(TrainingSample(r["x"], r["n_star"], r["p_star"], self.services,
                                      np.array([_curve_in(c) for c in r["curves"]])))
        return out

    def split(self, train_fraction: float = 0.9) -> tuple:
        """Feasible training and test samples of the index split."""
        tr, te = self.split_indices(train_fraction)
        return self.samples(tr), self.samples(te)

    def check_system(self, digest: str) -> None:
        if digest != self.header["system_digest"]:
            raise DigestMismatchError(
                f"system digest {digest} does not match dataset digest {self.header['system_digest']}")


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise InvalidInputError("empty dataset file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line]
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed dataset file: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise InvalidInputError("not a dataset file")
    if header.get("version") != SCHEMA_VERSION:
        raise InvalidInputError(f"unsupported dataset schema version {header.get('version')}")
    ds = Dataset(header, records)
    if SystemConfig(**header["system"]).digest() != header["system_digest"]:
        raise DigestMismatchError("dataset header digest does not match its system section")
    if len(records) != header["count"]:
        raise InvalidInputError(f"header announces {header['count']} records, found {len(records)}")
    return ds


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())


def generate_dataset(cfg: SystemConfig, template: DatasetTemplate, count: int, seed: int,
                     workers: int = 1) -> Dataset:
    """Draw ``count`` inputs from ``template`` and label each with the total-power greedy."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    for sv in template.users:
        if sv not in SERVICES:
            raise InvalidInputError(f"unknown service {sv!r} in template")
    jobs = [(cfg, template, seed, i) for i in range(count)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_label_star, jobs, chunksize=max(1, count // (4 * workers))))
    else:
        records = [_label_star(j) for j in jobs]
    ratio = {sv: sum(1 for s in template.users if s == sv) for sv in SERVICES}
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "system": cfg.to_dict(),
              "system_digest": cfg.digest(), "template": template.to_dict(), "seed": int(seed),
              "count": int(count), "layout": list(template.users), "service_ratio": ratio}
    # normalise floats through the text form so in-memory and loaded datasets agree exactly
    return loads_dataset(Dataset(header, records).dumps())


def replay_record(ds: Dataset, index: int) -> dict:
    """Regenerate record ``index`` from the dataset header and its stored seed."""
    rec = ds.records[index]
    return json.loads(_dumps(label_record(ds.system, ds.template, rec["seed"][0], rec["seed"][1])))

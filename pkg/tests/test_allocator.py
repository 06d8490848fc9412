import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qosra.allocator import (
    PowerTable,
    Scenario,
    exhaustive_oracle,
    greedy_min_total,
    greedy_min_transmit,
    qos_residuals,
    validate_conditions,
)
from qosra.config import SENSITIVE, TOLERANT, URLLC, SystemConfig, UserSpec
from qosra.errors import InvalidInputError, OracleBudgetError


def mixed_users(rng):
    a = 10 ** rng.uniform(-13, -11, 3)
    return [UserSpec(TOLERANT, a[0], arrival_rate=rng.uniform(4e5, 8e5)),
            UserSpec(SENSITIVE, a[1], nu_a=rng.uniform(100, 1000), nu_s=1 / rng.uniform(1e3, 5e3)),
            UserSpec(URLLC, a[2], packet_bits=rng.uniform(160, 512))]


def frozen_table(scn, g=64.0):
    return PowerTable(scn, pools=np.full((scn.K, 1, scn.cfg.N_max), g))


def test_single_user_matches_scan():
    cfg = SystemConfig(N_max=12)
    scn = Scenario([UserSpec(TOLERANT, 1e-12, arrival_rate=6e5)], cfg)
    table = frozen_table(scn)
    res = greedy_min_total(scn, table=table)
    curve = table.curve(0)
    totals = curve / cfg.rho + cfg.P_ca * cfg.N_T * np.arange(1, 13) + cfg.P_0c
    assert res.alloc.n[0] == int(np.argmin(totals)) + 1
    assert res.total_power == pytest.approx(totals.min(), rel=1e-12)


def test_identical_users_split_evenly():
    cfg = SystemConfig(N_max=9)
    u = UserSpec(TOLERANT, 1e-12, arrival_rate=6e5)
    scn = Scenario([u, u], cfg)
    res = greedy_min_transmit(scn, table=frozen_table(scn))
    assert abs(int(res.alloc.n[0]) - int(res.alloc.n[1])) <= 1


@pytest.mark.parametrize("seed", range(5))
def test_greedy_matches_oracle(seed):
    cfg = SystemConfig(N_max=9)
    scn = Scenario(mixed_users(np.random.default_rng(seed)), cfg)
    table = frozen_table(scn)
    for objective, fn in (("transmit", greedy_min_transmit), ("total", greedy_min_total)):
        g = fn(scn, table=table)
        o = exhaustive_oracle(scn, objective, table=table)
        key = "transmit_power" if objective == "transmit" else "total_power"
        assert getattr(g, key) == pytest.approx(getattr(o, key), abs=1e-6)
        assert g.feasible == o.feasible


def test_zero_circuit_power_reduces_to_transmit():
    cfg = SystemConfig(N_max=10, P_ca=0.0)
    scn = Scenario(mixed_users(np.random.default_rng(8)), cfg)
    table = frozen_table(scn)
    assert greedy_min_total(scn, table=table).alloc.n.tolist() == greedy_min_transmit(scn, table=table).alloc.n.tolist()
    t = exhaustive_oracle(scn, "transmit", table=table)
    o = exhaustive_oracle(scn, "total", table=table)
    assert o.total_power == pytest.approx(t.transmit_power / cfg.rho + cfg.P_0c, rel=1e-12)


def test_huge_circuit_power_keeps_one_each():
    cfg = SystemConfig(N_max=10, P_ca=1e3)
    users = [UserSpec(TOLERANT, 1e-10, arrival_rate=1e5), UserSpec(URLLC, 1e-10, packet_bits=160)]
    scn = Scenario(users, cfg)
    res = greedy_min_total(scn, table=frozen_table(scn))
    assert res.alloc.n.tolist() == [1, 1]
    assert res.feasible


def test_repair_restores_transmit_cap():
    # a high circuit cost keeps counts low, which here breaks the transmit cap until repair adds carriers
    cfg = SystemConfig(N_max=12, P_ca=0.5, P_max=0.5)
    users = [UserSpec(TOLERANT, 1e-13, arrival_rate=8e5), UserSpec(TOLERANT, 1e-13, arrival_rate=8e5)]
    scn = Scenario(users, cfg)
    table = frozen_table(scn)
    res = greedy_min_total(scn, table=table)
    oracle = exhaustive_oracle(scn, "total", table=table)
    assert res.meta["repair_steps"] > 0
    assert res.feasible and res.transmit_power <= cfg.P_max
    assert res.total_power == pytest.approx(oracle.total_power, abs=1e-6)


def test_infeasible_when_subcarriers_short():
    cfg = SystemConfig(N_max=2)
    users = [UserSpec(TOLERANT, 1e-12, arrival_rate=1e5)] * 3
    scn = Scenario(users, cfg)
    res = greedy_min_total(scn, table=frozen_table(scn))
    assert not res.feasible and res.limiting == "subcarriers"


def test_inactive_users_get_nothing():
    cfg = SystemConfig(N_max=8)
    users = [UserSpec(TOLERANT, 1e-12, arrival_rate=5e5), UserSpec(URLLC, 1e-12)]
    scn = Scenario(users, cfg)
    res = greedy_min_total(scn, table=frozen_table(scn))
    assert res.alloc.n[1] == 0 and res.alloc.p[1] == 0


def test_oracle_budget():
    cfg = SystemConfig(N_max=64)
    scn = Scenario(mixed_users(np.random.default_rng(0)), cfg)
    with pytest.raises(OracleBudgetError):
        exhaustive_oracle(scn, "total", table=frozen_table(scn), budget=1000)
    with pytest.raises(InvalidInputError):
        exhaustive_oracle(scn, "energy", table=frozen_table(scn))


def test_monte_carlo_result_meets_qos():
    cfg = SystemConfig(N_max=16)
    scn = Scenario(mixed_users(np.random.default_rng(2)), cfg)
    table = PowerTable(scn, pools=np.random.default_rng(0).standard_gamma(cfg.N_T, size=(3, 200, 16)))
    res = greedy_min_total(scn, table=table)
    assert res.feasible
    assert np.all(qos_residuals(res) <= 1e-9)


def test_from_curves_reproduces_allocation():
    cfg = SystemConfig(N_max=16)
    scn = Scenario(mixed_users(np.random.default_rng(4)), cfg)
    table = PowerTable(scn, pools=np.random.default_rng(1).standard_gamma(cfg.N_T, size=(3, 100, 16)))
    a = greedy_min_total(scn, table=table)
    b = greedy_min_total(scn, table=PowerTable.from_curves(scn, [table.curve(k) for k in range(3)]))
    assert a.alloc.n.tolist() == b.alloc.n.tolist()
    assert a.total_power == b.total_power


def test_sgd_table_is_repeatable():
    cfg = SystemConfig(N_max=4)
    scn = Scenario([UserSpec(TOLERANT, 1e-12, arrival_rate=5e5)], cfg)
    a = PowerTable(scn, method="sgd", seed=3).power(0, 2)
    b = PowerTable(scn, method="sgd", seed=3).power(0, 2)
    assert a == b


@given(st.integers(0, 2**32 - 1), st.integers(3, 10))
def test_greedy_invariants(seed, n_max):
    cfg = SystemConfig(N_max=n_max)
    scn = Scenario(mixed_users(np.random.default_rng(seed)), cfg)
    res = greedy_min_total(scn, table=frozen_table(scn))
    assert int(res.alloc.n.sum()) <= n_max
    assert np.all(res.alloc.n >= 1)
    if res.feasible:
        assert res.transmit_power <= cfg.P_max
    tx = greedy_min_transmit(scn, table=res.table)
    if tx.feasible and res.feasible:
        # the transmit objective never spends more radiated power than the total-power optimum
        assert tx.transmit_power <= res.transmit_power + 1e-12


# ---------------------------------------------------------------- Conditions 1 and 2

def test_conditions_closed_form_exact(cfg):
    u = UserSpec(URLLC, 1e-12, packet_bits=160)
    n_acute = validate_conditions(u, range(1, 3), cfg, closed_form=True).n_acute
    rep = validate_conditions(u, range(1, n_acute + 1), cfg, closed_form=True)
    assert rep.ok
    assert np.all(rep.delta > 0)
    assert np.all(np.diff(rep.delta) <= 0)
    # past the minimiser Condition 1 fails
    over = validate_conditions(u, range(1, n_acute + 3), cfg, closed_form=True)
    assert n_acute in over.cond1_violations


def test_conditions_tolerant_frozen(cfg):
    u = UserSpec(TOLERANT, 1e-12, arrival_rate=6e5)
    rep = validate_conditions(u, range(1, 30), cfg, pool=np.full((1, 1), 64.0))
    assert rep.ok
    assert np.all(rep.delta > 0) and np.all(np.diff(rep.delta) < 0)


def test_conditions_monte_carlo_small():
    cfg = SystemConfig(N_T=8)
    u = UserSpec(URLLC, 1e-12, packet_bits=160)
    rep = validate_conditions(u, range(1, 11), cfg, rng=np.random.default_rng(0), draws=5000)
    assert rep.ok
    assert rep.sigma_delta.shape == (9,) and rep.sigma_second.shape == (8,)
    assert np.all(rep.sigma_delta > 0)
    assert len(list(rep.rows())) == 10


def test_conditions_input_checks(cfg):
    u = UserSpec(URLLC, 1e-12, packet_bits=160)
    with pytest.raises(InvalidInputError):
        validate_conditions(u, [3], cfg, closed_form=True)
    with pytest.raises(InvalidInputError):
        validate_conditions(u, [1, 3], cfg, closed_form=True)
    with pytest.raises(InvalidInputError):
        validate_conditions(UserSpec(TOLERANT, 1e-12, arrival_rate=1.0), range(1, 4), cfg, closed_form=True)
    with pytest.raises(InvalidInputError):
        validate_conditions(u, range(1, 4), cfg)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qosra.config import SENSITIVE, TOLERANT, URLLC, Allocation, SystemConfig, UserSpec
from qosra.errors import InvalidInputError
from qosra.qos import (
    avg_rate_tolerant,
    effective_bandwidth,
    effective_capacity,
    q_function,
    q_inverse,
    qos_exponent,
    qos_residual,
    total_power,
    urllc_error_prob,
)

# frozen oracle values, evaluated independently with stdlib math
THETA_EX = 0.00047944701622320646
EB_EX = 192103.40371976182
QINV_5E8 = 5.326723886384496  # bisection on erfc to machine precision


def _sens(**kw):
    base = dict(nu_a=100.0, nu_s=1e-3, delay_bound=0.05, eps_q=1e-2)
    base.update(kw)
    return UserSpec(SENSITIVE, 1e-12, **base)


def _Q(x):
    return 0.5 * math.erfc(x / math.sqrt(2.0))


# ---------------------------------------------------------------- tolerant rate

def test_rate_zero_power(cfg):
    u = UserSpec(TOLERANT, 1e-12, arrival_rate=1e5)
    assert avg_rate_tolerant(u, 3, 0.0, np.ones((2, 3)), cfg) == 0.0


def test_rate_unit_snr():
    cfg = SystemConfig(N_T=1)
    alpha = 1e-12
    p = cfg.N_0 * cfg.W / alpha
    u = UserSpec(TOLERANT, alpha, arrival_rate=1.0)
    assert avg_rate_tolerant(u, 1, p, 1.0, cfg) == pytest.approx(cfg.W, rel=1e-12)


def test_rate_against_high_precision_monte_carlo(cfg):
    u = UserSpec(TOLERANT, 1e-12, arrival_rate=1.0)
    g = np.random.default_rng(0).standard_gamma(64, size=(10000, 4))
    val = avg_rate_tolerant(u, 4, 1.0, g, cfg)
    big = np.random.default_rng(99).standard_gamma(64, size=1_000_000)
    snr = 1e-12 / (cfg.N_0 * 64 * 4 * cfg.W)
    oracle = 4 * cfg.W * np.mean(np.log2(1 + snr * big))
    assert val == pytest.approx(oracle, rel=0.01)


# ---------------------------------------------------------------- QoS exponent

def test_theta_example():
    assert qos_exponent(_sens()) == pytest.approx(THETA_EX, rel=1e-12)
    assert qos_exponent(_sens()) == pytest.approx(4.794e-4, rel=1e-3)


def test_effective_bandwidth_example():
    assert effective_bandwidth(_sens()) == pytest.approx(EB_EX, rel=1e-12)
    assert effective_bandwidth(_sens()) == pytest.approx(1.921e5, rel=1e-3)


def test_theta_limits():
    assert qos_exponent(_sens(eps_q=1 - 1e-12)) < 1e-12
    assert qos_exponent(_sens(delay_bound=1e9)) < 1e-12
    u = _sens(eps_q=1 - 1e-15)
    assert effective_bandwidth(u) == pytest.approx(u.nu_a / u.nu_s, rel=1e-9)


@given(st.floats(100, 1000), st.floats(1e3, 20e3), st.floats(1e-3, 1.0), st.floats(1e-6, 0.5))
def test_exponent_round_trip(nu_a, size, D, eps):
    u = _sens(nu_a=nu_a, nu_s=1 / size, delay_bound=D, eps_q=eps)
    th, eb = qos_exponent(u), effective_bandwidth(u)
    assert abs(math.exp(-th * eb * D) - eps) / eps < 1e-9
    assert eb >= u.nu_a / u.nu_s


# ---------------------------------------------------------------- effective capacity

def test_ec_zero_power(cfg):
    assert effective_capacity(_sens(), 2, 0.0, np.ones((3, 2)), cfg) == 0.0


def test_ec_deterministic_channel(cfg):
    u = _sens()
    n, p = 3, 0.5
    snr = u.alpha * p / (cfg.snr_gap * cfg.N_0 * cfg.N_T * n * cfg.W)
    assert effective_capacity(u, n, p, np.ones((1, 1)), cfg) == pytest.approx(n * cfg.W * math.log2(1 + snr), rel=1e-12)


def test_ec_small_theta_limit(cfg):
    u = _sens()
    g = np.random.default_rng(3).standard_gamma(cfg.N_T, size=(20000, 1))
    ec = effective_capacity(u, 4, 1.0, g, cfg, theta=1e-9)
    gap_rate = avg_rate_tolerant(UserSpec(TOLERANT, u.alpha, arrival_rate=1.0), 4, 1.0, g, cfg, gap=cfg.snr_gap)
    assert ec == pytest.approx(gap_rate, rel=0.01)


@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0))
def test_ec_never_exceeds_gap_rate(p1, p2):
    cfg = SystemConfig()
    u = _sens()
    g = np.random.default_rng(7).standard_gamma(cfg.N_T, size=(500, 1))
    lo, hi = sorted((p1, p2))
    ec_lo, ec_hi = effective_capacity(u, 2, lo, g, cfg), effective_capacity(u, 2, hi, g, cfg)
    assert ec_lo <= ec_hi * (1 + 1e-12)
    gap_rate = avg_rate_tolerant(UserSpec(TOLERANT, u.alpha, arrival_rate=1.0), 2, hi, g, cfg, gap=cfg.snr_gap)
    assert ec_hi <= gap_rate * (1 + 1e-9)


# ---------------------------------------------------------------- URLLC

def test_q_inverse_values():
    assert q_inverse(0.5) == pytest.approx(0.0, abs=1e-15)
    assert q_inverse(5e-8) == pytest.approx(QINV_5E8, rel=1e-12)
    with pytest.raises(InvalidInputError):
        q_inverse(0.0)


@pytest.mark.parametrize("e", [10.0**-k for k in range(1, 10)])
def test_q_round_trip(e):
    assert float(q_function(q_inverse(e))) == pytest.approx(e, rel=1e-9)


def test_urllc_single_draw_closed_form():
    # T_s W = 15 and SNR = 10 on one subcarrier with unit gain
    cfg = SystemConfig(N_T=1, W=120e3, T_s=15 / 120e3)
    for bits in (160.0, 16.0):
        u = UserSpec(URLLC, 1e-12, packet_bits=bits)
        p = 10 * cfg.N_0 * cfg.W / u.alpha
        want = _Q(math.sqrt(15) * (math.log(11) - bits * math.log(2) / 15))
        assert urllc_error_prob(u, 1, p, 1.0, cfg) == pytest.approx(want, abs=1e-12)


def test_urllc_limits(cfg):
    u = UserSpec(URLLC, 1e-12, packet_bits=160)
    g = np.full((1, 2), 64.0)
    assert urllc_error_prob(u, 2, 0.0, g, cfg) == pytest.approx(1.0, abs=1e-12)
    assert urllc_error_prob(u, 2, 1e12, g, cfg) < 1e-30
    with pytest.raises(InvalidInputError):
        urllc_error_prob(u, 3, 1.0, g, cfg)


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_urllc_error_monotone_in_power(p1, p2):
    cfg = SystemConfig()
    u = UserSpec(URLLC, 1e-12, packet_bits=300)
    g = np.random.default_rng(1).standard_gamma(64, size=(300, 3))
    lo, hi = sorted((p1, p2))
    assert urllc_error_prob(u, 3, hi, g, cfg) <= urllc_error_prob(u, 3, lo, g, cfg)


# ---------------------------------------------------------------- power model

def test_total_power_idle(cfg):
    assert total_power(Allocation([0, 0], [0.0, 0.0]), cfg) == pytest.approx(cfg.P_0c)


def test_total_power_example():
    cfg = SystemConfig(N_T=64, N_max=256, rho=0.5, P_0c=0.05)
    assert cfg.P_ca == pytest.approx(0.05 / 256)
    alloc = Allocation([128, 128], [0.25, 0.75])
    assert total_power(alloc, cfg) == pytest.approx(5.25, rel=1e-12)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.integers(0, 40))
def test_total_power_linear_in_p(ps, nsum):
    cfg = SystemConfig()
    n = [nsum] + [0] * (len(ps) - 1)
    a = total_power(Allocation(n, ps), cfg)
    b = total_power(Allocation(n, [2 * v for v in ps]), cfg)
    assert b - a == pytest.approx(sum(ps) / cfg.rho, rel=1e-9, abs=1e-12)


def test_residual_inactive(cfg):
    assert qos_residual(UserSpec(TOLERANT, 1e-12), 1, 0.0, 1.0, cfg) == -1.0

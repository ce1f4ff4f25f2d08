import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dscontrol.scenarios import (FaultScenario, Ranges, build_matrix, extract_window, label_tis,
                                 resilience, resilience_from_series, run_batch, sample_scenario,
                                 scenario_for, tis_from_angles, window_columns)
from dscontrol.sim import FEATURES, SimConfig, SimTrace, switching_flags


def synthetic_trace(delta_deg, s_load=None, cfg=SimConfig(), sc=None):
    n, ng = delta_deg.shape
    t = np.arange(n) * cfg.sample_period
    ones = np.ones((n, ng))
    if sc is not None:
        on, flt = switching_flags(t, cfg, sc.disturbance())
    else:
        on, flt = np.ones(n, np.int8), np.zeros(n, np.int8)
    return SimTrace(time=t, delta_deg=delta_deg, omega=ones, i_d=ones, i_q=ones, v_d=ones,
                    v_q=ones, t_e=ones, p_g=ones, q_g=ones,
                    s_load=np.ones(n) if s_load is None else s_load,
                    line_status=on, fault_status=flt)


# --- sampling -------------------------------------------------------------

def test_sampling_deterministic():
    assert sample_scenario(123) == sample_scenario(123)
    assert scenario_for(9, 4) == scenario_for(9, 4)
    assert scenario_for(9, 4) != scenario_for(9, 5)


@pytest.fixture(scope="module")
def draws():
    return [sample_scenario(i) for i in range(100_000)]


def test_duration_mean(draws):
    tau = np.array([d.duration for d in draws])
    assert abs(tau.mean() - 0.23) < 0.003


def test_draws_in_ranges(draws):
    r = Ranges()
    for name, (lo, hi) in (("duration", r.duration), ("location", r.location), ("k", r.loading)):
        vals = np.array([getattr(d, name) for d in draws])
        assert vals.min() >= lo and vals.max() <= hi
    lines = np.array([d.line for d in draws])
    assert lines.min() == 1 and lines.max() == 46
    assert np.all(np.bincount(lines)[1:] > 1800)


def test_degenerate_ranges_are_inclusive():
    sc = sample_scenario(5, Ranges(duration=(0.4, 0.4), location=(100, 100), loading=(0.75, 0.75)))
    assert (sc.duration, sc.location, sc.k) == (0.4, 100.0, 0.75)


def test_stratified_cycles_lines():
    assert [scenario_for(1, u, stratified=True).line for u in (0, 1, 45, 46)] == [1, 2, 46, 1]


def test_invalid_ranges():
    with pytest.raises(ValueError):
        Ranges(duration=(0.4, 0.06))


# --- TIS ------------------------------------------------------------------

@pytest.mark.parametrize("lam,tis", [(100.0, 0), (370.0, 1), (359.999, 0)])
def test_tis_examples(lam, tis):
    delta = np.zeros((5, 3))
    delta[:, 1] = lam
    lab = tis_from_angles(delta)
    assert lab.tis == tis and lab.lambda_max == pytest.approx(lam)


def test_tis_boundary_flagged():
    delta = np.zeros((3, 2))
    delta[1, 0] = 360.0
    lab = tis_from_angles(delta)
    assert lab.tis == 0 and lab.boundary


def test_ramp_trace_label():
    delta = np.zeros((3501, 10))
    delta[:, 0] = np.linspace(0, 720, 3501)
    lab = label_tis(synthetic_trace(delta))
    assert lab.tis == 1 and lab.lambda_max == pytest.approx(720.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e4, 1e4))
def test_lambda_invariances(seed, shift):
    g = np.random.default_rng(seed)
    delta = g.normal(0, 200, (30, 10))
    base = tis_from_angles(delta).lambda_max
    assert tis_from_angles(delta[:, g.permutation(10)]).lambda_max == pytest.approx(base)
    assert tis_from_angles(delta + shift).lambda_max == pytest.approx(base, abs=1e-9 * (1 + abs(shift)))


# --- window ---------------------------------------------------------------

@pytest.mark.parametrize("tau,pre,fault", [(0.06, 220, 30), (0.4, 50, 200)])
def test_window_counts(tau, pre, fault):
    sc = FaultScenario(1, 50.0, tau, 1.0)
    tr = synthetic_trace(np.zeros((3501, 10)), sc=sc)
    w = extract_window(tr, sc)
    assert w.matrix.shape == (270, 250)
    assert (w.prefault, 250 - w.prefault) == (pre, fault)


@pytest.mark.parametrize("steps", [30, 47, 111, 200])
def test_prefault_identity(steps):
    tau = steps * 0.002
    cols = window_columns(3501, 2.0 + tau, 0.002)
    t = cols * 0.002
    assert cols.size == 250
    assert np.sum(t < 2.0 - 1e-9) == 250 - steps
    assert t[-1] < 2.0 + tau


@pytest.mark.parametrize("tau", [0.05, 0.41])
def test_window_rejects_out_of_range_duration(tau):
    sc = FaultScenario(1, 50.0, tau, 1.0)
    tr = synthetic_trace(np.zeros((3501, 10)))
    with pytest.raises(ValueError):
        extract_window(tr, sc)


def test_constant_trace_has_zero_differences():
    prim = np.tile(np.arange(9.0)[None, :, None], (10, 1, 250))
    m = build_matrix(prim)
    for g in range(10):
        assert np.all(m[27 * g + 9: 27 * g + 18] == 0)


def test_matrix_layout():
    g = np.random.default_rng(3)
    prim = g.normal(size=(10, 9, 250))
    m = build_matrix(prim)
    d = FEATURES.index("delta")
    for i in range(10):
        blk = m[27 * i: 27 * (i + 1)]
        np.testing.assert_array_equal(blk[:9], prim[i])
        np.testing.assert_array_equal(blk[9:18, 0], 0)
        np.testing.assert_allclose(blk[9:18, 1:], np.diff(prim[i], axis=1))
        others = [j for j in range(10) if j != i]
        np.testing.assert_allclose(blk[18:], np.abs(prim[i, d] - prim[others, d]))


# --- resilience -----------------------------------------------------------

@pytest.mark.parametrize("k,tau,expected", [(1.0, 0.1, 0.1), (1.5, 0.4, 0.6)])
def test_r_hat_product(k, tau, expected):
    sc = FaultScenario(1, 50.0, tau, k)
    tr = synthetic_trace(np.zeros((3501, 10)), s_load=np.full(3501, k), sc=sc)
    rec = resilience(tr, sc)
    assert rec.r_hat == k * tau
    assert rec.r_hat == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("k,tau", [(1.0, 0.1), (1.3, 0.257), (0.75, 0.06)])
def test_constant_load_integral(k, tau):
    sc = FaultScenario(1, 50.0, tau, k)
    tr = synthetic_trace(np.zeros((3501, 10)), s_load=np.full(3501, k), sc=sc)
    assert resilience(tr, sc).r == pytest.approx(k * tau, abs=1e-9)
    t = np.arange(3501) * 0.002
    assert resilience_from_series(t, np.full(3501, k), 2.0, tau, k).r == pytest.approx(k * tau, abs=1e-9)


# --- batches --------------------------------------------------------------

def test_no_fault_batch(ieee39):
    (item,) = run_batch(ieee39, 1, seed=0, no_fault=True)
    assert item.error is None
    assert item.window.tis == 0 and item.window.lambda_max < 90


def test_batch_deterministic_and_sorted(ieee39):
    cfg = SimConfig(horizon=5.0)
    a = run_batch(ieee39, 3, seed=11, cfg=cfg)
    b = run_batch(ieee39, 3, seed=11, cfg=cfg)
    assert [it.scenario.uid for it in a] == [0, 1, 2]
    for x, y in zip(a, b):
        assert x.scenario == y.scenario
        assert np.array_equal(x.window.matrix, y.window.matrix)
        assert x.record == y.record


def test_batch_requires_positive_count(ieee39):
    with pytest.raises(ValueError):
        run_batch(ieee39, 0, seed=0)


def test_failed_scenario_recorded(ieee39, monkeypatch):
    import dscontrol.scenarios as scn

    def boom(*a, **k):
        raise ValueError("synthetic failure")

    monkeypatch.setattr(scn, "simulate", boom)
    items = run_batch(ieee39, 2, seed=0)
    assert all(it.error and "synthetic failure" in it.error for it in items)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hopcoal import ValidationError, make_kernels
from hopcoal.kinetic import DensityField, DensityPath
from hopcoal.particle import (
    SimState,
    Snapshot,
    _build_pair_matrix,
    bin_average,
    bin_edges,
    empirical_density,
    init_poisson_state,
    nonincreasing_within_ci,
    proposal_rates,
    run,
    run_replicas,
    step,
    vlasov_sweep,
)

from conftest import kernel_params

L = 20.0


def _state(points, seed=0, eps=1.0):
    pts = np.asarray(points, dtype=float).reshape(-1, 1)
    return SimState(pts, np.ones(len(pts), bool), 0.0, eps, L, np.random.default_rng(seed))


def test_poisson_initial_count():
    counts = [init_poisson_state(2.0, 0.5, [1, r], dim=1, torus_len=L).count for r in range(400)]
    # Poisson(80)
    assert abs(np.mean(counts) - 80) < 4 * math.sqrt(80 / 400)


def test_inhomogeneous_initial_profile():
    rho0 = DensityField.from_function(1, L, 64, lambda x: 1.0 + np.sin(2 * np.pi * x[..., 0] / L))
    pts = np.concatenate([init_poisson_state(rho0, 0.05, [2, r]).points()[:, 0] for r in range(10)])
    # compare the sample against the normalized density with a KS test
    cdf = lambda x: (x - L / (2 * np.pi) * (np.cos(2 * np.pi * x / L) - 1)) / L  # noqa: E731
    assert stats.kstest(pts, cdf).pvalue > 1e-3


def test_initial_state_validation():
    with pytest.raises(ValidationError, match="epsilon"):
        init_poisson_state(1.0, 0.0, 0, dim=1, torus_len=L)
    with pytest.raises(ValidationError, match="dim"):
        init_poisson_state(1.0, 1.0, 0)
    with pytest.raises(ValidationError, match="cap"):
        init_poisson_state(1.0, 1e-3, 0, dim=1, torus_len=L, cap=1000)


def test_proposal_rates_are_symmetric_envelopes(ks):
    s = _state([1.0, 2.0, 15.0])
    pair, jump = proposal_rates(s, ks)
    assert np.allclose(pair, pair.T) and np.all(np.diag(pair) == 0)
    assert pair[0, 1] == pytest.approx(ks.q1 * float(ks.pair(np.array([1.0]))))
    assert jump.tolist() == [ks.q2] * 3


def test_jump_only_preserves_count_and_domain():
    ks = make_kernels(kernel_params(q1=0.0, a1=0.0))
    s = init_poisson_state(1.0, 1.0, 3, dim=1, torus_len=L)
    n0 = s.count
    for _ in range(500):
        step(s, ks)
    assert s.count == n0
    assert np.all((s.points() >= 0) & (s.points() < L))
    c = s.counters
    assert c["proposals"] == 500 == c["jumps"] + c["rejections"] + c["coalescences"]
    assert c["coalescences"] == 0 and c["rejections"] > 0


def test_repulsion_free_proposals_are_always_accepted(ks_plain):
    s = init_poisson_state(1.0, 1.0, 4, dim=1, torus_len=L)
    n0 = s.count
    for _ in range(300):
        step(s, ks_plain)
    assert s.counters["rejections"] == 0
    assert s.count == n0 - s.counters["coalescences"]


def test_incremental_pair_matrix_matches_rebuild(ks):
    s = init_poisson_state(2.0, 1.0, 5, dim=1, torus_len=L)
    for _ in range(400):
        step(s, ks)
    kept, rowsum = s.pair.copy(), s.pair_rowsum.copy()
    _build_pair_matrix(s, ks)
    assert np.allclose(kept, s.pair, atol=1e-13)
    assert np.allclose(rowsum, s.pair_rowsum, atol=1e-11)


def test_two_particle_survival_law():
    # two frozen particles merge at the constant rate q1 (beta*beta)(x - y)
    ks = make_kernels(kernel_params(q2=0.0, a1=0.0, a2=0.0))
    rate = ks.q1 * float(ks.pair(np.array([0.6])))
    survived = 0
    n = 4000
    for r in range(n):
        s = _state([5.0, 5.6], seed=[7, r])
        snaps = run(s, 1.0, [1.0], ks)
        survived += len(snaps[0].positions) == 2
    p = math.exp(-rate)
    assert abs(survived / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_merge_location_distribution():
    # the new particle is Gaussian around the minimal-image midpoint, variance sigma1^2 / 2
    ks = make_kernels(kernel_params(q2=0.0, a1=0.0, a2=0.0))
    zs = []
    for r in range(1500):
        s = _state([19.5, 0.5], seed=[8, r])
        while s.count == 2:
            step(s, ks)
        zs.append(float(s.points()[0, 0]))
    z = (np.asarray(zs) + L / 2) % L - L / 2  # midpoint sits at 0
    assert stats.kstest(z / (ks.sigma1 / math.sqrt(2)), "norm").pvalue > 1e-3


def test_strong_repulsion_causes_rejections():
    ks = make_kernels(kernel_params(a1=50.0, a2=50.0))
    s = _state([5.0, 5.5, 6.0])
    for _ in range(200):
        if s.count == 0:
            break
        step(s, ks)
    assert s.counters["rejections"] > 0


def test_run_snapshots_and_determinism(ks):
    a = run(init_poisson_state(1.0, 1.0, [3, 1], dim=1, torus_len=L), 1.0, [0.0, 0.5, 1.0], ks)
    b = run(init_poisson_state(1.0, 1.0, [3, 1], dim=1, torus_len=L), 1.0, [0.0, 0.5, 1.0], ks)
    assert [s.time for s in a] == [0.0, 0.5, 1.0]
    assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a, b))
    with pytest.raises(ValidationError, match="sorted"):
        run(init_poisson_state(1.0, 1.0, 0, dim=1, torus_len=L), 1.0, [0.5, 0.2], ks)


def test_run_from_empty_state(ks):
    s = init_poisson_state(0.0, 1.0, 0, dim=1, torus_len=L)
    snaps = run(s, 1.0, [0.5, 1.0], ks)
    assert [len(x.positions) for x in snaps] == [0, 0]


def test_event_log_records_accepted_events(ks_plain):
    s = init_poisson_state(1.0, 1.0, 9, dim=1, torus_len=L)
    run(s, 0.5, [0.5], ks_plain, log_events=True)
    kinds = [e[1] for e in s.events]
    assert kinds.count("coalesce") == s.counters["coalescences"]
    assert kinds.count("jump") == s.counters["jumps"]
    times = [e[0] for e in s.events]
    assert times == sorted(times)


def test_empirical_density_scaling():
    edges = bin_edges(1, L, 256, 32)
    snaps = [Snapshot(1.0, np.array([[1.0], [2.0], [3.0]]), 0.5), Snapshot(1.0, np.array([[4.0]]), 0.5)]
    d = empirical_density(snaps, edges, grid_dx=L / 256)
    # eps * particles / replicas
    assert d.estimate.sum() * d.bin_volume == pytest.approx(0.5 * 4 / 2)
    with pytest.raises(ValidationError, match="divide"):
        bin_edges(1, L, 256, 3)
    with pytest.raises(ValidationError, match="aligned"):
        empirical_density(snaps, [np.linspace(0.01, L, 9)], grid_dx=L / 256)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), cpb=st.sampled_from([1, 2, 8, 32]))
def test_bin_average_preserves_mass(seed, cpb):
    rng = np.random.default_rng(seed)
    f = DensityField(1, L, 64, rng.random(64))
    avg = bin_average(f, cpb)
    assert avg.sum() * L / len(avg) == pytest.approx(f.mass(), rel=1e-12)


def test_bin_average_of_linear_piece():
    # on a single bin the interpolant average is the trapezoid rule
    vals = np.zeros(16)
    vals[4] = 1.0
    avg = bin_average(DensityField(1, 16.0, 16, vals), 4)
    assert avg.tolist() == [0.125, 0.125, 0.0, 0.0]


def test_replicas_are_independent_and_reproducible(ks):
    rho0 = DensityField.constant(1, L, 256, 1.0)
    a = run_replicas(rho0, 0.5, 3, 0.2, [0.2], ks, seed=4)
    b = run_replicas(rho0, 0.5, 3, 0.2, [0.2], ks, seed=4)
    assert all(np.array_equal(x[0].positions, y[0].positions) for x, y in zip(a, b))
    assert not np.array_equal(a[0][0].positions, a[1][0].positions)


def test_vlasov_sweep_validation(ks):
    rho0 = DensityField.constant(1, L, 256, 1.0)
    ref = DensityPath.constant(rho0, 1.0, 0.5)
    with pytest.raises(ValidationError, match="descending"):
        vlasov_sweep([0.5, 1.0], 2, rho0, 1.0, ks, ref)
    with pytest.raises(ValidationError, match="end at T"):
        vlasov_sweep([1.0], 2, rho0, 2.0, ks, ref)


def test_vlasov_sweep_rows(ks):
    rho0 = DensityField.constant(1, L, 256, 1.0)
    ref = DensityPath.constant(rho0, 0.1, 0.05)
    rows = vlasov_sweep([1.0, 0.5], 5, rho0, 0.1, ks, ref, bootstrap=20)
    assert [r["epsilon"] for r in rows] == [1.0, 0.5]
    assert all(r["ci_low"] <= r["l1_error"] <= r["ci_high"] for r in rows)
    assert rows[0]["flagged"] is False


def test_nonincreasing_within_ci():
    row = lambda lo, hi: {"ci_low": lo, "ci_high": hi}  # noqa: E731
    assert nonincreasing_within_ci([row(1, 2), row(1.5, 3), row(0.1, 0.2)])
    assert not nonincreasing_within_ci([row(1, 2), row(2.5, 3)])

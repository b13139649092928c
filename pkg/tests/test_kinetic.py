import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopcoal import NumericalError, ValidationError, make_kernels
from hopcoal.kinetic import (
    DensityField,
    DensityPath,
    KineticOperator,
    contraction_ratio,
    homogeneous_oracle,
    horizon,
    invariance_bound,
    lipschitz_bound,
    picard_map,
    random_ball_path,
    rates,
    rhs,
    screening_field,
    solve,
    time_nodes,
    weighted_norm,
)

from conftest import kernel_params

M = 256
L = 20.0

# horizon for <c1> = <c2> = r = 1, margin 0.1, theta 0.9; 40-digit root finding
# on the unsimplified bound expressions (see _mp_horizon below)
T_TILDE = 0.10307877162649066059
T_2STAR_PLAIN = 0.12817624698913697882
C_PLAIN = 0.67304903880535902056
T_2STAR_REPULSIVE = 0.081676023317080992216  # a1 = a2 = 0.5, w = 0.8


def _mp_horizon(c1, c2, r, p1, p2, margin=0.1, theta=0.9):
    with mp.workdps(40):
        c1, c2, r, p1, p2 = map(mp.mpf, (c1, c2, r, p1, p2))
        g = (1 + mp.mpf(margin)) * (1 + 3 * c1 * r / (2 * c2))
        E = mp.exp

        def f1(t):
            return E(-(g + 1) * c2 * t) * (
                1 + 3 * c1 * r / (2 * (2 * g + 1) * c2) * (E((2 * g + 1) * c2 * t) - 1) + 2 / (g + 1) * (E((g + 1) * c2 * t) - 1)
            )

        def f2(t):
            return t * (
                mp.mpf(3) / 2 * r**2 * c1 * E(2 * g * c2 * t) * (c1 * t + p1)
                + r * E(g * c2 * t) * (2 * c1 * c2 * t + 3 * c1 + 2 * c2 * p2)
                + 2 * c2
            )

        def root(f, level):
            t = mp.mpf("1e-8")
            while f(t) < level:
                t *= mp.mpf("1.05")
            return mp.findroot(lambda s: f(s) - level, (t / mp.mpf("1.05"), t), solver="anderson")

        tt, t2 = root(f1, 1), root(f2, mp.mpf(theta))
        ts = min(tt, t2)
        return float(g), float(tt), float(t2), float(ts), float(f2(ts))


def _random_field(rng, dim=1, top=2.0):
    x = DensityField.constant(dim, L, M, 0.0).nodes()
    vals = np.full(x.shape[:-1], rng.uniform(0, 1))
    for _ in range(3):
        k = rng.integers(1, 5, size=dim)
        vals += rng.uniform(0, 0.5) * (1 + np.cos(2 * np.pi * (x @ k) / L + rng.uniform(0, 6.3)))
    return DensityField(dim, L, M, top * vals / vals.max())


def test_field_and_path_basics():
    f = DensityField.constant(1, L, M, 2.0)
    assert f.mass() == pytest.approx(40.0) and f.dx == L / M
    with pytest.raises(ValidationError):
        DensityField(1, L, M, np.zeros(M + 1))
    p = DensityPath.constant(f, 1.0, 0.25)
    assert p.times.tolist() == [0, 0.25, 0.5, 0.75, 1.0]
    q = p.like(p.values * p.times[:, None])
    assert np.allclose(q.at(0.6).values, 2.0 * 0.6)
    with pytest.raises(ValidationError, match="divide"):
        time_nodes(1.0, 0.3)


def test_spectral_and_direct_convolutions_agree(ks):
    rng = np.random.default_rng(0)
    op = KineticOperator(ks, M)
    f = rng.random(M)
    for name in ("beta", "beta_r", "jump", "phi1"):
        assert np.allclose(op.conv(name, f), op.conv(name, f, method="direct"), rtol=1e-12, atol=1e-14)
    r_s, r_d = rates(f, op), rates(f, op, "direct")
    assert np.allclose(r_s.total, r_d.total, atol=1e-13)


def test_convolution_matches_pointwise_sum_two_dimensional():
    ks2 = make_kernels(kernel_params(dim=2))
    op = KineticOperator(ks2, 32, check_resolution=False)
    rng = np.random.default_rng(1)
    f = rng.random((32, 32))
    i, j = 5, 17
    v = op.displacements()
    x = np.array([i, j]) * op.dx
    nodes = DensityField.constant(2, L, 32, 0).nodes()
    expect = (ks2.beta(x - nodes) * f).sum() * op.dx**2
    assert op.conv("beta", f)[i, j] == pytest.approx(expect, rel=1e-12)
    assert v.shape == (32, 32, 2)


def test_coarse_grid_is_rejected(ks):
    with pytest.raises(ValidationError, match="resolve"):
        KineticOperator(ks, 128)


def test_constant_field_rhs_closed_form(ks):
    # constant rho: gain1 - loss1 = -q1/2 rho^2 exp(-rho <phi1>), jumps cancel
    rho = DensityField.constant(1, L, M, 1.3)
    total, h, r2 = rhs(rho, ks)
    expect = -0.5 * ks.q1 * 1.3**2 * math.exp(-1.3 * ks.phi1_int)
    assert np.allclose(total.values, expect, rtol=1e-12)
    assert np.allclose(h.values, ks.q1 * 1.3 + ks.q2, rtol=1e-12)


def test_screening_field_of_constant(ks):
    e = screening_field(DensityField.constant(1, L, M, 0.7), ks, which=2)
    assert np.allclose(e.values, math.exp(-0.7 * ks.phi2_int), rtol=1e-12)


def test_negative_density_is_rejected(ks):
    vals = np.ones(M)
    vals[3] = -0.1
    with pytest.raises(NumericalError, match="negative"):
        rhs(DensityField(1, L, M, vals), ks)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_jump_only_rhs_conserves_mass(seed):
    ks = make_kernels(kernel_params(q1=0.0, a1=0.0))
    rho = _random_field(np.random.default_rng(seed))
    total, _, _ = rhs(rho, ks)
    assert abs(total.values.sum() * rho.cell_volume) <= 1e-12 * rho.mass()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_lower_bound_on_h_and_upper_bound_on_r2(seed):
    ks = make_kernels(kernel_params())
    rho = _random_field(np.random.default_rng(seed), top=3.0)
    _, h, r2 = rhs(rho, ks)
    sup = rho.values.max()
    assert h.values.min() >= ks.c2_int - 1e-12
    assert r2.values.max() <= 1.5 * sup**2 * ks.c1_int + 2 * sup * ks.c2_int + 1e-12


def test_coalescence_only_mass_decreases():
    ks = make_kernels(kernel_params(q2=0.0, a2=0.0))
    rho0 = _random_field(np.random.default_rng(2))
    path = solve(rho0, ks, 0.5, 0.01, guarantee=False)
    assert np.all(np.diff(path.masses()) < 0)


def test_homogeneous_oracle_against_separable_quadrature():
    # t = int_{rho(t)}^{rho0} 2 exp(p y) / (c1 y^2) dy for the homogeneous equation
    ks = make_kernels(kernel_params(q1=2.0, a1=0.8))
    for t in (0.3, 1.0, 2.5):
        rho_t = homogeneous_oracle(1.0, t, ks)
        with mp.workdps(30):
            back = mp.quad(lambda y: 2 * mp.exp(ks.phi1_int * y) / (2.0 * y**2), [rho_t, 1.0])
        assert float(back) == pytest.approx(t, rel=1e-10)


@pytest.mark.parametrize("method", ["picard", "rk4"])
def test_homogeneous_closed_form(method):
    ks = make_kernels(kernel_params(q1=2.0, a1=0.0, a2=0.0))
    rho0 = DensityField.constant(1, L, M, 1.0)
    path = solve(rho0, ks, 1.0, 1e-2, method=method, guarantee=False)
    tol = 1e-4 if method == "picard" else 1e-10
    assert np.allclose(path.values[-1], 0.5, rtol=tol)


def test_picard_and_rk4_agree_on_inhomogeneous_data(ks):
    rho0 = _random_field(np.random.default_rng(4))
    a = solve(rho0, ks, 0.5, 5e-3, guarantee=False)
    b = solve(rho0, ks, 0.5, 5e-3, method="rk4")
    # trapezoid-in-time Picard is second order; RK4 is far more accurate
    assert np.max(np.abs(a.values[-1] - b.values[-1])) < 1e-4
    assert a.info["iterations"] > 1 and a.info["distances"][-1] <= 1e-8


def test_picard_error_is_second_order_in_time():
    ks = make_kernels(kernel_params(q1=2.0, a1=0.8, a2=0.0))
    rho0 = DensityField.constant(1, L, M, 1.0)
    exact = homogeneous_oracle(1.0, 1.0, ks)
    errs = [abs(solve(rho0, ks, 1.0, dt, guarantee=False).values[-1][0] - exact) for dt in (0.02, 0.01)]
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_guarantee_mode_enforces_horizon(ks):
    rho0 = DensityField.constant(1, L, M, 1.0)
    with pytest.raises(ValidationError, match="horizon"):
        solve(rho0, ks, 1.0, 0.01)
    hz = horizon(1.0, ks)
    T = math.floor(hz.T_star * 1000) / 1000
    path = solve(rho0, ks, T, T / 20)
    assert path.info["guaranteed"]


def test_horizon_frozen_values():
    ks = make_kernels(kernel_params(a1=0.0, a2=0.0))
    hz = horizon(1.0, ks)
    assert hz.gamma == 2.75 and hz.f1_slope0 == -0.25
    assert hz.T_tilde == pytest.approx(T_TILDE, rel=1e-13)
    assert hz.T_2star == pytest.approx(T_2STAR_PLAIN, rel=1e-13)
    assert hz.T_star == hz.T_tilde and hz.C == pytest.approx(C_PLAIN, rel=1e-12)
    rep = horizon(1.0, make_kernels(kernel_params()))
    assert rep.T_star == pytest.approx(T_2STAR_REPULSIVE, rel=1e-13)
    assert rep.C == pytest.approx(0.9, rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(c1=st.floats(0.1, 3.0), c2=st.floats(0.2, 3.0), r=st.floats(0.2, 3.0), a=st.floats(0.0, 1.0))
def test_horizon_against_high_precision_roots(c1, c2, r, a):
    ks = make_kernels(kernel_params(q1=c1, q2=c2, a1=a, a2=a))
    hz = horizon(r, ks)
    g, tt, t2, ts, C = _mp_horizon(c1, c2, r, ks.phi1_int, ks.phi2_int)
    assert hz.gamma == pytest.approx(g, rel=1e-14)
    assert hz.T_tilde == pytest.approx(tt, rel=1e-11)
    assert hz.T_2star == pytest.approx(t2, rel=1e-11)
    assert hz.C == pytest.approx(C, rel=1e-10)
    assert float(invariance_bound(hz.T_tilde, r, hz.gamma, ks)) == pytest.approx(1.0, abs=1e-10)
    assert float(lipschitz_bound(hz.T_star, r, hz.gamma, ks)) == pytest.approx(hz.C, rel=1e-12)


def test_horizon_rejects_bad_input(ks):
    with pytest.raises(ValidationError, match="c2"):
        horizon(1.0, make_kernels(kernel_params(q2=0.0)))
    with pytest.raises(ValidationError, match="r"):
        horizon(0.0, ks)
    with pytest.raises(ValidationError, match="theta"):
        horizon(1.0, ks, theta=1.0)


def test_contraction_ratios_stay_below_bound(ks):
    rho0 = DensityField.from_function(1, L, M, lambda x: 0.5 + 0.4 * np.exp(-((x[..., 0] - 10) ** 2)))
    hz = horizon(1.0, ks)
    rng = np.random.default_rng(8)
    ratios = []
    for _ in range(8):
        a = random_ball_path(rho0, hz.T_star, 40, hz, ks, rng)
        b = random_ball_path(rho0, hz.T_star, 40, hz, ks, rng)
        ratios.append(contraction_ratio(a, b, rho0, ks, hz))
    assert max(ratios) <= hz.C
    assert weighted_norm(picard_map(a, rho0, ks), hz.gamma, ks) <= hz.r


def test_contraction_ratio_input_checks(ks):
    rho0 = DensityField.constant(1, L, M, 0.5)
    hz = horizon(1.0, ks)
    p = DensityPath.constant(rho0, hz.T_star, hz.T_star / 10)
    with pytest.raises(ValidationError, match="coincide"):
        contraction_ratio(p, p, rho0, ks, hz)
    far = p.like(p.values * 3)
    far.values[0] = rho0.values
    with pytest.raises(ValidationError, match="ball"):
        contraction_ratio(far, p, rho0, ks, hz)


def test_rk4_blow_up_is_reported():
    ks = make_kernels(kernel_params(q1=0.0, a1=0.0, a2=0.0))
    rho0 = DensityField.constant(1, L, M, 1.0)
    # absurd step: explicit RK4 on the jump part is unstable for dt * <c2> >> 1
    with pytest.raises(NumericalError):
        solve(rho0.like(rho0.values + np.cos(np.arange(M) * np.pi)), ks, 200.0, 20.0, method="rk4")

"""Kinetic equation for the mesoscopic density on a periodic grid.

With the separable kernels of :mod:`hopcoal.kernels` every integral in the
right-hand side is a circular convolution::

    gain1 = q1/2 * E1 * (beta * rho)^2
    loss1 = q1 * rho * (beta~ * [E1 (beta * rho)])
    gain2 = q2 * E2 * (j * rho)
    loss2 = q2 * rho * (j~ * E2)
    E_i   = exp(-(phi_i * rho))

where ``f~(v) = f(-v)``.  The integral (mild) form ``rho = F(rho)`` is solved
by Picard iteration on a uniform time grid; RK4 stepping of the differential
form is provided as an independent cross-check.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import NumericalError, ValidationError
from .kernels import KernelSet, wrap

NEG_TOL = 1e-12
RK4_NEG_TOL = 1e-9
MIN_POINTS_PER_WIDTH = 8


@dataclass
class DensityField:
    """Values of a density on the uniform grid ``x_k = k L / M`` of ``[0, L)^d``."""

    dim: int
    torus_len: float
    grid_pts: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid_pts,) * self.dim:
            raise ValidationError(f"values: expected shape {(self.grid_pts,) * self.dim}, got {self.values.shape}")

    @property
    def dx(self) -> float:
        return self.torus_len / self.grid_pts

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    def mass(self) -> float:
        return self.cell_volume * float(self.values.sum())

    def nodes(self) -> np.ndarray:
        axes = [np.arange(self.grid_pts) * self.dx] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def like(self, values) -> "DensityField":
        return DensityField(self.dim, self.torus_len, self.grid_pts, values)

    @classmethod
    def constant(cls, dim: int, torus_len: float, grid_pts: int, c: float) -> "DensityField":
        return cls(dim, torus_len, grid_pts, np.full((grid_pts,) * dim, float(c)))

    @classmethod
    def from_function(cls, dim: int, torus_len: float, grid_pts: int, func) -> "DensityField":
        tmp = cls.constant(dim, torus_len, grid_pts, 0.0)
        return tmp.like(func(tmp.nodes()))


@dataclass
class DensityPath:
    """Density fields at uniform time nodes ``0 = t_0 < ... < t_K = T``."""

    times: np.ndarray
    values: np.ndarray  # (K+1, M, ..., M)
    dim: int
    torus_len: float
    grid_pts: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.times) < 2:
            raise ValidationError("a density path needs at least two time nodes")
        if self.values.shape != (len(self.times),) + (self.grid_pts,) * self.dim:
            raise ValidationError("path values do not match the time and grid metadata")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def field(self, k: int) -> DensityField:
        return DensityField(self.dim, self.torus_len, self.grid_pts, self.values[k])

    def at(self, t: float) -> DensityField:
        """Linear interpolation in time."""
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        a = (t - t0) / (t1 - t0)
        return self.field(0).like((1 - a) * self.values[k] + a * self.values[k + 1])

    def masses(self) -> np.ndarray:
        cell = (self.torus_len / self.grid_pts) ** self.dim
        return cell * self.values.reshape(len(self.times), -1).sum(axis=1)

    def like(self, values, **info) -> "DensityPath":
        return DensityPath(self.times, values, self.dim, self.torus_len, self.grid_pts, info)

    @classmethod
    def constant(cls, rho0: DensityField, T: float, dt: float) -> "DensityPath":
        times = time_nodes(T, dt)
        vals = np.broadcast_to(rho0.values, (len(times),) + rho0.values.shape).copy()
        return cls(times, vals, rho0.dim, rho0.torus_len, rho0.grid_pts)


def time_nodes(T: float, dt: float) -> np.ndarray:
    if not T > 0 or not dt > 0:
        raise ValidationError(f"T and dt must be positive (T={T}, dt={dt})")
    steps = max(1, int(round(T / dt)))
    if not math.isclose(steps * dt, T, rel_tol=1e-9):
        raise ValidationError(f"dt={dt} does not divide T={T}")
    return np.linspace(0.0, T, steps + 1)


# --------------------------------------------------------------------------
# convolution operator


class KineticOperator:
    """Kernel weights on a grid and the convolutions that use them."""

    def __init__(self, ks: KernelSet, grid_pts: int, check_resolution: bool = True):
        self.ks = ks
        self.M = grid_pts
        self.dim = ks.dim
        self.dx = ks.torus_len / grid_pts
        widths = ks.active_widths()
        if check_resolution and widths and self.dx > min(widths) / MIN_POINTS_PER_WIDTH:
            raise ValidationError(
                f"grid spacing {self.dx:.4g} does not resolve the narrowest kernel "
                f"({min(widths):.4g}); need at least {MIN_POINTS_PER_WIDTH} points per width"
            )
        v = self.displacements()
        cell = self.dx**self.dim
        self.weights = {
            "beta": ks.beta(v) * cell,
            "beta_r": ks.beta(-v) * cell,
            "jump": ks.jump(v) * cell,
            "jump_r": ks.jump(-v) * cell,
            "phi1": ks._phi1(v) * cell,
            "phi2": ks._phi2(v) * cell,
        }
        axes = tuple(range(-self.dim, 0))
        self._axes = axes
        self._hat = {k: np.fft.rfftn(w, axes=axes) for k, w in self.weights.items()}

    def displacements(self) -> np.ndarray:
        axes = [wrap(np.arange(self.M) * self.dx, self.ks.torus_len)] * self.dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def conv(self, name: str, f: np.ndarray, method: str = "spectral") -> np.ndarray:
        """Circular convolution ``(k * f)_i = sum_j k_{i-j} f_j`` over the trailing grid axes."""
        if method == "spectral":
            shape = f.shape[-self.dim :]
            return np.fft.irfftn(np.fft.rfftn(f, axes=self._axes) * self._hat[name], s=shape, axes=self._axes)
        if method == "direct":
            return self._direct(self.weights[name], f)
        raise ValidationError(f"unknown convolution method {method!r}")

    def _direct(self, w: np.ndarray, f: np.ndarray) -> np.ndarray:
        out = np.zeros_like(f, dtype=float)
        for shift in np.ndindex(*w.shape):
            out += w[shift] * np.roll(f, shift, axis=self._axes)
        return out


@functools.lru_cache(maxsize=32)
def operator(ks: KernelSet, grid_pts: int) -> KineticOperator:
    return KineticOperator(ks, grid_pts)


def _check_grid(rho: DensityField, ks: KernelSet):
    if rho.dim != ks.dim or not math.isclose(rho.torus_len, ks.torus_len):
        raise ValidationError("density grid does not match the kernel domain")


def screening_field(rho: DensityField, ks: KernelSet, which: int = 1, method: str = "spectral") -> DensityField:
    """``E(x) = exp(-(phi * rho)(x))`` for ``phi = phi1`` or ``phi2``."""
    _check_grid(rho, ks)
    op = operator(ks, rho.grid_pts)
    return rho.like(np.exp(-op.conv(f"phi{which}", rho.values, method)))


@dataclass
class Rates:
    total: np.ndarray
    h: np.ndarray
    r2: np.ndarray
    gain1: np.ndarray
    loss1: np.ndarray
    gain2: np.ndarray
    loss2: np.ndarray


def _check_nonneg(values: np.ndarray, what: str = "density"):
    lo = float(values.min()) if values.size else 0.0
    scale = max(1.0, float(np.abs(values).max()) if values.size else 1.0)
    if lo < -NEG_TOL * scale:
        raise NumericalError(f"{what} is negative (min {lo:.3e})")


def rates(values: np.ndarray, op: KineticOperator, method: str = "spectral") -> Rates:
    """All right-hand-side terms for one field or a stack of fields."""
    ks = op.ks
    conv = functools.partial(op.conv, method=method)
    b_rho = conv("beta", values)
    e1 = np.exp(-conv("phi1", values))
    e2 = np.exp(-conv("phi2", values))
    j_rho = conv("jump", values)
    gain1 = 0.5 * ks.q1 * e1 * b_rho**2
    loss1 = ks.q1 * values * conv("beta_r", e1 * b_rho)
    gain2 = ks.q2 * e2 * j_rho
    loss2 = ks.q2 * values * conv("jump_r", e2)
    h = ks.q1 * conv("beta_r", b_rho) + ks.c2_int
    r2 = (
        gain1
        + ks.q1 * values * conv("beta_r", (1.0 - e1) * b_rho)
        + gain2
        + ks.q2 * values * conv("jump_r", 1.0 - e2)
    )
    return Rates(gain1 - loss1 + gain2 - loss2, h, r2, gain1, loss1, gain2, loss2)


def rhs(rho: DensityField, ks: KernelSet, method: str = "spectral") -> tuple[DensityField, DensityField, DensityField]:
    """``(d rho/dt, h, R2)`` for the kinetic equation at the field ``rho``."""
    _check_grid(rho, ks)
    _check_nonneg(rho.values)
    r = rates(rho.values, operator(ks, rho.grid_pts), method)
    return rho.like(r.total), rho.like(r.h), rho.like(r.r2)


# --------------------------------------------------------------------------
# Picard map and solvers


def picard_map(path: DensityPath, rho0: DensityField, ks: KernelSet) -> DensityPath:
    """Apply the integral-equation map F to a path.

    ``F(rho)_t = rho0 exp(-int_0^t h) + int_0^t R2(rho_s) exp(-int_s^t h) ds``,
    with every time integral taken by the composite trapezoid rule on the
    path's nodes.
    """
    if len(path.times) < 2:
        raise ValidationError("picard_map needs at least two time nodes")
    _check_grid(rho0, ks)
    op = operator(ks, path.grid_pts)
    r = rates(path.values, op)
    dt = np.diff(path.times)
    shape = (-1,) + (1,) * path.dim
    # one-step decay factors exp(-int_{t_k}^{t_{k+1}} h)
    decay = np.exp(-0.5 * dt.reshape(shape) * (r.h[1:] + r.h[:-1]))
    out = np.empty_like(path.values)
    out[0] = rho0.values
    acc_h = np.ones_like(rho0.values)
    acc_src = np.zeros_like(rho0.values)
    for k in range(len(dt)):
        acc_h = acc_h * decay[k]
        acc_src = decay[k] * (acc_src + 0.5 * dt[k] * r.r2[k]) + 0.5 * dt[k] * r.r2[k + 1]
        out[k + 1] = rho0.values * acc_h + acc_src
    return path.like(out)


def weighted_norm(path: DensityPath, gamma: float, ks: KernelSet) -> float:
    """``sup_t exp(-gamma <c2> t) ||rho_t||_inf`` over the path's nodes."""
    sup = np.abs(path.values).reshape(len(path.times), -1).max(axis=1)
    return float(np.max(np.exp(-gamma * ks.c2_int * path.times) * sup))


def solve(
    rho0: DensityField,
    ks: KernelSet,
    T: float,
    dt: float,
    method: str = "picard",
    tol: float = 1e-8,
    guarantee: bool = True,
    r: Optional[float] = None,
    gamma_margin: float = 0.1,
    theta: float = 0.9,
    max_iter: int = 500,
) -> DensityPath:
    """Solve the kinetic equation on ``[0, T]``.

    ``picard`` iterates F from the constant path at ``rho0`` until the sup
    change between iterates is at most ``tol``; with ``guarantee`` on, ``T``
    must lie within the contraction horizon for the ball radius ``r``
    (default ``||rho0||_inf``).  ``rk4`` steps the differential form.
    """
    _check_grid(rho0, ks)
    _check_nonneg(rho0.values, "initial density")
    if method == "picard":
        return _solve_picard(rho0, ks, T, dt, tol, guarantee, r, gamma_margin, theta, max_iter)
    if method == "rk4":
        return _solve_rk4(rho0, ks, T, dt)
    raise ValidationError(f"method: must be 'picard' or 'rk4', got {method!r}")


def _solve_picard(rho0, ks, T, dt, tol, guarantee, r, gamma_margin, theta, max_iter):
    info: dict = {"method": "picard", "guaranteed": False}
    sup0 = float(rho0.values.max())
    hz = None
    if sup0 > 0 and ks.c2_int > 0:
        hz = horizon(r if r is not None else sup0, ks, gamma_margin, theta)
        info.update(hz.as_dict())
        info["guaranteed"] = T <= hz.T_star * (1 + 1e-12)
    if guarantee and sup0 > 0:
        if hz is None:
            raise ValidationError("guarantee mode needs <c2> > 0; pass guarantee=False for best effort")
        if not info["guaranteed"]:
            raise ValidationError(f"T={T} exceeds the contraction horizon T*={hz.T_star:.6g}")
    path = DensityPath.constant(rho0, T, dt)
    dists, wdists = [], []
    for it in range(1, max_iter + 1):
        new = picard_map(path, rho0, ks)
        diff = new.values - path.values
        dists.append(float(np.abs(diff).max()))
        if hz is not None:
            wdists.append(weighted_norm(path.like(diff), hz.gamma, ks))
        path = new
        if dists[-1] <= tol:
            break
    else:
        raise NumericalError(f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations (last {dists[-1]:.3e})")
    _check_nonneg(path.values, "Picard iterate")
    ratios = [b / a for a, b in zip(wdists[:-1], wdists[1:]) if a > 0]
    info.update(iterations=it, distances=dists, weighted_distances=wdists, ratios=ratios)
    path.info = info
    return path


def _solve_rk4(rho0, ks, T, dt):
    times = time_nodes(T, dt)
    op = operator(ks, rho0.grid_pts)
    out = np.empty((len(times),) + rho0.values.shape)
    out[0] = rho0.values
    m0 = max(rho0.mass(), 1e-300)
    cell = rho0.cell_volume
    y = rho0.values.copy()
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        k1 = rates(y, op).total
        k2 = rates(y + 0.5 * h * k1, op).total
        k3 = rates(y + 0.5 * h * k2, op).total
        k4 = rates(y + h * k3, op).total
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        mass = cell * y.sum()
        if not np.all(np.isfinite(y)) or mass > 1e6 * m0:
            raise NumericalError(f"rk4 unstable at t={times[k + 1]:g} (mass {mass:.3e})")
        if y.min() < -RK4_NEG_TOL * max(1.0, float(np.abs(y).max())):
            raise NumericalError(f"rk4 lost positivity at t={times[k + 1]:g} (min {y.min():.3e}); reduce dt")
        out[k + 1] = y
    return DensityPath(times, out, rho0.dim, rho0.torus_len, rho0.grid_pts, {"method": "rk4"})


# --------------------------------------------------------------------------
# contraction horizon


@dataclass(frozen=True)
class PicardHorizon:
    r: float
    gamma: float
    T_tilde: float
    T_star: float
    C: float
    T_2star: float
    f1_slope0: float

    def as_dict(self) -> dict:
        return {
            "r": self.r,
            "gamma": self.gamma,
            "T_tilde": self.T_tilde,
            "T_star": self.T_star,
            "C": self.C,
        }


def invariance_bound(t, r: float, gamma: float, ks: KernelSet):
    """Growth factor of the ball radius under F up to time ``t`` (F maps the ball into itself while it is <= 1)."""
    c1, c2 = ks.c1_int, ks.c2_int
    t = np.asarray(t, dtype=float)
    a = 3.0 * c1 * r / (2.0 * (2.0 * gamma + 1.0) * c2)
    b = 2.0 / (gamma + 1.0)
    return np.exp(-(gamma + 1.0) * c2 * t) * (
        1.0 + a * np.expm1((2.0 * gamma + 1.0) * c2 * t) + b * np.expm1((gamma + 1.0) * c2 * t)
    )


def lipschitz_bound(t, r: float, gamma: float, ks: KernelSet):
    """Lipschitz constant of F in the weighted norm on ``[0, t]``."""
    c1, c2, p1, p2 = ks.c1_int, ks.c2_int, ks.phi1_int, ks.phi2_int
    t = np.asarray(t, dtype=float)
    e = np.exp(gamma * c2 * t)
    return t * (
        1.5 * r**2 * c1 * e**2 * (c1 * t + p1)
        + r * e * (2.0 * c1 * c2 * t + 3.0 * c1 + 2.0 * c2 * p2)
        + 2.0 * c2
    )


def _first_crossing(func, level: float, start: float, rel_tol: float = 1e-14) -> float:
    """First ``t > 0`` where ``func`` reaches ``level``, given ``func < level`` on ``(0, start]``."""
    lo, hi = 0.0, start
    for _ in range(400):
        if func(hi) >= level:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise NumericalError(f"no crossing of level {level} found up to t={hi:.3g}")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if func(mid) >= level:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def horizon(r: float, ks: KernelSet, gamma_margin: float = 0.1, theta: float = 0.9) -> PicardHorizon:
    """Ball radius, weight and time horizon on which the Picard map contracts."""
    if not r > 0:
        raise ValidationError(f"r: must be positive, got {r}")
    if not ks.c2_int > 0:
        raise ValidationError("horizon needs <c2> > 0 (the weighted norm degenerates otherwise)")
    if not 0 < theta < 1:
        raise ValidationError(f"theta: must lie in (0, 1), got {theta}")
    if gamma_margin <= 0:
        raise ValidationError(f"gamma_margin: must be positive, got {gamma_margin}")
    c1, c2 = ks.c1_int, ks.c2_int
    gamma = (1.0 + gamma_margin) * (1.0 + 3.0 * c1 * r / (2.0 * c2))
    slope0 = -(gamma + 1.0) * c2 + (1.5 * c1 * r + 2.0 * c2)
    if not slope0 < 0:
        raise NumericalError(f"invariance bound does not start decreasing (slope {slope0:.3e})")
    f1 = lambda t: float(invariance_bound(t, r, gamma, ks))  # noqa: E731
    # f1(t) < 1 on a right-neighbourhood of 0; start well inside it
    start = min(1e-3, 0.5 * abs(slope0)) / ((gamma + 1.0) * c2)
    while f1(start) >= 1.0:
        start *= 0.5
    t_tilde = _first_crossing(f1, 1.0, start)
    f2 = lambda t: float(lipschitz_bound(t, r, gamma, ks))  # noqa: E731
    start2 = 1e-6 / (c2 + c1 * r + 1e-300)
    while f2(start2) >= theta:
        start2 *= 0.5
    t_2star = _first_crossing(f2, theta, start2)
    t_star = min(t_tilde, t_2star)
    return PicardHorizon(r, gamma, t_tilde, t_star, f2(t_star), t_2star, slope0)


def contraction_ratio(
    rho: DensityPath, psi: DensityPath, rho0: DensityField, ks: KernelSet, hz: PicardHorizon, slack: float = 1e-9
) -> float:
    """Measured ``||F(rho) - F(psi)|| / ||rho - psi||`` in the weighted norm."""
    for name, p in (("rho", rho), ("psi", psi)):
        if not np.array_equal(p.values[0], rho0.values):
            raise ValidationError(f"{name} does not start at rho0")
        if p.values.min() < -NEG_TOL * max(1.0, float(np.abs(p.values).max())):
            raise ValidationError(f"{name} leaves the nonnegative cone")
        if weighted_norm(p, hz.gamma, ks) > hz.r * (1 + slack):
            raise ValidationError(f"{name} lies outside the ball of radius {hz.r}")
    den = weighted_norm(rho.like(rho.values - psi.values), hz.gamma, ks)
    if den == 0:
        raise ValidationError("rho and psi coincide")
    num = weighted_norm(rho.like(picard_map(rho, rho0, ks).values - picard_map(psi, rho0, ks).values), hz.gamma, ks)
    return num / den


# --------------------------------------------------------------------------
# spatially homogeneous reduction


def homogeneous_oracle(c: float, t, ks: KernelSet):
    """Density of the spatially constant solution started at ``c``.

    Solves ``d rho/dt = -<c1>/2 rho^2 exp(-rho <phi1>)``; in closed form when
    ``phi1 = 0``.
    """
    if c < 0:
        raise ValidationError(f"c: must be nonnegative, got {c}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    c1, p1 = ks.c1_int, ks.phi1_int
    if p1 == 0.0 or c == 0.0:
        out = c / (1.0 + 0.5 * c1 * c * t_arr)
    else:
        order = np.argsort(t_arr)
        ts = t_arr[order]
        sol = solve_ivp(
            lambda _, y: -0.5 * c1 * y**2 * np.exp(-p1 * y),
            (0.0, float(ts[-1]) if ts[-1] > 0 else 1e-300),
            [c],
            method="DOP853",
            t_eval=ts,
            rtol=1e-12,
            atol=1e-14 * c,
        )
        out = np.empty_like(t_arr)
        out[order] = sol.y[0]
    return float(out[0]) if np.ndim(t) == 0 else out


def random_ball_path(rho0: DensityField, T: float, steps: int, hz: PicardHorizon, ks: KernelSet, rng) -> DensityPath:
    """A random nonnegative path from ``rho0`` inside the ball of radius ``hz.r``.

    The path is ``rho0 + s(t) a(x)`` with a random smooth profile ``a`` and a
    random monotone time profile ``s``, shrunk until it fits the ball.
    """
    rng = np.random.default_rng(rng)
    times = np.linspace(0.0, T, steps + 1)
    x = rho0.nodes()
    profile = np.zeros(rho0.values.shape)
    for _ in range(3):
        k = rng.integers(1, 4, size=rho0.dim)
        profile += rng.normal() * np.cos(2 * np.pi * (x @ k) / rho0.torus_len + rng.uniform(0, 2 * np.pi))
    power = rng.uniform(0.5, 2.0)
    shape = (times / T) ** power
    amp = rng.uniform(0.2, 1.0) * hz.r
    for _ in range(60):
        vals = np.clip(rho0.values[None] + amp * shape.reshape((-1,) + (1,) * rho0.dim) * profile, 0.0, None)
        vals[0] = rho0.values
        path = DensityPath(times, vals, rho0.dim, rho0.torus_len, rho0.grid_pts)
        if weighted_norm(path, hz.gamma, ks) <= hz.r:
            return path
        amp *= 0.7
    raise NumericalError("could not fit a random path into the ball; is ||rho0|| <= r?")

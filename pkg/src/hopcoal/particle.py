"""Exact stochastic simulation of hopping and coalescing particles on a torus.

Events are generated by thinning.  Unscreened envelope rates are

* pair ``{x, y}`` coalesces at rate ``eps q1 (beta*beta)(x - y)`` with the new
  particle placed at ``z ~ beta(z-x) beta(z-y)`` (a Gaussian of width
  ``sigma1/sqrt 2`` around the pair midpoint),
* each particle jumps at rate ``q2`` to ``y ~ j(y - x)``,

and a proposal is accepted with probability equal to the screening product
``prod_u exp(-eps phi(target - u))`` over the remaining particles.  Since the
potentials are nonnegative this product never exceeds one, so rejected
proposals only advance the clock and the dynamics is simulated exactly.

The weak-interaction scaling multiplies ``c1``, ``phi1`` and ``phi2`` by
``eps``, samples the initial Poisson field at intensity ``rho0 / eps`` and
reports ``eps x`` the empirical density.  The dynamics itself uses the kernels
it is given, so callers pass ``ks.scaled(eps)`` (as :func:`run_replicas` does).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import NumericalError, ValidationError
from .harmonic import Configuration
from .kernels import KernelSet, wrap
from .kinetic import DensityField, DensityPath

DEFAULT_PARTICLE_CAP = 1_000_000
REFRESH_EVERY = 512


@dataclass
class SimState:
    """Mutable state of one replica.

    Particles live in fixed slots; ``alive`` marks occupied ones.  The
    symmetric matrix ``pair`` holds the coalescence envelope rates between
    live slots and is updated incrementally after each accepted event.
    """

    positions: np.ndarray
    alive: np.ndarray
    time: float
    epsilon: float
    torus_len: float
    rng: np.random.Generator
    seed: object = None
    counters: dict = field(default_factory=lambda: {"proposals": 0, "coalescences": 0, "jumps": 0, "rejections": 0})
    pair: Optional[np.ndarray] = field(default=None, repr=False)
    pair_rowsum: Optional[np.ndarray] = field(default=None, repr=False)
    events: Optional[list] = field(default=None, repr=False)
    _since_refresh: int = field(default=0, repr=False)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def count(self) -> int:
        return int(self.alive.sum())

    def points(self) -> np.ndarray:
        return self.positions[self.alive]

    def configuration(self) -> Configuration:
        return Configuration(self.points(), dim=self.dim)


@dataclass(frozen=True)
class Snapshot:
    time: float
    positions: np.ndarray
    epsilon: float


@dataclass
class EmpiricalDensity:
    edges: list
    counts: np.ndarray
    replicas: int
    epsilon: float

    @property
    def bin_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    @property
    def scale(self) -> float:
        return self.epsilon / (self.bin_volume * self.replicas)

    @property
    def estimate(self) -> np.ndarray:
        return self.scale * self.counts


# --------------------------------------------------------------------------
# initial data


def _interpolate(rho0: DensityField, pts: np.ndarray) -> np.ndarray:
    coords = (pts / rho0.dx).T
    return ndimage.map_coordinates(rho0.values, coords, order=1, mode="grid-wrap")


def init_poisson_state(
    rho0: Union[DensityField, float],
    eps: float,
    seed,
    dim: Optional[int] = None,
    torus_len: Optional[float] = None,
    cap: int = DEFAULT_PARTICLE_CAP,
) -> SimState:
    """Poisson configuration with intensity ``rho0 / eps``.

    ``rho0`` is a grid field (linearly interpolated, sampled by thinning) or a
    constant, in which case ``dim`` and ``torus_len`` are required.
    """
    if not 0 < eps <= 1:
        raise ValidationError(f"epsilon: must lie in (0, 1], got {eps}")
    rng = np.random.default_rng(seed)
    if isinstance(rho0, DensityField):
        dim, torus_len = rho0.dim, rho0.torus_len
        if rho0.values.min() < 0:
            raise ValidationError("initial density must be nonnegative")
        top, mass = float(rho0.values.max()), rho0.mass()
    else:
        if dim is None or torus_len is None:
            raise ValidationError("a constant initial density needs dim and torus_len")
        if rho0 < 0:
            raise ValidationError("initial density must be nonnegative")
        top = float(rho0)
        mass = top * torus_len**dim
    if mass / eps > cap:
        raise ValidationError(f"expected particle count {mass / eps:.3g} exceeds the cap {cap}")
    volume = torus_len**dim
    n = rng.poisson(top * volume / eps) if top > 0 else 0
    pts = rng.random((n, dim)) * torus_len
    if isinstance(rho0, DensityField) and n:
        keep = rng.random(n) * top < _interpolate(rho0, pts)
        pts = pts[keep]
    return SimState(
        positions=pts,
        alive=np.ones(len(pts), dtype=bool),
        time=0.0,
        epsilon=float(eps),
        torus_len=float(torus_len),
        rng=rng,
        seed=seed,
    )


# --------------------------------------------------------------------------
# rates and events


def _pair_rates_to(state: SimState, ks: KernelSet, i: int) -> np.ndarray:
    rates = ks.q1 * ks.pair(state.positions - state.positions[i])
    rates[~state.alive] = 0.0
    rates[i] = 0.0
    return rates


def _build_pair_matrix(state: SimState, ks: KernelSet):
    pos = state.positions
    n = len(pos)
    if ks.q1 > 0 and n > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        mat = ks.q1 * ks.pair(diff)
        np.fill_diagonal(mat, 0.0)
        mat[~state.alive, :] = 0.0
        mat[:, ~state.alive] = 0.0
    else:
        mat = np.zeros((n, n))
    state.pair = mat
    state.pair_rowsum = mat.sum(axis=1)
    state._since_refresh = 0


def proposal_rates(state: SimState, ks: KernelSet) -> tuple[np.ndarray, np.ndarray]:
    """Envelope rates: ``(pair matrix over live slots, jump rate per live particle)``.

    Entry ``[a, b]`` of the pair matrix is the rate of the unordered pair made
    of the ``a``-th and ``b``-th live particles.
    """
    if state.pair is None:
        _build_pair_matrix(state, ks)
    live = np.flatnonzero(state.alive)
    return state.pair[np.ix_(live, live)].copy(), np.full(len(live), ks.q2)


def _update_slot(state: SimState, ks: KernelSet, i: int):
    """Recompute row and column ``i`` of the pair matrix after slot ``i`` changed."""
    old = state.pair[i].copy()
    new = _pair_rates_to(state, ks, i) if state.alive[i] else np.zeros_like(old)
    state.pair[i] = new
    state.pair[:, i] = new
    state.pair_rowsum += new - old
    state.pair_rowsum[i] = new.sum()


def _screen_accept(state: SimState, phi, target: np.ndarray, exclude: Sequence[int]) -> float:
    mask = state.alive.copy()
    mask[list(exclude)] = False
    others = state.positions[mask]
    if len(others) == 0:
        return 1.0
    energy = float(phi(target - others).sum())
    return math.exp(-energy)


def step(state: SimState, ks: KernelSet) -> SimState:
    """Advance the state through one proposal (accepted or rejected).

    If no event can ever happen the clock is set to infinity.
    """
    if state.count == 0:
        raise ValidationError("cannot step an empty state")
    if state.pair is None or state._since_refresh >= REFRESH_EVERY:
        _build_pair_matrix(state, ks)
    rng = state.rng
    n_alive = state.count
    pair_total = 0.5 * float(state.pair_rowsum.sum())
    jump_total = ks.q2 * n_alive
    total = pair_total + jump_total
    if total <= 0:
        state.time = math.inf
        return state
    state.time += rng.exponential(1.0 / total)
    state.counters["proposals"] += 1
    length = state.torus_len

    if rng.random() * total < pair_total:
        weights = np.clip(state.pair_rowsum, 0.0, None)
        i = int(rng.choice(len(weights), p=weights / weights.sum()))
        row = state.pair[i]
        j = int(rng.choice(len(row), p=row / row.sum()))
        x, y = state.positions[i], state.positions[j]
        mid = x + 0.5 * wrap(y - x, length)
        while True:
            z = (mid + rng.normal(0.0, ks.sigma1 / math.sqrt(2.0), size=state.dim)) % length
            if not np.any(np.all(state.positions[state.alive] == z, axis=1)):
                break
        p_acc = _screen_accept(state, ks._phi1, z, (i, j))
        if p_acc > 1.0 + 1e-12:
            raise NumericalError("screening acceptance exceeded one")
        if rng.random() < p_acc:
            state.positions[i] = z
            state.alive[j] = False
            _update_slot(state, ks, j)
            _update_slot(state, ks, i)
            state.counters["coalescences"] += 1
            state._since_refresh += 1
            if state.events is not None:
                state.events.append((state.time, "coalesce", tuple(x), tuple(y), tuple(z)))
        else:
            state.counters["rejections"] += 1
    else:
        live = np.flatnonzero(state.alive)
        i = int(live[rng.integers(len(live))])
        x = state.positions[i].copy()
        while True:
            y = (x + rng.normal(0.0, ks.sigma2, size=state.dim)) % length
            if not np.any(np.all(state.positions[state.alive] == y, axis=1)):
                break
        p_acc = _screen_accept(state, ks._phi2, y, (i,))
        if p_acc > 1.0 + 1e-12:
            raise NumericalError("screening acceptance exceeded one")
        if rng.random() < p_acc:
            state.positions[i] = y
            if ks.q1 > 0:
                _update_slot(state, ks, i)
                state._since_refresh += 1
            state.counters["jumps"] += 1
            if state.events is not None:
                state.events.append((state.time, "jump", tuple(x), (), tuple(y)))
        else:
            state.counters["rejections"] += 1
    return state


def run(
    state: SimState,
    T: float,
    snapshot_times: Sequence[float],
    ks: KernelSet,
    cap: int = DEFAULT_PARTICLE_CAP,
    log_events: bool = False,
) -> list[Snapshot]:
    """Simulate up to time ``T`` and return the configurations at ``snapshot_times``."""
    snaps_t = np.asarray(snapshot_times, dtype=float)
    if np.any(np.diff(snaps_t) < 0) or (len(snaps_t) and (snaps_t[0] < state.time or snaps_t[-1] > T)):
        raise ValidationError("snapshot times must be sorted within [current time, T]")
    if state.count > cap:
        raise ValidationError(f"particle count {state.count} exceeds the cap {cap}")
    if log_events and state.events is None:
        state.events = []
    out = []
    k = 0
    while k < len(snaps_t):
        # the configuration is constant until the next proposal fires
        current = state.points().copy()
        if state.count:
            step(state, ks)
        else:
            state.time = math.inf
        while k < len(snaps_t) and snaps_t[k] < state.time:
            out.append(Snapshot(float(snaps_t[k]), current, state.epsilon))
            k += 1
    return out


# --------------------------------------------------------------------------
# mesoscopic observables


def bin_edges(dim: int, torus_len: float, grid_pts: int, cells_per_bin: int) -> list[np.ndarray]:
    """Histogram edges aligned with a kinetic grid of ``grid_pts`` cells per side."""
    if grid_pts % cells_per_bin:
        raise ValidationError(f"cells_per_bin={cells_per_bin} does not divide grid_pts={grid_pts}")
    nb = grid_pts // cells_per_bin
    return [np.linspace(0.0, torus_len, nb + 1)] * dim


def empirical_density(snapshots: Sequence[Snapshot], edges: list, grid_dx: Optional[float] = None) -> EmpiricalDensity:
    """Scaled histogram ``eps * counts / (bin volume * replicas)`` of the given snapshots."""
    if len(snapshots) == 0:
        raise ValidationError("empirical density needs at least one replica")
    if grid_dx is not None:
        for e in edges:
            ratio = (e[1] - e[0]) / grid_dx
            if abs(ratio - round(ratio)) > 1e-9 or abs(e[0]) > 1e-12:
                raise ValidationError("bins are not aligned with the kinetic grid")
    eps = snapshots[0].epsilon
    counts = np.zeros(tuple(len(e) - 1 for e in edges))
    for s in snapshots:
        if len(s.positions):
            c, _ = np.histogramdd(s.positions, bins=edges)
            counts += c
    return EmpiricalDensity(list(edges), counts, len(snapshots), eps)


def bin_average(rho: DensityField, cells_per_bin: int) -> np.ndarray:
    """Exact bin averages of the periodic piecewise-linear interpolant of ``rho``."""
    v = rho.values
    for axis in range(rho.dim):
        nxt = np.roll(v, -1, axis=axis)
        cell = 0.5 * (v + nxt)  # average over each grid cell
        shape = list(cell.shape)
        shape[axis : axis + 1] = [shape[axis] // cells_per_bin, cells_per_bin]
        v = cell.reshape(shape).mean(axis=axis + 1)
    return v


# --------------------------------------------------------------------------
# replicas and the scaling sweep


def _replica(args):
    rho0, eps, seed, ks, T, times = args
    state = init_poisson_state(rho0, eps, np.random.SeedSequence(seed))
    return run(state, T, times, ks.scaled(eps))


def run_replicas(
    rho0: DensityField,
    eps: float,
    replicas: int,
    T: float,
    snapshot_times: Sequence[float],
    ks: KernelSet,
    seed: int,
    tag: Sequence[int] = (),
    workers: int = 1,
) -> list[list[Snapshot]]:
    """Independent replicas with seeds derived from ``(seed, *tag, index)``."""
    if replicas < 1:
        raise ValidationError("replicas: need at least one")
    jobs = [(rho0, eps, [seed, *tag, r], ks, T, list(snapshot_times)) for r in range(replicas)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_replica, jobs))
    return [_replica(j) for j in jobs]


def _l1(estimate: np.ndarray, reference: np.ndarray, bin_volume: float) -> float:
    return float(np.abs(estimate - reference).sum() * bin_volume)


def vlasov_sweep(
    eps_list: Sequence[float],
    replicas: int,
    rho0: DensityField,
    T: float,
    ks: KernelSet,
    reference: DensityPath,
    cells_per_bin: int = 8,
    seed: int = 0,
    bootstrap: int = 200,
    workers: int = 1,
) -> list[dict]:
    """L1 distance between the eps-scaled empirical density at ``T`` and the kinetic solution.

    Returns one row per ``eps`` with a 95% normal interval built
    from the bootstrap standard error over replicas.
    """
    eps_arr = np.asarray(eps_list, dtype=float)
    if len(eps_arr) == 0 or np.any(eps_arr <= 0) or np.any(eps_arr > 1) or np.any(np.diff(eps_arr) >= 0):
        raise ValidationError("eps values must lie in (0, 1] and be strictly descending")
    if replicas < 1:
        raise ValidationError("replicas: need at least one")
    if not math.isclose(reference.times[-1], T, rel_tol=1e-9):
        raise ValidationError("reference path does not end at T")
    flagged = not reference.info.get("guaranteed", True)
    edges = bin_edges(rho0.dim, rho0.torus_len, rho0.grid_pts, cells_per_bin)
    ref = bin_average(reference.field(len(reference.times) - 1), cells_per_bin)
    rows = []
    for e_idx, eps in enumerate(eps_arr):
        runs = run_replicas(rho0, float(eps), replicas, T, [T], ks, seed, tag=(e_idx,), workers=workers)
        snaps = [r[0] for r in runs]
        dens = empirical_density(snaps, edges, rho0.dx)
        err = _l1(dens.estimate, ref, dens.bin_volume)
        per = np.stack([empirical_density([s], edges).counts for s in snaps])
        rng = np.random.default_rng([seed, e_idx, 10**6])
        boot = np.empty(bootstrap)
        for b in range(bootstrap):
            pick = rng.integers(0, replicas, size=replicas)
            est = dens.scale * per[pick].sum(axis=0)
            boot[b] = _l1(est, ref, dens.bin_volume)
        se = float(boot.std(ddof=1)) if bootstrap > 1 else 0.0
        lo, hi = max(err - 1.96 * se, 0.0), err + 1.96 * se
        rows.append(
            {
                "epsilon": float(eps),
                "l1_error": err,
                "ci_low": float(lo),
                "ci_high": float(hi),
                "mean_count": float(np.mean([len(s.positions) for s in snaps])),
                "replicas": replicas,
                "flagged": flagged,
            }
        )
    return rows


def nonincreasing_within_ci(rows: Sequence[dict]) -> bool:
    """Each error is no larger than its predecessor up to overlapping intervals."""
    return all(b["ci_low"] <= a["ci_high"] for a, b in zip(rows[:-1], rows[1:]))

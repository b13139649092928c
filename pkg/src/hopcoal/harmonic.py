"""Harmonic analysis on finite configurations.

Functions on finite configurations ("quasi-observables") are evaluated in
batches: a batch of ``B`` configurations of common size ``n`` is an array of
shape ``(B, n, d)``.  Any callable accepting such an array and returning
shape ``(B,)`` can be fed to the transforms below; :class:`OrderFunction`
is the usual way to build one from its symmetric components ``G^(n)``.

The operations here enumerate subsets and are meant as verification tools at
desk scale, hence the hard caps on configuration size.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .kernels import KernelSet, c1_eval, c2_eval, phi1_eval, phi2_eval, torus_grid

K_CAP = 20
STAR_CAP = 12
LHAT_CAP = 8
L_CAP = 12
MIN_POINTS_PER_WIDTH = 8

ConfigFunction = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# configurations and order functions


class Configuration:
    """A finite set of distinct points, stored in lexicographic order."""

    __slots__ = ("points",)

    def __init__(self, points, dim: Optional[int] = None):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, dim if dim is not None else (pts.shape[-1] if pts.ndim == 2 else 1))
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValidationError(f"points must have shape (n, d), got {pts.shape}")
        if len(pts):
            order = np.lexsort(pts.T[::-1])
            pts = pts[order]
            if len(pts) > 1 and np.any(np.all(pts[1:] == pts[:-1], axis=1)):
                raise ValidationError("configuration points must be pairwise distinct")
        pts.setflags(write=False)
        self.points = pts

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return iter(self.points)

    def __eq__(self, other) -> bool:
        return isinstance(other, Configuration) and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"Configuration({self.points.tolist()})"

    def union(self, extra) -> "Configuration":
        return Configuration(np.concatenate([self.points, np.atleast_2d(extra)]), dim=self.dim)

    def without(self, *indices: int) -> "Configuration":
        keep = np.setdiff1d(np.arange(len(self)), indices)
        return Configuration(self.points[keep], dim=self.dim)


def as_batch(eta) -> tuple[np.ndarray, bool]:
    """Return ``(X, single)`` with ``X`` of shape ``(B, n, d)``."""
    if isinstance(eta, Configuration):
        return eta.points[None], True
    x = np.asarray(eta, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValidationError(f"expected a Configuration, (n, d) or (B, n, d) array, got shape {x.shape}")


def _unbatch(v: np.ndarray, single: bool):
    return float(v[0]) if single else v


class OrderFunction:
    """G on finite configurations given by its symmetric components.

    ``components[n]`` maps an array ``(B, n, d)`` to ``(B,)``; ``G^(0)`` may be a
    plain number.  Orders missing from ``components`` evaluate to ``tail`` if
    given, otherwise to zero.  ``sup_bound(n)`` optionally bounds ``|G^(n)|``
    (used for series truncation estimates).
    """

    def __init__(
        self,
        components: Mapping[int, object],
        tail: Optional[ConfigFunction] = None,
        sup_bound: Optional[Callable[[int], float]] = None,
    ):
        self.components = dict(components)
        self.tail = tail
        self.sup_bound = sup_bound

    @property
    def max_order(self) -> Optional[int]:
        if self.tail is not None:
            return None
        return max(self.components, default=0)

    @classmethod
    def everywhere(cls, func: ConfigFunction, sup_bound=None) -> "OrderFunction":
        """A G defined by one batched callable at every order."""
        return cls({}, tail=func, sup_bound=sup_bound)

    @classmethod
    def indicator(cls, order: int, value: float = 1.0) -> "OrderFunction":
        """``value`` on configurations of size ``order``, zero elsewhere."""
        return cls({order: float(value)})

    def component(self, n: int):
        if n in self.components:
            return self.components[n]
        return self.tail

    def __call__(self, eta):
        x, single = as_batch(eta)
        comp = self.component(x.shape[1])
        if comp is None:
            out = np.zeros(x.shape[0])
        elif callable(comp):
            out = np.broadcast_to(np.asarray(comp(x), dtype=float), (x.shape[0],)).astype(float)
        else:
            out = np.full(x.shape[0], float(comp))
        return _unbatch(out, single)


def exp_vector(f: Callable[[np.ndarray], np.ndarray], eta):
    """``e(f, eta)``: product of ``f`` over the points of ``eta`` (1 for the empty set)."""
    x, single = as_batch(eta)
    if x.shape[1] == 0:
        return _unbatch(np.ones(x.shape[0]), single)
    return _unbatch(np.prod(f(x), axis=1), single)


def product_function(f: Callable[[np.ndarray], np.ndarray], sup: Optional[float] = None) -> OrderFunction:
    """The quasi-observable ``eta -> e(f, eta)`` at every order."""
    bound = (lambda n: sup**n) if sup is not None else None
    return OrderFunction.everywhere(lambda x: exp_vector(f, x), sup_bound=bound)


# --------------------------------------------------------------------------
# K-transform, inverse, star convolution


def _check_cap(n: int, cap: int, what: str):
    if n > cap:
        raise ValidationError(f"{what}: configuration size {n} exceeds the cap {cap}")


def _eval(g, x: np.ndarray) -> np.ndarray:
    return np.asarray(g(x), dtype=float).reshape(x.shape[0])


def k_transform(g, gamma):
    """``(KG)(gamma)``: sum of ``G`` over all subconfigurations of ``gamma``."""
    x, single = as_batch(gamma)
    n = x.shape[1]
    _check_cap(n, K_CAP, "k_transform")
    top = n
    if isinstance(g, OrderFunction) and g.max_order is not None:
        top = min(n, g.max_order)
    total = np.zeros(x.shape[0])
    for k in range(top + 1):
        for idx in itertools.combinations(range(n), k):
            total += _eval(g, x[:, list(idx)])
    return _unbatch(total, single)


def k_inverse(f, eta):
    """``(K^-1 F)(eta) = sum over xi in eta of (-1)^|eta \\ xi| F(xi)``."""
    x, single = as_batch(eta)
    n = x.shape[1]
    _check_cap(n, K_CAP, "k_inverse")
    total = np.zeros(x.shape[0])
    for k in range(n + 1):
        sign = -1.0 if (n - k) % 2 else 1.0
        for idx in itertools.combinations(range(n), k):
            total += sign * _eval(f, x[:, list(idx)])
    return _unbatch(total, single)


def k_image(g) -> ConfigFunction:
    """``KG`` as a batched callable."""
    return lambda x: k_transform(g, np.asarray(x))


def _subset_values(g, x: np.ndarray) -> dict[int, np.ndarray]:
    n = x.shape[1]
    out = {}
    for mask in range(1 << n):
        idx = [i for i in range(n) if mask >> i & 1]
        out[mask] = _eval(g, x[:, idx])
    return out


def star_convolution(g1, g2, eta):
    """``(G1 * G2)(eta) = sum_{xi in eta} G1(xi) sum_{zeta in xi} G2(eta \\ xi u zeta)``."""
    x, single = as_batch(eta)
    n = x.shape[1]
    _check_cap(n, STAR_CAP, "star_convolution")
    v1 = _subset_values(g1, x)
    v2 = _subset_values(g2, x)
    full = (1 << n) - 1
    total = np.zeros(x.shape[0])
    for xi in range(1 << n):
        rest = full & ~xi
        inner = np.zeros(x.shape[0])
        # iterate over submasks zeta of xi
        zeta = xi
        while True:
            inner += v2[rest | zeta]
            if zeta == 0:
                break
            zeta = (zeta - 1) & xi
        total += v1[xi] * inner
    return _unbatch(total, single)


# --------------------------------------------------------------------------
# Lebesgue-Poisson integration


def sample_poisson_config(box, intensity: float, rng) -> Configuration:
    """Homogeneous Poisson sample of the given intensity in ``prod [0, box_i)``."""
    box = np.atleast_1d(np.asarray(box, dtype=float))
    if intensity < 0:
        raise ValidationError(f"intensity: must be nonnegative, got {intensity}")
    rng = np.random.default_rng(rng)
    n = rng.poisson(intensity * float(np.prod(box)))
    return Configuration(rng.random((n, box.size)) * box, dim=box.size)


@dataclass
class LPIntegrator:
    """How to integrate against the Lebesgue-Poisson measure restricted to a box."""

    mode: str = "series"
    box: Sequence[float] = (1.0,)
    order_cap: int = 8
    samples: int = 100_000
    seed: int = 0
    node_budget: int = 400_000
    max_nodes: int = 24

    def __post_init__(self):
        self.box = tuple(float(b) for b in np.atleast_1d(self.box))
        if self.mode not in ("series", "monte_carlo"):
            raise ValidationError(f"mode: must be 'series' or 'monte_carlo', got {self.mode!r}")
        if any(b <= 0 for b in self.box):
            raise ValidationError("box: side lengths must be positive")

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def volume(self) -> float:
        return float(np.prod(self.box))


def _gauss_box(box: Sequence[float], q: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes ``(q^d, d)`` and weights on the box."""
    t, w = np.polynomial.legendre.leggauss(q)
    axes = [(0.5 * (t + 1.0) * b, 0.5 * w * b) for b in box]
    nodes = np.stack(np.meshgrid(*[a[0] for a in axes], indexing="ij"), axis=-1).reshape(-1, len(box))
    weights = np.ones(1)
    for _, wa in axes:
        weights = np.multiply.outer(weights, wa).ravel()
    return nodes, weights


def _tensor_term(g, n: int, integ: LPIntegrator, chunk: int = 200_000) -> float:
    d = integ.dim
    q = int(max(2, min(integ.max_nodes, math.floor(integ.node_budget ** (1.0 / (n * d)) + 1e-9))))
    nodes, weights = _gauss_box(integ.box, q)
    m = len(nodes)
    total = 0.0
    count = m**n
    for start in range(0, count, chunk):
        flat = np.arange(start, min(count, start + chunk))
        digits = np.stack(np.unravel_index(flat, (m,) * n), axis=-1)  # (B, n)
        x = nodes[digits]
        w = np.prod(weights[digits], axis=-1)
        total += float(np.dot(w, _eval(g, x)))
    return total


def _tail_bound(g, integ: LPIntegrator) -> float:
    cap = integ.order_cap
    if isinstance(g, OrderFunction):
        if g.max_order is not None and g.max_order <= cap:
            return 0.0
        if g.sup_bound is not None:
            vol = integ.volume
            total, n = 0.0, cap + 1
            while n < cap + 400:
                term = math.exp(n * math.log(vol) - math.lgamma(n + 1)) * g.sup_bound(n) if vol > 0 else 0.0
                total += term
                if n > vol and term < 1e-17 * max(total, 1e-300):
                    break
                n += 1
            return total
    return math.inf


def _draw_poisson(rng, box, vol: float, samples: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Sizes of ``samples`` Poisson(1) configurations and their points, grouped by size."""
    sizes = rng.poisson(vol, size=samples)
    pts = [rng.random((k, len(box))) * np.asarray(box) for k in sizes]
    return sizes, pts


def _group_by_size(sizes: np.ndarray, pts: list[np.ndarray]):
    for n in np.unique(sizes):
        idx = np.flatnonzero(sizes == n)
        yield int(n), idx, np.stack([pts[i] for i in idx])


def lp_integrate(g, integ: LPIntegrator, tol: Optional[float] = None) -> tuple[float, float]:
    """Integral of ``G`` against the Lebesgue-Poisson measure on the box.

    Returns ``(value, error)``: in series mode the error is a bound on the
    omitted orders, in Monte Carlo mode the standard error.
    """
    d = integ.dim
    if integ.mode == "series":
        bound = _tail_bound(g, integ)
        if tol is not None and bound > tol:
            raise ValidationError(f"series truncation bound {bound:.3g} exceeds tolerance {tol:.3g}")
        top = integ.order_cap
        if isinstance(g, OrderFunction) and g.max_order is not None:
            top = min(top, g.max_order)
        value = float(_eval(g, np.zeros((1, 0, d)))[0])
        for n in range(1, top + 1):
            value += _tensor_term(g, n, integ) / math.factorial(n)
        return value, bound

    if integ.samples < 1:
        raise ValidationError("samples: Monte Carlo integration needs at least one sample")
    rng = np.random.default_rng(integ.seed)
    vals = _mc_values(lambda x: _eval(g, x), rng, integ)
    scale = math.exp(integ.volume)
    return scale * float(vals.mean()), scale * _stderr(vals)


def _stderr(vals: np.ndarray) -> float:
    if len(vals) < 2:
        return math.inf
    return float(vals.std(ddof=1) / math.sqrt(len(vals)))


def _mc_values(func, rng, integ: LPIntegrator) -> np.ndarray:
    sizes, pts = _draw_poisson(rng, integ.box, integ.volume, integ.samples)
    out = np.empty(integ.samples)
    for _, idx, x in _group_by_size(sizes, pts):
        out[idx] = func(x)
    return out


# --------------------------------------------------------------------------
# Minlos lemma checks


@dataclass
class IdentityReport:
    name: str
    lhs: float
    rhs: float
    discrepancy: float
    tolerance: float
    lhs_err: float = 0.0
    rhs_err: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.discrepancy <= self.tolerance)


def _all_zero_order(g, n: int) -> bool:
    return isinstance(g, OrderFunction) and g.max_order is not None and n > g.max_order


def _concat(*parts: np.ndarray) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def minlos_check(g, h, integ: LPIntegrator, variant: str, x_nodes: int = 16) -> IdentityReport:
    """Evaluate both sides of a Minlos-lemma identity independently.

    Variants and the signature expected of ``h``:

    ``two_part``   ``h(X1, X2)`` -- the two-configuration function ``H(eta, xi)``
    ``one_point``  ``h(x, X)``   with ``x`` of shape ``(B, d)``
    ``two_point``  ``h(x, y, X)``, symmetric in ``x, y``

    Left sides use Gauss-Legendre quadrature in the explicit point variables
    and Monte Carlo over the configuration variables; right sides are Monte
    Carlo over a single configuration.  Independent streams feed the two sides.
    """
    if integ.mode != "monte_carlo":
        raise ValidationError("minlos_check needs a monte_carlo integrator")
    root = np.random.SeedSequence(integ.seed)
    rng_l, rng_r = (np.random.default_rng(s) for s in root.spawn(2))
    vol, d, S = integ.volume, integ.dim, integ.samples
    quad_err = 0.0

    if variant == "two_part":
        s1, p1 = _draw_poisson(rng_l, integ.box, vol, S)
        s2, p2 = _draw_poisson(rng_l, integ.box, vol, S)
        lvals = np.zeros(S)
        for n, m in {(int(a), int(b)) for a, b in zip(s1, s2)}:
            if _all_zero_order(g, n + m):
                continue
            idx = np.flatnonzero((s1 == n) & (s2 == m))
            x1 = np.stack([p1[i] for i in idx]).reshape(len(idx), n, d)
            x2 = np.stack([p2[i] for i in idx]).reshape(len(idx), m, d)
            lvals[idx] = _eval(g, _concat(x1, x2)) * np.asarray(h(x1, x2), dtype=float)
        lscale = math.exp(2 * vol)

        def right(x):
            n = x.shape[1]
            inner = np.zeros(x.shape[0])
            for mask in range(1 << n):
                a = [i for i in range(n) if mask >> i & 1]
                b = [i for i in range(n) if not mask >> i & 1]
                inner += np.asarray(h(x[:, a], x[:, b]), dtype=float)
            return _eval(g, x) * inner

    elif variant == "one_point":
        nodes, weights = _gauss_box(integ.box, x_nodes)
        nodes_lo, weights_lo = _gauss_box(integ.box, x_nodes // 2 + 2)

        def inner_x(x, nd, wt):
            b, n = x.shape[:2]
            q = len(nd)
            xx = np.repeat(x, q, axis=0)
            pt = np.tile(nd, (b, 1))
            vals = _eval(g, _concat(xx, pt[:, None, :])) * np.asarray(h(pt, xx), dtype=float)
            return vals.reshape(b, q) @ wt

        sizes, pts = _draw_poisson(rng_l, integ.box, vol, S)
        lvals, lvals_lo = np.zeros(S), np.zeros(S)
        for n, idx, x in _group_by_size(sizes, pts):
            if _all_zero_order(g, n + 1):
                continue
            x = x.reshape(len(idx), n, d)
            lvals[idx] = inner_x(x, nodes, weights)
            lvals_lo[idx] = inner_x(x, nodes_lo, weights_lo)
        lscale = math.exp(vol)
        quad_err = lscale * abs(lvals.mean() - lvals_lo.mean())

        def right(x):
            n = x.shape[1]
            total = np.zeros(x.shape[0])
            for i in range(n):
                rest = np.delete(x, i, axis=1)
                total += np.asarray(h(x[:, i], rest), dtype=float)
            return _eval(g, x) * total

    elif variant == "two_point":
        nodes, weights = _gauss_box(integ.box, x_nodes)
        nodes_lo, weights_lo = _gauss_box(integ.box, x_nodes // 2 + 2)

        def inner_xy(x, nd, wt):
            b, n = x.shape[:2]
            q = len(nd)
            ii, jj = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
            ii, jj = ii.ravel(), jj.ravel()
            pairs = q * q
            out = np.zeros(b)
            step = max(1, 400_000 // max(pairs, 1))
            for s in range(0, b, step):
                xb = x[s : s + step]
                bb = xb.shape[0]
                xx = np.repeat(xb, pairs, axis=0)
                px = np.tile(nd[ii], (bb, 1))
                py = np.tile(nd[jj], (bb, 1))
                vals = _eval(g, _concat(xx, px[:, None, :], py[:, None, :])) * np.asarray(h(px, py, xx), dtype=float)
                out[s : s + bb] = vals.reshape(bb, pairs) @ (wt[ii] * wt[jj])
            return 0.5 * out

        sizes, pts = _draw_poisson(rng_l, integ.box, vol, S)
        lvals, lvals_lo = np.zeros(S), np.zeros(S)
        for n, idx, x in _group_by_size(sizes, pts):
            if _all_zero_order(g, n + 2):
                continue
            x = x.reshape(len(idx), n, d)
            lvals[idx] = inner_xy(x, nodes, weights)
            lvals_lo[idx] = inner_xy(x, nodes_lo, weights_lo)
        lscale = math.exp(vol)
        quad_err = lscale * abs(lvals.mean() - lvals_lo.mean())

        def right(x):
            n = x.shape[1]
            total = np.zeros(x.shape[0])
            for i, j in itertools.combinations(range(n), 2):
                rest = np.delete(x, [i, j], axis=1)
                total += np.asarray(h(x[:, i], x[:, j], rest), dtype=float)
            return _eval(g, x) * total

    else:
        raise ValidationError(f"variant: unknown Minlos variant {variant!r}")

    sizes, pts = _draw_poisson(rng_r, integ.box, vol, S)
    rvals = np.zeros(S)
    for n, idx, x in _group_by_size(sizes, pts):
        if _all_zero_order(g, n):
            continue
        rvals[idx] = right(x.reshape(len(idx), n, d))
    rscale = math.exp(vol)

    lhs, lerr = lscale * float(lvals.mean()), lscale * _stderr(lvals)
    rhs, rerr = rscale * float(rvals.mean()), rscale * _stderr(rvals)
    combined = math.hypot(lerr, rerr)
    return IdentityReport(
        name=f"minlos_{variant}",
        lhs=lhs,
        rhs=rhs,
        discrepancy=abs(lhs - rhs),
        tolerance=3.0 * (combined + quad_err),
        lhs_err=lerr,
        rhs_err=rerr,
        extra={"quadrature": quad_err},
    )


# --------------------------------------------------------------------------
# generator L and its K-conjugate


@dataclass(frozen=True)
class QuadGrid:
    """Uniform periodic rectangle-rule grid for the z- and y-integrals."""

    points_per_dim: int

    def nodes(self, ks: KernelSet) -> tuple[np.ndarray, float]:
        widths = ks.active_widths()
        h = ks.torus_len / self.points_per_dim
        if widths and h > min(widths) / MIN_POINTS_PER_WIDTH:
            raise ValidationError(
                f"quadrature grid too coarse: spacing {h:.4g} > min width {min(widths):.4g} / {MIN_POINTS_PER_WIDTH}"
            )
        return torus_grid(ks, self.points_per_dim)


def big_c1(ks: KernelSet, x, y, z) -> ConfigFunction:
    """``C1_{x,y;z}(eta) = c1(x,y;z) e(t1_z - 1, eta)`` as a batched callable.

    ``z`` may be a single point ``(d,)`` or one point per batch row ``(B, d)``.
    """
    z = np.asarray(z, dtype=float)
    rate = c1_eval(ks, x, y, z)

    def func(eta: np.ndarray) -> np.ndarray:
        zz = z if z.ndim == 2 else np.broadcast_to(z, (eta.shape[0], z.shape[-1]))
        factor = np.prod(np.exp(-phi1_eval(ks, zz[:, None, :] - eta)) - 1.0, axis=1) if eta.shape[1] else 1.0
        return rate * factor

    return func


def big_c2(ks: KernelSet, x, y) -> ConfigFunction:
    """``C2_{x;y}(eta) = c2(x;y) e(t2_y - 1, eta)``; ``y`` may be batched as in :func:`big_c1`."""
    y = np.asarray(y, dtype=float)
    rate = c2_eval(ks, x, y)

    def func(eta: np.ndarray) -> np.ndarray:
        yy = y if y.ndim == 2 else np.broadcast_to(y, (eta.shape[0], y.shape[-1]))
        factor = np.prod(np.exp(-phi2_eval(ks, yy[:, None, :] - eta)) - 1.0, axis=1) if eta.shape[1] else 1.0
        return rate * factor

    return func


def _screen(ks: KernelSet, phi, targets: np.ndarray, others: np.ndarray) -> np.ndarray:
    if len(others) == 0:
        return np.ones(len(targets))
    return np.exp(-phi(ks, targets[:, None, :] - others[None, :, :]).sum(axis=1))


def _with_points(rest: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Batch ``(Q, n+1, d)`` of ``rest`` joined with each row of ``pts``."""
    q = len(pts)
    return np.concatenate([np.broadcast_to(rest, (q,) + rest.shape), pts[:, None, :]], axis=1)


def generator_L_apply(g, gamma, ks: KernelSet, quad: QuadGrid) -> float:
    """Quadrature value of ``(L KG)(gamma)`` for a finite configuration."""
    gamma = gamma if isinstance(gamma, Configuration) else Configuration(gamma, dim=ks.dim)
    n = len(gamma)
    _check_cap(n, L_CAP, "generator_L_apply")
    nodes, w = quad.nodes(ks)
    pts = gamma.points
    f = k_image(g)
    f_gamma = float(f(pts[None])[0])
    total = 0.0
    if ks.q1 > 0:
        for i, j in itertools.combinations(range(n), 2):
            rest = np.delete(pts, [i, j], axis=0)
            rate = c1_eval(ks, pts[i], pts[j], nodes) * _screen(ks, phi1_eval, nodes, rest)
            total += w * float(np.dot(rate, f(_with_points(rest, nodes)) - f_gamma))
    if ks.q2 > 0:
        for i in range(n):
            rest = np.delete(pts, i, axis=0)
            rate = c2_eval(ks, pts[i], nodes) * _screen(ks, phi2_eval, nodes, rest)
            total += w * float(np.dot(rate, f(_with_points(rest, nodes)) - f_gamma))
    return total


def lhat_apply(g, eta, ks: KernelSet, quad: QuadGrid) -> float:
    """Quadrature value of ``(L-hat G)(eta)`` built from C1/C2, H1/H2 and star convolution."""
    eta = eta if isinstance(eta, Configuration) else Configuration(eta, dim=ks.dim)
    n = len(eta)
    _check_cap(n, LHAT_CAP, "lhat_apply")
    nodes, w = quad.nodes(ks)
    q = len(nodes)
    pts = eta.points
    total = 0.0

    def joined(x: np.ndarray, *extra: np.ndarray) -> np.ndarray:
        parts = [x] + [np.broadcast_to(e, (x.shape[0], e.shape[-1]))[:, None, :] for e in extra]
        return np.concatenate(parts, axis=1)

    if ks.q1 > 0:
        for i, j in itertools.combinations(range(n), 2):
            x, y = pts[i], pts[j]
            rest = np.broadcast_to(np.delete(pts, [i, j], axis=0), (q, n - 2, ks.dim))
            c1 = big_c1(ks, x, y, nodes)

            def h1(xi, x=x, y=y):
                return _eval(g, joined(xi, nodes)) - _eval(g, joined(xi, x)) - _eval(g, joined(xi, y)) - _eval(
                    g, joined(xi, x, y)
                )

            total += w * float(np.sum(star_convolution(c1, h1, rest)))
    if ks.q2 > 0:
        for i in range(n):
            x = pts[i]
            rest = np.broadcast_to(np.delete(pts, i, axis=0), (q, n - 1, ks.dim))
            c2 = big_c2(ks, x, nodes)

            def h2(xi, x=x):
                return _eval(g, joined(xi, nodes)) - _eval(g, joined(xi, x))

            total += w * float(np.sum(star_convolution(c2, h2, rest)))
    return total


def k_lhat(g, gamma, ks: KernelSet, quad: QuadGrid) -> float:
    """``K(L-hat G)(gamma)``, summing :func:`lhat_apply` over subconfigurations."""
    gamma = gamma if isinstance(gamma, Configuration) else Configuration(gamma, dim=ks.dim)
    n = len(gamma)
    total = 0.0
    for k in range(n + 1):
        for idx in itertools.combinations(range(n), k):
            total += lhat_apply(g, Configuration(gamma.points[list(idx)], dim=ks.dim), ks, quad)
    return total


# --------------------------------------------------------------------------
# random test objects


def random_order_function(rng, max_order: int, dim: int, box, positive: bool = True) -> OrderFunction:
    """A smooth bounded symmetric G with components up to ``max_order``."""
    rng = np.random.default_rng(rng)
    box = np.atleast_1d(np.asarray(box, dtype=float))
    comps: dict[int, object] = {0: float(rng.uniform(0.2, 1.0) if positive else rng.normal())}
    for n in range(1, max_order + 1):
        amp = float(rng.uniform(0.2, 1.0) if positive else rng.normal())
        freq = rng.uniform(0.5, 2.0, size=dim) * 2 * np.pi / box
        phase = float(rng.uniform(0, 2 * np.pi))
        mix = float(rng.uniform(0.1, 0.6))

        def comp(x, amp=amp, freq=freq, phase=phase, mix=mix):
            s = np.sum(np.cos(x @ freq + phase), axis=1)
            return amp * (1.0 + mix * np.tanh(s))

        comps[n] = comp
    return OrderFunction(comps)


def random_point_function(rng, dim: int, box, low: float = 0.1, high: float = 1.0):
    """A smooth positive function of one point, vectorized over leading axes."""
    rng = np.random.default_rng(rng)
    box = np.atleast_1d(np.asarray(box, dtype=float))
    base = float(rng.uniform(low, high))
    amp = float(rng.uniform(0, 0.5)) * base
    freq = rng.uniform(0.5, 2.0, size=dim) * 2 * np.pi / box
    phase = float(rng.uniform(0, 2 * np.pi))
    return lambda x: base + amp * np.sin(np.asarray(x) @ freq + phase)


# --------------------------------------------------------------------------
# identity batteries


def _relative_report(name: str, lhs: float, rhs: float, rtol: float, **extra) -> IdentityReport:
    scale = max(abs(lhs), abs(rhs))
    disc = abs(lhs - rhs) / scale if scale > 0 else 0.0
    return IdentityReport(name, float(lhs), float(rhs), float(disc), rtol, extra=extra)


def _random_gamma(rng, size: int, dim: int, box) -> Configuration:
    return Configuration(rng.random((size, dim)) * np.asarray(box, dtype=float), dim=dim)


def algebra_battery(cases: int = 100, seed: int = 0, max_size: int = 5, dim: int = 1, rtol: float = 1e-10):
    """Randomized checks of K(G1*G2) = KG1 KG2, K e(f) = e(1+f) and K^-1 K = id.

    Returns ``{identity name: [IdentityReport, ...]}`` with relative discrepancies.
    """
    box = [4.0] * dim
    out: dict[str, list[IdentityReport]] = {"k_star": [], "k_prod": [], "k_inverse": []}
    for c in range(cases):
        rng = np.random.default_rng([seed, c])
        size = int(rng.integers(0, max_size + 1))
        gamma = _random_gamma(rng, size, dim, box)
        # full order range, so no side vanishes identically at any size
        g1 = random_order_function(rng, max_size, dim, box, positive=False)
        g2 = random_order_function(rng, max_size, dim, box, positive=False)
        lhs = k_transform(lambda x: star_convolution(g1, g2, x), gamma)
        rhs = k_transform(g1, gamma) * k_transform(g2, gamma)
        out["k_star"].append(_relative_report("k_star", lhs, rhs, rtol, size=size))

        # 1 + f stays away from zero so the subset sum is well conditioned
        f = random_point_function(rng, dim, box, low=-0.5, high=1.0)
        lhs = k_transform(product_function(f), gamma)
        rhs = exp_vector(lambda x: 1.0 + f(x), gamma)
        out["k_prod"].append(_relative_report("k_prod", lhs, rhs, rtol, size=size))

        lhs = k_inverse(k_image(g1), gamma)
        out["k_inverse"].append(_relative_report("k_inverse", lhs, g1(gamma), rtol, size=size))
    return out


def _minlos_h(variant: str, f, f2):
    if variant == "two_part":

        def h(a, b):
            va = np.prod(f(a), axis=1) if a.shape[1] else np.ones(a.shape[0])
            vb = np.prod(f2(b), axis=1) if b.shape[1] else np.ones(b.shape[0])
            return va * vb * ((a.shape[1] + b.shape[1]) <= 2)

    elif variant == "one_point":

        def h(x, X):
            return f(x) * (X.shape[1] <= 1)

    elif variant == "two_point":

        def h(x, y, X):
            return f(x) * f(y) * (X.shape[1] <= 1)

    else:
        raise ValidationError(f"variant: unknown Minlos variant {variant!r}")
    return h


def minlos_battery(variant: str, cases: int = 20, seed: int = 0, samples: int = 100_000, box_len: float = 4.0):
    """Fixed-seed Monte Carlo checks of one Minlos variant on ``[0, box_len)``."""
    box = [box_len]
    reports = []
    for c in range(cases):
        rng = np.random.default_rng([seed, c])
        g = random_order_function(rng, 2, 1, box)
        f = random_point_function(rng, 1, box)
        f2 = random_point_function(rng, 1, box)
        integ = LPIntegrator(mode="monte_carlo", box=box, samples=samples, seed=[seed, c, 1])
        rep = minlos_check(g, _minlos_h(variant, f, f2), integ, variant)
        rep.name = f"minlos_{variant}"
        reports.append(rep)
    return reports


def conjugation_battery(
    ks_list: Mapping[str, KernelSet],
    cases: int = 4,
    seed: int = 0,
    max_size: int = 3,
    points_per_dim: int = 256,
    rtol: float = 1e-6,
):
    """Check ``K(L-hat G)(gamma) = L(KG)(gamma)`` for each kernel set and ``|gamma| <= max_size``."""
    quad = QuadGrid(points_per_dim)
    reports = []
    for label, ks in ks_list.items():
        box = [ks.torus_len] * ks.dim
        for c in range(cases):
            rng = np.random.default_rng([seed, c])
            g = random_order_function(rng, max_size + 1, ks.dim, box, positive=False)
            for size in range(max_size + 1):
                gamma = _random_gamma(rng, size, ks.dim, box)
                lhs = k_lhat(g, gamma, ks, quad)
                rhs = generator_L_apply(g, gamma, ks, quad)
                rep = _relative_report("conjugation", lhs, rhs, rtol, kernels=label, size=size)
                reports.append(rep)
    return reports

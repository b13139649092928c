"""Translation-invariant rate kernels and repulsion potentials on a torus.

The model needs a coalescence kernel ``c1(x, y; z)``, a jump kernel
``c2(x; y)`` and two nonnegative potentials ``phi1``, ``phi2``.  We use the
separable Gaussian family

    c1(x, y; z) = q1 * beta(z - x) * beta(z - y)
    c2(x; y)    = q2 * j(y - x)
    phi_i(v)    = a_i * exp(-|v|^2 / (2 w_i^2))

where ``beta`` and ``j`` are normalized Gaussians of widths ``sigma1`` and
``sigma2``.  Every kernel is periodized on the torus ``[0, L)^d`` by an image
sum, truncated once the omitted tail mass drops below ``IMAGE_TAIL``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError

IMAGE_TAIL = 1e-12
MIN_BOX_RATIO = 12.0

KERNEL_KEYS = ("dim", "torus_len", "q1", "sigma1", "q2", "sigma2", "a1", "w1", "a2", "w2")


def wrap(v: np.ndarray, length: float) -> np.ndarray:
    """Minimal-image displacement in ``[-L/2, L/2)``."""
    return (np.asarray(v, dtype=float) + 0.5 * length) % length - 0.5 * length


def _image_count(width: float, length: float) -> int:
    # smallest K such that images beyond K carry mass below IMAGE_TAIL
    k = 0
    while math.erfc((k + 0.5) * length / (width * math.sqrt(2.0))) >= IMAGE_TAIL:
        k += 1
    return k


@dataclass(frozen=True)
class _PeriodicGaussian:
    """``amp * exp(-|v|^2 / (2 s^2))`` summed over torus images."""

    amp: float
    width: float
    dim: int
    length: float
    shifts: np.ndarray = field(repr=False, compare=False, hash=False)

    @classmethod
    def build(cls, amp: float, width: float, dim: int, length: float) -> "_PeriodicGaussian":
        k = _image_count(width, length)
        shifts = np.array(list(itertools.product(range(-k, k + 1), repeat=dim)), dtype=float) * length
        return cls(float(amp), float(width), dim, float(length), shifts)

    def __call__(self, v) -> np.ndarray:
        v = wrap(np.asarray(v, dtype=float), self.length)
        if self.amp == 0.0:
            return np.zeros(v.shape[:-1])
        # (..., 1, d) - (S, d) -> (..., S, d)
        r2 = np.sum((v[..., None, :] - self.shifts) ** 2, axis=-1)
        return self.amp * np.exp(-r2 / (2.0 * self.width**2)).sum(axis=-1)


def _gauss_norm(width: float, dim: int) -> float:
    return (2.0 * math.pi * width**2) ** (-dim / 2.0)


@dataclass(frozen=True)
class KernelSet:
    """Kernel parameters with their periodized evaluators and exact integrals.

    Points and displacements are arrays whose last axis has length ``dim``.
    """

    dim: int
    torus_len: float
    q1: float
    sigma1: float
    q2: float
    sigma2: float
    a1: float
    w1: float
    a2: float
    w2: float

    def __post_init__(self):
        d, length = self.dim, self.torus_len
        builders = {
            "_beta": (_gauss_norm(self.sigma1, d), self.sigma1),
            "_jump": (_gauss_norm(self.sigma2, d), self.sigma2),
            # beta convolved with itself: integral of beta(z-x) beta(z-y) over z
            "_pair": (_gauss_norm(math.sqrt(2.0) * self.sigma1, d), math.sqrt(2.0) * self.sigma1),
            "_phi1": (self.a1, self.w1),
            "_phi2": (self.a2, self.w2),
        }
        for name, (amp, width) in builders.items():
            object.__setattr__(self, name, _PeriodicGaussian.build(amp, width, d, length))

    @property
    def volume(self) -> float:
        return self.torus_len**self.dim

    @property
    def c1_int(self) -> float:
        return self.q1

    @property
    def c2_int(self) -> float:
        return self.q2

    @property
    def phi1_int(self) -> float:
        return self.a1 * (self.w1 * math.sqrt(2.0 * math.pi)) ** self.dim

    @property
    def phi2_int(self) -> float:
        return self.a2 * (self.w2 * math.sqrt(2.0 * math.pi)) ** self.dim

    def params(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in KERNEL_KEYS}

    def replace(self, **changes) -> "KernelSet":
        p = self.params()
        p.update(changes)
        return make_kernels(p)

    def scaled(self, eps: float) -> "KernelSet":
        """Kernels under the weak-interaction scaling c1 -> eps c1, phi_i -> eps phi_i."""
        return self.replace(q1=eps * self.q1, a1=eps * self.a1, a2=eps * self.a2)

    def active_widths(self) -> list[float]:
        """Widths of the kernels with nonzero amplitude."""
        out = []
        for amp, width in ((self.q1, self.sigma1), (self.q2, self.sigma2), (self.a1, self.w1), (self.a2, self.w2)):
            if amp > 0:
                out.append(width)
        return out

    # single-argument profiles
    def beta(self, v) -> np.ndarray:
        return self._beta(v)

    def jump(self, v) -> np.ndarray:
        return self._jump(v)

    def pair(self, v) -> np.ndarray:
        return self._pair(v)


def make_kernels(config: Mapping[str, Any]) -> KernelSet:
    """Validate a parameter record and build the corresponding :class:`KernelSet`."""
    unknown = set(config) - set(KERNEL_KEYS)
    if unknown:
        raise ValidationError(f"unknown kernel parameter(s): {sorted(unknown)}")
    missing = [k for k in KERNEL_KEYS if k not in config]
    if missing:
        raise ValidationError(f"missing kernel parameter(s): {missing}")
    dim = config["dim"]
    if dim not in (1, 2):
        raise ValidationError(f"dim: must be 1 or 2, got {dim!r}")
    vals = {k: float(config[k]) for k in KERNEL_KEYS if k != "dim"}
    for k in ("torus_len", "sigma1", "sigma2", "w1", "w2"):
        if not vals[k] > 0 or not math.isfinite(vals[k]):
            raise ValidationError(f"{k}: must be positive and finite, got {vals[k]!r}")
    for k in ("q1", "q2", "a1", "a2"):
        if not vals[k] >= 0 or not math.isfinite(vals[k]):
            raise ValidationError(f"{k}: must be nonnegative and finite, got {vals[k]!r}")
    widest = max(vals["sigma1"], vals["sigma2"], vals["w1"], vals["w2"])
    if vals["torus_len"] <= MIN_BOX_RATIO * widest:
        raise ValidationError(
            f"torus_len: must exceed {MIN_BOX_RATIO:g} x the widest kernel ({widest:g}), got {vals['torus_len']:g}"
        )
    return KernelSet(dim=int(dim), **vals)


def c1_eval(ks: KernelSet, x, y, z) -> np.ndarray:
    """Coalescence rate density for the pair ``x, y`` merging at ``z``."""
    z = np.asarray(z, dtype=float)
    return ks.q1 * ks.beta(z - np.asarray(x, dtype=float)) * ks.beta(z - np.asarray(y, dtype=float))


def c2_eval(ks: KernelSet, x, y) -> np.ndarray:
    """Jump rate density from ``x`` to ``y``."""
    return ks.q2 * ks.jump(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))


def phi1_eval(ks: KernelSet, v) -> np.ndarray:
    return ks._phi1(v)


def phi2_eval(ks: KernelSet, v) -> np.ndarray:
    return ks._phi2(v)


def screening(ks: KernelSet, which: int, target, others) -> np.ndarray:
    """Product of ``exp(-phi(target - u))`` over the points ``u`` in ``others``.

    ``target`` has shape ``(..., d)`` and ``others`` shape ``(..., n, d)``
    (broadcast against ``target``); the result lies in ``(0, 1]``.
    """
    phi = ks._phi1 if which == 1 else ks._phi2
    target = np.asarray(target, dtype=float)
    others = np.asarray(others, dtype=float)
    if others.shape[-2] == 0:
        return np.ones(np.broadcast_shapes(target.shape[:-1], others.shape[:-2]))
    return np.exp(-phi(target[..., None, :] - others).sum(axis=-1))


def torus_grid(ks: KernelSet, points_per_dim: int) -> tuple[np.ndarray, float]:
    """Uniform grid nodes ``(M^d, d)`` and the rectangle-rule weight."""
    h = ks.torus_len / points_per_dim
    axes = [np.arange(points_per_dim) * h] * ks.dim
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ks.dim)
    return nodes, h**ks.dim

"""Gaussian mollifiers and the smoothing kernel ``K = xi * xi``.

Two modes are supported:

``free_gaussian``
    ``xi`` is the untruncated Gaussian with standard deviation ``epsilon`` on
    ``R^d``, so ``K`` is the Gaussian with variance ``2 epsilon^2`` per axis.
    ``K`` is strictly positive on every displacement, which is what the
    dynamics need.

``truncated_gaussian``
    ``xi`` is the Gaussian restricted to the box and renormalized there. ``K``
    is a convolution over the overlap window and vanishes at displacements of
    ``2L`` along an axis, so a positive floor ``kappa`` is required before it
    can drive the dynamics.

Both modes add the constant floor ``kappa`` to every kernel value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erf

from .measures import Domain, Measure, atoms_of


class KernelMode(str, Enum):
    FREE_GAUSSIAN = "free_gaussian"
    TRUNCATED_GAUSSIAN = "truncated_gaussian"


class KernelFloorError(ValueError):
    pass


@dataclass(frozen=True)
class MollifierSpec:
    epsilon: float
    domain: Domain
    mode: KernelMode = KernelMode.FREE_GAUSSIAN
    kappa: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", KernelMode(self.mode))
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")

    @property
    def dimension(self) -> int:
        return self.domain.dimension


@dataclass(frozen=True)
class KernelConstants:
    k_min: float
    k_max: float
    lip: float

    def __post_init__(self):
        if not (0 < self.k_min <= self.k_max < math.inf) or not self.lip > 0:
            raise ValueError(f"invalid kernel constants {self}")


def normalization_constant(epsilon: float, domain: Domain) -> float:
    """Mass of the ``epsilon``-Gaussian on the box, ``(2 Phi(L/eps) - 1)^d``."""
    return float(erf(domain.half_width / (epsilon * math.sqrt(2.0))) ** domain.dimension)


def _points(x, d: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or (d > 1 and arr.ndim == 1 and arr.shape[0] == d):
        arr = arr.reshape(1, d)
    elif arr.ndim == 1:
        arr = arr[:, None]
    return arr


def mollifier_density(x, spec: MollifierSpec) -> np.ndarray | float:
    d = spec.dimension
    pts = _points(x, d)
    eps = spec.epsilon
    vals = (2.0 * math.pi * eps**2) ** (-d / 2) * np.exp(-np.sum(pts**2, axis=1) / (2 * eps**2))
    if spec.mode is KernelMode.TRUNCATED_GAUSSIAN:
        inside = spec.domain.contains(pts)
        if not np.all(inside):
            raise ValueError(f"point {pts[~inside][0].tolist()} lies outside the domain")
        vals = vals / normalization_constant(eps, spec.domain)
    return vals[0] if np.ndim(x) <= 1 and pts.shape[0] == 1 else vals


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _truncated_axis_kernel(s: np.ndarray, eps: float, half_width: float) -> np.ndarray:
    """1-D convolution of the truncated mollifier with itself, by composite Gauss-Legendre."""
    s = np.asarray(s, dtype=float)
    L = half_width
    lo = np.maximum(-L, s - L)
    hi = np.minimum(L, s + L)
    width = np.clip(hi - lo, 0.0, None)
    # panels no wider than eps/2 for the widest window
    n_panels = max(1, int(math.ceil(2 * L / (0.5 * eps))))
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    t = (edges[:-1, None] + (edges[1:, None] - edges[:-1, None]) * (_GL_NODES[None, :] + 1) / 2).ravel()
    tw = (np.diff(edges)[:, None] * _GL_WEIGHTS[None, :] / 2).ravel()
    y = lo[..., None] + width[..., None] * t
    c1 = erf(L / (eps * math.sqrt(2.0)))
    norm = 1.0 / (2.0 * math.pi * eps**2 * c1**2)
    integrand = np.exp(-(y**2 + (s[..., None] - y) ** 2) / (2 * eps**2))
    return norm * width * np.sum(integrand * tw, axis=-1)


class _AxisCache:
    def __init__(self, eps: float, half_width: float, n_points: int = 4096):
        grid = np.linspace(-2 * half_width, 2 * half_width, n_points)
        self.half_width = half_width
        self.spline = CubicSpline(grid, _truncated_axis_kernel(grid, eps, half_width))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = self.spline(np.clip(s, -2 * self.half_width, 2 * self.half_width))
        return np.where(np.abs(s) <= 2 * self.half_width, np.clip(out, 0.0, None), 0.0)


_CACHES: dict[tuple[float, float], _AxisCache] = {}


def _axis_cache(spec: MollifierSpec) -> _AxisCache:
    key = (spec.epsilon, spec.domain.half_width)
    if key not in _CACHES:
        _CACHES[key] = _AxisCache(*key)
    return _CACHES[key]


def kernel_eval(z, spec: MollifierSpec, cached: bool = False) -> np.ndarray | float:
    """``K_eps(z)`` for displacement(s) ``z`` of shape ``(d,)`` or ``(n, d)``."""
    d = spec.dimension
    pts = _points(z, d)
    eps = spec.epsilon
    if spec.mode is KernelMode.FREE_GAUSSIAN:
        vals = (4.0 * math.pi * eps**2) ** (-d / 2) * np.exp(-np.sum(pts**2, axis=1) / (4 * eps**2))
    else:
        axis_fn = _axis_cache(spec) if cached else (
            lambda s: np.where(
                np.abs(s) <= 2 * spec.domain.half_width,
                _truncated_axis_kernel(s, eps, spec.domain.half_width),
                0.0,
            )
        )
        vals = np.prod(axis_fn(pts), axis=1)
    vals = vals + spec.kappa
    return vals[0] if np.ndim(z) <= 1 and pts.shape[0] == 1 else vals


def kernel_matrix(x, y, spec: MollifierSpec, cached: bool = True) -> np.ndarray:
    """Matrix ``K_eps(x_i - y_j)``."""
    d = spec.dimension
    xa = _points(x, d)
    ya = _points(y, d)
    eps = spec.epsilon
    if spec.mode is KernelMode.FREE_GAUSSIAN:
        sq = np.zeros((xa.shape[0], ya.shape[0]))
        for k in range(d):
            sq += np.subtract.outer(xa[:, k], ya[:, k]) ** 2
        return (4.0 * math.pi * eps**2) ** (-d / 2) * np.exp(-sq / (4 * eps**2)) + spec.kappa
    out = np.ones((xa.shape[0], ya.shape[0]))
    for k in range(d):
        diff = np.subtract.outer(xa[:, k], ya[:, k])
        if cached:
            out *= _axis_cache(spec)(diff)
        else:
            out *= np.where(
                np.abs(diff) <= 2 * spec.domain.half_width,
                _truncated_axis_kernel(diff, eps, spec.domain.half_width),
                0.0,
            )
    return out + spec.kappa


def kernel_convolve(measure: Measure, x, spec: MollifierSpec) -> np.ndarray | float:
    """``(K_eps * mu)(x)`` for a weighted ensemble or grid density."""
    pts, masses = atoms_of(measure)
    xa = _points(x, spec.dimension)
    vals = kernel_matrix(xa, pts, spec) @ masses
    return vals[0] if np.ndim(x) <= 1 and xa.shape[0] == 1 else vals


def kernel_constants(spec: MollifierSpec, eval_radius: float | None = None) -> KernelConstants:
    """Lower/upper bounds and Lipschitz constant of ``K_eps`` on ``|z| <= eval_radius``.

    The default radius is the full difference set of the box, ``2 L sqrt(d)``.
    In truncated mode the upper and Lipschitz bounds are the sup-of-mollifier
    bounds, and the lower bound uses the corner of the enclosing cube.
    """
    d = spec.dimension
    L = spec.domain.half_width
    radius = spec.domain.diameter if eval_radius is None else float(eval_radius)
    if radius > spec.domain.diameter * (1 + 1e-12):
        raise ValueError(f"eval_radius {radius} exceeds the difference set radius {spec.domain.diameter}")
    eps = spec.epsilon
    if spec.mode is KernelMode.FREE_GAUSSIAN:
        peak = (4.0 * math.pi * eps**2) ** (-d / 2)
        k_max = peak + spec.kappa
        k_min = peak * math.exp(-radius**2 / (4 * eps**2)) + spec.kappa
        lip = peak * math.exp(-0.5) / (math.sqrt(2.0) * eps)
    else:
        c = normalization_constant(eps, spec.domain)
        k_max = eps ** (-d) * (2 * math.pi) ** (-d / 2) / c + spec.kappa
        corner = min(radius, 2 * L)
        k_min = float(_truncated_axis_kernel(np.array(corner), eps, L)) ** d + spec.kappa
        if corner >= 2 * L:
            k_min = spec.kappa
        lip = eps ** (-(d + 1)) * (2 * math.pi) ** (-d / 2) * math.exp(-0.5) / c
    if not k_min > 0:
        raise KernelFloorError("kernel floor violated; increase kappa or use FreeGaussian")
    return KernelConstants(k_min=k_min, k_max=k_max, lip=lip)

"""Curvature of the seen loss around a latent: Hessian top eigenvalue,
Hutchinson trace and 2-D loss slices.

Everything is driven by a gradient callable. Hessian-vector products are
central differences of that gradient, so only first derivatives are needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attack import attack_loss_grad, seen_similarity
from .numerics import Mlp
from .tables import write_csv

GradFn = Callable[[np.ndarray], np.ndarray]
LossFn = Callable[[np.ndarray], float]


def default_step(z) -> float:
    return 1e-4 * (float(np.linalg.norm(z)) + 1.0)


def hvp(grad_fn: GradFn, z, v, h: float | None = None) -> np.ndarray:
    """Hessian times ``v`` from central differences of ``grad_fn``.

    ``v`` need not be unit length; it is normalized for the difference and
    the result rescaled, which keeps the step size meaningful.
    """
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != z.shape:
        raise ValueError(f"direction shape {v.shape} != point shape {z.shape}")
    h = default_step(z) if h is None else h
    if not h > 0:
        raise ValueError("h must be positive")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(z)
    u = v / norm
    out = (grad_fn(z + h * u) - grad_fn(z - h * u)) * (norm / (2.0 * h))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    converged: bool
    iterations: int


def top_eigenvalue(grad_fn: GradFn, z, iters: int = 1000, tol: float = 1e-12, seed: int = 0,
                   h: float | None = None) -> EigenEstimate:
    """Power iteration for the eigenvalue of largest magnitude.

    Iterating ``v <- Hv / |Hv|`` locks onto the magnitude-dominant direction;
    the signed value is the Rayleigh quotient there. Stops once successive
    quotients differ by at most ``tol * max(1, |lambda|)``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(z.shape)
    v /= np.linalg.norm(v)
    lam = None
    for k in range(1, iters + 1):
        w = hvp(grad_fn, z, v, h)
        quotient = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ArithmeticError("power iteration broke down on a zero vector")
        v = w / norm
        if lam is not None and abs(quotient - lam) <= tol * max(1.0, abs(quotient)):
            return EigenEstimate(quotient, True, k)
        lam = quotient
    return EigenEstimate(float(v @ hvp(grad_fn, z, v, h)), False, iters)


@dataclass(frozen=True)
class TraceEstimate:
    value: float
    stderr: float  # inf with a single probe
    probes: int


def hessian_trace(grad_fn: GradFn, z, probes: int = 64, seed: int = 0,
                  h: float | None = None) -> TraceEstimate:
    """Hutchinson estimate ``mean(v^T H v)`` over Rademacher probes."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    samples = np.empty(probes)
    for p in range(probes):
        v = rng.integers(0, 2, size=z.shape) * 2.0 - 1.0
        samples[p] = v @ hvp(grad_fn, z, v, h)
    stderr = float(np.std(samples, ddof=1) / math.sqrt(probes)) if probes > 1 else math.inf
    return TraceEstimate(float(np.mean(samples)), stderr, probes)


@dataclass(frozen=True)
class FlatnessStats:
    top_eigenvalue: float
    eigen_converged: bool
    trace: float
    trace_stderr: float
    probes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def flatness(grad_fn: GradFn, z, probes: int = 64, seed: int = 0, iters: int = 1000) -> FlatnessStats:
    eig = top_eigenvalue(grad_fn, z, iters=iters, seed=seed)
    tr = hessian_trace(grad_fn, z, probes=probes, seed=seed)
    return FlatnessStats(eig.value, eig.converged, tr.value, tr.stderr, tr.probes)


# -- loss slices ---------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceSlice:
    center: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    radius: float
    offsets: np.ndarray  # (resolution,), shared by both axes
    loss: np.ndarray  # loss[i, j] at center + offsets[i] d1 + offsets[j] d2

    @property
    def resolution(self) -> int:
        return len(self.offsets)

    def rows(self):
        for i, a in enumerate(self.offsets):
            for j, b in enumerate(self.offsets):
                yield float(a), float(b), float(self.loss[i, j])

    def to_csv(self, path) -> None:
        write_csv(path, ["alpha", "beta", "loss"], self.rows())


def orthonormal_pair(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two random orthonormal directions by Gram-Schmidt."""
    if dim < 2:
        raise ValueError("need at least two dimensions for a 2-D slice")
    rng = np.random.default_rng(seed)
    while True:
        a, b = rng.standard_normal((2, dim))
        d1 = a / np.linalg.norm(a)
        b = b - (b @ d1) * d1
        nb = np.linalg.norm(b)
        if nb > 1e-8:
            d2 = b / nb
            # one more pass mops up rounding in the projection
            d2 = d2 - (d2 @ d1) * d1
            return d1, d2 / np.linalg.norm(d2)


def loss_surface_slice(loss_fn: LossFn, z, seed: int = 0, radius: float = 1.0,
                       resolution: int = 51) -> SurfaceSlice:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not radius > 0:
        raise ValueError("radius must be positive")
    z = np.asarray(z, dtype=np.float64)
    d1, d2 = orthonormal_pair(z.size, seed)
    # integer numerators keep the middle offset at exactly zero for odd grids
    steps = 2 * np.arange(resolution) - (resolution - 1)
    offsets = radius * steps / (resolution - 1)
    grid = np.empty((resolution, resolution))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            grid[i, j] = loss_fn(z + a * d1 + b * d2)
    return SurfaceSlice(z.copy(), d1, d2, float(radius), offsets, grid)


# -- the attack objective --------------------------------------------------------


def seen_objective(G: Mlp, E: Mlp, v) -> tuple[LossFn, GradFn]:
    """``1 - sim`` and its gradient; the shift puts the minimum value at 0."""

    def loss(z):
        return 1.0 - seen_similarity(z, G, E, v)

    def grad(z):
        return attack_loss_grad(z, G, E, v)

    return loss, grad

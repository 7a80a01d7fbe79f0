"""Pullback metric, Jacobians, discretized path energy, and the H1 inner product.

The latent space inherits its geometry from the decoder: the metric at a
latent point p is g(p) = J(p)^T J(p) with J the decoder Jacobian, so latent
distances measure how much the decoded output changes. All operations here
are pure given an immutable decoder and safe for concurrent use.

A decoder is any object with integer attributes latent_dim / output_dim and a
method forward(tape, z) mapping a (batch, latent_dim) Tensor to a
(batch, output_dim) Tensor built from tape primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor

__all__ = [
    "LatentPoint",
    "MetricTensor",
    "ConditionReport",
    "decode_batch",
    "jacobian",
    "pullback_metric",
    "discrete_energy",
    "segment_energies",
    "metric_condition_report",
    "h1_inner_product",
]


@dataclass
class LatentPoint:
    """Latent coordinates split into a fiber block and a base block."""

    fiber: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        self.fiber = np.atleast_1d(np.asarray(self.fiber, dtype=np.float64))
        self.base = np.atleast_1d(np.asarray(self.base, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.fiber.size + self.base.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.fiber, self.base])

    @classmethod
    def from_vector(cls, v, fiber_dim: int) -> "LatentPoint":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:fiber_dim], v[fiber_dim:])


@dataclass
class MetricTensor:
    """Symmetric PSD matrix representing the metric at one latent point."""

    matrix: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.matrix, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"metric must be square, got shape {g.shape}")
        asym = np.max(np.abs(g - g.T)) if g.size else 0.0
        if asym > 1e-10:
            raise ValueError(f"metric asymmetry {asym:.3e} exceeds 1e-10")
        g = 0.5 * (g + g.T)
        if np.min(np.linalg.eigvalsh(g)) < -1e-10:
            raise ValueError("metric has an eigenvalue below -1e-10; not PSD up to roundoff")
        self.matrix = g

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


@dataclass
class ConditionReport:
    """Extreme metric eigenvalues over a sample of latent points.

    bound_estimate = max(lambda_max, 1/lambda_min) estimates the two-sided
    comparability constant between the pullback and Euclidean metrics;
    degenerate flags a numerically rank-deficient metric somewhere in the
    sample (comparability fails there).
    """

    lambda_min: float
    lambda_max: float
    bound_estimate: float
    degenerate: bool


def _as_point_matrix(points, latent_dim) -> np.ndarray:
    if isinstance(points, np.ndarray):
        mat = np.atleast_2d(np.asarray(points, dtype=np.float64))
    else:
        pts = list(points)
        if pts and isinstance(pts[0], LatentPoint):
            mat = np.stack([p.vector() for p in pts])
        else:
            mat = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if mat.shape[1] != latent_dim:
        raise ValueError(f"points have dimension {mat.shape[1]}, decoder expects {latent_dim}")
    return mat


def decode_batch(decoder, points) -> np.ndarray:
    """Plain forward pass of the decoder over a matrix of latent points."""
    mat = _as_point_matrix(points, decoder.latent_dim)
    tape = Tape(record=False)
    return decoder.forward(tape, tape.constant(mat)).values


def jacobian(decoder, point) -> np.ndarray:
    """Exact decoder Jacobian at one latent point, shape (output_dim, latent_dim).

    Uses one sweep per latent coordinate (tangent propagation) or one reverse
    sweep per output coordinate, whichever needs fewer sweeps.
    """
    if isinstance(point, LatentPoint):
        vec = point.vector()
    else:
        vec = np.asarray(point, dtype=np.float64)
    d = decoder.latent_dim
    if vec.shape != (d,):
        raise ValueError(f"point has shape {vec.shape}, expected ({d},)")
    tape = Tape()
    z = Tensor(vec[None, :], requires_grad=True)
    out = decoder.forward(tape, z)
    d_out = out.values.shape[1]
    jac = np.empty((d_out, d))
    if d <= d_out:
        for i in range(d):
            seed = np.zeros((1, d))
            seed[0, i] = 1.0
            jac[:, i] = tape.tangent(out, {z: seed})[0]
    else:
        for r in range(d_out):
            seed = np.zeros((1, d_out))
            seed[0, r] = 1.0
            jac[r, :] = tape.backward(out, [z], seed=seed)[z][0]
    if not np.all(np.isfinite(jac)):
        raise ValueError("Jacobian contains non-finite entries")
    return jac


def pullback_metric(decoder, point) -> MetricTensor:
    """g = J^T J at the point; symmetric PSD by construction."""
    j = jacobian(decoder, point)
    return MetricTensor(j.T @ j)


def _path_matrix_and_steps(points, dt, latent_dim):
    steps = 1.0 / dt
    n_steps = int(round(steps))
    if n_steps < 1 or abs(steps - n_steps) > 1e-9:
        raise ValueError(f"1/dt must be a positive integer, got dt={dt}")
    mat = _as_point_matrix(points, latent_dim)
    if mat.shape[0] != n_steps + 1:
        raise ValueError(f"expected {n_steps + 1} path points for dt={dt}, got {mat.shape[0]}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("path points contain non-finite values")
    return mat, n_steps


def segment_energies(decoder, path_points, dt: float) -> np.ndarray:
    """Per-segment decoded displacement energies |out_{k+1} - out_k|^2 / dt."""
    mat, _ = _path_matrix_and_steps(path_points, dt, decoder.latent_dim)
    decoded = decode_batch(decoder, mat)
    diffs = np.diff(decoded, axis=0)
    return np.sum(diffs * diffs, axis=1) / dt


def discrete_energy(decoder, path_points, dt: float) -> float:
    """Riemann-sum path energy: nonnegative, zero iff all decoded points coincide."""
    return float(np.sum(segment_energies(decoder, path_points, dt)))


def metric_condition_report(decoder, sample_points) -> ConditionReport:
    """Extreme metric eigenvalues over a latent sample.

    A near-zero smallest eigenvalue flags a rank-deficient metric (the
    two-sided comparability with the Euclidean metric fails there).
    """
    pts = list(sample_points)
    if not pts:
        raise ValueError("need at least one sample point")
    lo, hi = np.inf, -np.inf
    for p in pts:
        eig = pullback_metric(decoder, p).eigenvalues()
        lo = min(lo, float(eig[0]))
        hi = max(hi, float(eig[-1]))
    degenerate = lo <= 1e-12
    bound = np.inf if degenerate else max(hi, 1.0 / lo)
    return ConditionReport(lambda_min=lo, lambda_max=hi,
                           bound_estimate=float(bound), degenerate=degenerate)


def h1_inner_product(phi, chi, step: float = 1e-4) -> float:
    """phi(0) chi(0) + integral of phi' chi', by central differences at interval
    midpoints and midpoint quadrature.

    The interval count is the requested 1/step rounded up to a power of two, so
    functions with dyadic breakpoints (hat bases) are integrated exactly.
    """
    if not 0 < step <= 1:
        raise ValueError("quadrature step must lie in (0, 1]")
    n = 1 << max(0, int(np.ceil(np.log2(1.0 / step))))
    grid = np.arange(n + 1) / n
    phi_v = _eval_on(phi, grid)
    chi_v = _eval_on(chi, grid)
    boundary = phi_v[0] * chi_v[0]
    # (f(t_{i+1}) - f(t_i)) / h is the central difference at the midpoint of
    # interval i; multiplying the two and summing over intervals is the
    # midpoint rule for the derivative product.
    return float(boundary + np.dot(np.diff(phi_v), np.diff(chi_v)) * n)


def _eval_on(fn, grid):
    try:
        vals = np.asarray(fn(grid), dtype=np.float64)
        if vals.shape == grid.shape:
            return vals
    except Exception:
        pass
    return np.asarray([float(fn(t)) for t in grid])

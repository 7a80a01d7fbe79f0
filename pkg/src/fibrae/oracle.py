"""Independent ground truths for transport: closed-form linear solutions,
analytic sphere geodesics, and brute-force lattice shortest paths.

These never share code with the solver they check: the linear oracle is a
least-squares formula, the sphere oracle is spherical trigonometry, and the
grid oracle is a shortest-path search over a decoded lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .autodiff import Tape, Tensor
from .geometry import LatentPoint, decode_batch

__all__ = [
    "IdentityDecoder",
    "LinearDecoder",
    "SphereDecoder",
    "linear_transport_oracle",
    "sphere_geodesic_oracle",
    "grid_geodesic_oracle",
    "GridGeodesicResult",
    "run_suite",
    "SUITES",
]


# -- debug decoders -------------------------------------------------------------


class IdentityDecoder:
    """Latent space decoded as itself: the metric is exactly Euclidean."""

    def __init__(self, dim: int):
        self.latent_dim = dim
        self.output_dim = dim

    def forward(self, tape: Tape, z: Tensor) -> Tensor:
        return tape.add(z, tape.constant(0.0))


class LinearDecoder:
    """Constant-Jacobian decoder out = z @ A^T with A partitioned [A_f | A_b]."""

    def __init__(self, matrix, fiber_dim: int):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("decoder matrix must be 2-D")
        if not 0 < fiber_dim < self.matrix.shape[1]:
            raise ValueError("fiber_dim must split the latent columns in two nonempty blocks")
        self.fiber_dim = fiber_dim
        self.latent_dim = self.matrix.shape[1]
        self.output_dim = self.matrix.shape[0]

    @property
    def fiber_block(self):
        return self.matrix[:, : self.fiber_dim]

    @property
    def base_block(self):
        return self.matrix[:, self.fiber_dim:]

    def forward(self, tape: Tape, z: Tensor) -> Tensor:
        return tape.matmul(z, tape.constant(self.matrix), transpose_b=True)


class SphereDecoder:
    """Unit-sphere chart (u, v) -> (cos u cos v, cos u sin v, sin u).

    Latitude u is the fiber coordinate, longitude v the base coordinate; the
    pullback metric is diag(1, cos^2 u).
    """

    latent_dim = 2
    output_dim = 3
    fiber_dim = 1

    def forward(self, tape: Tape, z: Tensor) -> Tensor:
        half_pi = tape.constant(np.pi / 2.0)
        u = tape.slice(z, (np.s_[:], np.s_[0:1]))
        v = tape.slice(z, (np.s_[:], np.s_[1:2]))
        cos_u = tape.sin(tape.add(u, half_pi))
        sin_u = tape.sin(u)
        cos_v = tape.sin(tape.add(v, half_pi))
        sin_v = tape.sin(v)
        return tape.concat([tape.mul(cos_u, cos_v), tape.mul(cos_u, sin_v), sin_u], axis=1)


# -- closed-form linear transport -------------------------------------------------


def linear_transport_oracle(decoder: LinearDecoder, start: LatentPoint, b2):
    """Minimal-energy endpoint for a constant metric, by least squares.

    The minimizer is the straight segment; the optimal fiber displacement
    solves (A_f^T A_f) df = -A_f^T A_b db, and the energy is the squared
    output displacement |A_f df + A_b db|^2 (the Riemann-sum convention,
    no 1/2 factor).
    """
    b2 = np.atleast_1d(np.asarray(b2, dtype=np.float64))
    db = b2 - start.base
    a_f, a_b = decoder.fiber_block, decoder.base_block
    gram = a_f.T @ a_f
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise ValueError("fiber block has rank-deficient Gram matrix; no unique minimizer")
    df = -np.linalg.solve(gram, a_f.T @ (a_b @ db))
    residual = a_f @ df + a_b @ db
    energy = float(residual @ residual)
    return LatentPoint(start.fiber + df, b2.copy()), energy


# -- analytic sphere geodesics -----------------------------------------------------


def sphere_geodesic_oracle(u1: float, v1: float, v2: float):
    """Shortest great-circle arc from (u1, v1) to the meridian v = v2.

    Valid away from chart degeneracies: |u1| < pi/2 - 0.2 and meridian
    separation below pi/2. Returns the foot-point latitude and the arc length
    arcsin(cos u1 sin |v2 - v1|) (point-to-great-circle distance).
    """
    if abs(u1) >= np.pi / 2.0 - 0.2:
        raise ValueError("start latitude too close to the poles for the chart")
    dv = abs(float(v2) - float(v1))
    if dv >= np.pi / 2.0:
        raise ValueError("meridian separation must stay below pi/2")
    sin_d = np.cos(u1) * np.sin(dv)
    length = float(np.arcsin(sin_d))
    cos_d = np.sqrt(1.0 - sin_d * sin_d)
    u2 = float(np.arcsin(np.sin(u1) / cos_d))
    return u2, length


# -- brute-force lattice geodesics ---------------------------------------------------


@dataclass
class GridGeodesicResult:
    """Discrete shortest path from a snapped start to the target base plane."""

    endpoint: LatentPoint
    length: float
    target_points: np.ndarray
    target_lengths: np.ndarray

    def runner_up_margin(self) -> float:
        """Relative length excess of the second-best distinct target endpoint."""
        if self.target_lengths.size < 2:
            return np.inf
        best = np.min(self.target_lengths)
        rest = np.sort(self.target_lengths)[1]
        return float((rest - best) / max(best, 1e-300))


def grid_geodesic_oracle(decoder, start: LatentPoint, b2, resolution: int = 48) -> GridGeodesicResult:
    """Shortest path over a decoded lattice from the start to {base = b2}.

    Fiber axes span [-1, 1]; base axes span the segment between the two base
    coordinates, so both fibers land on lattice planes. Edges connect full
    Moore neighborhoods (8 neighbors in 2-D, 26 in 3-D) and are weighted by
    the decoded displacement norm. Restricted to latent dim <= 3 and
    resolution <= 64 (memory guard).
    """
    m, n = start.fiber.size, start.base.size
    d = m + n
    if d > 3:
        raise ValueError("grid oracle supports latent dimension at most 3")
    if not 2 <= resolution <= 64:
        raise ValueError("resolution must lie in [2, 64]")
    b2 = np.atleast_1d(np.asarray(b2, dtype=np.float64))

    axes = [np.linspace(-1.0, 1.0, resolution + 1) for _ in range(m)]
    degenerate_base = bool(np.allclose(b2, start.base))
    for i in range(n):
        lo, hi = start.base[i], b2[i]
        axes.append(np.full(1, lo) if lo == hi else np.linspace(lo, hi, resolution + 1))
    shape = tuple(len(a) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.reshape(-1) for g in mesh], axis=1)
    decoded = decode_batch(decoder, points)

    n_nodes = points.shape[0]
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(d)], dtype=np.intp)
    offsets = [np.array(off) for off in np.ndindex(*(3,) * d)
               if any(o != 1 for o in off)]
    rows, cols, weights = [], [], []
    index_grid = np.arange(n_nodes).reshape(shape)
    for off in offsets:
        shift = off - 1
        src_slices, dst_slices = [], []
        for axis, s in enumerate(shift):
            if s == 0:
                src_slices.append(np.s_[:])
                dst_slices.append(np.s_[:])
            elif s == 1:
                src_slices.append(np.s_[:-1])
                dst_slices.append(np.s_[1:])
            else:
                src_slices.append(np.s_[1:])
                dst_slices.append(np.s_[:-1])
        src = index_grid[tuple(src_slices)].reshape(-1)
        dst = index_grid[tuple(dst_slices)].reshape(-1)
        if src.size == 0:
            continue
        w = np.linalg.norm(decoded[src] - decoded[dst], axis=1)
        rows.append(src)
        cols.append(dst)
        weights.append(w)
    graph = coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_nodes, n_nodes),
    ).tocsr()

    start_vec = np.concatenate([start.fiber, start.base])
    start_idx = int(np.argmin(np.linalg.norm(points - start_vec, axis=1)))
    dist = dijkstra(graph, directed=True, indices=start_idx)

    if degenerate_base:
        target_mask = np.ones(n_nodes, dtype=bool)
    else:
        target_mask = np.ones(shape, dtype=bool)
        for axis in range(m, d):
            idx = [np.s_[:]] * d
            idx[axis] = np.s_[-1:]
            keep = np.zeros(shape, dtype=bool)
            keep[tuple(idx)] = True
            target_mask &= keep
        target_mask = target_mask.reshape(-1)
    target_idx = np.nonzero(target_mask)[0]
    target_lengths = dist[target_idx]
    best = int(np.argmin(target_lengths))
    endpoint_vec = points[target_idx[best]]
    if degenerate_base:
        endpoint_vec = start_vec
    return GridGeodesicResult(
        endpoint=LatentPoint(endpoint_vec[:m].copy(), b2.copy()),
        length=float(np.min(target_lengths)),
        target_points=points[target_idx],
        target_lengths=target_lengths,
    )


# -- verification suites (consumed by tests and the CLI) -----------------------------


def _check(name, ok, detail):
    return {"name": name, "passed": bool(ok), "detail": detail}


def _linear_suite(rng=None):
    checks = []
    dec = LinearDecoder([[1.0, 1.0], [0.0, 1.0]], fiber_dim=1)
    end, energy = linear_transport_oracle(dec, LatentPoint([0.2], [0.0]), [1.0])
    checks.append(_check(
        "cross-coupled closed form",
        abs(end.fiber[0] + 0.8) < 1e-12 and abs(energy - 1.0) < 1e-12,
        f"f2={end.fiber[0]:.6f} energy={energy:.6f}",
    ))
    block = LinearDecoder([[1.0, 0.0], [0.0, 2.0]], fiber_dim=1)
    end2, _ = linear_transport_oracle(block, LatentPoint([0.2], [0.0]), [1.0])
    checks.append(_check(
        "block-diagonal keeps the fiber",
        abs(end2.fiber[0] - 0.2) < 1e-12,
        f"f2={end2.fiber[0]:.6f}",
    ))
    end3, e3 = linear_transport_oracle(dec, LatentPoint([0.2], [0.5]), [0.5])
    checks.append(_check(
        "coincident fibers give zero energy",
        abs(e3) < 1e-15 and abs(end3.fiber[0] - 0.2) < 1e-15,
        f"energy={e3:.3e}",
    ))
    rng = rng or np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        m = rng.integers(1, 3)
        n = rng.integers(1, 3)
        out_dim = int(rng.integers(m + n, 9))
        a = rng.normal(size=(out_dim, m + n))
        dec_r = LinearDecoder(a, fiber_dim=int(m))
        p = LatentPoint(rng.uniform(-0.5, 0.5, m), rng.uniform(-0.5, 0.5, n))
        b2 = rng.uniform(-0.5, 0.5, n)
        _, e_opt = linear_transport_oracle(dec_r, p, b2)
        naive_disp = dec_r.base_block @ (b2 - p.base)
        worst = max(worst, e_opt - float(naive_disp @ naive_disp))
    checks.append(_check(
        "closed-form energy never exceeds the naive straight path",
        worst <= 1e-12,
        f"max(optimal - naive) = {worst:.3e}",
    ))
    return checks


def _sphere_suite():
    checks = []
    u2, length = sphere_geodesic_oracle(0.0, 0.0, np.pi / 2.0 - 1e-9)
    checks.append(_check(
        "equator arc to a quarter-turn meridian",
        abs(u2) < 1e-9 and abs(length - np.pi / 2.0) < 1e-6,
        f"u2={u2:.2e} length={length:.6f}",
    ))
    u2b, lb = sphere_geodesic_oracle(0.4, 0.3, 0.3)
    checks.append(_check(
        "zero separation is a fixed point",
        abs(lb) < 1e-12 and abs(u2b - 0.4) < 1e-12,
        f"length={lb:.2e}",
    ))
    _, l_up = sphere_geodesic_oracle(0.5, 0.0, 1.2)
    _, l_down = sphere_geodesic_oracle(-0.5, 0.0, 1.2)
    checks.append(_check(
        "reflection symmetry in the equator",
        abs(l_up - l_down) < 1e-12,
        f"delta={abs(l_up - l_down):.2e}",
    ))
    return checks


def _grid_suite():
    checks = []
    ident = IdentityDecoder(2)
    start = LatentPoint([-0.5], [0.0])
    res = grid_geodesic_oracle(ident, start, [1.0], resolution=48)
    straight = np.linalg.norm(res.endpoint.vector() - start.vector())
    checks.append(_check(
        "identity lattice path within 5% of the straight line",
        res.length <= 1.05 * straight + 1e-12,
        f"grid={res.length:.4f} straight={straight:.4f}",
    ))
    res0 = grid_geodesic_oracle(ident, start, [0.0], resolution=16)
    checks.append(_check(
        "coincident fibers give a zero-length path",
        res0.length == 0.0 and np.allclose(res0.endpoint.vector(), start.vector()),
        f"length={res0.length}",
    ))
    sphere = SphereDecoder()
    res_s = grid_geodesic_oracle(sphere, LatentPoint([0.0], [0.0]), [np.pi / 2.0], resolution=48)
    _, analytic = sphere_geodesic_oracle(0.0, 0.0, np.pi / 2.0 - 1e-9)
    checks.append(_check(
        "sphere lattice path within 5% of the analytic arc",
        abs(res_s.length - analytic) <= 0.05 * analytic,
        f"grid={res_s.length:.4f} analytic={analytic:.4f}",
    ))
    return checks


SUITES = {"linear": _linear_suite, "sphere": _sphere_suite, "grid": _grid_suite}


def run_suite(name: str):
    """Run one named oracle self-check suite; returns its check records."""
    try:
        suite = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite '{name}', expected one of {sorted(SUITES)}") from None
    return suite()

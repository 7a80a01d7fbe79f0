"""Geodesic transport between fibers via an energy-minimizing path expansion.

A path on [0, 1] through latent space is expanded over the Faber-Schauder
system: the constant function, the identity ramp, and dyadic hat functions
normalized to unit H1 norm (so the system is orthonormal under the H1 inner
product). Endpoint constraints are built into the parameterization - the
start point and the base block of the end point are pinned coefficients,
never penalties - so every iterate is feasible by construction.

The solver minimizes the Riemann-sum energy of the decoded path (optionally
plus a pull toward the naive endpoint, which keeps high-dimensional solves
stable) by first-order descent over the free coefficients, starting from the
straight line to the naive-transport endpoint.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NumericalError, Tape, Tensor
from .geometry import LatentPoint

__all__ = [
    "FaberSchauderBasis",
    "GeodesicPath",
    "SolverConfig",
    "TransportResult",
    "basis_eval",
    "path_eval",
    "naive_transport",
    "solve_geodesic",
    "constant_speed_residual",
    "correspondence_map",
    "interpolate",
    "write_trace_csv",
    "write_correspondence_csv",
]


class FaberSchauderBasis:
    """Hat-function system on [0, 1] with unit-H1-norm normalization.

    Levels j = 0..depth-1 each contribute 2^j hats; together with the
    constant and the ramp the system has 2^depth + 1 members per coordinate,
    pairwise orthonormal under the H1 inner product. The hat (j, k) is
    supported on [k 2^-j, (k+1) 2^-j] and peaks at 2^(-j/2 - 1).
    """

    def __init__(self, depth: int):
        if depth < 0:
            raise ValueError("depth must be nonnegative")
        self.depth = int(depth)

    @property
    def size(self) -> int:
        return 2 ** self.depth + 1

    @property
    def hat_count(self) -> int:
        return 2 ** self.depth - 1 + (1 if self.depth > 0 else 0)

    def levels(self):
        for j in range(self.depth):
            for k in range(2 ** j):
                yield j, k

    def hat(self, j: int, k: int, t):
        if j < 0 or not 0 <= k < 2 ** j:
            raise ValueError(f"shift k={k} out of range for level j={j}")
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("time must lie in [0, 1]")
        width = 2.0 ** -j
        left = k * width
        slope = 2.0 ** (j / 2.0)
        up = (t - left) * slope
        down = (left + width - t) * slope
        return np.where((t > left) & (t < left + width), np.minimum(up, down), 0.0)

    def matrix(self, times) -> np.ndarray:
        """Columns [constant, ramp, hats by (level, shift)] evaluated at times."""
        times = np.asarray(times, dtype=np.float64)
        cols = [np.ones_like(times), times]
        for j, k in self.levels():
            cols.append(self.hat(j, k, times))
        return np.stack(cols, axis=1)

    def hat_matrix(self, times) -> np.ndarray:
        return self.matrix(times)[:, 2:]


def basis_eval(j: int, k: int, t, depth: int = None):
    """Value of the hat (j, k) at time t (depth only bounds validation)."""
    if depth is not None and j >= depth:
        raise ValueError(f"level j={j} out of range for depth {depth}")
    return FaberSchauderBasis(max(j + 1, 1)).hat(j, k, t)


@dataclass
class GeodesicPath:
    """Latent curve with pinned endpoints.

    gamma(t) = (1-t) start + t end + sum interior[i] hat_i(t); hats vanish at
    both endpoints, so gamma(0) = start exactly and gamma(1) = end exactly,
    with the base block of end pinned to the target base coordinate.
    Coefficient count is (2^depth + 1) x latent dim: start, end (the constant
    and ramp coefficients in disguise) plus one row per hat.
    """

    start: np.ndarray
    end: np.ndarray
    interior: np.ndarray
    fiber_dim: int
    basis: FaberSchauderBasis

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        self.interior = np.asarray(self.interior, dtype=np.float64)
        d = self.start.shape[0]
        hats = self.basis.size - 2
        if self.end.shape != (d,):
            raise ValueError("start and end dimensions differ")
        if self.interior.shape != (hats, d):
            raise ValueError(f"interior must have shape ({hats}, {d})")

    @property
    def latent_dim(self) -> int:
        return self.start.shape[0]

    def coefficient_count(self) -> int:
        return self.basis.size * self.latent_dim

    def eval(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        out = np.outer(1.0 - tt, self.start) + np.outer(tt, self.end)
        if self.interior.size:
            out = out + self.basis.hat_matrix(tt) @ self.interior
        return out[0] if scalar else out

    def endpoint(self) -> LatentPoint:
        return LatentPoint(self.end[: self.fiber_dim], self.end[self.fiber_dim:])


def path_eval(path: GeodesicPath, t) -> np.ndarray:
    return path.eval(t)


@dataclass
class SolverConfig:
    """Discretization and descent controls for one geodesic solve.

    dt must be a negative power of two with dt * 2^depth <= 1 so every hat
    breakpoint lands on a sample time. The stop rule declares convergence
    when the relative loss improvement over a 50-iteration window falls
    below tolerance.
    """

    depth: int = 6
    dt: float = 1.0 / 256.0
    lambda_reg: float = 0.0
    learning_rate: float = 1e-3
    max_iterations: int = 2000
    tolerance: float = 1e-6
    optimizer: str = "rmsprop"
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    stall_window: int = 50
    keep_trace: bool = True

    def __post_init__(self):
        steps = 1.0 / self.dt
        n = int(round(steps))
        if n < 1 or abs(steps - n) > 1e-9 or (n & (n - 1)) != 0:
            raise ValueError(f"dt must be a negative power of two, got {self.dt}")
        if self.dt * 2 ** self.depth > 1.0 + 1e-12:
            raise ValueError("dt * 2^depth must not exceed 1 (basis breakpoints must be sampled)")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.optimizer not in ("rmsprop", "gd"):
            raise ValueError("optimizer must be 'rmsprop' or 'gd'")

    @property
    def steps(self) -> int:
        return int(round(1.0 / self.dt))


@dataclass
class TransportResult:
    """Outcome of one geodesic solve onto the target fiber."""

    endpoint: LatentPoint
    energy: float
    segment_energies: np.ndarray
    speed_residual: float
    iterations: int
    converged: bool
    loss: float
    boundary_excursions: int
    path: GeodesicPath
    times: np.ndarray = None
    trace: np.ndarray = None


def naive_transport(start: LatentPoint, b2) -> LatentPoint:
    """Identify fibers by the identity on the fiber block: (f, b1) -> (f, b2)."""
    b2 = np.atleast_1d(np.asarray(b2, dtype=np.float64))
    return LatentPoint(start.fiber.copy(), b2.copy())


def constant_speed_residual(seg_energies) -> float:
    """(max - min) / mean of segment energies; 0 for an all-zero vector."""
    seg = np.asarray(seg_energies, dtype=np.float64)
    if seg.size == 0:
        raise ValueError("need at least one segment energy")
    mean = float(seg.mean())
    if mean == 0.0:
        return 0.0 if float(seg.max()) == 0.0 else np.inf
    return float((seg.max() - seg.min()) / mean)


class _RMSProp:
    def __init__(self, shapes, lr, decay, eps):
        self.v = [np.zeros(s) for s in shapes]
        self.lr, self.decay, self.eps = lr, decay, eps

    def step(self, values, grads):
        for i, g in enumerate(grads):
            self.v[i] = self.decay * self.v[i] + (1.0 - self.decay) * g * g
            values[i] -= self.lr * g / (np.sqrt(self.v[i]) + self.eps)


class _PlainGD:
    def __init__(self, shapes, lr):
        self.lr = lr

    def step(self, values, grads):
        for i, g in enumerate(grads):
            values[i] -= self.lr * g


def solve_geodesic(decoder, start: LatentPoint, b2, config: SolverConfig = None) -> TransportResult:
    """Minimize the discrete path energy (plus the optional naive-endpoint pull)
    over the free coefficients; the best iterate seen is returned.

    Start point and target base block are pinned, so final energy never
    exceeds the energy of the straight naive-transport initialization.
    Non-convergence is reported through the converged flag, never raised.
    """
    if config is None:
        config = SolverConfig()
    m, n = start.fiber.size, start.base.size
    d = m + n
    if decoder.latent_dim != d:
        raise ValueError(f"decoder expects latent dim {decoder.latent_dim}, start has {d}")
    b2 = np.atleast_1d(np.asarray(b2, dtype=np.float64))
    if b2.shape != (n,):
        raise ValueError(f"target base coordinate must have shape ({n},)")

    basis = FaberSchauderBasis(config.depth)
    steps = config.steps
    times = np.arange(steps + 1) / steps
    hat_mat = basis.hat_matrix(times)                    # (T+1, H)
    ramp = np.stack([1.0 - times, times], axis=1)        # (T+1, 2)

    start_vec = start.vector()
    naive_end = np.concatenate([start.fiber, b2])
    end_mask = np.concatenate([np.ones(m), np.zeros(n)])
    end_pin = np.concatenate([np.zeros(m), b2])

    end_free = naive_end.copy()[None, :]                 # optimized, base block masked out
    interior = np.zeros((hat_mat.shape[1], d))

    hat_c = Tape.constant(hat_mat)
    ramp_c = Tape.constant(ramp)
    start_c = Tape.constant(start_vec[None, :])
    mask_c = Tape.constant(end_mask[None, :])
    pin_c = Tape.constant(end_pin[None, :])
    naive_c = Tape.constant(naive_end[None, :])
    neg1 = Tape.constant(-1.0)
    inv_dt = Tape.constant(1.0 / config.dt)
    lam_c = Tape.constant(config.lambda_reg)

    if config.optimizer == "rmsprop":
        opt = _RMSProp([end_free.shape, interior.shape], config.learning_rate,
                       config.rmsprop_decay, config.rmsprop_eps)
    else:
        opt = _PlainGD([end_free.shape, interior.shape], config.learning_rate)

    def evaluate(build_grad: bool):
        tape = Tape(record=build_grad)
        end_t = Tensor(end_free, requires_grad=True)
        int_t = Tensor(interior, requires_grad=True)
        end_row = tape.add(tape.mul(end_t, mask_c), pin_c)
        anchors = tape.concat([start_c, end_row], axis=0)
        pts = tape.add(tape.matmul(ramp_c, anchors), tape.matmul(hat_c, int_t))
        decoded = decoder.forward(tape, pts)
        upper = tape.slice(decoded, (np.s_[1:],))
        lower = tape.slice(decoded, (np.s_[:-1],))
        diff = tape.add(upper, tape.mul(lower, neg1))
        energy = tape.mul(tape.sqnorm(diff), inv_dt)
        loss = energy
        if config.lambda_reg > 0:
            drift = tape.add(end_row, tape.mul(naive_c, neg1))
            loss = tape.add(loss, tape.mul(tape.sqnorm(drift), lam_c))
        grads = None
        if build_grad:
            g = tape.backward(loss, [end_t, int_t])
            grads = [g[end_t], g[int_t]]
        return float(loss.values), float(energy.values), grads, pts.values

    best_loss, best_energy, _, _ = evaluate(build_grad=False)
    best_end, best_interior = end_free.copy(), interior.copy()
    loss_history = [best_loss]
    converged = best_loss <= 1e-18
    iterations = 0
    window = max(1, config.stall_window)

    if not converged:
        for it in range(config.max_iterations):
            loss, energy, grads, _ = evaluate(build_grad=True)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at solver iteration {it}")
            if loss < best_loss:
                best_loss, best_energy = loss, energy
                best_end, best_interior = end_free.copy(), interior.copy()
            opt.step([end_free, interior], grads)
            loss_history.append(loss)
            iterations = it + 1
            if len(loss_history) > window:
                old = loss_history[-window - 1]
                if old - loss_history[-1] < config.tolerance * max(abs(old), 1e-12):
                    converged = True
                    break

    end_final = best_end[0] * end_mask + end_pin
    path = GeodesicPath(start=start_vec, end=end_final, interior=best_interior,
                        fiber_dim=m, basis=basis)
    trace = path.eval(times)
    decoded = decode_decoder_values(decoder, trace)
    diffs = np.diff(decoded, axis=0)
    seg = np.sum(diffs * diffs, axis=1) / config.dt
    energy_final = float(seg.sum())
    excursions = int(np.sum(np.any(np.abs(trace[:, :m]) > 1.0, axis=1)))
    return TransportResult(
        endpoint=LatentPoint(end_final[:m].copy(), b2.copy()),
        energy=energy_final,
        segment_energies=seg,
        speed_residual=constant_speed_residual(seg),
        iterations=iterations,
        converged=converged,
        loss=best_loss,
        boundary_excursions=excursions,
        path=path,
        times=times if config.keep_trace else None,
        trace=trace if config.keep_trace else None,
    )


def decode_decoder_values(decoder, mat):
    tape = Tape(record=False)
    return decoder.forward(tape, tape.constant(mat)).values


def _solve_one(args):
    decoder, start, b2, config = args
    return solve_geodesic(decoder, start, b2, config)


def correspondence_map(decoder, starts, b2, config: SolverConfig = None, jobs: int = 1):
    """Independent geodesic solves for points sharing a base coordinate.

    Order is preserved; per-item non-convergence is reported in each result
    and never aborts the rest. jobs > 1 fans solves out over processes.
    """
    starts = list(starts)
    if not starts:
        return []
    base0 = starts[0].base
    for p in starts[1:]:
        if not np.array_equal(p.base, base0):
            raise ValueError("all start points must share the same base coordinate")
    if config is None:
        config = SolverConfig()
    tasks = [(decoder, p, b2, config) for p in starts]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_solve_one, tasks))
    return [_solve_one(t) for t in tasks]


def interpolate(model, result: TransportResult, frames: int):
    """Decoded samples along the transported path at equally spaced times.

    frames = 1 gives just the decoded start; frames >= 2 spans [0, 1].
    """
    from .nn import decode  # local import to avoid a cycle

    if result.path is None:
        raise ValueError("transport result carries no path")
    if frames < 1:
        raise ValueError("frames must be at least 1")
    ts = np.zeros(1) if frames == 1 else np.linspace(0.0, 1.0, frames)
    pts = result.path.eval(ts)
    m = result.path.fiber_dim
    return decode(model, pts[:, :m], pts[:, m:])


# -- delimited exports ---------------------------------------------------------


def write_trace_csv(path, result: TransportResult):
    """One row per sample time: t, latent coordinates, trailing segment energy.

    Row k carries the energy of segment k; the final row's segment cell is
    empty (T+1 samples bound only T segments).
    """
    import csv

    if result.trace is None or result.times is None:
        raise ValueError("transport result carries no trace")
    d = result.trace.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"z_{i}" for i in range(d)] + ["seg_energy"])
        for k, (t, row) in enumerate(zip(result.times, result.trace)):
            seg = repr(float(result.segment_energies[k])) if k < len(result.segment_energies) else ""
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [seg])


def write_correspondence_csv(path, starts, results):
    """One row per transported point: start fiber, end fiber, energy, residual, converged."""
    import csv

    starts = list(starts)
    results = list(results)
    m = starts[0].fiber.size if starts else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ([f"start_f{i}" for i in range(m)] + [f"end_f{i}" for i in range(m)]
                  + ["energy", "residual", "converged"])
        writer.writerow(header)
        for p, r in zip(starts, results):
            writer.writerow(
                [repr(float(v)) for v in p.fiber]
                + [repr(float(v)) for v in r.endpoint.fiber]
                + [repr(float(r.energy)), repr(float(r.speed_residual)), int(r.converged)]
            )

"""Root finders for square nonlinear systems F(z) = 0.

Four methods with one report contract: a trust-region dogleg (MINPACK's
modified Powell hybrid via scipy), Broyden's second ("bad") inverse update,
a spectral scalar-step iteration, and Anderson mixing. All return a
SolveReport; hitting the iteration cap or tripping the divergence guard
yields the best iterate with ``converged=False`` rather than an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import root as _scipy_root

__all__ = [
    "NumericsError",
    "RootProblem",
    "SolveReport",
    "fd_jacobian",
    "solve_powell_hybrid",
    "solve_broyden_bad",
    "solve_scalar_jacobian",
    "solve_anderson",
    "solve",
    "SOLVERS",
]

DIVERGENCE_FACTOR = 10.0


class NumericsError(ArithmeticError):
    """A residual evaluation produced non-finite values."""


@dataclass
class RootProblem:
    """A square system F(z) = 0 with an initial guess.

    ``max_iter`` counts residual evaluations; the default is 200 per unknown.
    """

    fun: Callable[[np.ndarray], np.ndarray]
    z0: np.ndarray
    tol: float = 1e-8
    max_iter: int | None = None

    @property
    def dim(self) -> int:
        return len(self.z0)

    @property
    def budget(self) -> int:
        return self.max_iter if self.max_iter is not None else 200 * self.dim


@dataclass
class SolveReport:
    z: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    method: str


class _Tracker:
    """Wraps the residual: counts calls, rejects non-finite output, and
    remembers the best iterate seen."""

    def __init__(self, fun, dim):
        self.fun = fun
        self.dim = dim
        self.calls = 0
        self.best_z = None
        self.best_norm = np.inf

    def __call__(self, z):
        self.calls += 1
        out = np.asarray(self.fun(z), dtype=float)
        if out.shape != (self.dim,):
            raise ValueError(f"residual returned shape {out.shape}, expected ({self.dim},)")
        if not np.isfinite(out).all():
            raise NumericsError("non-finite residual")
        norm = np.max(np.abs(out)) if len(out) else 0.0
        if norm < self.best_norm:
            self.best_norm = norm
            self.best_z = np.array(z, dtype=float, copy=True)
        return out

    def report(self, method, tol) -> SolveReport:
        return SolveReport(self.best_z, self.best_norm, self.calls, self.best_norm <= tol, method)


def fd_jacobian(fun, z: np.ndarray, h: float | None = None) -> np.ndarray:
    """Forward-difference Jacobian; the default step is 1e-6 * (1 + |z_i|)
    per coordinate."""
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z), dtype=float)
    d = len(z)
    jac = np.empty((len(f0), d))
    for i in range(d):
        hi = h if h is not None else 1e-6 * (1.0 + abs(z[i]))
        if hi <= 0:
            raise ValueError("finite-difference step must be positive")
        zp = z.copy()
        zp[i] += hi
        jac[:, i] = (np.asarray(fun(zp), dtype=float) - f0) / hi
    return jac


def solve_powell_hybrid(problem: RootProblem) -> SolveReport:
    """Modified Powell hybrid (trust-region dogleg on a finite-difference
    Jacobian), backed by MINPACK."""
    tracker = _Tracker(problem.fun, problem.dim)
    z0 = np.asarray(problem.z0, dtype=float)
    try:
        _scipy_root(tracker, z0, method="hybr",
                    options={"maxfev": problem.budget, "xtol": min(problem.tol, 1e-10)})
    except NumericsError:
        if tracker.best_z is None:
            raise
    if tracker.best_z is None:
        tracker(z0)
    return tracker.report("powell_hybrid", problem.tol)


def solve_broyden_bad(problem: RootProblem) -> SolveReport:
    """Broyden's second method: secant updates of the inverse Jacobian, with
    step backtracking. The inverse is seeded from a finite-difference Jacobian."""
    tracker = _Tracker(problem.fun, problem.dim)
    z = np.asarray(problem.z0, dtype=float).copy()
    f = tracker(z)
    h_inv = np.linalg.pinv(fd_jacobian(tracker, z))
    norm = np.max(np.abs(f))
    while tracker.calls < problem.budget and norm > problem.tol:
        dz = -h_inv @ f
        scale = 1.0
        for _ in range(6):
            try:
                f_new = tracker(z + scale * dz)
            except NumericsError:
                scale *= 0.5
                continue
            if np.max(np.abs(f_new)) <= 2.0 * norm:
                break
            scale *= 0.5
        else:
            break
        step = scale * dz
        y = f_new - f
        yy = float(y @ y)
        if yy > 1e-300:
            h_inv += np.outer(step - h_inv @ y, y) / yy
        z = z + step
        f = f_new
        norm = np.max(np.abs(f))
        if norm > DIVERGENCE_FACTOR * tracker.best_norm:
            break
    return tracker.report("broyden_bad", problem.tol)


def solve_scalar_jacobian(problem: RootProblem) -> SolveReport:
    """Fixed-point iteration z <- z - sigma F(z) with the scalar step adapted
    by a secant (spectral) rule; residual growth past 10x the best iterate
    ends the solve with a non-converged report."""
    tracker = _Tracker(problem.fun, problem.dim)
    z = np.asarray(problem.z0, dtype=float).copy()
    f = tracker(z)
    norm2 = float(np.linalg.norm(f))
    sigma = 1.0 / max(1.0, norm2)
    while tracker.calls < problem.budget and np.max(np.abs(f)) > problem.tol:
        trial = sigma
        f_new = None
        for _ in range(10):
            try:
                z_new = z - trial * f
                f_new = tracker(z_new)
            except NumericsError:
                trial *= 0.5
                continue
            if np.linalg.norm(f_new) <= 2.0 * norm2:
                break
            trial *= 0.5
        if f_new is None:
            break
        s = z_new - z
        y = f_new - f
        sy = float(s @ y)
        if abs(sy) > 1e-300:
            sigma = float(np.clip((s @ s) / sy, -1e8, 1e8))
            if sigma == 0.0:
                sigma = trial
        z, f = z_new, f_new
        norm2 = float(np.linalg.norm(f))
        if np.max(np.abs(f)) > DIVERGENCE_FACTOR * tracker.best_norm:
            break
    return tracker.report("scalar_jacobian", problem.tol)


def solve_anderson(problem: RootProblem, memory: int = 5) -> SolveReport:
    """Anderson acceleration of the fixed-point map g(z) = z - F(z) with
    least-squares mixing over a sliding window; a rank-deficient mixing
    system falls back to the plain fixed-point step for that iteration."""
    if memory < 1:
        raise ValueError("memory must be >= 1")
    tracker = _Tracker(problem.fun, problem.dim)
    z = np.asarray(problem.z0, dtype=float).copy()
    f = tracker(z)
    hist_f, hist_g = [f], [z - f]
    while tracker.calls < problem.budget and np.max(np.abs(f)) > problem.tol:
        if len(hist_f) >= 2:
            df = np.column_stack([hist_f[i + 1] - hist_f[i] for i in range(len(hist_f) - 1)])
            dg = np.column_stack([hist_g[i + 1] - hist_g[i] for i in range(len(hist_g) - 1)])
            theta, _, rank, _ = np.linalg.lstsq(df, f, rcond=None)
            if rank < df.shape[1]:
                z_new = hist_g[-1]
            else:
                z_new = hist_g[-1] - dg @ theta
        else:
            z_new = hist_g[-1]
        try:
            f_new = tracker(z_new)
        except NumericsError:
            break
        z, f = z_new, f_new
        hist_f.append(f)
        hist_g.append(z - f)
        if len(hist_f) > memory + 1:
            hist_f.pop(0)
            hist_g.pop(0)
        if np.max(np.abs(f)) > DIVERGENCE_FACTOR * tracker.best_norm:
            break
    return tracker.report("anderson", problem.tol)


SOLVERS = {
    "powell_hybrid": solve_powell_hybrid,
    "broyden_bad": solve_broyden_bad,
    "scalar_jacobian": solve_scalar_jacobian,
    "anderson": solve_anderson,
}


def solve(problem: RootProblem, method: str = "powell_hybrid", **kwargs) -> SolveReport:
    if method not in SOLVERS:
        raise ValueError(f"unknown solver {method!r}; choose from {sorted(SOLVERS)}")
    return SOLVERS[method](problem, **kwargs)

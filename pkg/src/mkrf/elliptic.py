"""Damped Newton solver for the torus Monge-Ampere equation.

solve_cy finds the mean-zero potential U with

    det(A + H[phi] + H[U]) = c h   pointwise,   c = det(A) / mean(h),

which is discretely solvable because the grid mean of the determinant equals
det(A) for any periodic potential.  Newton linear systems are solved by a
preconditioned Krylov iteration: the constant-coefficient Laplacian of the
mean metric is inverted exactly in Fourier space and used as the
preconditioner, and steps are damped by halving until the sup-norm residual
decreases.

solve_psi_family reuses the same solver along a collapsed pencil, producing
the per-time reference potentials whose uniform bounds the collapsed-regime
monitors consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .geometry import (
    POSITIVITY_EPS,
    KahlerForm,
    Regime,
    SingularMetricError,
    VolumeDensity,
    check_positive_components,
    congruence_components,
    det_components,
    hessian_components,
    matrix_sqrt_hermitian,
    trace_pair_components,
)
from .grid import ScalarField, forward, inverse, tables

SUP_TOL_FACTOR = 1e-10
LINEAR_RTOL = 1e-8
MAX_NEWTON_ITER = 100
MAX_HALVINGS = 30


class NewtonConvergenceError(Exception):
    def __init__(self, report):
        self.report = report
        super().__init__(
            f"Newton did not converge: residual {report.final_residual:.3e} "
            f"after {report.iterations} iterations"
        )


@dataclass
class EllipticProblem:
    """Reference form, background density, and the compatibility constant."""

    form: KahlerForm
    omega: VolumeDensity
    c: float

    @classmethod
    def compatible(cls, form: KahlerForm, omega: VolumeDensity) -> "EllipticProblem":
        det_a = float(np.linalg.det(form.A).real)
        return cls(form, omega, det_a / float(np.mean(omega.h.values)))


@dataclass
class NewtonReport:
    iterations: int = 0
    final_residual: float = math.inf
    residual_history: list = field(default_factory=list)
    damping_history: list = field(default_factory=list)
    gauge_offset: float = 0.0
    converged: bool = False
    message: str = ""


def _frame_state(problem: EllipticProblem, root_inv: np.ndarray, U: np.ndarray):
    """Metric in the A-orthonormal frame: I + A^{-1/2} H[phi+U] A^{-1/2}.

    Working in this frame keeps the residual at unit scale even when the
    class matrix is nearly degenerate, because the frame rescaling of the
    Hessian components is an exact floating-point multiplication while the
    Hessian noise itself is proportional to the (small) degenerate-direction
    spectral mass.
    """
    grid = problem.form.grid
    n = grid.n
    pot = problem.form.phi.values + U
    hs = hessian_components(grid, forward(grid, pot))
    fr = list(congruence_components(root_inv, hs))
    fr[0] = 1.0 + fr[0]
    if n == 2:
        fr[1] = 1.0 + fr[1]
    fr = tuple(fr)
    check_positive_components(fr)
    return fr, det_components(fr)


def solve_cy(problem: EllipticProblem, U0: ScalarField | None = None,
             sup_tol: float | None = None, max_iter: int = MAX_NEWTON_ITER):
    """Solve the prescribed-determinant equation by damped Newton iteration.

    Returns (U, NewtonReport) with mean(U) = 0 and sup-norm residual below
    sup_tol (default 1e-10 c mean(h)).  Raises NewtonConvergenceError when
    the iteration stalls.
    """
    grid = problem.form.grid
    A = problem.form.A
    eig = np.linalg.eigvalsh(A)
    if eig.min() <= POSITIVITY_EPS:
        raise ValueError("reference class must be positive definite for the elliptic solve")
    tab = tables(grid.n, grid.N)
    n = grid.n
    det_A = float(np.linalg.det(A).real)
    root_inv = matrix_sqrt_hermitian(np.linalg.inv(A))
    h = problem.omega.h.values
    # all residual arithmetic happens at the unit scale of the A-frame
    target = (problem.c / det_A) * h
    scale = problem.c * float(np.mean(h)) / det_A
    tol = (scale * SUP_TOL_FACTOR) if sup_tol is None else (sup_tol / det_A)

    report = NewtonReport()
    U = np.zeros(grid.shape) if U0 is None else U0.values.copy()
    offset = float(U.mean())
    U -= offset
    report.gauge_offset = offset

    comps, det = _frame_state(problem, root_inv, U)
    res = det - target
    res_norm = float(np.abs(res).max())
    report.residual_history.append(res_norm * det_A)

    # exact inverse of the mean-metric Laplacian as the spectral preconditioner;
    # modes with vanishing symbol (the constant and the pure-Nyquist modes the
    # spectral Hessian annihilates) are the discrete gauge kernel and are
    # projected out
    ell = np.broadcast_to(tab.laplacian_symbol(np.linalg.inv(A)), tab.rshape).copy()
    kernel = ell == 0.0
    ell[kernel] = 1.0

    npts = grid.num_points

    def make_ops(comps, det):
        mean_det = float(det.mean())

        def matvec(v):
            vh = forward(grid, v.reshape(grid.shape))
            hs = congruence_components(root_inv, hessian_components(grid, vh))
            out = det * trace_pair_components(comps, hs, det)
            return (out - out.mean()).ravel()

        def precond(v):
            vh = forward(grid, v.reshape(grid.shape))
            vh = vh / ell
            vh[kernel] = 0.0
            return (inverse(grid, vh) / mean_det).ravel()

        J = spla.LinearOperator((npts, npts), matvec=matvec, dtype=np.float64)
        M = spla.LinearOperator((npts, npts), matvec=precond, dtype=np.float64)
        return J, M

    for it in range(max_iter):
        if res_norm <= tol:
            report.converged = True
            break
        J, M = make_ops(comps, det)
        rhs = -(res - res.mean()).ravel()
        # a maxiter return still carries the best iterate; the line search
        # below decides whether the direction is usable
        try:
            delta, _ = spla.lgmres(J, rhs, M=M, rtol=LINEAR_RTOL, atol=0.0,
                                   maxiter=12, inner_m=30)
        except RuntimeError:
            # residual entirely inside the preconditioner kernel
            delta = np.zeros(npts)
        delta = delta.reshape(grid.shape)
        delta -= delta.mean()

        s = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            trial = U + s * delta
            trial -= trial.mean()
            try:
                comps_t, det_t = _frame_state(problem, root_inv, trial)
            except SingularMetricError:
                s *= 0.5
                continue
            res_t = det_t - target
            res_t_norm = float(np.abs(res_t).max())
            if res_t_norm < res_norm:
                U, comps, det, res, res_norm = trial, comps_t, det_t, res_t, res_t_norm
                accepted = True
                break
            s *= 0.5
        report.damping_history.append(s if accepted else 0.0)
        report.iterations = it + 1
        report.residual_history.append(res_norm * det_A)
        if not accepted:
            # distinguish a genuine stall from an under-resolved target whose
            # residual lives in the discrete gauge kernel
            res_hat = np.abs(forward(grid, res)) / npts
            kern = float(res_hat[kernel].max()) if kernel.any() else 0.0
            report.message = f"line search failed at iteration {it}"
            if kern > 0.25 * res_norm:
                report.message += (
                    f" (target has unresolvable Nyquist-mode content ~{kern:.2e};"
                    " refine the grid)"
                )
            break
    report.final_residual = res_norm * det_A
    if not report.converged and res_norm <= tol:
        report.converged = True
    if not report.converged:
        raise NewtonConvergenceError(report)
    return ScalarField(grid, U), report


def psi_problem(flow_problem, t: float) -> EllipticProblem:
    """Elliptic reference problem at one time of a collapsed pencil.

    The e^{-rt} scalings of the density and the compatibility constant cancel
    exactly, leaving det(A_t + H[phi_t + psi]) = det(A_t) h / mean(h).
    """
    grid = flow_problem.grid
    w = math.exp(-t)
    phi_t = inverse(grid, w * flow_problem.phi0_hat + (1.0 - w) * flow_problem.phi_inf_hat)
    form = KahlerForm(flow_problem.A_t(t), ScalarField(grid, phi_t))
    c = float(np.linalg.det(form.A).real) / flow_problem.mean_h
    return EllipticProblem(form, flow_problem.omega, c)


def solve_psi_family(flow_problem, times, max_iter: int = MAX_NEWTON_ITER):
    """Solve the per-time reference equations along a collapsed pencil.

    Returns (psis, reports); each solve is warm-started from the previous
    time.  Raises ValueError for non-collapsed paths and
    NewtonConvergenceError (carrying the failing time in the message) on a
    per-time failure.
    """
    if flow_problem.path.regime != Regime.COLLAPSED:
        raise ValueError("psi family requires a collapsed class path")
    psis = []
    reports = []
    guess = None
    for t in times:
        prob = psi_problem(flow_problem, t)
        # warm starts can lose admissibility as the pencil degenerates;
        # back off toward the always-admissible zero guess
        candidates = [guess] if guess is not None else [None]
        if guess is not None:
            candidates += [ScalarField(guess.grid, s * guess.values) for s in (0.5, 0.25)]
            candidates.append(None)
        last_err = None
        for g0 in candidates:
            try:
                psi, rep = solve_cy(prob, U0=g0, max_iter=max_iter)
                break
            except SingularMetricError as err:
                last_err = err
                continue
            except NewtonConvergenceError as err:
                err.report.message += f" (psi solve at t={t:g})"
                raise
        else:
            raise ValueError(f"no admissible initial guess for psi solve at t={t:g}: {last_err}")
        psis.append(psi)
        reports.append(rep)
        guess = psi
    return psis, reports

import numpy as np
import pytest

from mkrf.elliptic import (
    EllipticProblem,
    solve_cy,
    solve_psi_family,
)
from mkrf.flow import FlowProblem
from mkrf.geometry import KahlerForm, VolumeDensity, ma_density, trace_pair
from mkrf.grid import GridSpec, ScalarField, complex_hessian, mean, synthesize


def ones_density(grid):
    return VolumeDensity(ScalarField(grid, np.ones(grid.shape)))


def test_solve_cy_trivial():
    g = GridSpec(1, 16)
    prob = EllipticProblem.compatible(KahlerForm(np.eye(1), g.zeros()), ones_density(g))
    U, rep = solve_cy(prob)
    assert np.abs(U.values).max() == 0.0
    assert rep.converged
    assert rep.iterations == 0


def test_solve_cy_manufactured():
    # prescribe the density from a known potential; 0.1 cos leaves the metric
    # barely positive, exercising the damping safety as well
    g = GridSpec(1, 64)
    Ustar = synthesize(g, [((1, 0), 0.1)])
    form = KahlerForm(np.eye(1), g.zeros())
    h = ma_density(form, Ustar)
    assert mean(h) == pytest.approx(1.0, abs=1e-12)
    prob = EllipticProblem.compatible(form, VolumeDensity(h))
    U, rep = solve_cy(prob)
    gap = np.abs(U.values - (Ustar.values - Ustar.values.mean())).max()
    assert gap < 1e-9
    assert rep.final_residual <= 1e-10 * prob.c * mean(ScalarField(g, h.values))
    assert abs(U.values.mean()) < 1e-12
    # accepted damped steps decrease the residual monotonically
    hist = rep.residual_history
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_solve_cy_unique_up_to_gauge():
    g = GridSpec(1, 32)
    form = KahlerForm(np.eye(1), g.zeros())
    h = ScalarField(g, np.exp(synthesize(g, [((1, 0), 0.12), ((0, 2), 0.05)]).values))
    prob = EllipticProblem.compatible(form, VolumeDensity(h))
    U1, _ = solve_cy(prob)
    U2, _ = solve_cy(prob, U0=synthesize(g, [((2, 0), 0.01), ((0, 1), 0.015)]))
    assert np.abs(U1.values - U2.values).max() < 1e-8


def test_solve_cy_n2_with_potential_part():
    # N=16 keeps the spectral tail of the synthesized density far below the
    # residual certificate
    g = GridSpec(2, 16)
    phi = synthesize(g, [((1, 0, 0, 0), 0.01)])
    form = KahlerForm(np.array([[1.2, 0.1j], [-0.1j, 1.0]]), phi)
    h = ScalarField(g, np.exp(synthesize(g, [((0, 0, 1, 0), 0.08), ((1, 0, 0, 1), 0.04)]).values))
    prob = EllipticProblem.compatible(form, VolumeDensity(h))
    U, rep = solve_cy(prob)
    resid = ma_density(form, U).values - prob.c * h.values
    assert np.abs(resid).max() <= 1e-10 * prob.c * mean(h)
    assert rep.converged


def test_solve_cy_reports_unresolved_target():
    # a coarse grid cannot match the Nyquist-set content of this density;
    # the failure names the cause
    from mkrf.elliptic import NewtonConvergenceError

    g = GridSpec(2, 8)
    form = KahlerForm(np.eye(2), g.zeros())
    h = ScalarField(g, np.exp(synthesize(g, [((0, 0, 1, 0), 0.2), ((1, 0, 0, 1), 0.15)]).values))
    prob = EllipticProblem.compatible(form, VolumeDensity(h))
    with pytest.raises(NewtonConvergenceError) as exc:
        solve_cy(prob)
    assert "Nyquist" in exc.value.report.message


def test_newton_operator_matches_directional_derivative():
    g = GridSpec(2, 8)
    form = KahlerForm(np.eye(2), synthesize(g, [((1, 0, 0, 0), 0.01)]))
    U = synthesize(g, [((0, 0, 1, 0), 0.01)])
    delta = synthesize(g, [((0, 1, 1, 0), 0.006)])
    base = ma_density(form, U)
    predicted = base.values * trace_pair(form.metric(U), complex_hessian(delta)).values
    eps = 1e-5
    up = ma_density(form, ScalarField(g, U.values + eps * delta.values)).values
    dn = ma_density(form, ScalarField(g, U.values - eps * delta.values)).values
    fd = (up - dn) / (2 * eps)
    rel = np.abs(fd - predicted).max() / max(1.0, np.abs(predicted).max())
    assert rel <= 1e-6


def test_solve_cy_rejects_degenerate_class():
    g = GridSpec(2, 8)
    form = KahlerForm(np.diag([1.0, 0.0]).astype(complex), g.zeros())
    with pytest.raises(ValueError):
        solve_cy(EllipticProblem.compatible(form, ones_density(g)))


def collapsed_flow_problem(N=8, with_phi=True):
    g = GridSpec(2, N)
    phi0 = synthesize(g, [((1, 0, 0, 0), 0.02), ((0, 1, 1, 0), 0.008)]) if with_phi \
        else g.zeros()
    return FlowProblem(
        KahlerForm(np.eye(2), phi0),
        KahlerForm(np.diag([1.0, 0.0]).astype(complex), g.zeros()),
        ones_density(g),
    )


def test_psi_family_trivial_at_zero():
    fp = collapsed_flow_problem(with_phi=False)
    psis, reps = solve_psi_family(fp, [0.0])
    assert np.abs(psis[0].values).max() < 1e-12
    assert reps[0].converged


def test_psi_family_bounds_and_rates():
    fp = collapsed_flow_problem()
    times = [0.0, 2.0, 5.0, 8.0]
    psis, reps = solve_psi_family(fp, times)
    sups = [float(np.abs(p.values).max()) for p in psis]
    # uniformly bounded and non-trending: the late sups do not exceed the
    # early ones by more than the acceptance slack
    assert max(sups[2:]) <= max(sups[:2]) + 0.1
    rates = [
        float(np.abs(b.values - a.values).max()) / (t1 - t0)
        for (a, b, t0, t1) in zip(psis, psis[1:], times, times[1:])
    ]
    assert all(r <= rates[0] + 1e-9 for r in rates)
    # residual certificate at the collapsing scale det(A_t)
    for t, rep in zip(times, reps):
        scale = float(np.linalg.det(fp.A_t(t)).real)
        assert rep.final_residual <= 1e-10 * scale


def test_psi_family_requires_collapsed():
    g = GridSpec(2, 8)
    fp = FlowProblem(
        KahlerForm(np.eye(2), g.zeros()),
        KahlerForm(np.eye(2), g.zeros()),
        ones_density(g),
    )
    with pytest.raises(ValueError):
        solve_psi_family(fp, [0.0, 1.0])


def test_solve_cy_reports_nonconvergence():
    from mkrf.elliptic import NewtonConvergenceError

    # n=2 is genuinely nonlinear, so a single Newton iteration cannot reach
    # the certificate
    g = GridSpec(2, 8)
    form = KahlerForm(np.eye(2), g.zeros())
    h = ScalarField(g, np.exp(synthesize(g, [((1, 0, 0, 0), 0.3), ((0, 0, 1, 0), 0.2)]).values))
    prob = EllipticProblem.compatible(form, VolumeDensity(h))
    with pytest.raises(NewtonConvergenceError) as exc:
        solve_cy(prob, max_iter=1)
    assert exc.value.report.iterations <= 1
    assert exc.value.report.final_residual > 0.0

import numpy as np
import pytest

from mkrf.elliptic import EllipticProblem, solve_cy, solve_psi_family
from mkrf.flow import run_flow
from mkrf.geometry import KahlerForm
from mkrf.scenario import build_problem, load_scenario, run_options

_cache = {}


def preset_run(name, grid_override=None):
    """Run a preset once per session; acceptance criteria share the result."""
    key = (name, grid_override)
    if key not in _cache:
        sc = load_scenario(name, None)
        if grid_override is not None:
            sc.N = grid_override
        problem = build_problem(sc)
        result = run_flow(problem, run_options(sc))
        entry = {"scenario": sc, "problem": problem, "result": result}
        if name == "kahler-limit":
            eprob = EllipticProblem.compatible(
                KahlerForm(problem.path.Ainf, problem.form_inf.phi), problem.omega
            )
            entry["U"], entry["newton_report"] = solve_cy(eprob)
            entry["eprob"] = eprob
        if name == "collapsed":
            psis, reps = solve_psi_family(problem, sc.psi_times)
            entry["psi_times"] = sc.psi_times
            entry["psis"] = psis
            entry["psi_reports"] = reps
            entry["psi_sups"] = [float(np.abs(p.values).max()) for p in psis]
        _cache[key] = entry
    return _cache[key]


@pytest.fixture(scope="session")
def kahler_run():
    return preset_run("kahler-limit")


@pytest.fixture(scope="session")
def finite_run():
    return preset_run("finite-time")


@pytest.fixture(scope="session")
def collapsed_run():
    return preset_run("collapsed")


@pytest.fixture(scope="session")
def collapsed_run_n24():
    return preset_run("collapsed", grid_override=24)

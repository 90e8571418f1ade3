"""Self-test suite behind ``coneboost check``.

Each check returns ``(passed, detail)``; :func:`run_checks` prints one line
per check and reports overall success.
"""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .boosting import BoostConfig, fit_dboost
from .cones import ConeSpec, NonNeg, Soc, Zero, dprojection, dual, project
from .experiments import ExperimentSpec, build_qp, run_trial
from .qcp import QcpProblem, SolverSettings, assemble, fixed_point_step, kkt_residuals, solve, solve_batch
from .spo import DecisionContext, qspo_grads, qspo_losses


def random_cone(rng: np.random.Generator) -> ConeSpec:
    blocks = []
    for _ in range(rng.integers(1, 4)):
        kind = rng.integers(3)
        n = int(rng.integers(1, 5))
        blocks.append(Zero(n) if kind == 0 else NonNeg(n) if kind == 1 else Soc(n + 1))
    return ConeSpec(blocks)


def _away_from_kinks(cone: ConeSpec, v: np.ndarray, margin: float = 1e-3) -> bool:
    for block, sl in cone.slices():
        x = v[sl]
        if isinstance(block, NonNeg) and np.min(np.abs(x)) < margin:
            return False
        if isinstance(block, Soc):
            r = np.linalg.norm(x[1:])
            if abs(abs(x[0]) - r) < margin or r < margin:
                return False
    return True


def check_idempotence(rng, n_cases):
    worst = 0.0
    for _ in range(n_cases):
        cone = random_cone(rng)
        v = 3 * rng.standard_normal(cone.dim)
        p = project(cone, v)
        worst = max(worst, np.abs(project(cone, p) - p).max())
    return worst <= 1e-12, f"max |P(P(v)) - P(v)| = {worst:.2e}"


def check_moreau(rng, n_cases):
    worst = 0.0
    for _ in range(n_cases):
        cone = random_cone(rng)
        v = 3 * rng.standard_normal(cone.dim)
        p, q = project(cone, v), project(dual(cone), -v)
        worst = max(worst, np.abs(p - q - v).max(), abs(p @ q))
    return worst <= 1e-10, f"max decomposition / orthogonality error = {worst:.2e}"


def check_nonexpansive(rng, n_cases):
    worst = -np.inf
    for _ in range(n_cases):
        cone = random_cone(rng)
        u, v = 3 * rng.standard_normal((2, cone.dim))
        worst = max(worst, np.linalg.norm(project(cone, u) - project(cone, v)) - np.linalg.norm(u - v))
    return worst <= 1e-12, f"max excess over ||u - v|| = {worst:.2e}"


def check_dprojection(rng, n_cases, h=1e-6):
    worst, done = 0.0, 0
    while done < n_cases:
        cone = random_cone(rng)
        v = 3 * rng.standard_normal(cone.dim)
        if not _away_from_kinks(cone, v):
            continue
        J = dprojection(cone, v)
        E = np.eye(cone.dim)
        fd = np.column_stack([(project(cone, v + h * e) - project(cone, v - h * e)) / (2 * h) for e in E])
        worst = max(worst, np.abs(J - fd).max())
        done += 1
    return worst <= 1e-6, f"max |J - finite difference| = {worst:.2e}"


def random_qp(rng, d_z=6, n_eq=2, n_ineq=3) -> QcpProblem:
    L = rng.standard_normal((d_z, d_z))
    A = np.vstack([rng.standard_normal((n_eq, d_z)), rng.standard_normal((n_ineq, d_z))])
    z0 = rng.standard_normal(d_z)
    b = A @ z0 + np.concatenate([np.zeros(n_eq), rng.uniform(0.1, 1.0, n_ineq)])
    return QcpProblem(P=L @ L.T / d_z + 0.1 * np.eye(d_z), c=rng.standard_normal(d_z), A=A, b=b,
                      cone=ConeSpec([Zero(n_eq), NonNeg(n_ineq)]))


def check_solver(rng, n_cases):
    settings = SolverSettings()
    worst_res, worst_fp = 0.0, 0.0
    for _ in range(n_cases):
        prob = random_qp(rng)
        sol = solve(prob, settings)
        rp, rd, _ = kkt_residuals(prob, sol)
        sys = assemble(prob)
        fp = np.linalg.norm(fixed_point_step(sol.w_star, sys) - sol.w_star)
        worst_res, worst_fp = max(worst_res, rp, rd), max(worst_fp, fp)
    ok = worst_res <= 1e-6 and worst_fp <= 10 * settings.tol_abs
    return ok, f"max KKT residual {worst_res:.2e}, max ||F(w*) - w*|| {worst_fp:.2e}"


def check_cost_gradient(rng, n_cases, h=1e-5):
    tight = SolverSettings(tol_abs=1e-12, tol_rel=1e-12, max_iter=200000)
    worst, done = 0.0, 0
    while done < n_cases:
        prob = random_qp(rng)
        ctx = DecisionContext(prob, tight)
        c = rng.standard_normal(prob.n_z)
        c_hat = c + 0.5 * rng.standard_normal(prob.n_z)
        g, deg, _ = qspo_grads(ctx, c_hat[None], c[None])
        if deg[0]:
            continue
        E = np.eye(prob.n_z)
        plus, _ = qspo_losses(ctx, c_hat + h * E, np.tile(c, (prob.n_z, 1)))
        minus, _ = qspo_losses(ctx, c_hat - h * E, np.tile(c, (prob.n_z, 1)))
        fd = (plus - minus) / (2 * h)
        err = np.abs(g[0] - fd) / np.maximum(1e-4 * np.abs(fd), 1e-7)
        worst = max(worst, err.max())
        done += 1
    return worst <= 1.0, f"max error / tolerance = {worst:.2f}"


def check_determinism(seed):
    prob, _ = build_qp(np.random.default_rng(seed), d_z=6)
    costs = np.random.default_rng(seed + 1).standard_normal((20, 6))
    a = solve_batch(prob, costs)
    b = solve_batch(prob, costs)
    same_solve = np.array_equal(a.Z, b.Z) and np.array_equal(a.iterations, b.iterations)

    X = np.random.default_rng(seed + 2).uniform(-1, 1, (40, 2))
    C = costs[:, :6].repeat(2, axis=0)
    cfg = BoostConfig(max_stages=5)
    e1 = fit_dboost(X, C, DecisionContext(prob), cfg)
    e2 = fit_dboost(X, C, DecisionContext(prob), cfg)
    same_boost = e1.to_json() == e2.to_json()

    spec = ExperimentSpec(problem="network_flow", m_train=30, m_test=30, trials=1, seed=seed,
                          methods=("cart", "spot", "mse_boost", "dboost"), boost=replace(cfg, max_stages=3))
    r1, r2 = run_trial(spec, 0), run_trial(spec, 0)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows]  # noqa: E731
    same_trial = strip(r1.rows) == strip(r2.rows) and r1.checksums == r2.checksums
    ok = same_solve and same_boost and same_trial
    return ok, f"solve {same_solve}, dboost {same_boost}, trial {same_trial}"


def collect_checks(quick: bool = False, seed: int = 0):
    """Run every check; returns a list of ``(name, passed, detail, seconds)``."""
    n = 50 if quick else 300
    checks = [
        ("cone projection idempotence", lambda r: check_idempotence(r, n)),
        ("Moreau decomposition", lambda r: check_moreau(r, n)),
        ("projection non-expansiveness", lambda r: check_nonexpansive(r, n)),
        ("projection Jacobian vs finite differences", lambda r: check_dprojection(r, n // 5)),
        ("solver KKT residuals and fixed-point certificate", lambda r: check_solver(r, n // 10)),
        ("cost gradient vs finite differences", lambda r: check_cost_gradient(r, max(3, n // 30))),
        ("determinism replay", lambda r: check_determinism(seed)),
    ]
    results = []
    for k, (name, fn) in enumerate(checks):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
    return results


def run_checks(quick: bool = False, seed: int = 0) -> bool:
    results = collect_checks(quick, seed)
    for name, ok, detail, secs in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({secs:.1f}s)")
    passed = sum(ok for _, ok, _, _ in results)
    print(f"{passed}/{len(results)} checks passed")
    return passed == len(results)

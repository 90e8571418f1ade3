"""Synthetic benchmark problems, data generation and trial orchestration."""
from __future__ import annotations

import hashlib
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .boosting import BoostConfig, fit_dboost, fit_mse_boost
from .cones import ConeSpec, NonNeg, Soc, Zero
from .qcp import QcpProblem, SolverSettings, solve
from .spo import DecisionContext, excess_cost
from .trees import fit_forest, fit_mse_tree, fit_spot_tree

logger = logging.getLogger(__name__)

PROBLEMS = ("network_flow", "qp", "portfolio", "motivating")
METHODS = ("cart", "cart_forest", "spot", "spot_forest", "mse_boost", "dboost")
TAUS = (0.0, 0.5, 1.0)


@dataclass
class PolynomialModel:
    """Cost model ``c = H0 + sum_j H_j x**j + tau * eps`` with ``eps ~ N(0, I)``."""

    H0: np.ndarray
    H: np.ndarray  # (p, d_z, d_x)
    tau: float

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def d_z(self) -> int:
        return self.H.shape[1]

    @property
    def d_x(self) -> int:
        return self.H.shape[2]

    @classmethod
    def random(cls, d_z: int, d_x: int, p: int, tau: float, H0, rng: np.random.Generator) -> "PolynomialModel":
        # each coefficient is zero w.p. 1/2, else U(-1, 1)
        H = rng.uniform(-1.0, 1.0, size=(p, d_z, d_x))
        H[rng.random(size=H.shape) < 0.5] = 0.0
        return cls(H0=np.asarray(H0, dtype=float), H=H, tau=float(tau))


def gen_features(m: int, d_x: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1 or d_x < 1:
        raise ValueError("m and d_x must be >= 1")
    return rng.uniform(-1.0, 1.0, size=(m, d_x))


def gen_costs(model: PolynomialModel, X, rng: np.random.Generator) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.d_x:
        raise ValueError(f"X has {X.shape[1]} features, model expects {model.d_x}")
    C = np.broadcast_to(model.H0, (X.shape[0], model.d_z)).copy()
    for j in range(model.p):
        C += (X ** (j + 1)) @ model.H[j].T
    return C + model.tau * rng.standard_normal(size=C.shape)


# -- network flow -------------------------------------------------------------

def edge_probability(i: int, j: int, edge_exponent: str = "as-printed") -> float:
    if edge_exponent == "as-printed":
        return 0.75 ** abs(i - j - 1)
    if edge_exponent == "adjacent-favored":
        return 0.75 ** (abs(i - j) - 1)
    raise ValueError(f"unknown edge exponent {edge_exponent!r}")


def _has_path(edges, source, sink) -> bool:
    seen, todo = {source}, deque([source])
    while todo:
        node = todo.popleft()
        for i, j in edges:
            if i == node and j not in seen:
                seen.add(j)
                todo.append(j)
    return sink in seen


def sample_graph(rng: np.random.Generator, n_nodes: int = 5, edge_exponent: str = "as-printed") -> list[tuple[int, int]]:
    """Random directed graph on nodes 1..n with a path from 1 to n."""
    while True:
        edges = [
            (i, j)
            for i in range(1, n_nodes + 1)
            for j in range(1, n_nodes + 1)
            if i != j and rng.random() < edge_probability(i, j, edge_exponent)
        ]
        if _has_path(edges, 1, n_nodes):
            return edges


def network_flow_problem(edges, n_nodes: int = 5) -> QcpProblem:
    """Unit flow from node 1 to node n with 0 <= z <= 1 and 1/2||z||^2 regularization.

    Incidence convention: +1 where the edge leaves a node, -1 where it
    enters.  The sink's balance row is redundant and dropped so the
    equality block has full row rank.
    """
    E = len(edges)
    inc = np.zeros((n_nodes, E))
    for k, (i, j) in enumerate(edges):
        inc[i - 1, k] = 1.0
        inc[j - 1, k] = -1.0
    supply = np.zeros(n_nodes)
    supply[0] = 1.0
    supply[-1] = -1.0
    A = np.vstack([inc[:-1], -np.eye(E), np.eye(E)])
    b = np.concatenate([supply[:-1], np.zeros(E), np.ones(E)])
    cone = ConeSpec([Zero(n_nodes - 1), NonNeg(E), NonNeg(E)])
    return QcpProblem(P=np.eye(E), c=np.zeros(E), A=A, b=b, cone=cone)


def build_network_flow(rng: np.random.Generator, tau: float = 0.0, n_nodes: int = 5, d_x: int = 5,
                       edge_exponent: str = "as-printed") -> tuple[QcpProblem, PolynomialModel]:
    edges = sample_graph(rng, n_nodes, edge_exponent)
    problem = network_flow_problem(edges, n_nodes)
    d_z = len(edges)
    H0 = rng.normal(-1.0, 1.0, size=d_z)
    return problem, PolynomialModel.random(d_z, d_x, 3, tau, H0, rng)


# -- equality constrained QP --------------------------------------------------

def _gram(rng, d_z):
    n = 10 * d_z
    L = rng.standard_normal(size=(n, d_z))
    return L.T @ L / n


def build_qp(rng: np.random.Generator, tau: float = 0.0, d_z: int = 25, d_x: int = 5, n_eq: int = 3,
             with_nominal: bool = False):
    """``min 1/2 z'P_hat z + c'z s.t. Az = b`` with a 0/1 matrix ``A`` and ``b = A 1``.

    The nominal ``P = G0 + 0.01 I`` and the estimate used for decisions is
    ``P_hat = P + 0.1 G1``, where ``G0, G1`` are independent normalized Gram
    matrices of 10*d_z x d_z standard normal factors.  Returns
    ``(problem, model)``, plus the nominal ``P`` when ``with_nominal``.
    """
    while True:
        A = (rng.random(size=(n_eq, d_z)) < 0.5).astype(float)
        if np.linalg.matrix_rank(A) == n_eq:
            break
    b = A @ np.ones(d_z)
    P_base = _gram(rng, d_z) + 0.01 * np.eye(d_z)
    Xi = _gram(rng, d_z)
    P = P_base + 0.1 * Xi
    P = 0.5 * (P + P.T)
    problem = QcpProblem(P=P, c=np.zeros(d_z), A=A, b=b, cone=ConeSpec([Zero(n_eq)]))
    model = PolynomialModel.random(d_z, d_x, 3, tau, np.zeros(d_z), rng)
    if with_nominal:
        return problem, model, 0.5 * (P_base + P_base.T)
    return problem, model


# -- portfolio ----------------------------------------------------------------

def portfolio_problem(V: np.ndarray, sigma: float) -> QcpProblem:
    """Fully invested long-only portfolio with risk ``sqrt(z'Vz) <= sigma``."""
    d_z = V.shape[0]
    R = np.linalg.cholesky(V).T  # R'R = V
    A = np.vstack([np.ones((1, d_z)), -np.eye(d_z), np.zeros((1, d_z)), -R])
    b = np.concatenate([[1.0], np.zeros(d_z), [sigma], np.zeros(d_z)])
    cone = ConeSpec([Zero(1), NonNeg(d_z), Soc(1 + d_z)])
    return QcpProblem(P=np.zeros((d_z, d_z)), c=np.zeros(d_z), A=A, b=b, cone=cone)


def min_variance(V: np.ndarray) -> float:
    d_z = V.shape[0]
    A = np.vstack([np.ones((1, d_z)), -np.eye(d_z)])
    b = np.concatenate([[1.0], np.zeros(d_z)])
    sol = solve(QcpProblem(P=V, c=np.zeros(d_z), A=A, b=b, cone=ConeSpec([Zero(1), NonNeg(d_z)])))
    return float(sol.z @ V @ sol.z)


def build_portfolio(rng: np.random.Generator, tau: float = 0.0, d_z: int = 10, d_x: int = 5
                    ) -> tuple[QcpProblem, PolynomialModel]:
    """Costs are negated returns; the SOC caps risk at the equal-weight level."""
    while True:
        L = rng.uniform(-1.0, 1.0, size=(4, d_z))
        V = L.T @ L + 0.01 * np.eye(d_z)
        sigma = np.sqrt(np.ones(d_z) @ V @ np.ones(d_z)) / d_z
        # the risk ball must contain more than the equal-weight point
        if min_variance(V) < sigma**2 * (1 - 1e-3):
            break
    problem = portfolio_problem(V, sigma)
    returns = PolynomialModel.random(d_z, d_x, 3, tau, rng.normal(0.0, 1.0, size=d_z), rng)
    costs = PolynomialModel(H0=-returns.H0, H=-returns.H, tau=tau)
    return problem, costs


# -- two-asset motivating example ---------------------------------------------

def motivating_problem() -> QcpProblem:
    """``min -r'z + 1/2||z||^2`` over the two-asset simplex."""
    A = np.vstack([np.ones((1, 2)), -np.eye(2)])
    b = np.array([1.0, 0.0, 0.0])
    return QcpProblem(P=np.eye(2), c=np.zeros(2), A=A, b=b, cone=ConeSpec([Zero(1), NonNeg(2)]))


def motivating_data(m: int, rng: np.random.Generator, noise_var: float = 0.1, x_high: float = 1.0
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Feature ``x ~ U(0, x_high)``; returns ``x + e1`` and ``x + sin(3x) + e2``.

    ``e1, e2`` are independent ``N(0, noise_var)``.  Costs are negated returns.
    """
    x = rng.uniform(0.0, x_high, size=(m, 1))
    sd = np.sqrt(noise_var)
    r1 = x[:, 0] + sd * rng.standard_normal(m)
    r2 = x[:, 0] + np.sin(3 * x[:, 0]) + sd * rng.standard_normal(m)
    return x, -np.column_stack([r1, r2])


# -- trial orchestration ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    problem: str = "qp"
    tau: float = 0.0
    depth: int = 1
    m_train: int = 1000
    m_test: int = 1000
    trials: int = 10
    seed: int = 0
    methods: tuple = METHODS
    n_trees: int = 100
    edge_exponent: str = "as-printed"
    split_grid: int = 10
    settings: SolverSettings = field(default_factory=SolverSettings)
    boost: BoostConfig = field(default_factory=BoostConfig)
    allow_any_tau: bool = False

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        if not self.allow_any_tau and float(self.tau) not in TAUS:
            raise ValueError(f"tau must be one of {TAUS}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.m_train < 1 or self.m_test < 1 or self.trials < 1:
            raise ValueError("m_train, m_test and trials must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        object.__setattr__(self, "methods", tuple(self.methods))


@dataclass
class TrialResult:
    trial: int
    # one dict per (method, split) with the CSV columns
    rows: list[dict] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    # digest of each model's training-set predictions
    checksums: dict[str, str] = field(default_factory=dict)
    models: dict[str, object] = field(default_factory=dict)

    def excess(self, method: str, split: str = "test") -> float:
        for r in self.rows:
            if r["method"] == method and r["split"] == split:
                return r["excess_cost"]
        raise KeyError((method, split))


def trial_streams(seed: int, trial_index: int) -> dict[str, np.random.Generator]:
    """Independent generators for one trial, derived from (seed, trial_index).

    Every method gets its own stream, so dropping a method from the run does
    not change the others.
    """
    root = np.random.SeedSequence([int(seed), int(trial_index)])
    names = ["problem", "train", "test"] + list(METHODS)
    return {name: np.random.default_rng(child) for name, child in zip(names, root.spawn(len(names)))}


def build_context(spec: ExperimentSpec, rng: np.random.Generator) -> tuple[DecisionContext, Optional[PolynomialModel]]:
    """Decision context and cost model for one trial (no model for the two-asset example)."""
    true_P = None
    if spec.problem == "network_flow":
        problem, model = build_network_flow(rng, spec.tau, edge_exponent=spec.edge_exponent)
    elif spec.problem == "qp":
        problem, model, true_P = build_qp(rng, spec.tau, with_nominal=True)
    elif spec.problem == "portfolio":
        problem, model = build_portfolio(rng, spec.tau)
    else:
        problem, model = motivating_problem(), None
    return DecisionContext(problem, spec.settings, true_P=true_P), model


def sample_data(spec: ExperimentSpec, model: Optional[PolynomialModel], m: int, rng: np.random.Generator):
    if model is None:
        return motivating_data(m, rng)
    X = gen_features(m, model.d_x, rng)
    return X, gen_costs(model, X, rng)


def validate_problem(ctx: DecisionContext, C: np.ndarray) -> None:
    """Reject a generated problem that fails the solver's contract on its own data."""
    for oracle in (False, True):
        batch = ctx.solve(C[:1], oracle=oracle)
        if not batch.converged[0]:
            raise RuntimeError("generated problem failed to solve at a training cost")


def _checksum(pred: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pred, dtype=float).tobytes()).hexdigest()[:16]


def fit_method(method: str, X, C, spec: ExperimentSpec, ctx: DecisionContext, rng: np.random.Generator):
    """Returns ``(model, n_trees, stop_reason)``."""
    depth, grid = spec.depth, spec.split_grid
    if method == "cart":
        return fit_mse_tree(X, C, depth, grid), 1, ""
    if method == "spot":
        return fit_spot_tree(X, C, depth, ctx, grid), 1, ""
    if method in ("cart_forest", "spot_forest"):
        base = "mse" if method == "cart_forest" else "spot"
        forest = fit_forest(X, C, depth, spec.n_trees, base_fitter=base, rng=rng, ctx=ctx, split_grid=grid)
        return forest, forest.n_trees, ""
    cfg = replace(spec.boost, max_depth=depth, split_grid=grid)
    if method == "mse_boost":
        ens = fit_mse_boost(X, C, cfg)
    else:
        ens = fit_dboost(X, C, ctx, cfg)
    return ens, ens.n_stages, ens.stop_reason


def run_trial(spec: ExperimentSpec, trial_index: int) -> TrialResult:
    """Fit every requested method on one trial's training set and score both splits.

    The test set is generated only after all fitting is done, from its own
    stream.  A failing method is recorded and the remaining methods still run.
    """
    rng = trial_streams(spec.seed, trial_index)
    ctx, model = build_context(spec, rng["problem"])
    X_tr, C_tr = sample_data(spec, model, spec.m_train, rng["train"])
    validate_problem(ctx, C_tr)
    ctx.oracle(C_tr)

    result = TrialResult(trial=trial_index)
    fitted = {}
    for method in spec.methods:
        t0 = time.perf_counter()
        try:
            fitted[method] = fit_method(method, X_tr, C_tr, spec, ctx, rng[method])
        except Exception as exc:  # noqa: BLE001 - recorded and reported per method
            logger.warning("trial %d: %s failed: %s", trial_index, method, exc)
            result.failures[method] = f"{type(exc).__name__}: {exc}"
            continue
        fitted[method] += (time.perf_counter() - t0,)
        result.models[method] = fitted[method][0]
        result.checksums[method] = _checksum(fitted[method][0].predict(X_tr))

    X_te, C_te = sample_data(spec, model, spec.m_test, rng["test"])
    for method in spec.methods:
        if method not in fitted:
            continue
        mdl, n_trees, stop, runtime = fitted[method]
        try:
            scores = {split: excess_cost(ctx, mdl.predict(X), C)
                      for split, X, C in (("train", X_tr, C_tr), ("test", X_te, C_te))}
            if not all(np.isfinite(v) for v in scores.values()):
                raise FloatingPointError("non-finite excess cost")
        except Exception as exc:  # noqa: BLE001
            result.failures[method] = f"{type(exc).__name__}: {exc}"
            continue
        for split, value in scores.items():
            result.rows.append({
                "problem": spec.problem, "method": method, "depth": spec.depth, "tau": float(spec.tau),
                "trial": trial_index, "split": split, "excess_cost": float(value), "n_trees": n_trees,
                "stop_reason": stop, "runtime_s": runtime,
            })
    return result


def motivating_traces(spec: ExperimentSpec, trial_index: int = 0, mse_stages: int = 100, n_grid: int = 201):
    """Training excess cost per stage and prediction curves for the two-asset example.

    MSE boosting runs for ``mse_stages`` stages with its stopping tests
    disabled so its plateau is visible.  Returns ``(trace_rows, curve_rows)``.
    """
    rng = trial_streams(spec.seed, trial_index)
    ctx = DecisionContext(motivating_problem(), spec.settings)
    X, C = motivating_data(spec.m_train, rng["train"])
    cfg = replace(spec.boost, max_depth=spec.depth, split_grid=spec.split_grid)
    models = {
        "dboost": fit_dboost(X, C, ctx, cfg),
        "mse_boost": fit_mse_boost(X, C, replace(cfg, max_stages=mse_stages, eps_beta=1e-12, eps_loss=1e-12)),
    }
    trace = []
    for name, ens in models.items():
        for k, F in enumerate(ens.staged_predict(X)):
            trace.append({"method": name, "stage": k, "excess_cost": excess_cost(ctx, F, C)})
    grid = np.linspace(0.0, 1.0, n_grid)[:, None]
    truth = -np.column_stack([grid[:, 0], grid[:, 0] + np.sin(3 * grid[:, 0])])
    curves = []
    for name, ens in list(models.items()) + [("truth", None)]:
        pred = truth if ens is None else ens.predict(grid)
        Z = ctx.solve(pred).Z
        for i in range(n_grid):
            curves.append({"method": name, "x": float(grid[i, 0]), "c1": pred[i, 0], "c2": pred[i, 1],
                           "z1": Z[i, 0], "z2": Z[i, 1]})
    return trace, curves

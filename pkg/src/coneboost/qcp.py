"""Convex quadratic cone programs solved by Douglas-Rachford splitting.

Problem form::

    minimize    1/2 z'Pz + c'z
    subject to  Az + s = b,  s in K

with dual ``Pz + A'y + c = 0, y in K*``.  The solver iterates the fixed-point
map

    F(w) = (I + M)^{-1} (2 Pi(w) - w - q) + w - Pi(w)

where ``M = [[P, A'], [-A, 0]]``, ``q = (c, b)`` and ``Pi`` projects onto
``R^{d_z} x K*``.  At a fixed point ``u = Pi(w) = (z, y)`` and
``v = Pi(w) - w = (0, s)``.

Every routine has a batched form: many problems sharing ``(P, A, b, K)`` but
with different cost vectors are iterated together as rows of one matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .cones import ConeSpec, Free, dual, project

logger = logging.getLogger(__name__)

PSD_TOL = 1e-8


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    pass


class MaxIterationsExceeded(SolverError):
    """Raised when the iteration budget runs out before the KKT tolerances are met.

    The best iterate found so far is attached as ``solution``.
    """

    def __init__(self, message: str, solution: "QcpSolution"):
        super().__init__(message)
        self.solution = solution
        self.primal_residual = solution.primal_residual
        self.dual_residual = solution.dual_residual


PROBLEM_FORMAT = "coneboost.qcp"
PROBLEM_VERSION = 1


@dataclass(frozen=True)
class SolverSettings:
    max_iter: int = 50_000
    tol_abs: float = 1e-8
    tol_rel: float = 1e-8
    check_every: int = 10

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol_abs <= 0 or self.tol_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")


@dataclass(frozen=True, eq=False)
class QcpProblem:
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cone: ConeSpec

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n = c.shape[0]
        if P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {P.shape}")
        if A.shape[1] != n:
            raise ValueError(f"A must have {n} columns, got {A.shape}")
        if A.shape[0] != b.shape[0] or b.shape[0] != self.cone.dim:
            raise ValueError(
                f"rows(A)={A.shape[0]}, dim(b)={b.shape[0]} and dim(cone)={self.cone.dim} must agree"
            )
        if any(isinstance(blk, Free) for blk in self.cone.blocks):
            raise ValueError("Free blocks are not allowed in a primal cone")
        if not np.allclose(P, P.T, atol=1e-10, rtol=0):
            raise ValueError("P must be symmetric")
        if n and np.linalg.eigvalsh(P).min() < -PSD_TOL:
            raise ValueError("P must be positive semidefinite")
        for name, arr in (("P", P), ("c", c), ("A", A), ("b", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_z(self) -> int:
        return self.c.shape[0]

    @property
    def n_y(self) -> int:
        return self.b.shape[0]

    def with_cost(self, c) -> "QcpProblem":
        return replace(self, c=np.asarray(c, dtype=float))

    def objective(self, z, c=None) -> np.ndarray:
        """1/2 z'Pz + c'z, rowwise when ``z`` is a batch."""
        z = np.asarray(z, dtype=float)
        c = self.c if c is None else np.asarray(c, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.P, z) + np.sum(c * z, axis=-1)

    def to_dict(self) -> dict:
        return {
            "format": PROBLEM_FORMAT,
            "version": PROBLEM_VERSION,
            "P": self.P.tolist(),
            "c": self.c.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "cone": self.cone.to_list(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QcpProblem":
        if data.get("format", PROBLEM_FORMAT) != PROBLEM_FORMAT:
            raise ValueError(f"not a problem file (format {data.get('format')!r})")
        if data.get("version", PROBLEM_VERSION) != PROBLEM_VERSION:
            raise ValueError(f"unsupported problem version {data.get('version')!r}")
        n = len(data["c"])
        A = np.asarray(data["A"], dtype=float).reshape(-1, n)
        return cls(
            P=np.asarray(data["P"], dtype=float).reshape(n, n),
            c=np.asarray(data["c"], dtype=float),
            A=A,
            b=np.asarray(data["b"], dtype=float),
            cone=ConeSpec.from_list(data["cone"]),
        )


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    M: np.ndarray
    q: np.ndarray
    lu: tuple
    # explicit (I + M)^{-1}; the systems are tiny and the batched iteration
    # is a matrix product against it
    inv: np.ndarray
    n_z: int
    cone: ConeSpec
    # R^{n_z} x K*, the set the iterate is projected onto
    c_cone: ConeSpec = field(repr=False)

    def solve_linear(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self.lu, rhs)

    def q_batch(self, costs: np.ndarray) -> np.ndarray:
        costs = np.atleast_2d(costs)
        Q = np.empty((costs.shape[0], self.q.shape[0]))
        Q[:, : self.n_z] = costs
        Q[:, self.n_z :] = self.q[self.n_z :]
        return Q


@dataclass
class QcpSolution:
    z: np.ndarray
    y: np.ndarray
    s: np.ndarray
    w_star: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    fixed_point_residual: float = np.nan
    converged: bool = True


@dataclass
class BatchSolution:
    """Row-stacked solutions of problems that differ only in their cost."""

    Z: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    W: np.ndarray
    iterations: np.ndarray
    primal_residual: np.ndarray
    dual_residual: np.ndarray
    fixed_point_residual: np.ndarray
    converged: np.ndarray

    def __len__(self) -> int:
        return self.Z.shape[0]

    def row(self, i: int) -> QcpSolution:
        return QcpSolution(
            z=self.Z[i],
            y=self.Y[i],
            s=self.S[i],
            w_star=self.W[i],
            iterations=int(self.iterations[i]),
            primal_residual=float(self.primal_residual[i]),
            dual_residual=float(self.dual_residual[i]),
            fixed_point_residual=float(self.fixed_point_residual[i]),
            converged=bool(self.converged[i]),
        )


def product_cone(n_free: int, cone: ConeSpec) -> ConeSpec:
    head = [Free(n_free)] if n_free > 0 else []
    return ConeSpec(head + list(dual(cone).blocks))


def assemble(problem: QcpProblem) -> AssembledSystem:
    """Build ``M``, ``q`` and factorize ``I + M``."""
    n, k = problem.n_z, problem.n_y
    M = np.zeros((n + k, n + k))
    M[:n, :n] = problem.P
    M[:n, n:] = problem.A.T
    M[n:, :n] = -problem.A
    q = np.concatenate([problem.c, problem.b])
    IM = np.eye(n + k) + M
    # I + M has a PSD symmetric part plus identity, so its smallest singular
    # value is >= 1 whenever P is PSD
    if np.linalg.cond(IM) > 1e12:
        raise SingularSystemError("I + M is singular; P is not positive semidefinite")
    lu = scipy.linalg.lu_factor(IM)
    inv = scipy.linalg.lu_solve(lu, np.eye(n + k))
    for arr in (M, q, inv):
        arr.setflags(write=False)
    return AssembledSystem(
        M=M, q=q, lu=lu, inv=inv, n_z=n, cone=problem.cone, c_cone=product_cone(n, problem.cone)
    )


def fixed_point_step(w, sys: AssembledSystem, n_free: Optional[int] = None, cone: Optional[ConeSpec] = None, q=None):
    """One application of the Douglas-Rachford fixed-point map ``F``.

    ``w`` may be a single vector or a batch of rows; ``q`` defaults to the
    assembled ``sys.q`` and may also be given per row.
    """
    w = np.asarray(w, dtype=float)
    if n_free is None:
        n_free = sys.n_z
    if cone is None:
        cone = sys.cone
    c_cone = sys.c_cone if (n_free == sys.n_z and cone == sys.cone) else product_cone(n_free, cone)
    if w.shape[-1] != sys.M.shape[0]:
        raise ValueError(f"dimension mismatch: w has {w.shape[-1]}, system has {sys.M.shape[0]}")
    q = sys.q if q is None else np.asarray(q, dtype=float)
    u = project(c_cone, w)
    rhs = 2.0 * u - w - q
    return rhs @ sys.inv.T + w - u


def _residuals(problem: QcpProblem, Q: np.ndarray, U: np.ndarray, V: np.ndarray, settings: SolverSettings):
    n = problem.n_z
    Z, Y, S = U[:, :n], U[:, n:], V[:, n:]
    C = Q[:, :n]
    Az = Z @ problem.A.T
    Pz = Z @ problem.P
    Aty = Y @ problem.A
    r_prim = np.linalg.norm(Az + S - problem.b, axis=1)
    r_dual = np.linalg.norm(Pz + Aty + C, axis=1)
    b_norm = np.linalg.norm(problem.b)
    eps_prim = settings.tol_abs + settings.tol_rel * np.maximum.reduce(
        [np.linalg.norm(Az, axis=1), np.linalg.norm(S, axis=1), np.full(len(Z), b_norm)]
    )
    eps_dual = settings.tol_abs + settings.tol_rel * np.maximum.reduce(
        [np.linalg.norm(Pz, axis=1), np.linalg.norm(Aty, axis=1), np.linalg.norm(C, axis=1)]
    )
    return r_prim, r_dual, eps_prim, eps_dual


def solve_batch(
    problem: QcpProblem,
    costs,
    settings: SolverSettings = SolverSettings(),
    warm_start=None,
    system: Optional[AssembledSystem] = None,
) -> BatchSolution:
    """Solve one problem per row of ``costs``; no exception on non-convergence.

    Rows converge independently and are frozen once their residuals meet
    tolerance.  Non-converged rows carry their last iterate and
    ``converged=False``.
    """
    sys = assemble(problem) if system is None else system
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    m = costs.shape[0]
    N = sys.M.shape[0]
    n = problem.n_z
    if costs.shape[1] != n:
        raise ValueError(f"costs must have {n} columns, got {costs.shape[1]}")
    Q = sys.q_batch(costs)
    if warm_start is None:
        W = np.zeros((m, N))
    else:
        W = np.array(np.broadcast_to(np.asarray(warm_start, dtype=float), (m, N)))

    iterations = np.zeros(m, dtype=int)
    r_prim = np.full(m, np.inf)
    r_dual = np.full(m, np.inf)
    r_fp = np.full(m, np.inf)
    converged = np.zeros(m, dtype=bool)
    active = np.arange(m)
    inv_T = sys.inv.T
    c_cone = sys.c_cone

    Wa, Qa = W.copy(), Q
    k = 0
    while True:
        U = project(c_cone, Wa)
        W_next = (2.0 * U - Wa - Qa) @ inv_T + Wa - U
        rp, rd, ep, ed = _residuals(problem, Qa, U, U - Wa, settings)
        fp = np.linalg.norm(W_next - Wa, axis=1)
        r_prim[active], r_dual[active], r_fp[active] = rp, rd, fp
        iterations[active] = k
        W[active] = Wa
        done = (rp <= ep) & (rd <= ed) & (fp <= settings.tol_abs)
        converged[active[done]] = True
        keep = ~done
        if k >= settings.max_iter or not keep.any():
            break
        active, Wa, Qa = active[keep], W_next[keep], Qa[keep]
        k += 1
        # plain steps up to the next residual check
        target = min(k + settings.check_every - 1, settings.max_iter)
        while k < target:
            U = project(c_cone, Wa)
            Wa = (2.0 * U - Wa - Qa) @ inv_T + Wa - U
            k += 1

    U = project(c_cone, W)
    V = U - W
    if not converged.all():
        logger.debug("%d of %d solves hit max_iter=%d", (~converged).sum(), m, settings.max_iter)
    return BatchSolution(
        Z=U[:, :n],
        Y=U[:, n:],
        S=V[:, n:],
        W=W,
        iterations=iterations,
        primal_residual=r_prim,
        dual_residual=r_dual,
        fixed_point_residual=r_fp,
        converged=converged,
    )


def solve(
    problem: QcpProblem,
    settings: SolverSettings = SolverSettings(),
    warm_start=None,
    system: Optional[AssembledSystem] = None,
) -> QcpSolution:
    """Solve a single QCP; raises :class:`MaxIterationsExceeded` on failure."""
    if warm_start is not None:
        warm_start = np.asarray(warm_start, dtype=float)
        if warm_start.shape != (problem.n_z + problem.n_y,):
            raise ValueError("warm_start must have dimension n_z + n_y")
    batch = solve_batch(problem, problem.c[None, :], settings, warm_start, system)
    sol = batch.row(0)
    if not sol.converged:
        raise MaxIterationsExceeded(
            f"no convergence in {settings.max_iter} iterations "
            f"(primal {sol.primal_residual:.3e}, dual {sol.dual_residual:.3e})",
            sol,
        )
    return sol


def kkt_residuals(problem: QcpProblem, sol: QcpSolution) -> tuple[float, float, float]:
    """Primal residual, dual residual and primal-dual objective gap."""
    z, y, s = sol.z, sol.y, sol.s
    primal = np.linalg.norm(problem.A @ z + s - problem.b)
    dual_res = np.linalg.norm(problem.P @ z + problem.A.T @ y + problem.c)
    quad = z @ problem.P @ z
    gap = abs(0.5 * quad + problem.c @ z + 0.5 * quad + problem.b @ y)
    return float(primal), float(dual_res), float(gap)

"""Decision regret (SPO loss), its cost gradient, and excess decision cost."""
from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .qcp import AssembledSystem, BatchSolution, QcpProblem, SolverError, SolverSettings, assemble, solve_batch
from .qcpdiff import cost_gradients

logger = logging.getLogger(__name__)

# losses above this negative floor are solver noise and are reported as zero
LOSS_GRACE = 1e-6


class DenominatorNearZero(ArithmeticError):
    pass


class SolverFailure(SolverError):
    pass


@dataclass
class DecisionContext:
    """A problem template whose cost vector varies per sample.

    Decisions for predicted costs are made with ``problem``.  When
    ``true_P`` is given, decisions are judged (and the oracle solved) with
    that quadratic term instead, which models a misspecified decision
    problem; by default both coincide.

    Oracle decisions ``z*(c)`` and their objective values are cached by the
    exact bytes of ``c``; the cache is filled on demand and is otherwise
    read-only, so concurrent readers are safe.
    """

    problem: QcpProblem
    settings: SolverSettings = field(default_factory=SolverSettings)
    # fraction of non-converged solves in one batch that aborts the caller
    max_failure_rate: float = 0.01
    true_P: Optional[np.ndarray] = None

    def __post_init__(self):
        self.system: AssembledSystem = assemble(self.problem)
        if self.true_P is None:
            self.true_problem = self.problem
            self._oracle_system = self.system
        else:
            self.true_problem = QcpProblem(P=np.asarray(self.true_P, dtype=float), c=self.problem.c,
                                           A=self.problem.A, b=self.problem.b, cone=self.problem.cone)
            self._oracle_system = assemble(self.true_problem)
        self._cache: dict[bytes, tuple[np.ndarray, float]] = {}
        self._lock = threading.Lock()

    @property
    def eval_P(self) -> np.ndarray:
        return self.true_problem.P

    @property
    def n_z(self) -> int:
        return self.problem.n_z

    def clear_cache(self) -> None:
        with self._lock:
            self._cache.clear()

    def solve(self, costs, warm_start=None, oracle: bool = False) -> BatchSolution:
        """Batched solve; raises :class:`SolverFailure` above the failure rate."""
        if oracle:
            batch = solve_batch(self.true_problem, costs, self.settings, warm_start, self._oracle_system)
        else:
            batch = solve_batch(self.problem, costs, self.settings, warm_start, self.system)
        failed = int((~batch.converged).sum())
        if failed:
            rate = failed / len(batch)
            msg = (
                f"{failed}/{len(batch)} solves did not converge "
                f"(worst primal {batch.primal_residual.max():.2e}, dual {batch.dual_residual.max():.2e})"
            )
            if rate > self.max_failure_rate:
                raise SolverFailure(msg)
            logger.warning(msg)
        return batch

    def objective(self, Z, C) -> np.ndarray:
        """Realized objective of decisions ``Z`` under costs ``C``."""
        return self.true_problem.objective(Z, C)

    def oracle(self, costs) -> tuple[np.ndarray, np.ndarray]:
        """Optimal decisions and objective values under the true costs."""
        C = np.atleast_2d(np.asarray(costs, dtype=float))
        keys = [row.tobytes() for row in C]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            # duplicates among the missing rows are solved once
            uniq = list(dict.fromkeys(keys[i] for i in missing))
            first = {k: next(i for i in missing if keys[i] == k) for k in uniq}
            rows = np.array([first[k] for k in uniq])
            batch = self.solve(C[rows], oracle=True)
            objs = self.objective(batch.Z, C[rows])
            with self._lock:
                for j, k in enumerate(uniq):
                    self._cache[k] = (batch.Z[j].copy(), float(objs[j]))
        Z = np.array([self._cache[k][0] for k in keys])
        obj = np.array([self._cache[k][1] for k in keys])
        return Z, obj

    def check_consistency(self, tol: float = 1e-6) -> bool:
        """Every cached oracle objective is no worse than any other cached decision."""
        with self._lock:
            items = list(self._cache.items())
        if not items:
            return True
        C = np.array([np.frombuffer(k) for k, _ in items])
        Z = np.array([v[0] for _, v in items])
        best = np.array([v[1] for _, v in items])
        # objective of every cached decision under every cached cost
        cross = 0.5 * np.einsum("ji,ik,jk->j", Z, self.eval_P, Z)[None, :] + C @ Z.T
        return bool(np.all(cross >= best[:, None] - tol))


def qspo_losses(ctx: DecisionContext, C_hat, C, warm_start=None) -> tuple[np.ndarray, BatchSolution]:
    """Per-sample regret of decisions made under ``C_hat``, judged under ``C``."""
    C_hat = np.atleast_2d(np.asarray(C_hat, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C_hat.shape != C.shape:
        raise ValueError(f"shape mismatch: {C_hat.shape} vs {C.shape}")
    _, opt = ctx.oracle(C)
    batch = ctx.solve(C_hat, warm_start)
    return ctx.objective(batch.Z, C) - opt, batch


def qspo_loss(ctx: DecisionContext, c_hat, c) -> float:
    c_hat = np.asarray(c_hat, dtype=float)
    c = np.asarray(c, dtype=float)
    if c_hat.shape != (ctx.n_z,) or c.shape != (ctx.n_z,):
        raise ValueError(f"c_hat and c must both have shape ({ctx.n_z},)")
    losses, _ = qspo_losses(ctx, c_hat[None], c[None])
    return float(losses[0])


def qspo_grads(
    ctx: DecisionContext, C_hat, C, batch: Optional[BatchSolution] = None, warm_start=None
) -> tuple[np.ndarray, np.ndarray, BatchSolution]:
    """Batched ``d regret / d c_hat``.

    Returns the gradient rows, a mask of degenerate rows (zero gradient) and
    the batch solution at ``C_hat`` (pass ``batch`` to reuse an existing one).
    """
    C_hat = np.atleast_2d(np.asarray(C_hat, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if batch is None:
        batch = ctx.solve(C_hat, warm_start)
    dl_dz = batch.Z @ ctx.eval_P + C
    grads, degenerate = cost_gradients(ctx.system, batch, dl_dz)
    if degenerate.any():
        logger.debug("%d degenerate samples given zero gradient", degenerate.sum())
    return grads, degenerate, batch


def qspo_grad(ctx: DecisionContext, c_hat, c) -> np.ndarray:
    grads, degenerate, _ = qspo_grads(ctx, np.asarray(c_hat)[None], np.asarray(c)[None])
    if degenerate[0]:
        warnings.warn("degenerate solution: returning zero gradient", RuntimeWarning, stacklevel=2)
    return grads[0]


def report_losses(losses: np.ndarray) -> np.ndarray:
    """Clamp solver-noise negatives to zero; larger negatives are kept and flagged."""
    losses = np.asarray(losses, dtype=float)
    if (losses < -LOSS_GRACE).any():
        logger.warning("regret below -%g: %g", LOSS_GRACE, losses.min())
    return np.where((losses < 0) & (losses >= -LOSS_GRACE), 0.0, losses)


def excess_cost(ctx: DecisionContext, predictions, costs) -> float:
    """Summed regret divided by the summed optimal objective.

    The denominator may be negative (e.g. returns as negative costs); the
    ratio keeps its sign.
    """
    C_hat = np.atleast_2d(np.asarray(predictions, dtype=float))
    C = np.atleast_2d(np.asarray(costs, dtype=float))
    if C_hat.shape != C.shape or C.shape[1] != ctx.n_z:
        raise ValueError(f"predictions {C_hat.shape} and costs {C.shape} must match (m, {ctx.n_z})")
    losses, _ = qspo_losses(ctx, C_hat, C)
    _, opt = ctx.oracle(C)
    num = float(report_losses(losses).sum())
    den = float(opt.sum())
    if num == 0.0:
        return 0.0
    if abs(den) < 1e-10 * abs(num):
        raise DenominatorNearZero(f"summed optimal cost {den:.3e} is negligible against regret {num:.3e}")
    if den < 0:
        logger.info("negative excess-cost denominator %.4g; reporting signed ratio", den)
    return num / den

"""Gradient boosting of multi-output regression trees.

``fit_boost`` is the loss-agnostic skeleton: start from a constant
prediction, fit a tree to the pseudo-residual, choose a non-negative stage
weight by line search, and stop when the weight or the relative loss change
becomes negligible.  ``fit_dboost`` runs it on decision regret and
``fit_mse_boost`` on squared error.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .spo import DecisionContext, qspo_grads, qspo_losses
from .trees import RegressionTree, fit_mse_tree

ENSEMBLE_FORMAT = "coneboost.ensemble"
ENSEMBLE_VERSION = 1

STOP_BETA = "beta"
STOP_LOSS = "loss"
STOP_MAX = "max_stages"
STOP_ZERO = "zero_loss"

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BoostConfig:
    max_stages: int = 100
    eps_beta: float = 1e-4
    eps_loss: float = 1e-2
    max_depth: int = 1
    split_grid: int = 10
    beta_max: float = 10.0
    grid_size: int = 32
    golden_iters: int = 20
    # random constant candidates tried for the initial prediction
    n_restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.max_stages < 0:
            raise ValueError("max_stages must be >= 0")
        if not (0 < self.eps_beta < 1 and 0 < self.eps_loss < 1):
            raise ValueError("eps_beta and eps_loss must lie in (0, 1)")
        if self.grid_size < 2 or self.beta_max <= 0:
            raise ValueError("line search needs grid_size >= 2 and beta_max > 0")


@dataclass
class Ensemble:
    f0: np.ndarray
    betas: list[float] = field(default_factory=list)
    trees: list[RegressionTree] = field(default_factory=list)
    # training loss before the first stage and after every accepted stage
    loss_trace: list[float] = field(default_factory=list)
    # every line-searched weight, including a final rejected one
    beta_trace: list[float] = field(default_factory=list)
    stop_reason: str = ""
    loss_name: str = ""
    n_degenerate: int = 0

    @property
    def n_stages(self) -> int:
        return len(self.trees)

    @property
    def stages(self) -> list[tuple[float, RegressionTree]]:
        return list(zip(self.betas, self.trees))

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.broadcast_to(self.f0, (np.atleast_2d(X).shape[0], self.f0.size)).copy()
        for beta, tree in zip(self.betas, self.trees):
            out = out + beta * tree.predict(np.atleast_2d(X))
        return out[0] if X.ndim == 1 else out

    def staged_predict(self, X) -> Iterator[np.ndarray]:
        """Predictions after 0, 1, ..., n_stages stages."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.broadcast_to(self.f0, (X.shape[0], self.f0.size)).copy()
        yield out
        for beta, tree in zip(self.betas, self.trees):
            out = out + beta * tree.predict(X)
            yield out

    def to_dict(self) -> dict:
        return {
            "format": ENSEMBLE_FORMAT,
            "version": ENSEMBLE_VERSION,
            "loss": self.loss_name,
            "f0": self.f0.tolist(),
            "stages": [{"beta": b, "tree": t.to_dict()} for b, t in zip(self.betas, self.trees)],
            "loss_trace": list(self.loss_trace),
            "beta_trace": list(self.beta_trace),
            "stop_reason": self.stop_reason,
            "n_degenerate": self.n_degenerate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Ensemble":
        if data.get("format") != ENSEMBLE_FORMAT:
            raise ValueError("not a serialized ensemble")
        if data.get("version") != ENSEMBLE_VERSION:
            raise ValueError(f"unsupported ensemble version {data.get('version')}")
        return cls(
            f0=np.asarray(data["f0"], dtype=float),
            betas=[float(s["beta"]) for s in data["stages"]],
            trees=[RegressionTree.from_dict(s["tree"]) for s in data["stages"]],
            loss_trace=[float(v) for v in data["loss_trace"]],
            beta_trace=[float(v) for v in data["beta_trace"]],
            stop_reason=data["stop_reason"],
            loss_name=data.get("loss", ""),
            n_degenerate=int(data.get("n_degenerate", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Ensemble":
        return cls.from_dict(json.loads(text))


def predict_ensemble(ens: Ensemble, x) -> np.ndarray:
    return ens.predict(x)


def beta_grid(beta_max: float, grid_size: int) -> np.ndarray:
    """Zero followed by geometrically spaced weights up to ``beta_max``."""
    return np.concatenate([[0.0], np.geomspace(beta_max * 1e-3, beta_max, grid_size - 1)])


def line_search(objective: Callable[[float], float], beta_max: float = 10.0, grid_size: int = 32,
                golden_iters: int = 20, current: Optional[float] = None) -> tuple[float, float]:
    """Coarse grid search over ``[0, beta_max]`` refined by golden section.

    ``current`` (the objective at zero, when already known) saves one
    evaluation.  Only strict improvements replace the incumbent, so ties go
    to the smallest weight and zero is returned when nothing improves.
    """
    grid = beta_grid(beta_max, grid_size)
    vals = np.array([objective(0.0) if current is None else current] + [objective(b) for b in grid[1:]])
    k = int(np.argmin(vals))
    best_beta, best_val = float(grid[k]), float(vals[k])

    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = objective(x1), objective(x2)
    for it in range(golden_iters):
        for x, f in ((x1, f1), (x2, f2)):
            if f < best_val:
                best_beta, best_val = float(x), float(f)
        if it == golden_iters - 1:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = objective(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = objective(x2)
    return best_beta, best_val


class SquaredLoss:
    """Summed squared prediction error; pseudo-residual ``c - c_hat``.

    With ``closed_form=True`` the stage weight is the least-squares step
    ``sum <r, h> / sum ||h||^2`` clamped at zero; otherwise the generic line
    search is used.
    """

    name = "mse"
    zero_tol = 1e-20

    def __init__(self, closed_form: bool = True, cfg: BoostConfig = BoostConfig()):
        self.closed_form = closed_form
        self.cfg = cfg

    def init(self, X, C) -> np.ndarray:
        return C.mean(axis=0)

    def total(self, F, C) -> float:
        return float(((C - F) ** 2).sum())

    def negative_gradient(self, F, C) -> np.ndarray:
        return C - F

    def line_search(self, F, H, C, current) -> tuple[float, float]:
        if self.closed_form:
            hh = float((H * H).sum())
            beta = max(0.0, float(((C - F) * H).sum()) / hh) if hh > 0 else 0.0
            new = self.total(F + beta * H, C)
            if not new < current:
                return 0.0, current
            return beta, new
        cfg = self.cfg
        return line_search(lambda b: self.total(F + b * H, C), cfg.beta_max, cfg.grid_size,
                           cfg.golden_iters, current)


class RegretLoss:
    """Summed decision regret through a :class:`DecisionContext`."""

    name = "spo"

    def __init__(self, ctx: DecisionContext, cfg: BoostConfig = BoostConfig()):
        self.ctx = ctx
        self.cfg = cfg
        self.n_degenerate = 0
        self._warm = None

    @property
    def zero_tol(self) -> float:
        return 0.0

    def init(self, X, C) -> np.ndarray:
        """Best constant prediction among the mean, median and random restarts."""
        mean = C.mean(axis=0)
        rng = np.random.default_rng(self.cfg.seed)
        spread = C.std(axis=0) + 1e-12
        cands = [mean, np.median(C, axis=0)]
        cands += [mean + spread * rng.standard_normal(mean.size) for _ in range(self.cfg.n_restarts)]
        cands = np.array(cands)
        batch = self.ctx.solve(cands)
        _, opt = self.ctx.oracle(C)
        P = self.ctx.eval_P
        quad = 0.5 * np.einsum("ki,ij,kj->k", batch.Z, P, batch.Z)
        totals = len(C) * quad + batch.Z @ C.sum(axis=0) - opt.sum()
        best = 0
        for k in range(1, len(cands)):
            if totals[k] < totals[best] - 1e-12 * abs(totals[best]):
                best = k
        return cands[best].copy()

    def total(self, F, C) -> float:
        losses, batch = qspo_losses(self.ctx, F, C, self._warm)
        self._warm = batch.W
        return float(losses.sum())

    def negative_gradient(self, F, C) -> np.ndarray:
        grads, degenerate, batch = qspo_grads(self.ctx, F, C, warm_start=self._warm)
        self._warm = batch.W
        self.n_degenerate += int(degenerate.sum())
        return -grads

    def line_search(self, F, H, C, current) -> tuple[float, float]:
        if not np.any(H):
            return 0.0, current
        warm = self._warm

        def objective(beta):
            losses, _ = qspo_losses(self.ctx, F + beta * H, C, warm)
            return float(losses.sum())

        cfg = self.cfg
        return line_search(objective, cfg.beta_max, cfg.grid_size, cfg.golden_iters, current)


def line_search_beta(ctx: DecisionContext, predictions, tree_outputs, costs, cfg: BoostConfig = BoostConfig(),
                     current: Optional[float] = None) -> float:
    """Stage weight minimizing summed regret of ``predictions + beta * tree_outputs``."""
    F = np.atleast_2d(np.asarray(predictions, dtype=float))
    H = np.atleast_2d(np.asarray(tree_outputs, dtype=float))
    C = np.atleast_2d(np.asarray(costs, dtype=float))
    loss = RegretLoss(ctx, cfg)
    if current is None:
        current = loss.total(F, C)
    beta, _ = loss.line_search(F, H, C, current)
    return beta


def fit_boost(X, C, loss, cfg: BoostConfig = BoostConfig()) -> Ensemble:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if X.shape[0] == 0 or X.shape[0] != C.shape[0]:
        raise ValueError("need a non-empty dataset with matching X and C rows")
    f0 = loss.init(X, C)
    F = np.broadcast_to(f0, C.shape).copy()
    current = loss.total(F, C)
    ens = Ensemble(f0=f0, loss_trace=[current], loss_name=loss.name)

    ens.stop_reason = STOP_MAX
    for _ in range(cfg.max_stages):
        if current <= loss.zero_tol:
            ens.stop_reason = STOP_ZERO
            break
        R = loss.negative_gradient(F, C)
        tree = fit_mse_tree(X, R, cfg.max_depth, cfg.split_grid)
        H = tree.predict(X)
        beta, new = loss.line_search(F, H, C, current)
        ens.beta_trace.append(beta)
        if beta < cfg.eps_beta:
            ens.stop_reason = STOP_BETA
            break
        ens.betas.append(beta)
        ens.trees.append(tree)
        F = F + beta * H
        delta = (new - current) / abs(current)
        current = new
        ens.loss_trace.append(current)
        if abs(delta) < cfg.eps_loss:
            ens.stop_reason = STOP_LOSS
            break
    ens.n_degenerate = getattr(loss, "n_degenerate", 0)
    return ens


def fit_dboost(X, costs, ctx: DecisionContext, cfg: BoostConfig = BoostConfig()) -> Ensemble:
    """Boosted trees trained to minimize summed decision regret."""
    ctx.oracle(costs)
    return fit_boost(X, costs, RegretLoss(ctx, cfg), cfg)


def fit_mse_boost(X, costs, cfg: BoostConfig = BoostConfig()) -> Ensemble:
    """Boosted trees trained on squared error (closed-form stage weights)."""
    return fit_boost(X, costs, SquaredLoss(closed_form=True, cfg=cfg), cfg)


def stop_reason_consistent(ens: Ensemble, cfg: BoostConfig) -> bool:
    """Check the recorded stop reason against the beta and loss traces."""
    n = ens.n_stages
    if n > cfg.max_stages or len(ens.loss_trace) != n + 1:
        return False
    if list(ens.beta_trace[:n]) != list(ens.betas):
        return False
    if any(b < cfg.eps_beta for b in ens.betas):
        return False
    for k in range(n):
        prev, new = ens.loss_trace[k], ens.loss_trace[k + 1]
        # every stage before the last must have continued
        if k < n - 1 and abs((new - prev) / abs(prev)) < cfg.eps_loss:
            return False
    reason = ens.stop_reason
    if reason == STOP_BETA:
        return len(ens.beta_trace) == n + 1 and ens.beta_trace[-1] < cfg.eps_beta
    if reason == STOP_LOSS:
        prev, new = ens.loss_trace[-2], ens.loss_trace[-1]
        return n >= 1 and abs((new - prev) / abs(prev)) < cfg.eps_loss
    if reason == STOP_MAX:
        return n == cfg.max_stages
    if reason == STOP_ZERO:
        return len(ens.beta_trace) == n
    return False

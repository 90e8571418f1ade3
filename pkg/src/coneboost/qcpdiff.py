"""Implicit differentiation of the Douglas-Rachford fixed point.

At a fixed point ``w*`` the residual ``M Pi(w) + q - (Pi(w) - w)`` vanishes.
Its Jacobian in ``w`` is

    G = (I + M) D + I - 2 D,      D = DPi_C(w*)

and its derivative with respect to the data is ``dM u* + dq``.  For a loss
``l(z*)`` with gradient ``g`` this yields the adjoint vector

    (d_z, d_y) = -G^{-T} D^T (g, 0)

and the data gradients

    dl/dc = d_z,  dl/db = d_y,  dl/dP = 1/2 (d_z z*' + z* d_z'),
    dl/dA = y* d_z' - d_y z*'.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cones import ConeSpec, dprojection
from .qcp import AssembledSystem, BatchSolution, QcpSolution, SingularSystemError, product_cone

# G is treated as singular beyond this condition number
SINGULAR_COND = 1e12
# a singular G still gives a valid adjoint when the transposed system is
# consistent to this relative residual (non-unique duals, unique primal)
CONSISTENCY_TOL = 1e-8


@dataclass
class BackwardWorkspace:
    G: np.ndarray
    dpi: np.ndarray
    lu: tuple | None
    n_z: int
    degenerate: bool = False


@dataclass
class DataGradients:
    dP: np.ndarray
    dc: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    d_hat_z: np.ndarray
    d_hat_y: np.ndarray
    degenerate: bool = False


def residual_jacobian(sys: AssembledSystem, dpi: np.ndarray) -> np.ndarray:
    """``G = (I + M) D + I - 2 D``; ``dpi`` may be a stack of matrices."""
    N = sys.M.shape[0]
    eye = np.eye(N)
    return (eye + sys.M) @ dpi + eye - 2.0 * dpi


def build_workspace(
    sys: AssembledSystem, w_star, n_free: int | None = None, cone: ConeSpec | None = None, strict: bool = False
) -> BackwardWorkspace:
    """Assemble and factorize ``G`` at the fixed point ``w_star``.

    A singular ``G`` raises :class:`SingularSystemError` with
    ``strict=True``.  Otherwise the workspace keeps no factorization and
    :func:`backward` falls back to a minimum-norm solve, returning zero
    gradients only when that system is inconsistent.
    """
    if n_free is None:
        n_free = sys.n_z
    if cone is None:
        cone = sys.cone
    dpi = dprojection(product_cone(n_free, cone), np.asarray(w_star, dtype=float))
    G = residual_jacobian(sys, dpi)
    if np.linalg.cond(G) > SINGULAR_COND:
        if strict:
            raise SingularSystemError("G is singular at this fixed point (degenerate solution)")
        return BackwardWorkspace(G=G, dpi=dpi, lu=None, n_z=n_free)
    return BackwardWorkspace(G=G, dpi=dpi, lu=scipy.linalg.lu_factor(G), n_z=n_free)


def _lstsq_adjoint(GT: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    """Minimum-norm solution of ``G^T x = rhs``, or None if inconsistent."""
    x = np.linalg.lstsq(GT, rhs, rcond=1e-10)[0]
    if np.linalg.norm(GT @ x - rhs) > CONSISTENCY_TOL * max(1.0, np.linalg.norm(rhs)):
        return None
    return x


def backward(ws: BackwardWorkspace, sol: QcpSolution, dl_dz) -> DataGradients:
    """Pull ``dl/dz*`` back to gradients with respect to ``P, c, A, b``."""
    dl_dz = np.asarray(dl_dz, dtype=float)
    n = ws.n_z
    if dl_dz.shape != (n,):
        raise ValueError(f"dl_dz must have shape ({n},), got {dl_dz.shape}")
    z, y = sol.z, sol.y
    rhs = ws.dpi.T @ np.concatenate([dl_dz, np.zeros(ws.G.shape[0] - n)])
    degenerate = False
    if ws.lu is not None:
        d = -scipy.linalg.lu_solve(ws.lu, rhs, trans=1)
    else:
        x = _lstsq_adjoint(ws.G.T, rhs)
        degenerate = x is None
        d = np.zeros(ws.G.shape[0]) if degenerate else -x
    dz, dy = d[:n], d[n:]
    return DataGradients(
        dP=0.5 * (np.outer(dz, z) + np.outer(z, dz)),
        dc=dz.copy(),
        dA=np.outer(y, dz) - np.outer(dy, z),
        db=dy.copy(),
        d_hat_z=dz,
        d_hat_y=dy,
        degenerate=degenerate,
    )


def cost_gradients(sys: AssembledSystem, batch: BatchSolution, dl_dz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``dl/dc`` for rows of a :class:`BatchSolution`.

    Returns the ``(m, n_z)`` gradient matrix and a boolean mask of degenerate
    rows, whose gradients are set to zero.  Rows with a singular but
    consistent system use the minimum-norm adjoint.
    """
    dl_dz = np.atleast_2d(np.asarray(dl_dz, dtype=float))
    m = len(batch)
    n = sys.n_z
    N = sys.M.shape[0]
    dpi = dprojection(sys.c_cone, batch.W)
    G = residual_jacobian(sys, dpi)
    rhs = np.einsum("kji,kj->ki", dpi[:, :n, :], dl_dz)
    singular = np.linalg.cond(G) > SINGULAR_COND
    degenerate = np.zeros(m, dtype=bool)
    out = np.zeros((m, N))
    ok = ~singular
    if ok.any():
        GT = np.swapaxes(G[ok], 1, 2)
        out[ok] = -np.linalg.solve(GT, rhs[ok][:, :, None])[:, :, 0]
    for k in np.flatnonzero(singular):
        x = _lstsq_adjoint(G[k].T, rhs[k])
        if x is None:
            degenerate[k] = True
        else:
            out[k] = -x
    return out[:, :n], degenerate

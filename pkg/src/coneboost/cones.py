"""Block-structured cones: zero, nonnegative orthant, second-order cone.

A :class:`ConeSpec` is an ordered product of blocks.  The block order fixes
the row order of the constraint matrix and the layout of the dual and slack
vectors.  ``Free`` blocks only ever appear as the dual of ``Zero`` blocks.

All projection routines accept either a single vector of shape ``(n,)`` or a
batch of row vectors of shape ``(m, n)``; derivatives are returned as dense
``(n, n)`` matrices (or ``(m, n, n)`` stacks for batches).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

# SOC kinks are resolved by evaluating the region of v + SOC_TIEBREAK * e_1.
SOC_TIEBREAK = 1e-12


@dataclass(frozen=True)
class Zero:
    n: int
    kind = "zero"


@dataclass(frozen=True)
class NonNeg:
    n: int
    kind = "nonneg"


@dataclass(frozen=True)
class Soc:
    """Second-order cone {(t, x) : ||x|| <= t} of total dimension n."""

    n: int
    kind = "soc"


@dataclass(frozen=True)
class Free:
    n: int
    kind = "free"


ConeBlock = Zero | NonNeg | Soc | Free

_BLOCK_TYPES = {"zero": Zero, "nonneg": NonNeg, "soc": Soc, "free": Free}


@dataclass(frozen=True)
class ConeSpec:
    blocks: tuple[ConeBlock, ...]

    def __init__(self, blocks: Sequence[ConeBlock]):
        blocks = tuple(blocks)
        for blk in blocks:
            if not isinstance(blk, (Zero, NonNeg, Soc, Free)):
                raise TypeError(f"not a cone block: {blk!r}")
            if blk.n < 1:
                raise ValueError(f"block dimension must be >= 1: {blk!r}")
            if isinstance(blk, Soc) and blk.n < 2:
                raise ValueError(f"second-order cone needs dimension >= 2: {blk!r}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def dim(self) -> int:
        return sum(blk.n for blk in self.blocks)

    def slices(self) -> Iterator[tuple[ConeBlock, slice]]:
        start = 0
        for blk in self.blocks:
            yield blk, slice(start, start + blk.n)
            start += blk.n

    def to_list(self) -> list[dict]:
        return [{"type": blk.kind, "dim": blk.n} for blk in self.blocks]

    @classmethod
    def from_list(cls, records: Sequence[dict]) -> "ConeSpec":
        blocks = []
        for rec in records:
            try:
                block_type = _BLOCK_TYPES[rec["type"]]
            except KeyError:
                raise ValueError(f"unknown cone block type: {rec.get('type')!r}") from None
            blocks.append(block_type(int(rec["dim"])))
        return cls(blocks)

    def __repr__(self) -> str:
        inner = ", ".join(f"{type(b).__name__}({b.n})" for b in self.blocks)
        return f"ConeSpec([{inner}])"


def dual(cone: ConeSpec) -> ConeSpec:
    """Blockwise dual cone; Zero <-> Free, NonNeg and Soc are self-dual."""
    out = []
    for blk in cone.blocks:
        if isinstance(blk, Zero):
            out.append(Free(blk.n))
        elif isinstance(blk, Free):
            out.append(Zero(blk.n))
        else:
            out.append(blk)
    return ConeSpec(out)


def _check_dim(cone: ConeSpec, v: np.ndarray) -> None:
    if v.shape[-1] != cone.dim:
        raise ValueError(f"dimension mismatch: vector has {v.shape[-1]}, cone has {cone.dim}")


def _soc_regions(v: np.ndarray):
    # v has shape (m, n); returns t, x, ||x|| and the three region masks
    t = v[:, 0]
    x = v[:, 1:]
    r = np.linalg.norm(x, axis=1)
    t_shift = t + SOC_TIEBREAK
    inside = r <= t_shift
    polar = (~inside) & (r <= -t_shift)
    boundary = ~(inside | polar)
    return t, x, r, inside, polar, boundary


def _project_soc(v: np.ndarray) -> np.ndarray:
    t, x, r, inside, polar, boundary = _soc_regions(v)
    out = np.zeros_like(v)
    out[inside] = v[inside]
    if boundary.any():
        tb, xb, rb = t[boundary], x[boundary], r[boundary]
        scale = 0.5 * (tb + rb)
        out[boundary, 0] = scale
        out[boundary, 1:] = (scale / rb)[:, None] * xb
    return out


def _dproject_soc(v: np.ndarray) -> np.ndarray:
    m, n = v.shape
    t, x, r, inside, polar, boundary = _soc_regions(v)
    out = np.zeros((m, n, n))
    out[inside] = np.eye(n)
    if boundary.any():
        tb, rb = t[boundary], r[boundary]
        xbar = x[boundary] / rb[:, None]
        k = boundary.sum()
        blk = np.empty((k, n, n))
        blk[:, 0, 0] = 1.0
        blk[:, 0, 1:] = xbar
        blk[:, 1:, 0] = xbar
        ratio = (tb / rb)[:, None, None]
        blk[:, 1:, 1:] = (1.0 + ratio) * np.eye(n - 1) - ratio * xbar[:, :, None] * xbar[:, None, :]
        out[boundary] = 0.5 * blk
    return out


def project(cone: ConeSpec, v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` (or each row of ``v``) onto ``cone``."""
    v = np.asarray(v, dtype=float)
    _check_dim(cone, v)
    single = v.ndim == 1
    vb = np.atleast_2d(v)
    out = np.empty_like(vb)
    for blk, sl in cone.slices():
        part = vb[:, sl]
        if isinstance(blk, Free):
            out[:, sl] = part
        elif isinstance(blk, Zero):
            out[:, sl] = 0.0
        elif isinstance(blk, NonNeg):
            out[:, sl] = np.maximum(part, 0.0)
        else:
            out[:, sl] = _project_soc(part)
    return out[0] if single else out


def dprojection(cone: ConeSpec, v: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`project` at ``v``, block-diagonal by cone block.

    At kinks the derivative is fixed deterministically: nonnegative
    coordinates that are exactly zero get derivative 0, and second-order
    cone blocks use the region containing ``v + 1e-12 * e_1``.
    """
    v = np.asarray(v, dtype=float)
    _check_dim(cone, v)
    single = v.ndim == 1
    vb = np.atleast_2d(v)
    m, n = vb.shape
    out = np.zeros((m, n, n))
    for blk, sl in cone.slices():
        if isinstance(blk, Free):
            out[:, sl, sl] = np.eye(blk.n)
        elif isinstance(blk, Zero):
            pass
        elif isinstance(blk, NonNeg):
            idx = np.arange(sl.start, sl.stop)
            out[:, idx, idx] = (vb[:, sl] > 0).astype(float)
        else:
            out[:, sl, sl] = _dproject_soc(vb[:, sl])
    return out[0] if single else out


def _with_free(n_free: int, cone: ConeSpec) -> ConeSpec:
    head = [Free(n_free)] if n_free > 0 else []
    return ConeSpec(head + list(dual(cone).blocks))


def project_C(w: np.ndarray, n_free: int, cone: ConeSpec) -> np.ndarray:
    """Projection onto R^n_free x dual(cone)."""
    return project(_with_free(n_free, cone), w)


def dprojection_C(w: np.ndarray, n_free: int, cone: ConeSpec) -> np.ndarray:
    return dprojection(_with_free(n_free, cone), w)

"""RBF-FD derivative weights from polyharmonic splines with monomial augmentation.

Weights for a linear operator at a center node are obtained by solving the
dense saddle system pairing the radial-basis interpolation matrix with the
monomial constraint block.  Monomials are evaluated in support-local
coordinates ``(x - x_c) / r_s`` (``r_s`` = support radius) and the solved
weights are unscaled afterwards; without this the system is numerically
singular at small spacings.

Construction is pure per center, so callers may build stencils for many
centers in parallel; a built :class:`StencilSet` is immutable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

from . import nodeset as ns

LAPLACIAN = "laplacian"
NORMAL_DERIVATIVE = "normal"

_EXACTNESS_RTOL = 1e-7
_COND_LIMIT = 1e14


class DegenerateSupportError(RuntimeError):
    """Saddle system for a stencil is singular or hopelessly conditioned."""

    def __init__(self, center: int, detail: str = ""):
        self.center = center
        super().__init__(
            f"degenerate support at center node {center}" +
            (f": {detail}" if detail else ""))


def monomial_count(m: int, d: int) -> int:
    """Number of monomials of total degree <= m in d variables."""
    if m < 0 or d < 1:
        raise ValueError(f"need m >= 0 and d >= 1, got m={m}, d={d}")
    return math.comb(m + d, d)


def monomial_exponents(m: int, d: int) -> np.ndarray:
    """All exponent multi-indices with total degree <= m, ``(M, d)``.

    Ordered by total degree, then lexicographically, so row 0 is the
    constant monomial.
    """
    exps = [e for e in product(range(m + 1), repeat=d) if sum(e) <= m]
    exps.sort(key=lambda e: (sum(e), e))
    return np.array(exps, dtype=np.int64)


def phs(r, k: int = 3):
    """Polyharmonic spline ``r**k`` for odd ``k``."""
    return np.asarray(r, dtype=float) ** k


def phs_laplacian(r, d: int, k: int = 3):
    """Analytic Laplacian of ``r**k`` in d dimensions: ``k (k+d-2) r**(k-2)``."""
    if k + d <= 2:
        raise ValueError(f"need k + d > 2, got k={k}, d={d}")
    r = np.asarray(r, dtype=float)
    return k * (k + d - 2) * r ** (k - 2)


@dataclass(frozen=True)
class ApproxConfig:
    """Augmentation order, PHS exponent and support size for one build."""

    m: int
    dim: int
    phs_exponent: int = 3
    n: int | None = None

    def __post_init__(self):
        if self.m < 0 or self.m % 2 != 0:
            raise ValueError(f"augmentation order must be even >= 0, got {self.m}")
        if self.phs_exponent not in (3, 5, 7):
            raise ValueError(
                f"phs exponent must be odd in {{3,5,7}}, got {self.phs_exponent}")
        if self.n is None:
            object.__setattr__(self, "n", 2 * self.M + 1)
        if self.n < self.M:
            raise ValueError(
                f"support size {self.n} below monomial count {self.M}")

    @property
    def M(self) -> int:
        return monomial_count(self.m, self.dim)


def _monomial_matrix(Y: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Evaluate monomials at local points: ``(B, n, d) -> (B, n, M)``."""
    return np.prod(Y[:, :, None, :] ** exps[None, None, :, :], axis=-1)


def _monomial_operator_rhs(exps: np.ndarray, op: str,
                           normals: np.ndarray | None) -> np.ndarray:
    """Operator applied to each monomial at the (local) origin.

    Laplacian is nonzero only for pure squares (value 2); a directional first
    derivative only for degree-1 monomials (value = normal component).
    Returns ``(M,)`` for the Laplacian or ``(B, M)`` for normal derivatives.
    """
    deg = exps.sum(axis=1)
    if op == LAPLACIAN:
        out = np.where((deg == 2) & (exps.max(axis=1) == 2), 2.0, 0.0)
        return out
    axis = np.argmax(exps, axis=1)
    lin = deg == 1
    out = np.zeros((normals.shape[0], exps.shape[0]))
    out[:, lin] = normals[:, axis[lin]]
    return out


def weights_batch(sup_pts: np.ndarray, centers: np.ndarray, cfg: ApproxConfig,
                  op: str, normals: np.ndarray | None = None,
                  center_ids: np.ndarray | None = None) -> np.ndarray:
    """Solve the saddle systems for a batch of stencils.

    ``sup_pts`` is ``(B, n, d)``, ``centers`` ``(B, d)``.  Returns weights
    ``(B, n)`` in physical units (1/length^2 for the Laplacian, 1/length for
    normal derivatives).
    """
    sup_pts = np.asarray(sup_pts, dtype=float)
    centers = np.asarray(centers, dtype=float)
    B, n, d = sup_pts.shape
    k = cfg.phs_exponent
    exps = monomial_exponents(cfg.m, d)
    M = exps.shape[0]
    if center_ids is None:
        center_ids = np.arange(B)

    Y = sup_pts - centers[:, None, :]
    rs = np.linalg.norm(Y, axis=2).max(axis=1)
    bad = np.flatnonzero(rs <= 0)
    if bad.size:
        raise DegenerateSupportError(int(center_ids[bad[0]]),
                                     "all support points coincide")
    Y = Y / rs[:, None, None]

    diff = Y[:, :, None, :] - Y[:, None, :, :]
    R = np.linalg.norm(diff, axis=-1)
    A = R ** k
    P = _monomial_matrix(Y, exps)

    size = n + M
    K = np.zeros((B, size, size))
    K[:, :n, :n] = A
    K[:, :n, n:] = P
    K[:, n:, :n] = np.swapaxes(P, 1, 2)

    rnorm = np.linalg.norm(Y, axis=2)
    rhs = np.zeros((B, size))
    if op == LAPLACIAN:
        rhs[:, :n] = k * (k + d - 2) * rnorm ** (k - 2)
        rhs[:, n:] = _monomial_operator_rhs(exps, op, None)[None, :]
        order = 2
    elif op == NORMAL_DERIVATIVE:
        if normals is None:
            raise ValueError("normal derivative requires normals")
        normals = np.asarray(normals, dtype=float)
        # grad of phs(|y - y_i|) at the origin, dotted with the normal
        rhs[:, :n] = -k * rnorm ** (k - 2) * np.einsum("bnd,bd->bn", Y, normals)
        rhs[:, n:] = _monomial_operator_rhs(exps, op, normals)
        order = 1
    else:
        raise ValueError(f"unknown operator {op!r}")

    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.full((B, size), np.nan)
        for b in range(B):
            try:
                sol[b] = np.linalg.solve(K[b], rhs[b])
            except np.linalg.LinAlgError:
                raise DegenerateSupportError(
                    int(center_ids[b]), "singular saddle matrix") from None

    w = sol[:, :n]
    # exactness on the monomial block is the operative quality criterion;
    # failures get a full condition estimate before being rejected
    err = np.abs(np.einsum("bnm,bn->bm", P, w) - rhs[:, n:])
    scale = np.maximum(np.abs(rhs[:, n:]).max(axis=1), 1.0)
    ok = np.isfinite(w).all(axis=1) & (err.max(axis=1) <= _EXACTNESS_RTOL * scale)
    if not ok.all():
        b = int(np.flatnonzero(~ok)[0])
        try:
            cond = float(np.linalg.cond(K[b]))
        except np.linalg.LinAlgError:
            cond = float("inf")
        raise DegenerateSupportError(
            int(center_ids[b]),
            f"condition estimate {cond:.3g} exceeds {_COND_LIMIT:.0e}"
            if cond > _COND_LIMIT else f"solve residual {err[b].max():.3g}")

    return w / rs[:, None] ** order


def build_stencil(nodes: ns.NodeSet, center: int, cfg: ApproxConfig,
                  op: str = LAPLACIAN, normal: np.ndarray | None = None,
                  check_conditioning: bool = False):
    """Support indices and operator weights for a single center node.

    Returns ``(support, weights)`` with the center itself first in the
    support.  With ``check_conditioning`` the saddle matrix condition number
    is estimated up front and a :class:`DegenerateSupportError` raised above
    1e14 even if the solve would numerically succeed.
    """
    sup = ns.support_sets(nodes, np.array([center]), cfg.n)[0]
    pts = nodes.positions[sup][None, :, :]
    ctr = nodes.positions[center][None, :]
    if check_conditioning:
        _check_condition(pts[0], ctr[0], cfg, center)
    nrm = None if normal is None else np.asarray(normal, float)[None, :]
    w = weights_batch(pts, ctr, cfg, op, nrm, center_ids=np.array([center]))[0]
    return sup, w


def _check_condition(pts, ctr, cfg: ApproxConfig, center: int) -> None:
    exps = monomial_exponents(cfg.m, cfg.dim)
    Y = pts - ctr
    rs = np.linalg.norm(Y, axis=1).max()
    if rs <= 0:
        raise DegenerateSupportError(center, "all support points coincide")
    Y = Y / rs
    R = np.linalg.norm(Y[:, None, :] - Y[None, :, :], axis=-1)
    n, M = pts.shape[0], exps.shape[0]
    K = np.zeros((n + M, n + M))
    K[:n, :n] = R ** cfg.phs_exponent
    K[:n, n:] = _monomial_matrix(Y[None], exps)[0]
    K[n:, :n] = K[:n, n:].T
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise DegenerateSupportError(
            center, f"condition estimate {cond:.3g} exceeds {_COND_LIMIT:.0e}")


def apply_stencil(weights: np.ndarray, values: np.ndarray) -> float:
    """Dot product of weights with supported field values."""
    weights = np.asarray(weights, dtype=float)
    values = np.asarray(values, dtype=float)
    if weights.shape != values.shape:
        raise ValueError(
            f"length mismatch: {weights.shape} weights vs {values.shape} values")
    return float(weights @ values)


@dataclass
class StencilSet:
    """Laplacian stencils for interior nodes, normal-derivative stencils for
    Neumann boundary nodes.  Row lookup arrays map node index -> row or -1."""

    n: int
    lap_centers: np.ndarray    # (C,)
    lap_support: np.ndarray    # (C, n) including the center, nearest-first
    lap_weights: np.ndarray    # (C, n)
    neu_centers: np.ndarray
    neu_support: np.ndarray
    neu_weights: np.ndarray
    lap_row: np.ndarray        # (N,)
    neu_row: np.ndarray        # (N,)

    def support_of(self, i: int) -> np.ndarray:
        if self.lap_row[i] >= 0:
            return self.lap_support[self.lap_row[i]]
        if self.neu_row[i] >= 0:
            return self.neu_support[self.neu_row[i]]
        raise KeyError(f"no stencil built for node {i}")


_BATCH = 4096


def neumann_supports(nodes: ns.NodeSet, bc: np.ndarray, centers: np.ndarray,
                     n: int) -> np.ndarray:
    """Supports for Neumann boundary stencils: the center plus its ``n - 1``
    nearest interior nodes.

    Boundary values are extrapolated from interior values of the previous
    step; admitting other boundary nodes into these supports couples the
    extrapolations to each other and destabilises the explicit iteration.
    """
    interior = np.flatnonzero(bc == ns.BC_NONE)
    if interior.size < n - 1:
        raise InsufficientInteriorError(
            f"need {n - 1} interior nodes for Neumann supports, "
            f"have {interior.size}")
    itree = cKDTree(nodes.positions[interior])
    _, idx = itree.query(nodes.positions[centers], k=n - 1)
    idx = np.atleast_2d(idx)
    return np.hstack([centers[:, None], interior[idx]])


class InsufficientInteriorError(RuntimeError):
    """Too few interior nodes to one-side a boundary stencil."""


def build_stencil_set(nodes: ns.NodeSet, bc: np.ndarray,
                      cfg: ApproxConfig) -> StencilSet:
    """Build all stencils the solver needs.

    Interior nodes get Laplacian weights over their n nearest nodes; Neumann
    boundary nodes get normal-derivative weights over themselves plus their
    nearest interior nodes.  Dirichlet nodes are frozen and need none.

    Boundary stencils carry two extra monomial degrees (and the matching
    support size).  Extrapolated boundary values feed back into every nearby
    interior stencil, so their truncation error is amplified relative to the
    interior's; the extra degrees buy that headroom back.
    """
    N = nodes.count
    lap_centers = np.flatnonzero(bc == ns.BC_NONE)
    neu_centers = np.flatnonzero(bc == ns.BC_NEUMANN)
    bcfg = ApproxConfig(m=cfg.m + 2, dim=cfg.dim, phs_exponent=cfg.phs_exponent)

    def batched(centers, op, normals, c, sup=None):
        if sup is None:
            sup = ns.support_sets(nodes, centers, c.n)
        W = np.empty((len(centers), c.n))
        for lo in range(0, len(centers), _BATCH):
            hi = min(lo + _BATCH, len(centers))
            nrm = None if normals is None else normals[lo:hi]
            W[lo:hi] = weights_batch(
                nodes.positions[sup[lo:hi]], nodes.positions[centers[lo:hi]],
                c, op, nrm, center_ids=centers[lo:hi])
        return sup, W

    if lap_centers.size:
        lap_sup, lap_W = batched(lap_centers, LAPLACIAN, None, cfg)
    else:
        lap_sup = np.empty((0, cfg.n), dtype=np.int64)
        lap_W = np.empty((0, cfg.n))
    if neu_centers.size:
        neu_sup, neu_W = batched(neu_centers, NORMAL_DERIVATIVE,
                                 nodes.normals[neu_centers], bcfg,
                                 sup=neumann_supports(nodes, bc, neu_centers,
                                                      bcfg.n))
    else:
        neu_sup = np.empty((0, bcfg.n), dtype=np.int64)
        neu_W = np.empty((0, bcfg.n))

    lap_row = np.full(N, -1, dtype=np.int64)
    lap_row[lap_centers] = np.arange(lap_centers.size)
    neu_row = np.full(N, -1, dtype=np.int64)
    neu_row[neu_centers] = np.arange(neu_centers.size)
    return StencilSet(n=cfg.n, lap_centers=lap_centers, lap_support=lap_sup,
                      lap_weights=lap_W, neu_centers=neu_centers,
                      neu_support=neu_sup, neu_weights=neu_W,
                      lap_row=lap_row, neu_row=neu_row)


def save_stencil_csv(stencils: StencilSet, path) -> None:
    """Debug dump ``center,neighbor,weight_lap``; no stable format promised."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center", "neighbor", "weight_lap"])
        for r, c in enumerate(stencils.lap_centers):
            for j in range(stencils.n):
                w.writerow([c, stencils.lap_support[r, j],
                            f"{stencils.lap_weights[r, j]:.17g}"])

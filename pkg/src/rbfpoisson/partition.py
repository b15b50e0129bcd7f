"""Regular-grid domain decomposition and halo exchange maps.

The node set is split into equal-width grid cells per axis; a root-role
function then derives, per subdomain, the halo (non-owned nodes whose values
must arrive each step) and matched send/receive lists.  The halo is closed
under Neumann enforcement: every Neumann boundary node reachable from an
owned interior support carries its own full support along, so each worker can
recompute those boundary values locally without a second exchange phase.

All list orderings are sorted by global index so runs reproduce bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nodeset as ns
from .rbffd import StencilSet


class ClosureError(RuntimeError):
    """A stencil support escapes the owned + halo set of its subdomain."""


@dataclass
class SubdomainMap:
    """Exchange bookkeeping for one subdomain, in global indices."""

    owned: np.ndarray                  # sorted
    halo: np.ndarray                   # sorted, disjoint from owned
    recv: dict[int, np.ndarray]        # peer -> nodes received from peer
    send: dict[int, np.ndarray]        # peer -> nodes sent to peer

    @property
    def peers(self):
        return sorted(set(self.recv) | set(self.send))


@dataclass
class PartitionPlan:
    grid: tuple
    owners: np.ndarray
    subdomains: list

    @property
    def count(self) -> int:
        return len(self.subdomains)


@dataclass
class LocalIndexMap:
    """Owned-first local ordering of one subdomain's nodes."""

    local_to_global: np.ndarray
    global_to_local: np.ndarray        # full-length, -1 outside the subdomain
    n_owned: int


def assign_owners(nodes: ns.NodeSet, grid) -> np.ndarray:
    """Flattened grid-cell index per node; cells half-open, top edge closed."""
    grid = tuple(int(g) for g in grid)
    if len(grid) != nodes.dim or any(g < 1 for g in grid):
        raise ValueError(f"bad grid {grid} for dim {nodes.dim}")
    side = nodes.domain.side
    cells = np.empty((nodes.count, nodes.dim), dtype=np.int64)
    for a, k in enumerate(grid):
        w = side / k
        idx = np.floor(nodes.positions[:, a] / w).astype(np.int64)
        cells[:, a] = np.clip(idx, 0, k - 1)
    return np.ravel_multi_index(cells.T, grid)


def build_exchange_maps(nodes: ns.NodeSet, stencils: StencilSet,
                        owners: np.ndarray, grid) -> PartitionPlan:
    """Compute halos plus matched send/receive lists for each subdomain.

    A subdomain needs: the supports of its owned interior nodes, and -- to a
    fixed point -- the supports of every Neumann boundary node inside its
    needed set (Neumann values are recomputed locally by every worker that
    sees them).
    """
    owners = np.asarray(owners)
    if owners.min() < 0:
        raise RuntimeError("node without an owner")
    p = int(np.prod(grid))
    N = nodes.count

    neumann_nodes = stencils.neu_centers
    is_neumann = np.zeros(N, dtype=bool)
    is_neumann[neumann_nodes] = True

    subs = []
    for s in range(p):
        own_mask = owners == s
        owned = np.flatnonzero(own_mask)
        int_rows = stencils.lap_row[owned]
        int_rows = int_rows[int_rows >= 0]
        needed = np.zeros(N, dtype=bool)
        needed[owned] = True
        if int_rows.size:
            needed[stencils.lap_support[int_rows].ravel()] = True
        # close over Neumann supports; each round can expose new Neumann
        # nodes, so iterate until stable
        while True:
            neu = np.flatnonzero(needed & is_neumann)
            rows = stencils.neu_row[neu]
            add = stencils.neu_support[rows].ravel()
            before = needed.sum()
            needed[add] = True
            if needed.sum() == before:
                break
        halo = np.flatnonzero(needed & ~own_mask)
        recv: dict[int, np.ndarray] = {}
        for t in np.unique(owners[halo]):
            recv[int(t)] = halo[owners[halo] == t]
        subs.append(SubdomainMap(owned=owned, halo=halo, recv=recv, send={}))

    # send/receive symmetry: s sends to t exactly what t receives from s
    for t, sub_t in enumerate(subs):
        for s, lst in sub_t.recv.items():
            subs[s].send[t] = lst
    return PartitionPlan(grid=tuple(int(g) for g in grid), owners=owners,
                         subdomains=subs)


def localize(plan: PartitionPlan, s: int, stencils: StencilSet):
    """Local index map plus re-indexed stencils for subdomain ``s``.

    Locals are ordered owned-first then halo, both sorted by global index.
    Returns ``(LocalIndexMap, lap, neu)`` where ``lap`` and ``neu`` are
    ``(centers, support, weights)`` triples with local indices; ``lap`` covers
    owned interior nodes, ``neu`` every Neumann node in owned + halo.
    """
    sub = plan.subdomains[s]
    local_to_global = np.concatenate([sub.owned, sub.halo])
    g2l = np.full(plan.owners.shape[0], -1, dtype=np.int64)
    g2l[local_to_global] = np.arange(local_to_global.size)
    imap = LocalIndexMap(local_to_global=local_to_global, global_to_local=g2l,
                         n_owned=sub.owned.size)

    def reindex(centers_g, sup_g, W):
        centers_l = g2l[centers_g]
        sup_l = g2l[sup_g]
        if (sup_l < 0).any():
            bad = centers_g[(sup_l < 0).any(axis=1)][0]
            raise ClosureError(
                f"support of node {bad} escapes owned+halo of subdomain {s}")
        return centers_l, sup_l, W

    int_rows = stencils.lap_row[sub.owned]
    int_rows = int_rows[int_rows >= 0]
    lap = reindex(stencils.lap_centers[int_rows],
                  stencils.lap_support[int_rows],
                  stencils.lap_weights[int_rows])

    in_scope = local_to_global[np.isin(local_to_global, stencils.neu_centers)]
    neu_rows = stencils.neu_row[in_scope]
    neu = reindex(stencils.neu_centers[neu_rows],
                  stencils.neu_support[neu_rows],
                  stencils.neu_weights[neu_rows])
    return imap, lap, neu


def plan_summary(plan: PartitionPlan) -> dict:
    """JSON-friendly per-subdomain counts and per-pair message sizes."""
    out = {"grid": list(plan.grid), "subdomains": []}
    for s, sub in enumerate(plan.subdomains):
        out["subdomains"].append({
            "id": s,
            "owned": int(sub.owned.size),
            "halo": int(sub.halo.size),
            "recv_counts": {str(t): int(v.size) for t, v in sorted(sub.recv.items())},
            "send_counts": {str(t): int(v.size) for t, v in sorted(sub.send.items())},
        })
    return out

"""Scattered node sets on the cube: boundary seeding, interior fill, neighbour queries.

Nodes discretise the closed cube ``[0, side]^dim``.  The boundary is seeded
first at roughly the target spacing; the interior is then filled with a
Poisson-disc style candidate expansion that keeps all pairwise distances at or
above the spacing (up to a tiny float-safety slack).  Construction is
single-threaded and the resulting :class:`NodeSet` is immutable in practice.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

INTERIOR = 0
BOUNDARY = 1

# boundary-condition codes per node (derived from Domain faces)
BC_NONE = 0
BC_DIRICHLET = 1
BC_NEUMANN = 2

# candidates are generated at distance exactly h; accept unless an existing
# node is closer than h * (1 - slack)
PROXIMITY_SLACK = 1e-12

_FACE_TOL = 1e-9


class SpacingError(ValueError):
    """Requested internodal spacing does not fit the domain."""


class InsufficientNodesError(ValueError):
    """More neighbours requested than nodes available."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned cube ``[0, side]^dim`` with a boundary condition per face.

    Faces are keyed ``(axis, upper)``; ``upper=True`` is the face at
    coordinate ``side``.  Faces not listed in ``neumann_faces`` carry
    homogeneous Dirichlet conditions.
    """

    dim: int
    side: float = 1.0
    neumann_faces: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 1 <= self.dim <= 3:
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.side not in (1.0, 0.5):
            raise ValueError(f"side must be 1 or 1/2, got {self.side}")
        for axis, upper in self.neumann_faces:
            if not (0 <= axis < self.dim and isinstance(upper, bool)):
                raise ValueError(f"bad face key {(axis, upper)}")

    @classmethod
    def unit_cube(cls, dim: int) -> "Domain":
        return cls(dim=dim, side=1.0)

    @classmethod
    def mixed_quadrant(cls, dim: int) -> "Domain":
        """Half-side cube with Neumann faces where it cuts the unit cube.

        The upper faces (coordinate = 1/2) lie inside the original cube and
        get zero-flux Neumann conditions; the rest stay Dirichlet.
        """
        return cls(dim=dim, side=0.5,
                   neumann_faces=frozenset((a, True) for a in range(dim)))

    def faces(self):
        for axis in range(self.dim):
            for upper in (False, True):
                yield (axis, upper)

    def face_normal(self, face) -> np.ndarray:
        axis, upper = face
        n = np.zeros(self.dim)
        n[axis] = 1.0 if upper else -1.0
        return n

    def face_is_neumann(self, face) -> bool:
        return face in self.neumann_faces

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Closed-cube containment mask for an ``(N, dim)`` array."""
        pts = np.atleast_2d(pts)
        return np.all((pts >= 0.0) & (pts <= self.side), axis=1)

    def faces_of_point(self, p: np.ndarray):
        out = []
        for axis in range(self.dim):
            if abs(p[axis]) <= _FACE_TOL:
                out.append((axis, False))
            if abs(p[axis] - self.side) <= _FACE_TOL:
                out.append((axis, True))
        return out


@dataclass
class NodeSet:
    """Positions, target spacing, boundary flags and outward normals."""

    domain: Domain
    h: float
    positions: np.ndarray          # (N, dim)
    kind: np.ndarray               # (N,) INTERIOR | BOUNDARY
    normals: np.ndarray            # (N, dim); NaN rows for interior nodes
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.domain.dim

    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kind == BOUNDARY)

    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kind == INTERIOR)

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree


def discretize_boundary(domain: Domain, h: float):
    """Seed the cube boundary at spacing ``~h``.

    Returns ``(positions, normals)``.  Points shared by several faces (edges,
    corners) are stored once with the normalised sum of the face normals.
    The per-axis tick count is ``floor(side / h)`` so realised spacing never
    drops below ``h``.
    """
    if h <= 0:
        raise SpacingError(f"spacing must be positive, got {h}")
    if h >= domain.side:
        raise SpacingError(
            f"spacing {h} does not fit side {domain.side}")
    d, side = domain.dim, domain.side
    if d == 1:
        return (np.array([[0.0], [side]]), np.array([[-1.0], [1.0]]))

    q = max(1, int(math.floor(side / h + 1e-9)))
    ticks = np.linspace(0.0, side, q + 1)

    # map exact coordinate tuple -> set of faces touching it
    seen: dict[tuple, set] = {}
    for face in domain.faces():
        axis, upper = face
        fixed = side if upper else 0.0
        free_axes = [a for a in range(d) if a != axis]
        for combo in itertools.product(ticks, repeat=d - 1):
            p = [0.0] * d
            p[axis] = fixed
            for a, v in zip(free_axes, combo):
                p[a] = v
            seen.setdefault(tuple(p), set()).add(face)

    positions = np.array(sorted(seen.keys()))
    normals = np.empty_like(positions)
    for i, key in enumerate(sorted(seen.keys())):
        n = np.sum([domain.face_normal(f) for f in seen[key]], axis=0)
        normals[i] = n / np.linalg.norm(n)
    return positions, normals


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    if dim == 1:
        return rng.choice([-1.0, 1.0], size=(count, 1))
    v = rng.normal(size=(count, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def fill_interior(domain: Domain, seeds_pos: np.ndarray,
                  seeds_normals: np.ndarray, h: float,
                  rng_seed: int) -> NodeSet:
    """Fill the cube interior by Poisson-disc candidate expansion.

    Starting from the boundary seeds, each queued point spawns
    ``2 * dim * (dim + 1)`` candidates at distance exactly ``h`` in uniformly
    random directions; a candidate is kept when it lies strictly inside the
    cube and no existing node is closer than ``h * (1 - 1e-12)``.  Output is a
    pure function of ``(domain, h, rng_seed)``.
    """
    if len(seeds_pos) == 0:
        raise ValueError("seed set must be nonempty")
    if h <= 0:
        raise SpacingError(f"spacing must be positive, got {h}")
    d, side = domain.dim, domain.side
    rng = np.random.default_rng(rng_seed)
    n_cand = 2 * d * (d + 1)
    r_min2 = (h * (1.0 - PROXIMITY_SLACK)) ** 2

    # one node per bucket requires cell <= h / sqrt(d); proximity checks then
    # span +-2 cells around the candidate
    cell = h / math.sqrt(d)
    points = [tuple(p) for p in np.asarray(seeds_pos, dtype=float)]

    def cell_key(p):
        return tuple(int(c // cell) for c in p)

    # boundary seeds may share a bucket (their spacing is tied to the face
    # grid, not to cell), so buckets hold lists
    grid_list: dict[tuple, list] = {}
    for idx, p in enumerate(points):
        grid_list.setdefault(cell_key(p), []).append(idx)

    span = range(-2, 3)
    offsets = list(itertools.product(span, repeat=d))

    ptr = 0
    while ptr < len(points):
        base = points[ptr]
        ptr += 1
        dirs = _unit_directions(rng, n_cand, d)
        for k in range(n_cand):
            cand = tuple(base[a] + h * dirs[k, a] for a in range(d))
            if not all(0.0 < c < side for c in cand):
                continue
            ck = cell_key(cand)
            ok = True
            for off in offsets:
                bucket = grid_list.get(tuple(c + o for c, o in zip(ck, off)))
                if not bucket:
                    continue
                for j in bucket:
                    q = points[j]
                    dist2 = sum((cand[a] - q[a]) ** 2 for a in range(d))
                    if dist2 < r_min2:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                points.append(cand)
                grid_list.setdefault(ck, []).append(len(points) - 1)

    n_seed = len(seeds_pos)
    positions = np.array(points)
    kind = np.full(len(points), INTERIOR, dtype=np.uint8)
    kind[:n_seed] = BOUNDARY
    normals = np.full((len(points), d), np.nan)
    normals[:n_seed] = seeds_normals
    return NodeSet(domain=domain, h=h, positions=positions, kind=kind,
                   normals=normals)


def generate(domain: Domain, h: float, rng_seed: int = 0) -> NodeSet:
    """Boundary seeding followed by interior fill."""
    pos, nrm = discretize_boundary(domain, h)
    return fill_interior(domain, pos, nrm, h, rng_seed)


def nearest_neighbors(nodes: NodeSet, query: np.ndarray, k: int) -> np.ndarray:
    """Exact k-nearest node indices sorted by distance (ties by lower index)."""
    if k > nodes.count:
        raise InsufficientNodesError(
            f"requested {k} neighbours from {nodes.count} nodes")
    dist, idx = nodes.tree().query(np.asarray(query, dtype=float), k=k)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    order = np.lexsort((idx, dist))
    return idx[order]


def support_sets(nodes: NodeSet, centers: np.ndarray, k: int) -> np.ndarray:
    """Batched k-nearest supports for the given center indices, ``(C, k)``."""
    if k > nodes.count:
        raise InsufficientNodesError(
            f"requested {k} neighbours from {nodes.count} nodes")
    _, idx = nodes.tree().query(nodes.positions[centers], k=k)
    return np.atleast_2d(idx)


def classify_nodes(nodes: NodeSet) -> np.ndarray:
    """Per-node BC code: interior, Dirichlet or Neumann.

    A boundary node touching any Dirichlet face is Dirichlet; only nodes
    whose faces are all Neumann get the Neumann code.
    """
    domain = nodes.domain
    bc = np.full(nodes.count, BC_NONE, dtype=np.uint8)
    for i in nodes.boundary_indices():
        faces = domain.faces_of_point(nodes.positions[i])
        if not faces:
            raise ValueError(f"boundary node {i} lies on no face")
        if all(domain.face_is_neumann(f) for f in faces):
            bc[i] = BC_NEUMANN
        else:
            bc[i] = BC_DIRICHLET
    return bc


def save_csv(nodes: NodeSet, path) -> None:
    """Write ``x0,..,x{d-1},kind,n0,..,n{d-1}``; normals empty for interior."""
    d = nodes.dim
    header = [f"x{a}" for a in range(d)] + ["kind"] + [f"n{a}" for a in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(nodes.count):
            row = [f"{v:.17g}" for v in nodes.positions[i]]
            if nodes.kind[i] == BOUNDARY:
                row += ["B"] + [f"{v:.17g}" for v in nodes.normals[i]]
            else:
                row += ["I"] + [""] * d
            w.writerow(row)


def load_csv(path, domain: Domain, h: float) -> NodeSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = header.index("kind")
    if d != domain.dim:
        raise ValueError(f"file is {d}-dimensional, domain is {domain.dim}")
    positions = np.array([[float(v) for v in r[:d]] for r in body])
    kind = np.array([BOUNDARY if r[d] == "B" else INTERIOR for r in body],
                    dtype=np.uint8)
    normals = np.full((len(body), d), np.nan)
    for i, r in enumerate(body):
        if r[d] == "B":
            normals[i] = [float(v) for v in r[d + 1:2 * d + 1]]
    return NodeSet(domain=domain, h=h, positions=positions, kind=kind,
                   normals=normals)

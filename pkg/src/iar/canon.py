"""Canonical tokenization: inertial-frame pose plus permutation-invariant atom order.

Pose: center the cloud, diagonalize the (unweighted) inertia tensor, order axes by
descending eigenvalue, then fix axis signs with an anchor atom that must land in the
first quadrant of the x-y plane. Order: Morgan-style refinement of atom invariants on
the inferred bond graph, with ties broken on canonical coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .bonds import BondGraph, infer_bonds
from .molio import Molecule

TAU_PLANE = 1e-6  # Angstrom; anchor must be this far off the y-z and x-z planes
EIG_TIE_RTOL = 1e-6
ORTHO_TOL = 1e-9
COORD_ROUND = 4  # decimals of canonical coordinates used in tie-breaking

__all__ = [
    "BondGraph",
    "CanonicalRank",
    "CanonicalSequence",
    "FuzzReport",
    "InertialFrame",
    "NoValidAnchor",
    "canonical_pose",
    "canonical_rank",
    "centroid",
    "eigen_frame",
    "fix_axis_signs",
    "fuzz_invariance",
    "infer_bonds",
    "inertia_tensor",
    "tokenize",
]


class NoValidAnchor(ValueError):
    """Every atom lies within TAU_PLANE of the y-z or x-z plane."""


@dataclass(frozen=True, eq=False)
class InertialFrame:
    center: np.ndarray
    rotation: np.ndarray  # columns are the canonical axes expressed in world coordinates
    eigenvalues: np.ndarray
    degenerate_groups: tuple[tuple[int, ...], ...]
    anchor: int | None = None
    fallback: bool = False

    @property
    def degenerate(self) -> bool:
        return any(len(g) > 1 for g in self.degenerate_groups)


def centroid(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    return coords.sum(axis=0) / coords.shape[0]


def inertia_tensor(centered) -> np.ndarray:
    """sum_i |c_i|^2 I - c_i c_i^T over unit masses."""
    c = np.asarray(centered, dtype=np.float64).reshape(-1, 3)
    return np.einsum("ij,ij->", c, c) * np.eye(3) - c.T @ c


def eigen_frame(tensor) -> tuple[np.ndarray, np.ndarray, tuple[tuple[int, ...], ...]]:
    """Eigenvalues (descending), eigenvectors as columns, and the tie partition of {0, 1, 2}."""
    tensor = np.asarray(tensor, dtype=np.float64)
    scale = np.max(np.abs(tensor))
    if scale == 0.0:
        return np.zeros(3), np.eye(3), ((0, 1, 2),)
    vals, vecs = np.linalg.eigh(0.5 * (tensor + tensor.T))
    vals, vecs = vals[::-1].copy(), vecs[:, ::-1].copy()
    tol = EIG_TIE_RTOL * np.max(np.abs(vals))
    groups = [[0]]
    for k in (1, 2):
        if vals[groups[-1][-1]] - vals[k] <= tol:
            groups[-1].append(k)
        else:
            groups.append([k])
    return vals, vecs, tuple(tuple(g) for g in groups)


def _priority(centered: np.ndarray, types) -> list[int]:
    """Atoms by descending charge, then descending distance from the origin."""
    dist = np.linalg.norm(centered, axis=1)
    return sorted(range(len(dist)), key=lambda i: (-types[i], -dist[i]))


def _by_distance(centered: np.ndarray, types) -> list[int]:
    dist = np.linalg.norm(centered, axis=1)
    return sorted(range(len(dist)), key=lambda i: (-dist[i], -types[i]))


def _resolve_degenerate(vecs: np.ndarray, groups, centered: np.ndarray, types) -> np.ndarray:
    """Pin down the basis inside tied eigenspaces using the farthest off-axis atoms."""
    vecs = vecs.copy()
    order = _by_distance(centered, types)
    for g in groups:
        if len(g) == 2:
            sub = vecs[:, list(g)]
            proj = centered @ sub
            for i in order:
                p = proj[i]
                norm = np.hypot(p[0], p[1])
                if norm > TAU_PLANE:
                    u = sub @ (p / norm)
                    v = sub @ (np.array([-p[1], p[0]]) / norm)
                    vecs[:, g[0]], vecs[:, g[1]] = u, v
                    break
        elif len(g) == 3:
            axes = []
            for i in order:
                r = centered[i].copy()
                for a in axes:
                    r -= (r @ a) * a
                norm = np.linalg.norm(r)
                if norm > TAU_PLANE:
                    axes.append(r / norm)
                if len(axes) == 2:
                    break
            if len(axes) == 1:
                # pick any perpendicular direction deterministically
                helper = np.eye(3)[int(np.argmin(np.abs(axes[0])))]
                w = helper - (helper @ axes[0]) * axes[0]
                axes.append(w / np.linalg.norm(w))
            if axes:
                vecs = np.column_stack([axes[0], axes[1], np.cross(axes[0], axes[1])])
    return vecs


def _anchor_candidates(eigvecs, centered, types) -> list[int]:
    """Valid anchor atoms, farthest first."""
    proj = centered @ np.asarray(eigvecs)
    return [
        i
        for i in _by_distance(centered, types)
        if abs(proj[i, 0]) > TAU_PLANE and abs(proj[i, 1]) > TAU_PLANE
    ]


def find_anchor(eigvecs, centered, types=None) -> int:
    """Index of the farthest atom whose x and y projections both exceed TAU_PLANE.

    Symmetry-equivalent atoms can tie on distance; the candidate whose resulting pose
    sorts first (as a sorted list of rounded (charge, x, y, z) rows) wins, which does
    not depend on input order.
    """
    centered = np.asarray(centered, dtype=np.float64).reshape(-1, 3)
    types = types if types is not None else [0] * len(centered)
    cands = _anchor_candidates(eigvecs, centered, types)
    if not cands:
        raise NoValidAnchor("no atom lies off both the y-z and x-z planes")
    dist = np.linalg.norm(centered, axis=1)
    tied = [i for i in cands if dist[cands[0]] - dist[i] <= TAU_PLANE and types[i] == types[cands[0]]]
    if len(tied) == 1:
        return tied[0]

    def pose_key(i):
        posed = centered @ _signed_axes(eigvecs, centered, i)
        return sorted((types[k], *np.round(posed[k], 6)) for k in range(len(centered)))

    return min(tied, key=pose_key)


def _signed_axes(eigvecs, centered, anchor: int) -> np.ndarray:
    p = centered[anchor] @ eigvecs
    x = eigvecs[:, 0] * np.sign(p[0])
    y = eigvecs[:, 1] * np.sign(p[1])
    return np.column_stack([x, y, np.cross(x, y)])


def fix_axis_signs(eigvecs, centered, types=None) -> np.ndarray:
    """Right-handed rotation whose x-y quadrant of the anchor atom is the first one."""
    eigvecs = np.asarray(eigvecs, dtype=np.float64)
    centered = np.asarray(centered, dtype=np.float64).reshape(-1, 3)
    return _signed_axes(eigvecs, centered, find_anchor(eigvecs, centered, types))


def _fallback_signs(eigvecs: np.ndarray, centered: np.ndarray, types) -> np.ndarray:
    """Sign each axis by the first atom (charge, then distance) with a nonzero projection."""
    vecs = eigvecs.copy()
    proj = centered @ vecs
    fixed = [False, False, False]
    for k in range(3):
        for i in _priority(centered, types):
            if abs(proj[i, k]) > TAU_PLANE:
                if proj[i, k] < 0:
                    vecs[:, k] = -vecs[:, k]
                fixed[k] = True
                break
    if np.linalg.det(vecs) < 0:
        free = [k for k in range(3) if not fixed[k]]
        k = free[-1] if free else 2
        vecs[:, k] = -vecs[:, k]
    return vecs


def canonical_pose(mol: Molecule) -> tuple[Molecule, InertialFrame]:
    center = centroid(mol.coords)
    centered = mol.coords - center
    vals, vecs, groups = eigen_frame(inertia_tensor(centered))
    vecs = _resolve_degenerate(vecs, groups, centered, mol.atom_types)
    anchor, fallback = None, False
    try:
        anchor = find_anchor(vecs, centered, mol.atom_types)
        rot = _signed_axes(vecs, centered, anchor)
    except NoValidAnchor:
        fallback = True
        rot = _fallback_signs(vecs, centered, mol.atom_types)
    posed = centered @ rot
    frame = InertialFrame(center, rot, vals, groups, anchor, fallback)
    return mol.with_coords(posed), frame


# --------------------------------------------------------------------------
# canonical ordering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalRank:
    rank: tuple[int, ...]  # 1-based, a permutation of 1..n
    refinement_rounds: int
    tie_breaks_applied: int


def ring_atoms(graph: BondGraph) -> set[int]:
    """Atoms on at least one simple cycle (endpoints of any non-bridge edge)."""
    g = graph.to_networkx()
    bridges = {frozenset(e) for e in nx.bridges(g)}
    on_ring = set()
    for i, j in g.edges():
        if frozenset((i, j)) not in bridges:
            on_ring.update((i, j))
    return on_ring


def _dense(keys) -> list[int]:
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


def canonical_rank(graph: BondGraph, mol: Molecule) -> CanonicalRank:
    """Refine (charge, degree, H count, ring flag) invariants to a total order.

    ``mol`` must already be in canonical pose; its rounded coordinates settle ties that
    the graph alone cannot.
    """
    n = len(mol)
    types = mol.atom_types
    nbrs = [[(j, int(graph.orders[i, j])) for j in graph.neighbors(i)] for i in range(n)]
    rings = ring_atoms(graph)
    initial = []
    for i in range(n):
        n_h = sum(1 for j, _ in nbrs[i] if types[j] == 1)
        # heavier, more connected atoms come first
        initial.append((-types[i], -len(nbrs[i]), -n_h, -int(i in rings)))
    rounded = [tuple(round(float(v), COORD_ROUND) + 0.0 for v in mol.coords[i]) for i in range(n)]

    rounds = 0

    def refine(classes):
        nonlocal rounds
        while True:
            sig = [
                (classes[i], tuple(sorted((classes[j], k) for j, k in nbrs[i])))
                for i in range(n)
            ]
            new = _dense(sig)
            rounds += 1
            if len(set(new)) == len(set(classes)):
                return new
            classes = new

    classes = refine(_dense(initial))
    tie_breaks = 0
    while len(set(classes)) < n:
        counts = np.bincount(classes)
        tied = min(c for c in range(len(counts)) if counts[c] > 1)
        members = [i for i in range(n) if classes[i] == tied]
        chosen = min(
            members,
            key=lambda i: (
                initial[i],
                tuple(sorted(classes[j] for j, _ in nbrs[i])),
                rounded[i],
                tuple(mol.coords[i]),
            ),
        )
        classes = refine(
            _dense([2 * c + (1 if (c == tied and i != chosen) else 0) for i, c in enumerate(classes)])
        )
        tie_breaks += 1
    return CanonicalRank(tuple(c + 1 for c in classes), rounds, tie_breaks)


@dataclass(frozen=True, eq=False)
class CanonicalSequence:
    atom_types: tuple[int, ...]
    coords: np.ndarray
    frame: InertialFrame
    order: tuple[int, ...]  # order[k] = input index of the k-th token
    rank: CanonicalRank
    class_id: int | None = None

    @property
    def fallback(self) -> bool:
        return self.frame.fallback

    @property
    def degenerate(self) -> bool:
        return self.frame.degenerate

    def __len__(self):
        return len(self.atom_types)

    def tokens(self) -> list[tuple[int, tuple[float, float, float]]]:
        return [(t, tuple(float(v) for v in c)) for t, c in zip(self.atom_types, self.coords)]

    def to_molecule(self) -> Molecule:
        return Molecule(self.atom_types, self.coords, self.class_id)


def tokenize(mol: Molecule) -> CanonicalSequence:
    posed, frame = canonical_pose(mol)
    graph = infer_bonds(posed)
    rank = canonical_rank(graph, posed)
    order = tuple(int(i) for i in np.argsort(rank.rank, kind="stable"))
    coords = posed.coords[list(order)]
    coords.setflags(write=False)
    return CanonicalSequence(
        atom_types=tuple(posed.atom_types[i] for i in order),
        coords=coords,
        frame=frame,
        order=order,
        rank=rank,
        class_id=mol.class_id,
    )


# --------------------------------------------------------------------------
# invariance fuzzing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FuzzReport:
    trials: int
    max_deviation: float
    order_mismatches: int
    skipped: str | None = None  # reason, when the molecule's frame is not unique

    def passed(self, tol: float = 1e-6) -> bool:
        return self.skipped is None and self.order_mismatches == 0 and self.max_deviation <= tol


def fuzz_invariance(mol: Molecule, trials: int, seed: int = 0) -> FuzzReport:
    """Tokenize ``trials`` random rigid motions + permutations of ``mol`` against the original.

    Molecules with tied inertia eigenvalues are skipped: their frame is fixed by a
    convention, not by the geometry, so a token-level comparison is not meaningful.
    """
    from .molio import random_rotation

    if trials < 1:
        raise ValueError("trials must be >= 1")
    ref = tokenize(mol)
    if ref.degenerate:
        groups = [g for g in ref.frame.degenerate_groups if len(g) > 1]
        return FuzzReport(0, 0.0, 0, f"degenerate inertia eigenvalues on axes {groups}")
    rng = np.random.default_rng(seed)
    worst, mismatches = 0.0, 0
    for _ in range(trials):
        moved = mol.transformed(random_rotation(rng), rng.uniform(-10.0, 10.0, size=3))
        seq = tokenize(moved.permuted(rng.permutation(len(mol))))
        if seq.atom_types != ref.atom_types:
            mismatches += 1
            continue
        worst = max(worst, float(np.max(np.abs(seq.coords - ref.coords))))
    return FuzzReport(trials, worst, mismatches)

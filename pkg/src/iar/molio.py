"""Molecule data model, XYZ I/O, the element table and the synthetic dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np


class XYZError(ValueError):
    """Malformed XYZ text."""


class UnknownElementError(XYZError):
    pass


@dataclass(frozen=True, eq=False)
class Molecule:
    """Point cloud of atoms: nuclear charges plus Cartesian coordinates in Angstrom."""

    atom_types: tuple[int, ...]
    coords: np.ndarray
    class_id: int | None = None

    def __post_init__(self):
        types = tuple(int(t) for t in self.atom_types)
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(types) == 0:
            raise ValueError("a molecule needs at least one atom")
        if len(types) != coords.shape[0]:
            raise ValueError(f"{len(types)} atom types but {coords.shape[0]} coordinates")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        table = element_table()
        for t in types:
            if t not in table.by_charge:
                raise UnknownElementError(f"nuclear charge {t} is not in the element table")
        coords.setflags(write=False)
        object.__setattr__(self, "atom_types", types)
        object.__setattr__(self, "coords", coords)

    def __len__(self):
        return len(self.atom_types)

    @property
    def symbols(self) -> list[str]:
        table = element_table()
        return [table.by_charge[t].symbol for t in self.atom_types]

    def with_coords(self, coords) -> "Molecule":
        return Molecule(self.atom_types, coords, self.class_id)

    def with_class(self, class_id: int | None) -> "Molecule":
        return Molecule(self.atom_types, self.coords, class_id)

    def permuted(self, perm: Sequence[int]) -> "Molecule":
        perm = list(perm)
        return Molecule([self.atom_types[i] for i in perm], self.coords[perm], self.class_id)

    def transformed(self, rotation, translation) -> "Molecule":
        """Apply x -> R x + t to every atom."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return self.with_coords(self.coords @ rotation.T + np.asarray(translation, dtype=np.float64))

    def allclose(self, other: "Molecule", atol: float = 1e-6) -> bool:
        return (
            self.atom_types == other.atom_types
            and self.class_id == other.class_id
            and np.allclose(self.coords, other.coords, rtol=0.0, atol=atol)
        )


# --------------------------------------------------------------------------
# element table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Element:
    symbol: str
    charge: int
    covalent_radius: float
    valences: frozenset[int]

    @property
    def max_valence(self) -> int:
        return max(self.valences)


@dataclass(frozen=True)
class ElementTable:
    version: int
    elements: tuple[Element, ...]
    # (Z_low, Z_high) -> distance thresholds for orders 1, 2, 3 (None when the order does not exist)
    thresholds: dict[tuple[int, int], tuple[float | None, float | None, float | None]] = field(repr=False)
    by_charge: dict[int, Element] = field(repr=False)
    by_symbol: dict[str, Element] = field(repr=False)

    def pair_thresholds(self, za: int, zb: int):
        key = (min(za, zb), max(za, zb))
        if key in self.thresholds:
            return self.thresholds[key]
        # pairs outside the table get a single-bond cutoff from covalent radii
        r = self.by_charge[za].covalent_radius + self.by_charge[zb].covalent_radius
        return (r + 0.10, None, None)


def parse_element_table(text: str) -> ElementTable:
    version = None
    elements: list[Element] = []
    margins: dict[int, float] = {}
    refs: dict[tuple[str, str, int], float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        if kind == "version":
            version = int(rest[0])
        elif kind == "element":
            sym, z, radius, vals = rest
            elements.append(Element(sym, int(z), float(radius), frozenset(int(v) for v in vals.split(","))))
        elif kind == "margin":
            margins[int(rest[0])] = float(rest[1])
        elif kind == "bond":
            a, b, order, length = rest
            refs[(a, b, int(order))] = float(length)
        else:
            raise ValueError(f"element table line {lineno}: unknown record {kind!r}")
    if version is None:
        raise ValueError("element table has no version record")
    by_symbol = {e.symbol: e for e in elements}
    by_charge = {e.charge: e for e in elements}

    thresholds: dict[tuple[int, int], list] = {}
    for (a, b, order), length in refs.items():
        za, zb = by_symbol[a].charge, by_symbol[b].charge
        key = (min(za, zb), max(za, zb))
        thresholds.setdefault(key, [None, None, None])[order - 1] = length + margins[order]
    for key, thr in thresholds.items():
        present = [t for t in thr if t is not None]
        if thr[0] is None:
            raise ValueError(f"pair {key} has higher-order bonds but no single bond")
        # higher orders are shorter bonds: cutoffs must shrink strictly with order
        if any(b >= a for a, b in zip(present, present[1:])):
            raise ValueError(f"bond cutoffs for pair {key} are not monotone in bond order: {thr}")
    return ElementTable(
        version=version,
        elements=tuple(elements),
        thresholds={k: tuple(v) for k, v in thresholds.items()},
        by_charge=by_charge,
        by_symbol=by_symbol,
    )


_TABLE: ElementTable | None = None


def element_table() -> ElementTable:
    global _TABLE
    if _TABLE is None:
        text = resources.files("iar").joinpath("data/elements.dat").read_text()
        _TABLE = parse_element_table(text)
    return _TABLE


# --------------------------------------------------------------------------
# XYZ
# --------------------------------------------------------------------------


def parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise XYZError("missing atom count line")
    try:
        n = int(lines[0].split()[0])
    except ValueError:
        raise XYZError(f"atom count {lines[0].strip()!r} is not an integer") from None
    comment = lines[1] if len(lines) > 1 else ""
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != n:
        raise XYZError(f"header announces {n} atoms but {len(body)} atom lines follow")
    table = element_table()
    types, coords = [], []
    for ln in body:
        parts = ln.split()
        if len(parts) < 4:
            raise XYZError(f"atom line {ln!r} needs a symbol and three coordinates")
        sym = parts[0]
        if sym not in table.by_symbol:
            raise UnknownElementError(f"unknown element symbol {sym!r}")
        try:
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise XYZError(f"non-numeric coordinate in {ln!r}") from None
        types.append(table.by_symbol[sym].charge)
        coords.append(xyz)
    return Molecule(types, coords, _parse_comment(comment))


def _parse_comment(comment: str) -> int | None:
    for tok in comment.split():
        if tok.startswith("class_id="):
            return int(tok.split("=", 1)[1])
    return None


def write_xyz(mol: Molecule) -> str:
    comment = "" if mol.class_id is None else f"class_id={mol.class_id}"
    lines = [str(len(mol)), comment]
    for sym, (x, y, z) in zip(mol.symbols, mol.coords):
        lines.append(f"{sym} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(lines)


def read_xyz_file(path) -> Molecule:
    with open(path) as fh:
        return parse_xyz(fh.read())


def write_xyz_file(path, mol: Molecule) -> None:
    with open(path, "w") as fh:
        fh.write(write_xyz(mol) + "\n")


# --------------------------------------------------------------------------
# templates
# --------------------------------------------------------------------------


def zmatrix_to_cartesian(rows) -> np.ndarray:
    """Cartesian coordinates from z-matrix rows.

    Row k is ``(bond_ref, r, angle_ref, theta_deg, dihedral_ref, phi_deg)``, truncated for
    the first three atoms. Atom 0 sits at the origin, atom 1 on +x, atom 2 in the xy plane.
    """
    xyz = np.zeros((len(rows), 3))
    for k, row in enumerate(rows):
        if k == 0:
            continue
        if k == 1:
            xyz[1] = xyz[row[0]] + [row[1], 0.0, 0.0]
            continue
        if k == 2:
            a, r, b, theta = row[:4]
            u = xyz[b] - xyz[a]
            u /= np.linalg.norm(u)
            t = math.radians(theta)
            perp = np.array([-u[1], u[0], 0.0])
            perp /= np.linalg.norm(perp)
            xyz[2] = xyz[a] + r * (math.cos(t) * u + math.sin(t) * perp)
            continue
        c, r, b, theta, a, phi = row
        # natural extension reference frame: a-b-c-d with |cd|=r, angle bcd=theta, dihedral abcd=phi
        bc = xyz[c] - xyz[b]
        bc /= np.linalg.norm(bc)
        n = np.cross(xyz[b] - xyz[a], bc)
        n /= np.linalg.norm(n)
        m = np.cross(n, bc)
        t, p = math.radians(theta), math.radians(phi)
        d2 = np.array([-r * math.cos(t), r * math.sin(t) * math.cos(p), r * math.sin(t) * math.sin(p)])
        xyz[k] = xyz[c] + d2[0] * bc + d2[1] * m + d2[2] * n
    return xyz


_TET = 109.47

# z-matrices: (symbol, row) pairs
_TEMPLATES = {
    "water": [
        ("O", ()),
        ("H", (0, 0.96)),
        ("H", (0, 0.96, 1, 104.5)),
    ],
    "methane": [
        ("C", ()),
        ("H", (0, 1.09)),
        ("H", (0, 1.09, 1, _TET)),
        ("H", (0, 1.09, 1, _TET, 2, 120.0)),
        ("H", (0, 1.09, 1, _TET, 2, -120.0)),
    ],
    "ethanol": [
        ("C", ()),
        ("C", (0, 1.54)),
        ("O", (1, 1.43, 0, _TET)),
        ("H", (2, 0.96, 1, 108.5, 0, 180.0)),
        ("H", (0, 1.09, 1, _TET, 2, 60.0)),
        ("H", (0, 1.09, 1, _TET, 2, 180.0)),
        ("H", (0, 1.09, 1, _TET, 2, -60.0)),
        ("H", (1, 1.09, 0, _TET, 2, 120.0)),
        ("H", (1, 1.09, 0, _TET, 2, -120.0)),
    ],
    "dimethyl_ether": [
        ("C", ()),
        ("O", (0, 1.43)),
        ("C", (1, 1.43, 0, 111.7)),
        ("H", (0, 1.09, 1, _TET, 2, 180.0)),
        ("H", (0, 1.09, 1, _TET, 2, 60.0)),
        ("H", (0, 1.09, 1, _TET, 2, -60.0)),
        ("H", (2, 1.09, 1, _TET, 0, 180.0)),
        ("H", (2, 1.09, 1, _TET, 0, 60.0)),
        ("H", (2, 1.09, 1, _TET, 0, -60.0)),
    ],
    "methylamine": [
        ("C", ()),
        ("N", (0, 1.47)),
        ("H", (0, 1.09, 1, _TET)),
        ("H", (0, 1.09, 1, _TET, 2, 120.0)),
        ("H", (0, 1.09, 1, _TET, 2, -120.0)),
        ("H", (1, 1.01, 0, _TET, 2, 60.0)),
        ("H", (1, 1.01, 0, _TET, 2, -60.0)),
    ],
    "dimethylamine": [
        ("C", ()),
        ("N", (0, 1.47)),
        ("C", (1, 1.47, 0, 112.0)),
        ("H", (1, 1.01, 0, _TET, 2, 120.0)),
        ("H", (0, 1.09, 1, _TET, 2, 180.0)),
        ("H", (0, 1.09, 1, _TET, 2, 60.0)),
        ("H", (0, 1.09, 1, _TET, 2, -60.0)),
        ("H", (2, 1.09, 1, _TET, 0, 180.0)),
        ("H", (2, 1.09, 1, _TET, 0, 60.0)),
        ("H", (2, 1.09, 1, _TET, 0, -60.0)),
    ],
}

DEFAULT_TEMPLATES = ("water", "methane", "ethanol", "co2", "methylamine")
ALL_TEMPLATES = ("water", "methane", "ethanol", "co2", "methylamine", "dimethyl_ether", "dimethylamine")


def template(name: str) -> Molecule:
    """Equilibrium geometry of one of the built-in small molecules."""
    table = element_table()
    if name == "co2":
        return Molecule([6, 8, 8], [[0, 0, 0], [1.205, 0, 0], [-1.205, 0, 0]])
    try:
        spec = _TEMPLATES[name]
    except KeyError:
        raise KeyError(f"unknown template {name!r}; choose from {ALL_TEMPLATES}") from None
    types = [table.by_symbol[sym].charge for sym, _ in spec]
    coords = zmatrix_to_cartesian([row for _, row in spec])
    return Molecule(types, coords - coords.mean(axis=0))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation (det +1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_dataset(
    seed: int,
    count: int,
    templates: Iterable[str] = DEFAULT_TEMPLATES,
    jitter: float = 0.02,
) -> list[Molecule]:
    """Jittered, randomly posed copies of the templates, labelled with functional-group class ids.

    Templates are used round-robin. Each copy gets uniform per-coordinate noise in
    ``[-jitter, jitter]``; a draw whose inferred bond graph differs from the template's is
    redrawn, so every sample keeps the template's chemistry.
    """
    from .bonds import infer_bonds
    from .metrics import class_id_of, detect_functional_groups

    if count < 1:
        raise ValueError("count must be >= 1")
    names = list(templates)
    if not names:
        raise ValueError("at least one template is required")
    rng = np.random.default_rng(seed)
    refs = {name: template(name) for name in dict.fromkeys(names)}
    ref_graphs = {name: infer_bonds(m) for name, m in refs.items()}
    out = []
    for i in range(count):
        name = names[i % len(names)]
        base = refs[name]
        for _ in range(1000):
            noisy = base.with_coords(base.coords + rng.uniform(-jitter, jitter, size=base.coords.shape))
            if np.array_equal(infer_bonds(noisy).orders, ref_graphs[name].orders):
                break
        else:  # pragma: no cover - jitter far too large for the templates
            raise RuntimeError(f"could not jitter {name} without changing its bonds")
        posed = noisy.transformed(random_rotation(rng), rng.uniform(-3.0, 3.0, size=3))
        cid = class_id_of(detect_functional_groups(posed, infer_bonds(posed)))
        out.append(posed.with_class(cid))
    return out

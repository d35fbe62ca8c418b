"""Chemical-feasibility metrics and functional-group class labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

import networkx as nx

from .bonds import BondGraph, infer_bonds
from .molio import ElementTable, Molecule, element_table

FLAG_NAMES = ("hydroxyl", "ether", "secondary_amine", "heteroatom_ring")

C, N, O, H = 6, 7, 8, 1


class UnknownClassError(KeyError):
    pass


@dataclass(frozen=True)
class ClassPattern:
    hydroxyl: bool
    ether: bool
    secondary_amine: bool
    heteroatom_ring: bool

    @property
    def bits(self) -> str:
        return "".join("T" if getattr(self, f) else "F" for f in FLAG_NAMES)

    @classmethod
    def from_bits(cls, bits: str) -> "ClassPattern":
        if len(bits) != len(FLAG_NAMES) or set(bits) - {"T", "F"}:
            raise ValueError(f"bad pattern {bits!r}")
        return cls(*(b == "T" for b in bits))


@lru_cache(maxsize=1)
def class_lookup() -> dict[str, int]:
    doc = json.loads(resources.files("iar").joinpath("data/classes.json").read_text())
    if tuple(doc["flags"]) != FLAG_NAMES:
        raise ValueError("class table flag order does not match this build")
    lookup = {str(k): int(v) for k, v in doc["patterns"].items()}
    if len(set(lookup.values())) != len(lookup):
        raise ValueError("class table is not a bijection")
    return lookup


def class_ids() -> list[int]:
    return sorted(class_lookup().values())


def class_id_of(pattern: ClassPattern) -> int:
    return class_lookup()[pattern.bits]


def pattern_of(class_id: int) -> ClassPattern:
    for bits, cid in class_lookup().items():
        if cid == class_id:
            return ClassPattern.from_bits(bits)
    raise UnknownClassError(class_id)


# --------------------------------------------------------------------------
# stability and validity
# --------------------------------------------------------------------------


def atom_stable_flags(mol: Molecule, graph: BondGraph, table: ElementTable | None = None) -> list[bool]:
    table = table or element_table()
    return [
        graph.valence(i) in table.by_charge[t].valences
        for i, t in enumerate(mol.atom_types)
    ]


def atom_stability(mol: Molecule, graph: BondGraph, table: ElementTable | None = None) -> float:
    flags = atom_stable_flags(mol, graph, table)
    return sum(flags) / len(flags)


def molecule_stability(mols: Sequence[Molecule], graphs: Sequence[BondGraph], table=None) -> float:
    if not mols:
        return 0.0
    return sum(all(atom_stable_flags(m, g, table)) for m, g in zip(mols, graphs)) / len(mols)


def validity(mol: Molecule, graph: BondGraph, table: ElementTable | None = None) -> bool:
    """Every atom has 1 <= valence <= max allowed, and the bond graph is connected."""
    table = table or element_table()
    for i, t in enumerate(mol.atom_types):
        v = graph.valence(i)
        if v < 1 or v > table.by_charge[t].max_valence:
            return False
    return graph.is_connected()


def graph_key(mol: Molecule) -> tuple:
    """Pose- and index-free identity: canonical types plus bonds between canonical ranks."""
    from .canon import tokenize

    seq = tokenize(mol)
    g = infer_bonds(seq.to_molecule())
    return seq.atom_types, tuple(g.edges())


def uniqueness(mols: Sequence[Molecule]) -> float:
    """Distinct graph identities over the number of molecules."""
    if not mols:
        raise ValueError("uniqueness needs at least one molecule")
    return len({graph_key(m) for m in mols}) / len(mols)


# --------------------------------------------------------------------------
# functional groups
# --------------------------------------------------------------------------


def detect_functional_groups(mol: Molecule, graph: BondGraph) -> ClassPattern:
    types = mol.atom_types
    hydroxyl = ether = amine = False
    for i, t in enumerate(types):
        nb = graph.neighbors(i)
        nb_types = sorted(types[j] for j in nb)
        if t == O:
            if nb_types == [H, C]:
                hydroxyl = True
            if nb_types == [C, C] and all(graph.orders[i, j] == 1 for j in nb):
                ether = True
        elif t == N and nb_types == [H, C, C]:
            amine = True
    return ClassPattern(hydroxyl, ether, amine, _has_heteroatom_ring(types, graph))


def _has_heteroatom_ring(types, graph: BondGraph) -> bool:
    g = graph.to_networkx()
    for cycle in nx.simple_cycles(g, length_bound=6):
        if len(cycle) >= 5 and any(types[i] in (N, O) for i in cycle):
            return True
    return False


def molecule_class(mol: Molecule) -> int:
    return class_id_of(detect_functional_groups(mol, infer_bonds(mol)))


def hit_rate(samples: Sequence[Molecule], target_class: int) -> float:
    if target_class not in class_lookup().values():
        raise UnknownClassError(target_class)
    if not samples:
        return 0.0
    return sum(molecule_class(m) == target_class for m in samples) / len(samples)


# --------------------------------------------------------------------------
# aggregate report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    n_samples: int
    n_atoms: int
    n_stable_atoms: int
    n_stable_molecules: int
    n_valid: int
    n_valid_unique: int
    validity: float
    uniqueness: float  # among valid samples
    validity_and_uniqueness: float
    atom_stability: float  # pooled over all atoms of all samples
    molecule_stability: float
    target_class: int | None = None
    n_hits: int | None = None
    hit_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("samples", str(self.n_samples)),
            ("validity", f"{100 * self.validity:.1f}%"),
            ("valid & unique", f"{100 * self.validity_and_uniqueness:.1f}%"),
            ("uniqueness (valid)", f"{100 * self.uniqueness:.1f}%"),
            ("atom stability", f"{100 * self.atom_stability:.1f}%"),
            ("molecule stability", f"{100 * self.molecule_stability:.1f}%"),
        ]
        if self.hit_rate is not None:
            rows.append((f"hit rate (class {self.target_class})", f"{100 * self.hit_rate:.1f}%"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows)


def evaluate(samples: Sequence[Molecule], target_class: int | None = None, table=None) -> EvalReport:
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    if target_class is not None and target_class not in class_lookup().values():
        raise UnknownClassError(target_class)
    graphs = [infer_bonds(m, table) for m in samples]
    stable_atoms = total_atoms = stable_mols = 0
    valid = []
    for m, g in zip(samples, graphs):
        flags = atom_stable_flags(m, g, table)
        stable_atoms += sum(flags)
        total_atoms += len(flags)
        stable_mols += all(flags)
        if validity(m, g, table):
            valid.append(m)
    n_unique = len({graph_key(m) for m in valid})
    n = len(samples)
    hits = None
    if target_class is not None:
        hits = sum(class_id_of(detect_functional_groups(m, g)) == target_class for m, g in zip(samples, graphs))
    return EvalReport(
        n_samples=n,
        n_atoms=total_atoms,
        n_stable_atoms=stable_atoms,
        n_stable_molecules=stable_mols,
        n_valid=len(valid),
        n_valid_unique=n_unique,
        validity=len(valid) / n,
        uniqueness=n_unique / len(valid) if valid else 0.0,
        validity_and_uniqueness=n_unique / n,
        atom_stability=stable_atoms / total_atoms,
        molecule_stability=stable_mols / n,
        target_class=target_class,
        n_hits=hits,
        hit_rate=None if hits is None else hits / n,
    )

"""Elements, atoms, bonds, chemical graphs, residue templates and layouts.

The residue template table is static data: heavy-atom names in a fixed order
(backbone N, CA, C, O, then CB and the side chain outward) and intra-residue
bonds with orders, transcribed from standard component connectivity.
Hydrogens are never represented.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractViolation


class Element(enum.Enum):
    """The eight allowed elements; nothing else is constructible."""

    C = "C"
    N = "N"
    O = "O"
    F = "F"
    S = "S"
    CL = "Cl"
    SE = "Se"
    BR = "Br"

    @classmethod
    def from_symbol(cls, symbol: str) -> "Element":
        for member in cls:
            if member.value == symbol:
                return member
        raise ContractViolation(f"element '{symbol}' outside the allowed set "
                                f"{{C, N, O, F, S, Cl, Se, Br}}")


# Maximum number of bonded neighbors per element.
VALENCE_CAP = {
    Element.C: 4,
    Element.N: 4,
    Element.O: 2,
    Element.S: 4,
    Element.F: 1,
    Element.CL: 1,
    Element.BR: 1,
    Element.SE: 2,
}

RECEPTOR_RESIDUE = -1  # residue_index marker for receptor atoms


class BondOrder(enum.Enum):
    SINGLE = "1"
    DOUBLE = "2"
    AROMATIC = "ar"


@dataclass(frozen=True)
class Atom:
    element: Element
    atom_name: str
    residue_index: int
    is_ligand: bool = True

    def __post_init__(self):
        if not self.atom_name:
            raise ContractViolation("Atom: atom_name must be nonempty")
        if self.is_ligand and self.residue_index < 0:
            raise ContractViolation("Atom: ligand atoms need a valid residue_index")


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: BondOrder = BondOrder.SINGLE

    def __post_init__(self):
        if self.i == self.j:
            raise ContractViolation(f"Bond: self-bond at index {self.i}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.i, self.j) if self.i < self.j else (self.j, self.i)


@dataclass(frozen=True)
class ChemGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    residue_types: tuple[str, ...]

    def __post_init__(self):
        n = len(self.atoms)
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n):
                raise ContractViolation(f"ChemGraph: bond ({b.i},{b.j}) out of range for {n} atoms")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_residues(self) -> int:
        return len(self.residue_types)

    def neighbor_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
        return adj

    def atom_index(self) -> dict[tuple[int, str], int]:
        """(residue_index, atom_name) -> position in `atoms`."""
        return {(a.residue_index, a.atom_name): i for i, a in enumerate(self.atoms)}


# -- residue templates ---------------------------------------------------------

BACKBONE_NAMES = ("N", "CA", "C", "O")


@dataclass(frozen=True)
class ResidueTemplate:
    code: str
    atom_names: tuple[str, ...]
    intra_bonds: tuple[tuple[str, str, BondOrder], ...]
    backbone_names: tuple[str, ...] = BACKBONE_NAMES

    def __post_init__(self):
        names = set(self.atom_names)
        for a, b, _ in self.intra_bonds:
            if a not in names or b not in names:
                raise ContractViolation(f"{self.code}: bond {a}-{b} references unknown atom")

    @property
    def sidechain_names(self) -> tuple[str, ...]:
        """Everything beyond the backbone, CB included."""
        return tuple(n for n in self.atom_names if n not in BACKBONE_NAMES)

    @property
    def sidechain_beyond_cb(self) -> tuple[str, ...]:
        return tuple(n for n in self.atom_names if n not in BACKBONE_NAMES and n != "CB")

    @property
    def internal_rings(self) -> int:
        """Circuit rank of the template graph (PRO and the aromatics have rings)."""
        return len(self.intra_bonds) - len(self.atom_names) + 1


_S = BondOrder.SINGLE
_D = BondOrder.DOUBLE
_A = BondOrder.AROMATIC

_BB_ATOMS = ("N", "CA", "C", "O")
_BB_BONDS = (("N", "CA", _S), ("CA", "C", _S), ("C", "O", _D))


def _template(code: str, sidechain: tuple[str, ...],
              sidechain_bonds: tuple[tuple[str, str, BondOrder], ...]) -> ResidueTemplate:
    atoms = _BB_ATOMS + sidechain
    bonds = _BB_BONDS + ((("CA", "CB", _S),) if "CB" in sidechain else ()) + sidechain_bonds
    return ResidueTemplate(code=code, atom_names=atoms, intra_bonds=bonds)


_TEMPLATE_SPECS: dict[str, tuple[tuple[str, ...], tuple[tuple[str, str, BondOrder], ...]]] = {
    "ALA": (("CB",), ()),
    "ARG": (("CB", "CG", "CD", "NE", "CZ", "NH1", "NH2"),
            (("CB", "CG", _S), ("CG", "CD", _S), ("CD", "NE", _S),
             ("NE", "CZ", _S), ("CZ", "NH1", _D), ("CZ", "NH2", _S))),
    "ASN": (("CB", "CG", "OD1", "ND2"),
            (("CB", "CG", _S), ("CG", "OD1", _D), ("CG", "ND2", _S))),
    "ASP": (("CB", "CG", "OD1", "OD2"),
            (("CB", "CG", _S), ("CG", "OD1", _D), ("CG", "OD2", _S))),
    "CYS": (("CB", "SG"), (("CB", "SG", _S),)),
    "GLN": (("CB", "CG", "CD", "OE1", "NE2"),
            (("CB", "CG", _S), ("CG", "CD", _S), ("CD", "OE1", _D), ("CD", "NE2", _S))),
    "GLU": (("CB", "CG", "CD", "OE1", "OE2"),
            (("CB", "CG", _S), ("CG", "CD", _S), ("CD", "OE1", _D), ("CD", "OE2", _S))),
    "GLY": ((), ()),
    "HIS": (("CB", "CG", "ND1", "CD2", "CE1", "NE2"),
            (("CB", "CG", _S), ("CG", "ND1", _A), ("CG", "CD2", _A),
             ("ND1", "CE1", _A), ("CD2", "NE2", _A), ("CE1", "NE2", _A))),
    "ILE": (("CB", "CG1", "CG2", "CD1"),
            (("CB", "CG1", _S), ("CB", "CG2", _S), ("CG1", "CD1", _S))),
    "LEU": (("CB", "CG", "CD1", "CD2"),
            (("CB", "CG", _S), ("CG", "CD1", _S), ("CG", "CD2", _S))),
    "LYS": (("CB", "CG", "CD", "CE", "NZ"),
            (("CB", "CG", _S), ("CG", "CD", _S), ("CD", "CE", _S), ("CE", "NZ", _S))),
    "MET": (("CB", "CG", "SD", "CE"),
            (("CB", "CG", _S), ("CG", "SD", _S), ("SD", "CE", _S))),
    "PHE": (("CB", "CG", "CD1", "CD2", "CE1", "CE2", "CZ"),
            (("CB", "CG", _S), ("CG", "CD1", _A), ("CG", "CD2", _A),
             ("CD1", "CE1", _A), ("CD2", "CE2", _A), ("CE1", "CZ", _A), ("CE2", "CZ", _A))),
    "PRO": (("CB", "CG", "CD"),
            (("CB", "CG", _S), ("CG", "CD", _S), ("CD", "N", _S))),
    "SER": (("CB", "OG"), (("CB", "OG", _S),)),
    "THR": (("CB", "OG1", "CG2"), (("CB", "OG1", _S), ("CB", "CG2", _S))),
    "TRP": (("CB", "CG", "CD1", "CD2", "NE1", "CE2", "CE3", "CZ2", "CZ3", "CH2"),
            (("CB", "CG", _S), ("CG", "CD1", _A), ("CG", "CD2", _A),
             ("CD1", "NE1", _A), ("NE1", "CE2", _A), ("CD2", "CE2", _A),
             ("CD2", "CE3", _A), ("CE3", "CZ3", _A), ("CZ3", "CH2", _A),
             ("CZ2", "CH2", _A), ("CE2", "CZ2", _A))),
    "TYR": (("CB", "CG", "CD1", "CD2", "CE1", "CE2", "CZ", "OH"),
            (("CB", "CG", _S), ("CG", "CD1", _A), ("CG", "CD2", _A),
             ("CD1", "CE1", _A), ("CD2", "CE2", _A), ("CE1", "CZ", _A),
             ("CE2", "CZ", _A), ("CZ", "OH", _S))),
    "VAL": (("CB", "CG1", "CG2"), (("CB", "CG1", _S), ("CB", "CG2", _S))),
}

RESIDUE_CODES = tuple(sorted(_TEMPLATE_SPECS))
UNKNOWN = "UNK"

# Columns 0..4 are shared across residue types; side chains beyond CB get
# residue-specific columns in alphabetical code order.
ATOM73_SHARED = ("N", "CA", "C", "CB", "O")

# The full backbone/side-chain atom-name vocabulary, OXT last.
ATOM37_NAMES = (
    "N", "CA", "C", "CB", "O", "CG", "CG1", "CG2", "OG", "OG1", "SG", "CD",
    "CD1", "CD2", "ND1", "ND2", "OD1", "OD2", "SD", "CE", "CE1", "CE2", "CE3",
    "NE", "NE1", "NE2", "OE1", "OE2", "CH2", "NH1", "NH2", "OH", "CZ", "CZ2",
    "CZ3", "NZ", "OXT",
)


def element_of_atom_name(name: str) -> Element:
    """Element from a template/terminus atom name (first letter rules here)."""
    return Element.from_symbol(name[0])


@lru_cache(maxsize=1)
def load_templates() -> dict[str, ResidueTemplate]:
    registry = {code: _template(code, *spec) for code, spec in _TEMPLATE_SPECS.items()}
    assert len(registry) == 20
    return registry


@dataclass(frozen=True)
class Atom73Layout:
    """Fixed-width per-residue coordinate layout: 5 shared + 68 side-chain columns."""

    shared_columns: dict[str, int]
    sidechain_columns: dict[tuple[str, str], int]
    width: int

    def column(self, code: str, atom_name: str) -> int:
        col = self.shared_columns.get(atom_name)
        if col is not None:
            return col
        col = self.sidechain_columns.get((code, atom_name))
        if col is None:
            raise ContractViolation(f"atom73: no column for {code}.{atom_name}")
        return col

    def atoms_for(self, code: str) -> tuple[tuple[str, int], ...]:
        """Template-ordered (atom_name, column) pairs for one residue type."""
        template = load_templates().get(code)
        if template is None:
            raise ContractViolation(f"atom73: unknown residue code '{code}'")
        return tuple((name, self.column(code, name)) for name in template.atom_names)

    def code_columns(self, code: str) -> tuple[int, ...]:
        return tuple(col for _, col in self.atoms_for(code))


def build_layout(registry: dict[str, ResidueTemplate] | None = None) -> Atom73Layout:
    registry = registry or load_templates()
    shared = {name: i for i, name in enumerate(ATOM73_SHARED)}
    sidechain: dict[tuple[str, str], int] = {}
    col = len(ATOM73_SHARED)
    for code in sorted(registry):
        for name in registry[code].sidechain_beyond_cb:
            sidechain[(code, name)] = col
            col += 1
    return Atom73Layout(shared_columns=shared, sidechain_columns=sidechain, width=col)


# -- graph analysis ------------------------------------------------------------

def _unique_edges(graph: ChemGraph) -> set[tuple[int, int]]:
    return {b.key for b in graph.bonds}


def graph_laplacian(graph: ChemGraph) -> np.ndarray:
    """L = D - A over the ligand atoms, all bond orders as unweighted edges."""
    ligand = [i for i, a in enumerate(graph.atoms) if a.is_ligand]
    if not ligand:
        raise ContractViolation("graph_laplacian: graph has no ligand atoms")
    pos = {atom_i: row for row, atom_i in enumerate(ligand)}
    n = len(ligand)
    lap = np.zeros((n, n), dtype=np.float64)
    for i, j in _unique_edges(graph):
        if i in pos and j in pos:
            a, b = pos[i], pos[j]
            lap[a, b] -= 1.0
            lap[b, a] -= 1.0
            lap[a, a] += 1.0
            lap[b, b] += 1.0
    return lap


def connected_components(graph: ChemGraph) -> int:
    n = graph.n_atoms
    if n == 0:
        return 0
    adj = graph.neighbor_lists()
    seen = [False] * n
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            cur = stack.pop()
            for nxt in adj[cur]:
                if not seen[nxt]:
                    seen[nxt] = True
                    stack.append(nxt)
    return count


@dataclass(frozen=True)
class GraphReport:
    valence_violations: tuple[tuple[int, int, int], ...]  # (atom, degree, cap)
    duplicate_bonds: tuple[tuple[int, int], ...]
    n_components: int

    @property
    def ok(self) -> bool:
        return (not self.valence_violations and not self.duplicate_bonds
                and self.n_components <= 1)

    def issues(self) -> list[str]:
        out = [f"atom {i} has degree {d} > cap {cap}" for i, d, cap in self.valence_violations]
        out += [f"duplicate bond {i}-{j}" for i, j in self.duplicate_bonds]
        if self.n_components > 1:
            out.append(f"{self.n_components} disconnected components")
        return out


def validate_graph(graph: ChemGraph) -> GraphReport:
    seen: set[tuple[int, int]] = set()
    duplicates: list[tuple[int, int]] = []
    degree = [0] * graph.n_atoms
    for b in graph.bonds:
        if b.key in seen:
            duplicates.append(b.key)
        else:
            seen.add(b.key)
            degree[b.i] += 1
            degree[b.j] += 1
    violations = []
    for i, atom in enumerate(graph.atoms):
        cap = VALENCE_CAP[atom.element]
        if degree[i] > cap:
            violations.append((i, degree[i], cap))
    return GraphReport(valence_violations=tuple(violations),
                       duplicate_bonds=tuple(duplicates),
                       n_components=connected_components(graph))

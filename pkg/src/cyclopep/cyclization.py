"""Cyclization topologies and the dynamic-graph assemble/subgraph operations.

A CyclizationSpec pins the topology: which residues host the closure (anchor
residues with fixed codes), the closing bond, whether the chain keeps a free
C-terminal OXT, and which atoms have spec-fixed chemistry. `assemble` turns a
sequence plus spec into a chemical graph; `subgraph` strips free-residue side
chains for the sequence classifier.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .chem import (BACKBONE_NAMES, Atom, Bond, BondOrder, ChemGraph, ResidueTemplate,
                   UNKNOWN, connected_components, element_of_atom_name, load_templates,
                   validate_graph)
from .errors import ContractViolation, SpecError


class CyclizationType(enum.Enum):
    HEAD_TO_TAIL = "h2t"
    HEAD_TO_SIDE = "h2s"
    SIDE_TO_TAIL = "s2t"
    SIDE_TO_SIDE = "s2s"
    LINEAR = "linear"

    @classmethod
    def from_name(cls, name: str) -> "CyclizationType":
        for member in cls:
            if member.value == name:
                return member
        raise ContractViolation(
            f"unknown cyclization type '{name}' (use h2t|h2s|s2t|s2s|linear)")


class AtomRef(NamedTuple):
    residue: int
    name: str


class ClosingBond(NamedTuple):
    a: AtomRef
    b: AtomRef
    order: BondOrder


# Sequence-length sampling ranges (inclusive) per topology.
LENGTH_RANGE = {
    CyclizationType.HEAD_TO_TAIL: (5, 20),
    CyclizationType.HEAD_TO_SIDE: (5, 20),
    CyclizationType.SIDE_TO_TAIL: (5, 20),
    CyclizationType.SIDE_TO_SIDE: (8, 23),
    CyclizationType.LINEAR: (5, 20),
}

# Disulfide anchors must close a loop spanning at least this many residues
# (both anchors inclusive).
MIN_SS_LOOP_SPAN = 6

OXT = "OXT"


@dataclass(frozen=True)
class CyclizationSpec:
    ctype: CyclizationType
    n_residues: int
    anchors: tuple[tuple[int, str], ...]  # (residue index, fixed code)
    closing_bond: ClosingBond | None
    has_oxt: bool
    constrained_atoms: frozenset[AtomRef]

    @property
    def anchor_positions(self) -> tuple[int, ...]:
        return tuple(pos for pos, _ in self.anchors)

    def anchor_code(self, residue: int) -> str | None:
        for pos, code in self.anchors:
            if pos == residue:
                return code
        return None

    def is_anchor(self, residue: int) -> bool:
        return residue in self.anchor_positions

    def cyc_state_atoms(self) -> tuple[AtomRef, ...]:
        """Spec-fixed atoms held outside atom73: anchor side chains, then OXT."""
        registry = load_templates()
        refs: list[AtomRef] = []
        for pos, code in sorted(self.anchors):
            for name in registry[code].sidechain_names:
                refs.append(AtomRef(pos, name))
        if self.has_oxt:
            refs.append(AtomRef(self.n_residues - 1, OXT))
        return tuple(refs)


def cyc_state_atoms_of(spec: "CyclizationSpec") -> tuple[AtomRef, ...]:
    return spec.cyc_state_atoms()


def _constrained(n_residues: int, anchors: Sequence[tuple[int, str]],
                 has_oxt: bool) -> frozenset[AtomRef]:
    registry = load_templates()
    atoms = {AtomRef(r, name) for r in range(n_residues) for name in BACKBONE_NAMES}
    for pos, code in anchors:
        atoms.update(AtomRef(pos, name) for name in registry[code].atom_names)
    if has_oxt:
        atoms.add(AtomRef(n_residues - 1, OXT))
    return frozenset(atoms)


def make_spec(ctype: CyclizationType, n_residues: int,
              anchor_overrides: Sequence[int] | None = None,
              length_range: tuple[int, int] | None = None) -> CyclizationSpec:
    """Build the topology spec with default (or overridden) anchor placement."""
    lo, hi = length_range if length_range is not None else LENGTH_RANGE[ctype]
    if not (lo <= n_residues <= hi):
        raise SpecError(f"{ctype.value}: n_residues {n_residues} outside [{lo}, {hi}]")

    def _check_positions(positions, expected):
        if len(positions) != expected:
            raise SpecError(f"{ctype.value}: needs {expected} anchor positions, "
                            f"got {len(positions)}")
        for p in positions:
            if not (0 <= p < n_residues):
                raise SpecError(f"{ctype.value}: anchor {p} outside [0, {n_residues})")

    last = n_residues - 1
    if ctype is CyclizationType.LINEAR:
        if anchor_overrides:
            raise SpecError("linear: no anchors to override")
        anchors: tuple[tuple[int, str], ...] = ()
        closing = None
        has_oxt = True
    elif ctype is CyclizationType.HEAD_TO_TAIL:
        if anchor_overrides:
            raise SpecError("h2t: no anchors to override")
        anchors = ()
        closing = ClosingBond(AtomRef(last, "C"), AtomRef(0, "N"), BondOrder.SINGLE)
        has_oxt = False
    elif ctype is CyclizationType.HEAD_TO_SIDE:
        pos = (last,) if anchor_overrides is None else tuple(anchor_overrides)
        _check_positions(pos, 1)
        anchors = ((pos[0], "GLU"),)
        closing = ClosingBond(AtomRef(0, "N"), AtomRef(pos[0], "CD"), BondOrder.SINGLE)
        has_oxt = True
    elif ctype is CyclizationType.SIDE_TO_TAIL:
        pos = (0,) if anchor_overrides is None else tuple(anchor_overrides)
        _check_positions(pos, 1)
        anchors = ((pos[0], "CYS"),)
        closing = ClosingBond(AtomRef(pos[0], "SG"), AtomRef(last, "C"), BondOrder.SINGLE)
        has_oxt = False
    elif ctype is CyclizationType.SIDE_TO_SIDE:
        pos = (1, n_residues - 2) if anchor_overrides is None else tuple(anchor_overrides)
        _check_positions(pos, 2)
        i, j = sorted(pos)
        if j - i + 1 < MIN_SS_LOOP_SPAN:
            raise SpecError(f"s2s: anchors {i},{j} close a loop of {j - i + 1} residues, "
                            f"need >= {MIN_SS_LOOP_SPAN}")
        anchors = ((i, "CYS"), (j, "CYS"))
        closing = ClosingBond(AtomRef(i, "SG"), AtomRef(j, "SG"), BondOrder.SINGLE)
        has_oxt = True
    else:  # pragma: no cover
        raise SpecError(f"unhandled ctype {ctype}")

    return CyclizationSpec(
        ctype=ctype, n_residues=n_residues, anchors=anchors,
        closing_bond=closing, has_oxt=has_oxt,
        constrained_atoms=_constrained(n_residues, anchors, has_oxt))


def apply_anchor_codes(sequence: Sequence[str], spec: CyclizationSpec) -> tuple[str, ...]:
    """Force the spec's fixed codes onto anchor positions."""
    seq = list(sequence)
    for pos, code in spec.anchors:
        seq[pos] = code
    return tuple(seq)


def assemble(sequence: Sequence[str], spec: CyclizationSpec) -> ChemGraph:
    """Union of residue templates + peptide bonds + the spec's closing bond."""
    if len(sequence) != spec.n_residues:
        raise ContractViolation(
            f"assemble: sequence length {len(sequence)} != spec n_residues {spec.n_residues}")
    registry = load_templates()
    seq = apply_anchor_codes(sequence, spec)
    for code in seq:
        if code not in registry:
            raise ContractViolation(f"assemble: unknown residue code '{code}'")

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    index: dict[AtomRef, int] = {}
    for res, code in enumerate(seq):
        template: ResidueTemplate = registry[code]
        for name in template.atom_names:
            index[AtomRef(res, name)] = len(atoms)
            atoms.append(Atom(element_of_atom_name(name), name, res))
        for a, b, order in template.intra_bonds:
            bonds.append(Bond(index[AtomRef(res, a)], index[AtomRef(res, b)], order))
        if res > 0:
            bonds.append(Bond(index[AtomRef(res - 1, "C")], index[AtomRef(res, "N")],
                              BondOrder.SINGLE))
    if spec.has_oxt:
        last = spec.n_residues - 1
        index[AtomRef(last, OXT)] = len(atoms)
        atoms.append(Atom(element_of_atom_name(OXT), OXT, last))
        bonds.append(Bond(index[AtomRef(last, "C")], index[AtomRef(last, OXT)],
                          BondOrder.SINGLE))
    if spec.closing_bond is not None:
        cb = spec.closing_bond
        bonds.append(Bond(index[cb.a], index[cb.b], cb.order))

    graph = ChemGraph(atoms=tuple(atoms), bonds=tuple(bonds), residue_types=seq)
    report = validate_graph(graph)
    if not report.ok:
        raise ContractViolation(f"assemble: produced invalid graph: {report.issues()}")
    return graph


def subgraph(graph: ChemGraph, spec: CyclizationSpec) -> tuple[ChemGraph, tuple[int, ...]]:
    """Strip free-residue side chains (CB included); keep backbone, OXT, anchors.

    Free residues' type labels are blanked to UNKNOWN so the stripped graph
    carries no sequence information. Returns the stripped graph plus the map
    from its atom indices to the input graph's.
    """
    keep: list[int] = []
    for i, atom in enumerate(graph.atoms):
        if atom.atom_name in BACKBONE_NAMES or atom.atom_name == OXT \
                or spec.is_anchor(atom.residue_index):
            keep.append(i)
    remap = {old: new for new, old in enumerate(keep)}
    atoms = tuple(graph.atoms[i] for i in keep)
    bonds = tuple(Bond(remap[b.i], remap[b.j], b.order) for b in graph.bonds
                  if b.i in remap and b.j in remap)
    types = tuple(code if spec.is_anchor(res) else UNKNOWN
                  for res, code in enumerate(graph.residue_types))
    return ChemGraph(atoms=atoms, bonds=bonds, residue_types=types), tuple(keep)


def infer_cyclization(graph: ChemGraph) -> CyclizationType:
    """Recover the topology from an assembled graph's closing-bond pattern."""
    last = graph.n_residues - 1
    by_ref = {(a.residue_index, a.atom_name) for a in graph.atoms}
    pairs = set()
    for b in graph.bonds:
        ai, aj = graph.atoms[b.i], graph.atoms[b.j]
        pairs.add(frozenset(((ai.residue_index, ai.atom_name), (aj.residue_index, aj.atom_name))))

    def bonded(ra, na, rb, nb):
        return frozenset(((ra, na), (rb, nb))) in pairs

    sg_residues = sorted(r for (r, n) in by_ref if n == "SG")
    for a, ri in enumerate(sg_residues):
        for rj in sg_residues[a + 1:]:
            if bonded(ri, "SG", rj, "SG"):
                return CyclizationType.SIDE_TO_SIDE
    for r in sg_residues:
        if r != last and bonded(r, "SG", last, "C"):
            return CyclizationType.SIDE_TO_TAIL
    for r, n in by_ref:
        # r == 0 would be PRO's own CD-N ring bond, not a closure
        if n == "CD" and r != 0 and bonded(0, "N", r, "CD"):
            return CyclizationType.HEAD_TO_SIDE
    if last > 0 and bonded(last, "C", 0, "N"):
        return CyclizationType.HEAD_TO_TAIL
    return CyclizationType.LINEAR


def spec_for_graph(graph: ChemGraph) -> CyclizationSpec:
    """Best-effort spec reconstruction for ingested complexes."""
    ctype = infer_cyclization(graph)
    n = graph.n_residues
    overrides = None
    if ctype is CyclizationType.SIDE_TO_SIDE:
        overrides = tuple(sorted({a.residue_index for a in graph.atoms if a.atom_name == "SG"}))
    elif ctype is CyclizationType.SIDE_TO_TAIL:
        refs = {(a.residue_index, a.atom_name) for a in graph.atoms}
        overrides = tuple(r for r, name in refs if name == "SG")[:1]
    elif ctype is CyclizationType.HEAD_TO_SIDE:
        idx = graph.atom_index()
        n_0 = idx.get((0, "N"))
        for b in graph.bonds:
            ai, aj = graph.atoms[b.i], graph.atoms[b.j]
            for head, side in ((b.i, aj), (b.j, ai)):
                if head == n_0 and side.atom_name == "CD" and side.residue_index != 0:
                    overrides = (side.residue_index,)
    return make_spec(ctype, n, anchor_overrides=overrides,
                     length_range=(1, max(23, n)))


def macrocycle_count(graph: ChemGraph) -> int:
    """Circuit rank minus the template-internal rings of the residues present."""
    registry = load_templates()
    edges = {b.key for b in graph.bonds}
    internal = sum(registry[code].internal_rings
                   for code in graph.residue_types if code in registry)
    return len(edges) - graph.n_atoms + connected_components(graph) - internal

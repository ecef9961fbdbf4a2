"""Geometric evaluation: alignment RMSD, bond/clash validity, diversity.

The diversity score is a normalized-RMSD proxy, d/(d + 5 A), averaged over
pairs of equal-length backbones. The 5 A softening constant maps the typical
peptide RMSD spread onto the middle of [0, 1]; this is deliberately not a
TM-score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chem import ChemGraph, Element
from .cyclization import CyclizationType, infer_cyclization, spec_for_graph
from .errors import ContractViolation

REF_BOND_LENGTH = 1.5
REF_SS_BOND_LENGTH = 2.05
BOND_TOL = 0.25
CLASH_DISTANCE = 1.7
SS_CLOSURE_WINDOW = (2.0, 2.5)
DIVERSITY_SOFTENING = 5.0


def reference_bond_length(a: Element, b: Element) -> float:
    if a is Element.S and b is Element.S:
        return REF_SS_BOND_LENGTH
    return REF_BOND_LENGTH


def kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """RMSD after optimal rigid superposition (rotation det = +1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ContractViolation(f"kabsch_rmsd: shapes {a.shape} vs {b.shape}")
    if a.shape[0] < 3:
        raise ContractViolation("kabsch_rmsd: need at least 3 atoms")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(ac.T @ bc)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    diff = ac @ rot - bc
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


@dataclass(frozen=True)
class BondCheck:
    i: int
    j: int
    length: float
    reference: float

    @property
    def deviation(self) -> float:
        return abs(self.length - self.reference)


@dataclass(frozen=True)
class ValidityReport:
    bonds: tuple[BondCheck, ...]
    clashes: tuple[tuple[int, int, float], ...]
    ctype: CyclizationType
    closure_length: float | None     # None for linear peptides
    closure_ok: bool | None

    def fraction_bonds_within(self, tol: float = BOND_TOL) -> float:
        if not self.bonds:
            raise ContractViolation("ValidityReport: graph has no bonds")
        hits = sum(1 for b in self.bonds if b.deviation <= tol)
        return hits / len(self.bonds)

    @property
    def ok(self) -> bool:
        closure_fine = self.closure_ok is None or self.closure_ok
        return (self.fraction_bonds_within() == 1.0 and not self.clashes
                and closure_fine)

    def to_lines(self) -> list[str]:
        worst = max((b.deviation for b in self.bonds), default=0.0)
        lines = [f"validity bonds={len(self.bonds)} "
                 f"frac_within_{BOND_TOL}={self.fraction_bonds_within():.3f} "
                 f"worst_dev={worst:.3f}",
                 f"validity clashes={len(self.clashes)}"]
        if self.closure_length is None:
            lines.append(f"validity closure=none ctype={self.ctype.value}")
        else:
            ok = "yes" if self.closure_ok else "no"
            lines.append(f"validity closure={self.closure_length:.3f} "
                         f"ctype={self.ctype.value} ok={ok}")
        return lines


def validity_report(coords: np.ndarray, graph: ChemGraph) -> ValidityReport:
    """Bond-length deviations, steric clashes, and ring-closure geometry."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (graph.n_atoms, 3):
        raise ContractViolation(f"validity_report: coords {coords.shape} vs "
                                f"{graph.n_atoms} atoms")
    bonds = []
    bonded = set()
    for bond in graph.bonds:
        ea = graph.atoms[bond.i].element
        eb = graph.atoms[bond.j].element
        length = float(np.linalg.norm(coords[bond.i] - coords[bond.j]))
        bonds.append(BondCheck(*bond.key, length=length,
                               reference=reference_bond_length(ea, eb)))
        bonded.add(bond.key)
    dists = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    clashes = []
    for i in range(graph.n_atoms):
        for j in range(i + 1, graph.n_atoms):
            if (i, j) not in bonded and dists[i, j] < CLASH_DISTANCE:
                clashes.append((i, j, float(dists[i, j])))
    ctype = infer_cyclization(graph)
    closure_length = closure_ok = None
    if ctype is not CyclizationType.LINEAR:
        spec = spec_for_graph(graph)
        index = graph.atom_index()
        ref_a, ref_b = spec.closing_bond.a, spec.closing_bond.b
        i = index[(ref_a.residue, ref_a.name)]
        j = index[(ref_b.residue, ref_b.name)]
        closure_length = float(dists[i, j])
        if graph.atoms[i].element is Element.S and graph.atoms[j].element is Element.S:
            lo, hi = SS_CLOSURE_WINDOW
            closure_ok = lo <= closure_length <= hi
        else:
            ref = reference_bond_length(graph.atoms[i].element,
                                        graph.atoms[j].element)
            closure_ok = abs(closure_length - ref) <= BOND_TOL
    return ValidityReport(bonds=tuple(bonds), clashes=tuple(clashes),
                          ctype=ctype, closure_length=closure_length,
                          closure_ok=closure_ok)


def diversity(backbones: list[np.ndarray]) -> float:
    """Mean pairwise d/(d+5) over equal-length groups; higher = more diverse."""
    if len(backbones) < 2:
        raise ContractViolation("diversity: need at least 2 structures")
    arrays = [np.asarray(s, dtype=np.float64) for s in backbones]
    groups: dict[int, list[np.ndarray]] = {}
    for arr in arrays:
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ContractViolation("diversity: structures must be (n, 3)")
        groups.setdefault(arr.shape[0], []).append(arr)
    scores = []
    for members in groups.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                d = kabsch_rmsd(members[i], members[j])
                scores.append(d / (d + DIVERSITY_SOFTENING))
    if not scores:
        raise ContractViolation("diversity: no equal-length pairs to compare")
    return float(np.mean(scores))

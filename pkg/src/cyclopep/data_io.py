"""Complex ingestion, PDB output, and synthetic desk-scale datasets.

The native on-disk format is a line-delimited text record, one complex per
file: a `complex <id>` header, receptor atom lines, ligand atom lines, and
bond lines. Ligand residue types are not stored; they are reconstructed by
matching each residue's atom-name set (minus any terminal OXT) against the
residue templates, so only fully-typed ligands round-trip. PDB is write-first
output; `read_pdb` exists to round-trip our own files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chem import (RESIDUE_CODES, UNKNOWN, Atom, Bond, BondOrder, ChemGraph,
                   Element, element_of_atom_name, load_templates,
                   validate_graph)
from .cyclization import (LENGTH_RANGE, CyclizationSpec, CyclizationType,
                          apply_anchor_codes, assemble, make_spec)
from .errors import ContractViolation, ParseError
from .metrics import reference_bond_length

JITTER_SIGMA = 0.05
JITTER_MAX = 0.1
MIN_NONBONDED = 1.95      # pre-jitter floor for non-bonded ligand pairs
RECEPTOR_CLEARANCE = 3.5  # pre-jitter shell-to-ligand gap

# Residues whose templates contain rings complicate exact-length placement;
# the synthetic generator sticks to the other fifteen codes.
RING_CODES = frozenset({"HIS", "PHE", "PRO", "TRP", "TYR"})
SYNTH_CODES = tuple(c for c in RESIDUE_CODES if c not in RING_CODES)


@dataclass(frozen=True)
class Receptor:
    coords: np.ndarray
    elements: tuple[Element, ...]
    backbone: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        backbone = np.asarray(self.backbone, dtype=bool)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] == 0:
            raise ContractViolation("Receptor: coords must be nonempty (n, 3)")
        if not np.all(np.isfinite(coords)):
            raise ContractViolation("Receptor: coords must be finite")
        if len(self.elements) != coords.shape[0] or backbone.shape != (coords.shape[0],):
            raise ContractViolation("Receptor: annotation lengths disagree")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "backbone", backbone)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class ComplexRecord:
    record_id: str
    receptor: Receptor
    ligand_graph: ChemGraph
    ligand_coords: np.ndarray
    spec: CyclizationSpec | None = None

    def __post_init__(self):
        if not self.record_id or any(c.isspace() for c in self.record_id):
            raise ContractViolation("ComplexRecord: id must be nonempty, no whitespace")
        coords = np.asarray(self.ligand_coords, dtype=np.float64)
        if coords.shape != (self.ligand_graph.n_atoms, 3):
            raise ContractViolation(
                f"ComplexRecord: ligand coords {coords.shape} vs "
                f"{self.ligand_graph.n_atoms} atoms")
        if not np.all(np.isfinite(coords)):
            raise ContractViolation("ComplexRecord: ligand coords must be finite")
        report = validate_graph(self.ligand_graph)
        if not report.ok:
            raise ContractViolation("ComplexRecord: invalid ligand graph: "
                                    + "; ".join(report.issues()))
        object.__setattr__(self, "ligand_coords", coords)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_complex(record: ComplexRecord, path) -> None:
    rec = record.receptor
    lines = [f"complex {record.record_id}"]
    for i in range(rec.n_atoms):
        x, y, z = rec.coords[i]
        flag = "bb" if rec.backbone[i] else "sc"
        lines.append(f"R {rec.elements[i].value} {_fmt(x)} {_fmt(y)} {_fmt(z)} {flag}")
    for i, atom in enumerate(record.ligand_graph.atoms):
        x, y, z = record.ligand_coords[i]
        lines.append(f"L {atom.element.value} {atom.residue_index} "
                     f"{atom.atom_name} {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    for bond in sorted(record.ligand_graph.bonds, key=lambda b: b.key):
        lines.append(f"B {bond.i} {bond.j} {bond.order.value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_float(token: str, ln: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"line {ln}: bad coordinate '{token}'") from None
    if not np.isfinite(value):
        raise ParseError(f"line {ln}: non-finite coordinate '{token}'")
    return value


def _parse_element(token: str, ln: int) -> Element:
    try:
        return Element.from_symbol(token)
    except ContractViolation as exc:
        raise ParseError(f"line {ln}: {exc}") from None


def _residue_types_from_names(per_residue: dict[int, list[str]]) -> tuple[str, ...]:
    """Recover residue codes by matching atom-name sets against templates."""
    by_set = {frozenset(t.atom_names): code
              for code, t in load_templates().items()}
    n_res = max(per_residue) + 1
    if set(per_residue) != set(range(n_res)):
        missing = sorted(set(range(n_res)) - set(per_residue))
        raise ParseError(f"residue indices not contiguous; missing {missing}")
    types = []
    for r in range(n_res):
        names = per_residue[r]
        if len(names) != len(set(names)):
            raise ParseError(f"residue {r}: duplicate atom name")
        key = frozenset(names) - {"OXT"}
        code = by_set.get(key)
        if code is None:
            raise ParseError(f"residue {r}: atom set {sorted(key)} matches "
                             f"no residue template")
        types.append(code)
    return tuple(types)


def parse_complex(path) -> ComplexRecord:
    with open(path) as fh:
        raw = fh.read().splitlines()
    record_id = None
    rec_coords, rec_elements, rec_backbone = [], [], []
    lig_atoms: list[Atom] = []
    lig_coords: list[list[float]] = []
    per_residue: dict[int, list[str]] = {}
    bonds: list[tuple[int, Bond]] = []
    for ln, line in enumerate(raw, start=1):
        tokens = line.split()
        if not tokens:
            continue
        tag = tokens[0]
        if record_id is None:
            if tag != "complex" or len(tokens) != 2:
                raise ParseError(f"line {ln}: expected 'complex <id>' header")
            record_id = tokens[1]
        elif tag == "R":
            if len(tokens) != 6 or tokens[5] not in ("bb", "sc"):
                raise ParseError(f"line {ln}: expected 'R <element> <x> <y> <z> <bb|sc>'")
            rec_elements.append(_parse_element(tokens[1], ln))
            rec_coords.append([_parse_float(t, ln) for t in tokens[2:5]])
            rec_backbone.append(tokens[5] == "bb")
        elif tag == "L":
            if len(tokens) != 7:
                raise ParseError(f"line {ln}: expected "
                                 f"'L <element> <res_idx> <atom_name> <x> <y> <z>'")
            element = _parse_element(tokens[1], ln)
            try:
                res_idx = int(tokens[2])
            except ValueError:
                raise ParseError(f"line {ln}: bad residue index '{tokens[2]}'") from None
            if res_idx < 0:
                raise ParseError(f"line {ln}: residue index must be >= 0")
            name = tokens[3]
            if element_of_atom_name(name) is not element:
                raise ParseError(f"line {ln}: element {element.value} does not "
                                 f"match atom name {name}")
            lig_atoms.append(Atom(element, name, res_idx))
            lig_coords.append([_parse_float(t, ln) for t in tokens[4:7]])
            per_residue.setdefault(res_idx, []).append(name)
        elif tag == "B":
            if len(tokens) != 4:
                raise ParseError(f"line {ln}: expected 'B <i> <j> <order>'")
            try:
                i, j = int(tokens[1]), int(tokens[2])
            except ValueError:
                raise ParseError(f"line {ln}: bad bond indices "
                                 f"'{tokens[1]} {tokens[2]}'") from None
            if i == j:
                raise ParseError(f"line {ln}: self-bond {i}-{j}")
            try:
                order = BondOrder(tokens[3])
            except ValueError:
                raise ParseError(f"line {ln}: bond order must be 1, 2, or ar; "
                                 f"got '{tokens[3]}'") from None
            bonds.append((ln, Bond(i, j, order)))
        else:
            raise ParseError(f"line {ln}: unknown record tag '{tag}'")
    if record_id is None:
        raise ParseError("line 1: empty file; expected 'complex <id>' header")
    if not lig_atoms:
        raise ParseError("record has an empty ligand")
    if not rec_coords:
        raise ParseError("record has an empty receptor")
    n_lig = len(lig_atoms)
    for ln, bond in bonds:
        if not (0 <= bond.i < n_lig and 0 <= bond.j < n_lig):
            raise ParseError(f"line {ln}: bond ({bond.i},{bond.j}) out of "
                             f"range for {n_lig} ligand atoms")
    types = _residue_types_from_names(per_residue)
    graph = ChemGraph(atoms=tuple(lig_atoms),
                      bonds=tuple(b for _, b in bonds), residue_types=types)
    report = validate_graph(graph)
    if not report.ok:
        raise ParseError("ligand graph invalid: " + "; ".join(report.issues()))
    receptor = Receptor(coords=np.array(rec_coords),
                        elements=tuple(rec_elements),
                        backbone=np.array(rec_backbone, dtype=bool))
    return ComplexRecord(record_id=record_id, receptor=receptor,
                         ligand_graph=graph, ligand_coords=np.array(lig_coords))


# -- PDB output ---------------------------------------------------------------

def _is_backbone_bond(graph: ChemGraph, bond: Bond) -> bool:
    """Peptide-chain bonds that any PDB reader infers from names alone."""
    a, b = graph.atoms[bond.i], graph.atoms[bond.j]
    if a.residue_index == b.residue_index:
        pair = {a.atom_name, b.atom_name}
        return pair in ({"N", "CA"}, {"CA", "C"}, {"C", "O"}, {"C", "OXT"})
    lo, hi = sorted((a, b), key=lambda at: at.residue_index)
    return (hi.residue_index == lo.residue_index + 1
            and lo.atom_name == "C" and hi.atom_name == "N")


def write_pdb(coords: np.ndarray, graph: ChemGraph, path) -> None:
    """Fixed-width ATOM records plus CONECT for every non-backbone bond."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (graph.n_atoms, 3):
        raise ContractViolation(f"write_pdb: coords {coords.shape} vs "
                                f"{graph.n_atoms} atoms")
    lines = []
    for i, atom in enumerate(graph.atoms):
        name = atom.atom_name
        name_field = name.ljust(4) if len(name) == 4 else f" {name:<3s}"
        res_name = graph.residue_types[atom.residue_index]
        x, y, z = coords[i]
        lines.append(f"ATOM  {i + 1:5d} {name_field} {res_name:<3s} A"
                     f"{atom.residue_index + 1:4d}    "
                     f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}"
                     f"          {atom.element.value:>2s}")
    partners: dict[int, list[int]] = {}
    for bond in sorted(graph.bonds, key=lambda b: b.key):
        if _is_backbone_bond(graph, bond):
            continue
        i, j = bond.key
        partners.setdefault(i, []).append(j)
        partners.setdefault(j, []).append(i)
    for i in sorted(partners):
        others = sorted(partners[i])
        for k in range(0, len(others), 4):
            chunk = "".join(f"{j + 1:5d}" for j in others[k:k + 4])
            lines.append(f"CONECT{i + 1:5d}{chunk}")
    lines.append("END")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pdb(path) -> tuple[ChemGraph, np.ndarray]:
    """Re-read a PDB we wrote: typed residues + CONECT extras -> full bond set."""
    templates = load_templates()
    atoms: list[Atom] = []
    coords: list[list[float]] = []
    res_types: dict[int, str] = {}
    conect: list[tuple[int, list[int]]] = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if line.startswith("ATOM  "):
                try:
                    serial = int(line[6:11])
                    name = line[12:16].strip()
                    res_name = line[17:20].strip()
                    res_seq = int(line[22:26])
                    xyz = [float(line[c:c + 8]) for c in (30, 38, 46)]
                except ValueError:
                    raise ParseError(f"line {ln}: malformed ATOM record") from None
                if serial != len(atoms) + 1:
                    raise ParseError(f"line {ln}: ATOM serials must be 1..n in order")
                if res_name != UNKNOWN and res_name not in RESIDUE_CODES:
                    raise ParseError(f"line {ln}: unknown residue name '{res_name}'")
                res_idx = res_seq - 1
                if res_idx < 0:
                    raise ParseError(f"line {ln}: residue numbers start at 1")
                prev = res_types.setdefault(res_idx, res_name)
                if prev != res_name:
                    raise ParseError(f"line {ln}: residue {res_seq} renamed "
                                     f"{prev} -> {res_name}")
                atoms.append(Atom(element_of_atom_name(name), name, res_idx))
                coords.append(xyz)
            elif line.startswith("CONECT"):
                fields = line[6:].rstrip("\n")
                serials = [int(fields[c:c + 5])
                           for c in range(0, len(fields.rstrip()), 5)]
                if len(serials) < 2:
                    raise ParseError(f"line {ln}: CONECT needs >= 2 serials")
                conect.append((ln, serials))
    if not atoms:
        raise ParseError("no ATOM records found")
    n_res = max(res_types) + 1
    if set(res_types) != set(range(n_res)):
        raise ParseError("residue numbering has gaps")
    index = {(a.residue_index, a.atom_name): i for i, a in enumerate(atoms)}
    if len(index) != len(atoms):
        raise ParseError("duplicate (residue, atom name) pair")
    keys: set[tuple[int, int]] = set()
    bonds: list[Bond] = []

    def _add(i: int, j: int, order: BondOrder) -> None:
        key = (i, j) if i < j else (j, i)
        if key not in keys:
            keys.add(key)
            bonds.append(Bond(key[0], key[1], order))

    for r in range(n_res):
        code = res_types[r]
        intra = templates[code].intra_bonds if code != UNKNOWN else \
            (("N", "CA", BondOrder.SINGLE), ("CA", "C", BondOrder.SINGLE),
             ("C", "O", BondOrder.DOUBLE))
        for a_name, b_name, order in intra:
            ia, ib = index.get((r, a_name)), index.get((r, b_name))
            if ia is not None and ib is not None:
                _add(ia, ib, order)
        if (r, "OXT") in index and (r, "C") in index:
            _add(index[(r, "C")], index[(r, "OXT")], BondOrder.SINGLE)
        if r + 1 < n_res:
            ic, in_ = index.get((r, "C")), index.get((r + 1, "N"))
            if ic is not None and in_ is not None:
                _add(ic, in_, BondOrder.SINGLE)
    n = len(atoms)
    for ln, serials in conect:
        for s in serials:
            if not (1 <= s <= n):
                raise ParseError(f"line {ln}: CONECT serial {s} out of range")
        for j in serials[1:]:
            _add(serials[0] - 1, j - 1, BondOrder.SINGLE)
    types = tuple(res_types[r] for r in range(n_res))
    graph = ChemGraph(atoms=tuple(atoms), bonds=tuple(bonds), residue_types=types)
    return graph, np.array(coords, dtype=np.float64)


# -- synthetic complexes --------------------------------------------------------

def _bond_targets(graph: ChemGraph) -> dict[tuple[int, int], float]:
    return {bond.key: reference_bond_length(graph.atoms[bond.i].element,
                                            graph.atoms[bond.j].element)
            for bond in graph.bonds}


def _macrocycle_atoms(graph: ChemGraph, spec: CyclizationSpec) -> list[int]:
    """The closing bond's endpoints joined by the shortest bond path."""
    index = graph.atom_index()
    closing = spec.closing_bond
    a = index[(closing.a.residue, closing.a.name)]
    b = index[(closing.b.residue, closing.b.name)]
    adj = graph.neighbor_lists()
    parent = {a: a}
    queue = [a]
    while queue:
        cur = queue.pop(0)
        if cur == b:
            break
        for nxt in adj[cur]:
            if {cur, nxt} == {a, b}:
                continue  # the closing bond itself
            if nxt not in parent:
                parent[nxt] = cur
                queue.append(nxt)
    if b not in parent:
        raise ContractViolation("macrocycle path missing; graph disconnected?")
    path = [b]
    while path[-1] != a:
        path.append(parent[path[-1]])
    return path[::-1]


def _ring_radius(lengths: np.ndarray) -> float:
    """R with the cycle's chords exactly matching the bond lengths."""
    lo, hi = float(lengths.max()) / 2.0 * (1.0 + 1e-12), float(lengths.sum())

    def turn(radius):
        return float(np.sum(2.0 * np.arcsin(lengths / (2.0 * radius))))

    if turn(lo) < 2.0 * np.pi:
        raise ContractViolation("cycle too short to close on a circle")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if turn(mid) > 2.0 * np.pi:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _place_exact(graph: ChemGraph, spec: CyclizationSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Every bonded pair at its exact target length; non-bonded pairs kept apart."""
    targets = _bond_targets(graph)
    coords = np.full((graph.n_atoms, 3), np.nan)
    placed: list[int] = []
    if spec.closing_bond is not None:
        cycle = _macrocycle_atoms(graph, spec)
        steps = np.array([targets[tuple(sorted((cycle[k], cycle[(k + 1) % len(cycle)])))]
                          for k in range(len(cycle))])
        radius = _ring_radius(steps)
        angle = 0.0
        for k, atom in enumerate(cycle):
            coords[atom] = (radius * np.cos(angle), radius * np.sin(angle), 0.0)
            angle += 2.0 * np.arcsin(steps[k] / (2.0 * radius))
        placed = list(cycle)
    else:
        coords[0] = (0.0, 0.0, 0.0)
        placed = [0]
    adj = graph.neighbor_lists()
    frontier = list(placed)
    in_place = set(placed)
    while len(in_place) < graph.n_atoms:
        grew = False
        for parent in list(frontier):
            for child in adj[parent]:
                if child in in_place:
                    continue
                length = targets[tuple(sorted((parent, child)))]
                others = np.array([coords[i] for i in in_place if i != parent])
                best, best_sep = None, -1.0
                for _ in range(300):
                    direction = rng.normal(size=3)
                    direction /= np.linalg.norm(direction)
                    candidate = coords[parent] + length * direction
                    sep = (np.min(np.linalg.norm(others - candidate, axis=1))
                           if len(others) else np.inf)
                    if sep > best_sep:
                        best, best_sep = candidate, sep
                    if best_sep >= MIN_NONBONDED + 0.3:
                        break
                if best_sep < MIN_NONBONDED:
                    raise ContractViolation(
                        f"placement failed: atom {child} min separation {best_sep:.2f}")
                coords[child] = best
                in_place.add(child)
                frontier.append(child)
                grew = True
        if not grew:
            raise ContractViolation("placement stalled; graph disconnected?")
        frontier = [i for i in frontier if any(j not in in_place for j in adj[i])]
    return coords


def _jitter(coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, JITTER_SIGMA, size=coords.shape)
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, JITTER_MAX / np.maximum(norms, 1e-12))
    return coords + noise


def _receptor_bowl(extent: float, rng: np.random.Generator) -> Receptor:
    """Open hemispherical shell around the ligand centroid: a concave pocket."""
    n_atoms = int(rng.integers(60, 201))
    radius = extent + RECEPTOR_CLEARANCE
    golden = np.pi * (3.0 - np.sqrt(5.0))
    coords = np.empty((n_atoms, 3))
    for k in range(n_atoms):
        z = -(k + 0.5) / n_atoms            # uniform in (-1, 0): lower half
        rho = np.sqrt(1.0 - z * z)
        phi = golden * k
        shell = radius + rng.uniform(-0.3, 0.3)
        coords[k] = (shell * rho * np.cos(phi), shell * rho * np.sin(phi),
                     shell * z)
    elements = tuple(rng.choice([Element.C, Element.N, Element.O],
                                p=[0.6, 0.2, 0.2]) for _ in range(n_atoms))
    backbone = rng.random(n_atoms) < 0.45
    return Receptor(coords=coords, elements=elements, backbone=backbone)


def _synthetic_spec(n_res: int, ctype: CyclizationType | None,
                    rng: np.random.Generator) -> CyclizationSpec:
    if ctype is None:
        allowed = [CyclizationType.LINEAR, CyclizationType.HEAD_TO_TAIL,
                   CyclizationType.HEAD_TO_SIDE, CyclizationType.SIDE_TO_TAIL]
        if n_res >= LENGTH_RANGE[CyclizationType.SIDE_TO_SIDE][0]:
            allowed.append(CyclizationType.SIDE_TO_SIDE)
        ctype = allowed[int(rng.integers(len(allowed)))]
    if ctype is CyclizationType.SIDE_TO_SIDE:
        return make_spec(ctype, n_res)
    return make_spec(ctype, n_res, length_range=(3, 23))


def gen_synthetic_dataset(n: int, seed: int, *,
                          ctype: CyclizationType | None = None,
                          n_residues: int | None = None) -> list[ComplexRecord]:
    """Deterministic toy complexes: concave receptor shell + short ligand.

    Bond lengths are exact before a small clipped Gaussian jitter; keyword
    overrides pin the cyclization type or length for targeted datasets.
    """
    if n < 1:
        raise ContractViolation("gen_synthetic_dataset: n must be >= 1")
    records = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        if n_residues is None:
            lo = 8 if ctype is CyclizationType.SIDE_TO_SIDE else 3
            n_res = int(rng.integers(lo, 9))
        else:
            n_res = n_residues
        spec = _synthetic_spec(n_res, ctype, rng)
        codes = [SYNTH_CODES[int(rng.integers(len(SYNTH_CODES)))]
                 for _ in range(n_res)]
        sequence = apply_anchor_codes(codes, spec)
        graph = assemble(sequence, spec)
        coords = _place_exact(graph, spec, rng)
        coords = _jitter(coords, rng)
        centroid = coords.mean(axis=0)
        coords -= centroid
        extent = float(np.linalg.norm(coords, axis=1).max())
        receptor = _receptor_bowl(extent, rng)
        records.append(ComplexRecord(record_id=f"syn-{seed}-{i}",
                                     receptor=receptor, ligand_graph=graph,
                                     ligand_coords=coords, spec=spec))
    return records

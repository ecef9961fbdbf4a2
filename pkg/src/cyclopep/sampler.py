"""Routed sampling: alternate structure denoising with sequence re-routing.

State is a fixed-width per-residue coordinate array (73 columns: 5 shared
backbone/CB slots plus one slot per residue-type side-chain atom) so that a
residue can switch type mid-run without losing the coordinates it had under
any other type. Cyclization-constrained atoms (anchor side chains and the
terminal OXT) never change identity and live in a small separate block.

Each step: extract the atoms selected by the current sequence, denoise them,
cache the denoised structure, re-noise to the next time, stamp timers, then
(once time drops into the router's regime) re-predict the sequence, reassemble
the graph, and bring any newly selected, stale slots onto the common time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chem import (RESIDUE_CODES, Atom73Layout, ChemGraph, build_layout,
                   load_templates, validate_graph)
from .cyclization import (CyclizationSpec, apply_anchor_codes, assemble,
                          cyc_state_atoms_of, subgraph)
from .data_io import Receptor
from .denoiser import ComplexInput, DenoiserConfig, forward
from .errors import ContractViolation, InvariantViolation
from .harmonic import (DEFAULT_SCHEDULE, BetaSchedule, HarmonicOperator,
                       align_time, build_operator, denoise_renoise_step,
                       identity_operator, operator_from_laplacian,
                       pocket_center, sample_prior, sigma_from_pocket)
from .router import decode_mode_for_t, predict, sample_sequence

TERMINAL_TIME = 1e-4      # score variance vanishes at t=0
ROUTER_ACTIVE_T = 0.5     # sequence re-prediction only at or below this time


# -- the atom73 super-graph prior ---------------------------------------------

def _super_system(spec: CyclizationSpec,
                  layout: Atom73Layout) -> tuple[int, set[tuple[int, int]]]:
    """Node count and edges of the full per-slot graph used by the prior.

    Every residue contributes all 73 slots, with each residue type's
    side-chain chain hanging off the shared backbone/CB nodes; cyclization
    atoms are extra nodes wired through their anchor's template bonds.
    """
    n_res, width = spec.n_residues, layout.width
    templates = load_templates()
    cyc_atoms = cyc_state_atoms_of(spec)
    cyc_index = {(ref.residue, ref.name): k for k, ref in enumerate(cyc_atoms)}
    cyc_base = n_res * width

    def x_node(r: int, name: str, code: str) -> int:
        return r * width + layout.column(code, name)

    def node_of(r: int, name: str, code: str) -> int:
        k = cyc_index.get((r, name))
        return cyc_base + k if k is not None else x_node(r, name, code)

    edges: set[tuple[int, int]] = set()

    def connect(i: int, j: int) -> None:
        edges.add((i, j) if i < j else (j, i))

    for r in range(n_res):
        for code in RESIDUE_CODES:
            for a, b, _ in templates[code].intra_bonds:
                connect(x_node(r, a, code), x_node(r, b, code))
        if r + 1 < n_res:
            connect(x_node(r, "C", "GLY"), x_node(r + 1, "N", "GLY"))
    for k, ref in enumerate(cyc_atoms):
        node = cyc_base + k
        if ref.name == "OXT":
            connect(node, x_node(ref.residue, "C", "GLY"))
            continue
        code = spec.anchor_code(ref.residue)
        for a, b, _ in templates[code].intra_bonds:
            if a == ref.name:
                connect(node, node_of(ref.residue, b, code))
            elif b == ref.name:
                connect(node, node_of(ref.residue, a, code))
    if spec.closing_bond is not None:
        a, b = spec.closing_bond.a, spec.closing_bond.b
        connect(node_of(a.residue, a.name, spec.anchor_code(a.residue) or "GLY"),
                node_of(b.residue, b.name, spec.anchor_code(b.residue) or "GLY"))
    return cyc_base + len(cyc_atoms), edges


_SUPER_CACHE: dict[tuple[CyclizationSpec, float], HarmonicOperator] = {}
_ISO_CACHE: dict[tuple[int, float], HarmonicOperator] = {}


def super_operator(spec: CyclizationSpec, sigma_p: float,
                   layout: Atom73Layout | None = None) -> HarmonicOperator:
    """Harmonic operator over every slot; cached, it never changes mid-run."""
    key = (spec, float(sigma_p))
    cached = _SUPER_CACHE.get(key)
    if cached is not None:
        return cached
    layout = layout or build_layout()
    n_nodes, edges = _super_system(spec, layout)
    lap = np.zeros((n_nodes, n_nodes))
    for i, j in edges:
        lap[i, i] += 1.0
        lap[j, j] += 1.0
        lap[i, j] -= 1.0
        lap[j, i] -= 1.0
    op = operator_from_laplacian(lap, sigma_p)
    _SUPER_CACHE[key] = op
    return op


def _isotropic_operator(n_atoms: int, sigma_p: float) -> HarmonicOperator:
    """Graph-free ablation operator (plain VP noise at the pocket scale)."""
    key = (n_atoms, float(sigma_p))
    cached = _ISO_CACHE.get(key)
    if cached is None:
        cached = _ISO_CACHE[key] = identity_operator(n_atoms, sigma_p)
    return cached


# -- state ---------------------------------------------------------------------

SlotKey = tuple  # ("X", res, col) or ("C", k)


@dataclass
class SamplerState:
    spec: CyclizationSpec
    sequence: tuple[str, ...]
    graph: ChemGraph
    slots: np.ndarray        # (n_res, 73, 3) current coordinates per slot
    cyc: np.ndarray          # (n_cyc, 3) cyclization-constrained atoms
    denoised_slots: np.ndarray
    denoised_cyc: np.ndarray
    timer: np.ndarray        # (n_res, 73) last time each slot was updated
    t: float
    center: np.ndarray       # pocket centroid: the diffusion frame origin
    layout: Atom73Layout = field(default_factory=build_layout)


def init_state(spec: CyclizationSpec, receptor: Receptor,
               rng: np.random.Generator, sigma_p: float | None = None,
               isotropic: bool = False) -> SamplerState:
    """Uniform random free residues, joint prior draw over all slots, T = 1."""
    layout = build_layout()
    center = pocket_center(receptor.coords)
    sigma = sigma_from_pocket(receptor.coords) if sigma_p is None else sigma_p
    if isotropic:
        n_nodes = spec.n_residues * layout.width + len(cyc_state_atoms_of(spec))
        op = _isotropic_operator(n_nodes, sigma)
    else:
        op = super_operator(spec, sigma, layout)
    joint = sample_prior(op, rng, center=center)
    n_res, width = spec.n_residues, layout.width
    slots = joint[:n_res * width].reshape(n_res, width, 3)
    cyc = joint[n_res * width:]
    codes = [RESIDUE_CODES[int(rng.integers(len(RESIDUE_CODES)))]
             for _ in range(n_res)]
    sequence = apply_anchor_codes(codes, spec)
    graph = assemble(sequence, spec)
    return SamplerState(spec=spec, sequence=sequence, graph=graph,
                        slots=slots, cyc=cyc,
                        denoised_slots=slots.copy(), denoised_cyc=cyc.copy(),
                        timer=np.ones((n_res, width)), t=1.0, center=center,
                        layout=layout)


def slot_map(state: SamplerState) -> tuple[SlotKey, ...]:
    """One slot key per atom of the current graph, in graph atom order."""
    cyc_index = {(ref.residue, ref.name): k
                 for k, ref in enumerate(cyc_state_atoms_of(state.spec))}
    keys = []
    for atom in state.graph.atoms:
        k = cyc_index.get((atom.residue_index, atom.atom_name))
        if k is not None:
            keys.append(("C", k))
        else:
            code = state.sequence[atom.residue_index]
            keys.append(("X", atom.residue_index,
                         state.layout.column(code, atom.atom_name)))
    return tuple(keys)


def extract(state: SamplerState) -> tuple[np.ndarray, tuple[SlotKey, ...]]:
    """Coordinates of the atoms the current sequence selects, in graph order."""
    keys = slot_map(state)
    coords = np.empty((len(keys), 3))
    for row, key in enumerate(keys):
        coords[row] = state.cyc[key[1]] if key[0] == "C" \
            else state.slots[key[1], key[2]]
    return coords, keys


def cache(state: SamplerState, coords: np.ndarray,
          index_map: tuple[SlotKey, ...], target: str = "current") -> SamplerState:
    """Write per-atom coordinates back into their slots; others untouched."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (len(index_map), 3):
        raise ContractViolation(f"cache: coords {coords.shape} vs "
                                f"{len(index_map)} mapped atoms")
    if not np.all(np.isfinite(coords)):
        raise ContractViolation("cache: non-finite coordinates")
    if target == "current":
        slots, cyc = state.slots, state.cyc
    elif target == "denoised":
        slots, cyc = state.denoised_slots, state.denoised_cyc
    else:
        raise ContractViolation(f"cache: unknown target '{target}'")
    for row, key in enumerate(index_map):
        if key[0] == "C":
            cyc[key[1]] = coords[row]
        else:
            slots[key[1], key[2]] = coords[row]
    return state


def atom_times(state: SamplerState, index_map: tuple[SlotKey, ...],
               now: float) -> np.ndarray:
    """Per-atom last-update times; cyclization atoms are always current."""
    return np.array([now if key[0] == "C" else state.timer[key[1], key[2]]
                     for key in index_map])


def make_op_builder(sigma_p: float, isotropic: bool = False):
    """Ligand-operator factory, memoized on the sequence (graph follows it)."""
    if isotropic:
        return lambda graph, sequence: _isotropic_operator(graph.n_atoms, sigma_p)
    cache_by_seq: dict[tuple[str, ...], HarmonicOperator] = {}

    def build(graph: ChemGraph, sequence: tuple[str, ...]) -> HarmonicOperator:
        op = cache_by_seq.get(sequence)
        if op is None:
            op = build_operator(graph, sigma_p)
            cache_by_seq[sequence] = op
        return op

    return build


# -- network adapters ------------------------------------------------------------

def make_denoise_fn(params, config: DenoiserConfig, receptor: Receptor):
    def denoise(graph: ChemGraph, coords: np.ndarray, t: float) -> np.ndarray:
        ci = ComplexInput(receptor_coords=receptor.coords,
                          receptor_elements=receptor.elements,
                          receptor_backbone=receptor.backbone,
                          ligand_graph=graph, ligand_coords=coords, t=t)
        return forward(params, config, ci)[0].data.copy()

    return denoise


def make_route_fn(params, config: DenoiserConfig, receptor: Receptor):
    def route(stripped: ChemGraph, coords: np.ndarray, t: float,
              spec: CyclizationSpec, rng: np.random.Generator) -> tuple[str, ...]:
        ci = ComplexInput(receptor_coords=receptor.coords,
                          receptor_elements=receptor.elements,
                          receptor_backbone=receptor.backbone,
                          ligand_graph=stripped, ligand_coords=coords, t=t)
        logits = predict(params, config, ci).data
        mode, temperature = decode_mode_for_t(t)
        if mode == "categorical":
            return sample_sequence(logits, spec, mode, rng,
                                   temperature=temperature)
        return sample_sequence(logits, spec, mode)

    return route


def fixed_sequence_route_fn(sequence: tuple[str, ...]):
    """Ablation/mock: the router always answers with one fixed sequence."""
    frozen = tuple(sequence)

    def route(stripped, coords, t, spec, rng):
        return apply_anchor_codes(frozen, spec)

    return route


def random_sequence_route_fn():
    """Ablation: free residues drawn uniformly at every router call."""

    def route(stripped, coords, t, spec, rng):
        codes = [RESIDUE_CODES[int(rng.integers(len(RESIDUE_CODES)))]
                 for _ in range(spec.n_residues)]
        return apply_anchor_codes(codes, spec)

    return route


# -- the step and the loop ---------------------------------------------------------

def step(state: SamplerState, denoise_fn, route_fn, op_builder, dt: float,
         rng: np.random.Generator,
         schedule: BetaSchedule = DEFAULT_SCHEDULE) -> SamplerState:
    """One denoise-renoise move, then (in the router regime) a sequence update."""
    dt = float(dt)
    if dt <= 0.0 or dt > state.t:
        raise ContractViolation(f"step: need 0 < dt <= t, got dt={dt} t={state.t}")
    t_new = state.t - dt
    c = state.center

    coords, keys = extract(state)
    op = op_builder(state.graph, state.sequence)
    x0_hat = np.asarray(denoise_fn(state.graph, coords, state.t), dtype=np.float64)
    if x0_hat.shape != coords.shape:
        raise ContractViolation(f"step: denoiser returned {x0_hat.shape}, "
                                f"expected {coords.shape}")
    cache(state, x0_hat, keys, target="denoised")
    renoised = denoise_renoise_step(op, coords - c, x0_hat - c, state.t, dt,
                                    rng, schedule=schedule) + c
    cache(state, renoised, keys)
    for key in keys:
        if key[0] == "X":
            state.timer[key[1], key[2]] = t_new

    routed = t_new <= ROUTER_ACTIVE_T
    if routed:
        stripped, keep = subgraph(state.graph, state.spec)
        sub_coords = np.array([state.denoised_slots[k[1], k[2]]
                               if k[0] == "X" else state.denoised_cyc[k[1]]
                               for k in (keys[i] for i in keep)])
        new_sequence = tuple(route_fn(stripped, sub_coords, t_new, state.spec,
                                      rng))
        new_sequence = apply_anchor_codes(new_sequence, state.spec)
        if new_sequence != state.sequence:
            state.sequence = new_sequence
            state.graph = assemble(new_sequence, state.spec)
        keys = slot_map(state)
        coords_now, _ = extract(state)
        denoised_now = np.array([state.denoised_slots[k[1], k[2]]
                                 if k[0] == "X" else state.denoised_cyc[k[1]]
                                 for k in keys])
        times = atom_times(state, keys, t_new)
        op = op_builder(state.graph, state.sequence)
        aligned = align_time(op, coords_now - c, denoised_now - c, times,
                             t_new, rng, schedule=schedule) + c
        cache(state, aligned, keys)
        for key in keys:
            if key[0] == "X":
                state.timer[key[1], key[2]] = t_new

    state.t = t_new
    stamped = [state.timer[k[1], k[2]] for k in keys if k[0] == "X"]
    if stamped and not np.all(np.asarray(stamped) == t_new):
        raise InvariantViolation(
            f"timer incoherence at t={t_new}: selected slots carry times "
            f"{sorted(set(stamped))}")
    if np.any(state.timer < -1e-12) or np.any(state.timer > 1.0 + 1e-12):
        raise InvariantViolation("timer left [0, 1]")
    return state


@dataclass(frozen=True)
class StepTrace:
    index: int
    t: float
    sequence: tuple[str, ...]
    routed: bool


@dataclass(frozen=True)
class RunResult:
    coords: np.ndarray
    sequence: tuple[str, ...]
    graph: ChemGraph
    spec: CyclizationSpec
    trace: tuple[StepTrace, ...]
    seed: int


def trace_lines(result: RunResult) -> list[str]:
    lines = [f"run seed={result.seed} ctype={result.spec.ctype.value} "
             f"n_steps={len(result.trace)}"]
    for entry in result.trace:
        seq = "-".join(entry.sequence)
        lines.append(f"step={entry.index} t={entry.t:.6f} "
                     f"routed={int(entry.routed)} seq={seq}")
    return lines


def run(spec: CyclizationSpec, receptor: Receptor, denoise_fn, route_fn,
        n_steps: int = 1000, seed: int = 0, sigma_p: float | None = None,
        isotropic: bool = False,
        schedule: BetaSchedule = DEFAULT_SCHEDULE) -> RunResult:
    """Full sampling loop on a uniform time grid, ending in a bare denoise."""
    if n_steps < 2:
        raise ContractViolation(f"run: n_steps must be >= 2, got {n_steps}")
    rng = np.random.default_rng(seed)
    state = init_state(spec, receptor, rng, sigma_p=sigma_p,
                       isotropic=isotropic)
    sigma = sigma_from_pocket(receptor.coords) if sigma_p is None else sigma_p
    op_builder = make_op_builder(sigma, isotropic=isotropic)
    grid = np.linspace(1.0, 0.0, n_steps + 1)
    grid[-1] = TERMINAL_TIME
    trace = []
    for idx in range(n_steps):
        try:
            step(state, denoise_fn, route_fn, op_builder,
                 state.t - grid[idx + 1], rng, schedule=schedule)
        except InvariantViolation as exc:
            raise InvariantViolation(
                f"step {idx} (t {grid[idx]:.6f} -> {grid[idx + 1]:.6f}), "
                f"sequence {'-'.join(state.sequence)}: {exc}") from exc
        trace.append(StepTrace(index=idx, t=state.t, sequence=state.sequence,
                               routed=state.t <= ROUTER_ACTIVE_T))
    coords, _ = extract(state)
    final = np.asarray(denoise_fn(state.graph, coords, state.t),
                       dtype=np.float64)
    report = validate_graph(state.graph)
    if not report.ok:
        raise InvariantViolation("final graph invalid: "
                                 + "; ".join(report.issues()))
    return RunResult(coords=final, sequence=state.sequence, graph=state.graph,
                     spec=spec, trace=tuple(trace), seed=seed)

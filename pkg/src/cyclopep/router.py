"""Residue-type classifier over denoised, side-chain-stripped structures.

The trunk is an independent parameter copy of the structure denoiser; per
residue, the head reads the concatenated hidden states of the four backbone
atoms (N, CA, C, O) and emits 20-way logits in alphabetical residue-code
order. Anchor residues always keep their topology-fixed codes; the classifier
is only ever trusted for free residues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .chem import BACKBONE_NAMES, RESIDUE_CODES, UNKNOWN
from .cyclization import CyclizationSpec, subgraph
from .denoiser import ComplexInput, DenoiserConfig, forward, init_denoiser_params
from .engine import Tensor
from .errors import ContractViolation
from .harmonic import DEFAULT_SCHEDULE, BetaSchedule, HarmonicOperator, perturb

N_RESIDUE_TYPES = len(RESIDUE_CODES)
ROUTER_FREE_ATOM_NAMES = frozenset(BACKBONE_NAMES) | {"OXT"}
DECODE_SWITCH_T = 0.25          # categorical above, argmax at or below
CODE_INDEX = {code: i for i, code in enumerate(RESIDUE_CODES)}

TRUNK_PREFIX = "trunk."
HEAD_PREFIX = "head."


def init_router_params(config: DenoiserConfig, rng: np.random.Generator,
                       scale: float = 1.0) -> dict[str, Tensor]:
    params = {TRUNK_PREFIX + name: p
              for name, p in init_denoiser_params(config, rng, scale).items()}
    h = config.hidden_dim
    shapes = {"w1": (4 * h, h), "b1": (1, h), "w2": (h, N_RESIDUE_TYPES),
              "b2": (1, N_RESIDUE_TYPES)}
    for suffix, shape in shapes.items():
        if suffix.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, np.sqrt(2.0 / sum(shape)), size=shape)
        params[HEAD_PREFIX + suffix] = Tensor(data, requires_grad=True)
    return params


def _split_trunk(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name[len(TRUNK_PREFIX):]: p for name, p in params.items()
            if name.startswith(TRUNK_PREFIX)}


def _leak_guard(complex_input: ComplexInput) -> None:
    graph = complex_input.ligand_graph
    for atom in graph.atoms:
        if graph.residue_types[atom.residue_index] == UNKNOWN \
                and atom.atom_name not in ROUTER_FREE_ATOM_NAMES:
            raise ContractViolation(
                f"router: free residue {atom.residue_index} carries side-chain "
                f"atom {atom.atom_name}; strip side chains before predicting")


def predict(params: dict[str, Tensor], config: DenoiserConfig,
            complex_input: ComplexInput) -> Tensor:
    """Per-residue logits (n_residues x 20) from a stripped complex."""
    _leak_guard(complex_input)
    graph = complex_input.ligand_graph
    _, hidden = forward(_split_trunk(params), config, complex_input)
    index = graph.atom_index()
    rows = {name: [] for name in BACKBONE_NAMES}
    for r in range(graph.n_residues):
        for name in BACKBONE_NAMES:
            i = index.get((r, name))
            if i is None:
                raise ContractViolation(f"router: residue {r} is missing "
                                        f"backbone atom {name}")
            rows[name].append(i)
    per_atom = [eng.gather_rows(hidden, np.asarray(rows[name], dtype=np.int64))
                for name in BACKBONE_NAMES]
    head_in = eng.concat(per_atom, axis=1)
    z = eng.silu(eng.add(eng.matmul(head_in, params[HEAD_PREFIX + "w1"]),
                         params[HEAD_PREFIX + "b1"]))
    return eng.add(eng.matmul(z, params[HEAD_PREFIX + "w2"]),
                   params[HEAD_PREFIX + "b2"])


def sequence_nll(logits: Tensor, target_indices: np.ndarray,
                 free_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the targets over masked-in residues."""
    targets = np.asarray(target_indices, dtype=np.int64)
    mask = np.asarray(free_mask, dtype=bool)
    n_res = logits.data.shape[0]
    if targets.shape != (n_res,) or mask.shape != (n_res,):
        raise ContractViolation("sequence_nll: targets/mask must be per-residue")
    n_free = int(mask.sum())
    if n_free == 0:
        raise ContractViolation("sequence_nll: no free residues to score")
    pick = np.zeros_like(logits.data)
    pick[mask, targets[mask]] = 1.0 / n_free
    log_probs = eng.log(eng.softmax(logits, axis=-1))
    return eng.neg(eng.sum_(eng.mul(log_probs, Tensor(pick))))


@dataclass(frozen=True)
class RouterBatchItem:
    """One training complex: clean coordinates plus its diffusion frame."""

    complex_input: ComplexInput          # ligand_coords are the clean x0
    spec: CyclizationSpec
    operator: HarmonicOperator
    center: np.ndarray                   # pocket centroid (diffusion origin)


def router_loss(params: dict[str, Tensor], config: DenoiserConfig,
                batch: list[RouterBatchItem], denoiser_params: dict[str, Tensor],
                denoiser_config: DenoiserConfig, rng: np.random.Generator,
                schedule: BetaSchedule = DEFAULT_SCHEDULE,
                t_max: float = 0.5) -> Tensor:
    """Mean free-residue NLL; the structure denoiser stays frozen.

    Per item: draw t ~ U(0, t_max], noise the clean ligand in the pocket
    frame, denoise it with the frozen network, strip side chains, classify.
    """
    if not batch:
        raise ContractViolation("router_loss: empty batch")
    terms = []
    for item in batch:
        ci0 = item.complex_input
        t = float(rng.uniform(0.0, t_max))
        t = max(t, 1e-6)
        x_t = perturb(item.operator, ci0.ligand_coords - item.center, t, rng,
                      schedule=schedule) + item.center
        noisy = ComplexInput(receptor_coords=ci0.receptor_coords,
                             receptor_elements=ci0.receptor_elements,
                             receptor_backbone=ci0.receptor_backbone,
                             ligand_graph=ci0.ligand_graph,
                             ligand_coords=x_t, t=t)
        x0_hat, _ = forward(denoiser_params, denoiser_config, noisy)
        denoised = x0_hat.data  # frozen: break the tape here
        stripped, keep = subgraph(ci0.ligand_graph, item.spec)
        sub_ci = ComplexInput(receptor_coords=ci0.receptor_coords,
                              receptor_elements=ci0.receptor_elements,
                              receptor_backbone=ci0.receptor_backbone,
                              ligand_graph=stripped,
                              ligand_coords=denoised[list(keep)], t=t)
        logits = predict(params, config, sub_ci)
        targets = np.array([CODE_INDEX[c] for c in ci0.ligand_graph.residue_types])
        free = np.array([not item.spec.is_anchor(r)
                         for r in range(len(targets))])
        terms.append(sequence_nll(logits, targets, free))
    total = terms[0]
    for term in terms[1:]:
        total = eng.add(total, term)
    return eng.mul(total, Tensor(np.asarray(1.0 / len(terms))))


def decode_mode_for_t(t: float) -> tuple[str, float]:
    """Sampling policy: explore early, commit late."""
    return ("categorical", 1.0) if t > DECODE_SWITCH_T else ("argmax", 0.0)


def sample_sequence(logits: np.ndarray, spec: CyclizationSpec, mode: str,
                    rng: np.random.Generator | None = None,
                    temperature: float = 1.0) -> tuple[str, ...]:
    """Decode residue codes from logits; anchor positions obey the spec."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (spec.n_residues, N_RESIDUE_TYPES):
        raise ContractViolation(f"sample_sequence: logits shape {logits.shape} "
                                f"vs {spec.n_residues} residues")
    if mode == "argmax":
        idx = logits.argmax(axis=1)
    elif mode == "categorical":
        if rng is None:
            raise ContractViolation("sample_sequence: categorical mode needs rng")
        if temperature <= 0:
            raise ContractViolation("sample_sequence: temperature must be positive")
        scaled = logits / temperature
        scaled = scaled - scaled.max(axis=1, keepdims=True)
        probs = np.exp(scaled)
        probs /= probs.sum(axis=1, keepdims=True)
        idx = np.array([rng.choice(N_RESIDUE_TYPES, p=p) for p in probs])
    else:
        raise ContractViolation(f"sample_sequence: unknown mode '{mode}'")
    seq = [RESIDUE_CODES[i] for i in idx]
    for pos, code in spec.anchors:
        seq[pos] = code
    return tuple(seq)


def accuracy(logits: np.ndarray, true_codes: tuple[str, ...],
             spec: CyclizationSpec) -> float:
    """Fraction of free residues whose argmax matches the truth."""
    logits = np.asarray(logits)
    idx = logits.argmax(axis=1)
    free = [r for r in range(spec.n_residues) if not spec.is_anchor(r)]
    if not free:
        raise ContractViolation("accuracy: no free residues")
    hits = sum(1 for r in free if RESIDUE_CODES[idx[r]] == true_codes[r])
    return hits / len(free)

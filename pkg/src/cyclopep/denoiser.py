"""SE(3)-equivariant structure denoiser over the complex knn + ligand bond graphs.

Message passing (per layer, ligand nodes only):
    knn messages   over the k-nearest-neighbor graph of the complex,
    bond features  from distance + bond state,
    bond messages  over the ligand chemical graph,
    node update    h_i += MLP(sum of both message sums, t),
    bond update    b_ij <- sum over two-bond paths through either endpoint,
    positions      x_i += sum_j (x_j - x_i) * scalar gate, clipped, ligand only.

Every perceptron input gets the sinusoidal time embedding appended. Receptor
hidden states are embedded once and never updated; receptor positions are
never modified. The knn topology is built once per forward call from the
input positions; distances are recomputed as positions move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .chem import ChemGraph, Element
from .engine import Tensor
from .errors import ContractViolation, NumericError

ELEMENT_INDEX = {element: i for i, element in enumerate(Element)}
N_ELEMENTS = len(ELEMENT_INDEX)
NODE_FEATURE_DIM = N_ELEMENTS + 2  # one-hot + is_ligand + role flag
N_BOND_KINDS = 3                   # single, double, aromatic
MAX_STEP_ANGSTROM = 10.0           # per-layer position update bound
KNN_FALLBACK_COUNT = 500           # receptor atoms kept when the pocket is empty
RBF_CENTERS = np.linspace(0.0, 20.0, 11)   # soft distance bins, 2 A apart
RBF_WIDTH = 2.0
N_DIST_FEATS = len(RBF_CENTERS) + 1        # bins + short-range reciprocal

EDGE_LIGAND_LIGAND = 0
EDGE_PROTEIN_LIGAND = 1


@dataclass(frozen=True)
class DenoiserConfig:
    k_neighbors: int = 16
    n_layers: int = 4
    hidden_dim: int = 64
    time_embed_dim: int = 16
    pocket_radius: float = 10.0

    def __post_init__(self):
        for name in ("k_neighbors", "n_layers", "hidden_dim", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"DenoiserConfig.{name} must be positive")
        if self.pocket_radius <= 0:
            raise ContractViolation("DenoiserConfig.pocket_radius must be positive")
        if self.time_embed_dim % 2:
            raise ContractViolation("DenoiserConfig.time_embed_dim must be even")


@dataclass(frozen=True)
class ComplexInput:
    receptor_coords: np.ndarray          # (R, 3)
    receptor_elements: tuple[Element, ...]
    receptor_backbone: np.ndarray        # (R,) bool, backbone vs side chain
    ligand_graph: ChemGraph
    ligand_coords: np.ndarray            # (N_L, 3)
    t: float

    def __post_init__(self):
        rec = np.asarray(self.receptor_coords, dtype=np.float64)
        lig = np.asarray(self.ligand_coords, dtype=np.float64)
        if rec.ndim != 2 or rec.shape[1] != 3 or rec.shape[0] == 0:
            raise ContractViolation("ComplexInput: receptor must be a nonempty Rx3")
        if len(self.receptor_elements) != rec.shape[0] \
                or len(self.receptor_backbone) != rec.shape[0]:
            raise ContractViolation("ComplexInput: receptor annotation length mismatch")
        if lig.shape != (self.ligand_graph.n_atoms, 3):
            raise ContractViolation(
                f"ComplexInput: ligand coords {lig.shape} do not match "
                f"{self.ligand_graph.n_atoms} graph atoms")
        if not np.all(np.isfinite(lig)):
            raise ContractViolation("ComplexInput: non-finite ligand coordinates")
        if not (0.0 <= self.t <= 1.0):
            raise ContractViolation(f"ComplexInput: t {self.t} outside [0, 1]")
        object.__setattr__(self, "receptor_coords", rec)
        object.__setattr__(self, "ligand_coords", lig)


def sinusoidal_time_embedding(t: float, dim: int) -> np.ndarray:
    """Fixed sin/cos features of the scalar diffusion time.

    Frequencies span 1..~32 cycles over [0, 1]: fine enough to separate
    adjacent sampler steps, low enough that features stay O(0.1) away from
    their zero crossings for generic t.
    """
    freqs = 2.0 * np.pi * np.logspace(0.0, 1.5, dim // 2)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def truncate_receptor(receptor_coords: np.ndarray, ligand_coords: np.ndarray,
                      pocket_radius: float) -> np.ndarray:
    """Indices of receptor atoms near the ligand (pocket), ascending.

    Falls back to the closest KNN_FALLBACK_COUNT atoms when no receptor atom
    lies within the radius.
    """
    rec = np.asarray(receptor_coords, dtype=np.float64)
    lig = np.asarray(ligand_coords, dtype=np.float64)
    d2 = np.sum((rec[:, None, :] - lig[None, :, :]) ** 2, axis=2)
    min_d = np.sqrt(d2.min(axis=1))
    keep = np.flatnonzero(min_d <= pocket_radius)
    if keep.size == 0:
        order = np.lexsort((np.arange(rec.shape[0]), min_d))
        keep = np.sort(order[:KNN_FALLBACK_COUNT])
    return keep


def build_knn_graph(positions: np.ndarray, n_ligand: int, k: int
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """knn edges into each ligand atom from the whole complex.

    positions holds ligand atoms first (rows 0..n_ligand) then receptor.
    Returns (dst, src, edge_type); ties in distance break on source index.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n_total = pos.shape[0]
    dst_rows, src_rows, types = [], [], []
    for i in range(n_ligand):
        d = np.sqrt(np.sum((pos - pos[i]) ** 2, axis=1))
        d[i] = np.inf
        order = np.lexsort((np.arange(n_total), d))
        take = order[:min(k, n_total - 1)]
        dst_rows.append(np.full(take.size, i))
        src_rows.append(take)
        types.append(np.where(take < n_ligand, EDGE_LIGAND_LIGAND,
                              EDGE_PROTEIN_LIGAND))
    return (np.concatenate(dst_rows), np.concatenate(src_rows),
            np.concatenate(types))


def in_cycle_flags(graph: ChemGraph) -> np.ndarray:
    """1.0 for atoms in the 2-core (any ring), found by leaf pruning."""
    degree = np.zeros(graph.n_atoms, dtype=np.int64)
    adj = graph.neighbor_lists()
    for i, nbrs in enumerate(adj):
        degree[i] = len(set(nbrs))
    alive = np.ones(graph.n_atoms, dtype=bool)
    queue = [i for i in range(graph.n_atoms) if degree[i] <= 1]
    while queue:
        i = queue.pop()
        if not alive[i]:
            continue
        alive[i] = False
        for j in set(adj[i]):
            if alive[j]:
                degree[j] -= 1
                if degree[j] <= 1:
                    queue.append(j)
    return alive.astype(np.float64)


def _node_features(complex_input: ComplexInput) -> np.ndarray:
    graph = complex_input.ligand_graph
    n_lig = graph.n_atoms
    n_rec = complex_input.receptor_coords.shape[0]
    feats = np.zeros((n_lig + n_rec, NODE_FEATURE_DIM))
    cycle = in_cycle_flags(graph)
    for i, atom in enumerate(graph.atoms):
        feats[i, ELEMENT_INDEX[atom.element]] = 1.0
        feats[i, N_ELEMENTS] = 1.0
        feats[i, N_ELEMENTS + 1] = cycle[i]
    for r, element in enumerate(complex_input.receptor_elements):
        feats[n_lig + r, ELEMENT_INDEX[element]] = 1.0
        feats[n_lig + r, N_ELEMENTS + 1] = 1.0 if complex_input.receptor_backbone[r] else 0.0
    return feats


# -- parameters -------------------------------------------------------------------

def _mlp_shapes(d_in: int, d_hidden: int, d_out: int):
    return ((d_in, d_hidden), (1, d_hidden), (d_hidden, d_out), (1, d_out))


def _denoiser_shape_table(config: DenoiserConfig) -> dict[str, tuple[int, int]]:
    h, t = config.hidden_dim, config.time_embed_dim
    table: dict[str, tuple[int, int]] = {
        "embed.node.weight": (NODE_FEATURE_DIM, h),
        "embed.node.bias": (1, h),
        "embed.bond.weight": (N_BOND_KINDS, h),
        "embed.bond.bias": (1, h),
    }
    d = N_DIST_FEATS
    per_layer = {
        "phi_k": _mlp_shapes(2 * h + d + 2 + t, h, h),
        "bond_feat": _mlp_shapes(d + h + t, h, h),
        "phi_c": _mlp_shapes(2 * h + h + t, h, h),
        "phi_h": _mlp_shapes(h + t, h, h),
        "bond_upd": _mlp_shapes(3 * h + 2 * h + t, h, h),
        "psi_k": _mlp_shapes(2 * h + d + t, h, 1),
        "psi_c": _mlp_shapes(2 * h + d + h + t, h, 1),
    }
    suffixes = ("w1", "b1", "w2", "b2")
    for layer in range(config.n_layers):
        for name, shapes in per_layer.items():
            for suffix, shape in zip(suffixes, shapes):
                table[f"layer{layer}.{name}.{suffix}"] = shape
    return table


def init_denoiser_params(config: DenoiserConfig, rng: np.random.Generator,
                         scale: float = 1.0) -> dict[str, Tensor]:
    """Gaussian fan-scaled init; `scale` multiplies every output-layer weight."""
    params: dict[str, Tensor] = {}
    for name, shape in _denoiser_shape_table(config).items():
        if name.endswith(("b1", "b2", "bias")):
            data = np.zeros(shape)
        else:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
            if name.endswith("w2"):
                data *= scale
        params[name] = Tensor(data, requires_grad=True)
    return params


def _mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = eng.add(eng.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    h = eng.silu(h)
    return eng.add(eng.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


# -- forward ----------------------------------------------------------------------

@dataclass
class _Wiring:
    """Integer index plumbing shared by every layer of one forward pass."""

    knn_dst: np.ndarray
    knn_src: np.ndarray
    knn_type_onehot: np.ndarray
    chem_dst: np.ndarray
    chem_src: np.ndarray
    chem_bond: np.ndarray          # undirected bond row per directed chem edge
    path_bond: np.ndarray          # bond row receiving each path message
    path_a: np.ndarray             # far endpoint of the receiving bond
    path_b: np.ndarray             # shared endpoint
    path_k: np.ndarray             # far endpoint of the traversed second bond
    path_other: np.ndarray         # bond row of the traversed second bond
    bond_kind_onehot: np.ndarray
    bond_i: np.ndarray
    bond_j: np.ndarray


def _build_wiring(complex_input: ComplexInput, positions: np.ndarray,
                  k: int) -> _Wiring:
    graph = complex_input.ligand_graph
    n_lig = graph.n_atoms
    knn_dst, knn_src, knn_type = build_knn_graph(positions, n_lig, k)
    type_onehot = np.zeros((knn_dst.size, 2))
    type_onehot[np.arange(knn_dst.size), knn_type] = 1.0

    bonds = sorted({b.key: b for b in graph.bonds}.values(), key=lambda b: b.key)
    bond_row = {b.key: m for m, b in enumerate(bonds)}
    kind_onehot = np.zeros((len(bonds), N_BOND_KINDS))
    kind_index = {"1": 0, "2": 1, "ar": 2}
    for m, b in enumerate(bonds):
        kind_onehot[m, kind_index[b.order.value]] = 1.0
    bond_i = np.array([b.key[0] for b in bonds], dtype=np.int64)
    bond_j = np.array([b.key[1] for b in bonds], dtype=np.int64)

    adj: dict[int, list[int]] = {i: [] for i in range(n_lig)}
    for b in bonds:
        adj[b.key[0]].append(b.key[1])
        adj[b.key[1]].append(b.key[0])

    chem_dst, chem_src, chem_bond = [], [], []
    for b in bonds:
        i, j = b.key
        chem_dst += [i, j]
        chem_src += [j, i]
        chem_bond += [bond_row[b.key], bond_row[b.key]]

    path_bond, path_a, path_b, path_k, path_other = [], [], [], [], []
    for b in bonds:
        m = bond_row[b.key]
        for a_end, b_end in ((b.key[0], b.key[1]), (b.key[1], b.key[0])):
            for far in adj[b_end]:
                if far == a_end:
                    continue
                path_bond.append(m)
                path_a.append(a_end)
                path_b.append(b_end)
                path_k.append(far)
                key = (b_end, far) if b_end < far else (far, b_end)
                path_other.append(bond_row[key])

    as_idx = lambda seq: np.asarray(seq, dtype=np.int64)
    return _Wiring(knn_dst=knn_dst, knn_src=knn_src, knn_type_onehot=type_onehot,
                   chem_dst=as_idx(chem_dst), chem_src=as_idx(chem_src),
                   chem_bond=as_idx(chem_bond), path_bond=as_idx(path_bond),
                   path_a=as_idx(path_a), path_b=as_idx(path_b),
                   path_k=as_idx(path_k), path_other=as_idx(path_other),
                   bond_kind_onehot=kind_onehot, bond_i=bond_i, bond_j=bond_j)


def _edge_distance(x: Tensor, dst: np.ndarray, src: np.ndarray) -> Tensor:
    return eng.l2_norm(eng.sub(eng.gather_rows(x, src), eng.gather_rows(x, dst)))


def _dist_feats(d: Tensor) -> Tensor:
    """Distance columns the MLPs actually see: soft bins plus 1/(1+d).

    Each bin is a rational bump 1/(1 + ((d - c)/w)^2). Together they resolve
    bonded-range geometry finely while staying bounded, so separations far
    outside the binned range all look alike to the MLPs instead of driving
    their inputs off scale.
    """
    centered = eng.sub(d, Tensor(RBF_CENTERS[None, :]))
    scaled = eng.mul(centered, 1.0 / RBF_WIDTH)
    bins = eng.div(1.0, eng.add(eng.mul(scaled, scaled), 1.0))
    return eng.concat([bins, eng.div(1.0, eng.add(d, 1.0))], axis=1)


def _bound_step(delta: Tensor) -> Tensor:
    """Rescale each row by M / sqrt(M^2 + |row|^2): smooth, bounded below M.

    The constant column keeps the norm argument positive, so the whole bound
    stays differentiable; a hard clip would put the scale factor off the tape.
    """
    n_rows = delta.data.shape[0]
    aug = eng.concat([delta, Tensor(np.full((n_rows, 1), MAX_STEP_ANGSTROM))],
                     axis=1)
    return eng.div(eng.mul(delta, MAX_STEP_ANGSTROM), eng.l2_norm(aug))


def forward(params: dict[str, Tensor], config: DenoiserConfig,
            complex_input: ComplexInput) -> tuple[Tensor, Tensor]:
    """Predict clean ligand coordinates; also return ligand hidden states."""
    graph = complex_input.ligand_graph
    n_lig = graph.n_atoms
    keep = truncate_receptor(complex_input.receptor_coords,
                             complex_input.ligand_coords, config.pocket_radius)
    rec_coords = complex_input.receptor_coords[keep]
    trimmed = ComplexInput(
        receptor_coords=rec_coords,
        receptor_elements=tuple(complex_input.receptor_elements[r] for r in keep),
        receptor_backbone=np.asarray(complex_input.receptor_backbone)[keep],
        ligand_graph=graph, ligand_coords=complex_input.ligand_coords,
        t=complex_input.t)

    positions0 = np.vstack([trimmed.ligand_coords, rec_coords])
    wiring = _build_wiring(trimmed, positions0, config.k_neighbors)
    n_bonds = wiring.bond_i.size

    feats = Tensor(_node_features(trimmed))
    hidden_all = _mlp_embed(params, feats)
    hidden_lig = eng.gather_rows(hidden_all, np.arange(n_lig))
    hidden_rec = eng.gather_rows(hidden_all, np.arange(n_lig, positions0.shape[0]))

    bond_state = eng.add(eng.matmul(Tensor(wiring.bond_kind_onehot),
                                    params["embed.bond.weight"]),
                         params["embed.bond.bias"]) if n_bonds else None

    temb = sinusoidal_time_embedding(complex_input.t, config.time_embed_dim)
    x_lig = Tensor(trimmed.ligand_coords)
    x_rec = Tensor(rec_coords)

    def t_rows(n: int) -> Tensor:
        return Tensor(np.tile(temb, (n, 1)))

    for layer in range(config.n_layers):
        try:
            prefix = f"layer{layer}"
            x_all = eng.concat([x_lig, x_rec], axis=0)
            h_all = eng.concat([hidden_lig, hidden_rec], axis=0)

            # knn messages into ligand atoms
            d_knn = _dist_feats(_edge_distance(x_all, wiring.knn_dst,
                                               wiring.knn_src))
            knn_in = eng.concat([
                eng.gather_rows(h_all, wiring.knn_dst),
                eng.gather_rows(h_all, wiring.knn_src),
                d_knn, Tensor(wiring.knn_type_onehot), t_rows(d_knn.data.shape[0]),
            ], axis=1)
            msg_knn = _mlp(params, f"{prefix}.phi_k", knn_in)
            delta_k = eng.segment_sum(msg_knn, wiring.knn_dst, n_lig)

            if n_bonds:
                # bond features from current geometry + bond state
                d_bond = _dist_feats(_edge_distance(x_lig, wiring.bond_i,
                                                    wiring.bond_j))
                feat_in = eng.concat([d_bond, bond_state, t_rows(n_bonds)], axis=1)
                e_bond = _mlp(params, f"{prefix}.bond_feat", feat_in)

                chem_in = eng.concat([
                    eng.gather_rows(hidden_lig, wiring.chem_dst),
                    eng.gather_rows(hidden_lig, wiring.chem_src),
                    eng.gather_rows(e_bond, wiring.chem_bond),
                    t_rows(wiring.chem_dst.size),
                ], axis=1)
                msg_chem = _mlp(params, f"{prefix}.phi_c", chem_in)
                delta_c = eng.segment_sum(msg_chem, wiring.chem_dst, n_lig)
                combined = eng.add(delta_k, delta_c)
            else:
                combined = delta_k

            node_in = eng.concat([combined, t_rows(n_lig)], axis=1)
            new_hidden = eng.add(hidden_lig, _mlp(params, f"{prefix}.phi_h", node_in))

            if n_bonds and wiring.path_bond.size:
                upd_in = eng.concat([
                    eng.gather_rows(new_hidden, wiring.path_a),
                    eng.gather_rows(new_hidden, wiring.path_b),
                    eng.gather_rows(new_hidden, wiring.path_k),
                    eng.gather_rows(e_bond, wiring.path_bond),
                    eng.gather_rows(e_bond, wiring.path_other),
                    t_rows(wiring.path_bond.size),
                ], axis=1)
                bond_state = eng.segment_sum(_mlp(params, f"{prefix}.bond_upd", upd_in),
                                             wiring.path_bond, n_bonds)

            hidden_lig = new_hidden
            h_all = eng.concat([hidden_lig, hidden_rec], axis=0)

            # position updates, ligand only
            d_knn2 = _dist_feats(_edge_distance(x_all, wiring.knn_dst,
                                                wiring.knn_src))
            psi_k_in = eng.concat([
                eng.gather_rows(h_all, wiring.knn_dst),
                eng.gather_rows(h_all, wiring.knn_src),
                d_knn2, t_rows(d_knn2.data.shape[0]),
            ], axis=1)
            gate_k = _mlp(params, f"{prefix}.psi_k", psi_k_in)
            rel_k = eng.sub(eng.gather_rows(x_all, wiring.knn_src),
                            eng.gather_rows(x_all, wiring.knn_dst))
            delta_x = eng.segment_sum(eng.mul(rel_k, gate_k), wiring.knn_dst, n_lig)

            if n_bonds:
                d_chem = _dist_feats(_edge_distance(x_lig, wiring.chem_dst,
                                                    wiring.chem_src))
                psi_c_in = eng.concat([
                    eng.gather_rows(hidden_lig, wiring.chem_dst),
                    eng.gather_rows(hidden_lig, wiring.chem_src),
                    d_chem,
                    eng.gather_rows(e_bond, wiring.chem_bond),
                    t_rows(wiring.chem_dst.size),
                ], axis=1)
                gate_c = _mlp(params, f"{prefix}.psi_c", psi_c_in)
                rel_c = eng.sub(eng.gather_rows(x_lig, wiring.chem_src),
                                eng.gather_rows(x_lig, wiring.chem_dst))
                delta_x = eng.add(delta_x, eng.segment_sum(eng.mul(rel_c, gate_c),
                                                           wiring.chem_dst, n_lig))

            x_lig = eng.add(x_lig, _bound_step(delta_x))
        except NumericError as exc:
            raise NumericError(f"denoiser layer {layer}: {exc}") from exc

    return x_lig, hidden_lig


def _mlp_embed(params: dict[str, Tensor], feats: Tensor) -> Tensor:
    return eng.add(eng.matmul(feats, params["embed.node.weight"]),
                   params["embed.node.bias"])


def recon_loss(params: dict[str, Tensor], config: DenoiserConfig,
               complex_input: ComplexInput, x0: np.ndarray) -> Tensor:
    """Mean squared coordinate error of the denoised ligand."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != complex_input.ligand_coords.shape:
        raise ContractViolation(f"recon_loss: x0 shape {x0.shape} does not match "
                                f"ligand {complex_input.ligand_coords.shape}")
    x0_hat, _ = forward(params, config, complex_input)
    diff = eng.sub(x0_hat, Tensor(x0))
    return eng.mean(eng.mul(diff, diff))

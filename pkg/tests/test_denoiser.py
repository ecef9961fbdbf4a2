import numpy as np
import pytest

from cyclopep.chem import Atom, Bond, ChemGraph, Element
from cyclopep.cyclization import CyclizationType, assemble, make_spec
from cyclopep.denoiser import (ComplexInput, DenoiserConfig, build_knn_graph,
                               forward, in_cycle_flags, init_denoiser_params,
                               recon_loss, sinusoidal_time_embedding,
                               truncate_receptor)
from cyclopep.engine import Tensor, finite_difference_check
from cyclopep.errors import ContractViolation, NumericError

SMALL = DenoiserConfig(k_neighbors=4, n_layers=2, hidden_dim=16, time_embed_dim=4)


def _chain_ligand(n):
    atoms = tuple(Atom(Element.C, f"C{i}", 0) for i in range(n))
    bonds = tuple(Bond(i, i + 1) for i in range(n - 1))
    return ChemGraph(atoms=atoms, bonds=bonds, residue_types=("UNK",))


def _make_complex(seed=0, n_rec=30, t=0.4, graph=None):
    rng = np.random.default_rng(seed)
    if graph is None:
        spec = make_spec(CyclizationType.HEAD_TO_TAIL, 5)
        graph = assemble(["GLY", "ALA", "GLY", "SER", "GLY"], spec)
    lig = rng.normal(size=(graph.n_atoms, 3)) * 2.0
    rec = rng.normal(size=(n_rec, 3)) * 3.0 + np.array([6.0, 0.0, 0.0])
    elements = tuple(rng.choice([Element.C, Element.N, Element.O])
                     for _ in range(n_rec))
    backbone = rng.random(n_rec) < 0.5
    return ComplexInput(receptor_coords=rec, receptor_elements=elements,
                        receptor_backbone=backbone, ligand_graph=graph,
                        ligand_coords=lig, t=t)


def _random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.1, np.pi)
    k_mat = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * k_mat + (1 - np.cos(ang)) * (k_mat @ k_mat)


# -- config and plumbing ----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ContractViolation):
        DenoiserConfig(k_neighbors=0)
    with pytest.raises(ContractViolation):
        DenoiserConfig(n_layers=-1)
    with pytest.raises(ContractViolation):
        DenoiserConfig(pocket_radius=0.0)
    with pytest.raises(ContractViolation):
        DenoiserConfig(time_embed_dim=5)


def test_complex_input_guards():
    ci = _make_complex()
    with pytest.raises(ContractViolation):
        ComplexInput(receptor_coords=np.zeros((0, 3)), receptor_elements=(),
                     receptor_backbone=np.zeros(0, bool),
                     ligand_graph=ci.ligand_graph,
                     ligand_coords=ci.ligand_coords, t=0.5)
    bad = ci.ligand_coords.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ContractViolation):
        ComplexInput(receptor_coords=ci.receptor_coords,
                     receptor_elements=ci.receptor_elements,
                     receptor_backbone=ci.receptor_backbone,
                     ligand_graph=ci.ligand_graph, ligand_coords=bad, t=0.5)
    with pytest.raises(ContractViolation):
        ComplexInput(receptor_coords=ci.receptor_coords,
                     receptor_elements=ci.receptor_elements,
                     receptor_backbone=ci.receptor_backbone,
                     ligand_graph=ci.ligand_graph,
                     ligand_coords=ci.ligand_coords, t=1.5)


def test_time_embedding_basic():
    emb = sinusoidal_time_embedding(0.0, 8)
    assert emb.shape == (8,)
    assert np.allclose(emb[:4], 0.0)
    assert np.allclose(emb[4:], 1.0)
    assert not np.allclose(sinusoidal_time_embedding(0.3, 8),
                           sinusoidal_time_embedding(0.31, 8))


def test_truncate_receptor_radius_and_fallback():
    lig = np.zeros((2, 3))
    rec = np.array([[1.0, 0, 0], [5.0, 0, 0], [30.0, 0, 0]])
    assert truncate_receptor(rec, lig, 10.0).tolist() == [0, 1]
    # nothing in range: fall back to the nearest batch
    far = np.stack([np.array([100.0 + i, 0.0, 0.0]) for i in range(600)])
    keep = truncate_receptor(far, lig, 10.0)
    assert keep.size == 500
    assert keep.tolist() == list(range(500))


def test_knn_capped_and_nearest():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
    dst, src, types = build_knn_graph(pos, n_ligand=2, k=3)
    assert np.sum(dst == 0) == 2 and np.sum(dst == 1) == 2
    dst, src, types = build_knn_graph(pos, n_ligand=2, k=1)
    assert src[dst == 0].tolist() == [1]
    assert src[dst == 1].tolist() == [0]
    assert set(types.tolist()) <= {0, 1}


def test_knn_tie_breaks_on_index():
    pos = np.array([[0.0, 0, 0], [2.0, 0, 0], [-2.0, 0, 0]])
    dst, src, _ = build_knn_graph(pos, n_ligand=3, k=1)
    assert src[dst == 0].tolist() == [1]  # equidistant; lower index wins


def test_knn_brute_force_oracle():
    rng = np.random.default_rng(123)
    for trial in range(100):
        n_lig = int(rng.integers(2, 8))
        n_rec = int(rng.integers(0, 12))
        k = int(rng.integers(1, 6))
        pos = rng.normal(size=(n_lig + n_rec, 3)) * 3.0
        dst, src, types = build_knn_graph(pos, n_lig, k)
        for i in range(n_lig):
            d = np.sqrt(np.sum((pos - pos[i]) ** 2, axis=1))
            d[i] = np.inf
            want = np.lexsort((np.arange(len(d)), d))[:min(k, len(d) - 1)]
            got = src[dst == i]
            assert got.tolist() == want.tolist(), trial
            for s, ty in zip(got, types[dst == i]):
                assert ty == (0 if s < n_lig else 1)


def test_in_cycle_flags():
    spec = make_spec(CyclizationType.HEAD_TO_TAIL, 5)
    graph = assemble(["GLY"] * 5, spec)
    flags = in_cycle_flags(graph)
    for i, atom in enumerate(graph.atoms):
        in_ring = atom.atom_name in ("N", "CA", "C")
        assert flags[i] == (1.0 if in_ring else 0.0), atom
    lin = make_spec(CyclizationType.LINEAR, 5)
    graph = assemble(["GLY", "PRO", "GLY", "GLY", "GLY"], lin)
    flags = in_cycle_flags(graph)
    ring_atoms = {(1, "N"), (1, "CA"), (1, "CB"), (1, "CG"), (1, "CD")}
    for i, atom in enumerate(graph.atoms):
        want = 1.0 if (atom.residue_index, atom.atom_name) in ring_atoms else 0.0
        assert flags[i] == want, atom


# -- forward ----------------------------------------------------------------------

def test_forward_shapes_and_determinism():
    ci = _make_complex(seed=1)
    params = init_denoiser_params(SMALL, np.random.default_rng(2))
    xa, ha = forward(params, SMALL, ci)
    xb, hb = forward(params, SMALL, ci)
    n = ci.ligand_graph.n_atoms
    assert xa.data.shape == (n, 3)
    assert ha.data.shape == (n, SMALL.hidden_dim)
    assert np.array_equal(xa.data, xb.data)
    assert np.array_equal(ha.data, hb.data)
    assert not np.array_equal(xa.data, ci.ligand_coords)  # positions moved


def test_receptor_untouched():
    ci = _make_complex(seed=3)
    before = ci.receptor_coords.copy()
    params = init_denoiser_params(SMALL, np.random.default_rng(4))
    forward(params, SMALL, ci)
    assert np.array_equal(ci.receptor_coords, before)


def test_equivariance_rigid_motions():
    ci = _make_complex(seed=5)
    params = init_denoiser_params(SMALL, np.random.default_rng(6))
    x_base, h_base = forward(params, SMALL, ci)
    rng = np.random.default_rng(7)
    for _ in range(10):
        rot = _random_rotation(rng)
        shift = rng.normal(size=3) * 5.0
        moved = ComplexInput(
            receptor_coords=ci.receptor_coords @ rot.T + shift,
            receptor_elements=ci.receptor_elements,
            receptor_backbone=ci.receptor_backbone,
            ligand_graph=ci.ligand_graph,
            ligand_coords=ci.ligand_coords @ rot.T + shift, t=ci.t)
        x_mov, h_mov = forward(params, SMALL, moved)
        assert np.max(np.abs(x_mov.data - (x_base.data @ rot.T + shift))) < 1e-8
        assert np.max(np.abs(h_mov.data - h_base.data)) < 1e-8


def test_zero_position_nets_identity():
    ci = _make_complex(seed=8)
    params = init_denoiser_params(SMALL, np.random.default_rng(9))
    for name, p in params.items():
        if ".psi_" in name and (name.endswith("w2") or name.endswith("b2")):
            p.data[...] = 0.0
    x0_hat, _ = forward(params, SMALL, ci)
    assert np.array_equal(x0_hat.data, ci.ligand_coords)


def test_permutation_equivariance():
    ci = _make_complex(seed=10)
    graph = ci.ligand_graph
    n = graph.n_atoms
    rng = np.random.default_rng(11)
    perm = rng.permutation(n)  # new_index[old] = perm position
    new_of_old = np.empty(n, dtype=int)
    new_of_old[perm] = np.arange(n)
    atoms = [None] * n
    for old, atom in enumerate(graph.atoms):
        atoms[new_of_old[old]] = atom
    bonds = tuple(Bond(int(new_of_old[b.i]), int(new_of_old[b.j]), b.order)
                  for b in graph.bonds)
    permuted_graph = ChemGraph(atoms=tuple(atoms), bonds=bonds,
                               residue_types=graph.residue_types)
    permuted = ComplexInput(receptor_coords=ci.receptor_coords,
                            receptor_elements=ci.receptor_elements,
                            receptor_backbone=ci.receptor_backbone,
                            ligand_graph=permuted_graph,
                            ligand_coords=ci.ligand_coords[perm], t=ci.t)
    params = init_denoiser_params(SMALL, np.random.default_rng(12))
    x_base, h_base = forward(params, SMALL, ci)
    x_perm, h_perm = forward(params, SMALL, permuted)
    assert np.max(np.abs(x_perm.data - x_base.data[perm])) < 1e-10
    assert np.max(np.abs(h_perm.data - h_base.data[perm])) < 1e-10


def test_locality_one_layer():
    graph = _chain_ligand(8)
    lig = np.zeros((8, 3))
    lig[:, 0] = np.arange(8) * 2.0
    rec = np.array([[14.0, 1.0, 0.0], [14.0, -1.0, 0.0], [15.0, 0.0, 0.0]])
    cfg = DenoiserConfig(k_neighbors=1, n_layers=1, hidden_dim=8,
                         time_embed_dim=4, pocket_radius=10.0)
    params = init_denoiser_params(cfg, np.random.default_rng(13))

    def run(coords):
        ci = ComplexInput(receptor_coords=rec,
                          receptor_elements=(Element.C, Element.N, Element.O),
                          receptor_backbone=np.array([True, True, False]),
                          ligand_graph=graph, ligand_coords=coords, t=0.3)
        return forward(params, cfg, ci)[0].data

    base = run(lig)
    moved = lig.copy()
    moved[7, 0] += 0.01  # knn topology unchanged
    shifted = run(moved)
    # one layer reaches at most two hops; atoms 0..3 sit farther than that
    assert np.array_equal(shifted[:4], base[:4])
    assert not np.array_equal(shifted[6:], base[6:])


def test_step_clipping_bounds_displacement():
    ci = _make_complex(seed=14)
    params = init_denoiser_params(SMALL, np.random.default_rng(15), scale=200.0)
    x0_hat, _ = forward(params, SMALL, ci)
    moved = np.linalg.norm(x0_hat.data - ci.ligand_coords, axis=1)
    assert np.max(moved) <= SMALL.n_layers * 10.0 + 1e-9


def test_nonfinite_param_names_layer():
    ci = _make_complex(seed=16)
    params = init_denoiser_params(SMALL, np.random.default_rng(17))
    params["layer0.phi_k.w2"].data[0, 0] = np.inf
    with pytest.raises(NumericError, match="layer 0"):
        forward(params, SMALL, ci)


# -- loss -------------------------------------------------------------------------

def test_recon_loss_zero_and_nonnegative():
    ci = _make_complex(seed=18)
    params = init_denoiser_params(SMALL, np.random.default_rng(19))
    for name, p in params.items():
        if ".psi_" in name and (name.endswith("w2") or name.endswith("b2")):
            p.data[...] = 0.0
    assert recon_loss(params, SMALL, ci, ci.ligand_coords).item() == 0.0
    params = init_denoiser_params(SMALL, np.random.default_rng(20))
    x0 = np.random.default_rng(21).normal(size=ci.ligand_coords.shape)
    assert recon_loss(params, SMALL, ci, x0).item() >= 0.0
    with pytest.raises(ContractViolation):
        recon_loss(params, SMALL, ci, np.zeros((2, 3)))


def test_recon_loss_gradcheck_subset():
    graph = _chain_ligand(4)
    rng = np.random.default_rng(22)
    lig = rng.normal(size=(4, 3))
    rec = rng.normal(size=(3, 3)) + np.array([4.0, 0, 0])
    ci = ComplexInput(receptor_coords=rec,
                      receptor_elements=(Element.C, Element.O, Element.N),
                      receptor_backbone=np.array([True, False, True]),
                      ligand_graph=graph, ligand_coords=lig, t=0.35)
    cfg = DenoiserConfig(k_neighbors=3, n_layers=1, hidden_dim=8, time_embed_dim=4)
    params = init_denoiser_params(cfg, np.random.default_rng(23))
    x0 = rng.normal(size=(4, 3))
    subset = {name: params[name] for name in (
        "embed.node.weight", "embed.bond.weight", "layer0.phi_k.w1",
        "layer0.bond_feat.w2", "layer0.phi_c.b1", "layer0.phi_h.w2",
        "layer0.psi_k.w2", "layer0.psi_c.w1", "layer0.bond_upd.w2")}
    err = finite_difference_check(lambda: recon_loss(params, cfg, ci, x0),
                                  subset, epsilon=1e-5)
    assert err < 1e-5

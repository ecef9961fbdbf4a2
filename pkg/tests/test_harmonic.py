import numpy as np
import pytest

from cyclopep.chem import Atom, Bond, ChemGraph, Element
from cyclopep.errors import ContractViolation
from cyclopep.harmonic import (BetaSchedule, DEFAULT_SCHEDULE, align_time,
                               build_operator, denoise_renoise_step, em_forward,
                               identity_operator, kernel_log_density, kernel_moments,
                               operator_from_laplacian, perturb, pocket_center,
                               sample_prior, score, sigma_from_pocket)


def _chain_graph(n, element=Element.C):
    atoms = tuple(Atom(element, f"C{i}", 0) for i in range(n))
    bonds = tuple(Bond(i, i + 1) for i in range(n - 1))
    return ChemGraph(atoms=atoms, bonds=bonds, residue_types=("UNK",))


def _ring_graph(n):
    atoms = tuple(Atom(Element.C, f"C{i}", 0) for i in range(n))
    bonds = tuple(Bond(i, (i + 1) % n) for i in range(n))
    return ChemGraph(atoms=atoms, bonds=bonds, residue_types=("UNK",))


def _path3(sigma_p=1.0):
    return build_operator(_chain_graph(3), sigma_p)


# -- schedule -------------------------------------------------------------------

def test_schedule_endpoint_values():
    s = BetaSchedule()
    assert s.beta(0.0) == pytest.approx(0.01)
    assert s.beta(1.0) == pytest.approx(3.0)
    assert s.int_beta(1.0) == pytest.approx(1.505)
    assert s.int_beta(0.5) == pytest.approx(0.37875)
    assert s.alpha(0.0) == 1.0
    assert s.alpha(1.0) == pytest.approx(0.47118711127528673, rel=1e-12)


def test_schedule_guards():
    s = BetaSchedule()
    for t in (-0.1, 1.0001):
        with pytest.raises(ContractViolation):
            s.beta(t)
        with pytest.raises(ContractViolation):
            s.alpha(t)
    with pytest.raises(ContractViolation):
        BetaSchedule(beta_min=0.5, beta_max=0.2)
    with pytest.raises(ContractViolation):
        BetaSchedule(beta_min=0.0, beta_max=1.0)


def test_alpha_strictly_decreasing():
    s = BetaSchedule()
    ts = np.linspace(0.0, 1.0, 101)
    alphas = [s.alpha(t) for t in ts]
    assert all(a > b for a, b in zip(alphas, alphas[1:]))


# -- operator construction --------------------------------------------------------

def test_path3_eigenvalues():
    op = _path3()
    assert np.allclose(op.eigvals, [1.0, 2.0, 4.0], atol=1e-12)
    assert op.matrix[0, 0] == pytest.approx(2.0)  # degree 1 + sigma^-2 1


def test_single_atom_operator():
    op = build_operator(_chain_graph(1), sigma_p=2.0)
    assert op.matrix.shape == (1, 1)
    assert op.matrix[0, 0] == pytest.approx(0.25)
    assert np.allclose(op.eigvals, [0.25])
    assert np.allclose(np.abs(op.eigvecs), [[1.0]])


def test_random_tree_reconstruction():
    rng = np.random.default_rng(42)
    for _ in range(10):
        n = 30
        bonds = tuple(Bond(int(rng.integers(0, i)), i) for i in range(1, n))
        atoms = tuple(Atom(Element.C, f"C{i}", 0) for i in range(n))
        graph = ChemGraph(atoms=atoms, bonds=bonds, residue_types=("UNK",))
        op = build_operator(graph, sigma_p=1.5)
        recon = op.eigvecs @ np.diag(op.eigvals) @ op.eigvecs.T
        assert np.max(np.abs(recon - op.matrix)) < 1e-9
        assert np.max(np.abs(op.eigvecs.T @ op.eigvecs - np.eye(n))) < 1e-10
        assert np.all(np.diff(op.eigvals) >= -1e-12)
        assert op.eigvals[0] >= 1.5 ** -2 - 1e-9
        # deterministic sign: first nonzero entry of each mode positive
        for k in range(n):
            col = op.eigvecs[:, k]
            nz = np.flatnonzero(np.abs(col) > 1e-12)
            assert col[nz[0]] > 0


def test_operator_guards():
    atoms = (Atom(Element.C, "C0", 0), Atom(Element.C, "C1", 0))
    disconnected = ChemGraph(atoms=atoms, bonds=(), residue_types=("UNK",))
    with pytest.raises(ContractViolation):
        build_operator(disconnected, 1.0)
    with pytest.raises(ContractViolation):
        build_operator(_chain_graph(3), sigma_p=0.0)
    with pytest.raises(ContractViolation):
        operator_from_laplacian(np.zeros((2, 3)), 1.0)


def test_operator_arrays_read_only():
    op = _path3()
    with pytest.raises(ValueError):
        op.eigvals[0] = 9.0


def test_identity_operator_is_isotropic():
    op = identity_operator(4, sigma_p=1.0)
    assert np.allclose(op.matrix, np.eye(4))
    assert np.allclose(op.eigvals, np.ones(4))


# -- pocket frame -----------------------------------------------------------------

def test_pocket_center_and_sigma():
    coords = np.array([[3.0, 0, 0], [-3.0, 0, 0]])
    assert np.allclose(pocket_center(coords), [0, 0, 0])
    assert sigma_from_pocket(coords) == pytest.approx(3.0)
    assert sigma_from_pocket(coords * 0.1) == 1.0     # clamped up
    assert sigma_from_pocket(coords * 10.0) == 20.0   # clamped down
    shifted = coords + np.array([5.0, -2.0, 1.0])
    assert np.allclose(pocket_center(shifted), [5.0, -2.0, 1.0])
    assert sigma_from_pocket(shifted) == pytest.approx(3.0)
    with pytest.raises(ContractViolation):
        pocket_center(np.zeros((0, 3)))


# -- prior and kernel -------------------------------------------------------------

def test_prior_moments_ring():
    op = build_operator(_ring_graph(12), sigma_p=1.0)
    rng = np.random.default_rng(1)
    center = np.array([2.0, -1.0, 0.5])
    draws = np.stack([sample_prior(op, rng, center) for _ in range(20000)])
    assert np.max(np.abs(draws.mean(axis=0) - center)) < 0.03
    z = np.einsum("ij,pjk->pik", op.eigvecs.T, draws - center)
    mode_var = z.var(axis=(0, 2))
    assert np.max(np.abs(mode_var * op.eigvals - 1.0)) < 0.06
    # bonded pairs sit closer than graph-diametral pairs in expectation
    d2_bond = np.mean(np.sum((draws[:, 0] - draws[:, 1]) ** 2, axis=1))
    d2_far = np.mean(np.sum((draws[:, 0] - draws[:, 6]) ** 2, axis=1))
    assert d2_bond < d2_far


def test_prior_single_atom_large_sigma():
    op = identity_operator(1, sigma_p=5.0)
    rng = np.random.default_rng(2)
    draws = np.stack([sample_prior(op, rng) for _ in range(20000)])
    assert draws.var(axis=0).mean() == pytest.approx(25.0, rel=0.05)


def test_perturb_moments_path3():
    op = _path3()
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(3, 3))
    t = 0.5
    draws = np.stack([perturb(op, x0, t, rng) for _ in range(20000)])
    alpha = DEFAULT_SCHEDULE.alpha(t)
    assert np.max(np.abs(draws.mean(axis=0) - alpha * x0)) < 0.02
    z = np.einsum("ij,pjk->pik", op.eigvecs.T, draws - alpha * x0)
    mode_var = z.var(axis=(0, 2))
    expect = (1.0 - alpha ** 2) / op.eigvals
    assert np.max(np.abs(mode_var / expect - 1.0)) < 0.05


def test_perturb_small_t_returns_x0():
    op = _path3()
    x0 = np.arange(9.0).reshape(3, 3)
    out = perturb(op, x0, 1e-9, np.random.default_rng(0))
    assert np.max(np.abs(out - x0)) < 1e-4


def test_perturb_guards():
    op = _path3()
    x0 = np.zeros((3, 3))
    rng = np.random.default_rng(0)
    for t in (0.0, -0.5, 1.5):
        with pytest.raises(ContractViolation):
            perturb(op, x0, t, rng)
    with pytest.raises(ContractViolation):
        perturb(op, x0, 0.5)  # no rng, no pinned noise


def test_kernel_moments_monotone():
    op = _path3()
    ts = np.linspace(0.01, 1.0, 50)
    prev = None
    for t in ts:
        m = kernel_moments(op, t)
        assert np.all(m.eigen_variances >= 0)
        if prev is not None:
            assert np.all(m.eigen_variances >= prev - 1e-15)
        prev = m.eigen_variances
    assert kernel_moments(op, 1.0).alpha_t == pytest.approx(0.47118711127528673)


# -- score ------------------------------------------------------------------------

def test_score_zero_at_kernel_mean():
    op = _path3()
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 3))
    alpha = DEFAULT_SCHEDULE.alpha(0.3)
    assert np.allclose(score(op, alpha * x0, x0, 0.3), 0.0, atol=1e-12)


def test_score_matches_numeric_gradient():
    op = _path3()
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 3))
    x_t = rng.normal(size=(3, 3))
    t = 0.6
    got = score(op, x_t, x0, t)
    eps = 1e-5
    num = np.zeros_like(x_t)
    for i in range(3):
        for d in range(3):
            hi = x_t.copy()
            lo = x_t.copy()
            hi[i, d] += eps
            lo[i, d] -= eps
            num[i, d] = (kernel_log_density(op, hi, x0, t)
                         - kernel_log_density(op, lo, x0, t)) / (2 * eps)
    assert np.max(np.abs(got - num)) < 1e-6


def test_score_isotropic_reduction():
    op = identity_operator(4, sigma_p=1.0)
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(4, 3))
    x_t = rng.normal(size=(4, 3))
    t = 0.4
    alpha = DEFAULT_SCHEDULE.alpha(t)
    expect = -(x_t - alpha * x0) / (1.0 - alpha ** 2)
    assert np.allclose(score(op, x_t, x0, t), expect, atol=1e-12)


def test_score_zero_mean_over_kernel():
    op = _path3()
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(3, 3))
    t = 0.5
    n = 20000
    draws = np.stack([score(op, perturb(op, x0, t, rng), x0, t) for _ in range(n)])
    # per-mode score variance is lambda/(1-alpha^2); bound mean by 3.5 SE
    alpha = DEFAULT_SCHEDULE.alpha(t)
    sd = np.sqrt(op.eigvals.max() / (1 - alpha ** 2))
    assert np.max(np.abs(draws.mean(axis=0))) < 3.5 * sd / np.sqrt(n)


def test_score_t0_rejected():
    op = _path3()
    with pytest.raises(ContractViolation):
        score(op, np.zeros((3, 3)), np.zeros((3, 3)), 0.0)


def test_rotation_commutes():
    op = build_operator(_chain_graph(5), sigma_p=1.3)
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(5, 3))
    noise = rng.standard_normal((5, 3))
    # Rodrigues rotation about a random axis
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = 1.1
    k_mat = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(ang) * k_mat + (1 - np.cos(ang)) * (k_mat @ k_mat)
    t = 0.7
    a = perturb(op, x0 @ rot.T, t, noise=noise @ rot.T)
    b = perturb(op, x0, t, noise=noise) @ rot.T
    assert np.max(np.abs(a - b)) < 1e-12
    x_t = perturb(op, x0, t, noise=noise)
    sa = score(op, x_t @ rot.T, x0 @ rot.T, t)
    sb = score(op, x_t, x0, t) @ rot.T
    assert np.max(np.abs(sa - sb)) < 1e-12


# -- integration ------------------------------------------------------------------

def test_em_forward_matches_kernel():
    op = _path3()
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(3, 3)) * 2.0
    traj = em_forward(op, x0, 400, rng, n_paths=4000, record_times=(0.5, 1.0))
    for k, t in enumerate((0.5, 1.0)):
        m = kernel_moments(op, t)
        states = traj.states[k]
        assert np.max(np.abs(states.mean(axis=0) - m.alpha_t * x0)) < 0.05, t
        z = np.einsum("ij,pjk->pik", op.eigvecs.T, states - m.alpha_t * x0)
        mode_var = z.var(axis=(0, 2))
        assert np.max(np.abs(mode_var / m.eigen_variances - 1.0)) < 0.10, t


def test_em_forward_degenerate_schedule_constant():
    op = _path3()
    sched = BetaSchedule(beta_min=1e-12, beta_max=2e-12)
    x0 = np.arange(9.0).reshape(3, 3)
    traj = em_forward(op, x0, 100, np.random.default_rng(10), schedule=sched)
    assert traj.states.shape == (101, 1, 3, 3)
    assert np.max(np.abs(traj.states - x0)) < 1e-5


def test_em_forward_weak_order_one():
    # mean bias should roughly halve when dt halves
    op = identity_operator(1, sigma_p=1.0)
    x0 = np.array([[50.0, 0.0, 0.0]])
    target = DEFAULT_SCHEDULE.alpha(1.0) * 50.0
    biases = []
    for steps, seed in ((100, 11), (200, 12)):
        traj = em_forward(op, x0, steps, np.random.default_rng(seed),
                          n_paths=100000, record_times=(1.0,))
        biases.append(abs(traj.states[0, :, 0, 0].mean() - target))
    ratio = biases[0] / biases[1]
    assert 1.5 < ratio < 2.6, (biases, ratio)


def test_em_forward_guards():
    op = _path3()
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        em_forward(op, np.zeros((3, 3)), 50, rng)
    with pytest.raises(ContractViolation):
        em_forward(op, np.zeros((3, 3)), 100, rng, record_times=(0.333,))


def test_denoise_renoise_step():
    op = _path3()
    rng = np.random.default_rng(13)
    x0_hat = rng.normal(size=(3, 3))
    x_t = rng.normal(size=(3, 3))
    # dt = t collapses to the clean prediction exactly
    out = denoise_renoise_step(op, x_t, x0_hat, 0.5, 0.5, rng)
    assert np.array_equal(out, x0_hat)
    with pytest.raises(ContractViolation):
        denoise_renoise_step(op, x_t, x0_hat, 0.5, 0.6, rng)
    with pytest.raises(ContractViolation):
        denoise_renoise_step(op, x_t, x0_hat, 0.5, 0.0, rng)
    # statistics match the kernel at t - dt
    t, dt = 0.8, 0.3
    draws = np.stack([denoise_renoise_step(op, x_t, x0_hat, t, dt, rng)
                      for _ in range(8000)])
    m = kernel_moments(op, t - dt)
    assert np.max(np.abs(draws.mean(axis=0) - m.alpha_t * x0_hat)) < 0.04
    z = np.einsum("ij,pjk->pik", op.eigvecs.T, draws - m.alpha_t * x0_hat)
    assert np.max(np.abs(z.var(axis=(0, 2)) / m.eigen_variances - 1.0)) < 0.10


def test_denoise_renoise_chain_with_perfect_oracle():
    op = _path3()
    rng = np.random.default_rng(14)
    x0 = rng.normal(size=(3, 3))
    n = 50
    x = sample_prior(op, rng)
    grid = np.linspace(1.0, 0.0, n + 1)
    for t, t_next in zip(grid, grid[1:]):
        x = denoise_renoise_step(op, x, x0, t, t - t_next, rng)
    assert np.array_equal(x, x0)


def test_align_time_identity_consumes_no_rng():
    op = build_operator(_chain_graph(6), sigma_p=1.0)
    rng = np.random.default_rng(15)
    coords = rng.normal(size=(6, 3))
    cache = rng.normal(size=(6, 3))
    times = np.full(6, 0.5)
    before = rng.bit_generator.state
    out = align_time(op, coords, cache, times, 0.5, rng)
    assert np.array_equal(out, coords)
    assert rng.bit_generator.state == before


def test_align_time_full_overwrite_equals_perturb():
    op = build_operator(_chain_graph(6), sigma_p=1.0)
    coords = np.random.default_rng(16).normal(size=(6, 3))
    cache = np.random.default_rng(17).normal(size=(6, 3))
    times = np.full(6, 0.9)
    got = align_time(op, coords, cache, times, 0.4, np.random.default_rng(99))
    want = perturb(op, cache, 0.4, np.random.default_rng(99))
    assert np.array_equal(got, want)


def test_align_time_mixed():
    op = build_operator(_chain_graph(6), sigma_p=1.0)
    rng = np.random.default_rng(18)
    cache = rng.normal(size=(6, 3))
    target = 0.5
    times = np.array([0.5, 0.9, 0.5, 0.9, 0.5, 0.9])
    fresh = perturb(op, cache, target, rng)
    outs = np.stack([align_time(op, fresh, cache, times, target, rng)
                     for _ in range(8000)])
    # up-to-date rows untouched
    assert np.array_equal(outs[:, [0, 2, 4]],
                          np.broadcast_to(fresh[[0, 2, 4]], (8000, 3, 3)))
    # stale rows follow the kernel marginals
    m = kernel_moments(op, target)
    marg_var = np.diag(op.eigvecs @ np.diag(m.eigen_variances) @ op.eigvecs.T)
    stale = [1, 3, 5]
    got_mean = outs[:, stale].mean(axis=0)
    assert np.max(np.abs(got_mean - m.alpha_t * cache[stale])) < 0.05
    got_var = outs[:, stale].var(axis=0).mean(axis=1)
    assert np.max(np.abs(got_var / marg_var[stale] - 1.0)) < 0.12


def test_align_time_guards():
    op = build_operator(_chain_graph(3), sigma_p=1.0)
    rng = np.random.default_rng(19)
    coords = np.zeros((3, 3))
    with pytest.raises(ContractViolation):
        align_time(op, coords, coords, np.array([0.4, 0.6, 0.6]), 0.5, rng)
    with pytest.raises(ContractViolation):
        align_time(op, coords, coords, np.array([0.6, 0.6]), 0.5, rng)

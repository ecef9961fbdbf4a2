"""Verification battery shared by `cyclopep check` and the acceptance tests.

Each check returns a CheckResult with the measured values, its bound, and the
elapsed time, so callers can render machine-readable PASS/FAIL lines. Sizes
default to acceptance scale; run_battery shrinks them (and relaxes the purely
statistical bounds to match the smaller sample counts) for a quick smoke pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .chem import (ATOM37_NAMES, Atom, Bond, ChemGraph, Element, build_layout,
                   validate_graph)
from .cyclization import (CyclizationType, make_spec, subgraph)
from .data_io import gen_synthetic_dataset
from .denoiser import (ComplexInput, DenoiserConfig, forward,
                       init_denoiser_params, recon_loss)
from . import engine as eng
from .engine import OptimizerState, adamw_step, finite_difference_check, zero_grads
from .harmonic import (HarmonicOperator, build_operator, em_forward,
                       kernel_log_density, kernel_moments,
                       operator_from_laplacian, perturb, pocket_center,
                       sample_prior, score, sigma_from_pocket)
from .metrics import validity_report
from .router import (RouterBatchItem, accuracy, init_router_params, predict,
                     router_loss)
from .sampler import (fixed_sequence_route_fn, init_state, make_denoise_fn,
                      make_op_builder, make_route_fn, run, step)

ALL_CTYPES = (CyclizationType.HEAD_TO_TAIL, CyclizationType.HEAD_TO_SIDE,
              CyclizationType.SIDE_TO_TAIL, CyclizationType.SIDE_TO_SIDE,
              CyclizationType.LINEAR)

# independent copy of the heavy-atom vocabulary, frozen here as the oracle
CANONICAL_37 = (
    "N", "CA", "C", "CB", "O", "CG", "CG1", "CG2", "OG", "OG1", "SG", "CD",
    "CD1", "CD2", "ND1", "ND2", "OD1", "OD2", "SD", "CE", "CE1", "CE2", "CE3",
    "NE", "NE1", "NE2", "OE1", "OE2", "CH2", "NH1", "NH2", "OH", "CZ", "CZ2",
    "CZ3", "NZ", "OXT",
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    details: str
    bound: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name} {self.details} "
                f"bound[{self.bound}] elapsed={self.seconds:.1f}s")


def _result(name: str, passed: bool, details: str, bound: str,
            t0: float) -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), details=details,
                       bound=bound, seconds=time.perf_counter() - t0)


def _path_operator(n: int, sigma_p: float = 1.0) -> HarmonicOperator:
    lap = np.zeros((n, n))
    for i in range(n - 1):
        lap[i, i] += 1.0
        lap[i + 1, i + 1] += 1.0
        lap[i, i + 1] -= 1.0
        lap[i + 1, i] -= 1.0
    return operator_from_laplacian(lap, sigma_p)


def _ring_operator(n: int, sigma_p: float = 1.0) -> HarmonicOperator:
    lap = np.zeros((n, n))
    for i in range(n):
        j = (i + 1) % n
        lap[i, i] += 1.0
        lap[j, j] += 1.0
        lap[i, j] -= 1.0
        lap[j, i] -= 1.0
    return operator_from_laplacian(lap, sigma_p)


# -- 1: forward SDE agrees with the closed-form kernel ---------------------------

def check_kernel_consistency(n_steps: int = 2000, n_paths: int = 20000,
                             times: tuple[float, ...] = (0.25, 0.5, 1.0),
                             mean_tol: float = 0.02, cov_tol: float = 0.05,
                             time_cap: float = 120.0,
                             seed: int = 101) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_mean = 0.0
    worst_cov = 0.0
    for op in (_path_operator(3), _ring_operator(12)):
        x0 = rng.normal(size=(op.n_atoms, 3)) * 2.0
        traj = em_forward(op, x0, n_steps, rng, n_paths=n_paths,
                          record_times=times)
        for k, t in enumerate(times):
            moments = kernel_moments(op, t)
            states = traj.states[k]
            resid = states - moments.alpha_t * x0
            worst_mean = max(worst_mean,
                             float(np.max(np.abs(resid.mean(axis=0)))))
            samples = resid.transpose(0, 2, 1).reshape(-1, op.n_atoms)
            emp = samples.T @ samples / samples.shape[0]
            want = (op.eigvecs * moments.eigen_variances) @ op.eigvecs.T
            rel = float(np.max(np.abs(emp - want)) / np.max(np.abs(want)))
            worst_cov = max(worst_cov, rel)
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= mean_tol and worst_cov <= cov_tol and elapsed <= time_cap
    return _result("kernel_consistency", ok,
                   f"steps={n_steps} paths={n_paths} mean_err={worst_mean:.5f} "
                   f"cov_rel_err={worst_cov:.5f}",
                   f"mean<={mean_tol} cov<={cov_tol} time<={time_cap:.0f}s", t0)


# -- 2: stationary prior moments -----------------------------------------------------

def check_prior_moments(n_draws: int = 50000, var_tol: float = 0.05,
                        mean_tol: float = 0.02,
                        seed: int = 102) -> CheckResult:
    t0 = time.perf_counter()
    op = _ring_operator(12)
    rng = np.random.default_rng(seed)
    center = np.array([1.0, -2.0, 0.5])
    draws = np.empty((n_draws, 12, 3))
    for k in range(n_draws):
        draws[k] = sample_prior(op, rng, center=center)
    centered = draws - center
    z = np.einsum("ij,kjl->kil", op.eigvecs.T, centered)
    mode_var = z.var(axis=(0, 2))
    var_err = float(np.max(np.abs(mode_var * op.eigvals - 1.0)))
    mean_err = float(np.max(np.abs(centered.mean(axis=0))))
    bonded = float(np.mean(np.sum((centered[:, 0] - centered[:, 1]) ** 2,
                                  axis=1)))
    distant = float(np.mean(np.sum((centered[:, 0] - centered[:, 6]) ** 2,
                                   axis=1)))
    ok = var_err <= var_tol and mean_err <= mean_tol and bonded < distant
    return _result("prior_moments", ok,
                   f"draws={n_draws} var_rel_err={var_err:.5f} "
                   f"mean_err={mean_err:.5f} bonded_sq={bonded:.3f} "
                   f"distant_sq={distant:.3f}",
                   f"var<={var_tol} mean<={mean_tol} bonded<distant", t0)


# -- 3: analytic score equals the density gradient -------------------------------------

def check_score_gradient(tol: float = 1e-6, seed: int = 103) -> CheckResult:
    t0 = time.perf_counter()
    op = _path_operator(3)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 3)) * 2.0
    x_t = perturb(op, x0, 0.6, rng)
    analytic = score(op, x_t, x0, 0.6)
    numeric = np.zeros_like(x_t)
    eps = 1e-5
    for i in range(3):
        for j in range(3):
            bumped = x_t.copy()
            bumped[i, j] += eps
            hi = kernel_log_density(op, bumped, x0, 0.6)
            bumped[i, j] -= 2.0 * eps
            lo = kernel_log_density(op, bumped, x0, 0.6)
            numeric[i, j] = (hi - lo) / (2.0 * eps)
    err = float(np.max(np.abs(analytic - numeric)))
    return _result("score_gradient", err <= tol,
                   f"max_abs_err={err:.2e}", f"<={tol}", t0)


# -- 4: rigid-motion equivariance / invariance ---------------------------------------

def _rigid_motions(n: int, rng: np.random.Generator):
    for _ in range(n):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0.0:
            q[:, 0] = -q[:, 0]
        yield q, rng.normal(size=3) * 5.0


def check_equivariance(n_motions: int = 100, tol: float = 1e-8,
                       seed: int = 104) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    record = gen_synthetic_dataset(1, seed,
                                   ctype=CyclizationType.SIDE_TO_TAIL,
                                   n_residues=5)[0]
    dconf = DenoiserConfig(k_neighbors=4, n_layers=1, hidden_dim=16,
                           time_embed_dim=4)
    den = init_denoiser_params(dconf, rng)
    rtr = init_router_params(dconf, rng)
    coords = record.ligand_coords + rng.normal(size=record.ligand_coords.shape)
    stripped, keep = subgraph(record.ligand_graph, record.spec)
    keep = list(keep)

    def complex_at(rec_xyz, graph, lig_xyz):
        return ComplexInput(receptor_coords=rec_xyz,
                            receptor_elements=record.receptor.elements,
                            receptor_backbone=record.receptor.backbone,
                            ligand_graph=graph, ligand_coords=lig_xyz, t=0.35)

    def den_fwd(rec_xyz, lig_xyz):
        ci = complex_at(rec_xyz, record.ligand_graph, lig_xyz)
        return forward(den, dconf, ci)[0].data

    base_out = den_fwd(record.receptor.coords, coords)
    base_logits = predict(rtr, dconf, complex_at(record.receptor.coords,
                                                 stripped, coords[keep])).data
    worst_equi = 0.0
    worst_inv = 0.0
    for rot, shift in _rigid_motions(n_motions, rng):
        rec_m = record.receptor.coords @ rot.T + shift
        lig_m = coords @ rot.T + shift
        moved = den_fwd(rec_m, lig_m)
        worst_equi = max(worst_equi, float(np.max(np.abs(
            moved - (base_out @ rot.T + shift)))))
        logits = predict(rtr, dconf,
                         complex_at(rec_m, stripped, lig_m[keep])).data
        worst_inv = max(worst_inv, float(np.max(np.abs(logits - base_logits))))
    ok = worst_equi <= tol and worst_inv <= tol
    return _result("equivariance", ok,
                   f"motions={n_motions} coord_dev={worst_equi:.2e} "
                   f"logit_dev={worst_inv:.2e}", f"<={tol}", t0)


# -- 5: autodiff agrees with finite differences ----------------------------------------

def check_finite_difference(tol: float = 1e-5, seed: int = 105) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    atoms = tuple(Atom(element=Element.C, atom_name=f"C{i}", residue_index=0)
                  for i in range(6))
    bonds = tuple(Bond(i, i + 1) for i in range(5))
    graph = ChemGraph(atoms=atoms, bonds=bonds, residue_types=("UNK",))
    dconf = DenoiserConfig(k_neighbors=3, n_layers=1, hidden_dim=16,
                           time_embed_dim=4)
    params = init_denoiser_params(dconf, rng)
    x0 = rng.normal(size=(6, 3)) * 1.5
    ci = ComplexInput(receptor_coords=rng.normal(size=(8, 3)) * 3.0 + 4.0,
                      receptor_elements=tuple([Element.C] * 8),
                      receptor_backbone=np.zeros(8, dtype=bool),
                      ligand_graph=graph,
                      ligand_coords=x0 + rng.normal(size=(6, 3)) * 0.4,
                      t=0.37)
    err = finite_difference_check(lambda: recon_loss(params, dconf, ci, x0),
                                  params)
    return _result("finite_difference", err <= tol,
                   f"max_rel_err={err:.2e}", f"<={tol}", t0)


# -- 6 and 8 share one desk-scale training run ------------------------------------------

@dataclass(frozen=True)
class OverfitArtifacts:
    record: object
    dconf: DenoiserConfig
    den_params: dict
    rtr_params: dict
    den_losses: np.ndarray
    rtr_losses: np.ndarray
    eval_before: float
    eval_after: float
    loss_ratio: float
    router_accuracy: float
    seconds: float


def _train_grid(n_times: int, seed: int, shape: tuple[int, ...]):
    """Deterministic (draw_t, label_t, eigen-noise) triples for the overfit batch.

    Two example families, all frozen before training starts. Ladder rungs
    (geometric from 0.003 to 0.9, spread 1) cover the small-t end densely,
    because sampling drives the denoiser at ever smaller times and uniform
    spacing leaves it extrapolating there. Inflated-spread examples (same
    per-time mean, noise scaled a few times wider) cover the ball around
    that tube where the sampler's own imperfect trajectories actually live;
    without them any drift off the tube compounds instead of contracting.
    """
    noise_rng = np.random.default_rng(np.random.SeedSequence((seed, 7777)))
    pairs = [(float(t), 1.0) for t in np.geomspace(0.003, 0.9, n_times)]
    pairs += [(0.5, 3.0), (0.3, 3.0), (0.3, 4.0), (0.2, 4.0),
              (0.12, 5.0), (0.12, 6.0), (0.06, 6.0), (0.02, 8.0)]
    return [(t, spread, noise_rng.standard_normal(shape))
            for t, spread in pairs]


def train_overfit(train_steps: int = 2000, hidden_dim: int = 32,
                  n_layers: int = 2, k_neighbors: int = 8, t_batch: int = 8,
                  router_batch: int = 4, time_embed_dim: int = 2,
                  seed: int = 106) -> OverfitArtifacts:
    """Overfit both networks on one synthetic complex; shared by checks 6 and 8.

    The denoiser memorizes a fixed batch of noisy snapshots of the complex:
    t_batch stratified times, one frozen noise draw each. Every optimizer step
    minimizes the mean batch loss, and the reported ratio compares that loss at
    the first step against a fresh evaluation after the last.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    record = gen_synthetic_dataset(1, seed, ctype=CyclizationType.SIDE_TO_SIDE,
                                   n_residues=8)[0]
    dconf = DenoiserConfig(k_neighbors=k_neighbors, n_layers=n_layers,
                           hidden_dim=hidden_dim, time_embed_dim=time_embed_dim)
    center = pocket_center(record.receptor.coords)
    sigma = sigma_from_pocket(record.receptor.coords)
    op = build_operator(record.ligand_graph, sigma)
    x0 = record.ligand_coords

    def complex_at(coords, t):
        return ComplexInput(receptor_coords=record.receptor.coords,
                            receptor_elements=record.receptor.elements,
                            receptor_backbone=record.receptor.backbone,
                            ligand_graph=record.ligand_graph,
                            ligand_coords=coords, t=t)

    train_batch = [
        complex_at(perturb(op, x0 - center, t, noise=spread * z) + center, t)
        for t, spread, z in _train_grid(t_batch, seed, x0.shape)]

    def batch_loss(params):
        terms = [recon_loss(params, dconf, ci, x0) for ci in train_batch]
        loss = terms[0]
        for term in terms[1:]:
            loss = eng.add(loss, term)
        return eng.mul(loss, 1.0 / len(train_batch))

    den_params = init_denoiser_params(dconf, rng)
    opt = OptimizerState()  # lr 1e-4, betas 0.9/0.999, weight decay 0.01
    den_losses = np.empty(train_steps)
    for k in range(train_steps):
        loss = batch_loss(den_params)
        den_losses[k] = float(loss.data)
        zero_grads(den_params)
        loss.backward()
        adamw_step(opt, den_params)
    eval_before = float(den_losses[0])
    eval_after = float(batch_loss(den_params).data)

    rtr_params = init_router_params(dconf, rng)
    rtr_opt = OptimizerState()
    item = RouterBatchItem(complex_input=complex_at(x0, 0.0),
                           spec=record.spec, operator=op, center=center)
    batch = [item] * router_batch
    rtr_losses = np.empty(train_steps)
    for k in range(train_steps):
        loss = router_loss(rtr_params, dconf, batch, den_params, dconf, rng)
        rtr_losses[k] = float(loss.data)
        zero_grads(rtr_params)
        loss.backward()
        adamw_step(rtr_opt, rtr_params)

    stripped, keep = subgraph(record.ligand_graph, record.spec)
    keep = list(keep)
    hits = []
    for k in range(10):
        t_eval = 0.05
        x_t = perturb(op, x0 - center, t_eval,
                      np.random.default_rng((seed, k))) + center
        x0_hat = forward(den_params, dconf, complex_at(x_t, t_eval))[0].data
        sub = ComplexInput(receptor_coords=record.receptor.coords,
                           receptor_elements=record.receptor.elements,
                           receptor_backbone=record.receptor.backbone,
                           ligand_graph=stripped,
                           ligand_coords=x0_hat[keep], t=t_eval)
        logits = predict(rtr_params, dconf, sub).data
        hits.append(accuracy(logits, record.ligand_graph.residue_types,
                             record.spec))
    return OverfitArtifacts(record=record, dconf=dconf, den_params=den_params,
                            rtr_params=rtr_params, den_losses=den_losses,
                            rtr_losses=rtr_losses, eval_before=eval_before,
                            eval_after=eval_after,
                            loss_ratio=float(eval_before / eval_after),
                            router_accuracy=float(np.mean(hits)),
                            seconds=time.perf_counter() - t0)


def check_training(artifacts: OverfitArtifacts, ratio_bound: float = 100.0,
                   accuracy_bound: float = 1.0,
                   time_cap: float = 900.0) -> CheckResult:
    t0 = time.perf_counter() - artifacts.seconds
    ok = (artifacts.loss_ratio >= ratio_bound
          and artifacts.router_accuracy >= accuracy_bound
          and artifacts.seconds <= time_cap)
    return _result("training_overfit", ok,
                   f"steps={len(artifacts.den_losses)} "
                   f"loss_before={artifacts.eval_before:.3f} "
                   f"loss_after={artifacts.eval_after:.5f} "
                   f"loss_ratio={artifacts.loss_ratio:.1f} "
                   f"router_accuracy={artifacts.router_accuracy:.3f}",
                   f"ratio>={ratio_bound} accuracy>={accuracy_bound} "
                   f"time<={time_cap:.0f}s", t0)


# -- 7: routed-sampling invariants --------------------------------------------------

def check_sampling_invariants(n_steps: int = 1000,
                              lengths: tuple[int, ...] = (8, 12),
                              time_cap: float = 600.0,
                              seed: int = 107) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    receptor = gen_synthetic_dataset(1, seed)[0].receptor
    dconf = DenoiserConfig(k_neighbors=3, n_layers=1, hidden_dim=8,
                           time_embed_dim=2)
    den_params = init_denoiser_params(dconf, rng)
    rtr_params = init_router_params(dconf, rng)
    denoise_fn = make_denoise_fn(den_params, dconf, receptor)
    route_inner = make_route_fn(rtr_params, dconf, receptor)
    sigma = sigma_from_pocket(receptor.coords)
    problems: list[str] = []
    n_combos = 0

    def one_pass(spec, run_seed):
        router_times: list[float] = []

        def probe(stripped, coords, t, spec_, rng_):
            router_times.append(t)
            return route_inner(stripped, coords, t, spec_, rng_)

        loop_rng = np.random.default_rng(run_seed)
        state = init_state(spec, receptor, loop_rng)
        builder = make_op_builder(sigma)
        grid = np.linspace(1.0, 0.0, n_steps + 1)
        grid[-1] = 1e-4
        closing = spec.closing_bond
        for idx in range(n_steps):
            step(state, denoise_fn, probe, builder,
                 state.t - grid[idx + 1], loop_rng)
            if not validate_graph(state.graph).ok:
                problems.append(f"{spec.ctype.value} n={spec.n_residues} "
                                f"step {idx}: invalid graph")
            for pos, code in spec.anchors:
                if state.sequence[pos] != code:
                    problems.append(f"{spec.ctype.value} n={spec.n_residues} "
                                    f"step {idx}: anchor {pos} lost")
            if closing is not None:
                have = {(a.residue_index, a.atom_name)
                        for a in state.graph.atoms}
                if ((closing.a.residue, closing.a.name) not in have
                        or (closing.b.residue, closing.b.name) not in have):
                    problems.append(f"{spec.ctype.value} n={spec.n_residues} "
                                    f"step {idx}: closing atoms missing")
        if router_times and max(router_times) > 0.5 + 1e-12:
            problems.append(f"{spec.ctype.value} n={spec.n_residues}: router "
                            f"invoked at t={max(router_times):.4f}")
        return state

    for ctype in ALL_CTYPES:
        for n_res in lengths:
            n_combos += 1
            spec = make_spec(ctype, n_res)
            tag = int.from_bytes(ctype.value.encode(), "big")
            run_seed = int(np.random.SeedSequence(
                (seed, tag, n_res)).generate_state(1)[0])
            first = one_pass(spec, run_seed)
            second = one_pass(spec, run_seed)
            if (first.sequence != second.sequence
                    or not np.array_equal(first.slots, second.slots)
                    or not np.array_equal(first.cyc, second.cyc)):
                problems.append(f"{ctype.value} n={n_res}: "
                                f"not bitwise reproducible")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed <= time_cap
    detail = f"combos={n_combos} steps={n_steps} issues={len(problems)}"
    if problems:
        detail += " first_issue[" + problems[0] + "]"
    return _result("sampling_invariants", ok, detail,
                   f"issues=0 time<={time_cap:.0f}s", t0)


# -- 8: structural sanity of overfit-sampled structures ------------------------------

def check_structural_sanity(artifacts: OverfitArtifacts, n_runs: int = 20,
                            n_steps: int = 120, frac_bound: float = 0.9,
                            closure_bound: float = 0.5,
                            seed: int = 108) -> CheckResult:
    t0 = time.perf_counter()
    record = artifacts.record
    denoise_fn = make_denoise_fn(artifacts.den_params, artifacts.dconf,
                                 record.receptor)
    route_fn = make_route_fn(artifacts.rtr_params, artifacts.dconf,
                             record.receptor)
    within = 0
    total = 0
    closures = 0
    for k in range(n_runs):
        run_seed = int(np.random.SeedSequence((seed, k)).generate_state(1)[0])
        result = run(record.spec, record.receptor, denoise_fn, route_fn,
                     n_steps=n_steps, seed=run_seed)
        report = validity_report(result.coords, result.graph)
        within += sum(1 for b in report.bonds if b.deviation <= 0.25)
        total += len(report.bonds)
        closures += bool(report.closure_ok)
    frac = within / total
    closure_rate = closures / n_runs
    ok = frac >= frac_bound and closure_rate >= closure_bound
    return _result("structural_sanity", ok,
                   f"runs={n_runs} bond_frac={frac:.3f} "
                   f"ss_closure_rate={closure_rate:.2f}",
                   f"frac>={frac_bound} closure>={closure_bound}", t0)


# -- 9: fixed-width layout and atom vocabulary ----------------------------------------

def check_layout() -> CheckResult:
    t0 = time.perf_counter()
    layout = build_layout()
    ok = layout.width == 73 and ATOM37_NAMES == CANONICAL_37
    return _result("layout", ok,
                   f"atom73_width={layout.width} atom37_len={len(ATOM37_NAMES)}",
                   "width=73 names=canonical37", t0)


# -- 10: oracle denoiser collapses sampling onto its target ----------------------------

def check_mock_collapse(tol: float = 1e-9, n_steps: int = 50,
                        seed: int = 109) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for ctype in ALL_CTYPES:
        n_res = 8 if ctype is CyclizationType.SIDE_TO_SIDE else 5
        record = gen_synthetic_dataset(1, seed, ctype=ctype,
                                       n_residues=n_res)[0]
        x_star = record.ligand_coords
        truth = record.ligand_graph.residue_types

        def oracle(graph, coords, t):
            if graph.residue_types == truth:
                return x_star.copy()
            return coords.copy()

        result = run(record.spec, record.receptor, oracle,
                     fixed_sequence_route_fn(truth), n_steps=n_steps, seed=3)
        worst = max(worst, float(np.max(np.abs(result.coords - x_star))))
    return _result("mock_collapse", worst <= tol,
                   f"ctypes=5 max_dev={worst:.2e}", f"<={tol}", t0)


# -- the battery -------------------------------------------------------------------

def run_battery(full: bool = False) -> list[str]:
    """All checks in criterion order; quick sizes unless `full`."""
    results: list[CheckResult] = []
    if full:
        results.append(check_kernel_consistency())
        results.append(check_prior_moments())
        results.append(check_score_gradient())
        results.append(check_equivariance())
        results.append(check_finite_difference())
        artifacts = train_overfit()
        results.append(check_training(artifacts))
        results.append(check_sampling_invariants())
        results.append(check_structural_sanity(artifacts))
        results.append(check_layout())
        results.append(check_mock_collapse())
    else:
        results.append(check_kernel_consistency(n_steps=400, n_paths=4000,
                                                mean_tol=0.05, cov_tol=0.10,
                                                time_cap=60.0))
        results.append(check_prior_moments(n_draws=8000, var_tol=0.10,
                                           mean_tol=0.05))
        results.append(check_score_gradient())
        results.append(check_equivariance(n_motions=10))
        results.append(check_finite_difference())
        artifacts = train_overfit(train_steps=300, hidden_dim=16, n_layers=1)
        results.append(check_training(artifacts, ratio_bound=3.0,
                                      accuracy_bound=0.5, time_cap=300.0))
        results.append(check_sampling_invariants(n_steps=60, lengths=(8,),
                                                 time_cap=120.0))
        results.append(check_structural_sanity(artifacts, n_runs=4,
                                               n_steps=60, frac_bound=0.5,
                                               closure_bound=0.25))
        results.append(check_layout())
        results.append(check_mock_collapse(n_steps=30))
    return [r.line() for r in results]

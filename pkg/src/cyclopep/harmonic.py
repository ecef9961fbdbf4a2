"""Graph-conditioned harmonic VP diffusion.

The ligand bond graph's Laplacian L defines a quadratic energy; the operator
H = L + sigma_p^-2 I is positive definite, so the prior N(center, H^-1) ties
bonded atoms together while sigma_p spreads the free translation mode across
the pocket. The perturbation kernel, score, prior draws and Euler-Maruyama
integration all work per spatial column in the eigenbasis of H.

Moment conventions (per spatial dimension):
    prior   cov  H^-1
    kernel  x_t | x0 ~ N(alpha(t) x0, H^-1 (1 - alpha(t)^2))
    forward dx = -1/2 beta(t) x dt + sqrt(beta(t)) P diag(lambda^-1/2) dW
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chem import ChemGraph, graph_laplacian
from .errors import ContractViolation, NumericError

RECON_TOL = 1e-9      # max |P L P^T - H|
ORTHO_TOL = 1e-10     # max |P^T P - I|
SIGMA_P_MIN = 1.0     # Angstrom clamp for the pocket spread scale
SIGMA_P_MAX = 20.0


@dataclass(frozen=True)
class BetaSchedule:
    """Linear noise-rate schedule beta(t) = (beta_max-beta_min) t + beta_min."""

    beta_min: float = 0.01
    beta_max: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.beta_min < self.beta_max):
            raise ContractViolation(
                f"BetaSchedule: need 0 < beta_min < beta_max, "
                f"got ({self.beta_min}, {self.beta_max})")

    def _check_t(self, t: float) -> float:
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise ContractViolation(f"schedule time {t} outside [0, 1]")
        return t

    def beta(self, t: float) -> float:
        t = self._check_t(t)
        return (self.beta_max - self.beta_min) * t + self.beta_min

    def int_beta(self, t: float) -> float:
        t = self._check_t(t)
        return (self.beta_max - self.beta_min) * t * t / 2.0 + self.beta_min * t

    def alpha(self, t: float) -> float:
        return float(np.exp(-0.5 * self.int_beta(t)))


DEFAULT_SCHEDULE = BetaSchedule()


@dataclass(frozen=True)
class KernelMoments:
    """Mean scaling and per-eigenmode variance of the perturbation kernel."""

    alpha_t: float
    eigen_variances: np.ndarray  # (1 - alpha^2) / lambda, ascending-mode order


@dataclass(frozen=True)
class HarmonicOperator:
    n_atoms: int
    matrix: np.ndarray    # H, symmetric positive definite
    eigvecs: np.ndarray   # P, orthogonal, deterministic sign
    eigvals: np.ndarray   # ascending, all >= sigma_p^-2
    sigma_p: float

    def __post_init__(self):
        for arr in (self.matrix, self.eigvecs, self.eigvals):
            arr.setflags(write=False)

    def to_eigen(self, x: np.ndarray) -> np.ndarray:
        return self.eigvecs.T @ x

    def from_eigen(self, z: np.ndarray) -> np.ndarray:
        return self.eigvecs @ z


def _deterministic_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0.0:
            out[:, k] = -col
    return out


def operator_from_laplacian(lap: np.ndarray, sigma_p: float) -> HarmonicOperator:
    if sigma_p <= 0.0:
        raise ContractViolation(f"sigma_p must be positive, got {sigma_p}")
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ContractViolation(f"Laplacian must be square, got shape {lap.shape}")
    n = lap.shape[0]
    h = lap + (sigma_p ** -2) * np.eye(n)
    try:
        vals, vecs = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"eigendecomposition failed: {exc}\nH =\n"
            f"{np.array2string(h, precision=6, threshold=64)}") from exc
    vecs = _deterministic_signs(vecs)

    recon = float(np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - h)))
    ortho = float(np.max(np.abs(vecs.T @ vecs - np.eye(n))))
    if recon >= RECON_TOL or ortho >= ORTHO_TOL:
        raise NumericError(
            f"eigendecomposition residuals too large "
            f"(recon {recon:.3e}, ortho {ortho:.3e})\nH =\n"
            f"{np.array2string(h, precision=6, threshold=64)}")
    floor = sigma_p ** -2
    if vals[0] < floor - 1e-9 * max(1.0, floor):
        raise NumericError(f"smallest eigenvalue {vals[0]} below sigma_p^-2 {floor}")
    return HarmonicOperator(n_atoms=n, matrix=h, eigvecs=vecs,
                            eigvals=vals, sigma_p=float(sigma_p))


def build_operator(graph: ChemGraph, sigma_p: float) -> HarmonicOperator:
    """Operator for a ligand graph; the graph must be a single component."""
    lap = graph_laplacian(graph)
    if _ligand_components(graph) != 1:
        raise ContractViolation("build_operator: ligand graph is disconnected")
    return operator_from_laplacian(lap, sigma_p)


def identity_operator(n_atoms: int, sigma_p: float = 1.0) -> HarmonicOperator:
    """Graph-free operator (L = 0): reduces the SDE to the isotropic VP form."""
    return operator_from_laplacian(np.zeros((n_atoms, n_atoms)), sigma_p)


def _ligand_components(graph: ChemGraph) -> int:
    ligand = [i for i, a in enumerate(graph.atoms) if a.is_ligand]
    pos = {atom_i: k for k, atom_i in enumerate(ligand)}
    adj: list[list[int]] = [[] for _ in ligand]
    for b in graph.bonds:
        if b.i in pos and b.j in pos:
            adj[pos[b.i]].append(pos[b.j])
            adj[pos[b.j]].append(pos[b.i])
    seen = [False] * len(ligand)
    count = 0
    for start in range(len(ligand)):
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


# -- pocket frame ---------------------------------------------------------------

def pocket_center(pocket_coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(pocket_coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] == 0:
        raise ContractViolation(f"pocket coordinates must be nonempty Nx3, "
                                f"got shape {coords.shape}")
    return coords.mean(axis=0)


def sigma_from_pocket(pocket_coords: np.ndarray) -> float:
    """RMS distance of pocket atoms from their centroid, clamped to [1, 20] A."""
    coords = np.asarray(pocket_coords, dtype=np.float64)
    center = pocket_center(coords)
    rms = float(np.sqrt(np.mean(np.sum((coords - center) ** 2, axis=1))))
    return float(np.clip(rms, SIGMA_P_MIN, SIGMA_P_MAX))


# -- kernel, prior, score ---------------------------------------------------------

def kernel_moments(op: HarmonicOperator, t: float,
                   schedule: BetaSchedule = DEFAULT_SCHEDULE) -> KernelMoments:
    alpha = schedule.alpha(t)
    variances = (1.0 - alpha * alpha) / op.eigvals
    return KernelMoments(alpha_t=alpha, eigen_variances=variances)


def sample_prior(op: HarmonicOperator, rng: np.random.Generator,
                 center: np.ndarray | None = None) -> np.ndarray:
    """Draw N(center, H^-1) per spatial column."""
    z = rng.standard_normal((op.n_atoms, 3))
    x = op.from_eigen(z / np.sqrt(op.eigvals)[:, None])
    if center is not None:
        x = x + np.asarray(center, dtype=np.float64)
    return x


def _check_perturb_t(t: float) -> float:
    t = float(t)
    if not (0.0 < t <= 1.0):
        raise ContractViolation(f"kernel time {t} outside (0, 1]")
    return t


def perturb(op: HarmonicOperator, x0: np.ndarray, t: float,
            rng: np.random.Generator | None = None,
            noise: np.ndarray | None = None,
            schedule: BetaSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """One draw from the kernel at time t; `noise` pins the eigenbasis draw."""
    t = _check_perturb_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ContractViolation("perturb: need an rng when noise is not given")
        noise = rng.standard_normal(x0.shape)
    moments = kernel_moments(op, t, schedule)
    spread = np.sqrt(moments.eigen_variances)[:, None]
    return moments.alpha_t * x0 + op.from_eigen(spread * noise)


def score(op: HarmonicOperator, x_t: np.ndarray, x0_hat: np.ndarray, t: float,
          schedule: BetaSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Gradient of the log kernel density at x_t given predicted clean x0_hat."""
    t = float(t)
    if t == 0.0:
        raise ContractViolation("score: undefined at t = 0 (kernel variance zero)")
    t = _check_perturb_t(t)
    moments = kernel_moments(op, t, schedule)
    resid = np.asarray(x_t, np.float64) - moments.alpha_t * np.asarray(x0_hat, np.float64)
    z = op.to_eigen(resid)
    return -op.from_eigen(z / moments.eigen_variances[:, None])


def kernel_log_density(op: HarmonicOperator, x_t: np.ndarray, x0: np.ndarray,
                       t: float, schedule: BetaSchedule = DEFAULT_SCHEDULE) -> float:
    t = _check_perturb_t(t)
    moments = kernel_moments(op, t, schedule)
    resid = np.asarray(x_t, np.float64) - moments.alpha_t * np.asarray(x0, np.float64)
    z = op.to_eigen(resid)
    v = moments.eigen_variances[:, None]
    return float(-0.5 * np.sum(z * z / v) - 1.5 * np.sum(np.log(2.0 * np.pi * v)))


# -- integration ------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray   # (n_records,)
    states: np.ndarray  # (n_records, n_paths, N, 3)


def em_forward(op: HarmonicOperator, x0: np.ndarray, n_steps: int,
               rng: np.random.Generator, *, n_paths: int = 1,
               record_times: tuple[float, ...] | None = None,
               schedule: BetaSchedule = DEFAULT_SCHEDULE) -> Trajectory:
    """Euler-Maruyama integration of the forward SDE from t=0 to t=1.

    Snapshots are taken on the uniform step grid; each requested record time
    must sit on that grid. With record_times=None every step is recorded.
    """
    if n_steps < 100:
        raise ContractViolation(f"em_forward: n_steps {n_steps} < 100")
    x0 = np.asarray(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    grid = np.arange(n_steps + 1) * dt
    if record_times is None:
        record_idx = {k: k for k in range(n_steps + 1)}
        times = grid
    else:
        record_idx = {}
        for rt in record_times:
            k = int(round(rt * n_steps))
            if not (0 <= k <= n_steps) or abs(grid[k] - rt) > 1e-9:
                raise ContractViolation(f"record time {rt} not on the step grid")
            record_idx[k] = len(record_idx)
        times = np.asarray(record_times, dtype=np.float64)

    x = np.broadcast_to(x0, (n_paths,) + x0.shape).astype(np.float64).copy()
    noise_map = op.eigvecs / np.sqrt(op.eigvals)[None, :]  # P diag(lambda^-1/2)
    records = np.empty((len(record_idx), n_paths) + x0.shape, dtype=np.float64)
    if 0 in record_idx:
        records[record_idx[0]] = x
    for k in range(n_steps):
        beta_k = schedule.beta(grid[k])
        z = rng.standard_normal(x.shape)
        x = x - 0.5 * beta_k * x * dt \
            + np.sqrt(beta_k * dt) * np.einsum("ij,pjk->pik", noise_map, z)
        if k + 1 in record_idx:
            records[record_idx[k + 1]] = x
    return Trajectory(times=times, states=records)


def denoise_renoise_step(op: HarmonicOperator, x_t: np.ndarray, x0_hat: np.ndarray,
                         t: float, dt: float, rng: np.random.Generator,
                         schedule: BetaSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Jump to t-dt by re-noising the predicted clean structure."""
    t, dt = float(t), float(dt)
    if not (0.0 < dt <= t):
        raise ContractViolation(f"denoise_renoise_step: need 0 < dt <= t, "
                                f"got dt={dt}, t={t}")
    t_next = t - dt
    if t_next <= 0.0:
        return np.asarray(x0_hat, dtype=np.float64).copy()
    return perturb(op, x0_hat, t_next, rng, schedule=schedule)


def align_time(op: HarmonicOperator, coords: np.ndarray, x0_hat_cache: np.ndarray,
               per_atom_times: np.ndarray, target_t: float,
               rng: np.random.Generator,
               schedule: BetaSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Bring stale atoms (recorded at a later time) onto the common target time.

    Draws one joint kernel sample at target_t around the cached clean
    prediction and overwrites only the stale rows; up-to-date rows are
    returned bitwise unchanged. Consumes no randomness when nothing is stale.
    """
    coords = np.asarray(coords, dtype=np.float64)
    times = np.asarray(per_atom_times, dtype=np.float64)
    if times.shape != (coords.shape[0],):
        raise ContractViolation(f"align_time: times shape {times.shape} does not "
                                f"match {coords.shape[0]} atoms")
    if np.any(times < target_t - 1e-12):
        raise ContractViolation("align_time: an atom is recorded earlier than the "
                                "target time; cannot re-noise backwards")
    stale = np.abs(times - target_t) > 1e-12
    if not np.any(stale):
        return coords
    if target_t <= 0.0:
        joint = np.asarray(x0_hat_cache, dtype=np.float64)
    else:
        joint = perturb(op, x0_hat_cache, target_t, rng, schedule=schedule)
    out = coords.copy()
    out[stale] = joint[stale]
    return out

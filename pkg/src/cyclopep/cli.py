"""Command-line entry points: train both networks, sample peptides, run checks."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from dataclasses import dataclass

import numpy as np

from .config import (RunConfig, apply_overrides, config_keys, cyclization_type,
                     length_span, load_config, resolve_seed, validate)
from .cyclization import CyclizationSpec, make_spec, spec_for_graph
from .data_io import (ComplexRecord, Receptor, gen_synthetic_dataset,
                      parse_complex, write_pdb)
from .denoiser import (ComplexInput, DenoiserConfig, init_denoiser_params,
                       recon_loss)
from .engine import (OptimizerState, Tensor, adamw_step, checkpoint_bytes,
                     load_checkpoint, save_checkpoint, zero_grads)
from .errors import ConfigError, TrainingDivergence
from .harmonic import (BetaSchedule, HarmonicOperator, build_operator,
                       identity_operator, perturb, pocket_center,
                       sigma_from_pocket)
from .metrics import validity_report
from .router import RouterBatchItem, init_router_params, router_loss
from .sampler import (fixed_sequence_route_fn, make_denoise_fn, make_route_fn,
                      random_sequence_route_fn, run, trace_lines)

DENOISER_CHECKPOINT = "denoiser.ckpt"
ROUTER_CHECKPOINT = "router.ckpt"


def _denoiser_config(config: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(k_neighbors=config.k_neighbors,
                          n_layers=config.n_layers,
                          hidden_dim=config.hidden_dim,
                          time_embed_dim=config.time_embed_dim,
                          pocket_radius=config.pocket_radius)


def _beta_schedule(config: RunConfig) -> BetaSchedule:
    return BetaSchedule(beta_min=config.beta_min, beta_max=config.beta_max)


def _optimizer(config: RunConfig) -> OptimizerState:
    return OptimizerState(learning_rate=config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2,
                          weight_decay=config.weight_decay)


def _load_records(config: RunConfig, seed: int) -> list[ComplexRecord]:
    if config.dataset_dir:
        try:
            names = sorted(os.listdir(config.dataset_dir))
        except OSError as exc:
            raise ConfigError(f"cannot list dataset_dir: {exc}") from exc
        paths = [os.path.join(config.dataset_dir, name) for name in names]
        paths = [p for p in paths if os.path.isfile(p)]
        if not paths:
            raise ConfigError(f"dataset_dir '{config.dataset_dir}' "
                              f"contains no record files")
        return [parse_complex(path) for path in paths]
    return gen_synthetic_dataset(config.n_synthetic, seed)


@dataclass(frozen=True)
class _PreparedComplex:
    record: ComplexRecord
    spec: CyclizationSpec
    operator: HarmonicOperator
    center: np.ndarray


def _complex_input(record: ComplexRecord, coords: np.ndarray,
                   t: float) -> ComplexInput:
    rec = record.receptor
    return ComplexInput(receptor_coords=rec.coords,
                        receptor_elements=rec.elements,
                        receptor_backbone=rec.backbone,
                        ligand_graph=record.ligand_graph,
                        ligand_coords=coords, t=t)


def _prepare(record: ComplexRecord, config: RunConfig) -> _PreparedComplex:
    center = pocket_center(record.receptor.coords)
    sigma = sigma_from_pocket(record.receptor.coords)
    if config.no_harmonic:
        operator = identity_operator(record.ligand_graph.n_atoms, sigma)
    else:
        operator = build_operator(record.ligand_graph, sigma)
    spec = record.spec or spec_for_graph(record.ligand_graph)
    return _PreparedComplex(record=record, spec=spec, operator=operator,
                            center=center)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in params.items()}


def _write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def _params_hash(tensors: dict) -> str:
    return hashlib.sha256(checkpoint_bytes(tensors)).hexdigest()


def _require_file(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} required but not configured")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} '{path}' not found")
    return path


def cmd_train_denoiser(config: RunConfig) -> str:
    """Noise clean complexes at uniform times and regress the clean structure."""
    validate(config)
    seed = resolve_seed(config)
    rng = np.random.default_rng(seed)
    schedule = _beta_schedule(config)
    dconf = _denoiser_config(config)
    prepped = [_prepare(r, config) for r in _load_records(config, seed)]
    params = init_denoiser_params(dconf, rng)
    opt = _optimizer(config)
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = os.path.join(config.out_dir, DENOISER_CHECKPOINT)
    log_path = os.path.join(config.out_dir, "denoiser_loss.txt")
    log_lines: list[str] = []
    for step_index in range(config.train_steps):
        item = prepped[step_index % len(prepped)]
        x0 = item.record.ligand_coords
        t = float(rng.uniform(0.0, 1.0))
        x_t = perturb(item.operator, x0 - item.center, t, rng,
                      schedule=schedule) + item.center
        loss = recon_loss(params, dconf,
                          _complex_input(item.record, x_t, t), x0)
        value = float(loss.data)
        log_lines.append(f"step={step_index} t={t:.6f} loss={value:.8f}")
        snapshot = _snapshot(params)
        try:
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"loss became non-finite at step {step_index}")
            zero_grads(params)
            loss.backward()
            adamw_step(opt, params)
        except TrainingDivergence:
            save_checkpoint(ckpt_path, snapshot)
            log_lines.append(f"aborted at step={step_index}, "
                             f"kept last good checkpoint")
            _write_lines(log_path, log_lines)
            raise
        if (step_index + 1) % config.log_every == 0:
            print(log_lines[-1])
    save_checkpoint(ckpt_path, params)
    _write_lines(log_path, log_lines)
    print(f"wrote {ckpt_path}")
    return ckpt_path


def cmd_train_router(config: RunConfig) -> str:
    """Train sequence prediction against a frozen structure checkpoint."""
    validate(config)
    den_path = _require_file(config.denoiser_checkpoint, "denoiser_checkpoint")
    seed = resolve_seed(config)
    rng = np.random.default_rng(seed)
    schedule = _beta_schedule(config)
    dconf = _denoiser_config(config)
    raw = load_checkpoint(den_path)
    hash_before = _params_hash(raw)
    den_params = {name: Tensor(array) for name, array in raw.items()}
    prepped = [_prepare(r, config) for r in _load_records(config, seed)]
    items = [RouterBatchItem(
        complex_input=_complex_input(p.record, p.record.ligand_coords, 0.0),
        spec=p.spec, operator=p.operator, center=p.center) for p in prepped]
    params = init_router_params(dconf, rng)
    opt = _optimizer(config)
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = os.path.join(config.out_dir, ROUTER_CHECKPOINT)
    log_path = os.path.join(config.out_dir, "router_loss.txt")
    log_lines: list[str] = []
    for step_index in range(config.train_steps):
        batch = [items[step_index % len(items)]]
        loss = router_loss(params, dconf, batch, den_params, dconf, rng,
                           schedule=schedule)
        value = float(loss.data)
        log_lines.append(f"step={step_index} loss={value:.8f}")
        snapshot = _snapshot(params)
        try:
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"loss became non-finite at step {step_index}")
            zero_grads(params)
            loss.backward()
            adamw_step(opt, params)
        except TrainingDivergence:
            save_checkpoint(ckpt_path, snapshot)
            log_lines.append(f"aborted at step={step_index}, "
                             f"kept last good checkpoint")
            _write_lines(log_path, log_lines)
            raise
        if (step_index + 1) % config.log_every == 0:
            print(log_lines[-1])
    hash_after = _params_hash({k: t.data for k, t in den_params.items()})
    if hash_after != hash_before:
        raise TrainingDivergence("frozen structure parameters changed "
                                 "during router training")
    log_lines.append(f"frozen_denoiser_hash={hash_before} unchanged=yes")
    save_checkpoint(ckpt_path, params)
    _write_lines(log_path, log_lines)
    print(f"wrote {ckpt_path}")
    return ckpt_path


def _sample_receptor(config: RunConfig, seed: int) -> Receptor:
    if config.target:
        return parse_complex(_require_file(config.target, "target")).receptor
    return gen_synthetic_dataset(1, seed)[0].receptor


def _sample_route_fn(config: RunConfig, dconf: DenoiserConfig,
                     receptor: Receptor):
    if config.fix_seq:
        return fixed_sequence_route_fn(tuple(config.fix_seq.upper().split("-")))
    if config.random_seq:
        return random_sequence_route_fn()
    router_path = _require_file(config.router_checkpoint, "router_checkpoint")
    raw = load_checkpoint(router_path)
    params = {name: Tensor(array) for name, array in raw.items()}
    return make_route_fn(params, dconf, receptor)


def cmd_sample(config: RunConfig) -> dict[str, int]:
    """Sample every requested length, writing PDBs, sequences, and a report."""
    validate(config)
    den_path = _require_file(config.denoiser_checkpoint, "denoiser_checkpoint")
    seed = resolve_seed(config)
    schedule = _beta_schedule(config)
    dconf = _denoiser_config(config)
    receptor = _sample_receptor(config, seed)
    raw = load_checkpoint(den_path)
    den_params = {name: Tensor(array) for name, array in raw.items()}
    denoise_fn = make_denoise_fn(den_params, dconf, receptor)
    route_fn = _sample_route_fn(config, dconf, receptor)
    ctype = cyclization_type(config)
    if config.fix_seq:
        pinned = len(config.fix_seq.split("-"))
        lengths = [pinned]
    else:
        lo, hi = length_span(config)
        lengths = list(range(lo, hi + 1))
    os.makedirs(config.out_dir, exist_ok=True)
    sequence_lines: list[str] = []
    report_lines: list[str] = []
    counts = {"written": 0, "failed": 0}
    for n_residues in lengths:
        for rep in range(config.samples_per_length):
            stem = f"{config.ctype}_n{n_residues:02d}_s{rep:02d}"
            run_seed = int(np.random.SeedSequence(
                (seed, n_residues, rep)).generate_state(1)[0])
            try:
                spec = make_spec(ctype, n_residues)
                result = run(spec, receptor, denoise_fn, route_fn,
                             n_steps=config.n_steps, seed=run_seed,
                             isotropic=config.no_harmonic, schedule=schedule)
                write_pdb(result.coords, result.graph,
                          os.path.join(config.out_dir, f"{stem}.pdb"))
                _write_lines(os.path.join(config.out_dir, f"{stem}_trace.log"),
                             trace_lines(result))
                sequence_lines.append(f"{stem} {'-'.join(result.sequence)}")
                report = validity_report(result.coords, result.graph)
                report_lines.append(f"sample={stem} seed={run_seed}")
                report_lines.extend(f"  {line}" for line in report.to_lines())
                counts["written"] += 1
            except Exception as exc:  # logged, the batch continues
                report_lines.append(f"sample={stem} FAILED "
                                    f"{type(exc).__name__}: {exc}")
                counts["failed"] += 1
    _write_lines(os.path.join(config.out_dir, "sequences.txt"), sequence_lines)
    _write_lines(os.path.join(config.out_dir, "report.txt"), report_lines)
    print(f"wrote {counts['written']} samples "
          f"({counts['failed']} failed) to {config.out_dir}")
    return counts


def cmd_check(config: RunConfig, full: bool = False) -> int:
    """Run the verification battery; print one PASS/FAIL line per check."""
    validate(config)
    from .checks import run_battery
    results = run_battery(full=full)
    failures = 0
    for line in results:
        print(line)
        failures += line.startswith("FAIL")
    print(f"checks: {len(results) - failures}/{len(results)} passed")
    return failures


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclopep",
        description="Pocket-conditioned cyclic peptide generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    bool_keys = {f.name for f in dataclasses.fields(RunConfig)
                 if f.type == "bool"}
    for name, text in [
            ("train-denoiser", "train the structure denoiser"),
            ("train-router", "train the residue-type router"),
            ("sample", "generate peptides across the length range"),
            ("check", "run the verification battery")]:
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", default="", metavar="FILE",
                         help="key = value configuration file")
        for key in config_keys():
            flags = [f"--{key}"]
            dashed = f"--{key.replace('_', '-')}"
            if dashed != flags[0]:
                flags.append(dashed)
            if key in bool_keys:
                cmd.add_argument(*flags, dest=key, default=None,
                                 nargs="?", const="true", metavar="BOOL")
            else:
                cmd.add_argument(*flags, dest=key, default=None,
                                 metavar="VALUE")
        if name == "check":
            cmd.add_argument("--full", action="store_true",
                             help="acceptance-scale sizes (slow)")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {key: getattr(args, key) for key in config_keys()
                 if getattr(args, key) is not None}
    return validate(apply_overrides(config, overrides))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        if args.command == "train-denoiser":
            cmd_train_denoiser(config)
        elif args.command == "train-router":
            cmd_train_router(config)
        elif args.command == "sample":
            cmd_sample(config)
        else:
            return 1 if cmd_check(config, full=args.full) else 0
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

"""Command-line front end.

One JSON config file drives all five subcommands; flags override config
keys (last wins). Primary artifacts are CSV/JSON files in --out, or stdout
with --stdout; human diagnostics go to stderr. Exit codes: 0 success,
2 validation failure, 3 field-loop non-convergence (the last iterate is
still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import master as mst
from . import phylo
from . import scf as scf_mod
from .model import ModelSpec, SamplingSpec, Violation, model_from_dict, validate

EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3


@dataclass
class RunConfig:
    model: ModelSpec
    sampling: SamplingSpec | None
    tau: float | None
    scf: scf_mod.ScfConfig
    master: dict
    ensemble: dict
    loglik: dict
    output_grid: int


class ConfigError(ValueError):
    pass


def _reject_constant(token):
    raise ConfigError(f"non-finite number {token!r} not allowed in config")


def load_config(path: str, seed_override: int | None = None,
                grid_override: int | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh, parse_constant=_reject_constant)
    if "model" not in raw:
        raise ConfigError("config is missing the required 'model' section")
    model = model_from_dict(raw["model"])

    sampling = None
    if "sampling" in raw:
        s = raw["sampling"]
        sampling = SamplingSpec(rho=s.get("rho", 1.0), sigma=s.get("sigma", 0.0))

    scf_section = raw.get("scf", {})
    scf_config = scf_mod.ScfConfig(
        delta=scf_section.get("delta", 1e-6),
        max_iters=scf_section.get("max_iters", 200),
        grid_points=scf_section.get("grid_points", 512),
    )

    ensemble_section = dict(raw.get("ensemble", {}))
    if seed_override is not None:
        ensemble_section["seed"] = seed_override

    output = raw.get("output", {})
    output_grid = int(grid_override if grid_override is not None
                      else output.get("grid", 201))

    return RunConfig(
        model=model,
        sampling=sampling,
        tau=float(raw["tau"]) if "tau" in raw else None,
        scf=scf_config,
        master=dict(raw.get("master", {})),
        ensemble=ensemble_section,
        loglik=dict(raw.get("loglik", {})),
        output_grid=output_grid,
    )


def _check_model(config: RunConfig) -> list[Violation]:
    return validate(config.model)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _open_primary(args, default_name: str):
    if args.stdout:
        return sys.stdout, False
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return open(out_dir / default_name, "w", encoding="utf-8"), True


def _write_secondary(args, name: str, text: str) -> Path:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def cmd_scf(args, config: RunConfig) -> int:
    _require(config.tau is not None, "scf requires 'tau' in the config")
    converged = True
    try:
        result = scf_mod.solve_scf(config.model, config.tau, config.scf)
        field, iterations, residual = result
    except scf_mod.ScfNonConvergence as err:
        converged = False
        field, iterations, residual = err.field, err.iterations, err.residual
        _info(f"field loop did not converge: {err}")

    fh, close = _open_primary(args, "field.csv")
    try:
        scf_mod.export_trajectory_csv(field, fh, config.output_grid)
    finally:
        if close:
            fh.close()

    roots = scf_mod.steady_states(config.model)
    sidecar = {
        "converged": converged,
        "iterations": iterations,
        "final_residual": residual,
        "steady_states": [r.tolist() for r in roots],
    }
    path = _write_secondary(args, "scf.json", json.dumps(sidecar, indent=2))
    _info(f"iterations={iterations} residual={residual:.3e} "
          f"steady_states={len(roots)} sidecar={path}")
    return 0 if converged else EXIT_NONCONVERGENCE


def cmd_steady(args, config: RunConfig) -> int:
    diagnostics: list = []
    roots = scf_mod.steady_states(config.model, diagnostics=diagnostics)
    fh, close = _open_primary(args, "steady_states.json")
    try:
        fh.write(scf_mod.steady_states_to_json(roots, indent=2) + "\n")
    finally:
        if close:
            fh.close()
    for note in diagnostics:
        _info(f"diagnostic: {note}")
    if len(roots) == 1:
        _info("only the trivial steady state was found")
    return 0


def _master_v0(config: RunConfig, lattice: mst.TruncatedLattice):
    section = config.master
    if "v0" not in section:
        raise ConfigError("master requires 'v0' (either {'point': [...]} or "
                          "{'entries': [[y_1,...,y_d,prob], ...]})")
    v0 = section["v0"]
    if "point" in v0:
        return {tuple(int(x) for x in v0["point"]): 1.0}
    if "entries" in v0:
        return {tuple(int(x) for x in row[:-1]): float(row[-1])
                for row in v0["entries"]}
    raise ConfigError("master v0 must contain 'point' or 'entries'")


def cmd_master(args, config: RunConfig) -> int:
    _require(config.tau is not None, "master requires 'tau' in the config")
    _require("kappa" in config.master, "master requires 'kappa' in the config")
    kappa = int(config.master["kappa"])
    lattice = mst.TruncatedLattice(config.model.d, kappa)
    v0 = _master_v0(config, lattice)
    traj = mst.solve_master(config.model, v0, kappa, config.tau, lattice=lattice)

    snapshots = config.master.get(
        "snapshots", [0.0, config.tau / 2.0, config.tau])
    fh, close = _open_primary(args, "distribution.csv")
    try:
        mst.export_distribution_csv(traj, fh, snapshots)
    finally:
        if close:
            fh.close()

    grid = np.linspace(0.0, config.tau, config.output_grid)
    lines = ["t," + ",".join(f"r_{i+1}" for i in range(config.model.d))]
    for t in grid:
        m = traj.moments(t)
        lines.append(",".join([format(t, ".17g")]
                              + [format(v, ".17g") for v in m]))
    path = _write_secondary(args, "moments.csv", "\n".join(lines) + "\n")
    _info(f"lattice states={lattice.size} tail_mass(tau)={traj.tail_mass(config.tau):.3e} "
          f"moments={path}")
    return 0


def cmd_simulate(args, config: RunConfig) -> int:
    _require(config.tau is not None, "simulate requires 'tau' in the config")
    section = config.ensemble
    _require("n" in section, "simulate requires ensemble.n in the config")
    n = int(section["n"])
    seed = int(section.get("seed", 0))
    checkpoints = section.get(
        "checkpoints", list(np.linspace(0.0, config.tau, 11)[1:]))
    init = section.get("init")
    if init is None:
        init = np.rint(config.model.r0)
        if np.any(np.abs(init - config.model.r0) > 1e-9):
            raise ConfigError("model r0 is not integral; set ensemble.init")
    trace = ens.simulate(
        config.model, n, config.tau, init, seed, checkpoints,
        max_events=int(section.get("max_events", 10_000_000)),
        record_histogram=bool(section.get("record_histogram", False)),
    )
    fh, close = _open_primary(args, "trace.csv")
    try:
        ens.export_trace_csv(trace, fh)
    finally:
        if close:
            fh.close()
    if trace.histograms is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "histograms.json", "w", encoding="utf-8") as hf:
            ens.export_histograms_json(trace, hf, indent=2)
    _info(f"events={trace.total_events} seed={seed}")
    return 0


def cmd_loglik(args, config: RunConfig) -> int:
    _require(args.tree is not None, "loglik requires --tree PATH")
    _require(config.sampling is not None,
             "loglik requires the 'sampling' section in the config")
    text = Path(args.tree).read_text(encoding="utf-8")
    tree = phylo.parse_tree(text)
    section = config.loglik
    value, details = phylo.log_likelihood_details(
        tree, config.model, config.sampling,
        condition_on_observation=bool(
            section.get("condition_on_observation", True)),
        config=config.scf,
        fossil_uses_meanfield_rate=bool(
            section.get("fossil_uses_meanfield_rate", False)),
    )
    payload = {
        "loglik": value,
        "conditioned": details["conditioned"],
        "tau": details["tau"],
        "diagnostics": {k: v for k, v in details.items()
                        if k not in ("tau", "conditioned")},
    }
    fh, close = _open_primary(args, "loglik.json")
    try:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    finally:
        if close:
            fh.close()
    _info(f"loglik={value}")
    return 0


_COMMANDS = {
    "scf": cmd_scf,
    "steady": cmd_steady,
    "master": cmd_master,
    "simulate": cmd_simulate,
    "loglik": cmd_loglik,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanfield-bd",
        description="Mean-field interacting multi-type birth-death toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("scf", "solve the self-consistent field and export the trajectory"),
        ("steady", "find steady states of the criticality condition"),
        ("master", "solve the truncated forward (master) equation"),
        ("simulate", "run an exact finite-N ensemble simulation"),
        ("loglik", "compute a tree log-likelihood"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override ensemble.seed")
        p.add_argument("--grid", type=int, default=None,
                       help="override output.grid resolution")
        p.add_argument("--stdout", action="store_true",
                       help="write the primary artifact to stdout")
        if name == "loglik":
            p.add_argument("--tree", required=True,
                           help="annotated-Newick tree file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed,
                             grid_override=args.grid)
    except (ConfigError, ValueError, OSError) as err:
        _info(f"config error: {err}")
        return EXIT_VALIDATION
    violations = _check_model(config)
    if violations:
        for v in violations:
            _info(f"model violation: {v}")
        return EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](args, config)
    except (ConfigError, phylo.TreeParseError, mst.LatticeTooLarge,
            ValueError) as err:
        _info(f"error: {err}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

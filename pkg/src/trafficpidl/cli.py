"""Command-line driver: ``trafficpidl <subcommand> --config cfg.json [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import domain as D
from . import ekf as E
from . import gan as G
from . import metrics as M
from . import neural as N
from . import solvers as S
from . import training as T
from . import trajectories as TR
from .config import ExperimentConfig, load_config

SUBCOMMANDS = ("generate", "sample", "train", "ekf", "gan-train", "evaluate", "export")


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    import pydantic

    return {"python": platform.python_version(), "numpy": np.__version__, "pydantic": pydantic.__version__,
            "package": pkg}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs: list) -> None:
    _write_json(out / f"manifest-{command}.json", {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.semantic_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "outputs": sorted(outputs),
    })


# --------------------------------------------------------------------------
# pipeline pieces shared by the subcommands
# --------------------------------------------------------------------------


def _initial_fns(cfg: ExperimentConfig):
    ic = cfg.initial

    def rho0(x):
        return ic.base + ic.amplitude * np.exp(-ic.width * (np.asarray(x) - ic.center) ** 2)

    return rho0, (lambda x: np.full_like(np.asarray(x, dtype=float), ic.u0))


def _grid(cfg: ExperimentConfig) -> D.Grid:
    g = cfg.grid
    return D.make_grid(g.L, g.T, g.nx, g.nt)


def generate_fields(cfg: ExperimentConfig):
    grid = _grid(cfg)
    rho0, u0 = _initial_fns(cfg)
    if cfg.model == "lwr3":
        return S.solve_lwr(grid, rho0, cfg.physics_params()), None
    return S.solve_arz(grid, rho0, u0, cfg.physics_params())


def sample_sets(cfg: ExperimentConfig, rho: D.Field, u: D.Field | None):
    """Observation, collocation and boundary sets; seeds are offsets of ``cfg.seed``."""
    grid = rho.grid
    obs = D.sample_loop_detectors(rho, u, cfg.sensors.m, cfg.sensors.noise_std, seed=cfg.seed)
    if cfg.sensors.probe_ratio is not None:
        obs = obs.concat(probe_sets(cfg, rho, u, obs.u is not None))
    n_c = cfg.collocation.n_c
    if cfg.collocation.rate is not None:
        n_c = D.collocation_count(grid, cfg.collocation.rate)
    colloc = D.sample_collocation(grid, n_c, cfg.collocation.strategy, seed=cfg.seed + 1)
    bc = D.sample_boundary(grid, cfg.collocation.n_b, seed=cfg.seed + 2)
    return obs, colloc, bc


def probe_sets(cfg: ExperimentConfig, rho: D.Field, u: D.Field | None, keep_u: bool) -> D.ObservationSet:
    """Probe-vehicle points from trajectories advected through the reference fields."""
    if u is None:
        fd = cfg.physics_params()
        r = np.maximum(rho.values, 1e-12)
        u = D.Field(rho.grid, np.asarray(fd.flux(r)) / r)
    ds = TR.synthesize_trajectories(rho, u, cfg.sensors.n_vehicles)
    probes = TR.probe_observations(ds, cfg.sensors.probe_ratio, rho, seed=cfg.seed + 4)
    return probes if keep_u else D.ObservationSet(probes.points, probes.rho)


def _predict_field(net, grid: D.Grid, column: int = 0) -> D.Field:
    return D.Field(grid, np.asarray(net.forward(grid.points()))[:, column].reshape(grid.shape))


def run_train(cfg: ExperimentConfig, out: Path) -> list:
    rho, u = generate_fields(cfg)
    obs, colloc, bc = sample_sets(cfg, rho, u)
    grid = rho.grid
    tr = cfg.train
    n_out = 1 if cfg.model == "lwr3" else 2
    net0 = N.punn(cfg.seed, grid.L, grid.T, n_out=n_out, hidden=tr.network.hidden)
    truth = cfg.physics_params()
    lam0 = cfg.physics_params(tr.initial_guess) if tr.identify_physics else truth
    config = T.TrainConfig(adam_iterations=tr.adam_iterations, lr=tr.lr, lbfgs_memory=tr.lbfgs_memory,
                           lbfgs_tolerance=tr.lbfgs_tolerance, lbfgs_max_iterations=tr.lbfgs_max_iterations,
                           seed=cfg.seed, identify_physics=tr.identify_physics)
    weights = T.LossWeights(tr.alpha, tr.beta, tr.gamma)
    report = T.train_pidl(net0, lam0, obs, colloc, bc, weights, config, cfg.model, truth=truth)
    pred = _predict_field(report.net, grid)
    data = report.to_dict()
    data["metrics"] = M.field_metrics(pred, rho).to_dict()
    _write_json(out / "train_report.json", data)
    (out / "net.json").write_text(report.net.to_json() + "\n")
    D.write_field_csv(pred, out / "pred_rho.csv")
    outputs = ["train_report.json", "net.json", "pred_rho.csv"]
    if n_out == 2:
        D.write_field_csv(_predict_field(report.net, grid, 1), out / "pred_u.csv")
        outputs.append("pred_u.csv")
    return outputs


def run_ekf(cfg: ExperimentConfig, out: Path) -> list:
    rho, u = generate_fields(cfg)
    obs, _, _ = sample_sets(cfg, rho, u)
    e = cfg.ekf
    res = E.ekf_run(cfg.model, cfg.physics_params(), obs, rho.grid,
                    E.EKFConfig(e.q_p, e.r_o, e.P0, e.jacobian_fd_step))
    D.write_field_csv(res.rho, out / "ekf_rho.csv")
    report = {"metrics": M.field_metrics(res.rho, rho).to_dict(), "final_cov_trace": float(res.cov_trace[-1])}
    outputs = ["ekf_rho.csv", "ekf_report.json"]
    if res.u is not None:
        D.write_field_csv(res.u, out / "ekf_u.csv")
        outputs.append("ekf_u.csv")
    _write_json(out / "ekf_report.json", report)
    return outputs


def run_gan(cfg: ExperimentConfig, out: Path) -> list:
    rho, u = generate_fields(cfg)
    obs, colloc, bc = sample_sets(cfg, rho, u)
    grid = rho.grid
    gs = cfg.gan
    n_state = 1 if cfg.model == "lwr3" else 2
    gen0 = N.generator(cfg.seed, grid.L, grid.T, gs.latent_dim, n_out=n_state)
    n_extra = 1 if gs.variant == "pid-gan" else 0
    disc0 = N.discriminator(cfg.seed + 1, grid.L, grid.T, n_state=n_state, n_extra=n_extra)
    physics = cfg.physics_params()
    if gs.variant == "mean-gan":
        physics = G.StochasticPhysics(physics, dict(gs.physics_std), gs.n_k)
    surrogate = None
    if gs.variant == "pi-gan-fdl":
        surrogate = N.fd_surrogate(cfg.seed + 2, float(cfg.physics_params().rho_max))
    config = G.GANConfig(gs.latent_dim, gs.iterations, gs.lr_generator, gs.lr_discriminator, gs.alpha, gs.gamma,
                         gs.n_mc, cfg.seed, gs.variant, gs.batch_size, cfg.model)
    gen, disc, trace = G.train_gan(gen0, disc0, physics, obs, colloc, bc, config, surrogate)
    k = gs.eval_stride
    eval_grid = D.make_grid(grid.L, grid.T, grid.nx // k, grid.nt // k)
    off = k // 2

    def on_eval(f):
        return D.Field(eval_grid, f.values[off::k, ::k][: eval_grid.nx, : eval_grid.nt])

    samples = G.predict_distribution(gen, eval_grid, gs.n_mc, seed=cfg.seed + 3)
    metrics = M.uq_metrics(samples, on_eval(rho), on_eval(u) if u is not None else None)
    _write_json(out / "gan_report.json", {
        "losses": {key: trace[key] for key in ("generator", "discriminator", "physics")},
        "metrics": metrics.to_dict(),
    })
    (out / "generator.json").write_text(gen.to_json() + "\n")
    (out / "discriminator.json").write_text(disc.to_json() + "\n")
    samples.write_csv(out / "uq.csv")
    return ["gan_report.json", "generator.json", "discriminator.json", "uq.csv"]


def export_matrix(fld: D.Field, path: Path) -> None:
    """Heatmap layout: one row per cell, one column per time sample, empty for missing values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [repr(float(t)) for t in fld.grid.t])
        for i, x in enumerate(fld.grid.x):
            row = [repr(float(x))]
            for n in range(fld.grid.nt):
                ok = fld.mask is None or fld.mask[i, n]
                row.append(repr(float(fld.values[i, n])) if ok else "")
            w.writerow(row)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficpidl", description="Physics-informed traffic state estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment JSON (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if name == "evaluate":
            p.add_argument("--pred", required=True, help="predicted field CSV")
            p.add_argument("--truth", required=True, help="reference field CSV")
        if name == "export":
            p.add_argument("--field", action="append", default=[], help="field CSV to convert (repeatable)")
            p.add_argument("--pred", help="prediction CSV; with --truth also exports the squared-error map")
            p.add_argument("--truth")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    if updates:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **updates})
    return cfg


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ValidationError as exc:
        print(f"invalid config:\n{exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    try:
        if cmd == "generate":
            rho, u = generate_fields(cfg)
            D.write_field_csv(rho, out / "rho.csv")
            outputs = ["rho.csv"]
            if u is not None:
                D.write_field_csv(u, out / "u.csv")
                outputs.append("u.csv")
        elif cmd == "sample":
            rho, u = generate_fields(cfg)
            obs, colloc, bc = sample_sets(cfg, rho, u)
            D.write_observations_csv(obs, out / "observations.csv")
            D.write_points_csv(colloc.points, out / "collocation.csv")
            D.write_points_csv(bc.times.reshape(-1, 1), out / "boundary.csv", header=("t",))
            outputs = ["observations.csv", "collocation.csv", "boundary.csv"]
        elif cmd == "train":
            outputs = run_train(cfg, out)
        elif cmd == "ekf":
            outputs = run_ekf(cfg, out)
        elif cmd == "gan-train":
            outputs = run_gan(cfg, out)
        elif cmd == "evaluate":
            report = M.field_metrics(D.read_field_csv(args.pred), D.read_field_csv(args.truth))
            _write_json(out / "metrics.json", report.to_dict())
            D.write_field_csv(report.se_rho, out / "se.csv")
            outputs = ["metrics.json", "se.csv"]
        else:
            outputs = []
            for name in args.field:
                target = out / (Path(name).stem + "_matrix.csv")
                export_matrix(D.read_field_csv(name), target)
                outputs.append(target.name)
            if args.pred and args.truth:
                se = M.squared_error_map(D.read_field_csv(args.pred), D.read_field_csv(args.truth))
                export_matrix(se, out / "se_matrix.csv")
                outputs.append("se_matrix.csv")
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"{cmd} failed: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out, cmd, cfg, outputs)
    print(f"{cmd}: wrote {', '.join(outputs)} to {out}")
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``restraj <subcommand> ...``.

Every subcommand writes a manifest next to its outputs recording the
arguments, input digests, seeds and library versions.  Outputs other than
the manifest's ``wall_time`` field are deterministic for fixed inputs.

Exit codes: 0 success, 1 runtime failure, 2 missing input file,
3 schema or format violation, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import dataset as dsmod
from . import gp as gpmod
from . import nn as nnmod
from . import planner
from .dynamics import RobotModel, model_from_dict
from .ocp import TranscriptionConfig, solve_ocp
from .prior import ProblemSpec, cubic_prior
from .schema import SchemaError, load_json

log = logging.getLogger("restraj")

EXIT_RUNTIME = 1
EXIT_MISSING = 2
EXIT_SCHEMA = 3
EXIT_USAGE = 64

OUT_ENV = "RESTRAJ_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# input helpers


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def read_model(path) -> RobotModel:
    try:
        return model_from_dict(load_json("model", _require(path)))
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{path}: {exc}") from exc


def read_grid(path) -> dsmod.GridConfig:
    data = load_json("grid", _require(path))
    try:
        return dsmod.GridConfig.from_dict(data)
    except (ValueError, KeyError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def read_specs(path) -> list[ProblemSpec]:
    data = load_json("spec", _require(path))
    if isinstance(data, dict) and "specs" in data:
        data = data["specs"]
    if isinstance(data, dict):
        data = [data]
    try:
        return [ProblemSpec.from_dict(d) for d in data]
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def read_dataset(path) -> dsmod.ResidualDataset:
    p = _require(path)
    _require(p / "data.csv")
    _require(p / "meta.json")
    return dsmod.load_dataset(p)


def _format_of(path) -> str:
    try:
        with np.load(path) as data:
            return json.loads(data["header"].tobytes().decode())["format"]
    except Exception as exc:  # not an npz archive or no header
        raise SchemaError(f"{path}: not a regressor file ({exc})") from exc


def read_regressor(path):
    p = _require(path)
    fmt = _format_of(p)
    if fmt == "restraj-nn":
        return nnmod.load_ensemble(p)
    if fmt == "restraj-gp":
        return gpmod.load_gp(p)
    raise SchemaError(f"{p}: unknown regressor format {fmt!r}")


def _packaged(name: str) -> dict:
    return json.loads((resources.files("restraj") / "configs" / name).read_text())


def default_nn_config(n: int) -> nnmod.MlpConfig:
    return nnmod.MlpConfig.from_dict(_packaged("nn_pendulum.json" if n == 1 else "nn_two_link.json"))


def read_nn_config(path, n: int) -> nnmod.MlpConfig:
    if path is None:
        return default_nn_config(n)
    with open(_require(path)) as fh:
        data = json.load(fh)
    try:
        return nnmod.MlpConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _check_n(model: RobotModel, n: int, what: str):
    if model.n != n:
        raise SchemaError(f"{what} has {n} joints but the robot model has {model.n}")


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    """Tidy CSV with round-trippable floats; an empty ``rows`` writes the header only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def trajectory_rows(traj, label: str):
    for k in range(len(traj.t)):
        yield ([label, traj.t[k]] + list(traj.q[k]) + list(traj.v[k]) + list(traj.u[k]))


def trajectory_header(n: int):
    return (["label", "t"] + [f"q{j}" for j in range(n)] + [f"v{j}" for j in range(n)]
            + [f"u{j}" for j in range(n)])


def _spec_cols(spec: ProblemSpec):
    return [spec.tf] + list(spec.q0) + list(spec.qf)


def _spec_header(n: int):
    return ["tf"] + [f"q0_{j}" for j in range(n)] + [f"qf_{j}" for j in range(n)]


def _digest(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    files = (sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith("manifest.json"))
             if p.is_dir() else [p])
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(path, command: str, args: dict, inputs: dict, wall_time: float, extra=None):
    cfg = json.dumps({"command": command, "args": args}, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "args": args,
        "config_hash": hashlib.sha256(cfg.encode()).hexdigest()[:16],
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in sorted(inputs.items())},
        "seeds": {k: v for k, v in args.items() if "seed" in k},
        "versions": {"restraj": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time": wall_time,
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "restraj_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _out_file(args, default_name: str) -> Path:
    if args.out:
        p = Path(args.out)
    else:
        p = Path(os.environ.get(OUT_ENV) or "restraj_out") / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _file_manifest(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------------------
# subcommands; each returns (manifest path, inputs, extra manifest fields)


def cmd_ocp(args):
    model = read_model(args.model)
    specs = read_specs(args.spec)
    for s in specs:
        _check_n(model, s.n, "spec")
    out = _out_file(args, "traj.csv")
    config = TranscriptionConfig(rate=args.rate)
    rows, summary = [], []
    for i, spec in enumerate(specs):
        sol = solve_ocp(model, spec, config)
        traj = sol.trajectory
        for k in range(len(traj.t)):
            rows.append([i, traj.t[k]] + list(traj.q[k]) + list(traj.v[k]) + list(traj.u[k]))
        summary.append([i] + _spec_cols(spec) + [sol.converged, sol.objective, sol.prior_energy,
                                                 sol.savings, sol.defect_norm, sol.iterations])
        print(f"spec {i}: converged={sol.converged} energy={sol.objective:.4f} J "
              f"prior={sol.prior_energy:.4f} J savings={sol.savings:.2f}%")
    header = trajectory_header(model.n)[1:]
    if len(specs) == 1:
        write_csv(out, header, [r[1:] for r in rows])
    else:
        write_csv(out, ["spec"] + header, rows)
    write_csv(out.with_name(out.stem + "_summary.csv"),
              ["spec"] + _spec_header(model.n) + ["converged", "energy", "prior_energy",
                                                  "savings", "defect", "iterations"], summary)
    return _file_manifest(out), {"model": args.model, "spec": args.spec}, None


def cmd_gen_dataset(args):
    model = read_model(args.model)
    grid = read_grid(args.grid)
    _check_n(model, grid.n, "grid")
    out = _out_dir(args)
    ds = dsmod.build_dataset(model, grid, TranscriptionConfig(rate=grid.rate), seed=args.seed,
                             test_fraction=args.test_fraction, workers=args.workers)
    dsmod.save_dataset(ds, out)
    print(f"{len(ds.specs)} trajectories, {len(ds)} samples, "
          f"{len(ds.meta.get('skipped', []))} skipped -> {out}")
    return out / "manifest.json", {"model": args.model, "grid": args.grid}, None


def _training_rows(ds, use_all: bool):
    if use_all:
        return ds.inputs(), ds.r
    rows = ds.rows("train")
    return ds.inputs(rows), ds.r[rows]


def cmd_train_nn(args):
    ds = read_dataset(args.data)
    config = read_nn_config(args.config, ds.n)
    overrides = {k: getattr(args, k) for k in ("epochs", "seed", "batch_size")
                 if getattr(args, k) is not None}
    config = nnmod.MlpConfig(**{**asdict(config), **overrides})
    X, y = _training_rows(ds, args.all)
    test = ds.rows("test")
    Xt, yt = (ds.inputs(test), ds.r[test]) if len(test) and not args.all else (None, None)
    model = nnmod.train(X, y, config, Xt, yt)
    out = _out_file(args, "nn.bin")
    nnmod.save_ensemble(model, out)
    msg = f"trained {config.members} members on {len(X)} rows"
    if Xt is not None:
        msg += f"; test mse {model.mse(Xt, yt):.4e} (target variance {float(np.var(yt)):.4e})"
    print(msg + f" -> {out}")
    return _file_manifest(out), {"data": args.data}, {"config": asdict(config)}


def cmd_train_gp(args):
    ds = read_dataset(args.data)
    config = gpmod.GpConfig(epochs=args.epochs, max_rows=args.max_rows, seed=args.seed)
    X, y = _training_rows(ds, args.all)
    model = gpmod.fit(X, y, config)
    out = _out_file(args, "gp.bin")
    gpmod.save_gp(model, out)
    msg = f"fitted {model.n_out} joint GP(s) on {len(model.X)} rows"
    test = ds.rows("test")
    if len(test) and not args.all:
        yt = ds.r[test]
        msg += f"; test mse {model.mse(ds.inputs(test), yt):.4e} (target variance {float(np.var(yt)):.4e})"
    print(msg + f" -> {out}")
    return _file_manifest(out), {"data": args.data}, {"config": asdict(config)}


def cmd_plan(args):
    model = read_model(args.model)
    reg = read_regressor(args.regressor)
    specs = read_specs(args.spec)
    out = _out_file(args, "plan.csv")
    rows, energies = [], []
    for i, spec in enumerate(specs):
        _check_n(model, spec.n, "spec")
        res = planner.plan(planner.PlanRequest(spec, args.resolution, args.samples, args.seed),
                           model, reg)
        rows += [[i] + r for r in trajectory_rows(res.best, "best")]
        rows += [[i] + r for r in trajectory_rows(res.mean, "mean")]
        energies += [[i, k, e] for k, e in enumerate(res.energies)]
        print(f"spec {i}: best {res.best.energy:.4f} J ({res.best_savings:.2f}%), "
              f"mean {res.mean.energy:.4f} J ({res.mean_savings:.2f}%), "
              f"sigma mean {res.sigma_mean:.3e} max {res.sigma_max:.3e}")
    write_csv(out, ["spec"] + trajectory_header(model.n), rows)
    write_csv(out.with_name(out.stem + "_energies.csv"), ["spec", "sample", "energy"], energies)
    return _file_manifest(out), {"model": args.model, "regressor": args.regressor,
                                 "spec": args.spec}, None


def _named_regressors(args):
    regs = {}
    if args.nn:
        regs["nn"] = read_regressor(args.nn)
    if args.gp:
        regs["gp"] = read_regressor(args.gp)
    if not regs:
        raise UsageError("give at least one of --nn/--gp")
    return regs


SAVINGS_HEADER = ["traj", "split", "regressor", "variant", "savings"]


def savings_rows(model, ds, regs, part, resolution=100, seed=0):
    """Rows of (traj, split, regressor, variant, savings) with variants
    best, best_sample, mean and ocp."""
    rows = []
    trajs = ds.trajectories(part)
    for i in trajs:
        spec = ds.specs[i]
        rows.append([i, ds.split[i], "ocp", "ocp", ds.meta["trajectories"][i]["savings"]])
        for name, reg in regs.items():
            res = planner.plan(planner.PlanRequest(spec, resolution, None, seed), model, reg)
            rows.append([i, ds.split[i], name, "best", res.best_savings])
            rows.append([i, ds.split[i], name, "best_sample", res.sample_best_savings])
            rows.append([i, ds.split[i], name, "mean", res.mean_savings])
    return rows


def summarize_savings(rows):
    table = {}
    for _, _, reg, variant, val in rows:
        table.setdefault((reg, variant), []).append(val)
    return {k: float(np.mean(v)) for k, v in sorted(table.items())}


def cmd_eval(args):
    model = read_model(args.model)
    ds = read_dataset(args.data)
    _check_n(model, ds.n, "dataset")
    regs = _named_regressors(args)
    out = _out_dir(args)
    part = None if args.split == "all" else args.split
    rows = savings_rows(model, ds, regs, part, args.resolution, args.seed)
    write_csv(out / "savings.csv", SAVINGS_HEADER, rows)
    for (reg, variant), val in summarize_savings(rows).items():
        print(f"{reg:>3} {variant:<12} {val:8.2f} %")
    trajs = ds.trajectories(part)
    if trajs:
        i = trajs[0]
        spec = ds.specs[i]
        xi, r = ds.residual_of(i)
        t = xi * spec.tf
        ex = [["ocp", tk] + list(qk) for tk, qk in zip(t, cubic_prior(spec, xi) + r)]
        ex += [["prior", tk] + list(qk) for tk, qk in zip(t, cubic_prior(spec, xi))]
        for name, reg in regs.items():
            res = planner.plan(planner.PlanRequest(spec, len(xi), None, args.seed), model, reg)
            ex += [[name, tk] + list(qk) for tk, qk in zip(res.best.t, res.best.q)]
        write_csv(out / "example_trajectory.csv", ["label", "t"] + [f"q{j}" for j in range(ds.n)], ex)
    return out / "manifest.json", {"model": args.model, "data": args.data,
                                   **{k: getattr(args, k) for k in ("nn", "gp") if getattr(args, k)}}, None


def cmd_active_learn(args):
    model = read_model(args.model)
    ds = read_dataset(args.data)
    cands = dsmod.enumerate_specs(read_grid(args.candidates))
    regs = _named_regressors(args)
    out = _out_dir(args)
    X, y = _training_rows(ds, args.all)
    rows = []
    for name, reg in regs.items():
        updated, rep = planner.active_learn(reg, model, cands, args.k, train_X=X, train_y=y,
                                            seed=args.seed, refit=args.refit)
        for s, sc, a, b, c in zip(rep.selected, rep.scores, rep.pre_savings,
                                  rep.post_savings, rep.ocp_savings):
            rows.append([name] + _spec_cols(s) + [sc, a, b, c])
        for s in rep.skipped:
            log.warning("%s: OCP did not converge for %s; skipped", name, s)
        if rep.selected:
            print(f"{name}: pre {np.mean(rep.pre_savings):.2f}% -> post "
                  f"{np.mean(rep.post_savings):.2f}% (OCP {np.mean(rep.ocp_savings):.2f}%)")
        if name == "nn":
            nnmod.save_ensemble(updated, out / "nn_al.bin")
        else:
            gpmod.save_gp(updated, out / "gp_al.bin")
    write_csv(out / "active_learning.csv",
              ["regressor"] + _spec_header(ds.n) + ["uncertainty", "pre_savings", "post_savings",
                                                    "ocp_savings"], rows)
    return out / "manifest.json", {"model": args.model, "data": args.data,
                                   "candidates": args.candidates}, None


def cmd_ablate(args):
    model = read_model(args.model)
    ds = read_dataset(args.data)
    _check_n(model, ds.n, "dataset")
    outside = dsmod.enumerate_specs(read_grid(args.outside)) if args.outside else []
    nn_config = read_nn_config(args.config, ds.n)
    gp_config = gpmod.GpConfig(epochs=args.gp_epochs, max_rows=args.max_rows)
    res = planner.ablate_naive(ds, nn_config, gp_config, outside=outside)
    out = _out_dir(args)
    rows = []
    for key, v in asdict_shallow(res).items():
        paradigm, reg, region = key.split("_")
        for k, (p, vel) in enumerate(zip(v.position, v.velocity)):
            rows.append([paradigm, reg, region, k // 2, "start" if k % 2 == 0 else "end", p, vel])
        if v.position.size:
            print(f"{paradigm:>8} {reg} {region:<7} position {v.mean_position:.3e} rad "
                  f"velocity {v.mean_velocity:.3e} rad/s")
    write_csv(out / "violations.csv",
              ["paradigm", "regressor", "region", "spec", "boundary", "position", "velocity"], rows)
    return out / "manifest.json", {"model": args.model, "data": args.data}, None


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def cmd_bench(args):
    model = read_model(args.model)
    reg = read_regressor(args.regressor)
    specs = read_specs(args.spec)
    out = _out_file(args, "latency.csv")
    rows = []
    for i, spec in enumerate(specs):
        _check_n(model, spec.n, "spec")
        stats = planner.bench_latency(planner.PlanRequest(spec, args.resolution, args.samples,
                                                          args.seed), model, reg, args.repetitions)
        rows += [[i, k, t, stats.limit] for k, t in enumerate(stats.times)]
        print(f"spec {i}: p50 {stats.p50 * 1e3:.2f} ms p99 {stats.p99 * 1e3:.2f} ms "
              f"limit {stats.limit * 1e3:.1f} ms -> {'PASS' if stats.passed else 'FAIL'}")
    write_csv(out, ["spec", "repetition", "seconds", "limit"], rows)
    return _file_manifest(out), {"model": args.model, "regressor": args.regressor,
                                 "spec": args.spec}, None


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="restraj", description="Residual learning of minimum-energy trajectories.")
    p.add_argument("--version", action="version", version=f"restraj {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=fn)
        sp.add_argument("--out", help=f"output path (default: ${OUT_ENV} or ./restraj_out)")
        return sp

    sp = add("ocp", cmd_ocp, "solve the minimum-energy OCP for one or more specs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--rate", type=float, default=100.0, help="collocation nodes per second")

    sp = add("gen-dataset", cmd_gen_dataset, "solve the OCP over a grid and store residuals")
    sp.add_argument("--model", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--seed", type=int, default=0, help="train/test split seed")
    sp.add_argument("--test-fraction", type=float, default=0.2)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("train-nn", cmd_train_nn, "train the scaled MLP ensemble")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", help="JSON with MLP settings")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--all", action="store_true", help="train on test rows as well")

    sp = add("train-gp", cmd_train_gp, "fit the boundary-constrained GP")
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--max-rows", type=int, default=4000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--all", action="store_true")

    sp = add("plan", cmd_plan, "plan trajectories with a trained regressor")
    sp.add_argument("--model", required=True)
    sp.add_argument("--regressor", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--resolution", type=int, default=100)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval", cmd_eval, "savings of trained regressors against the OCP")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--nn")
    sp.add_argument("--gp")
    sp.add_argument("--split", choices=["train", "test", "all"], default="test")
    sp.add_argument("--resolution", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("active-learn", cmd_active_learn, "update regressors at the most uncertain specs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--candidates", required=True, help="grid file of candidate specs")
    sp.add_argument("-k", type=int, default=4)
    sp.add_argument("--nn")
    sp.add_argument("--gp")
    sp.add_argument("--refit", action="store_true", help="re-optimize GP hyperparameters")
    sp.add_argument("--all", action="store_true", help="NN fine-tuning keeps test rows too")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("ablate", cmd_ablate, "boundary violations of naive position regressors")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--outside", help="grid file of outside-dataset specs")
    sp.add_argument("--config", help="JSON with MLP settings")
    sp.add_argument("--gp-epochs", type=int, default=100)
    sp.add_argument("--max-rows", type=int, default=4000)

    sp = add("bench", cmd_bench, "plan() latency against the tf/10 limit")
    sp.add_argument("--model", required=True)
    sp.add_argument("--regressor", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--resolution", type=int, default=100)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--repetitions", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _diagnose(kind: str, code: int, exc) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _diagnose("usage", EXIT_USAGE, exc)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        manifest, inputs, extra = args.func(args)
    except UsageError as exc:
        return _diagnose("usage", EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _diagnose("missing-file", EXIT_MISSING, exc)
    except (SchemaError, dsmod.DatasetFormatError) as exc:
        return _diagnose("schema", EXIT_SCHEMA, exc)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        return _diagnose("runtime", EXIT_RUNTIME, exc)
    recorded = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    write_manifest(manifest, args.command, recorded, inputs, time.perf_counter() - start, extra)
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

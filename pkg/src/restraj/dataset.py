"""Grid enumeration of problem specs and residual datasets built from OCP solves."""

from __future__ import annotations

import ast
import csv
import itertools
import json
import logging
import math
import operator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import RobotModel
from .ocp import TranscriptionConfig, solve_ocp
from .prior import ProblemSpec, cubic_prior

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not follow the documented schema."""


# ---------------------------------------------------------------------------
# grid configuration

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.USub: operator.neg, ast.UAdd: operator.pos}


def parse_number(value) -> float:
    """Accept plain numbers or small arithmetic strings such as ``"3*pi/4"``."""
    if isinstance(value, (int, float)):
        return float(value)

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ValueError(f"unsupported expression: {value!r}")

    return ev(ast.parse(str(value), mode="eval"))


@dataclass(frozen=True)
class Axis:
    low: float
    high: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("sample count must be >= 1")
        if self.high < self.low:
            raise ValueError(f"range [{self.low}, {self.high}] is not ordered")
        if self.count == 1 and self.high != self.low:
            raise ValueError("a single sample needs a degenerate range")

    @classmethod
    def from_dict(cls, d) -> "Axis":
        lo, hi = (parse_number(x) for x in d["range"])
        return cls(lo, hi, int(d["count"]))

    def values(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.count)


def _joints(params, n):
    j = params.get("joints", params.get("joint"))
    if j is None:
        return list(range(n))
    return [j] if isinstance(j, int) else list(j)


# strict comparisons ignore rounding noise from linspace (e.g. |-pi/12| vs |pi/12|)
_EPS = 1e-9


def _monotone_magnitude(spec, params):
    return all(abs(spec.qf[j]) > abs(spec.q0[j]) + _EPS for j in _joints(params, spec.n))


def _min_displacement(spec, params):
    thr = parse_number(params["threshold"])
    return all(abs(spec.qf[j] - spec.q0[j]) > thr + _EPS for j in _joints(params, spec.n))


def _increasing(spec, params):
    return all(spec.qf[j] > spec.q0[j] + _EPS for j in _joints(params, spec.n))


def _outside_box(spec, params):
    """True when any coordinate leaves the box of a reference grid."""
    lo, hi = (parse_number(x) for x in params["tf"])
    if not lo - _EPS <= spec.tf <= hi + _EPS:
        return True
    qlo, qhi = (parse_number(x) for x in params["q"])
    return any(not qlo - _EPS <= q <= qhi + _EPS for q in (*spec.q0, *spec.qf))


FILTERS = {
    "monotone_magnitude": _monotone_magnitude,
    "min_displacement": _min_displacement,
    "increasing": _increasing,
    "outside_box": _outside_box,
}


@dataclass
class GridConfig:
    tf: Axis
    q0: list[Axis]
    qf: list[Axis]
    rate: float = 100.0
    filters: list[dict] = field(default_factory=list)
    name: str = "grid"
    notes: str = ""

    def __post_init__(self):
        if len(self.q0) != len(self.qf):
            raise ValueError("q0 and qf need one axis per joint")
        if self.rate <= 0:
            raise ValueError("sampling rate must be positive")
        for f in self.filters:
            if f.get("name") not in FILTERS:
                raise ValueError(f"unknown filter {f.get('name')!r}; known: {sorted(FILTERS)}")

    @property
    def n(self) -> int:
        return len(self.q0)

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tf=Axis.from_dict(d["tf"]),
                   q0=[Axis.from_dict(a) for a in d["q0"]],
                   qf=[Axis.from_dict(a) for a in d["qf"]],
                   rate=float(d.get("rate", 100.0)),
                   filters=list(d.get("filters", [])),
                   name=d.get("name", "grid"), notes=d.get("notes", ""))

    def to_dict(self) -> dict:
        ax = lambda a: {"range": [a.low, a.high], "count": a.count}  # noqa: E731
        return {"name": self.name, "rate": self.rate, "tf": ax(self.tf),
                "q0": [ax(a) for a in self.q0], "qf": [ax(a) for a in self.qf],
                "filters": self.filters, "notes": self.notes}


def load_grid(path) -> GridConfig:
    with open(path) as fh:
        return GridConfig.from_dict(json.load(fh))


def unfiltered_count(grid: GridConfig) -> int:
    return grid.tf.count * math.prod(a.count for a in grid.q0 + grid.qf)


def enumerate_specs(grid: GridConfig) -> list[ProblemSpec]:
    """Cartesian product of the grid axes that passes every filter."""
    specs = []
    q0s = list(itertools.product(*(a.values() for a in grid.q0)))
    qfs = list(itertools.product(*(a.values() for a in grid.qf)))
    for tf in grid.tf.values():
        for q0 in q0s:
            for qf in qfs:
                spec = ProblemSpec(tf, q0, qf)
                if all(FILTERS[f["name"]](spec, f) for f in grid.filters):
                    specs.append(spec)
    if not specs:
        raise ValueError(f"grid {grid.name!r} is empty after filtering")
    return specs


def samples_per_trajectory(tf: float, rate: float) -> int:
    return max(10, int(round(tf * rate))) + 1


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ResidualDataset:
    """Flat regression table: one row per (trajectory, normalized time)."""

    specs: list[ProblemSpec]
    traj: np.ndarray
    xi: np.ndarray
    r: np.ndarray
    split: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.traj = np.asarray(self.traj, dtype=int).reshape(-1)
        self.xi = np.asarray(self.xi, dtype=float).reshape(-1)
        n = self.specs[0].n if self.specs else int(self.meta.get("n", 1))
        self.r = np.asarray(self.r, dtype=float).reshape(len(self.xi), n)
        self.meta = {**self.meta, "n": n}
        if len(self.split) != len(self.specs):
            raise ValueError("split needs one entry per trajectory")

    @property
    def n(self) -> int:
        return self.r.shape[1]

    def __len__(self) -> int:
        return len(self.xi)

    def spec_features(self) -> np.ndarray:
        if not self.specs:
            return np.empty((0, 1 + 2 * self.n))
        return np.array([s.features for s in self.specs])

    def inputs(self, rows=None) -> np.ndarray:
        """Regression inputs (xi, tf, q0..., qf...) for every row."""
        rows = slice(None) if rows is None else rows
        feats = self.spec_features()[self.traj[rows]]
        return np.column_stack([self.xi[rows], feats])

    def rows(self, part: str) -> np.ndarray:
        keep = np.array([s == part for s in self.split], dtype=bool)
        return np.flatnonzero(keep[self.traj]) if len(self.traj) else np.array([], int)

    def trajectories(self, part: str | None = None) -> list[int]:
        return [i for i, s in enumerate(self.split) if part is None or s == part]

    def residual_of(self, i: int):
        sel = self.traj == i
        return self.xi[sel], self.r[sel]

    def subset(self, part: str) -> "ResidualDataset":
        keep = self.trajectories(part)
        remap = {old: new for new, old in enumerate(keep)}
        sel = np.isin(self.traj, keep)
        meta = dict(self.meta)
        if "trajectories" in meta:
            meta["trajectories"] = [meta["trajectories"][i] for i in keep]
        return ResidualDataset([self.specs[i] for i in keep],
                               np.array([remap[t] for t in self.traj[sel]], dtype=int),
                               self.xi[sel], self.r[sel], [self.split[i] for i in keep], meta)

    def extended(self, specs, xis, rs, part: str = "train") -> "ResidualDataset":
        """A copy with extra trajectories appended."""
        specs_all = list(self.specs)
        traj = [self.traj]
        xi = [self.xi]
        r = [self.r]
        for spec, x, res in zip(specs, xis, rs):
            traj.append(np.full(len(x), len(specs_all)))
            specs_all.append(spec)
            xi.append(np.asarray(x))
            r.append(np.asarray(res).reshape(len(x), -1))
        return ResidualDataset(specs_all, np.concatenate(traj), np.concatenate(xi),
                               np.concatenate(r), self.split + [part] * len(specs),
                               dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResidualDataset):
            return NotImplemented
        return (self.specs == other.specs and self.split == other.split
                and np.array_equal(self.traj, other.traj)
                and np.array_equal(self.xi, other.xi)
                and np.array_equal(self.r, other.r)
                and self.meta == other.meta)


def assign_split(n_traj: int, test_fraction: float = 0.2, seed: int = 0) -> list[str]:
    """Split by trajectory so rows of one motion never straddle train and test."""
    if n_traj == 0:
        return []
    n_test = int(round(test_fraction * n_traj))
    if n_traj >= 2:
        n_test = min(max(n_test, 1), n_traj - 1)
    else:
        n_test = 0
    order = np.random.default_rng(seed).permutation(n_traj)
    split = ["train"] * n_traj
    for i in order[:n_test]:
        split[i] = "test"
    return split


def _solve_one(args):
    model, spec, config = args
    return solve_ocp(model, spec, config)


def residuals_from_solution(spec: ProblemSpec, sol):
    traj = sol.trajectory
    K = len(traj.t) - 1
    xi = np.arange(K + 1) / K
    return xi, traj.q - cubic_prior(spec, xi)


def build_dataset(model: RobotModel, grid: GridConfig,
                  config: TranscriptionConfig | None = None, *, seed: int = 0,
                  test_fraction: float = 0.2, workers: int = 1,
                  specs: list[ProblemSpec] | None = None) -> ResidualDataset:
    """Solve every grid spec and tabulate q*(t_k) - p(t_k) on the sampling grid.

    Non-converged solves are listed in ``meta["skipped"]`` and left out.
    """
    config = config or TranscriptionConfig(rate=grid.rate)
    if config.K is None and config.rate != grid.rate:
        config = TranscriptionConfig(**{**config.to_dict(), "rate": grid.rate})
    specs = enumerate_specs(grid) if specs is None else specs
    jobs = [(model, s, config) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            solutions = list(pool.map(_solve_one, jobs))
    else:
        solutions = [_solve_one(j) for j in jobs]

    kept, traj, xi, r, info, skipped = [], [], [], [], [], []
    for spec, sol in zip(specs, solutions):
        if not sol.converged:
            skipped.append({"spec": spec.to_dict(), "defect": sol.defect_norm})
            continue
        x, res = residuals_from_solution(spec, sol)
        traj.append(np.full(len(x), len(kept)))
        kept.append(spec)
        xi.append(x)
        r.append(res)
        info.append({"energy_opt": sol.objective, "energy_prior": sol.prior_energy,
                     "savings": sol.savings, "iterations": sol.iterations,
                     "defect": sol.defect_norm})
    if skipped:
        log.warning("%d of %d solves did not converge", len(skipped), len(specs))
    meta = {
        "version": FORMAT_VERSION,
        "n": model.n,
        "model": model.to_dict(),
        "model_digest": model.digest(),
        "grid": grid.to_dict(),
        "solver": config.to_dict(),
        "seed": seed,
        "test_fraction": test_fraction,
        "trajectories": info,
        "skipped": skipped,
    }
    n = model.n
    return ResidualDataset(
        kept,
        np.concatenate(traj) if traj else np.empty(0, int),
        np.concatenate(xi) if xi else np.empty(0),
        np.concatenate(r) if r else np.empty((0, n)),
        assign_split(len(kept), test_fraction, seed), meta)


def _columns(n: int) -> list[str]:
    return (["traj", "xi", "tf"] + [f"q0_{j + 1}" for j in range(n)]
            + [f"qf_{j + 1}" for j in range(n)] + [f"r_{j + 1}" for j in range(n)])


def save_dataset(ds: ResidualDataset, path) -> Path:
    """Write ``data.csv`` and ``meta.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = ds.n
    feats = ds.spec_features()
    with open(path / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_columns(n))
        for i in range(len(ds)):
            t = int(ds.traj[i])
            w.writerow([t, repr(float(ds.xi[i]))]
                       + [repr(float(x)) for x in feats[t]]
                       + [repr(float(x)) for x in ds.r[i]])
    meta = dict(ds.meta)
    meta["n"] = n
    meta["specs"] = [s.to_dict() for s in ds.specs]
    meta["split"] = ds.split
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> ResidualDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path / 'meta.json'}: {exc}") from exc
    try:
        n = int(meta["n"])
        specs = [ProblemSpec.from_dict(d) for d in meta.pop("specs")]
        split = list(meta.pop("split"))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path / 'meta.json'}: missing or invalid field ({exc})") from exc
    with open(path / "data.csv", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != _columns(n):
            raise DatasetFormatError(
                f"{path / 'data.csv'}: header {header} does not match {_columns(n)}")
        traj, xi, r = [], [], []
        for lineno, row in enumerate(rd, start=2):
            if len(row) != len(header):
                raise DatasetFormatError(f"{path / 'data.csv'}:{lineno}: expected {len(header)} fields")
            try:
                t = int(row[0])
                vals = [float(x) for x in row[1:]]
                spec = specs[t]
            except (ValueError, IndexError) as exc:
                raise DatasetFormatError(f"{path / 'data.csv'}:{lineno}: {exc}") from exc
            if tuple(vals[1:2 + 2 * n]) != (spec.tf, *spec.q0, *spec.qf):
                raise DatasetFormatError(f"{path / 'data.csv'}:{lineno}: spec columns disagree with meta.json")
            traj.append(t)
            xi.append(vals[0])
            r.append(vals[2 + 2 * n:])
    return ResidualDataset(specs, np.array(traj, dtype=int), np.array(xi, dtype=float),
                           np.array(r, dtype=float).reshape(len(xi), n), split, meta)

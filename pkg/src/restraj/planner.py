"""Online planning with a trained residual regressor, plus evaluation drivers.

A regressor here is anything exposing

* ``sample_latent(xi, spec, count, seed) -> (S, R, n)`` draws of the factor
  ``f`` with residual ``r = s(xi) * f``;
* ``mean_latent(xi, spec) -> (R, n)``;
* ``predict(xi, spec) -> (mean, std, ...)`` of the residual.

Both :class:`~restraj.nn.EnsembleModel` and :class:`~restraj.gp.GpModel`
qualify (the ensemble through :class:`NNRegressor`).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp as gpmod
from . import nn as nnmod
from .dynamics import RobotModel, Trajectory, electrical_power, inverse_dynamics
from .ocp import TranscriptionConfig, solve_ocp
from .prior import (
    ProblemSpec,
    cubic_prior,
    cubic_prior_derivative,
    cubic_prior_second_derivative,
    scaling,
    scaling_derivative,
    scaling_second_derivative,
)

log = logging.getLogger(__name__)

PROBE_POINTS = 33


class NNRegressor:
    """Adapter giving an ensemble the planner interface (one sample per member)."""

    kind = "nn"

    def __init__(self, model: nnmod.EnsembleModel):
        self.model = model

    def sample_latent(self, xi, spec, count=None, seed=None):
        return self.model.sample_latent(xi, spec, count)

    def mean_latent(self, xi, spec):
        return self.model.sample_latent(xi, spec).mean(axis=0)

    def predict(self, xi, spec):
        return self.model.predict(xi, spec)


class GPRegressor:
    kind = "gp"

    def __init__(self, model: gpmod.GpModel):
        self.model = model

    def sample_latent(self, xi, spec, count=10, seed=None):
        return self.model.sample_latent(xi, spec, count, seed)

    def mean_latent(self, xi, spec):
        return self.model.mean_latent(xi, spec)

    def predict(self, xi, spec):
        return self.model.predict(xi, spec)


class ZeroRegressor:
    """Predicts no residual at all; planning with it reproduces the prior."""

    kind = "zero"

    def __init__(self, n: int):
        self.n = n

    def sample_latent(self, xi, spec, count=1, seed=None):
        return np.zeros((count or 1, len(np.atleast_1d(xi)), self.n))

    def mean_latent(self, xi, spec):
        return np.zeros((len(np.atleast_1d(xi)), self.n))

    def predict(self, xi, spec):
        z = self.mean_latent(xi, spec)
        return z, z


def as_regressor(obj):
    if isinstance(obj, nnmod.EnsembleModel):
        return NNRegressor(obj)
    if isinstance(obj, gpmod.GpModel):
        return GPRegressor(obj)
    return obj


# ---------------------------------------------------------------------------
# composition


def _derivatives(f, xi):
    """First and second xi-derivatives of sampled latents along axis -2."""
    edge = 2 if f.shape[-2] >= 3 else 1
    df = np.gradient(f, xi, axis=-2, edge_order=edge)
    d2f = np.gradient(df, xi, axis=-2, edge_order=edge)
    return df, d2f


def compose(model: RobotModel, spec: ProblemSpec, xi, latent) -> list[Trajectory]:
    """Prior plus s(xi)*latent for each latent sample, with torques and energy.

    Velocities combine the analytic prior and scaling derivatives with central
    differences of the latent factor: r' = s' f + s f'.
    """
    xi = np.asarray(xi, dtype=float)
    latent = np.asarray(latent, dtype=float)
    if latent.ndim == 2:
        latent = latent[None]
    tf = spec.tf
    s, ds, d2s = (fn(xi)[None, :, None] for fn in
                  (scaling, scaling_derivative, scaling_second_derivative))
    df, d2f = _derivatives(latent, xi)
    r = s * latent
    dr = ds * latent + s * df
    d2r = d2s * latent + 2 * ds * df + s * d2f
    p = cubic_prior(spec, xi)
    dp = cubic_prior_derivative(spec, xi)
    d2p = cubic_prior_second_derivative(spec, xi)
    t = xi * tf
    out = []
    for k in range(latent.shape[0]):
        q = p + r[k]
        v = (dp + dr[k]) / tf
        a = (d2p + d2r[k]) / tf ** 2
        u = inverse_dynamics(model, q, v, a)
        energy = float(np.trapezoid(electrical_power(model, v, u), t))
        out.append(Trajectory(t, q, v, u, energy=energy, meta={"a": a}))
    return out


def prior_trajectory(model: RobotModel, spec: ProblemSpec, t=None, resolution: int = 101) -> Trajectory:
    if t is None:
        t = np.linspace(0.0, spec.tf, resolution)
    xi = np.asarray(t) / spec.tf
    xi[-1] = 1.0
    return compose(model, spec, xi, np.zeros((len(xi), spec.n)))[0]


def savings(model: RobotModel, traj: Trajectory, spec: ProblemSpec) -> float:
    """Percent energy saved by ``traj`` relative to the cubic law on the same grid."""
    ref = prior_trajectory(model, spec, traj.t).energy
    if not ref > 0:
        raise ValueError(f"prior energy {ref:.3e} J is not positive; savings undefined for {spec}")
    if traj.energy is None:
        from .dynamics import trajectory_energy
        trajectory_energy(model, traj)
    return 100.0 * (ref - traj.energy) / ref


def default_samples(regressor, n: int) -> int:
    """One draw per ensemble member; 100 GP draws for one joint, 10 otherwise."""
    reg = as_regressor(regressor)
    if isinstance(reg, NNRegressor):
        return reg.model.members
    return 100 if n == 1 else 10


@dataclass
class PlanRequest:
    spec: ProblemSpec
    resolution: int = 100
    samples: int | None = None
    """``None`` picks :func:`default_samples` for the regressor."""
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if self.samples is not None and self.samples < 1:
            raise ValueError("sample count must be at least 1")


@dataclass
class PlanResult:
    best: Trajectory
    best_index: int
    energies: np.ndarray
    mean: Trajectory
    prior_energy: float
    sigma_mean: float
    sigma_max: float
    wall_time: float
    samples: list[Trajectory] = field(default_factory=list, repr=False)

    @property
    def sample_best_savings(self) -> float:
        """Savings of the cheapest sample alone, ignoring the mean fallback."""
        return 100.0 * (self.prior_energy - float(self.energies.min())) / self.prior_energy

    @property
    def best_savings(self) -> float:
        return 100.0 * (self.prior_energy - self.best.energy) / self.prior_energy

    @property
    def mean_savings(self) -> float:
        return 100.0 * (self.prior_energy - self.mean.energy) / self.prior_energy


def plan(request: PlanRequest, model: RobotModel, regressor) -> PlanResult:
    """Sample residuals, compose them with the prior and keep the cheapest.

    The mean prediction competes as well, so the returned trajectory never
    costs more than the mean; ``best_index`` is -1 when the mean wins.
    """
    start = time.perf_counter()
    reg = as_regressor(regressor)
    spec = request.spec
    xi = np.linspace(0.0, 1.0, request.resolution)
    count = request.samples or default_samples(reg, spec.n)
    latents = reg.sample_latent(xi, spec, count, request.seed)
    trajs = compose(model, spec, xi, latents)
    mean_traj = compose(model, spec, xi, reg.mean_latent(xi, spec))[0]
    energies = np.array([t.energy for t in trajs])
    k = int(np.argmin(energies))
    best = trajs[k]
    if mean_traj.energy < best.energy:
        best, k = mean_traj, -1
    std = reg.predict(xi, spec)[1]
    prior_energy = compose(model, spec, xi, np.zeros((len(xi), spec.n)))[0].energy
    return PlanResult(best, k, energies, mean_traj, prior_energy,
                      float(np.mean(std)), float(np.max(std)),
                      time.perf_counter() - start, trajs)


# ---------------------------------------------------------------------------
# uncertainty and active learning


def uncertainty_score(regressor, spec: ProblemSpec, probe: int = PROBE_POINTS) -> float:
    std = as_regressor(regressor).predict(np.linspace(0.0, 1.0, probe), spec)[1]
    return float(np.mean(std))


def uncertainty_rank(regressor, candidates, probe: int = PROBE_POINTS):
    """Candidates by descending mean epistemic std; ties by (tf, q0, qf)."""
    scored = [(uncertainty_score(regressor, s, probe), s) for s in candidates]
    scored.sort(key=lambda item: (-item[0], item[1].tf, item[1].q0, item[1].qf))
    return scored


@dataclass
class ALReport:
    selected: list[ProblemSpec]
    scores: list[float]
    pre_savings: list[float]
    post_savings: list[float]
    ocp_savings: list[float]
    skipped: list[ProblemSpec] = field(default_factory=list)


def _plan_savings(model, reg, spec, resolution, samples=None, seed=0):
    return plan(PlanRequest(spec, resolution, samples, seed), model, reg).best_savings


def active_learn(regressor, model: RobotModel, candidates, k: int, *,
                 train_X=None, train_y=None, ocp_config: TranscriptionConfig | None = None,
                 resolution: int = 100, samples: int | None = None, seed: int = 0,
                 epochs: int = 200, lr: float = 1e-4, refit: bool = False):
    """Query the OCP solver at the ``k`` most uncertain candidates and update.

    GP models absorb the new rows exactly; ensembles are fine-tuned on the old
    rows (``train_X``/``train_y``) enriched with the new ones.
    Returns ``(updated_regressor, report)``.
    """
    inner = regressor.model if isinstance(regressor, (NNRegressor, GPRegressor)) else regressor
    if k <= 0:
        return inner, ALReport([], [], [], [], [])
    ranked = uncertainty_rank(inner, candidates)[:k]
    ocp_config = ocp_config or TranscriptionConfig()
    selected, scores, pre, ocp, rows, targets, skipped = [], [], [], [], [], [], []
    for score, spec in ranked:
        sol = solve_ocp(model, spec, ocp_config)
        if not sol.converged:
            skipped.append(spec)
            continue
        selected.append(spec)
        scores.append(score)
        pre.append(_plan_savings(model, inner, spec, resolution, samples, seed))
        ocp.append(sol.savings)
        K = len(sol.trajectory.t) - 1
        xi = np.arange(K + 1) / K
        rows.append(gpmod.spec_rows(xi, spec))
        targets.append(sol.trajectory.q - cubic_prior(spec, xi))
    if not rows:
        return inner, ALReport([], [], [], [], [], skipped)
    X_new, y_new = np.vstack(rows), np.vstack(targets)
    if isinstance(inner, gpmod.GpModel):
        updated = gpmod.add_data(inner, X_new, y_new, refit=refit)
    else:
        if train_X is None:
            raise ValueError("fine-tuning an ensemble needs its original training rows")
        updated = nnmod.fine_tune(inner, train_X, train_y, X_new, y_new, epochs=epochs,
                                  lr=lr, seed=seed)
    post = [_plan_savings(model, updated, s, resolution, samples, seed) for s in selected]
    return updated, ALReport(selected, scores, pre, post, ocp, skipped)


# ---------------------------------------------------------------------------
# ablation and latency


@dataclass
class Violations:
    position: np.ndarray
    velocity: np.ndarray

    @property
    def mean_position(self) -> float:
        return float(np.mean(self.position)) if self.position.size else 0.0

    @property
    def mean_velocity(self) -> float:
        return float(np.mean(self.velocity)) if self.velocity.size else 0.0


def boundary_violations(position_fn, specs, h: float = 1e-6) -> Violations:
    """|q(0) - q0|, |q(1) - qf| and one-sided velocity estimates at both ends.

    ``position_fn(xi, spec)`` returns joint positions (R, n).
    """
    pos, vel = [], []
    for spec in specs:
        q = position_fn(np.array([0.0, h, 1.0 - h, 1.0]), spec)
        pos.append(np.abs(q[0] - spec.q0).max())
        pos.append(np.abs(q[-1] - spec.qf).max())
        vel.append(np.abs(q[1] - q[0]).max() / (h * spec.tf))
        vel.append(np.abs(q[-1] - q[-2]).max() / (h * spec.tf))
    return Violations(np.array(pos), np.array(vel))


def naive_datasets(ds):
    """Raw position targets q = p + r for the naive (prior-free) regressors."""
    p = np.zeros_like(ds.r)
    for i, spec in enumerate(ds.specs):
        sel = ds.traj == i
        p[sel] = cubic_prior(spec, ds.xi[sel])
    return ds.inputs(), ds.r + p


@dataclass
class AblationResult:
    naive_nn_inside: Violations
    naive_gp_inside: Violations
    naive_nn_outside: Violations
    naive_gp_outside: Violations
    residual_nn_inside: Violations
    residual_gp_inside: Violations


def ablate_naive(ds, nn_config: nnmod.MlpConfig, gp_config: gpmod.GpConfig | None = None,
                 inside=None, outside=(), residual_nn=None, residual_gp=None) -> AblationResult:
    """Compare boundary violations of naive position regressors with residual ones.

    All regressors train on the ``train`` rows of ``ds``; ``inside`` defaults
    to every spec of the dataset, held-out ones included.
    """
    gp_config = gp_config or gpmod.GpConfig()
    train = ds.subset("train")
    X, q = naive_datasets(train)
    naive_nn = nnmod.train(X, q, replace(nn_config, scaled=False))
    naive_gp = gpmod.fit(X, q, replace(gp_config, scaled=False))
    residual_nn = residual_nn or nnmod.train(X, train.r, nn_config)
    residual_gp = residual_gp or gpmod.fit(X, train.r, gp_config)

    def naive(m):
        return lambda xi, spec: m.predict(xi, spec)[0]

    def residual(m):
        return lambda xi, spec: cubic_prior(spec, xi) + m.predict(xi, spec)[0]

    inside = list(ds.specs) if inside is None else list(inside)
    return AblationResult(
        boundary_violations(naive(naive_nn), inside),
        boundary_violations(naive(naive_gp), inside),
        boundary_violations(naive(naive_nn), outside),
        boundary_violations(naive(naive_gp), outside),
        boundary_violations(residual(residual_nn), inside),
        boundary_violations(residual(residual_gp), inside),
    )


@dataclass
class LatencyStats:
    times: np.ndarray
    limit: float

    @property
    def p50(self) -> float:
        return float(np.percentile(self.times, 50))

    @property
    def p99(self) -> float:
        return float(np.percentile(self.times, 99))

    @property
    def passed(self) -> bool:
        return self.p99 < self.limit


def realtime_limit(tf: float) -> float:
    return tf / 10.0


def bench_latency(request: PlanRequest, model: RobotModel, regressor,
                  repetitions: int = 50, warmup: int = 3) -> LatencyStats:
    reg = as_regressor(regressor)
    for _ in range(warmup):
        plan(request, model, reg)
    times = []
    for i in range(repetitions):
        req = PlanRequest(request.spec, request.resolution, request.samples, request.seed + i)
        t0 = time.perf_counter()
        plan(req, model, reg)
        times.append(time.perf_counter() - t0)
    return LatencyStats(np.array(times), realtime_limit(request.spec.tf))

"""Minimum-energy fixed-time point-to-point OCP by trapezoidal direct collocation.

Decision vector (boundary states are eliminated, never optimised)::

    z = [q_1..q_{K-1}, v_1..v_{K-1}, u_0..u_K]

so its size is ``3 n (K + 1) - 4 n``.  Equality constraints are the
trapezoidal defects of ``q' = v, v' = FD(q, v, u)`` divided by the step ``h``.
The NLP is solved by an augmented Lagrangian whose inner problems go to
L-BFGS in banded-Cholesky preconditioned coordinates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import cholesky_banded, solve_banded
from scipy.optimize import minimize

from .dynamics import (
    RobotModel,
    Trajectory,
    electrical_power,
    forward_dynamics_partials,
    inverse_dynamics,
)
from .prior import (
    ProblemSpec,
    cubic_prior,
    cubic_prior_derivative,
    cubic_prior_second_derivative,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranscriptionConfig:
    K: int | None = None
    """Number of intervals; ``None`` derives it from ``rate`` and tf."""
    rate: float = 100.0
    max_outer: int = 30
    max_inner: int = 5000
    refresh: int = 50
    defect_tol: float = 1e-8
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    objective_tol: float = 1e-9
    regularization: float = 1e-6

    def __post_init__(self):
        if self.K is not None and self.K < 10:
            raise ValueError("K must be at least 10")
        if self.defect_tol <= 0 or self.objective_tol <= 0 or self.rate <= 0:
            raise ValueError("tolerances and rate must be positive")

    def intervals(self, tf: float) -> int:
        if self.K is not None:
            return self.K
        return max(10, int(round(tf * self.rate)))

    def to_dict(self) -> dict:
        return asdict(self)


class CollocationNLP:
    """Objective, constraints and exact first derivatives for one OCP instance."""

    def __init__(self, model: RobotModel, spec: ProblemSpec, K: int):
        if spec.n != model.n:
            raise ValueError(f"spec has {spec.n} joints, model has {model.n}")
        self.model, self.spec, self.K = model, spec, K
        self.n = n = model.n
        self.h = spec.tf / K
        self.t = np.linspace(0.0, spec.tf, K + 1)
        self.q_bc = np.array([spec.q0, spec.qf])
        self.n_int = (K - 1) * n
        self.size = 2 * self.n_int + (K + 1) * n
        self.n_con = 2 * K * n
        self.weights = np.full(K + 1, self.h)
        self.weights[[0, -1]] *= 0.5
        self.r = model.joule_weights

    # -- layout ------------------------------------------------------------

    def unpack(self, z):
        K, n, m = self.K, self.n, self.n_int
        q = np.empty((K + 1, n))
        v = np.zeros((K + 1, n))
        q[0], q[-1] = self.q_bc
        q[1:-1] = z[:m].reshape(K - 1, n)
        v[1:-1] = z[m:2 * m].reshape(K - 1, n)
        u = z[2 * m:].reshape(K + 1, n)
        return q, v, u

    def pack(self, q, v, u):
        return np.concatenate([q[1:-1].ravel(), v[1:-1].ravel(), np.asarray(u).ravel()])

    def _pack_grad(self, gq, gv, gu):
        return np.concatenate([gq[1:-1].ravel(), gv[1:-1].ravel(), gu.ravel()])

    # -- callables ---------------------------------------------------------

    def objective(self, z) -> float:
        q, v, u = self.unpack(z)
        return float(self.weights @ electrical_power(self.model, v, u))

    def objective_grad(self, z):
        q, v, u = self.unpack(z)
        w = self.weights[:, None]
        return self._pack_grad(np.zeros_like(q), w * u, w * (2 * self.r * u + v))

    def constraints(self, z):
        q, v, u = self.unpack(z)
        a = forward_dynamics_partials(self.model, q, v, u)[0]
        return self._defects(q, v, a).ravel()

    def _defects(self, q, v, a):
        h = self.h
        cq = (q[1:] - q[:-1]) / h - 0.5 * (v[1:] + v[:-1])
        cv = (v[1:] - v[:-1]) / h - 0.5 * (a[1:] + a[:-1])
        return np.concatenate([cq, cv])

    def constraint_vjp(self, z, y, partials=None):
        """J_c(z)^T y without forming the Jacobian."""
        q, v, u = self.unpack(z)
        if partials is None:
            partials = forward_dynamics_partials(self.model, q, v, u)
        _, Aq, Av, Au = partials
        K, h = self.K, self.h
        y = np.asarray(y).reshape(2 * K, self.n)
        yq, yv = y[:K], y[K:]
        gq = np.zeros((K + 1, self.n))
        gv = np.zeros_like(gq)
        gq[1:] += yq / h
        gq[:-1] -= yq / h
        gv[1:] -= 0.5 * yq
        gv[:-1] -= 0.5 * yq
        gv[1:] += yv / h
        gv[:-1] -= yv / h
        ga = np.zeros_like(gq)
        ga[1:] -= 0.5 * yv
        ga[:-1] -= 0.5 * yv
        gq += np.einsum("kij,ki->kj", Aq, ga)
        gv += np.einsum("kij,ki->kj", Av, ga)
        gu = np.einsum("kij,ki->kj", Au, ga)
        return self._pack_grad(gq, gv, gu)

    def _columns(self):
        """Column of each (node, joint) variable in z; -1 where pinned."""
        K, n, m = self.K, self.n, self.n_int
        cq = -np.ones((K + 1, n), dtype=int)
        cv = -np.ones((K + 1, n), dtype=int)
        cq[1:-1] = np.arange(m).reshape(K - 1, n)
        cv[1:-1] = m + np.arange(m).reshape(K - 1, n)
        cu = 2 * m + np.arange((K + 1) * n).reshape(K + 1, n)
        return cq, cv, cu

    def constraint_jacobian_sparse(self, z, partials=None):
        q, v, u = self.unpack(z)
        if partials is None:
            partials = forward_dynamics_partials(self.model, q, v, u)
        _, Aq, Av, Au = partials
        K, n, h = self.K, self.n, self.h
        cq, cv, cu = self._columns()
        eye = np.broadcast_to(np.eye(n), (K, n, n))
        rows, cols, vals = [], [], []

        def put(row0, colmap, block):
            # block[k, i, j]: d(constraint row0 + k*n + i) / d(var colmap[k, j])
            r = (row0 + np.arange(K)[:, None] * n + np.arange(n)[None, :])[:, :, None]
            r = np.broadcast_to(r, block.shape)
            c = np.broadcast_to(colmap[:, None, :], block.shape)
            keep = c >= 0
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(block[keep])

        put(0, cq[1:], eye / h)
        put(0, cq[:-1], -eye / h)
        put(0, cv[1:], -0.5 * eye)
        put(0, cv[:-1], -0.5 * eye)
        r0 = K * n
        put(r0, cv[1:], eye / h - 0.5 * Av[1:])
        put(r0, cv[:-1], -eye / h - 0.5 * Av[:-1])
        put(r0, cq[1:], -0.5 * Aq[1:])
        put(r0, cq[:-1], -0.5 * Aq[:-1])
        put(r0, cu[1:], -0.5 * Au[1:])
        put(r0, cu[:-1], -0.5 * Au[:-1])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_con, self.size))

    def constraint_jacobian(self, z):
        """Dense Jacobian, built column by column from the VJP (for checks only)."""
        rows = []
        eye = np.eye(self.n_con)
        for i in range(self.n_con):
            rows.append(self.constraint_vjp(z, eye[i]))
        return np.array(rows)

    def augmented_lagrangian(self, z, lam, mu):
        q, v, u = self.unpack(z)
        partials = forward_dynamics_partials(self.model, q, v, u)
        c = self._defects(q, v, partials[0]).ravel()
        val = self.objective(z) + lam @ c + 0.5 * mu * c @ c
        grad = self.objective_grad(z) + self.constraint_vjp(z, lam + mu * c, partials)
        return val, grad

    def prior_guess(self):
        """Cubic positions/velocities with inverse-dynamics torques."""
        xi = self.t / self.spec.tf
        tf = self.spec.tf
        q = cubic_prior(self.spec, xi)
        v = cubic_prior_derivative(self.spec, xi) / tf
        a = cubic_prior_second_derivative(self.spec, xi) / tf ** 2
        u = inverse_dynamics(self.model, q, v, a)
        return self.pack(q, v, u)

    def trajectory(self, z) -> Trajectory:
        q, v, u = self.unpack(z)
        return Trajectory(self.t.copy(), q, v, u, energy=self.objective(z))


def transcribe(model: RobotModel, spec: ProblemSpec,
               config: TranscriptionConfig | None = None) -> CollocationNLP:
    config = config or TranscriptionConfig()
    return CollocationNLP(model, spec, config.intervals(spec.tf))


@dataclass
class OcpSolution:
    trajectory: Trajectory
    converged: bool
    defect_norm: float
    objective: float
    prior_energy: float
    iterations: int
    wall_time: float

    @property
    def savings(self) -> float:
        """Percent saved against the cubic law; NaN when the prior costs nothing."""
        if not self.prior_energy > 0:
            return float("nan")
        return 100.0 * (self.prior_energy - self.objective) / self.prior_energy


def max_defect(nlp: CollocationNLP, z) -> float:
    """Largest defect in physical units (rad, rad/s)."""
    return float(np.max(np.abs(nlp.constraints(z)), initial=0.0) * nlp.h)


class _Preconditioner:
    """Change of variables z = z0 + P^-1 U^-1 y from a banded Cholesky factor.

    ``U^T U`` approximates the augmented-Lagrangian Hessian by its
    Gauss-Newton part ``mu J^T J`` plus the Joule curvature of the controls,
    with variables reordered node by node so the matrix is banded.
    """

    def __init__(self, nlp: CollocationNLP, z, mu: float, reg: float):
        cq, cv, cu = nlp._columns()
        cols = np.concatenate([cq, cv, cu], axis=1).ravel()
        self.perm = cols[cols >= 0]
        d = np.full(nlp.size, reg)
        d[cu.ravel()] += 2 * (nlp.weights[:, None] * nlp.r).ravel()
        J = nlp.constraint_jacobian_sparse(z)
        H = (mu * (J.T @ J) + sparse.diags(d)).tocsr()[self.perm][:, self.perm]
        N = nlp.size
        bw = self.bw = 3 * nlp.n * 2 - 1
        ab = np.zeros((bw + 1, N))
        for k in range(bw + 1):
            ab[bw - k, k:] = H.diagonal(k)
        self.U = cholesky_banded(ab)
        self.Lt = np.zeros_like(self.U)
        for k in range(bw + 1):
            self.Lt[k, :N - k] = self.U[bw - k, k:]
        self.z0 = np.array(z, copy=True)

    def to_z(self, y):
        dz = np.empty_like(y)
        dz[self.perm] = solve_banded((0, self.bw), self.U, y, check_finite=False)
        return self.z0 + dz

    def grad_to_y(self, g):
        return solve_banded((self.bw, 0), self.Lt, g[self.perm], check_finite=False)


def solve_ocp(model: RobotModel, spec: ProblemSpec,
              config: TranscriptionConfig | None = None) -> OcpSolution:
    """Solve the OCP from the cubic-prior initial guess.

    Boundary states are pinned by elimination.  Returns the lowest-defect
    iterate flagged ``converged=False`` when the budget runs out.
    """
    config = config or TranscriptionConfig()
    start = time.perf_counter()
    nlp = transcribe(model, spec, config)
    z = nlp.prior_guess()
    prior_energy = nlp.objective(z)
    lam = np.zeros(nlp.n_con)
    mu = config.penalty0
    best = None
    iterations = 0
    prev_viol = prev_obj = np.inf
    converged = False

    for outer in range(config.max_outer):
        # inner problem; the preconditioner is refreshed every `chunk` steps
        budget = config.max_inner
        while budget > 0:
            pre = _Preconditioner(nlp, z, mu, config.regularization)
            chunk = min(config.refresh, budget)
            res = minimize(lambda y: _al_in_y(nlp, pre, y, lam, mu), np.zeros(nlp.size),
                           jac=True, method="L-BFGS-B",
                           options={"maxiter": chunk, "maxcor": 30,
                                    "ftol": 1e-15, "gtol": 1e-12})
            z = pre.to_z(res.x)
            iterations += res.nit
            budget -= chunk
            if res.nit < chunk:
                break
        c = nlp.constraints(z)
        viol = float(np.max(np.abs(c), initial=0.0) * nlp.h)
        obj = nlp.objective(z)
        log.debug("outer %d: obj=%.12g viol=%.3e mu=%.1e it=%d", outer, obj, viol, mu, iterations)
        if best is None or viol < best[1]:
            best = (z.copy(), viol)
        if viol <= config.defect_tol and abs(obj - prev_obj) <= config.objective_tol * max(1.0, abs(obj)):
            converged = True
            break
        lam = lam + mu * c
        if viol > 0.25 * prev_viol:
            mu = min(mu * config.penalty_growth, config.penalty_max)
        prev_viol, prev_obj = viol, obj

    if not converged:
        z, viol = best
        log.warning("OCP did not converge for %s (defect %.2e)", spec, viol)
    traj = nlp.trajectory(z)
    return OcpSolution(trajectory=traj, converged=converged, defect_norm=viol,
                       objective=traj.energy, prior_energy=prior_energy,
                       iterations=iterations, wall_time=time.perf_counter() - start)


def _al_in_y(nlp, pre, y, lam, mu):
    val, g = nlp.augmented_lagrangian(pre.to_z(y), lam, mu)
    return val, pre.grad_to_y(g)


def gradient_check(nlp: CollocationNLP, z=None, eps: float = 1e-6, rng=None) -> float:
    """Max relative error of analytic objective/constraint derivatives vs central FD."""
    rng = np.random.default_rng(rng)
    if z is None:
        z = nlp.prior_guess() + 0.1 * rng.standard_normal(nlp.size)
    errors = []

    def rel(a, b):
        scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
        return float(np.max(np.abs(a - b)) / scale)

    fd_obj = np.empty(nlp.size)
    fd_con = np.empty((nlp.n_con, nlp.size))
    for i in range(nlp.size):
        e = np.zeros(nlp.size)
        e[i] = eps
        fd_obj[i] = (nlp.objective(z + e) - nlp.objective(z - e)) / (2 * eps)
        fd_con[:, i] = (nlp.constraints(z + e) - nlp.constraints(z - e)) / (2 * eps)
    errors.append(rel(nlp.objective_grad(z), fd_obj))
    errors.append(rel(nlp.constraint_jacobian(z), fd_con))
    return max(errors)

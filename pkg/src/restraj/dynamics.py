"""Planar serial-link dynamics (1 or 2 revolute joints) and DC-motor power.

Joint angles are measured from the downward vertical, so ``q = 0`` is the
stable hanging configuration whenever gravity is non-zero.  With two links the
equations of motion read

    M(q) a + C(q, v) v + g(q) + B v = u

where ``B`` is a diagonal viscous-friction matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RobotModel:
    """Dynamic and motor-electrical parameters of a planar serial chain.

    Per-joint sequences have length ``n``.  ``inertias`` are rotational
    inertias about each link's centre of mass, so a point-mass pendulum uses
    ``0``.
    """

    masses: tuple[float, ...]
    lengths: tuple[float, ...]
    com: tuple[float, ...]
    inertias: tuple[float, ...]
    friction: tuple[float, ...]
    armature_resistance: tuple[float, ...]
    torque_constant: tuple[float, ...]
    gravity: float = 9.81
    name: str = "robot"

    def __post_init__(self):
        for f in ("masses", "lengths", "com", "inertias", "friction",
                  "armature_resistance", "torque_constant"):
            object.__setattr__(self, f, tuple(float(x) for x in getattr(self, f)))
        n = len(self.masses)
        if n not in (1, 2):
            raise ValueError(f"only 1- or 2-link chains are supported, got n={n}")
        for f in ("lengths", "com", "inertias", "friction",
                  "armature_resistance", "torque_constant"):
            if len(getattr(self, f)) != n:
                raise ValueError(f"{f} must have {n} entries")
        positive = ("masses", "lengths", "armature_resistance", "torque_constant")
        for f in positive:
            if min(getattr(self, f)) <= 0:
                raise ValueError(f"{f} must be strictly positive")
        for f in ("com", "inertias", "friction"):
            if min(getattr(self, f)) < 0:
                raise ValueError(f"{f} must be non-negative")
        if self.gravity < 0:
            raise ValueError("gravity must be non-negative")
        # the mass matrix must be positive definite for every q
        if n == 1:
            ok = self.inertias[0] + self.masses[0] * self.com[0] ** 2 > 0
        else:
            ok = (self.inertias[1] + self.masses[1] * self.com[1] ** 2 > 0
                  and self.inertias[0] + self.masses[0] * self.com[0] ** 2 > 0)
        if not ok:
            raise ValueError("parameters give a singular mass matrix")

    @property
    def n(self) -> int:
        return len(self.masses)

    @property
    def joule_weights(self) -> np.ndarray:
        """r_i = R_a / k_t**2 for each joint."""
        return np.asarray(self.armature_resistance) / np.asarray(self.torque_constant) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def pendulum(**overrides) -> RobotModel:
    params = dict(masses=(1.0,), lengths=(0.5,), com=(0.5,), inertias=(0.0,),
                  friction=(0.1,), armature_resistance=(1.0,), torque_constant=(1.0,),
                  gravity=9.81, name="pendulum")
    params.update(overrides)
    return RobotModel(**params)


def two_link(**overrides) -> RobotModel:
    """Horizontal SCARA-like arm built from uniform rods (gravity off by default)."""
    m, l = (1.0, 1.0), (0.5, 0.4)
    params = dict(masses=m, lengths=l, com=tuple(x / 2 for x in l),
                  inertias=tuple(mi * li ** 2 / 12 for mi, li in zip(m, l)),
                  friction=(0.1, 0.1), armature_resistance=(1.0, 1.0),
                  torque_constant=(1.0, 1.0), gravity=0.0, name="two_link")
    params.update(overrides)
    return RobotModel(**params)


def double_integrator(n: int = 1) -> RobotModel:
    """Unit-inertia, gravity-free, frictionless chain with r_i = 1 (n=1 only)."""
    if n != 1:
        raise ValueError("the free double integrator is defined for n=1")
    return RobotModel(masses=(1.0,), lengths=(1.0,), com=(1.0,), inertias=(0.0,),
                      friction=(0.0,), armature_resistance=(1.0,), torque_constant=(1.0,),
                      gravity=0.0, name="double_integrator")


_MODEL_KEYS = {"masses", "lengths", "com", "inertias", "friction",
               "armature_resistance", "torque_constant", "gravity", "name"}


def model_from_dict(d: dict) -> RobotModel:
    unknown = set(d) - _MODEL_KEYS - {"$schema", "units"}
    if unknown:
        raise ValueError(f"unknown model fields: {sorted(unknown)}")
    return RobotModel(**{k: v for k, v in d.items() if k in _MODEL_KEYS})


def load_model(path) -> RobotModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def save_model(model: RobotModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# rigid-body terms, vectorised over a leading batch axis


def _batch(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != n:
        raise ValueError(f"expected trailing dimension {n}, got {x.shape[-1]}")
    return x, single


def _inertia_consts(model: RobotModel):
    m, l, c, inert = model.masses, model.lengths, model.com, model.inertias
    if model.n == 1:
        return (inert[0] + m[0] * c[0] ** 2,)
    a1 = inert[0] + inert[1] + m[0] * c[0] ** 2 + m[1] * (l[0] ** 2 + c[1] ** 2)
    a2 = m[1] * l[0] * c[1]
    a3 = inert[1] + m[1] * c[1] ** 2
    return a1, a2, a3


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    q, single = _batch(q, model.n)
    if model.n == 1:
        M = np.full((len(q), 1, 1), _inertia_consts(model)[0])
    else:
        a1, a2, a3 = _inertia_consts(model)
        c2 = np.cos(q[:, 1])
        M = np.empty((len(q), 2, 2))
        M[:, 0, 0] = a1 + 2 * a2 * c2
        M[:, 0, 1] = M[:, 1, 0] = a3 + a2 * c2
        M[:, 1, 1] = a3
    return M[0] if single else M


def bias_forces(model: RobotModel, q, v) -> np.ndarray:
    """C(q, v) v + g(q) + B v."""
    q, single = _batch(q, model.n)
    v, _ = _batch(v, model.n)
    m, l, c, grav = model.masses, model.lengths, model.com, model.gravity
    B = np.asarray(model.friction)
    if model.n == 1:
        h = (m[0] * c[0] * grav * np.sin(q) + B * v)
    else:
        a2 = _inertia_consts(model)[1]
        s2 = a2 * np.sin(q[:, 1])
        s12 = np.sin(q[:, 0] + q[:, 1])
        v1, v2 = v[:, 0], v[:, 1]
        h = np.empty_like(q)
        h[:, 0] = (-s2 * (2 * v1 * v2 + v2 ** 2)
                   + (m[0] * c[0] + m[1] * l[0]) * grav * np.sin(q[:, 0])
                   + m[1] * c[1] * grav * s12)
        h[:, 1] = s2 * v1 ** 2 + m[1] * c[1] * grav * s12
        h += B * v
    return h[0] if single else h


def gravity_torque(model: RobotModel, q) -> np.ndarray:
    return bias_forces(model, q, np.zeros_like(np.asarray(q, dtype=float)))


def inverse_dynamics(model: RobotModel, q, v, a) -> np.ndarray:
    """Joint torques u = M(q) a + C(q, v) v + g(q) + B v."""
    a_b, single = _batch(a, model.n)
    M = mass_matrix(model, np.atleast_2d(q))
    u = np.einsum("kij,kj->ki", M, a_b) + bias_forces(model, np.atleast_2d(q), np.atleast_2d(v))
    return u[0] if single else u


def forward_dynamics(model: RobotModel, q, v, u) -> np.ndarray:
    """Joint accelerations a = M(q)^-1 (u - C(q, v) v - g(q) - B v)."""
    u_b, single = _batch(u, model.n)
    q_b, v_b = np.atleast_2d(q), np.atleast_2d(v)
    M = mass_matrix(model, q_b)
    rhs = u_b - bias_forces(model, q_b, v_b)
    if model.n == 1:
        a = rhs / M[:, 0]
    else:
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] ** 2
        assert np.all(det > 0), "mass matrix lost positive definiteness"
        a = np.empty_like(rhs)
        a[:, 0] = (M[:, 1, 1] * rhs[:, 0] - M[:, 0, 1] * rhs[:, 1]) / det
        a[:, 1] = (M[:, 0, 0] * rhs[:, 1] - M[:, 0, 1] * rhs[:, 0]) / det
    return a[0] if single else a


def inverse_dynamics_partials(model: RobotModel, q, v, a):
    """Jacobians of ``inverse_dynamics`` w.r.t. q and v, each (N, n, n).

    Entry ``[k, i, j]`` is d u_i / d x_j at node k.
    """
    q, _ = _batch(q, model.n)
    v, _ = _batch(v, model.n)
    a, _ = _batch(a, model.n)
    N, n = q.shape
    m, l, c, grav = model.masses, model.lengths, model.com, model.gravity
    dq = np.zeros((N, n, n))
    dv = np.zeros((N, n, n))
    dv[:, np.arange(n), np.arange(n)] = model.friction
    if n == 1:
        dq[:, 0, 0] = m[0] * c[0] * grav * np.cos(q[:, 0])
        return dq, dv
    a2 = _inertia_consts(model)[1]
    s2, c2 = np.sin(q[:, 1]), np.cos(q[:, 1])
    v1, v2 = v[:, 0], v[:, 1]
    g12 = m[1] * c[1] * grav * np.cos(q[:, 0] + q[:, 1])
    dq[:, 0, 0] = (m[0] * c[0] + m[1] * l[0]) * grav * np.cos(q[:, 0]) + g12
    dq[:, 1, 0] = g12
    # d/dq2 of M a and the Coriolis vector
    dq[:, 0, 1] = (-a2 * s2 * (2 * a[:, 0] + a[:, 1])
                   - a2 * c2 * (2 * v1 * v2 + v2 ** 2) + g12)
    dq[:, 1, 1] = -a2 * s2 * a[:, 0] + a2 * c2 * v1 ** 2 + g12
    h = a2 * s2
    dv[:, 0, 0] += -2 * h * v2
    dv[:, 0, 1] += -2 * h * (v1 + v2)
    dv[:, 1, 0] += 2 * h * v1
    return dq, dv


def forward_dynamics_partials(model: RobotModel, q, v, u):
    """Accelerations and their Jacobians w.r.t. q, v and u (implicit function rule)."""
    q_b, v_b, u_b = np.atleast_2d(q), np.atleast_2d(v), np.atleast_2d(u)
    a = forward_dynamics(model, q_b, v_b, u_b)
    M = mass_matrix(model, q_b)
    Minv = np.linalg.inv(M)
    dq, dv = inverse_dynamics_partials(model, q_b, v_b, a)
    return a, -Minv @ dq, -Minv @ dv, Minv


# ---------------------------------------------------------------------------
# energy


def electrical_power(model: RobotModel, v, u) -> np.ndarray:
    """Instantaneous electrical power sum_i (r_i u_i^2 + v_i u_i), in W.

    Negative values (mechanical back-driving) are kept as-is.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.sum(model.joule_weights * u ** 2 + v * u, axis=-1)


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray | None = None
    u: np.ndarray | None = None
    energy: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float).T).T
        if self.t.ndim != 1 or len(self.t) < 3:
            raise ValueError("time grid needs at least 3 nodes")
        if not np.all(np.diff(self.t) > 0) or self.t[0] != 0.0:
            raise ValueError("time grid must start at 0 and strictly increase")
        for name in ("q", "v", "u"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.atleast_2d(np.asarray(arr, dtype=float).T).T
            if arr.shape[0] != len(self.t):
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {len(self.t)}")
            setattr(self, name, arr)

    @property
    def t_f(self) -> float:
        return float(self.t[-1])

    @property
    def n(self) -> int:
        return self.q.shape[1]


def trajectory_energy(model: RobotModel, traj: Trajectory) -> float:
    """Trapezoidal integral of electrical power; fills missing v/u by differencing."""
    if traj.v is None:
        traj.v = np.gradient(traj.q, traj.t, axis=0, edge_order=2)
    if traj.u is None:
        if len(traj.t) < 4:
            raise ValueError("cannot finite-difference accelerations with fewer than 4 nodes")
        a = np.gradient(traj.v, traj.t, axis=0, edge_order=2)
        traj.u = inverse_dynamics(model, traj.q, traj.v, a)
    power = electrical_power(model, traj.v, traj.u)
    traj.energy = float(np.trapezoid(power, traj.t))
    return traj.energy

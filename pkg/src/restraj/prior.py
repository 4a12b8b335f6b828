"""Cubic point-to-point prior and the boundary scaling function s(xi)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ProblemSpec:
    """Rest-to-rest motion from ``q0`` to ``qf`` in ``tf`` seconds."""

    tf: float
    q0: tuple[float, ...]
    qf: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "tf", float(self.tf))
        object.__setattr__(self, "q0", tuple(float(x) for x in np.atleast_1d(self.q0)))
        object.__setattr__(self, "qf", tuple(float(x) for x in np.atleast_1d(self.qf)))
        if not self.tf > 0:
            raise ValueError(f"tf must be positive, got {self.tf}")
        if len(self.q0) != len(self.qf):
            raise ValueError("q0 and qf must have the same length")

    @property
    def n(self) -> int:
        return len(self.q0)

    @property
    def features(self) -> np.ndarray:
        """(tf, q0..., qf...) as a flat vector."""
        return np.array((self.tf, *self.q0, *self.qf))

    def to_dict(self) -> dict:
        return {"tf": self.tf, "q0": list(self.q0), "qf": list(self.qf)}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        return cls(d["tf"], d["q0"], d["qf"])


def load_specs(path) -> list[ProblemSpec]:
    """Read one spec object, or a list of them, from JSON."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "specs" in data:
        data = data["specs"]
    if isinstance(data, dict):
        data = [data]
    return [ProblemSpec.from_dict(d) for d in data]


def _check_xi(xi):
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0) or np.any(xi > 1):
        raise ValueError("normalized time must lie in [0, 1]")
    return xi


def blend(xi):
    """3 xi^2 - 2 xi^3, the shape of the cubic rest-to-rest law."""
    xi = np.asarray(xi, dtype=float)
    return xi * xi * (3.0 - 2.0 * xi)


def cubic_prior(spec: ProblemSpec, xi) -> np.ndarray:
    """Positions of the cubic law at normalized times ``xi``; shape xi.shape + (n,)."""
    xi = _check_xi(xi)
    q0, qf = np.asarray(spec.q0), np.asarray(spec.qf)
    b = blend(xi)[..., None]
    # weighted form so that both end points are reproduced bit-exactly
    return (1.0 - b) * q0 + b * qf


def cubic_prior_derivative(spec: ProblemSpec, xi) -> np.ndarray:
    """dp/dxi; divide by tf for the physical velocity."""
    xi = np.asarray(xi, dtype=float)
    dq = np.asarray(spec.qf) - np.asarray(spec.q0)
    return dq * (6.0 * xi - 6.0 * xi * xi)[..., None]


def cubic_prior_second_derivative(spec: ProblemSpec, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    dq = np.asarray(spec.qf) - np.asarray(spec.q0)
    return dq * (6.0 - 12.0 * xi)[..., None]


def scaling(xi):
    """s(xi) = xi^2 (1 - xi)^2."""
    xi = np.asarray(xi, dtype=float)
    return xi * xi * (1.0 - xi) ** 2


def scaling_derivative(xi):
    xi = np.asarray(xi, dtype=float)
    return 4.0 * xi ** 3 - 6.0 * xi ** 2 + 2.0 * xi


def scaling_second_derivative(xi):
    xi = np.asarray(xi, dtype=float)
    return 12.0 * xi ** 2 - 12.0 * xi + 2.0

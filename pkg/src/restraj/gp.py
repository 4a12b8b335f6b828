"""Exact Gaussian-process residual regressor with a boundary-vanishing kernel.

Rows are ``(xi, tf, q0..., qf...)``.  ``xi`` enters the kernel raw (it already
lives in [0, 1]); every other column is standardized.  The covariance is

    k(x1, x2) = s(xi1) * sf2 * exp(-sum_j ((x1_j - x2_j) / l_j)^2) * s(xi2)

which is the covariance of ``s(xi) * f(x)`` for ``f ~ GP(0, sf2 * k_RBF)``.
Posterior samples are drawn for ``f`` and multiplied by ``s``, so every
sample is exactly zero, with zero slope, at ``xi = 0`` and ``xi = 1``.
One independent GP is kept per joint.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .prior import ProblemSpec, scaling, scaling_derivative

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# kernels on prepared rows (raw xi in column 0, other columns standardized)


def rbf(X1, X2, lengthscales, variance=1.0):
    X1 = np.atleast_2d(X1) / lengthscales
    X2 = np.atleast_2d(X2) / lengthscales
    d2 = (np.sum(X1 ** 2, 1)[:, None] + np.sum(X2 ** 2, 1)[None, :] - 2 * X1 @ X2.T)
    return variance * np.exp(-np.maximum(d2, 0.0))


def kernel(x1, x2, lengthscales, variance=1.0, scaled=True):
    """Gram matrix of the custom kernel (or a scalar for two single rows)."""
    single = np.ndim(x1) == 1 and np.ndim(x2) == 1
    X1, X2 = np.atleast_2d(x1), np.atleast_2d(x2)
    K = rbf(X1, X2, lengthscales, variance)
    if scaled:
        K = scaling(X1[:, 0])[:, None] * K * scaling(X2[:, 0])[None, :]
    return float(K[0, 0]) if single else K


def kernel_d10(x1, x2, lengthscales, variance=1.0):
    """d k / d xi1."""
    single = np.ndim(x1) == 1 and np.ndim(x2) == 1
    X1, X2 = np.atleast_2d(x1), np.atleast_2d(x2)
    R = rbf(X1, X2, lengthscales, variance)
    diff = X1[:, 0][:, None] - X2[:, 0][None, :]
    dR1 = R * (-2.0 * diff / lengthscales[0] ** 2)
    s1, s2 = scaling(X1[:, 0])[:, None], scaling(X2[:, 0])[None, :]
    ds1 = scaling_derivative(X1[:, 0])[:, None]
    K = ds1 * s2 * R + s1 * s2 * dR1
    return float(K[0, 0]) if single else K


def kernel_d01(x1, x2, lengthscales, variance=1.0):
    """d k / d xi2."""
    out = kernel_d10(np.atleast_2d(x2), np.atleast_2d(x1), lengthscales, variance).T
    return float(out[0, 0]) if np.ndim(x1) == 1 and np.ndim(x2) == 1 else out


def kernel_d11(x1, x2, lengthscales, variance=1.0):
    """d^2 k / d xi1 d xi2."""
    single = np.ndim(x1) == 1 and np.ndim(x2) == 1
    X1, X2 = np.atleast_2d(x1), np.atleast_2d(x2)
    R = rbf(X1, X2, lengthscales, variance)
    l2 = lengthscales[0] ** 2
    diff = X1[:, 0][:, None] - X2[:, 0][None, :]
    dR1 = R * (-2.0 * diff / l2)
    dR2 = -dR1
    dR12 = R * (2.0 / l2 - 4.0 * diff ** 2 / l2 ** 2)
    s1, s2 = scaling(X1[:, 0])[:, None], scaling(X2[:, 0])[None, :]
    ds1 = scaling_derivative(X1[:, 0])[:, None]
    ds2 = scaling_derivative(X2[:, 0])[None, :]
    K = ds1 * ds2 * R + ds1 * s2 * dR2 + s1 * ds2 * dR1 + s1 * s2 * dR12
    return float(K[0, 0]) if single else K


def cholesky(K, start=JITTER_START, limit=JITTER_MAX):
    """Cholesky factor, adding jitter from ``start`` doubling up to ``limit``."""
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = start
    eye = np.eye(len(K))
    while jitter <= limit:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 2
    raise NotPositiveDefinite(
        f"matrix of size {len(K)} not positive definite with jitter up to {limit:g}; "
        f"min diagonal {np.min(np.diag(K)):.3e}")


# ---------------------------------------------------------------------------
# model


@dataclass
class GpConfig:
    lr: float = 1e-2
    epochs: int = 100
    lengthscale: float = 1.0
    noise: float = 1e-4
    """Initial noise variance relative to the target variance."""
    max_rows: int = 4000
    seed: int = 0
    scaled: bool = True


@dataclass
class _JointGP:
    log_ls: np.ndarray
    log_sf2: float
    log_sn2: float
    L: np.ndarray | None = None
    alpha: np.ndarray | None = None
    jitter: float = 0.0

    @property
    def ls(self):
        return np.exp(self.log_ls)

    @property
    def sf2(self):
        return float(np.exp(self.log_sf2))

    @property
    def sn2(self):
        return float(np.exp(self.log_sn2))


@dataclass
class GpModel:
    X: np.ndarray
    Y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    y_scale: np.ndarray
    joints: list[_JointGP]
    scaled: bool = True
    history: list = field(default_factory=list)

    @property
    def n_out(self) -> int:
        return len(self.joints)

    def prepare(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.mean) / self.std
        Z[:, 0] = X[:, 0]
        return Z

    def _s(self, X):
        return scaling(X[:, 0]) if self.scaled else np.ones(len(X))

    def gram(self, j: int, X=None):
        """Noise-free kernel matrix of joint ``j`` on training rows (or ``X``)."""
        g = self.joints[j]
        Z = self.prepare(self.X if X is None else X)
        return kernel(Z, Z, g.ls, g.sf2, self.scaled)

    def refactor(self) -> "GpModel":
        for j, g in enumerate(self.joints):
            if len(self.X) == 0:
                g.L = g.alpha = None
                continue
            K = self.gram(j) + g.sn2 * np.eye(len(self.X))
            g.L, g.jitter = cholesky(K)
            g.alpha = cho_solve((g.L, True), self.Y[:, j] / self.y_scale[j])
        return self

    # -- inference -------------------------------------------------------------

    def latent_posterior(self, Xs, full_cov=True):
        """Posterior of the unscaled process f at ``Xs``, in residual units.

        Returns mean (N*, n) and covariance (n, N*, N*) (or variances (N*, n)).
        """
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Zs = self.prepare(Xs)
        Z = self.prepare(self.X) if len(self.X) else None
        s_train = self._s(self.X) if len(self.X) else None
        means, covs = [], []
        for j, g in enumerate(self.joints):
            c = self.y_scale[j]
            if Z is None:
                m = np.zeros(len(Xs))
                if full_cov:
                    cov = rbf(Zs, Zs, g.ls, g.sf2)
                else:
                    cov = np.full(len(Xs), g.sf2)
            else:
                Rs = rbf(Zs, Z, g.ls, g.sf2) * s_train[None, :]
                m = Rs @ g.alpha
                V = solve_triangular(g.L, Rs.T, lower=True)
                if full_cov:
                    cov = rbf(Zs, Zs, g.ls, g.sf2) - V.T @ V
                else:
                    cov = np.maximum(g.sf2 - np.sum(V * V, axis=0), 0.0)
            means.append(m * c)
            covs.append(cov * c * c)
        mean = np.stack(means, axis=-1)
        return (mean, np.stack(covs)) if full_cov else (mean, np.stack(covs, axis=-1))

    def posterior(self, Xs, full_cov=True):
        """Posterior mean and covariance of the residual itself."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        s = self._s(Xs)
        mean, cov = self.latent_posterior(Xs, full_cov)
        if full_cov:
            return mean * s[:, None], cov * s[None, :, None] * s[None, None, :]
        return mean * s[:, None], cov * (s ** 2)[:, None]

    def predict_rows(self, Xs):
        mean, var = self.posterior(Xs, full_cov=False)
        return mean, np.sqrt(var)

    def predict(self, xi, spec: ProblemSpec):
        return self.predict_rows(spec_rows(xi, spec))

    def sample_latent_rows(self, Xs, count: int, seed=None, z=None):
        """Joint draws of f at ``Xs``: (count, N*, n); ``z`` overrides the normals."""
        mean, cov = self.latent_posterior(Xs, full_cov=True)
        N = mean.shape[0]
        if z is None:
            z = np.random.default_rng(seed).standard_normal((count, N, self.n_out))
        out = np.empty((len(z), N, self.n_out))
        for j in range(self.n_out):
            scale = max(float(np.max(np.diag(cov[j]), initial=0.0)), 1e-300)
            L, _ = cholesky(cov[j] / scale, JITTER_START, JITTER_MAX)
            out[:, :, j] = mean[None, :, j] + np.sqrt(scale) * z[:, :, j] @ L.T
        return out

    def sample_rows(self, Xs, count: int, seed=None, z=None):
        """Residual samples ``mu + L z`` with ``L`` = diag(s) times the latent factor."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        return self.sample_latent_rows(Xs, count, seed, z) * self._s(Xs)[None, :, None]

    def sample(self, xi, spec: ProblemSpec, count: int, seed=None, z=None):
        return self.sample_rows(spec_rows(xi, spec), count, seed, z)

    def sample_latent(self, xi, spec: ProblemSpec, count: int = 10, seed=None):
        return self.sample_latent_rows(spec_rows(xi, spec), count, seed)

    def mean_latent(self, xi, spec: ProblemSpec):
        return self.latent_posterior(spec_rows(xi, spec), full_cov=False)[0]

    def mse(self, X, y) -> float:
        return float(np.mean((self.predict_rows(X)[0] - y) ** 2))

    def log_marginal_likelihood(self, j: int) -> float:
        g = self.joints[j]
        y = self.Y[:, j] / self.y_scale[j]
        return float(-0.5 * y @ g.alpha - np.sum(np.log(np.diag(g.L)))
                     - 0.5 * len(y) * np.log(2 * np.pi))


def spec_rows(xi, spec: ProblemSpec) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return np.column_stack([xi, np.broadcast_to(spec.features, (len(xi), len(spec.features)))])


def _lml_and_grad(Z, s, y, g: _JointGP):
    """Log marginal likelihood and its gradient w.r.t. (log l, log sf2, log sn2)."""
    N = len(y)
    R = rbf(Z, Z, g.ls, 1.0)
    Ksig = g.sf2 * s[:, None] * R * s[None, :]
    L, jitter = cholesky(Ksig + g.sn2 * np.eye(N))
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * np.log(2 * np.pi)
    Kinv = cho_solve((L, True), np.eye(N))
    W = np.outer(alpha, alpha) - Kinv
    grad_ls = np.empty(Z.shape[1])
    WK = W * Ksig
    for d in range(Z.shape[1]):
        D2 = (Z[:, d][:, None] - Z[:, d][None, :]) ** 2
        grad_ls[d] = 0.5 * np.sum(WK * D2) * 2.0 / g.ls[d] ** 2
    grad_sf2 = 0.5 * np.sum(WK)
    grad_sn2 = 0.5 * np.trace(W) * g.sn2
    return lml, np.concatenate([grad_ls, [grad_sf2, grad_sn2]])


def fit(X, Y, config: GpConfig | None = None) -> GpModel:
    """Fit per-joint hyperparameters by Adam ascent on the exact marginal likelihood."""
    config = config or GpConfig()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Y = Y.reshape(len(X), -1) if Y.ndim < 2 else Y
    if len(X) > config.max_rows:
        keep = np.sort(np.random.default_rng(config.seed).choice(len(X), config.max_rows, replace=False))
        X, Y = X[keep], Y[keep]
    if len(X) and (np.any(X[:, 0] < 0) or np.any(X[:, 0] > 1)):
        raise ValueError("normalized time column must lie in [0, 1]")
    d = X.shape[1]
    mean = X.mean(axis=0) if len(X) else np.zeros(d)
    std = X.std(axis=0) if len(X) else np.ones(d)
    std[std == 0] = 1.0
    mean[0], std[0] = 0.0, 1.0
    y_scale = np.sqrt(np.mean(Y ** 2, axis=0)) if len(Y) else np.ones(Y.shape[1])
    y_scale = np.where(y_scale > 0, y_scale, 1.0)
    s = scaling(X[:, 0]) if config.scaled else np.ones(len(X))
    ms2 = float(np.mean(s ** 2)) if len(X) else 1.0
    joints = [_JointGP(np.full(d, np.log(config.lengthscale)), float(np.log(1.0 / max(ms2, 1e-12))),
                       float(np.log(config.noise))) for _ in range(Y.shape[1])]
    model = GpModel(X, Y, mean, std, y_scale, joints, config.scaled)
    if len(X) and np.any(Y != 0):
        Z = model.prepare(X)
        for j, g in enumerate(joints):
            y = Y[:, j] / y_scale[j]
            theta = np.concatenate([g.log_ls, [g.log_sf2, g.log_sn2]])
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
            trace = []
            for t in range(1, config.epochs + 1):
                lml, grad = _lml_and_grad(Z, s, y, g)
                trace.append(float(lml))
                # Adam ascent in log-parameter space
                m = 0.9 * m + 0.1 * grad
                v = 0.999 * v + 0.001 * grad ** 2
                theta = theta + config.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
                g.log_ls, g.log_sf2, g.log_sn2 = theta[:d].copy(), float(theta[d]), float(theta[d + 1])
            model.history.append(trace)
    return model.refactor()


def fit_dataset(ds, config: GpConfig | None = None) -> GpModel:
    tr = ds.rows("train")
    return fit(ds.inputs(tr), ds.r[tr], config)


def add_data(model: GpModel, X_new, Y_new, refit: bool = False,
             config: GpConfig | None = None) -> GpModel:
    """Append rows and rebuild the factorization; hyperparameters kept unless ``refit``."""
    X_new = np.asarray(X_new, dtype=float).reshape(-1, model.X.shape[1])
    if len(X_new) == 0:
        return model
    Y_new = np.asarray(Y_new, dtype=float).reshape(len(X_new), model.n_out)
    X = np.vstack([model.X, X_new])
    Y = np.vstack([model.Y, Y_new])
    if refit:
        return fit(X, Y, config)
    joints = [_JointGP(g.log_ls.copy(), g.log_sf2, g.log_sn2) for g in model.joints]
    return GpModel(X, Y, model.mean, model.std, model.y_scale, joints, model.scaled,
                   list(model.history)).refactor()


# ---------------------------------------------------------------------------
# persistence (training rows + hyperparameters; the factorization is rebuilt)


def save_gp(model: GpModel, path) -> None:
    header = {"format": "restraj-gp", "version": FORMAT_VERSION, "scaled": model.scaled,
              "log_sf2": [g.log_sf2 for g in model.joints],
              "log_sn2": [g.log_sn2 for g in model.joints]}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
             X=model.X, Y=model.Y, mean=model.mean, std=model.std, y_scale=model.y_scale,
             log_ls=np.array([g.log_ls for g in model.joints]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_gp(path) -> GpModel:
    with np.load(path) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("format") != "restraj-gp":
            raise ValueError(f"{path} is not a GP file")
        if header["version"] > FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header['version']}")
        joints = [_JointGP(ls.copy(), sf2, sn2) for ls, sf2, sn2
                  in zip(data["log_ls"], header["log_sf2"], header["log_sn2"])]
        return GpModel(data["X"].copy(), data["Y"].copy(), data["mean"].copy(),
                       data["std"].copy(), data["y_scale"].copy(), joints,
                       header["scaled"]).refactor()

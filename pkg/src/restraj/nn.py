"""Ensemble of tanh MLPs whose output is multiplied by s(xi).

All members share one architecture and are stored stacked along a leading
member axis, so a forward pass over the ensemble is a handful of batched
matmuls.  Backpropagation and the AdamW update are written out by hand.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .prior import ProblemSpec, scaling

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 50
    layers: int = 2
    members: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 500
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    scaled: bool = True
    """Multiply the raw output by s(xi); ``False`` gives the naive regressor."""

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1 or self.members < 1:
            raise ValueError("hidden width, depth and member count must be >= 1")
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ValueError("lr and weight_decay must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**d)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(X.mean(axis=0), std)

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std


def init_weights(sizes, members: int, seed: int) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases, one independent stream per member."""
    streams = np.random.default_rng(seed).spawn(members)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = np.stack([g.uniform(-bound, bound, (fan_in, fan_out)) for g in streams])
        params += [W, np.zeros((members, fan_out))]
    return params


def mlp_forward(params, Z):
    """Raw outputs (M, N, n_out) and the hidden activations needed for backprop."""
    acts = [np.broadcast_to(Z, (params[0].shape[0],) + Z.shape)]
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        pre = acts[-1] @ W + b[:, None, :]
        acts.append(np.tanh(pre) if i < n_layers - 1 else pre)
    return acts[-1], acts


def mlp_backward(params, acts, grad_out):
    """Weight gradients given dLoss/d(raw output), shape (M, N, n_out)."""
    n_layers = len(params) // 2
    grads = [None] * len(params)
    delta = grad_out
    for i in reversed(range(n_layers)):
        a_in = acts[i]
        grads[2 * i] = np.swapaxes(a_in, 1, 2) @ delta
        grads[2 * i + 1] = delta.sum(axis=1)
        if i > 0:
            delta = (delta @ np.swapaxes(params[2 * i], 1, 2)) * (1.0 - acts[i] ** 2)
    return grads


class AdamW:
    """Decoupled weight decay Adam, applied elementwise to every array."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            p *= 1 - self.lr * self.wd
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EnsembleModel:
    config: MlpConfig
    params: list[np.ndarray]
    x_norm: Standardizer
    out_scale: np.ndarray
    history: dict = field(default_factory=lambda: {"train": [], "test": []})

    @property
    def members(self) -> int:
        return self.params[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.params[-1].shape[-1]

    # -- evaluation ----------------------------------------------------------

    def latent(self, X) -> np.ndarray:
        """Per-member output before the s(xi) factor, in residual units: (M, N, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.x_norm is None:
            raise ValueError("model has no input standardization")
        raw, _ = mlp_forward(self.params, self.x_norm(X))
        return raw * self.out_scale

    def member_outputs(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.latent(X)
        if self.config.scaled:
            out = out * scaling(X[:, 0])[None, :, None]
        return out

    def predict_rows(self, X):
        out = self.member_outputs(X)
        return out.mean(axis=0), out.std(axis=0), out

    def predict(self, xi, spec: ProblemSpec):
        """Mean, epistemic std and per-member residuals at normalized times ``xi``."""
        return self.predict_rows(spec_rows(xi, spec))

    def forward(self, member: int, xi, spec: ProblemSpec) -> np.ndarray:
        return self.member_outputs(spec_rows(xi, spec))[member]

    def sample_latent(self, xi, spec: ProblemSpec, count: int | None = None, seed=None):
        """Member latents as samples; ``count`` keeps the first members only."""
        out = self.latent(spec_rows(xi, spec))
        return out if count is None else out[:count]

    def mse(self, X, y) -> float:
        mean = self.predict_rows(X)[0]
        return float(np.mean((mean - y) ** 2))

    def copy(self) -> "EnsembleModel":
        return EnsembleModel(self.config, [p.copy() for p in self.params],
                             Standardizer(self.x_norm.mean.copy(), self.x_norm.std.copy()),
                             self.out_scale.copy(),
                             {k: [list(h) for h in v] for k, v in self.history.items()})


def spec_rows(xi, spec: ProblemSpec) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return np.column_stack([xi, np.broadcast_to(spec.features, (len(xi), len(spec.features)))])


def _loss_and_grads(model: EnsembleModel, Z, xi, y):
    """Per-member mean-squared error on the residual and its weight gradients."""
    raw, acts = mlp_forward(model.params, Z)
    factor = model.out_scale[None, None, :]
    if model.config.scaled:
        factor = factor * scaling(xi)[None, :, None]
    err = raw * factor - y[None]
    N, n = y.shape
    loss = np.mean(err ** 2, axis=(1, 2))
    grads = mlp_backward(model.params, acts, 2.0 * err * factor / (N * n))
    return loss, grads


def _fit(model: EnsembleModel, X, y, epochs, lr, batch_size, seed, X_test=None, y_test=None):
    cfg = model.config
    opt = AdamW(model.params, lr, cfg.weight_decay)
    Z = model.x_norm(X)
    xi = X[:, 0]
    rng = np.random.default_rng(seed)
    N = len(X)
    bs = N if batch_size in (0, None) or batch_size >= N else batch_size
    for epoch in range(epochs):
        order = rng.permutation(N) if bs < N else np.arange(N)
        total = np.zeros(model.members)
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            loss, grads = _loss_and_grads(model, Z[idx], xi[idx], y[idx])
            if not np.all(np.isfinite(loss)):
                bad = np.flatnonzero(~np.isfinite(loss)).tolist()
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} for members {bad}; lr={lr} is likely too high")
            opt.step(model.params, grads)
            total += loss * len(idx)
        model.history["train"].append((total / N).tolist())
        if X_test is not None and len(X_test):
            mem = model.member_outputs(X_test)
            model.history["test"].append(np.mean((mem - y_test[None]) ** 2, axis=(1, 2)).tolist())
    return model


def _output_scale(X, y, scaled: bool) -> np.ndarray:
    rms_y = np.sqrt(np.mean(y ** 2, axis=0)) if len(y) else np.ones(y.shape[1])
    if scaled and len(X):
        rms_s = np.sqrt(np.mean(scaling(X[:, 0]) ** 2))
        scale = rms_y / max(rms_s, 1e-12)
    else:
        scale = rms_y
    scale = np.where(scale > 0, scale, 1.0)
    return scale


def train(X, y, config: MlpConfig, X_test=None, y_test=None) -> EnsembleModel:
    """Train every member on the same rows from its own random initialization.

    ``X`` rows are ``(xi, tf, q0..., qf...)``; ``y`` holds the targets.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    sizes = [X.shape[1]] + [config.hidden] * config.layers + [y.shape[1]]
    model = EnsembleModel(config, init_weights(sizes, config.members, config.seed),
                          Standardizer.fit(X), _output_scale(X, y, config.scaled))
    return _fit(model, X, y, config.epochs, config.lr, config.batch_size, config.seed + 1,
                X_test, y_test)


def train_dataset(ds, config: MlpConfig) -> EnsembleModel:
    tr, te = ds.rows("train"), ds.rows("test")
    return train(ds.inputs(tr), ds.r[tr], config, ds.inputs(te), ds.r[te])


def fine_tune(model: EnsembleModel, X_old, y_old, X_new, y_new, epochs: int = 200,
              lr: float = 1e-4, batch_size: int | None = None, seed: int = 0) -> EnsembleModel:
    """Continue training on the original rows enriched with new ones.

    Standardization and output scale stay frozen.
    """
    tuned = model.copy()
    if epochs == 0:
        return tuned
    X_new = np.asarray(X_new, dtype=float).reshape(-1, X_old.shape[1])
    if len(X_new) == 0:
        raise ValueError("fine_tune needs at least one new row")
    X = np.vstack([X_old, X_new])
    y = np.vstack([y_old, np.asarray(y_new, dtype=float).reshape(len(X_new), -1)])
    bs = model.config.batch_size if batch_size is None else batch_size
    return _fit(tuned, X, y, epochs, lr, bs, seed)


def gradient_check(model: EnsembleModel, X, y, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences of the loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    Z = model.x_norm(X)
    _, grads = _loss_and_grads(model, Z, X[:, 0], y)
    worst = 0.0
    for p, g in zip(model.params, grads):
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp = _loss_and_grads(model, Z, X[:, 0], y)[0].sum()
            p[idx] = old - eps
            lm = _loss_and_grads(model, Z, X[:, 0], y)[0].sum()
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-12)
        worst = max(worst, float(np.max(np.abs(fd - g)) / scale))
    return worst


# ---------------------------------------------------------------------------
# persistence


def save_ensemble(model: EnsembleModel, path) -> None:
    header = {"format": "restraj-nn", "version": FORMAT_VERSION,
              "config": asdict(model.config), "n_params": len(model.params),
              "history": model.history}
    arrays = {f"p{i}": p for i, p in enumerate(model.params)}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
             x_mean=model.x_norm.mean, x_std=model.x_norm.std,
             out_scale=model.out_scale, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_ensemble(path) -> EnsembleModel:
    with np.load(path) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("format") != "restraj-nn":
            raise ValueError(f"{path} is not an ensemble file")
        if header["version"] > FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header['version']}")
        params = [data[f"p{i}"].copy() for i in range(header["n_params"])]
        return EnsembleModel(MlpConfig(**header["config"]), params,
                             Standardizer(data["x_mean"].copy(), data["x_std"].copy()),
                             data["out_scale"].copy(), header["history"])

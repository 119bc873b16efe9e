"""Rectified-flow training of :class:`~splitflow.fields.MlpField` on synthetic scenes, and the Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, TrainingError
from .fields import Condition, MlpField, mlp_backward, mlp_forward
from .scenes import Scene


@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 5000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    cond_dropout: float = 0.1
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine"

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if self.lr < 0 or self.adam_eps <= 0:
            raise ConfigError("lr must be >= 0 and adam_eps > 0")
        if not 0.0 <= self.cond_dropout <= 1.0 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("probabilities and betas must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * step / self.steps))
        return self.lr


class Adam:
    def __init__(self, params: list, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_batch(fld, x0, embs, eps, sigmas):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    embs = np.asarray(embs, dtype=np.float64)
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise DimensionError("x0 must be a non-empty (B, C, H, W) batch")
    b = x0.shape[0]
    if x0.shape[1:] != tuple(fld.input_shape) or eps.shape != x0.shape:
        raise DimensionError(f"batch shapes {x0.shape}/{eps.shape} do not match field input {fld.input_shape}")
    if embs.shape != (b, fld.cond_dim) or sigmas.shape != (b,):
        raise DimensionError("condition or sigma batch does not match latent batch")
    return x0, embs, eps, sigmas


def fm_loss(fld, x0, embs, eps, sigmas):
    """Flow-matching loss ``mean((v(x_sigma, sigma, c) - (eps - x0))^2)``.

    Returns ``(loss, grads)``; ``grads`` is ``(dW list, db list)`` for an
    :class:`MlpField` and ``None`` for analytic backends.
    """
    x0, embs, eps, sigmas = _check_batch(fld, x0, embs, eps, sigmas)
    s = sigmas[:, None, None, None]
    xs = (1.0 - s) * x0 + s * eps
    target = (eps - x0).reshape(len(x0), -1)
    if isinstance(fld, MlpField):
        out, cache = mlp_forward(fld.params, fld.pack_inputs(xs, sigmas, embs))
        diff = out - target
        loss = float(np.mean(diff * diff))
        grads = mlp_backward(fld.params, cache, 2.0 * diff / diff.size)
        return loss, grads
    preds = np.stack([fld.velocity(x, sg, Condition(e)) for x, sg, e in zip(xs, sigmas, embs)]).reshape(len(x0), -1)
    diff = preds - target
    return float(np.mean(diff * diff)), None


def draw_batch(scene: Scene, cfg: TrainConfig, rng: np.random.Generator):
    x0, _, embs = scene.sample(cfg.batch_size, rng)
    drop = rng.random(cfg.batch_size) < cfg.cond_dropout
    embs[drop] = 0.0
    eps = rng.standard_normal(x0.shape)
    sigmas = rng.random(cfg.batch_size)
    return x0, embs, eps, sigmas, drop


def train(fld: MlpField, scene: Scene, cfg: TrainConfig):
    """Adam on the flow-matching loss; returns ``(trained_field, loss_curve)``. ``fld`` is not modified."""
    if not isinstance(fld, MlpField):
        raise ConfigError("only the mlp backend is trainable")
    if tuple(scene.shape) != fld.input_shape or scene.cond_dim != fld.cond_dim:
        raise DimensionError("scene shape/cond_dim do not match the field")
    params = fld.params.copy()
    out = MlpField(params, fld.input_shape, fld.cond_dim)
    opt = Adam(params.tensors(), cfg.lr, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        x0, embs, eps, sigmas, _ = draw_batch(scene, cfg, rng)
        loss, (dws, dbs) = fm_loss(out, x0, embs, eps, sigmas)
        if not np.isfinite(loss):
            raise TrainingError("loss became non-finite", step=step)
        losses[step] = loss
        grads = []
        for dw, db in zip(dws, dbs):
            grads += [dw, db]
        opt.step(grads, cfg.lr_at(step))
    return out, losses


def generate_many(fld, embs, steps: int, seed: int) -> np.ndarray:
    """Euler-integrate from pure noise (sigma=1) to data (sigma=0) for a batch of conditions."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    embs = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((len(embs), *fld.input_shape))
    dt = 1.0 / steps
    batched = hasattr(fld, "velocity_batch")
    conds = None if batched else [Condition(e) for e in embs]
    for i in range(steps, 0, -1):
        sigma = i / steps
        if batched:
            v = fld.velocity_batch(x, np.full(len(x), sigma), embs)
        else:
            v = np.stack([fld.velocity(xi, sigma, c) for xi, c in zip(x, conds)])
        x = x - dt * v
    return x


def generate(fld, cond: Condition, steps: int, seed: int) -> np.ndarray:
    return generate_many(fld, cond.embedding[None], steps, seed)[0]


def write_loss_csv(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("# splitflow-loss v1\nstep,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{float(v)!r}\n")

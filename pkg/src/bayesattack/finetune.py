"""Flat-minima fine-tuning of the posterior mean.

The outer gradient at ``w`` for a batch ``{(x_i, y_i)}`` is

    grad_w Lbar(w) + H_ww dw* + H_wx e*

with worst-case directions ``dw* = lam_w g_w / |g_w|`` and
``e_i* = lam_e g_xi / |g_xi|``. Both curvature products are forward
differences of parameter gradients with step ``gamma``:

    H_ww dw* ~ (grad_w Lbar(w + gamma dw*) - grad_w Lbar(w)) / gamma
    H_wx e*  ~ (grad_w Lbar(w; x + gamma e*) - grad_w Lbar(w)) / gamma

where ``Lbar`` is the batch-mean loss. The mixed term perturbs every input by
its own ``gamma e_i*`` in a single batched evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import numcore as nc
from .numcore import ContractViolation, RngStream
from .posterior import MomentCollector
from .zoo import SGD, Model, accuracy, forward, loss_ce, minibatches


class Objective(Protocol):
    """Batch loss with parameter and input gradients."""

    def loss_grad_w(self, w: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Batch-mean loss and its gradient w.r.t. ``w``."""

    def grad_x(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Per-example input gradients ``grad_{x_i} L(x_i, w)``, shaped like ``x``."""


class ModelObjective:
    def __init__(self, model: Model, y: np.ndarray) -> None:
        self.model = model
        self.y = np.asarray(y)

    def loss_grad_w(self, w, x):
        value, (g,) = nc.grad(lambda p: loss_ce(forward(self.model, x, p), self.y), w)
        return value, g

    def grad_x(self, w, x):
        _, (g,) = nc.grad(lambda xx: loss_ce(forward(self.model, xx, w), self.y, reduction="sum"), x)
        return g


class FinetuneDiverged(RuntimeError):
    def __init__(self, msg: str, last_stable_epoch: int) -> None:
        super().__init__(msg)
        self.last_stable_epoch = last_stable_epoch


@dataclass(frozen=True)
class FinetuneConfig:
    lambda_w: float = 1.0
    lambda_e: float = 1.0
    gamma: float = 0.1
    gamma_scaled: bool = False  # gamma = gamma / |dw*| for the parameter term
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 10
    swag_cadence: str = "epoch"  # "epoch" or a step count such as "20"
    swag_rank: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ContractViolation("gamma must be positive")
        if self.lambda_w < 0 or self.lambda_e < 0:
            raise ContractViolation("lambda values must be non-negative")
        if self.swag_cadence != "epoch" and not str(self.swag_cadence).isdigit():
            raise ContractViolation(f"bad swag cadence {self.swag_cadence!r}")


def _unit(v: np.ndarray, scale: float) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0 or scale == 0:
        return np.zeros_like(v)
    return (scale / norm) * v


def inner_max_dirs(obj: Objective, w: np.ndarray, x: np.ndarray, lambda_w: float, lambda_e: float,
                   g_w: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Worst-case parameter direction and per-example input directions."""
    if g_w is None:
        _, g_w = obj.loss_grad_w(w, x)
    dw = _unit(g_w, lambda_w)
    if lambda_e == 0:
        return dw, np.zeros_like(x)
    gx = obj.grad_x(w, x)
    flat = gx.reshape(len(gx), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    e = np.where(norms > 0, lambda_e * flat / np.where(norms > 0, norms, 1.0), 0.0)
    return dw, e.reshape(x.shape)


def hvp_ww_fd(obj: Objective, w: np.ndarray, x: np.ndarray, direction: np.ndarray, gamma: float,
              g0: np.ndarray | None = None) -> np.ndarray:
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    if g0 is None:
        _, g0 = obj.loss_grad_w(w, x)
    value, g1 = obj.loss_grad_w(w + gamma * direction, x)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at parameter offset gamma={gamma}")
    return (g1 - g0) / gamma


def hvp_wx_fd(obj: Objective, w: np.ndarray, x: np.ndarray, e: np.ndarray, gamma: float,
              g0: np.ndarray | None = None) -> np.ndarray:
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    if g0 is None:
        _, g0 = obj.loss_grad_w(w, x)
    value, g1 = obj.loss_grad_w(w, x + gamma * e)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at input offset gamma={gamma}")
    return (g1 - g0) / gamma


def finetune_gradient(obj: Objective, w: np.ndarray, x: np.ndarray,
                      cfg: FinetuneConfig) -> tuple[float, np.ndarray]:
    """Batch loss and the curvature-augmented outer gradient."""
    loss, g = obj.loss_grad_w(w, x)
    if cfg.lambda_w == 0 and cfg.lambda_e == 0:
        return loss, g
    dw, e = inner_max_dirs(obj, w, x, cfg.lambda_w, cfg.lambda_e, g_w=g)
    out = g
    if np.any(dw):
        gamma = cfg.gamma / np.linalg.norm(dw) if cfg.gamma_scaled else cfg.gamma
        out = out + hvp_ww_fd(obj, w, x, dw, gamma, g0=g)
    if np.any(e):
        out = out + hvp_wx_fd(obj, w, x, e, cfg.gamma, g0=g)
    return loss, out


@dataclass
class FinetuneResult:
    model: Model
    collector: MomentCollector
    history: list[float]
    train_accuracy: float


def finetune_run(model: Model, inputs: np.ndarray, labels: np.ndarray, cfg: FinetuneConfig,
                 stream: RngStream | None = None) -> FinetuneResult:
    stream = stream or RngStream(cfg.seed, "finetune")
    collector = MomentCollector(rank=cfg.swag_rank)
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    w = model.params.copy()
    every = None if cfg.swag_cadence == "epoch" else int(cfg.swag_cadence)
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        losses, sizes = [], []
        for idx in minibatches(len(labels), cfg.batch_size, stream):
            obj = ModelObjective(model, labels[idx])
            loss, g = finetune_gradient(obj, w, inputs[idx], cfg)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise FinetuneDiverged(f"non-finite fine-tuning loss in epoch {epoch}", epoch - 1)
            w = opt.step(w, g)
            step += 1
            if every and step % every == 0:
                collector.update(w)
            losses.append(loss)
            sizes.append(len(idx))
        history.append(float(np.average(losses, weights=sizes)))
        if every is None:
            collector.update(w)
    tuned = model.with_params(w)
    return FinetuneResult(tuned, collector, history, accuracy(tuned, inputs, labels))

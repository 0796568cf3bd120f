"""FGSM / I-FGSM / MI-FGSM and the Monte-Carlo Bayesian attack.

At iteration ``t`` the Bayesian attack ascends

    (1 / MS) * sum_j sum_k L(x + delta_t + e_k, y, w_j)

with fresh ``w_j ~ p(w)`` and ``e_k ~ p(e)`` drawn every iteration. The noise
``e_k`` only enters the gradient; it never counts against the budget and is
never part of the emitted example.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import ContractViolation, RngStream
from .posterior import (GaussianPosterior, MomentCollector, input_posterior_from_trajectory,
                        isotropic_posterior, noise_size, transform)
from .zoo import Model, forward, loss_ce, per_example_loss


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 8 / 255
    step: float = 1 / 255
    iterations: int = 50

    def __post_init__(self) -> None:
        if not self.epsilon > 0 or not self.step > 0 or self.iterations < 1:
            raise ContractViolation("budget needs epsilon > 0, step > 0 and at least one iteration")


@dataclass
class PerturbationState:
    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    momentum: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, x, y) -> "PerturbationState":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.asarray(y), np.zeros_like(x), np.zeros_like(x), 0)

    @property
    def x_adv(self) -> np.ndarray:
        return np.clip(self.x + self.delta, 0.0, 1.0)


@dataclass
class BayesSpec:
    """Sampling sources for the Monte-Carlo objective.

    ``param_posterior=None`` means the deterministic substitute; likewise
    ``input_posterior=None`` means no input noise. When
    ``input_trajectory_alpha`` is set, input noise comes from the diagonal
    variance of the accumulated perturbations seen so far in the attack,
    scaled by that alpha; ``input_posterior`` is then the isotropic fallback
    used before two trajectory points exist.
    """

    param_posterior: GaussianPosterior | None = None
    input_posterior: GaussianPosterior | None = None
    M: int = 1
    S: int = 1
    input_trajectory_alpha: float | None = None
    sample_scope: str = "example"  # "example" | "batch"

    def __post_init__(self) -> None:
        if self.M < 1 or self.S < 1:
            raise ContractViolation("M and S must be at least 1")
        if self.sample_scope not in ("example", "batch"):
            raise ContractViolation(f"unknown sample scope {self.sample_scope!r}")


def input_noise_posterior(sigma_e: float) -> GaussianPosterior:
    """Isotropic ``N(0, sigma_e^2 I)``; the mean is broadcast against the input."""
    return isotropic_posterior(np.zeros(()), sigma_e)


def _degenerate(post: GaussianPosterior | None) -> bool:
    return post is None or noise_size(post) == 0


def _input_scale(post: GaussianPosterior):
    if post.mode == "isotropic":
        return post.sigma
    # diagonal (trajectory) posterior, per-example shaped like the batch
    return np.sqrt(post.alpha * post.diag_variance) if post.beta == 0 else None


def _standard_normals(spec: BayesSpec, kp: int, ki: int, n: int, streams):
    """Pre-draw one iteration's normals: params ``[M, (B,) kp]``, inputs ``[M, S, B, ki]``.

    Per-example scope consumes exactly one call on each example's own stream,
    so an example's draws do not depend on the rest of the batch.
    """
    M, S = spec.M, spec.S
    if spec.sample_scope == "example":
        total = M * kp + M * S * ki
        z = np.stack([s.normal((total,)) for s in streams]) if total else np.zeros((n, 0))
        zp = z[:, :M * kp].reshape(n, M, kp).transpose(1, 0, 2)
        zi = z[:, M * kp:].reshape(n, M, S, ki).transpose(1, 2, 0, 3)
    else:
        zp = streams[0].normal((M, kp)) if kp else np.zeros((M, 0))
        zi = streams[0].normal((M, S, n, ki)) if ki else np.zeros((M, S, n, 0))
    return zp, zi


def bayes_loss_grad(model: Model, spec: BayesSpec, state: PerturbationState, streams: list[RngStream],
                    input_posterior: GaussianPosterior | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradient of the Monte-Carlo objective w.r.t. the perturbation.

    ``streams`` holds one stream per example (``sample_scope="example"``) or a
    single shared stream. Each ``e_k`` is evaluated under each ``w_j``.
    Returns ``(grad, loss)`` with ``loss`` the per-example average over the
    ``M x S`` samples.
    """
    x_cur = state.x + state.delta
    n = len(x_cur)
    y = np.asarray(state.y)
    pp = spec.param_posterior
    ip = input_posterior if input_posterior is not None else spec.input_posterior
    kp = 0 if _degenerate(pp) else noise_size(pp)
    if _degenerate(ip):
        ki, in_scale = 0, None
    else:
        in_scale = _input_scale(ip)
        if in_scale is None:
            raise ContractViolation("input posteriors must be isotropic or diagonal")
        ki = int(np.prod(x_cur.shape[1:]))
    zp, zi = _standard_normals(spec, kp, ki, n, streams)

    total = np.zeros_like(x_cur)
    loss_sum = np.zeros(n)
    for j in range(spec.M):
        params = None if pp is None else (pp.mean if kp == 0 else transform(pp, zp[j]))
        for k in range(spec.S):
            xin = x_cur if ki == 0 else x_cur + (ip.mean + in_scale * zi[j, k].reshape(x_cur.shape))
            tape = nc.GradTape()
            leaf = tape.watch(nc.Tensor(xin))
            logits = forward(model, leaf, params)
            loss = loss_ce(logits, y, reduction="sum")
            if not np.isfinite(loss.data):
                raise AttackError(f"non-finite loss for parameter sample {j}, input sample {k}")
            total += tape.backward(loss)[leaf.node]
            loss_sum += per_example_loss(logits.data, y)
    scale = 1.0 / (spec.M * spec.S)
    return total * scale, loss_sum * scale


def _project(state: PerturbationState, delta: np.ndarray, eps: float) -> np.ndarray:
    delta = np.clip(delta, -eps, eps)
    return np.clip(state.x + delta, 0.0, 1.0) - state.x


def step_ifgsm(state: PerturbationState, grad: np.ndarray, budget: AttackBudget,
               step: float | None = None) -> PerturbationState:
    eta = budget.step if step is None else step
    delta = _project(state, state.delta + eta * nc.sign(grad), budget.epsilon)
    return replace(state, delta=delta, t=state.t + 1)


def _l1_normalize(grad: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, grad.ndim))
    norm = np.abs(grad).sum(axis=axes, keepdims=True)
    # zero-norm rows keep the raw (all-zero) gradient
    return np.where(norm > 0, grad / np.where(norm > 0, norm, 1.0), grad)


def step_momentum(state: PerturbationState, grad: np.ndarray, budget: AttackBudget,
                  decay: float = 1.0, step: float | None = None) -> PerturbationState:
    if decay < 0:
        raise ContractViolation("momentum decay must be non-negative")
    eta = budget.step if step is None else step
    buf = decay * state.momentum + _l1_normalize(grad)
    delta = _project(state, state.delta + eta * nc.sign(buf), budget.epsilon)
    return replace(state, delta=delta, momentum=buf, t=state.t + 1)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    labels: np.ndarray
    trace: list[tuple[int, int, float, float]] = field(default_factory=list)
    fallback_iterations: int = 0

    def trace_array(self) -> np.ndarray:
        return np.array(self.trace, dtype=np.float64).reshape(-1, 4)


def attack_run(model: Model, spec: BayesSpec, budget: AttackBudget, x, y, variant: str,
               stream: RngStream, decay: float = 1.0, ids=None,
               hook: Callable[[int, np.ndarray], None] | None = None) -> AttackResult:
    """Run one attack over a pool and return the emitted examples plus a trace.

    Trace rows are ``(example id, iteration, loss, linf)`` where ``loss`` is
    the Monte-Carlo objective at the iterate the gradient was taken at.
    """
    if variant not in ("fgsm", "ifgsm", "mifgsm"):
        raise ContractViolation(f"unknown attack variant {variant!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = np.arange(len(y)) if ids is None else np.asarray(ids)
    if len(y) == 0:
        return AttackResult(x.copy(), y.copy(), [])
    if variant == "fgsm":
        budget = AttackBudget(budget.epsilon, budget.epsilon, 1)
    streams = ([stream.child(f"ex{int(i)}") for i in ids] if spec.sample_scope == "example"
               else [stream])
    traj = MomentCollector(rank=0) if spec.input_trajectory_alpha is not None else None
    state = PerturbationState.fresh(x, y)
    result = AttackResult(x, y)
    for t in range(budget.iterations):
        in_post = None
        if traj is not None:
            in_post = input_posterior_from_trajectory(
                traj, spec.input_trajectory_alpha,
                spec.input_posterior.sigma if spec.input_posterior is not None else 0.0)
            if in_post.meta.get("fallback"):
                result.fallback_iterations += 1
                in_post = input_noise_posterior(in_post.sigma)
        grad, loss = bayes_loss_grad(model, spec, state, streams, in_post)
        if variant == "mifgsm":
            state = step_momentum(state, grad, budget, decay)
        else:
            state = step_ifgsm(state, grad, budget)
        linf = np.abs(state.delta).reshape(len(y), -1).max(axis=1)
        result.trace.extend(zip(ids.tolist(), [t] * len(y), loss.tolist(), linf.tolist()))
        if traj is not None:
            traj.update(state.delta)
        if hook is not None:
            hook(t, state.delta)
    result.x_adv = state.x_adv
    return result


def plain_ifgsm(model: Model, x, y, budget: AttackBudget) -> np.ndarray:
    """Deterministic I-FGSM on the substitute, written independently of the
    Monte-Carlo path (used as a reference)."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.zeros_like(x)
    for _ in range(budget.iterations):
        tape = nc.GradTape()
        xin = tape.watch(nc.Tensor(x + delta))
        g = tape.backward(loss_ce(forward(model, xin), y, reduction="sum"))[xin.node]
        delta = np.clip(delta + budget.step * np.sign(g), -budget.epsilon, budget.epsilon)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return np.clip(x + delta, 0.0, 1.0)

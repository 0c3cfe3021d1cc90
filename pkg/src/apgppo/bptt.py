"""Short-horizon analytic policy gradients through the differentiable environments.

The exploratory objective for a batch of ``N`` lanes rolled out for ``h`` steps is

    loss = -1/(N h) * sum_i [ sum_t gamma^t r(s_t, a_t) + gamma^t_end V(s_end) ]

and :func:`apg_backward` evaluates its exact gradient with a reverse sweep
over the recorded tape.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffenv
from .nets import (
    AdamState,
    MlpParams,
    adam_step,
    clamp_log_std,
    clip_grad_norm,
    policy_backward,
    policy_forward,
    sample_reparam,
    value_backward,
    value_forward,
)

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A non-finite value appeared in a loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class ApgTape:
    """Per-step records of an ``N x h`` rollout, time-major."""

    gamma: float
    states: np.ndarray  # (h, N, ds)
    actions: np.ndarray  # (h, N, da) clipped
    noise: np.ndarray  # (h, N, da)
    rewards: np.ndarray  # (h, N)
    active: np.ndarray  # (h, N) lane still running at step t
    jac_f_s: np.ndarray  # (h, N, ds, ds)
    jac_f_a: np.ndarray  # (h, N, ds, da)
    grad_r_s: np.ndarray  # (h, N, ds)
    grad_r_a: np.ndarray  # (h, N, da)
    end_states: np.ndarray  # (N, ds)
    end_step: np.ndarray  # (N,) number of steps taken by each lane
    terminated: np.ndarray  # (N,) lane hit the termination predicate

    @property
    def n_lanes(self) -> int:
        return self.states.shape[1]

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


def tape_loss(tape: ApgTape, critic: MlpParams) -> float:
    """Re-evaluate the exploratory loss from recorded rewards and end states."""
    h, n = tape.horizon, tape.n_lanes
    disc = tape.gamma ** np.arange(h)
    total = 0.0
    for i in range(n):
        ret = float(np.sum(disc * tape.rewards[:, i] * tape.active[:, i]))
        ret += tape.gamma ** tape.end_step[i] * value_forward(critic, tape.end_states[i])
        total += ret
    return -total / (n * h)


def apg_rollout(spec: diffenv.EnvSpec, policy: MlpParams, critic: MlpParams, n: int, h: int,
                gamma: float, rng: np.random.Generator = None, start=None, noise=None):
    """Roll the policy out for ``h`` steps in ``n`` fresh lanes.

    ``start`` and ``noise`` override the reset states and reparameterisation
    noise; finite-difference checks replay a tape this way.
    """
    if n < 1 or h < 1:
        raise ValueError("N and h must be at least 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    ds, da = spec.dim_s, spec.dim_a
    s = diffenv.reset_batch(spec, n, rng) if start is None else np.array(start, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal((h, n, da))

    states = np.zeros((h, n, ds))
    actions = np.zeros((h, n, da))
    rewards = np.zeros((h, n))
    active = np.zeros((h, n), dtype=bool)
    js = np.zeros((h, n, ds, ds))
    ja = np.zeros((h, n, ds, da))
    grs = np.zeros((h, n, ds))
    gra = np.zeros((h, n, da))
    end_step = np.full(n, h)
    terminated = np.zeros(n, dtype=bool)
    running = np.ones(n, dtype=bool)

    for t in range(h):
        out = policy_forward(policy, s)
        a = spec.clip(sample_reparam(out, noise[t]))
        res = diffenv.step_batch(spec, s, a)
        if not np.all(np.isfinite(res.reward[running])):
            raise NumericalFailure(f"non-finite reward at APG step {t}", step=t)
        states[t], actions[t] = s, a
        active[t] = running
        rewards[t] = np.where(running, res.reward, 0.0)
        js[t], ja[t], grs[t], gra[t] = res.jac_f_s, res.jac_f_a, res.grad_r_s, res.grad_r_a
        # frozen lanes keep their terminal state
        s = np.where(running[:, None], res.next_sim, s)
        stop = running & (res.terminated | (t + 1 >= spec.episode_cap))
        end_step[stop] = t + 1
        terminated[stop & res.terminated] = True
        running = running & ~stop

    tape = ApgTape(gamma, states, actions, noise, rewards, active, js, ja, grs, gra,
                   s.copy(), end_step, terminated)
    loss = tape_loss(tape, critic)
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite exploratory loss", step=h)
    return tape, loss


def apg_backward(tape: ApgTape, policy: MlpParams, critic: MlpParams) -> MlpParams:
    """Exact gradient of the exploratory loss with respect to the policy parameters.

    Lanes are reduced in index order. The terminal value gradient is dropped
    for lanes that ended on the termination predicate.
    """
    h, n = tape.horizon, tape.n_lanes
    c = 1.0 / (n * h)
    gamma = tape.gamma

    _, dv_ds = value_backward(critic, tape.end_states, np.ones(n))
    v_coef = -c * gamma ** tape.end_step * (~tape.terminated)
    g_s = np.zeros_like(tape.end_states)
    grad = policy.zeros_like()
    flat = grad.flatten()

    for t in range(h - 1, -1, -1):
        # terminal value enters at the step where each lane stopped
        starts_here = tape.end_step == t + 1
        g_s = np.where(starts_here[:, None], v_coef[:, None] * dv_ds, g_s)
        act = tape.active[t][:, None]
        w = -c * gamma**t
        g_a = w * tape.grad_r_a[t] + np.einsum("ni,nij->nj", g_s, tape.jac_f_a[t])
        g_a = np.where(act, g_a, 0.0)
        g_direct = w * tape.grad_r_s[t] + np.einsum("ni,nij->nj", g_s, tape.jac_f_s[t])
        # clipping is treated as identity in the backward pass
        g_theta, g_pi_s = policy_backward(policy, tape.states[t], tape.noise[t], g_a)
        flat += g_theta.flatten()
        g_s = np.where(act, g_direct + g_pi_s, g_s)

    if not np.all(np.isfinite(flat)):
        raise NumericalFailure("non-finite APG gradient")
    return policy.unflatten(flat)


@dataclass
class ExploreResult:
    policy: MlpParams
    env_steps: int
    losses: list = field(default_factory=list)
    failed: bool = False


def make_exploratory_policy(policy: MlpParams, critic: MlpParams, spec: diffenv.EnvSpec,
                            n: int, h: int, epochs: int, lr: float, gamma: float,
                            rng: np.random.Generator, max_grad_norm: float = 1.0) -> ExploreResult:
    """Copy the primary policy and take ``epochs`` clipped Adam steps on the APG loss.

    The input policy is never modified. On a numerical failure the unmodified
    copy is returned with ``failed`` set.
    """
    theta = policy.copy()
    steps = n * h * epochs
    if epochs <= 0:
        return ExploreResult(theta, 0)
    opt = AdamState.zeros(theta.size)
    losses = []
    try:
        for _ in range(epochs):
            tape, loss = apg_rollout(spec, theta, critic, n, h, gamma, rng)
            grad = clip_grad_norm(apg_backward(tape, theta, critic), max_grad_norm)
            theta, opt = adam_step(theta, grad, opt, lr)
            clamp_log_std(theta)
            losses.append(loss)
    except NumericalFailure as exc:
        log.warning("APG update failed (%s); falling back to the primary policy", exc)
        return ExploreResult(policy.copy(), steps, losses, failed=True)
    return ExploreResult(theta, steps, losses)


@dataclass(frozen=True)
class QuadraticObjective:
    """Concave quadratic ``J(theta) = -(L/2) |theta|^2`` with ascent step ``step_size``."""

    curvature: float
    step_size: float
    dim: int = 2

    def __post_init__(self):
        if self.curvature <= 0 or self.step_size <= 0:
            raise ValueError("curvature and step size must be positive")

    def value(self, theta):
        return -0.5 * self.curvature * float(np.dot(theta, theta))

    def grad(self, theta):
        return -self.curvature * np.asarray(theta, dtype=np.float64)


def verify_lemma1(q: QuadraticObjective, theta0=None) -> bool:
    """Whether one gradient-ascent step of size ``q.step_size`` improves ``J``."""
    theta0 = np.ones(q.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    theta1 = theta0 + q.step_size * q.grad(theta0)
    return q.value(theta1) > q.value(theta0)


def lemma1_improvement_bound(q: QuadraticObjective, theta0) -> float:
    """Lower bound ``(eta - L eta^2 / 2) |grad J|^2`` on the improvement."""
    g = q.grad(theta0)
    eta, L = q.step_size, q.curvature
    return (eta - 0.5 * L * eta**2) * float(np.dot(g, g))

"""Deterministic differentiable toy environments.

Every environment exposes its one-step transition together with the analytic
Jacobians of the dynamics and the reward. Batched functions operate on arrays
of shape ``(B, dim_s)`` / ``(B, dim_a)``; the single-state :func:`reset` and
:func:`step` wrap them for the :class:`EnvState` value type.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ENV_NAMES = ("point_mass", "pendulum", "cartpole")

DT = 0.05
EPISODE_CAP = 200

# point mass
PM_DAMPING = 0.1
PM_TARGET = np.array([1.0, 1.0])
PM_ACTION_COST = 0.001

# pendulum
PEND_G = 9.81
PEND_LENGTH = 1.0
PEND_MASS = 1.0
PEND_DAMPING = 0.05

# cartpole
CP_G = 9.81
CP_CART_MASS = 1.0
CP_POLE_MASS = 0.1
CP_HALF_LENGTH = 0.5
CP_THETA_LIMIT = 0.2
CP_X_LIMIT = 2.4
CP_RESET_SCALE = 0.05


@dataclass(frozen=True)
class EnvSpec:
    name: str
    dim_s: int
    dim_a: int
    dt: float
    action_low: np.ndarray
    action_high: np.ndarray
    episode_cap: int

    def __post_init__(self):
        if self.dim_s <= 0 or self.dim_a <= 0:
            raise ValueError("dim_s and dim_a must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.all(np.asarray(self.action_low) < np.asarray(self.action_high)):
            raise ValueError("action_low must be below action_high elementwise")

    def clip(self, a):
        return np.clip(a, self.action_low, self.action_high)


@dataclass
class EnvState:
    sim: np.ndarray
    step_count: int = 0
    done: bool = False


@dataclass
class StepOutput:
    next: EnvState
    reward: float
    jac_f_s: np.ndarray
    jac_f_a: np.ndarray
    grad_r_s: np.ndarray
    grad_r_a: np.ndarray


@dataclass
class BatchStep:
    """Batched transition; every field has a leading batch axis."""

    next_sim: np.ndarray
    reward: np.ndarray
    jac_f_s: np.ndarray
    jac_f_a: np.ndarray
    grad_r_s: np.ndarray
    grad_r_a: np.ndarray
    terminated: np.ndarray = field(default=None)


def make_env(name: str) -> EnvSpec:
    if name == "point_mass":
        return EnvSpec(name, 4, 2, DT, np.array([-1.0, -1.0]), np.array([1.0, 1.0]), EPISODE_CAP)
    if name == "pendulum":
        return EnvSpec(name, 2, 1, DT, np.array([-2.0]), np.array([2.0]), EPISODE_CAP)
    if name == "cartpole":
        return EnvSpec(name, 4, 1, DT, np.array([-10.0]), np.array([10.0]), EPISODE_CAP)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def wrap_angle(x):
    """Map angles into (-pi, pi]."""
    return x - 2.0 * np.pi * np.ceil((x - np.pi) / (2.0 * np.pi))


# ---------------------------------------------------------------------------
# reset


def reset_batch(spec: EnvSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.name == "point_mass":
        p = rng.uniform(-0.5, 0.5, size=(n, 2))
        return np.concatenate([p, np.zeros((n, 2))], axis=1)
    if spec.name == "pendulum":
        # Uniform(-pi, pi] as pi - Uniform[0, 2pi)
        theta = np.pi - rng.uniform(0.0, 2.0 * np.pi, size=n)
        omega = rng.uniform(-1.0, 1.0, size=n)
        return np.stack([theta, omega], axis=1)
    if spec.name == "cartpole":
        return rng.uniform(-CP_RESET_SCALE, CP_RESET_SCALE, size=(n, 4))
    raise ValueError(f"unknown environment {spec.name!r}")


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    return EnvState(sim=reset_batch(spec, 1, rng)[0], step_count=0, done=False)


# ---------------------------------------------------------------------------
# dynamics


def _point_mass(s, a, dt):
    B = s.shape[0]
    p, v = s[:, :2], s[:, 2:]
    decay = 1.0 - PM_DAMPING * dt
    v_next = decay * v + dt * a
    p_next = p + dt * v_next
    nxt = np.concatenate([p_next, v_next], axis=1)

    diff = p - PM_TARGET
    bump = np.exp(-np.sum(diff**2, axis=1))
    reward = bump - PM_ACTION_COST * np.sum(a**2, axis=1)

    eye = np.eye(2)
    js = np.zeros((B, 4, 4))
    js[:, :2, :2] = eye
    js[:, :2, 2:] = dt * decay * eye
    js[:, 2:, 2:] = decay * eye
    ja = np.zeros((B, 4, 2))
    ja[:, :2, :] = dt * dt * eye
    ja[:, 2:, :] = dt * eye

    grs = np.zeros((B, 4))
    grs[:, :2] = -2.0 * diff * bump[:, None]
    gra = -2.0 * PM_ACTION_COST * a
    terminated = np.zeros(B, dtype=bool)
    return BatchStep(nxt, reward, js, ja, grs, gra, terminated)


def _pendulum(s, a, dt):
    B = s.shape[0]
    theta, omega = s[:, 0], s[:, 1]
    u = a[:, 0]
    inertia = PEND_MASS * PEND_LENGTH**2
    acc = -(PEND_G / PEND_LENGTH) * np.sin(theta) + u / inertia - PEND_DAMPING * omega
    omega_next = omega + dt * acc
    theta_next = theta + dt * omega_next
    nxt = np.stack([theta_next, omega_next], axis=1)

    err = wrap_angle(theta - np.pi)
    reward = -(err**2 + 0.1 * omega**2 + 0.001 * u**2)

    dw_dtheta = -dt * (PEND_G / PEND_LENGTH) * np.cos(theta)
    dw_domega = 1.0 - dt * PEND_DAMPING
    js = np.empty((B, 2, 2))
    js[:, 0, 0] = 1.0 + dt * dw_dtheta
    js[:, 0, 1] = dt * dw_domega
    js[:, 1, 0] = dw_dtheta
    js[:, 1, 1] = dw_domega
    ja = np.empty((B, 2, 1))
    ja[:, 0, 0] = dt * dt / inertia
    ja[:, 1, 0] = dt / inertia

    grs = np.stack([-2.0 * err, -0.2 * omega], axis=1)
    gra = (-0.002 * u)[:, None]
    terminated = np.zeros(B, dtype=bool)
    return BatchStep(nxt, reward, js, ja, grs, gra, terminated)


def _cartpole(s, a, dt):
    B = s.shape[0]
    x, xd, th, w = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    force = a[:, 0]
    total = CP_CART_MASS + CP_POLE_MASS
    ml = CP_POLE_MASS * CP_HALF_LENGTH
    sn, cs = np.sin(th), np.cos(th)

    temp = (force + ml * w**2 * sn) / total
    den = CP_HALF_LENGTH * (4.0 / 3.0 - CP_POLE_MASS * cs**2 / total)
    num = CP_G * sn - cs * temp
    thdd = num / den
    xdd = temp - ml * thdd * cs / total

    temp_th = ml * w**2 * cs / total
    temp_w = 2.0 * ml * w * sn / total
    temp_f = 1.0 / total
    den_th = 2.0 * CP_HALF_LENGTH * CP_POLE_MASS * cs * sn / total
    num_th = CP_G * cs + sn * temp - cs * temp_th
    thdd_th = (num_th * den - num * den_th) / den**2
    thdd_w = -cs * temp_w / den
    thdd_f = -cs * temp_f / den
    xdd_th = temp_th - (ml / total) * (thdd_th * cs - thdd * sn)
    xdd_w = temp_w - (ml / total) * cs * thdd_w
    xdd_f = temp_f - (ml / total) * cs * thdd_f

    xd_next = xd + dt * xdd
    x_next = x + dt * xd_next
    w_next = w + dt * thdd
    th_next = th + dt * w_next
    nxt = np.stack([x_next, xd_next, th_next, w_next], axis=1)

    reward = 1.0 - (th / CP_THETA_LIMIT) ** 2 - 0.01 * (force / 10.0) ** 2

    js = np.zeros((B, 4, 4))
    js[:, 1, 1] = 1.0
    js[:, 1, 2] = dt * xdd_th
    js[:, 1, 3] = dt * xdd_w
    js[:, 0, 0] = 1.0
    js[:, 0, 1] = dt
    js[:, 0, 2] = dt * dt * xdd_th
    js[:, 0, 3] = dt * dt * xdd_w
    js[:, 3, 2] = dt * thdd_th
    js[:, 3, 3] = 1.0 + dt * thdd_w
    js[:, 2, 2] = 1.0 + dt * dt * thdd_th
    js[:, 2, 3] = dt * (1.0 + dt * thdd_w)
    ja = np.empty((B, 4, 1))
    ja[:, 0, 0] = dt * dt * xdd_f
    ja[:, 1, 0] = dt * xdd_f
    ja[:, 2, 0] = dt * dt * thdd_f
    ja[:, 3, 0] = dt * thdd_f

    grs = np.zeros((B, 4))
    grs[:, 2] = -2.0 * th / CP_THETA_LIMIT**2
    gra = (-0.02 * force / 100.0)[:, None]
    terminated = (np.abs(th_next) > CP_THETA_LIMIT) | (np.abs(x_next) > CP_X_LIMIT)
    return BatchStep(nxt, reward, js, ja, grs, gra, terminated)


_DYNAMICS = {"point_mass": _point_mass, "pendulum": _pendulum, "cartpole": _cartpole}


def step_batch(spec: EnvSpec, sim, a) -> BatchStep:
    """Advance a batch of states by one step; ``terminated`` marks the predicate only."""
    sim = np.asarray(sim, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[1] != spec.dim_s:
        raise ValueError(f"state batch must have shape (B, {spec.dim_s}), got {sim.shape}")
    if a.shape != (sim.shape[0], spec.dim_a):
        raise ValueError(f"action batch must have shape ({sim.shape[0]}, {spec.dim_a}), got {a.shape}")
    return _DYNAMICS[spec.name](sim, a, spec.dt)


def step(spec: EnvSpec, s: EnvState, a) -> StepOutput:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    sim = np.asarray(s.sim, dtype=np.float64).reshape(-1)
    if sim.shape[0] != spec.dim_s:
        raise ValueError(f"state has dimension {sim.shape[0]}, expected {spec.dim_s}")
    if a.shape[0] != spec.dim_a:
        raise ValueError(f"action has dimension {a.shape[0]}, expected {spec.dim_a}")
    out = step_batch(spec, sim[None], a[None])
    count = s.step_count + 1
    done = bool(out.terminated[0]) or count >= spec.episode_cap
    return StepOutput(
        next=EnvState(out.next_sim[0], count, done),
        reward=float(out.reward[0]),
        jac_f_s=out.jac_f_s[0],
        jac_f_a=out.jac_f_a[0],
        grad_r_s=out.grad_r_s[0],
        grad_r_a=out.grad_r_a[0],
    )


def check_jacobians(spec: EnvSpec, s, a, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic derivative blocks and central differences.

    ``s`` and ``a`` may be single vectors or batches; the error is
    ``|analytic - fd| / max(1, |analytic|)`` maximised over every entry.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    sim = np.atleast_2d(np.asarray(getattr(s, "sim", s), dtype=np.float64))
    act = np.atleast_2d(np.asarray(a, dtype=np.float64))
    base = step_batch(spec, sim, act)

    fd_fs = np.empty_like(base.jac_f_s)
    fd_rs = np.empty_like(base.grad_r_s)
    for j in range(spec.dim_s):
        d = np.zeros(spec.dim_s)
        d[j] = eps
        hi = step_batch(spec, sim + d, act)
        lo = step_batch(spec, sim - d, act)
        fd_fs[:, :, j] = (hi.next_sim - lo.next_sim) / (2 * eps)
        fd_rs[:, j] = (hi.reward - lo.reward) / (2 * eps)

    fd_fa = np.empty_like(base.jac_f_a)
    fd_ra = np.empty_like(base.grad_r_a)
    for j in range(spec.dim_a):
        d = np.zeros(spec.dim_a)
        d[j] = eps
        hi = step_batch(spec, sim, act + d)
        lo = step_batch(spec, sim, act - d)
        fd_fa[:, :, j] = (hi.next_sim - lo.next_sim) / (2 * eps)
        fd_ra[:, j] = (hi.reward - lo.reward) / (2 * eps)

    worst = 0.0
    for analytic, fd in (
        (base.jac_f_s, fd_fs),
        (base.jac_f_a, fd_fa),
        (base.grad_r_s, fd_rs),
        (base.grad_r_a, fd_ra),
    ):
        rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
        worst = max(worst, float(rel.max()))
    return worst


def sample_state_actions(spec: EnvSpec, n: int, rng: np.random.Generator):
    """Random non-degenerate (state, action) pairs for gradient checks.

    Pendulum angles keep clear of the reward's wrap discontinuity and cartpole
    states stay inside the termination box.
    """
    if spec.name == "point_mass":
        s = rng.uniform(-2.0, 2.0, size=(n, 4))
    elif spec.name == "pendulum":
        theta = rng.uniform(0.1, 2 * np.pi - 0.1, size=n) * rng.choice([-1.0, 1.0], size=n)
        s = np.stack([theta, rng.uniform(-4.0, 4.0, size=n)], axis=1)
    elif spec.name == "cartpole":
        s = np.stack(
            [
                rng.uniform(-2.0, 2.0, size=n),
                rng.uniform(-2.0, 2.0, size=n),
                rng.uniform(-0.15, 0.15, size=n),
                rng.uniform(-2.0, 2.0, size=n),
            ],
            axis=1,
        )
    else:
        raise ValueError(f"unknown environment {spec.name!r}")
    a = rng.uniform(spec.action_low, spec.action_high, size=(n, spec.dim_a))
    return s, a

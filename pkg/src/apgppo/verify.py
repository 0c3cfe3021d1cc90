"""Finite-difference checks for every hand-derived derivative in the package."""
from __future__ import annotations

import numpy as np

from . import diffenv
from .bptt import apg_rollout, apg_backward
from .nets import (
    MlpParams,
    init_mlp,
    policy_backward,
    policy_forward,
    sample_reparam,
    value_backward,
    value_forward,
)


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at flat vector ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(x.size):
        d = np.zeros_like(x)
        d[j] = eps
        g[j] = (f(x + d) - f(x - d)) / (2.0 * eps)
    return g


def rel_error(analytic, reference) -> float:
    """Max absolute gap scaled by the largest reference magnitude (floored at 1e-12)."""
    analytic = np.ravel(analytic)
    reference = np.ravel(reference)
    scale = max(float(np.max(np.abs(reference))), 1e-12)
    return float(np.max(np.abs(analytic - reference))) / scale


def jacobian_errors(n=1000, seed=0, eps=1e-5) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for name in diffenv.ENV_NAMES:
        spec = diffenv.make_env(name)
        s, a = diffenv.sample_state_actions(spec, n, rng)
        out[name] = diffenv.check_jacobians(spec, s, a, eps)
    return out


def random_net(rng, sizes, policy=True) -> MlpParams:
    params = init_mlp(sizes, rng, out_gain=1.0, log_std_dim=sizes[-1] if policy else None)
    # non-zero biases and log-std so every gradient entry is exercised
    for b in params.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    if policy:
        params.log_std[:] = rng.normal(scale=0.3, size=params.log_std.shape)
    return params


def policy_grad_error(rng, dim_s=3, dim_a=2, hidden=(5, 4), batch=4) -> float:
    params = random_net(rng, [dim_s, *hidden, dim_a])
    obs = rng.normal(size=(batch, dim_s))
    noise = rng.normal(size=(batch, dim_a))
    up = rng.normal(size=(batch, dim_a))

    def loss_theta(flat):
        return float(np.sum(up * sample_reparam(policy_forward(params.unflatten(flat), obs), noise)))

    def loss_obs(flat):
        return float(np.sum(up * sample_reparam(policy_forward(params, flat.reshape(obs.shape)), noise)))

    grad, grad_s = policy_backward(params, obs, noise, up)
    e1 = rel_error(grad.flatten(), central_difference(loss_theta, params.flatten()))
    e2 = rel_error(grad_s, central_difference(loss_obs, obs.ravel()))
    return max(e1, e2)


def value_grad_error(rng, dim_s=3, hidden=(5, 4), batch=4) -> float:
    params = random_net(rng, [dim_s, *hidden, 1], policy=False)
    obs = rng.normal(size=(batch, dim_s))
    up = rng.normal(size=batch)

    def loss_phi(flat):
        return float(np.dot(up, value_forward(params.unflatten(flat), obs)))

    def loss_obs(flat):
        return float(np.dot(up, value_forward(params, flat.reshape(obs.shape))))

    grad, grad_s = value_backward(params, obs, up)
    e1 = rel_error(grad.flatten(), central_difference(loss_phi, params.flatten()))
    e2 = rel_error(grad_s, central_difference(loss_obs, obs.ravel()))
    return max(e1, e2)


def bptt_setup(env, n, h, rng, hidden=(8, 8), gamma=0.95):
    """Small policy/critic pair plus frozen start states and noise for replay.

    The policy is kept small enough that sampled actions stay inside the
    action bounds, where clipping is the identity.
    """
    spec = diffenv.make_env(env)
    policy = init_mlp([spec.dim_s, *hidden, spec.dim_a], rng, out_gain=0.3, log_std_dim=spec.dim_a)
    policy.log_std[:] = -2.0
    critic = random_net(rng, [spec.dim_s, *hidden, 1], policy=False)
    start = diffenv.reset_batch(spec, n, rng)
    noise = rng.standard_normal((h, n, spec.dim_a))
    return spec, policy, critic, start, noise, gamma


def replay_loss(spec, policy, critic, start, noise, gamma) -> float:
    n, h = start.shape[0], noise.shape[0]
    return apg_rollout(spec, policy, critic, n, h, gamma, start=start, noise=noise)[1]


def bptt_grad_error(env, n, h, seed=0, hidden=(8, 8), eps=1e-6):
    """Relative error of ``apg_backward`` against replayed central differences.

    Returns ``(error, tape)`` so callers can inspect clipping and termination.
    """
    rng = np.random.default_rng(seed)
    spec, policy, critic, start, noise, gamma = bptt_setup(env, n, h, rng, hidden)
    tape, _ = apg_rollout(spec, policy, critic, n, h, gamma, start=start, noise=noise)
    grad = apg_backward(tape, policy, critic).flatten()
    fd = central_difference(
        lambda flat: replay_loss(spec, policy.unflatten(flat), critic, start, noise, gamma),
        policy.flatten(),
        eps,
    )
    return rel_error(grad, fd), tape


def action_clipped(spec, policy, tape) -> bool:
    for t in range(tape.horizon):
        raw = sample_reparam(policy_forward(policy, tape.states[t]), tape.noise[t])
        if np.any(np.abs(raw - tape.actions[t]) > 0):
            return True
    return False


BPTT_TOLERANCE = {"point_mass": 1e-4, "pendulum": 1e-4, "cartpole": 1e-3}


def run_all(jacobian_samples=1000, seed=0) -> list:
    """Every check as ``(name, error, tolerance)``."""
    rows = []
    for env, err in jacobian_errors(jacobian_samples, seed).items():
        rows.append((f"jacobian/{env}", err, 1e-6))
    rng = np.random.default_rng(seed)
    rows.append(("nets/policy_backward", max(policy_grad_error(rng) for _ in range(10)), 1e-6))
    rows.append(("nets/value_backward", max(value_grad_error(rng) for _ in range(10)), 1e-6))
    for env in diffenv.ENV_NAMES:
        worst = 0.0
        for n in (1, 4):
            for h in (1, 2, 4, 8):
                err, _ = bptt_grad_error(env, n, h, seed=seed + 1000 * n + h)
                worst = max(worst, err)
        rows.append((f"bptt/{env}", worst, BPTT_TOLERANCE[env]))
    return rows

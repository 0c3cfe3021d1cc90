import numpy as np
import pytest

from apgppo import diffenv
from apgppo.bptt import (
    ApgTape,
    NumericalFailure,
    QuadraticObjective,
    apg_backward,
    apg_rollout,
    lemma1_improvement_bound,
    make_exploratory_policy,
    tape_loss,
    verify_lemma1,
)
from apgppo.nets import MlpParams, init_critic, init_mlp, init_policy, value_forward
from apgppo.verify import (
    BPTT_TOLERANCE,
    action_clipped,
    bptt_grad_error,
    bptt_setup,
    central_difference,
    rel_error,
    replay_loss,
)


def const_critic(dim_s, c):
    return MlpParams([np.zeros((1, dim_s))], [np.array([float(c)])], None)


def const_tape(n, h, gamma, reward, ds=2, da=1):
    return ApgTape(
        gamma=gamma,
        states=np.zeros((h, n, ds)),
        actions=np.zeros((h, n, da)),
        noise=np.zeros((h, n, da)),
        rewards=np.full((h, n), float(reward)),
        active=np.ones((h, n), dtype=bool),
        jac_f_s=np.tile(np.eye(ds), (h, n, 1, 1)),
        jac_f_a=np.ones((h, n, ds, da)),
        grad_r_s=np.zeros((h, n, ds)),
        grad_r_a=np.zeros((h, n, da)),
        end_states=np.zeros((n, ds)),
        end_step=np.full(n, h),
        terminated=np.zeros(n, dtype=bool),
    )


@pytest.fixture
def const_env(monkeypatch):
    """A two-state environment whose reward is the constant 1."""

    def dynamics(s, a, dt):
        B = s.shape[0]
        nxt = s + dt * np.concatenate([a, a], axis=1)
        js = np.tile(np.eye(2), (B, 1, 1))
        ja = np.full((B, 2, 1), dt)
        return diffenv.BatchStep(nxt, np.ones(B), js, ja, np.zeros((B, 2)), np.zeros((B, 1)),
                                 np.zeros(B, dtype=bool))

    monkeypatch.setitem(diffenv._DYNAMICS, "const", dynamics)
    real_reset = diffenv.reset_batch

    def reset_batch(spec, n, rng):
        if spec.name == "const":
            return rng.uniform(-1, 1, size=(n, 2))
        return real_reset(spec, n, rng)

    monkeypatch.setattr(diffenv, "reset_batch", reset_batch)
    return diffenv.EnvSpec("const", 2, 1, 0.05, np.array([-1.0]), np.array([1.0]), 200)


def test_loss_single_terminal_value():
    tape = const_tape(1, 1, 0.95, reward=0.0)
    assert tape_loss(tape, const_critic(2, 2.0)) == pytest.approx(-1.9, abs=1e-15)


def test_loss_unit_rewards():
    tape = const_tape(1, 2, 1.0, reward=1.0)
    assert tape_loss(tape, const_critic(2, 0.0)) == pytest.approx(-1.0, abs=1e-15)


def test_rollout_loss_matches_replay(rng):
    spec = diffenv.make_env("point_mass")
    pol = init_policy(4, 2, (8, 8), rng)
    cri = init_critic(4, (8, 8), rng)
    tape, loss = apg_rollout(spec, pol, cri, 5, 6, 0.95, np.random.default_rng(2))
    assert tape.states.shape == (6, 5, 4) and tape.end_states.shape == (5, 4)
    # independent scalar re-evaluation: re-step the environment lane by lane
    total = 0.0
    for i in range(5):
        s = tape.states[0, i]
        for t in range(6):
            out = diffenv.step(spec, diffenv.EnvState(s, t), tape.actions[t, i])
            total += 0.95**t * out.reward
            s = out.next.sim
        total += 0.95**6 * value_forward(cri, s)
    assert loss == pytest.approx(-total / 30, abs=1e-12)


def test_rollout_records_every_step(rng):
    spec = diffenv.make_env("pendulum")
    pol = init_policy(2, 1, (8, 8), rng)
    tape, _ = apg_rollout(spec, pol, init_critic(2, (8, 8), rng), 3, 4, 0.9, rng)
    assert tape.rewards.shape == (4, 3) and tape.active.all()
    assert np.all(tape.end_step == 4) and not tape.terminated.any()


def test_rollout_rejects_bad_arguments(rng):
    spec = diffenv.make_env("point_mass")
    pol, cri = init_policy(4, 2, (8,), rng), init_critic(4, (8,), rng)
    with pytest.raises(ValueError):
        apg_rollout(spec, pol, cri, 0, 4, 0.95, rng)
    with pytest.raises(ValueError):
        apg_rollout(spec, pol, cri, 1, 4, 0.0, rng)


def test_single_step_hand_chain(rng):
    # deterministic linear policy a = W s with V = 0: the only W-dependence is the action cost
    spec = diffenv.make_env("point_mass")
    W = 0.05 * rng.normal(size=(2, 4))
    pol = MlpParams([W], [np.zeros(2)], np.zeros(2))
    n = 3
    start = diffenv.reset_batch(spec, n, rng)
    tape, _ = apg_rollout(spec, pol, const_critic(4, 0.0), n, 1, 0.95, start=start, noise=np.zeros((1, n, 2)))
    grad = apg_backward(tape, pol, const_critic(4, 0.0))
    a = start @ W.T
    expect = sum(0.002 * np.outer(a[i], start[i]) for i in range(n)) / n
    np.testing.assert_allclose(grad.weights[0], expect, atol=1e-15)


def test_constant_reward_zero_gradient(rng):
    tape = const_tape(4, 3, 0.95, reward=1.0)
    tape.states = rng.normal(size=tape.states.shape)
    pol = init_mlp([2, 5, 1], rng, log_std_dim=1)
    grad = apg_backward(tape, pol, const_critic(2, 0.0))
    assert not np.any(grad.flatten())


def test_explore_zero_gradient_fixed_point(const_env, rng):
    pol = init_mlp([2, 6, 1], rng, out_gain=0.3, log_std_dim=1)
    res = make_exploratory_policy(pol, const_critic(2, 0.0), const_env, 8, 4, 5, 1e-2, 0.95, rng)
    np.testing.assert_array_equal(res.policy.flatten(), pol.flatten())
    assert res.env_steps == 8 * 4 * 5 and not res.failed


@pytest.mark.parametrize("env", diffenv.ENV_NAMES)
def test_bptt_matches_fd_grid(env):
    for n in (1, 4):
        for h in (1, 2, 4, 8):
            err, tape = bptt_grad_error(env, n, h, seed=100 * n + h)
            assert err < BPTT_TOLERANCE[env], (env, n, h, err)


def _terminating_setup():
    rng = np.random.default_rng(5)
    spec, pol, cri, _, noise, gamma = bptt_setup("cartpole", 3, 8, rng)
    start = np.array([[0.0, 0.0, 0.17, 0.8], [0.1, 0.0, -0.16, -0.9], [0.0, 0.0, 0.0, 0.0]])
    return spec, pol, cri, start, noise, gamma


def test_bptt_termination_with_flat_critic():
    spec, pol, _, start, noise, gamma = _terminating_setup()
    cri = const_critic(4, 1.5)
    tape, _ = apg_rollout(spec, pol, cri, 3, 8, gamma, start=start, noise=noise)
    assert tape.terminated[:2].all() and not tape.terminated[2]
    assert not action_clipped(spec, pol, tape)
    grad = apg_backward(tape, pol, cri).flatten()
    fd = central_difference(lambda f: replay_loss(spec, pol.unflatten(f), cri, start, noise, gamma), pol.flatten())
    assert rel_error(grad, fd) < 1e-4


def test_bptt_termination_detaches_value_path():
    # the terminal value of a terminated lane counts in the loss but passes no state gradient
    spec, pol, cri, start, noise, gamma = _terminating_setup()
    tape, _ = apg_rollout(spec, pol, cri, 3, 8, gamma, start=start, noise=noise)
    term = tape.terminated
    frozen_v = value_forward(cri, tape.end_states[term])
    coef = gamma ** tape.end_step[term] / (3 * 8)

    def detached(flat):
        t, loss = apg_rollout(spec, pol.unflatten(flat), cri, 3, 8, gamma, start=start, noise=noise)
        live_v = value_forward(cri, t.end_states[term])
        return loss + np.sum(coef * live_v) - np.sum(coef * frozen_v)

    grad = apg_backward(tape, pol, cri).flatten()
    fd = central_difference(detached, pol.flatten())
    assert rel_error(grad, fd) < 1e-4


def test_fd_setup_avoids_clipping():
    for env in diffenv.ENV_NAMES:
        _, tape = bptt_grad_error(env, 4, 8, seed=3)
        spec, pol, *_ = bptt_setup(env, 4, 8, np.random.default_rng(3))
        assert not action_clipped(spec, pol, tape)


def test_explore_does_not_mutate_and_is_deterministic(rng):
    spec = diffenv.make_env("point_mass")
    pol, cri = init_policy(4, 2, (16, 16), rng), init_critic(4, (16, 16), rng)
    before = pol.flatten().copy()
    a = make_exploratory_policy(pol, cri, spec, 32, 4, 3, 1e-3, 0.95, np.random.default_rng(7))
    b = make_exploratory_policy(pol, cri, spec, 32, 4, 3, 1e-3, 0.95, np.random.default_rng(7))
    np.testing.assert_array_equal(pol.flatten(), before)
    assert a.policy.flatten().tobytes() == b.policy.flatten().tobytes()
    assert not np.array_equal(a.policy.flatten(), before)
    assert len(a.losses) == 3


def test_explore_zero_epochs_is_identity(rng):
    spec = diffenv.make_env("point_mass")
    pol, cri = init_policy(4, 2, (16,), rng), init_critic(4, (16,), rng)
    res = make_exploratory_policy(pol, cri, spec, 8, 4, 0, 1e-3, 0.95, rng)
    assert res.policy.flatten().tobytes() == pol.flatten().tobytes()
    assert res.env_steps == 0 and res.policy is not pol


def test_explore_numerical_failure_falls_back(rng):
    spec = diffenv.make_env("point_mass")
    pol = init_policy(4, 2, (8,), rng)
    cri = init_critic(4, (8,), rng)
    cri.biases[-1][:] = np.nan
    res = make_exploratory_policy(pol, cri, spec, 4, 2, 3, 1e-3, 0.95, rng)
    assert res.failed
    np.testing.assert_array_equal(res.policy.flatten(), pol.flatten())
    with pytest.raises(NumericalFailure):
        apg_rollout(spec, pol, cri, 4, 2, 0.95, rng)


@pytest.mark.slow
def test_explore_improves_heldout_objective():
    """Default point-mass settings; paired held-out rollouts share starts and noise."""
    spec = diffenv.make_env("point_mass")
    wins = 0
    for trial in range(50):
        rng = np.random.default_rng([trial, 77])
        pol = init_policy(4, 2, (64, 64), rng)
        cri = init_critic(4, (64, 64), rng)
        res = make_exploratory_policy(pol, cri, spec, 256, 4, 5, 3e-5, 0.95, rng)
        start = diffenv.reset_batch(spec, 256, rng)
        noise = rng.standard_normal((4, 256, 2))
        base = replay_loss(spec, pol, cri, start, noise, 0.95)
        new = replay_loss(spec, res.policy, cri, start, noise, 0.95)
        wins += new <= base
    assert wins >= 40


def test_step_size_check_examples():
    assert verify_lemma1(QuadraticObjective(2.0, 0.5))
    assert not verify_lemma1(QuadraticObjective(2.0, 1.5))
    q = QuadraticObjective(2.0, 0.5)
    theta = np.array([0.3, -1.2])
    g = q.grad(theta)
    assert lemma1_improvement_bound(q, theta) == pytest.approx(g @ g / 4.0)
    gain = q.value(theta + q.step_size * g) - q.value(theta)
    assert gain >= lemma1_improvement_bound(q, theta) - 1e-12


def test_quadratic_rejects_nonpositive():
    with pytest.raises(ValueError):
        QuadraticObjective(0.0, 0.1)
    with pytest.raises(ValueError):
        QuadraticObjective(1.0, -0.1)

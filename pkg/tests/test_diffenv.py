import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apgppo import diffenv
from apgppo.diffenv import EnvSpec, EnvState, make_env, reset, step, step_batch


class MidpointRng:
    """Stand-in generator that always returns the middle of the requested range."""

    def uniform(self, low=0.0, high=1.0, size=None):
        return np.full(size, 0.5 * (low + high))


def gym_cartpole(s, force):
    # textbook cart-pole update written out independently of the package
    x, xd, th, w = s
    mc, mp, l, g = 1.0, 0.1, 0.5, 9.81
    total = mc + mp
    temp = (force + mp * l * w**2 * np.sin(th)) / total
    thacc = (g * np.sin(th) - np.cos(th) * temp) / (l * (4 / 3 - mp * np.cos(th) ** 2 / total))
    xacc = temp - mp * l * thacc * np.cos(th) / total
    xd2 = xd + 0.05 * xacc
    w2 = w + 0.05 * thacc
    return np.array([x + 0.05 * xd2, xd2, th + 0.05 * w2, w2])


def test_make_env_dimensions():
    dims = {"point_mass": (4, 2), "pendulum": (2, 1), "cartpole": (4, 1)}
    for name, (ds, da) in dims.items():
        spec = make_env(name)
        assert (spec.dim_s, spec.dim_a) == (ds, da)
        assert spec.dt == 0.05 and spec.episode_cap == 200
    with pytest.raises(ValueError):
        make_env("hopper")


def test_env_spec_invariants():
    with pytest.raises(ValueError):
        EnvSpec("x", 0, 1, 0.05, np.array([-1.0]), np.array([1.0]), 10)
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, 0.0, np.array([-1.0]), np.array([1.0]), 10)
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, 0.05, np.array([1.0]), np.array([1.0]), 10)


def test_point_mass_reset_midpoint():
    s = reset(make_env("point_mass"), MidpointRng())
    np.testing.assert_array_equal(s.sim, np.zeros(4))
    assert s.step_count == 0 and not s.done


def test_pendulum_reset_ranges():
    spec = make_env("pendulum")
    sims = diffenv.reset_batch(spec, 5000, np.random.default_rng(0))
    assert np.all(sims[:, 0] > -np.pi) and np.all(sims[:, 0] <= np.pi)
    assert np.all(np.abs(sims[:, 1]) <= 1.0)


@pytest.mark.parametrize("name", diffenv.ENV_NAMES)
def test_reset_deterministic(name):
    spec = make_env(name)
    a = reset(spec, np.random.default_rng(9))
    b = reset(spec, np.random.default_rng(9))
    assert a.sim.tobytes() == b.sim.tobytes()


def test_point_mass_unit_push():
    spec = make_env("point_mass")
    out = step(spec, EnvState(np.zeros(4)), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out.next.sim[2:], [0.05, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.next.sim[:2], [0.0025, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.jac_f_a[2:], 0.05 * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(out.jac_f_a[:2], 0.0025 * np.eye(2), atol=1e-15)
    assert out.next.step_count == 1


def test_pendulum_upright_reward_zero():
    out = step(make_env("pendulum"), EnvState(np.array([np.pi, 0.0])), np.array([0.0]))
    assert out.reward == 0.0


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 4001)
    w = diffenv.wrap_angle(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi + 1e-12)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-12)
    assert diffenv.wrap_angle(np.pi) == np.pi


def test_step_dimension_mismatch():
    spec = make_env("point_mass")
    with pytest.raises(ValueError):
        step(spec, EnvState(np.zeros(3)), np.zeros(2))
    with pytest.raises(ValueError):
        step(spec, EnvState(np.zeros(4)), np.zeros(1))
    with pytest.raises(ValueError):
        step_batch(spec, np.zeros((2, 4)), np.zeros((3, 2)))


def test_episode_cap_sets_done():
    spec = make_env("point_mass")
    out = step(spec, EnvState(np.zeros(4), step_count=198), np.zeros(2))
    assert not out.next.done
    out = step(spec, out.next, np.zeros(2))
    assert out.next.done and out.next.step_count == 200


def test_cartpole_termination():
    spec = make_env("cartpole")
    near_edge = EnvState(np.array([0.0, 0.0, 0.19, 2.0]))
    out = step(spec, near_edge, np.array([0.0]))
    assert out.next.sim[2] > 0.2 and out.next.done
    calm = step(spec, EnvState(np.zeros(4)), np.array([0.0]))
    assert not calm.next.done
    off_track = step(spec, EnvState(np.array([2.39, 1.0, 0.0, 0.0])), np.array([0.0]))
    assert off_track.next.done


def test_rewards_against_formulas(rng):
    n = 1000
    pm = make_env("point_mass")
    s, a = diffenv.sample_state_actions(pm, n, rng)
    a = pm.clip(a)
    r = step_batch(pm, s, a).reward
    expect = np.exp(-np.sum((s[:, :2] - 1.0) ** 2, axis=1)) - 0.001 * np.sum(a**2, axis=1)
    np.testing.assert_allclose(r, expect, rtol=0, atol=1e-14)
    assert np.all(r <= 1.0)

    cp = make_env("cartpole")
    s, a = diffenv.sample_state_actions(cp, n, rng)
    r = step_batch(cp, s, a).reward
    np.testing.assert_allclose(r, 1 - (s[:, 2] / 0.2) ** 2 - 0.01 * (a[:, 0] / 10) ** 2, atol=1e-14)


def test_dynamics_against_independent_update(rng):
    pm = make_env("point_mass")
    s, a = diffenv.sample_state_actions(pm, 1000, rng)
    nxt = step_batch(pm, s, a).next_sim
    v = s[:, 2:] + 0.05 * (a - 0.1 * s[:, 2:])
    np.testing.assert_allclose(nxt[:, 2:], v, atol=1e-14)
    np.testing.assert_allclose(nxt[:, :2], s[:, :2] + 0.05 * v, atol=1e-14)

    pend = make_env("pendulum")
    s, a = diffenv.sample_state_actions(pend, 1000, rng)
    nxt = step_batch(pend, s, a).next_sim
    acc = -9.81 * np.sin(s[:, 0]) + a[:, 0] - 0.05 * s[:, 1]
    w = s[:, 1] + 0.05 * acc
    np.testing.assert_allclose(nxt, np.stack([s[:, 0] + 0.05 * w, w], 1), atol=1e-13)

    cp = make_env("cartpole")
    s, a = diffenv.sample_state_actions(cp, 1000, rng)
    nxt = step_batch(cp, s, a).next_sim
    expect = np.array([gym_cartpole(si, ai[0]) for si, ai in zip(s, a)])
    np.testing.assert_allclose(nxt, expect, atol=1e-12)


@pytest.mark.parametrize("name", diffenv.ENV_NAMES)
def test_step_is_pure(name):
    spec = make_env(name)
    s, a = diffenv.sample_state_actions(spec, 50, np.random.default_rng(3))
    s0, a0 = s.copy(), a.copy()
    r1 = step_batch(spec, s, a)
    r2 = step_batch(spec, s, a)
    np.testing.assert_array_equal(s, s0)
    np.testing.assert_array_equal(a, a0)
    for f in ("next_sim", "reward", "jac_f_s", "jac_f_a", "grad_r_s", "grad_r_a"):
        assert getattr(r1, f).tobytes() == getattr(r2, f).tobytes()
        assert np.all(np.isfinite(getattr(r1, f)))


def test_jacobian_examples():
    pm = make_env("point_mass")
    s, a = diffenv.sample_state_actions(pm, 100, np.random.default_rng(0))
    assert diffenv.check_jacobians(pm, s, a, 1e-5) < 1e-9
    pend = make_env("pendulum")
    assert diffenv.check_jacobians(pend, np.array([np.pi / 4, 0.0]), np.array([0.5]), 1e-5) < 1e-6
    cp = make_env("cartpole")
    start = reset(cp, np.random.default_rng(0))
    assert diffenv.check_jacobians(cp, start, np.array([1.0]), 1e-5) < 1e-6


def test_check_jacobians_rejects_bad_eps():
    pm = make_env("point_mass")
    with pytest.raises(ValueError):
        diffenv.check_jacobians(pm, np.zeros(4), np.zeros(2), eps=0.0)
    with pytest.raises(ValueError):
        diffenv.check_jacobians(pm, np.zeros(4), np.zeros(2), eps=0.01)


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(diffenv.ENV_NAMES),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_jacobians_match_fd_property(name, seed):
    spec = make_env(name)
    s, a = diffenv.sample_state_actions(spec, 20, np.random.default_rng(seed))
    assert diffenv.check_jacobians(spec, s, a) < 1e-6

import math

import numpy as np
import pytest

from moc.env import FourRoomsEnv
from moc.features import OneHotFeatures, finite_diff_check
from moc.learning import (DegenerateRatioError, FlatActorCritic, LearnerConfig, actor_loss_and_grad,
                          apply_batch_updates, apply_step_updates, importance_targets, is_target, is_targets, multi_update_gate,
                          q_u_target, run_episode_moc, run_flat_ac, update_meta_policy,
                          update_policies_all_options, update_termination, update_values_all_options,
                          value_bound)
from moc.features import LinearSoftmaxPolicy
from moc.options import OptionSet, TransitionRecord, hallway_options, random_option_set


def _record(s=0, prev=1, o=0, a=1, r=0.5, s2=2, terminated=False, o2=0, terminal=False):
    return TransitionRecord(s, prev, o, a, r, s2, terminated, o2, s, s2, terminal)


def _tabular_set(seed=0, meta="softmax_q", eps=0.1, S=3, K=2, A=2):
    rng = np.random.default_rng(seed)
    os_ = random_option_set(S, K, A, rng, meta=meta, scale=0.7, epsilon_mu=eps, tau=0.5)
    return os_


# --- scalar reference implementations (plain floats, no shared code) -------------

def _softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    t = sum(e)
    return [v / t for v in e]


def _sig(x):
    x = max(-15.0, min(15.0, x))
    return 1.0 / (1.0 + math.exp(-x))


def _tables(os_, s):
    K, A = os_.n_options, os_.n_actions
    pi = [_softmax([float(os_.policy.weights[s, k, a]) for a in range(A)]) for k in range(K)]
    beta = [_sig(float(os_.nu[s, k])) for k in range(K)]
    q = [float(os_.theta[s, k]) for k in range(K)]
    logits = [float(os_.z[s, k]) for k in range(K)] if os_.meta == "param" else [v / os_.tau for v in q]
    sm = _softmax(logits)
    mu = [(1 - os_.epsilon_mu) * p + os_.epsilon_mu / K for p in sm]
    return pi, beta, mu, q, sm


def _upon(beta, mu, prev, o):
    return beta[prev] * mu[o] + (1 - beta[prev]) * (1.0 if o == prev else 0.0)


def _oracle_values(os_, rec, lr, gamma, all_options):
    pi, beta, mu, q, _ = _tables(os_, rec.state)
    pi2, beta2, mu2, q2, _ = _tables(os_, rec.next_state)
    theta = os_.theta.copy()
    K = os_.n_options
    for k in range(K):
        if all_options:
            w = _upon(beta, mu, rec.previous_option, k)
        else:
            w = 1.0 if k == rec.option else 0.0
        rho_a = pi[k][rec.action] / pi[rec.option][rec.action]
        rho_b = _upon(beta2, mu2, k, rec.next_option) / _upon(beta2, mu2, rec.option, rec.next_option)
        u = rho_a * rec.reward + rho_a * rho_b * gamma * q2[rec.next_option]
        theta[rec.state, k] = q[k] + lr * w * (u - q[k])
    return theta


# --- config and gate --------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(eta=1.5), dict(lr_values=0.0), dict(discount=1.0),
                                dict(algorithm="PPO"), dict(n_step=0), dict(is_ratio_cap=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        LearnerConfig(**kw)


def test_effective_eta():
    assert LearnerConfig(algorithm="OC", eta=0.7).effective_eta == 0.0
    assert LearnerConfig(algorithm="MOC", eta=0.7).effective_eta == 0.7


def test_gate_draws_no_random_number_at_extremes():
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    assert multi_update_gate(0.0, rng) is False and multi_update_gate(1.0, rng) is True
    assert rng.bit_generator.state == state


# --- targets ------------------------------------------------------------------------

def test_is_target_on_policy_case():
    os_ = _tabular_set()
    cfg = LearnerConfig(discount=0.9)
    rec = _record(o=1, o2=1)
    assert is_target(rec, 1, os_, cfg) == pytest.approx(0.5 + 0.9 * os_.theta[2, 1], abs=1e-14)
    term = _record(o=1, o2=1, terminal=True)
    assert is_target(term, 1, os_, cfg) == 0.5


def test_is_targets_match_scalar_formula():
    os_ = _tabular_set(seed=4)
    cfg = LearnerConfig(discount=0.95)
    rec = _record(prev=0, o=1, a=0, r=0.3, o2=0, terminated=True)
    pi, beta, mu, q, _ = _tables(os_, 0)
    _, beta2, mu2, q2, _ = _tables(os_, 2)
    for k in range(2):
        rho_a = pi[k][0] / pi[1][0]
        rho_b = _upon(beta2, mu2, k, 0) / _upon(beta2, mu2, 1, 0)
        assert is_targets(rec, os_, cfg)[k] == pytest.approx(rho_a * 0.3 + rho_a * rho_b * 0.95 * q2[0], rel=1e-13)
    literal = LearnerConfig(discount=0.95, action_ratio_on_bootstrap=False)
    k = 0
    rho_a = pi[k][0] / pi[1][0]
    rho_b = _upon(beta2, mu2, k, 0) / _upon(beta2, mu2, 1, 0)
    assert is_targets(rec, os_, literal)[k] == pytest.approx(rho_a * 0.3 + rho_b * 0.95 * q2[0], rel=1e-13)


def test_ratio_cap():
    u = importance_targets(np.array([0.9, 0.1]), np.array([0.5, 0.5]), 1, 1.0, 0.0, 0.9, cap=2.0)
    assert u[0] == 2.0 and u[1] == 1.0


def test_degenerate_ratio_raises():
    with pytest.raises(DegenerateRatioError):
        importance_targets(np.array([0.5, 1e-13]), np.array([0.5, 0.5]), 1, 1.0, 0.0, 0.9)
    with pytest.raises(DegenerateRatioError):
        importance_targets(np.array([[0.5, 0.5]]), np.array([[0.5, 0.0]]), np.array([1]), [1.0], [0.0], 0.9)


def test_q_u_target_examples():
    cfg = LearnerConfig(discount=0.9)
    os_ = OptionSet(3, 2, 2, epsilon_mu=1.0)  # uniform mu
    os_.theta[2] = [0.4, -0.2]
    assert q_u_target(_record(terminal=True), os_, cfg) == 0.5
    os_.nu[2] = -np.inf
    b0 = 1 / (1 + math.exp(15))
    cont = 0.5 + 0.9 * ((1 - b0) * 0.4 + b0 * 0.1)
    assert q_u_target(_record(o=0), os_, cfg) == pytest.approx(cont, abs=1e-15)
    assert cont == pytest.approx(0.5 + 0.9 * 0.4, abs=1e-7)
    os_.nu[2] = np.inf
    b1 = 1 / (1 + math.exp(-15))
    assert q_u_target(_record(o=0), os_, cfg) == pytest.approx(0.5 + 0.9 * ((1 - b1) * 0.4 + b1 * 0.1))
    assert q_u_target(_record(o=0), os_, cfg) == pytest.approx(0.5 + 0.9 * 0.1, abs=1e-7)


# --- value update ------------------------------------------------------------------------

@pytest.mark.parametrize("gate", [True, False])
def test_value_update_matches_scalar_oracle(gate):
    os_ = _tabular_set(seed=2)
    cfg = LearnerConfig(eta=0.5, lr_values=0.3, discount=0.9)
    rec = _record(prev=1, o=0, a=1, r=0.7, o2=1, terminated=True)
    expected = _oracle_values(os_, rec, 0.3, 0.9, all_options=gate)
    update_values_all_options(os_, rec, cfg, gate=gate)
    assert np.allclose(os_.theta, expected, rtol=0, atol=1e-14)


def test_value_update_eta_zero_is_single_option():
    a, b = _tabular_set(seed=3), _tabular_set(seed=3)
    rec = _record()
    update_values_all_options(a, rec, LearnerConfig(eta=0.0), rng=np.random.default_rng(0))
    expected = _oracle_values(b, rec, 0.8, 0.99, all_options=False)
    assert np.allclose(a.theta, expected, atol=1e-14)


def test_one_hot_weights_equal_single_option_update():
    """When p(.|s, o_prev) is one-hot on the executing option, both paths agree exactly."""
    a, b = _tabular_set(seed=5), _tabular_set(seed=5)
    for os_ in (a, b):
        os_.nu[0] = -np.inf  # previous option continues
    rec = _record(prev=0, o=0)
    cfg = LearnerConfig(eta=0.5)
    weights = np.array([1.0, 0.0])
    update_values_all_options(a, rec, cfg, weights=weights)
    update_values_all_options(b, rec, cfg, gate=False)
    update_policies_all_options(a, rec, cfg, weights=weights)
    update_policies_all_options(b, rec, cfg, gate=False)
    assert np.array_equal(a.theta, b.theta)
    assert np.array_equal(a.policy.weights, b.policy.weights)


# --- policy update -------------------------------------------------------------------------

def test_policy_update_eta_zero_is_option_critic_step():
    os_ = _tabular_set(seed=6)
    before = os_.policy.weights.copy()
    cfg = LearnerConfig(eta=0.0, lr_policy=0.25, discount=0.9)
    rec = _record(o=1, a=0, o2=1)
    pi, _, _, q, _ = _tables(os_, 0)
    _, beta2, mu2, q2, _ = _tables(os_, 2)
    v2 = sum(m * x for m, x in zip(mu2, q2))
    adv = 0.5 + 0.9 * ((1 - beta2[1]) * q2[1] + beta2[1] * v2) - q[1]
    update_policies_all_options(os_, rec, cfg, gate=False)
    delta = os_.policy.weights - before
    expected = [0.25 * adv * ((1.0 if a == 0 else 0.0) - pi[1][a]) for a in range(2)]
    assert np.allclose(delta[0, 1], expected, atol=1e-15)
    assert np.all(delta[0, 0] == 0) and np.all(delta[1:] == 0)


def test_policy_update_all_options_matches_scalar_oracle():
    os_ = _tabular_set(seed=7)
    before = os_.policy.weights.copy()
    cfg = LearnerConfig(lr_policy=0.4, discount=0.9)
    rec = _record(prev=0, o=1, a=1, r=0.2, o2=0, terminated=True)
    pi, beta, mu, q, _ = _tables(os_, 0)
    _, beta2, mu2, q2, _ = _tables(os_, 2)
    v2 = sum(m * x for m, x in zip(mu2, q2))
    update_policies_all_options(os_, rec, cfg, gate=True)
    for k in range(2):
        w = _upon(beta, mu, 0, k)
        adv = 0.2 + 0.9 * ((1 - beta2[k]) * q2[k] + beta2[k] * v2) - q[k]
        expected = [0.4 * w * adv * ((1.0 if a == 1 else 0.0) - pi[k][a]) for a in range(2)]
        assert np.allclose(os_.policy.weights[0, k] - before[0, k], expected, atol=1e-15)


def test_policy_update_zero_advantage_no_change():
    os_ = OptionSet(3, 2, 2)
    rec = _record(r=0.0)
    before = os_.policy.weights.copy()
    update_policies_all_options(os_, rec, LearnerConfig(), gate=True)
    assert np.array_equal(before, os_.policy.weights)


# --- rollouts ------------------------------------------------------------------------------

def test_one_record_rollout_is_the_one_step_update():
    a, b = _tabular_set(seed=8), _tabular_set(seed=8)
    rec = _record(prev=0, o=1, a=0, r=0.3, o2=0, terminated=True)
    cfg = LearnerConfig(eta=0.5, lr_values=0.3, lr_policy=0.2, discount=0.9)
    apply_step_updates(a, rec, cfg, gate=True)
    apply_batch_updates(b, [(rec, True)], cfg)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.policy.weights, b.policy.weights)
    assert np.array_equal(a.nu, b.nu)


def test_rollout_uses_n_step_returns():
    """Two records 0 -> 2 -> 1: the first bootstraps on r_2 + gamma * Q_U estimate of the second."""
    os_ = _tabular_set(seed=9)
    before_theta, before_pol = os_.theta.copy(), os_.policy.weights.copy()
    cfg = LearnerConfig(eta=0.0, lr_values=0.3, lr_policy=0.2, lr_termination=1e-9, discount=0.9)
    first = _record(s=0, prev=None, o=0, a=1, r=0.0, s2=2, o2=0)
    second = _record(s=2, prev=0, o=0, a=0, r=0.6, s2=1, o2=1, terminated=True)
    pi0, _, _, q0, _ = _tables(os_, 0)
    _, _, _, q2, _ = _tables(os_, 2)
    _, beta1, mu1, q1, _ = _tables(os_, 1)
    v1 = sum(m * x for m, x in zip(mu1, q1))
    g2 = 0.6 + 0.9 * ((1 - beta1[0]) * q1[0] + beta1[0] * v1)
    g1 = 0.0 + 0.9 * g2
    apply_batch_updates(os_, [(first, False), (second, False)], cfg)
    assert os_.theta[0, 0] - before_theta[0, 0] == pytest.approx(0.3 * (g1 - q0[0]), abs=1e-14)
    u2 = 0.6 + 0.9 * q1[1]
    assert os_.theta[2, 0] - before_theta[2, 0] == pytest.approx(0.3 * (u2 - q2[0]), abs=1e-14)
    expected = [0.2 * (g1 - q0[0]) * ((1.0 if a == 1 else 0.0) - pi0[0][a]) for a in range(2)]
    assert np.allclose(os_.policy.weights[0, 0] - before_pol[0, 0], expected, atol=1e-14)


def test_rollout_bootstrap_keeps_importance_ratio_on_first_step():
    os_ = _tabular_set(seed=10)
    cfg = LearnerConfig(lr_values=0.3, discount=0.9)
    rec = _record(prev=1, o=0, a=1, r=0.2, o2=1, terminated=True)
    pi, beta, mu, q, _ = _tables(os_, 0)
    _, beta2, mu2, _, _ = _tables(os_, 2)
    rho_a = pi[1][1] / pi[0][1]
    rho_b = _upon(beta2, mu2, 1, 1) / _upon(beta2, mu2, 0, 1)
    assert is_targets(rec, os_, cfg, bootstrap=5.0)[1] == pytest.approx(rho_a * 0.2 + rho_a * rho_b * 0.9 * 5.0,
                                                                        abs=1e-13)


# --- termination and meta-policy -----------------------------------------------------------

def test_termination_examples():
    os_ = OptionSet(3, 2, 2, epsilon_mu=0.0)
    os_.theta[2] = [0.3, 0.3]
    before = os_.nu.copy()
    update_termination(os_, _record(o=0), LearnerConfig())
    assert np.array_equal(before, os_.nu)
    os_.theta[2] = [0.9, 0.1]
    b0 = os_.termination_probs(2)[0]
    update_termination(os_, _record(o=0), LearnerConfig())
    assert os_.termination_probs(2)[0] < b0


def test_termination_closed_form():
    os_ = OptionSet(3, 2, 2, epsilon_mu=1.0)
    os_.nu[2, 0] = 0.4
    os_.theta[2] = [1.0, 0.0]  # V = 0.5 under uniform mu, so Q - V = 0.5
    update_termination(os_, _record(o=0), LearnerConfig(lr_termination=0.1))
    b = 1 / (1 + math.exp(-0.4))
    assert os_.nu[2, 0] == pytest.approx(0.4 - 0.1 * b * (1 - b) * 0.5, abs=1e-15)


def test_meta_examples():
    os_ = _tabular_set(seed=8, meta="param", eps=0.0)
    os_.nu[2] = -np.inf
    before = os_.z.copy()
    update_meta_policy(os_, _record(o=0, o2=1, terminated=True), LearnerConfig())
    assert np.max(np.abs(os_.z - before)) < 1e-6
    os_ = _tabular_set(seed=8, meta="param", eps=0.0)
    os_.theta[2] = [0.25, 0.25]
    before = os_.z.copy()
    update_meta_policy(os_, _record(o=0, o2=1, terminated=True), LearnerConfig())
    assert np.array_equal(before, os_.z)


def test_meta_closed_form():
    os_ = _tabular_set(seed=9, meta="param", eps=0.0)
    os_.nu[2] = np.inf
    _, beta2, mu2, q2, sm = _tables(os_, 2)
    z0 = os_.z[2].copy()
    update_meta_policy(os_, _record(o=0, o2=1, terminated=True), LearnerConfig(lr_meta=0.3))
    adv = q2[1] - sum(m * x for m, x in zip(mu2, q2))
    expected = [z0[k] + 0.3 * beta2[0] * adv * ((1.0 if k == 1 else 0.0) - sm[k]) for k in range(2)]
    assert np.allclose(os_.z[2], expected, atol=1e-15)


def test_meta_noop_in_softmax_mode():
    os_ = _tabular_set(seed=9)
    update_meta_policy(os_, _record(), LearnerConfig())
    assert os_.z is None


# --- episodes ----------------------------------------------------------------------------

def test_fixed_options_only_change_values():
    env = FourRoomsEnv(seed=0)
    os_ = hallway_options(env)
    zeta, nu = os_.policy.weights.copy(), os_.nu.copy()
    theta = os_.theta.copy()
    run_episode_moc(os_, env, LearnerConfig(eta=1.0), np.random.default_rng(0), OneHotFeatures(104).fit())
    assert np.array_equal(zeta, os_.policy.weights) and np.array_equal(nu, os_.nu)
    assert not np.array_equal(theta, os_.theta)


def test_gate_closed_equivalence_three_episodes():
    snaps = []
    for alg, eta in (("MOC", 0.0), ("OC", 0.5)):
        env = FourRoomsEnv(seed=1)
        os_ = random_option_set(104, 4, 4, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        cfg = LearnerConfig(algorithm=alg, eta=eta)
        for _ in range(3):
            run_episode_moc(os_, env, cfg, rng, OneHotFeatures(104).fit())
        snaps.append((os_.theta.copy(), os_.nu.copy(), os_.policy.weights.copy()))
    for x, y in zip(*snaps):
        assert np.array_equal(x, y)


def test_steps_decrease_and_values_bounded():
    first, last = [], []
    for seed in range(5):
        env = FourRoomsEnv(seed=seed)
        os_ = random_option_set(104, 4, 4, np.random.default_rng(seed))
        rng = np.random.default_rng(seed)
        cfg = LearnerConfig(eta=0.3)
        steps = []
        for _ in range(100):
            st = run_episode_moc(os_, env, cfg, rng, OneHotFeatures(104).fit())
            assert not st.diverged
            steps.append(st.steps)
        assert np.abs(os_.theta).max() < value_bound(0.99)
        first.append(np.mean(steps[:20]))
        last.append(np.mean(steps[-20:]))
    assert np.mean(last) < np.mean(first)


def test_episode_durations_and_cap():
    env = FourRoomsEnv(seed=0)
    os_ = random_option_set(104, 3, 4, np.random.default_rng(0))
    st = run_episode_moc(os_, env, LearnerConfig(), np.random.default_rng(0), OneHotFeatures(104).fit(),
                         max_steps=50)
    assert st.steps <= 50
    d = st.durations[~np.isnan(st.durations)]
    assert np.all(d >= 1)


# --- flat actor-critic ------------------------------------------------------------------------

def test_flat_ac_zero_td_leaves_policy():
    env = FourRoomsEnv(seed=0)
    agent = FlatActorCritic(104, 4)
    cfg = LearnerConfig(algorithm="AC")
    for seed in range(20):
        before = agent.policy.weights.copy()
        st = run_flat_ac(agent, env, cfg, np.random.default_rng(seed), OneHotFeatures(104).fit(), max_steps=3)
        if st.ret == 0:
            assert np.array_equal(before, agent.policy.weights)


class _CountingEnv(FourRoomsEnv):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.calls = 0

    def step(self, state, action, rng=None):
        self.calls += 1
        return super().step(state, action, rng)


def test_n_step_update_schedule():
    env = _CountingEnv(seed=0)
    agent = FlatActorCritic(104, 4)
    stamps = []
    real_apply = agent.policy.apply

    def spy(delta):
        stamps.append(env.calls)
        real_apply(delta)
    agent.policy.apply = spy
    cfg = LearnerConfig(algorithm="AC", n_step=5)
    st = run_flat_ac(agent, env, cfg, np.random.default_rng(0), OneHotFeatures(104).fit(), max_steps=23)
    flushes = sorted(set(stamps))
    assert all(t % 5 == 0 or t == st.steps for t in flushes)
    assert len(stamps) == st.steps


def test_actor_loss_gradient():
    rng = np.random.default_rng(3)
    pol = LinearSoftmaxPolicy(4, 1, 3, weights=rng.standard_normal((4, 1, 3)))
    xs, acts, adv = rng.standard_normal((6, 4)), rng.integers(3, size=6), rng.standard_normal(6)

    def f(w):
        pol.set_flat(w)
        return actor_loss_and_grad(pol, xs, acts, adv)
    assert finite_diff_check(f, pol.get_flat()).max_rel_error < 1e-5


def test_step_updates_order_independent_of_gate_rng():
    os_ = _tabular_set(seed=11)
    rec = _record()
    apply_step_updates(os_, rec, LearnerConfig(), gate=False)
    assert np.all(np.isfinite(os_.theta))

"""Update rules for multi-updates option critic (MOC), option critic and flat actor-critic.

With probability ``eta`` a step is a *multi-update* step: every option
``o~`` is updated, weighted by the upon-arrival probability
``p(o~ | s, o_prev)`` of having been picked at ``s``.  Otherwise only the
executing option is updated, which is exactly option critic.  Option
critic is the same code path with the gate permanently closed, so the two
consume identical random streams.

Values of non-executing options are learned from importance-sampled
targets; the policy gradient step uses a one-step estimate of
``Q_U(s, o~, a)`` minus the ``Q(s, o~)`` baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import fast
from .features import LinearSoftmaxPolicy, TwoLayerActor, add_outer, linear_readout
from .options import TERMINATION_LOGIT_CLIP, call_and_return_step, meta_log_grad_logits
from .validation import check_count, check_positive, check_probability, check_random_state, sample_index

log = logging.getLogger(__name__)

ALGORITHMS = ("MOC", "OC", "AC")


class DegenerateRatioError(ArithmeticError):
    """An importance-sampling denominator vanished."""


@dataclass
class LearnerConfig:
    algorithm: str = "MOC"
    eta: float = 0.3
    lr_values: float = 0.8
    lr_policy: float = 0.8
    lr_termination: float = 0.8
    lr_meta: float = 0.8
    discount: float = 0.99
    n_step: int = 1
    is_ratio_cap: float | None = None
    # bootstrap of the control advantage for o~ uses o~'s own upon-arrival value
    policy_is_correction: bool = True
    # multiply the bootstrap term of the value target by the action ratio too
    action_ratio_on_bootstrap: bool = True
    value_loss_coef: float = 0.5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        check_probability(self.eta, "eta")
        for name in ("lr_values", "lr_policy", "lr_termination", "lr_meta", "value_loss_coef"):
            check_positive(getattr(self, name), name)
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        check_count(self.n_step, "n_step")
        if self.is_ratio_cap is not None:
            check_positive(self.is_ratio_cap, "is_ratio_cap")

    @property
    def effective_eta(self) -> float:
        return self.eta if self.algorithm == "MOC" else 0.0


def multi_update_gate(eta, rng) -> bool:
    """Bernoulli(eta) draw; no random number is consumed when eta is 0 or 1."""
    if eta <= 0.0:
        return False
    if eta >= 1.0:
        return True
    return bool(rng.random() < eta)


# --- targets -------------------------------------------------------------------

def importance_targets(pi_a, p_next, executed, reward, q_next, discount, *, cap=None,
                       action_ratio_on_bootstrap=True):
    """Importance-sampled one-step targets for every option.

    ``pi_a[..., k]`` is pi(a | s, k) for the sampled action and
    ``p_next[..., k]`` the upon-arrival probability of the sampled next
    option given ``k`` was executing; ``executed`` indexes the behaviour
    option along the last axis.  ``q_next`` is Q(s', o') (zero when s' is
    absorbing).  Works on single records and on batches alike.
    """
    pi_a = np.asarray(pi_a, dtype=float)
    p_next = np.asarray(p_next, dtype=float)
    if pi_a.ndim == 1:
        den_a, den_b = pi_a[executed], p_next[executed]
        if den_a < 1e-12 or den_b < 1e-12:
            raise DegenerateRatioError("behaviour probability below 1e-12")
        boot = discount * q_next
    else:
        idx = np.expand_dims(np.asarray(executed), -1)
        den_a = np.take_along_axis(pi_a, idx, -1)
        den_b = np.take_along_axis(p_next, idx, -1)
        if np.any(den_a < 1e-12) or np.any(den_b < 1e-12):
            raise DegenerateRatioError("behaviour probability below 1e-12")
        reward = np.expand_dims(np.asarray(reward, dtype=float), -1)
        boot = discount * np.expand_dims(np.asarray(q_next, dtype=float), -1)
    rho_a = pi_a / den_a
    rho_b = p_next / den_b
    if cap is not None:
        rho_a = np.minimum(rho_a, cap)
        rho_b = np.minimum(rho_b, cap)
    if action_ratio_on_bootstrap:
        return rho_a * reward + rho_a * rho_b * boot
    return rho_a * reward + rho_b * boot


def next_quantities(option_set, record):
    """``(beta(s', .), mu(. | s'), Q(s', .))``, or None when s' is absorbing."""
    if record.next_terminal:
        return None
    phi2 = record.next_features
    q2 = option_set.q_values(phi2)
    return option_set.termination_probs(phi2), option_set.meta_probs(phi2, q2), q2


def is_targets(record, option_set, config, action_probs=None, nextq=None, bootstrap=None):
    """Target U for every option o~ (vector over options).

    ``action_probs`` / ``nextq`` let the training loop pass quantities it
    already computed with the current parameters.  ``bootstrap`` replaces
    Q(s', o') by another estimate of it, such as an n-step return.
    """
    if action_probs is None:
        action_probs = option_set.action_probs(record.features)
    pi_a = action_probs[:, record.action]
    if record.next_terminal:
        p_next, q_next = np.ones(option_set.n_options), 0.0
    else:
        beta2, mu2, q2 = next_quantities(option_set, record) if nextq is None else nextq
        o2 = record.next_option
        p_next = beta2 * mu2[o2]
        p_next[o2] += 1.0 - beta2[o2]
        q_next = q2[o2] if bootstrap is None else bootstrap
    return importance_targets(pi_a, p_next, record.option, record.reward, q_next, config.discount,
                              cap=config.is_ratio_cap,
                              action_ratio_on_bootstrap=config.action_ratio_on_bootstrap)


def is_target(record, tilde_o, option_set, config) -> float:
    return float(is_targets(record, option_set, config)[tilde_o])


def q_u_targets(record, option_set, config, nextq=None):
    """One-step estimate of Q_U(s, o~, a) for every o~, bootstrapping on o~'s upon-arrival value."""
    if record.next_terminal:
        return np.full(option_set.n_options, float(record.reward))
    beta2, mu2, q2 = next_quantities(option_set, record) if nextq is None else nextq
    v2 = float(mu2 @ q2)
    return record.reward + config.discount * ((1.0 - beta2) * q2 + beta2 * v2)


def q_u_target(record, option_set, config) -> float:
    return float(q_u_targets(record, option_set, config)[record.option])


# --- update rules ----------------------------------------------------------------

def update_weights(option_set, record, gate):
    """Per-option update weights: upon-arrival probabilities, or one-hot on the executing option."""
    if gate:
        return option_set.upon_arrival(record.features, record.previous_option)
    w = np.zeros(option_set.n_options)
    w[record.option] = 1.0
    return w


def value_delta(option_set, record, config, weights, action_probs=None, nextq=None, bootstrap=None):
    td = is_targets(record, option_set, config, action_probs, nextq, bootstrap) - option_set.q_values(record.features)
    return record.features, (config.lr_values * weights) * td


def policy_delta(option_set, record, config, weights, action_probs=None, nextq=None, executed_return=None):
    qu = q_u_targets(record, option_set, config, nextq)
    if executed_return is not None:
        qu[record.option] = executed_return
    if not config.policy_is_correction:
        qu = np.full_like(qu, qu[record.option])
    advantage = qu - option_set.q_values(record.features)
    coef = (config.lr_policy * weights) * advantage
    return option_set.policy.score_delta(record.features, record.action, coef, action_probs)


def termination_delta(option_set, record, config, nextq=None):
    if record.next_terminal:
        return None
    phi2 = record.next_features
    o = record.option
    logit = linear_readout(option_set.nu, phi2)[o]
    if abs(logit) >= TERMINATION_LOGIT_CLIP:
        return None
    _, mu2, q2 = next_quantities(option_set, record) if nextq is None else nextq
    b = 1.0 / (1.0 + math.exp(-logit))
    g = np.zeros(option_set.n_options)
    g[o] = -config.lr_termination * b * (1.0 - b) * (q2[o] - float(mu2 @ q2))
    return phi2, g


def meta_delta(option_set, record, config, nextq=None):
    if option_set.meta != "param" or record.next_terminal:
        return None
    phi2 = record.next_features
    _, mu2, q2 = next_quantities(option_set, record) if nextq is None else nextq
    beta = option_set.termination_probs(phi2)[record.option]
    scale = config.lr_meta * beta * (q2[record.next_option] - float(mu2 @ q2))
    return phi2, scale * meta_log_grad_logits(option_set, phi2, record.next_option)


def _gate(config, rng, gate):
    if gate is None:
        gate = multi_update_gate(config.effective_eta, check_random_state(rng))
    return gate


def update_values_all_options(option_set, record, config, rng=None, gate=None, weights=None,
                              action_probs=None, nextq=None):
    if weights is None:
        weights = update_weights(option_set, record, _gate(config, rng, gate))
    phi, g = value_delta(option_set, record, config, weights, action_probs, nextq)
    add_outer(option_set.theta, phi, g)
    return option_set.theta


def update_policies_all_options(option_set, record, config, rng=None, gate=None, weights=None,
                                action_probs=None, nextq=None):
    if option_set.frozen:
        return option_set.policy
    if weights is None:
        weights = update_weights(option_set, record, _gate(config, rng, gate))
    option_set.policy.apply(policy_delta(option_set, record, config, weights, action_probs, nextq))
    return option_set.policy


def update_termination(option_set, record, config, nextq=None):
    if not option_set.frozen:
        delta = termination_delta(option_set, record, config, nextq)
        if delta is not None:
            add_outer(option_set.nu, *delta)
    return option_set.nu


def update_meta_policy(option_set, record, config, nextq=None):
    delta = meta_delta(option_set, record, config, nextq)
    if delta is not None:
        add_outer(option_set.z, *delta)
    return option_set.z


def step_deltas(option_set, record, config, gate, action_probs=None, bootstrap=None, executed_return=None):
    """All parameter increments for one transition, from the current parameters.

    Like one-step actor-critic, the policy advantage and the termination
    and meta-policy signals use the option values from before this step's
    value update.  ``bootstrap`` and ``executed_return`` substitute n-step
    estimates inside a rollout (see :func:`apply_batch_updates`).
    """
    if action_probs is None:
        action_probs = option_set.action_probs(record.features)
    weights = update_weights(option_set, record, gate)
    nextq = next_quantities(option_set, record)
    out = [("theta", value_delta(option_set, record, config, weights, action_probs, nextq, bootstrap))]
    if not option_set.frozen:
        out.append(("policy", policy_delta(option_set, record, config, weights, action_probs, nextq,
                                           executed_return)))
        out.append(("nu", termination_delta(option_set, record, config, nextq)))
    out.append(("z", meta_delta(option_set, record, config, nextq)))
    return out


def _apply(option_set, deltas):
    for name, delta in deltas:
        if delta is None:
            continue
        if name == "policy":
            option_set.policy.apply(delta)
        else:
            add_outer(getattr(option_set, name), *delta)


def apply_step_updates(option_set, record, config, gate, action_probs=None):
    """Apply values, then intra-option policies, then terminations, then the meta-policy."""
    _apply(option_set, step_deltas(option_set, record, config, gate, action_probs))


def apply_batch_updates(option_set, batch, config):
    """Synchronous update over a rollout of consecutive transitions.

    All deltas use the parameters at rollout end.  The last record keeps
    its one-step targets; its estimate of Q_U(s, o, a) for the executing
    option seeds the return ``G_i = r_i + discount * G_{i+1}`` backwards.
    Earlier records bootstrap their value targets on ``G_{i+1}`` (an
    estimate of Q(s', o') for the sampled next pair, so the importance
    ratios still only cover the first step) and use ``G_i`` as the
    executing option's control target.  A one-record rollout is exactly
    the one-step update.
    """
    n = len(batch)
    boots, rets = [None] * n, [None] * n
    last = batch[-1][0]
    g = q_u_target(last, option_set, config)
    for i in range(n - 2, -1, -1):
        record = batch[i][0]
        boots[i] = g
        g = record.reward + config.discount * g
        rets[i] = g
    pending = []
    for (record, gate), boot, ret in zip(batch, boots, rets):
        pending.extend(step_deltas(option_set, record, config, gate, bootstrap=boot, executed_return=ret))
    _apply(option_set, pending)


# --- episode drivers ------------------------------------------------------------------

@dataclass
class EpisodeStats:
    steps: int
    ret: float
    durations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diverged: bool = False


@dataclass
class RunMetrics:
    """Per-episode learning curve of one run."""

    steps: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    durations: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    info_radius: list = field(default_factory=list)

    def append(self, stats: EpisodeStats, phase: str, info_radius=None):
        self.steps.append(stats.steps)
        self.returns.append(stats.ret)
        self.durations.append(stats.durations)
        self.phases.append(phase)
        self.info_radius.append(info_radius)

    def __len__(self):
        return len(self.steps)


def value_bound(discount):
    return 1.0 / (1.0 - discount) + 1.0


def _finish(option_set, config, t, ret, run_total, run_count, phi):
    with np.errstate(invalid="ignore", divide="ignore"):
        durations = run_total / run_count
    if isinstance(phi, (int, np.integer)):
        q_max = float(np.abs(option_set.theta).max())
    else:
        q_max = float(np.abs(option_set.q_values(phi)).max())
    diverged = not q_max < value_bound(config.discount)
    if diverged:
        log.warning("option values left the bound 1/(1-gamma)+1; learning is diverging")
    return EpisodeStats(t, ret, durations, diverged)


def _compiled_option_episode(option_set, env, config, rng, cap, feature_map, kind):
    os_ = option_set
    param = os_.meta == "param"
    K = os_.n_options
    run_total = np.zeros(K)
    run_count = np.zeros(K)
    z = os_.z if param else np.zeros((os_.n_features, K))
    learning = (param, os_.tau, os_.epsilon_mu, os_.frozen, config.effective_eta, config.lr_values,
                config.lr_policy, config.lr_termination, config.lr_meta, config.discount,
                config.is_ratio_cap or 0.0, config.policy_is_correction, config.action_ratio_on_bootstrap)
    if kind == "tabular":
        t, ret, status = fast.option_episode(
            rng, env._succ, env.goal, env.action_success_prob, cap, os_.policy.weights, os_.nu, os_.theta,
            z, *learning, run_total, run_count)
        phi = 0
    else:
        fm, pol = feature_map, os_.policy
        t, ret, status, pos, vel = fast.rbf_option_episode(
            rng, env.gravity_scale, env.goal_position, cap, fm.low_, fm.span_, fm.centers_, fm.widths_,
            pol.W1, pol.b1, pol.W2, pol.b2, os_.nu, os_.theta, z, *learning, config.n_step,
            run_total, run_count)
        phi = fm.phi((pos, vel))
    if status == fast.DEGENERATE:
        raise DegenerateRatioError("behaviour probability below 1e-12")
    return _finish(os_, config, int(t), float(ret), run_total, run_count, phi)


def run_episode_moc(option_set, env, config, rng, feature_map, max_steps=None, compiled=True):
    """Run one call-and-return episode, learning online.  Returns :class:`EpisodeStats`.

    Tabular FourRooms and RBF MountainCar runs use the compiled kernels in
    :mod:`moc.fast` unless ``compiled`` is false; both paths consume
    ``rng`` identically.
    """
    rng = check_random_state(rng)
    eta = config.effective_eta
    cap = env.max_episode_steps if max_steps is None else max_steps
    kind = fast.kind(option_set, env, feature_map, config) if compiled else None
    if kind is not None:
        return _compiled_option_episode(option_set, env, config, rng, cap, feature_map, kind)
    K = option_set.n_options
    run_total = np.zeros(K)
    run_count = np.zeros(K)
    state = env.reset(rng)
    phi = feature_map.phi(state)
    prev, option = None, None
    ret, t, run_len = 0.0, 0, 0
    batch = []
    while True:
        rec = call_and_return_step(option_set, env, state, prev, rng, feature_map, option=option, phi=phi)
        t += 1
        run_len += 1
        ret += rec.reward
        gate = multi_update_gate(eta, rng)
        done = rec.next_terminal or t >= cap
        if config.n_step == 1:
            apply_step_updates(option_set, rec, config, gate, rec.action_probs)
        else:
            batch.append((rec, gate))
            if len(batch) >= config.n_step or done:
                apply_batch_updates(option_set, batch, config)
                batch = []
        if rec.terminated or done:
            run_total[rec.option] += run_len
            run_count[rec.option] += 1
            run_len = 0
        if done:
            break
        prev, option, state, phi = rec.option, rec.next_option, rec.next_state, rec.next_features
    return _finish(option_set, config, t, ret, run_total, run_count, phi)


class FlatActorCritic:
    """Single softmax policy with a linear state-value critic."""

    def __init__(self, n_features, n_actions, policy=None):
        self.policy = policy if policy is not None else LinearSoftmaxPolicy(n_features, 1, n_actions)
        self.critic = np.zeros((n_features, 1))
        self.n_actions = n_actions

    def action_probs(self, phi):
        return self.policy.probs(phi)[0]

    def value(self, phi):
        return float(linear_readout(self.critic, phi)[0])


def actor_loss_and_grad(policy, features, actions, advantages):
    """Policy-gradient loss ``-sum_t adv_t log pi(a_t | s_t)`` and its gradient (flattened)."""
    loss = 0.0
    grad = np.zeros_like(policy.get_flat())
    one = np.ones(1)
    for phi, a, adv in zip(features, actions, advantages):
        p = policy.probs(phi)[0]
        loss -= adv * math.log(p[a])
        delta = policy.score_delta(phi, a, -adv * one)
        if isinstance(policy, TwoLayerActor):
            grad += TwoLayerActor.flatten_delta(delta)
        else:
            tmp = np.zeros_like(policy.weights)
            add_outer(tmp, delta[1], delta[2])
            grad += tmp.ravel()
    return loss, grad


def run_flat_ac(agent, env, config, rng, feature_map, max_steps=None, compiled=True):
    """One episode of flat actor-critic.

    ``n_step == 1`` is the classic one-step TD actor-critic; larger values
    give synchronous n-step advantage actor-critic with bootstrapped returns.
    """
    rng = check_random_state(rng)
    cap = env.max_episode_steps if max_steps is None else max_steps
    kind = fast.kind(agent.policy, env, feature_map, config) if compiled else None
    if kind == "tabular":
        t, ret = fast.flat_episode(rng, env._succ, env.goal, env.action_success_prob, cap,
                                   agent.policy.weights, agent.critic, config.lr_values,
                                   config.lr_policy, config.discount)
        return EpisodeStats(int(t), float(ret), np.zeros(0))
    if kind == "rbf":
        fm, pol = feature_map, agent.policy
        t, ret = fast.rbf_flat_episode(rng, env.gravity_scale, env.goal_position, cap, fm.low_, fm.span_,
                                       fm.centers_, fm.widths_, pol.W1, pol.b1, pol.W2, pol.b2,
                                       agent.critic, config.lr_values, config.lr_policy, config.discount,
                                       config.n_step, config.value_loss_coef)
        return EpisodeStats(int(t), float(ret), np.zeros(0))
    gamma = config.discount
    state = env.reset(rng)
    phi = feature_map.phi(state)
    ret, t = 0.0, 0
    rollout = []
    one = np.ones(1)
    while True:
        probs = agent.action_probs(phi)
        a = sample_index(probs, rng)
        out = env.step(state, a, rng)
        t += 1
        ret += out.reward
        phi2 = feature_map.phi(out.next_state)
        done = out.terminal or t >= cap
        if config.n_step == 1:
            v2 = 0.0 if out.terminal else agent.value(phi2)
            td = out.reward + gamma * v2 - agent.value(phi)
            add_outer(agent.critic, phi, np.array([config.lr_values * td]))
            agent.policy.apply(agent.policy.score_delta(phi, a, config.lr_policy * td * one, probs[None]))
        else:
            rollout.append((phi, a, out.reward))
            if len(rollout) >= config.n_step or done:
                g = 0.0 if out.terminal else agent.value(phi2)
                deltas = []
                for phi_t, a_t, r_t in reversed(rollout):
                    g = r_t + gamma * g
                    adv = g - agent.value(phi_t)
                    deltas.append((phi_t, 2.0 * config.value_loss_coef * config.lr_values * adv,
                                   agent.policy.score_delta(phi_t, a_t, config.lr_policy * adv * one)))
                for phi_t, c, pd in deltas:
                    add_outer(agent.critic, phi_t, np.array([c]))
                    agent.policy.apply(pd)
                rollout = []
        if done:
            break
        state, phi = out.next_state, phi2
    return EpisodeStats(t, ret, np.zeros(0))

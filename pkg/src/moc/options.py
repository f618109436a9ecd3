"""Option components and call-and-return execution.

An :class:`OptionSet` holds, for ``K`` options over ``d`` state features:

* intra-option policies (``policy``: linear softmax or two-layer actor),
* termination weights ``nu`` of shape ``(d, K)`` (sigmoid of clamped logits),
* option values ``theta`` of shape ``(d, K)``; ``theta[:, o]`` is option
  ``o``'s block of the block-diagonal feature layout,
* the policy over options: either a temperature softmax over the option
  values (``meta="softmax_q"``) or its own weights ``z`` of shape ``(d, K)``
  (``meta="param"``), in both cases mixed with ``epsilon_mu`` uniform mass so
  every option keeps probability at least ``epsilon_mu / K``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .features import (LinearSoftmaxPolicy, TwoLayerActor, add_outer, dense, linear_readout,
                       policy_from_dict)
from .validation import check_positive, check_probability, check_random_state, sample_index

TERMINATION_LOGIT_CLIP = 15.0
SERIAL_VERSION = 1


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class TransitionRecord:
    """One call-and-return step ``(s, o_prev, o, a, r, s', terminated, o')``."""

    state: Any
    previous_option: int | None
    option: int
    action: int
    reward: float
    next_state: Any
    terminated: bool
    next_option: int
    features: Any = None
    next_features: Any = None
    # s' is absorbing: no bootstrap from it
    next_terminal: bool = False
    # pi(. | s, .) for all options, as used to sample the action
    action_probs: Any = None


class OptionSet:
    def __init__(self, n_features, n_options, n_actions, policy=None, nu=None, theta=None, z=None,
                 tau=1.0, epsilon_mu=0.05, meta="softmax_q", frozen=False):
        if meta not in ("softmax_q", "param"):
            raise ValueError(f"meta must be 'softmax_q' or 'param', got {meta!r}")
        self.n_features = int(n_features)
        self.n_options = int(n_options)
        self.n_actions = int(n_actions)
        self.tau = check_positive(tau, "tau")
        self.epsilon_mu = check_probability(epsilon_mu, "epsilon_mu")
        self.meta = meta
        self.frozen = bool(frozen)
        shape = (self.n_features, self.n_options)
        self.policy = policy if policy is not None else LinearSoftmaxPolicy(*shape, self.n_actions)
        self.nu = np.zeros(shape) if nu is None else np.array(nu, dtype=float)
        self.theta = np.zeros(shape) if theta is None else np.array(theta, dtype=float)
        if meta == "param":
            self.z = np.zeros(shape) if z is None else np.array(z, dtype=float)
        else:
            self.z = None

    # --- evaluation -------------------------------------------------------
    def q_values(self, phi):
        return linear_readout(self.theta, phi)

    def action_probs(self, phi):
        """``(K, A)`` table of pi(a | s, o)."""
        return self.policy.probs(phi)

    def termination_logits(self, phi):
        c = TERMINATION_LOGIT_CLIP
        return np.minimum(np.maximum(linear_readout(self.nu, phi), -c), c)

    def termination_probs(self, phi):
        return 1.0 / (1.0 + np.exp(-self.termination_logits(phi)))

    def meta_logits(self, phi, q=None):
        if self.meta == "param":
            return linear_readout(self.z, phi)
        q = self.q_values(phi) if q is None else q
        return q / self.tau

    def meta_probs(self, phi, q=None):
        eps = self.epsilon_mu
        return (1.0 - eps) * _softmax(self.meta_logits(phi, q)) + eps / self.n_options

    def state_value(self, phi, q=None, mu=None):
        q = self.q_values(phi) if q is None else q
        mu = self.meta_probs(phi, q) if mu is None else mu
        return float(mu @ q)

    def upon_arrival(self, phi, previous_option, beta=None, mu=None):
        if previous_option is None:
            return self.meta_probs(phi) if mu is None else mu
        beta = self.termination_probs(phi) if beta is None else beta
        mu = self.meta_probs(phi) if mu is None else mu
        b = beta[previous_option]
        p = b * mu
        p[previous_option] += 1.0 - b
        return p

    def upon_arrival_matrix(self, phi, beta=None, mu=None):
        """``M[prev, o] = p(o | s, prev)`` for every previous option."""
        beta = self.termination_probs(phi) if beta is None else beta
        mu = self.meta_probs(phi) if mu is None else mu
        return beta[:, None] * mu[None, :] + np.diag(1.0 - beta)

    # --- serialisation ----------------------------------------------------
    def copy(self):
        return OptionSet(self.n_features, self.n_options, self.n_actions, policy=self.policy.copy(),
                         nu=self.nu, theta=self.theta, z=self.z, tau=self.tau,
                         epsilon_mu=self.epsilon_mu, meta=self.meta, frozen=self.frozen)

    def to_json(self) -> str:
        return json.dumps({
            "version": SERIAL_VERSION,
            "n_features": self.n_features, "n_options": self.n_options, "n_actions": self.n_actions,
            "meta": self.meta, "frozen": self.frozen,
            "zeta": self.policy.to_dict(),
            "nu": self.nu.tolist(),
            "z": None if self.z is None else self.z.tolist(),
            "theta": self.theta.tolist(),
            "tau": self.tau,
            "epsilon_mu": self.epsilon_mu,
        })

    @classmethod
    def from_json(cls, text: str) -> "OptionSet":
        doc = json.loads(text)
        if doc.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported OptionSet document version {doc.get('version')!r}")
        return cls(doc["n_features"], doc["n_options"], doc["n_actions"],
                   policy=policy_from_dict(doc["zeta"]), nu=doc["nu"], theta=doc["theta"], z=doc["z"],
                   tau=doc["tau"], epsilon_mu=doc["epsilon_mu"], meta=doc["meta"], frozen=doc["frozen"])


def _check_option(option_set, o):
    if not 0 <= o < option_set.n_options:
        raise IndexError(f"option {o} out of range for {option_set.n_options} options")


def _check_phi(phi):
    if not isinstance(phi, (int, np.integer)) and not np.all(np.isfinite(phi)):
        raise ValueError("non-finite feature vector")


def upon_arrival_dist(option_set, phi, previous_option):
    _check_option(option_set, previous_option)
    return option_set.upon_arrival(phi, previous_option)


def intra_policy_dist(option_set, phi, option):
    _check_option(option_set, option)
    _check_phi(phi)
    return option_set.action_probs(phi)[option]


def termination_prob(option_set, phi, option):
    _check_option(option_set, option)
    return float(option_set.termination_probs(phi)[option])


def meta_policy_dist(option_set, phi):
    return option_set.meta_probs(phi)


# --- analytic gradients ----------------------------------------------------
# Each returns an array shaped like the parameter it differentiates.

def policy_log_grad(option_set, phi, option, action):
    """d log pi(action | s, option) / d policy parameters, flattened."""
    coef = np.zeros(option_set.n_options)
    coef[option] = 1.0
    delta = option_set.policy.score_delta(phi, action, coef)
    if isinstance(option_set.policy, TwoLayerActor):
        return TwoLayerActor.flatten_delta(delta)
    out = np.zeros_like(option_set.policy.weights)
    add_outer(out, delta[1], delta[2])
    return out.ravel()


def termination_grad(option_set, phi, option):
    """d beta(s, option) / d nu."""
    logit = linear_readout(option_set.nu, phi)[option]
    out = np.zeros_like(option_set.nu)
    if abs(logit) < TERMINATION_LOGIT_CLIP:
        b = 1.0 / (1.0 + np.exp(-logit))
        g = np.zeros(option_set.n_options)
        g[option] = b * (1.0 - b)
        add_outer(out, phi, g)
    return out


def meta_log_grad_logits(option_set, phi, option, q=None):
    """d log mu(option | s) / d meta logits, accounting for the uniform floor."""
    eps = option_set.epsilon_mu
    sm = _softmax(option_set.meta_logits(phi, q))
    mu = (1.0 - eps) * sm + eps / option_set.n_options
    g = -sm * sm[option]
    g[option] += sm[option]
    return (1.0 - eps) * g / mu[option]


def meta_log_grad(option_set, phi, option):
    """d log mu(option | s) / d z (parameterised meta-policy only)."""
    if option_set.meta != "param":
        raise ValueError("meta-policy has no parameters of its own in softmax_q mode")
    out = np.zeros_like(option_set.z)
    add_outer(out, phi, meta_log_grad_logits(option_set, phi, option))
    return out


# --- execution ---------------------------------------------------------------

def call_and_return_step(option_set, env, state, previous_option, rng, feature_map, option=None, phi=None):
    """Execute one primitive step under call-and-return.

    ``option`` is the option already committed to at ``state`` (the previous
    record's ``next_option``); when omitted it is drawn from the upon-arrival
    distribution, or from the policy over options at episode start.
    """
    rng = check_random_state(rng)
    if phi is None:
        phi = feature_map.phi(state)
    if option is None:
        option = sample_index(option_set.upon_arrival(phi, previous_option), rng)
    pi_s = option_set.action_probs(phi)
    action = sample_index(pi_s[option], rng)
    out = env.step(state, action, rng)
    next_phi = feature_map.phi(out.next_state)
    if out.terminal:
        terminated, next_option = False, option
    else:
        beta = option_set.termination_probs(next_phi)[option]
        terminated = rng.random() < beta
        next_option = sample_index(option_set.meta_probs(next_phi), rng) if terminated else option
    return TransitionRecord(state, previous_option, option, action, out.reward, out.next_state,
                            bool(terminated), int(next_option), phi, next_phi, out.terminal, pi_s)


def _logit(p):
    p = np.clip(p, 1e-300, 1.0)
    return np.clip(np.log(p) - np.log1p(-np.minimum(p, 1 - 1e-16)), -TERMINATION_LOGIT_CLIP,
                   TERMINATION_LOGIT_CLIP)


def hallway_options(env, epsilon_action=0.1, off_target_termination=0.01, include_primitive=True,
                    tau=1.0, epsilon_mu=0.05):
    """Fixed FourRooms option set: 8 hallway options plus 4 primitive-action options.

    Each hallway option belongs to one room and one of its two hallways.  Its
    policy puts ``1 - epsilon_action`` on the first move of a shortest path
    to the hallway (uniform at the hallway itself) and spreads the rest over
    the other moves.  It terminates with probability ~1 at the hallway and
    ``off_target_termination`` elsewhere.  Primitive options repeat one move
    and terminate with probability ~1 everywhere.  Only ``theta`` is learned.
    """
    from .env import ROOM_HALLWAYS

    check_probability(epsilon_action, "epsilon_action", low_open=True, high_open=True)
    check_probability(off_target_termination, "off_target_termination", low_open=True, high_open=True)
    S, A = env.n_states, env.n_actions
    tables, terms = [], []
    for room, hallways in ROOM_HALLWAYS.items():
        for hall in hallways:
            target = env.hallway_state(hall)
            best = env.shortest_path_actions(target)
            pi = np.full((S, A), epsilon_action / (A - 1))
            rows = np.arange(S)[best >= 0]
            pi[rows, best[rows]] = 1.0 - epsilon_action
            pi[target] = 1.0 / A
            beta = np.full(S, off_target_termination)
            beta[target] = 1.0
            tables.append(pi)
            terms.append(beta)
    if include_primitive:
        for a in range(A):
            pi = np.full((S, A), epsilon_action / (A - 1))
            pi[:, a] = 1.0 - epsilon_action
            tables.append(pi)
            terms.append(np.ones(S))
    K = len(tables)
    zeta = np.log(np.stack(tables, axis=1))  # (S, K, A)
    nu = _logit(np.stack(terms, axis=1))  # (S, K)
    policy = LinearSoftmaxPolicy(S, K, A, weights=zeta)
    return OptionSet(S, K, A, policy=policy, nu=nu, tau=tau, epsilon_mu=epsilon_mu,
                     meta="softmax_q", frozen=True)


def random_option_set(n_features, n_options, n_actions, rng, meta="softmax_q", scale=0.0, **kwargs):
    rng = check_random_state(rng)
    shape = (n_features, n_options)
    policy = LinearSoftmaxPolicy(n_features, n_options, n_actions,
                                 weights=scale * rng.standard_normal((n_features, n_options, n_actions)))
    return OptionSet(n_features, n_options, n_actions, policy=policy,
                     nu=scale * rng.standard_normal(shape), theta=scale * rng.standard_normal(shape),
                     z=scale * rng.standard_normal(shape) if meta == "param" else None, meta=meta, **kwargs)


def option_tables(option_set, n_states):
    """Tabulate pi ``(S, K, A)``, beta ``(S, K)`` and mu ``(S, K)`` for index features."""
    pi = np.stack([option_set.action_probs(s) for s in range(n_states)])
    beta = np.stack([option_set.termination_probs(s) for s in range(n_states)])
    mu = np.stack([option_set.meta_probs(s) for s in range(n_states)])
    return pi, beta, mu


__all__ = [
    "OptionSet", "TransitionRecord", "upon_arrival_dist", "intra_policy_dist", "termination_prob",
    "meta_policy_dist", "call_and_return_step", "hallway_options", "policy_log_grad",
    "termination_grad", "meta_log_grad", "option_tables", "random_option_set", "dense",
]

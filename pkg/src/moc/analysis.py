"""Exact oracles on small tabular problems.

Everything here works on explicit tables: the augmented state-option chain,
its stationary distribution and the upon-arrival decomposition of it, the
expected TD matrix ``A``, Monte Carlo checks of the importance-sampled
targets, and the information radius between option policies.  States are
one-hot features, so an :class:`~moc.options.OptionSet` is tabulated with
:func:`~moc.options.option_tables`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph
from scipy.special import entr

from .env import TabularMdp
from .features import LinearSoftmaxPolicy
from .learning import importance_targets
from .options import OptionSet, _logit, option_tables
from .validation import check_count, check_random_state


class AssumptionError(ValueError):
    """Termination or policy-over-options probabilities are not strictly inside (0, 1)."""


class ReducibleChainError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class AugmentedChain:
    """Markov chain over ``(s, o)`` pairs; row ``s * K + o``."""

    transition: np.ndarray  # (S*K, S*K)
    n_states: int
    n_options: int
    # P^{pi_o}(s' | s) as (K, S, S)
    state_transition: np.ndarray
    # p(o' | s', o_prev) as (S, K, K)
    upon_arrival: np.ndarray

    def index(self, s, o) -> int:
        return s * self.n_options + o

    def pair(self, row) -> tuple[int, int]:
        return divmod(int(row), self.n_options)


@dataclass
class StationaryPair:
    d: np.ndarray  # (S, K)
    d_bar: np.ndarray  # (K, S): previous option, current state
    residual: float
    approximate: bool = False
    chain: AugmentedChain | None = field(default=None, repr=False)


# --- instances -------------------------------------------------------------------

def tabular_option_set(pi, beta, mu, theta=None, epsilon_mu=0.0):
    """OptionSet with one-hot state features reproducing the given tables.

    ``pi`` is ``(S, K, A)``, ``beta`` and ``mu`` are ``(S, K)``.  The policy
    over options is parameterised with ``z = log mu``.
    """
    pi, beta, mu = (np.asarray(x, dtype=float) for x in (pi, beta, mu))
    S, K, A = pi.shape
    policy = LinearSoftmaxPolicy(S, K, A, weights=np.log(pi))
    return OptionSet(S, K, A, policy=policy, nu=_logit(beta), theta=theta, z=np.log(mu),
                     epsilon_mu=epsilon_mu, meta="param")


def random_instance(n_states, n_options, n_actions=2, rng=None, discount=0.9, beta_range=(0.1, 0.9),
                    epsilon_mu=0.0, theta_scale=1.0):
    """Random MDP and option set satisfying the ergodicity and positivity assumptions almost surely.

    Transition rows and the pi / mu rows are Dirichlet(1); beta is uniform
    on ``beta_range``; rewards are uniform on [0, 1].
    """
    rng = check_random_state(rng)
    S, K, A = (check_count(n, name) for n, name in
               ((n_states, "n_states"), (n_options, "n_options"), (n_actions, "n_actions")))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.random((S, A))
    mdp = TabularMdp(P, R, np.full(S, 1.0 / S), np.zeros(S, dtype=bool), discount)
    pi = rng.dirichlet(np.ones(A), size=(S, K))
    mu = rng.dirichlet(np.ones(K), size=S)
    beta = rng.uniform(*beta_range, size=(S, K))
    theta = theta_scale * rng.standard_normal((S, K))
    return mdp, tabular_option_set(pi, beta, mu, theta, epsilon_mu)


# --- chain construction ----------------------------------------------------------

def check_positivity(beta, mu):
    """Raise :class:`AssumptionError` unless 0 < beta < 1 and mu > 0 everywhere."""
    problems = []
    if np.min(mu) <= 0.0:
        problems.append(f"min mu = {np.min(mu):.3g}")
    if np.min(beta) <= 0.0 or np.max(beta) >= 1.0:
        problems.append(f"beta range [{np.min(beta):.3g}, {np.max(beta):.3g}]")
    if problems:
        raise AssumptionError("positivity assumption violated: " + "; ".join(problems))


def upon_arrival_tables(beta, mu):
    """``U[s, o_prev, o] = beta(s, o_prev) mu(o | s) + (1 - beta(s, o_prev)) [o == o_prev]``."""
    K = beta.shape[1]
    return beta[:, :, None] * mu[:, None, :] + (1.0 - beta)[:, :, None] * np.eye(K)[None]


def build_augmented_chain(mdp, option_set=None, tables=None, check=True) -> AugmentedChain:
    """Chain over state-option pairs induced by call-and-return execution.

    Pass either an index-featured ``option_set`` or ``tables=(pi, beta, mu)``.
    With ``check=False`` the positivity assumption is not enforced, so that
    reducibility can be diagnosed downstream.
    """
    pi, beta, mu = tables if tables is not None else option_tables(option_set, mdp.n_states)
    if check:
        check_positivity(beta, mu)
    S, K, _ = pi.shape
    state_transition = np.einsum("ska,sat->kst", pi, mdp.transition)
    upon = upon_arrival_tables(beta, mu)
    T = np.einsum("ost,top->sotp", state_transition, upon).reshape(S * K, S * K)
    return AugmentedChain(T, S, K, state_transition, upon)


# --- stationary distribution -----------------------------------------------------

def chain_period(transition) -> int:
    """Period of an irreducible chain (1 means aperiodic)."""
    adj = (np.asarray(transition) > 0).astype(float)
    level = csgraph.shortest_path(adj, unweighted=True, indices=0)
    u, v = np.nonzero(adj)
    period = 0
    for diff in (level[u] + 1 - level[v]).astype(int):
        period = math.gcd(period, abs(int(diff)))
    return period


def stationary_distribution(chain, tolerance=1e-13, max_iter=200_000, damping=1e-6) -> StationaryPair:
    """Stationary distribution by power iteration, with the previous-option marginal.

    Raises :class:`ReducibleChainError` when some state-option pair cannot
    reach another.  A periodic chain is mixed with ``damping`` uniform mass
    and the result is flagged approximate.
    """
    T = chain.transition
    n = T.shape[0]
    n_comp, _ = csgraph.connected_components((T > 0).astype(float), directed=True, connection="strong")
    if n_comp != 1:
        raise ReducibleChainError(f"augmented chain has {n_comp} strongly connected components")
    approximate = False
    if chain_period(T) != 1:
        warnings.warn("periodic augmented chain; using damped power iteration", RuntimeWarning,
                      stacklevel=2)
        T = (1.0 - damping) * T + damping / n
        approximate = True
    d = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = d @ T
        nxt /= nxt.sum()
        residual = float(np.max(np.abs(nxt - d)))
        d = nxt
        if residual < tolerance:
            break
    else:
        raise ConvergenceError(f"power iteration residual {residual:.3g} after {max_iter} iterations")
    residual = float(np.max(np.abs(d @ chain.transition - d)))
    d = d.reshape(chain.n_states, chain.n_options)
    d_bar = np.einsum("so,ost->ot", d, chain.state_transition)
    return StationaryPair(d, d_bar, residual, approximate, chain)


def decomposition(pair, upon=None):
    """``sum_prev d_bar(prev, s) p(o | s, prev)`` as an ``(S, K)`` array."""
    upon = pair.chain.upon_arrival if upon is None else upon
    return np.einsum("ps,spo->so", pair.d_bar, upon)


def verify_decomposition(pair, option_set=None) -> float:
    """Largest absolute gap between d(s, o) and its upon-arrival decomposition."""
    upon = None
    if option_set is not None:
        _, beta, mu = option_tables(option_set, pair.d.shape[0])
        upon = upon_arrival_tables(beta, mu)
    return float(np.max(np.abs(pair.d - decomposition(pair, upon))))


# --- expected TD matrix ----------------------------------------------------------

@dataclass
class AMatrixReport:
    A: np.ndarray
    A_multi: np.ndarray
    min_eigenvalue: float
    max_abs_difference: float
    rank_deficient: bool


def expected_A_check(pair, chain, discount, features=None) -> AMatrixReport:
    """Expected TD matrix ``Phi^T D (I - gamma P) Phi`` and its multi-update counterpart.

    ``features`` has one row per ``(s, o)`` pair (default one-hot).  The
    multi-update version replaces ``d(s, o)`` by its upon-arrival
    decomposition; the smallest eigenvalue is that of the symmetric part.
    """
    n = chain.transition.shape[0]
    phi = np.eye(n) if features is None else np.asarray(features, dtype=float)
    rank_deficient = np.linalg.matrix_rank(phi) < phi.shape[1]
    if rank_deficient:
        warnings.warn("feature matrix is rank deficient", RuntimeWarning, stacklevel=2)
    M = phi - discount * (chain.transition @ phi)
    A = phi.T @ (pair.d.reshape(-1)[:, None] * M)
    A_multi = phi.T @ (decomposition(pair).reshape(-1)[:, None] * M)
    lam = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    return AMatrixReport(A, A_multi, lam, float(np.max(np.abs(A - A_multi))), bool(rank_deficient))


# --- Monte Carlo checks of the targets ---------------------------------------------

def _sample_rows(cdf_rows, rng):
    """One categorical draw per row of a cumulative table."""
    u = rng.random(cdf_rows.shape[0])
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _q_table(option_set, n_states):
    return np.stack([option_set.q_values(s) for s in range(n_states)])


def expected_targets(mdp, option_set, discount=None):
    """``E[U | s, o~] = sum_a pi(a|s,o~) [r(s,a) + gamma sum_{s',o'} P(s'|s,a) p(o'|s',o~) Q(s',o')]``."""
    gamma = mdp.discount if discount is None else discount
    S = mdp.n_states
    pi, beta, mu = option_tables(option_set, S)
    upon = upon_arrival_tables(beta, mu)
    q = _q_table(option_set, S)
    q = np.where(mdp.terminal[:, None], 0.0, q)
    cont = np.einsum("tpo,to->tp", upon, q)  # (S', o~)
    boot = np.einsum("sat,tk->sak", mdp.transition, cont)  # (S, A, o~)
    return np.einsum("ska,sa->sk", pi, mdp.reward) + gamma * np.einsum("ska,sak->sk", pi, boot)


def sample_transitions(mdp, option_set, state, previous_option, n_samples, rng):
    """Draw ``(o, a, s', o')`` call-and-return outcomes from ``(s, o_prev)``, vectorised."""
    S = mdp.n_states
    pi, beta, mu = option_tables(option_set, S)
    upon = upon_arrival_tables(beta, mu)
    n = n_samples
    o = _sample_rows(np.broadcast_to(np.cumsum(upon[state, previous_option]), (n, option_set.n_options)), rng)
    a = _sample_rows(np.cumsum(pi[state], axis=1)[o], rng)
    s2 = _sample_rows(np.cumsum(mdp.transition[state], axis=1)[a], rng)
    o2 = _sample_rows(np.cumsum(upon, axis=2)[s2, o], rng)
    return o, a, s2, o2


@dataclass
class UnbiasednessReport:
    # indexed (s, o_prev, o~)
    mean: np.ndarray
    standard_error: np.ndarray
    expected: np.ndarray
    max_z: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.max_z < 3.0


def is_unbiasedness_check(mdp, option_set, n_samples=1_000_000, rng=None, corrupt=False,
                          action_ratio_on_bootstrap=True, chunk=250_000) -> UnbiasednessReport:
    """Compare the Monte Carlo mean of the importance-sampled targets with their expectation.

    For every ``(s, o_prev)`` the executing option, action, next state and
    next option are sampled ``n_samples`` times; the target for every
    option ``o~`` is averaged.  ``corrupt=True`` sets all ratios to one (a
    negative control that should fail).
    """
    rng = check_random_state(rng)
    S, K, gamma = mdp.n_states, option_set.n_options, mdp.discount
    pi, beta, mu = option_tables(option_set, S)
    upon = upon_arrival_tables(beta, mu)
    q = np.where(mdp.terminal[:, None], 0.0, _q_table(option_set, S))
    mean = np.zeros((S, K, K))
    se = np.zeros((S, K, K))
    for s in range(S):
        for prev in range(K):
            total = np.zeros(K)
            total_sq = np.zeros(K)
            left = n_samples
            while left > 0:
                n = min(chunk, left)
                left -= n
                o, a, s2, o2 = sample_transitions(mdp, option_set, s, prev, n, rng)
                q_next = q[s2, o2]
                r = mdp.reward[s, a]
                if corrupt:
                    u = np.repeat((r + gamma * q_next)[:, None], K, axis=1)
                else:
                    pi_a = pi[s][:, a].T  # (n, K)
                    p_next = upon[s2, :, o2]  # (n, K): p(o' | s', o~)
                    u = importance_targets(pi_a, p_next, o, r, q_next, gamma,
                                           action_ratio_on_bootstrap=action_ratio_on_bootstrap)
                total += u.sum(axis=0)
                total_sq += (u * u).sum(axis=0)
            m = total / n_samples
            var = np.maximum(total_sq / n_samples - m * m, 0.0)
            mean[s, prev] = m
            se[s, prev] = np.sqrt(var / n_samples)
    expected = np.broadcast_to(expected_targets(mdp, option_set)[:, None, :], (S, K, K))
    z = np.abs(mean - expected) / np.maximum(se, 1e-300)
    return UnbiasednessReport(mean, se, np.array(expected), float(np.max(z)), n_samples)


@dataclass
class IncrementReport:
    mean: np.ndarray  # (S, K)
    standard_error: np.ndarray
    expected: np.ndarray
    max_z: float

    @property
    def passed(self) -> bool:
        return self.max_z < 3.0


def expected_increment_check(mdp, option_set, n_samples=1_000_000, rng=None, chunk=250_000):
    """Multi-option value increment under stationary sampling versus ``b - A theta``.

    Pairs ``(o_prev, s)`` are drawn from the previous-option marginal, the
    rest of the step by call-and-return; the all-option increment
    ``p(o~|s,o_prev) (U(o~) - Q(s,o~))`` is accumulated per ``(s, o~)`` and
    compared with ``D (r_pi + gamma P Q - Q)``.
    """
    rng = check_random_state(rng)
    S, K, gamma = mdp.n_states, option_set.n_options, mdp.discount
    chain = build_augmented_chain(mdp, option_set)
    pair = stationary_distribution(chain)
    pi, beta, mu = option_tables(option_set, S)
    upon = chain.upon_arrival
    q = _q_table(option_set, S)
    q_boot = np.where(mdp.terminal[:, None], 0.0, q)
    start_cdf = np.cumsum(pair.d_bar.reshape(-1))
    total = np.zeros(S * K)
    total_sq = np.zeros(S * K)
    left = n_samples
    while left > 0:
        n = min(chunk, left)
        left -= n
        idx = np.minimum(np.searchsorted(start_cdf, rng.random(n), side="right"), S * K - 1)
        prev, s = np.divmod(idx, S)
        w = upon[s, prev]  # (n, K)
        o = _sample_rows(np.cumsum(w, axis=1), rng)
        a = _sample_rows(np.cumsum(pi[s, o], axis=1), rng)
        s2 = _sample_rows(np.cumsum(mdp.transition[s, a], axis=1), rng)
        o2 = _sample_rows(np.cumsum(upon[s2, o], axis=1), rng)
        pi_a = np.take_along_axis(pi[s], a[:, None, None], axis=2)[:, :, 0]
        u = importance_targets(pi_a, upon[s2, :, o2], o, mdp.reward[s, a], q_boot[s2, o2], gamma)
        inc = w * (u - q[s])
        flat = np.zeros((n, S * K))
        rows = np.arange(n)[:, None]
        flat[rows, s[:, None] * K + np.arange(K)] = inc
        total += flat.sum(axis=0)
        total_sq += (flat * flat).sum(axis=0)
    m = total / n_samples
    se = np.sqrt(np.maximum(total_sq / n_samples - m * m, 0.0) / n_samples)
    expected = pair.d * (expected_targets(mdp, option_set) - q)
    z = np.abs(m.reshape(S, K) - expected) / np.maximum(se.reshape(S, K), 1e-300)
    return IncrementReport(m.reshape(S, K), se.reshape(S, K), expected, float(np.max(z)))


# --- diversity -------------------------------------------------------------------

def information_radius_tables(pi, state_weights) -> float:
    """Equal-weight information radius of ``pi[s, o, :]`` over options, averaged with ``state_weights``."""
    pi = np.asarray(pi, dtype=float)
    w = np.asarray(state_weights, dtype=float)
    mixture = entr(pi.mean(axis=1)).sum(axis=-1)
    members = entr(pi).sum(axis=-1).mean(axis=1)
    return float(max(w @ (mixture - members), 0.0))


def information_radius(option_set, state_weights, states=None) -> float:
    """Information radius between the intra-option policies.

    ``states`` holds feature indices or vectors aligned with
    ``state_weights``; by default state ``i`` has index feature ``i``.
    """
    w = np.asarray(state_weights, dtype=float)
    states = range(len(w)) if states is None else states
    pi = np.stack([option_set.action_probs(phi) for phi in states])
    return information_radius_tables(pi, w)


__all__ = [
    "AssumptionError", "ReducibleChainError", "ConvergenceError", "AugmentedChain", "StationaryPair",
    "tabular_option_set", "random_instance", "check_positivity", "upon_arrival_tables",
    "build_augmented_chain", "chain_period", "stationary_distribution", "decomposition",
    "verify_decomposition", "AMatrixReport", "expected_A_check", "expected_targets",
    "sample_transitions", "UnbiasednessReport", "is_unbiasedness_check", "IncrementReport",
    "expected_increment_check", "information_radius_tables", "information_radius",
]

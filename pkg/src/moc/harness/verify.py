"""Numerical self-verification suite behind ``moc verify``."""

from __future__ import annotations

import time

import numpy as np

from .. import analysis
from .. import features as feat
from .. import learning
from .. import options as opt
from ..agents import OptionCriticAgent
from ..env import FourRoomsEnv

SCALES = {
    "small": dict(instances=5, max_states=8, is_samples=100_000, grad_points=10, episodes=2),
    "full": dict(instances=20, max_states=20, is_samples=1_000_000, grad_points=100, episodes=10),
}
DISCOUNTS = (0.0, 0.5, 0.9, 0.99)


def random_instances(n, max_states, max_options=4, n_actions=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        S = int(rng.integers(2, max_states + 1))
        K = int(rng.integers(1, max_options + 1))
        out.append(analysis.random_instance(S, K, n_actions, rng))
    return out


def check_decomposition(instances):
    worst_stat, worst_dec = 0.0, 0.0
    for mdp, os_ in instances:
        pair = analysis.stationary_distribution(analysis.build_augmented_chain(mdp, os_))
        worst_stat = max(worst_stat, pair.residual)
        worst_dec = max(worst_dec, analysis.verify_decomposition(pair, os_))
    return {"name": "decomposition", "passed": worst_dec < 1e-8 and worst_stat < 1e-10,
            "max_residual": worst_dec, "max_stationary_residual": worst_stat, "instances": len(instances)}


def check_a_matrix(instances, discounts=DISCOUNTS):
    min_eig, max_diff = np.inf, 0.0
    for mdp, os_ in instances:
        chain = analysis.build_augmented_chain(mdp, os_)
        pair = analysis.stationary_distribution(chain)
        for g in discounts:
            rep = analysis.expected_A_check(pair, chain, g)
            min_eig = min(min_eig, rep.min_eigenvalue)
            max_diff = max(max_diff, rep.max_abs_difference)
    return {"name": "a_matrix", "passed": bool(min_eig > 0 and max_diff < 1e-12),
            "min_eigenvalue": float(min_eig), "max_abs_difference": max_diff, "discounts": list(discounts)}


def unbiasedness_instance(seed=3):
    return analysis.random_instance(3, 2, 2, np.random.default_rng(seed))


def check_unbiasedness(n_samples, seed=0):
    mdp, os_ = unbiasedness_instance()
    rep = analysis.is_unbiasedness_check(mdp, os_, n_samples, np.random.default_rng(seed))
    return {"name": "is_unbiasedness", "passed": rep.passed, "max_z": rep.max_z, "n_samples": n_samples}


# --- gradients ---------------------------------------------------------------------
# Each factory draws one random point and returns (func, params) for finite_diff_check.

def _policy_point(rng, d=6, K=3, A=4):
    os_ = opt.random_option_set(d, K, A, rng, scale=1.0)
    phi = rng.standard_normal(d)
    o, a = int(rng.integers(K)), int(rng.integers(A))

    def func(w):
        os_.policy.set_flat(w)
        return np.log(os_.action_probs(phi)[o, a]), opt.policy_log_grad(os_, phi, o, a)
    return func, os_.policy.get_flat()


def _termination_point(rng, d=6, K=3, A=2):
    os_ = opt.random_option_set(d, K, A, rng, scale=0.5)
    phi = rng.standard_normal(d) / np.sqrt(d)
    o = int(rng.integers(K))

    def func(nu):
        os_.nu = nu.reshape(d, K)
        return os_.termination_probs(phi)[o], opt.termination_grad(os_, phi, o)
    return func, os_.nu.ravel().copy()


def _meta_point(rng, d=6, K=3, A=2):
    os_ = opt.random_option_set(d, K, A, rng, meta="param", scale=1.0, epsilon_mu=0.05)
    phi = rng.standard_normal(d)
    o = int(rng.integers(K))

    def func(z):
        os_.z = z.reshape(d, K)
        return np.log(os_.meta_probs(phi)[o]), opt.meta_log_grad(os_, phi, o)
    return func, os_.z.ravel().copy()


def _actor_point(rng, d=8, K=2, A=3):
    actor = feat.TwoLayerActor(d, K, A, hidden=128, rng=rng)
    actor.W2 = 0.3 * rng.standard_normal(actor.W2.shape)
    actor.b2 = 0.3 * rng.standard_normal(actor.b2.shape)
    x = rng.standard_normal(d)
    o, a = int(rng.integers(K)), int(rng.integers(A))
    scale = float(rng.uniform(0.5, 2.0))

    def func(p):
        actor.set_flat(p)
        _, delta = feat.actor_forward_backward(actor, x, o, a, scale)
        return scale * np.log(actor.probs(x)[o, a]), feat.TwoLayerActor.flatten_delta(delta)
    return func, actor.get_flat()


def _ac_loss_point(rng, d=5, A=3, T=5):
    policy = feat.LinearSoftmaxPolicy(d, 1, A, weights=rng.standard_normal((d, 1, A)))
    xs = rng.standard_normal((T, d))
    acts = rng.integers(A, size=T)
    adv = rng.standard_normal(T)

    def func(w):
        policy.set_flat(w)
        return learning.actor_loss_and_grad(policy, xs, acts, adv)
    return func, policy.get_flat()


GRADIENT_FAMILIES = {
    "softmax_policy": _policy_point,
    "sigmoid_termination": _termination_point,
    "meta_softmax": _meta_point,
    "two_layer_actor": _actor_point,
    "actor_critic_loss": _ac_loss_point,
}


def check_gradients(n_points, seed=0, tolerance=1e-5):
    rng = np.random.default_rng(seed)
    out = {}
    for name, factory in GRADIENT_FAMILIES.items():
        worst = 0.0
        for _ in range(n_points):
            func, params = factory(rng)
            rep = feat.finite_diff_check(func, params, perturbation=1e-5, tolerance=tolerance)
            worst = max(worst, rep.max_rel_error)
        out[name] = {"max_rel_error": worst, "passed": worst < tolerance}
    failing = [k for k, v in out.items() if not v["passed"]]
    return {"name": "gradients", "passed": not failing, "families": out, "failing": failing,
            "points": n_points}


# --- gate-closed equivalence ---------------------------------------------------------

def parameter_snapshot(option_set):
    arrays = [option_set.theta, option_set.nu, option_set.policy.get_flat()]
    if option_set.z is not None:
        arrays.append(option_set.z)
    return [a.copy() for a in arrays]


def gate_closed_trajectories(n_episodes, seed=0, **params):
    """Per-episode parameter snapshots of MOC at eta = 0 and of OC under one shared seed."""
    runs = {}
    for alg, eta in (("MOC", 0.0), ("OC", 0.3)):
        env = FourRoomsEnv(seed=seed)
        agent = OptionCriticAgent(algorithm=alg, eta=eta, random_state=seed, **params)
        snaps = []
        for _ in range(n_episodes):
            agent.partial_fit(env, 1)
            snaps.append(parameter_snapshot(agent.option_set_))
        runs[alg] = (snaps, list(agent.history_.steps))
    return runs


def check_gate_closed(n_episodes, seed=0):
    runs = gate_closed_trajectories(n_episodes, seed)
    (a, sa), (b, sb) = runs["MOC"], runs["OC"]
    identical = sa == sb and all(
        all(np.array_equal(x, y) for x, y in zip(pa, pb)) for pa, pb in zip(a, b))
    return {"name": "gate_closed", "passed": bool(identical), "episodes": n_episodes,
            "steps": int(sum(sa))}


def run_verification(scale="small"):
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {sorted(SCALES)}")
    p = SCALES[scale]
    start = time.perf_counter()
    instances = random_instances(p["instances"], p["max_states"])
    checks = [
        check_decomposition(instances),
        check_a_matrix(instances),
        check_unbiasedness(p["is_samples"]),
        check_gradients(p["grad_points"]),
        check_gate_closed(p["episodes"]),
    ]
    return {
        "scale": scale,
        "passed": all(c["passed"] for c in checks),
        "failed": [c["name"] for c in checks if not c["passed"]],
        "checks": checks,
        "elapsed_seconds": time.perf_counter() - start,
    }

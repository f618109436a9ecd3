"""Compiled episodes for the two experiment settings.

The kernels mirror :func:`moc.learning.run_episode_moc` and
:func:`moc.learning.run_flat_ac` in two configurations: tabular FourRooms
(one-hot features, linear softmax policies, one-step updates) and
MountainCar (RBF features, two-layer tanh actor, any rollout length).
They draw from the caller's ``numpy.random.Generator`` in the same order
as the reference code, so both paths follow the same trajectory up to
floating-point rounding.
"""

from __future__ import annotations

import math

import numba
import numpy as np

CLIP = 15.0
OK, DEGENERATE = 0, 1


@numba.njit(cache=True)
def _sample(p, u):
    acc = 0.0
    last = p.shape[0] - 1
    for i in range(last):
        acc += p[i]
        if u < acc:
            return i
    return last


@numba.njit(cache=True)
def _softmax(x):
    m = x.max()
    e = np.exp(x - m)
    return e / e.sum()


@numba.njit(cache=True)
def _sigmoid(logit):
    x = min(max(logit, -CLIP), CLIP)
    return 1.0 / (1.0 + math.exp(-x))


@numba.njit(cache=True)
def _meta(theta, z, s, tau, eps, param):
    K = theta.shape[1]
    if param:
        sm = _softmax(z[s].copy())
    else:
        sm = _softmax(theta[s] / tau)
    return (1.0 - eps) * sm + eps / K, sm


@numba.njit(cache=True)
def _env_step(rng, succ, goal, success, s, a):
    if rng.random() >= success:
        other = int(rng.random() * 3)
        a = other if other < a else other + 1
    nxt = succ[s, a]
    if nxt == goal:
        return nxt, 1.0, True
    return nxt, 0.0, False


@numba.njit(cache=True)
def _reset(rng, n_states, goal):
    s = int(rng.random() * (n_states - 1))
    return s if s < goal else s + 1


@numba.njit(cache=True)
def option_episode(rng, succ, goal, success, cap, zeta, nu, theta, z, param, tau, eps, frozen, eta,
                   lr_v, lr_p, lr_t, lr_m, gamma, ratio_cap, policy_is_correction, rho_on_boot,
                   run_total, run_count):
    """One call-and-return episode with online updates.  Returns ``(steps, return, status)``."""
    n_states, K, A = zeta.shape
    s = _reset(rng, n_states, goal)
    prev = -1
    mu0, _ = _meta(theta, z, s, tau, eps, param)
    o = _sample(mu0, rng.random())
    ret = 0.0
    t = 0
    run_len = 0
    while True:
        pi_s = np.empty((K, A))
        for k in range(K):
            pi_s[k] = _softmax(zeta[s, k].copy())
        a = _sample(pi_s[o], rng.random())
        s2, r, terminal = _env_step(rng, succ, goal, success, s, a)
        terminated = False
        o2 = o
        if not terminal:
            if rng.random() < _sigmoid(nu[s2, o]):
                terminated = True
                mu_n, _ = _meta(theta, z, s2, tau, eps, param)
                o2 = _sample(mu_n, rng.random())
        t += 1
        run_len += 1
        ret += r
        if eta <= 0.0:
            gate = False
        elif eta >= 1.0:
            gate = True
        else:
            gate = rng.random() < eta

        # --- deltas from the current parameters ---
        w = np.zeros(K)
        if gate:
            mu_s, _ = _meta(theta, z, s, tau, eps, param)
            if prev < 0:
                w[:] = mu_s
            else:
                b = _sigmoid(nu[s, prev])
                w[:] = b * mu_s
                w[prev] += 1.0 - b
        else:
            w[o] = 1.0
        q = theta[s].copy()
        beta2 = np.zeros(K)
        mu2 = np.zeros(K)
        sm2 = np.zeros(K)
        q2 = np.zeros(K)
        v2 = 0.0
        if terminal:
            p_next = np.ones(K)
            q_next = 0.0
        else:
            q2 = theta[s2].copy()
            for k in range(K):
                beta2[k] = _sigmoid(nu[s2, k])
            mu2, sm2 = _meta(theta, z, s2, tau, eps, param)
            v2 = mu2 @ q2
            p_next = beta2 * mu2[o2]
            p_next[o2] += 1.0 - beta2[o2]
            q_next = q2[o2]
        pi_a = pi_s[:, a].copy()
        den_a = pi_a[o]
        den_b = p_next[o]
        if den_a < 1e-12 or den_b < 1e-12:
            return t, ret, DEGENERATE
        boot = gamma * q_next
        rho_a = pi_a / den_a
        rho_b = p_next / den_b
        if ratio_cap > 0.0:
            rho_a = np.minimum(rho_a, ratio_cap)
            rho_b = np.minimum(rho_b, ratio_cap)
        if rho_on_boot:
            u = rho_a * r + rho_a * rho_b * boot
        else:
            u = rho_a * r + rho_b * boot
        g_theta = (lr_v * w) * (u - q)

        g_pol = np.zeros((K, A))
        g_nu = 0.0
        if not frozen:
            if terminal:
                qu = np.full(K, r)
            else:
                qu = r + gamma * ((1.0 - beta2) * q2 + beta2 * v2)
            if not policy_is_correction:
                qu = np.full(K, qu[o])
            coef = (lr_p * w) * (qu - q)
            for k in range(K):
                for j in range(A):
                    g_pol[k, j] = -coef[k] * pi_s[k, j]
                g_pol[k, a] += coef[k]
            if not terminal:
                logit = nu[s2, o]
                if abs(logit) < CLIP:
                    b = 1.0 / (1.0 + math.exp(-logit))
                    g_nu = -lr_t * b * (1.0 - b) * (q2[o] - v2)
        g_z = np.zeros(K)
        if param and not terminal:
            scale = lr_m * beta2[o] * (q2[o2] - v2)
            g = -sm2 * sm2[o2]
            g[o2] += sm2[o2]
            g_z = scale * ((1.0 - eps) * g / mu2[o2])

        # --- apply: values, policies, terminations, meta-policy ---
        theta[s] += g_theta
        if not frozen:
            zeta[s] += g_pol
            nu[s2, o] += g_nu
        if param and not terminal:
            z[s2] += g_z

        done = terminal or t >= cap
        if terminated or done:
            run_total[o] += run_len
            run_count[o] += 1
            run_len = 0
        if done:
            return t, ret, OK
        prev = o
        o = o2
        s = s2


@numba.njit(cache=True)
def flat_episode(rng, succ, goal, success, cap, zeta, critic, lr_v, lr_p, gamma):
    """One episode of one-step tabular actor-critic.  Returns ``(steps, return)``."""
    n_states = zeta.shape[0]
    s = _reset(rng, n_states, goal)
    ret = 0.0
    t = 0
    while True:
        probs = _softmax(zeta[s, 0].copy())
        a = _sample(probs, rng.random())
        s2, r, terminal = _env_step(rng, succ, goal, success, s, a)
        t += 1
        ret += r
        v2 = 0.0 if terminal else critic[s2, 0]
        td = r + gamma * v2 - critic[s, 0]
        critic[s, 0] += lr_v * td
        coef = lr_p * td
        g = -coef * probs
        g[a] += coef
        zeta[s, 0] += g
        if terminal or t >= cap:
            return t, ret
        s = s2


# --- MountainCar with RBF features and the two-layer actor ----------------------------

@numba.njit(cache=True)
def _mc_step(gscale, goal, pos, vel, a):
    vel += (a - 1) * 0.001 - gscale * 0.0025 * math.cos(3 * pos)
    vel = min(max(vel, -0.07), 0.07)
    pos += vel
    pos = min(max(pos, -1.2), 0.6)
    if pos == -1.2 and vel < 0:
        vel = 0.0
    return pos, vel, pos >= goal


@numba.njit(cache=True)
def _rbf(low, span, centers, widths, pos, vel):
    x0 = (pos - low[0]) / span[0]
    x1 = (vel - low[1]) / span[1]
    n = centers.shape[0]
    out = np.empty(n + 1)
    for i in range(n):
        out[i] = math.exp(-widths[i] * ((centers[i, 0] - x0) ** 2 + (centers[i, 1] - x1) ** 2))
    out[n] = 1.0
    return out


@numba.njit(cache=True)
def _actor(W1, b1, W2, b2, phi):
    h = np.tanh(phi @ W1 + b1)
    K, _, A = W2.shape
    probs = np.empty((K, A))
    for k in range(K):
        probs[k] = _softmax(h @ W2[k] + b2[k])
    return h, probs


@numba.njit(cache=True)
def _score(W2, h, probs, a, coef):
    """Pre-activation gradient and head gradient of ``sum_k coef[k] log pi(a | ., k)``."""
    K, H, A = W2.shape
    g = np.empty((K, A))
    for k in range(K):
        for j in range(A):
            g[k, j] = -coef[k] * probs[k, j]
        g[k, a] += coef[k]
    dh = np.zeros(H)
    for k in range(K):
        if coef[k] != 0.0:
            dh += W2[k] @ g[k]
    return dh * (1.0 - h * h), g


@numba.njit(cache=True)
def _add_outer(M, x, y):
    for i in range(x.shape[0]):
        xi = x[i]
        for j in range(y.shape[0]):
            M[i, j] += xi * y[j]


@numba.njit(cache=True)
def _apply_actor(W1, b1, W2, b2, phi, dpre, h, g):
    _add_outer(W1, phi, dpre)
    b1 += dpre
    K, H, A = W2.shape
    for k in range(K):
        for i in range(H):
            for j in range(A):
                W2[k, i, j] += h[i] * g[k, j]
    b2 += g


@numba.njit(cache=True)
def _clipped_sigmoids(nu, phi):
    x = phi @ nu
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        out[k] = _sigmoid(x[k])
    return out


@numba.njit(cache=True)
def _meta_dense(theta, z, phi, tau, eps, param):
    if param:
        sm = _softmax(phi @ z)
    else:
        sm = _softmax((phi @ theta) / tau)
    return (1.0 - eps) * sm + eps / theta.shape[1], sm


@numba.njit(cache=True)
def rbf_option_episode(rng, gscale, goal, cap, low, span, centers, widths, W1, b1, W2, b2, nu, theta, z,
                       param, tau, eps, frozen, eta, lr_v, lr_p, lr_t, lr_m, gamma, ratio_cap,
                       policy_is_correction, rho_on_boot, n_step, run_total, run_count):
    """One call-and-return MountainCar episode with rollout updates.

    Deltas of a rollout are all computed from the parameters at its start
    and applied record by record at its end.  Inside a rollout the value
    bootstrap and the executing option's control target are n-step returns
    chained from the last record's one-step estimate.  Returns
    ``(steps, return, status, position, velocity)`` with the last
    non-absorbing state.
    """
    d, K = theta.shape
    H = b1.shape[0]
    A = b2.shape[1]
    pos = rng.uniform(-0.6, -0.4)
    vel = 0.0
    phi = _rbf(low, span, centers, widths, pos, vel)
    prev = -1
    mu0, _ = _meta_dense(theta, z, phi, tau, eps, param)
    o = _sample(mu0, rng.random())
    ret = 0.0
    t = 0
    run_len = 0
    # pending rollout records
    r_phi = np.empty((n_step, d))
    r_phi2 = np.empty((n_step, d))
    r_th = np.zeros((n_step, K))
    r_dpre = np.zeros((n_step, H))
    r_h = np.zeros((n_step, H))
    r_g = np.zeros((n_step, K, A))
    r_nu = np.zeros(n_step)
    r_o = np.zeros(n_step, dtype=np.int64)
    r_z = np.zeros((n_step, K))
    r_upd = np.zeros((n_step, 3), dtype=np.bool_)
    r_w = np.zeros((n_step, K))
    r_q = np.zeros((n_step, K))
    r_ra = np.zeros((n_step, K))
    r_rb = np.zeros((n_step, K))
    r_rew = np.zeros(n_step)
    r_qu = np.zeros((n_step, K))
    r_pi = np.zeros((n_step, K, A))
    r_a = np.zeros(n_step, dtype=np.int64)
    r_ret = np.zeros(n_step)
    r_wp = np.zeros((n_step, K))
    n = 0
    while True:
        h, pi_s = _actor(W1, b1, W2, b2, phi)
        a = _sample(pi_s[o], rng.random())
        pos2, vel2, terminal = _mc_step(gscale, goal, pos, vel, a)
        r = 1.0 if terminal else 0.0
        phi2 = _rbf(low, span, centers, widths, pos2, vel2)
        terminated = False
        o2 = o
        beta2 = np.zeros(K)
        if not terminal:
            beta2 = _clipped_sigmoids(nu, phi2)
            if rng.random() < beta2[o]:
                terminated = True
                mu_n, _ = _meta_dense(theta, z, phi2, tau, eps, param)
                o2 = _sample(mu_n, rng.random())
        t += 1
        run_len += 1
        ret += r
        if eta <= 0.0:
            gate = False
        elif eta >= 1.0:
            gate = True
        else:
            gate = rng.random() < eta
        done = terminal or t >= cap

        # --- deltas from the current parameters ---
        q = phi @ theta
        w = np.zeros(K)
        if gate:
            mu_s, _ = _meta_dense(theta, z, phi, tau, eps, param)
            if prev < 0:
                w[:] = mu_s
            else:
                b = _clipped_sigmoids(nu, phi)[prev]
                w[:] = b * mu_s
                w[prev] += 1.0 - b
        else:
            w[o] = 1.0
        q2 = np.zeros(K)
        mu2 = np.zeros(K)
        sm2 = np.zeros(K)
        v2 = 0.0
        if terminal:
            p_next = np.ones(K)
            q_next = 0.0
        else:
            q2 = phi2 @ theta
            mu2, sm2 = _meta_dense(theta, z, phi2, tau, eps, param)
            v2 = mu2 @ q2
            p_next = beta2 * mu2[o2]
            p_next[o2] += 1.0 - beta2[o2]
            q_next = q2[o2]
        pi_a = pi_s[:, a].copy()
        den_a = pi_a[o]
        den_b = p_next[o]
        if den_a < 1e-12 or den_b < 1e-12:
            return t, ret, DEGENERATE, pos, vel
        boot = gamma * q_next
        rho_a = pi_a / den_a
        rho_b = p_next / den_b
        if ratio_cap > 0.0:
            rho_a = np.minimum(rho_a, ratio_cap)
            rho_b = np.minimum(rho_b, ratio_cap)
        if rho_on_boot:
            u = rho_a * r + rho_a * rho_b * boot
        else:
            u = rho_a * r + rho_b * boot
        r_phi[n] = phi
        r_phi2[n] = phi2
        r_w[n] = lr_v * w
        r_wp[n] = lr_p * w
        r_q[n] = q
        r_ra[n] = rho_a * r
        r_rb[n] = rho_a * rho_b * gamma if rho_on_boot else rho_b * gamma
        r_rew[n] = r
        r_th[n] = (lr_v * w) * (u - q)
        r_o[n] = o
        r_upd[n, :] = False
        if terminal:
            qu = np.full(K, r)
        else:
            qu = r + gamma * ((1.0 - beta2) * q2 + beta2 * v2)
        r_ret[n] = qu[o]
        if not frozen:
            if not policy_is_correction:
                qu = np.full(K, qu[o])
            r_qu[n] = qu
            r_pi[n] = pi_s
            r_a[n] = a
            r_h[n] = h
            r_upd[n, 0] = True
            if not terminal:
                logit = (phi2 @ nu)[o]
                if abs(logit) < CLIP:
                    b = 1.0 / (1.0 + math.exp(-logit))
                    r_nu[n] = -lr_t * b * (1.0 - b) * (q2[o] - v2)
                    r_upd[n, 1] = True
        if param and not terminal:
            scale = lr_m * beta2[o] * (q2[o2] - v2)
            g = -sm2 * sm2[o2]
            g[o2] += sm2[o2]
            r_z[n] = scale * ((1.0 - eps) * g / mu2[o2])
            r_upd[n, 2] = True
        n += 1

        # --- apply the rollout: values, policies, terminations, meta-policy per record ---
        if n >= n_step or done:
            # n-step returns chained from the last record's one-step estimate
            ret_g = r_ret[n - 1]
            for i in range(n - 2, -1, -1):
                r_th[i] = r_w[i] * (r_ra[i] + r_rb[i] * ret_g - r_q[i])
                ret_g = r_rew[i] + gamma * ret_g
                if policy_is_correction:
                    r_qu[i, r_o[i]] = ret_g
                else:
                    r_qu[i, :] = ret_g
            for i in range(n):
                if r_upd[i, 0]:
                    r_dpre[i], r_g[i] = _score(W2, r_h[i], r_pi[i], r_a[i], r_wp[i] * (r_qu[i] - r_q[i]))
            for i in range(n):
                _add_outer(theta, r_phi[i], r_th[i])
                if r_upd[i, 0]:
                    _apply_actor(W1, b1, W2, b2, r_phi[i], r_dpre[i], r_h[i], r_g[i])
                if r_upd[i, 1]:
                    nu[:, r_o[i]] += r_phi2[i] * r_nu[i]
                if r_upd[i, 2]:
                    _add_outer(z, r_phi2[i], r_z[i])
            n = 0

        if terminated or done:
            run_total[o] += run_len
            run_count[o] += 1
            run_len = 0
        if done:
            return t, ret, OK, pos, vel
        prev = o
        o = o2
        pos, vel, phi = pos2, vel2, phi2


@numba.njit(cache=True)
def rbf_flat_episode(rng, gscale, goal, cap, low, span, centers, widths, W1, b1, W2, b2, critic,
                     lr_v, lr_p, gamma, n_step, value_loss_coef):
    """One MountainCar episode of flat actor-critic.  Returns ``(steps, return)``.

    ``n_step == 1`` is one-step TD actor-critic; otherwise rollouts of
    ``n_step`` transitions use bootstrapped n-step returns.
    """
    d = critic.shape[0]
    # contiguous working copy of the critic column, written back at the end
    c = critic[:, 0].copy()
    pos = rng.uniform(-0.6, -0.4)
    vel = 0.0
    phi = _rbf(low, span, centers, widths, pos, vel)
    ret = 0.0
    t = 0
    r_phi = np.empty((n_step, d))
    r_a = np.zeros(n_step, dtype=np.int64)
    r_r = np.zeros(n_step)
    coef = np.ones(1)
    n = 0
    while True:
        h, probs = _actor(W1, b1, W2, b2, phi)
        a = _sample(probs[0], rng.random())
        pos, vel, terminal = _mc_step(gscale, goal, pos, vel, a)
        r = 1.0 if terminal else 0.0
        t += 1
        ret += r
        phi2 = _rbf(low, span, centers, widths, pos, vel)
        done = terminal or t >= cap
        if n_step == 1:
            v2 = 0.0 if terminal else phi2 @ c
            td = r + gamma * v2 - phi @ c
            c += phi * (lr_v * td)
            coef[0] = lr_p * td
            dpre, g = _score(W2, h, probs, a, coef)
            _apply_actor(W1, b1, W2, b2, phi, dpre, h, g)
        else:
            r_phi[n] = phi
            r_a[n] = a
            r_r[n] = r
            n += 1
            if n >= n_step or done:
                ret_g = 0.0 if terminal else phi2 @ c
                cs = np.zeros(n)
                dpres = np.zeros((n, b1.shape[0]))
                hs = np.zeros((n, b1.shape[0]))
                gs = np.zeros((n, 1, b2.shape[1]))
                for i in range(n - 1, -1, -1):
                    ret_g = r_r[i] + gamma * ret_g
                    adv = ret_g - r_phi[i] @ c
                    cs[i] = 2.0 * value_loss_coef * lr_v * adv
                    hi, pi_i = _actor(W1, b1, W2, b2, r_phi[i])
                    coef[0] = lr_p * adv
                    dpres[i], gs[i] = _score(W2, hi, pi_i, r_a[i], coef)
                    hs[i] = hi
                for i in range(n - 1, -1, -1):
                    c += r_phi[i] * cs[i]
                    _apply_actor(W1, b1, W2, b2, r_phi[i], dpres[i], hs[i], gs[i])
                n = 0
        if done:
            critic[:, 0] = c
            return t, ret
        phi = phi2


def supports(option_set_or_policy, env, feature_map, config) -> bool:
    """Whether the compiled kernels cover this combination."""
    return kind(option_set_or_policy, env, feature_map, config) is not None


def kind(option_set_or_policy, env, feature_map, config):
    """``"tabular"``, ``"rbf"`` or None when no compiled kernel applies."""
    from .env import FourRoomsEnv, MountainCarEnv
    from .features import LinearSoftmaxPolicy, OneHotFeatures, RBFFeatures, TwoLayerActor

    policy = getattr(option_set_or_policy, "policy", option_set_or_policy)
    if (type(env) is FourRoomsEnv and isinstance(feature_map, OneHotFeatures)
            and type(policy) is LinearSoftmaxPolicy and config.n_step == 1):
        return "tabular"
    if (type(env) is MountainCarEnv and type(feature_map) is RBFFeatures and type(policy) is TwoLayerActor
            and feature_map.centers_.shape[1] == 2):
        return "rbf"
    return None

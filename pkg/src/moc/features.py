"""State featurisation, the two-layer tanh actor, and gradient checking.

Feature maps follow the scikit-learn transformer protocol (``fit`` /
``transform`` / ``get_params``) so they can be cloned, swept and pickled
like any other estimator.  For the per-step hot path they also expose
``phi(state)``: one-hot maps return the integer index of the active
feature, RBF maps return a dense vector.  Every consumer of ``phi`` goes
through :func:`linear_readout` and :func:`add_outer`, which accept either.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_count, check_random_state


def linear_readout(weights, phi):
    """Contract the leading (feature) axis of ``weights`` with ``phi``."""
    if isinstance(phi, (int, np.integer)):
        return weights[phi]
    d = weights.shape[0]
    return (phi @ weights.reshape(d, -1)).reshape(weights.shape[1:])


def add_outer(weights, phi, g):
    """In-place ``weights += outer(phi, g)`` for index or dense features."""
    if isinstance(phi, (int, np.integer)):
        weights[phi] += g
    else:
        weights += np.multiply.outer(phi, g)


def dense(phi, n_features):
    if isinstance(phi, (int, np.integer)):
        out = np.zeros(n_features)
        out[phi] = 1.0
        return out
    return np.asarray(phi, dtype=float)


def option_features(phi, option, n_options, n_features):
    """Block layout phi(s, o): ``phi(s)`` placed in option ``o``'s block.

    The matching parameter vector for a ``(n_features, n_options)`` value
    table ``theta`` is ``theta.T.ravel()``.
    """
    out = np.zeros(n_features * n_options)
    out[option * n_features:(option + 1) * n_features] = dense(phi, n_features)
    return out


class OneHotFeatures(TransformerMixin, BaseEstimator):
    """Tabular indicator features over ``n_states`` discrete states."""

    def __init__(self, n_states=None):
        self.n_states = n_states

    def fit(self, X=None, y=None):
        if self.n_states is not None:
            n = check_count(self.n_states, "n_states")
        else:
            n = int(np.max(np.asarray(X))) + 1
        self.n_features_out_ = n
        return self

    def transform(self, X):
        check_is_fitted(self)
        idx = np.asarray(X, dtype=int).ravel()
        if np.any((idx < 0) | (idx >= self.n_features_out_)):
            raise ValueError("state index out of range")
        out = np.zeros((idx.size, self.n_features_out_))
        out[np.arange(idx.size), idx] = 1.0
        return out

    def phi(self, state):
        return int(state)

    @property
    def output_dim(self):
        return self.n_features_out_


class RBFFeatures(TransformerMixin, BaseEstimator):
    """Gaussian radial basis features on min-max normalised states, plus a bias.

    One group of ``kernels_per_radius`` centres is placed per entry of
    ``radii`` by sampling fitted states without replacement; a kernel with
    radius ``r`` has ``width = 1 / (2 r**2)`` in the normalised unit box.
    """

    def __init__(self, radii=(5.0, 2.0, 1.0, 0.5), kernels_per_radius=32, random_state=None):
        self.radii = radii
        self.kernels_per_radius = kernels_per_radius
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or not np.all(np.isfinite(X)):
            raise ValueError("RBFFeatures.fit expects a finite 2-d array of states")
        radii = np.asarray(self.radii, dtype=float).ravel()
        if radii.size == 0 or np.any(radii <= 0):
            raise ValueError("radii must be a nonempty list of positive numbers")
        k = check_count(self.kernels_per_radius, "kernels_per_radius")
        rng = check_random_state(self.random_state)
        self.low_ = X.min(axis=0)
        span = X.max(axis=0) - self.low_
        self.span_ = np.where(span > 0, span, 1.0)
        Z = (X - self.low_) / self.span_
        replace = Z.shape[0] < k
        centers, widths = [], []
        for r in radii:
            idx = rng.choice(Z.shape[0], size=k, replace=replace)
            centers.append(Z[idx])
            widths.append(np.full(k, 1.0 / (2.0 * r * r)))
        self.centers_ = np.concatenate(centers)
        self.widths_ = np.concatenate(widths)
        self.n_features_out_ = self.centers_.shape[0] + 1
        return self

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.low_) / self.span_

    def transform(self, X):
        check_is_fitted(self)
        Z = self.normalize(np.atleast_2d(X))
        if not np.all(np.isfinite(Z)):
            raise ValueError("non-finite state")
        sq = ((Z[:, None, :] - self.centers_[None]) ** 2).sum(-1)
        out = np.empty((Z.shape[0], self.n_features_out_))
        out[:, :-1] = np.exp(-self.widths_ * sq)
        out[:, -1] = 1.0
        return out

    def phi(self, state):
        x0 = (state[0] - self.low_[0]) / self.span_[0]
        x1 = (state[1] - self.low_[1]) / self.span_[1]
        if not (math.isfinite(x0) and math.isfinite(x1)):
            raise ValueError("non-finite state")
        c = self.centers_
        out = np.empty(self.n_features_out_)
        out[:-1] = np.exp(-self.widths_ * ((c[:, 0] - x0) ** 2 + (c[:, 1] - x1) ** 2))
        out[-1] = 1.0
        return out

    @property
    def output_dim(self):
        return self.n_features_out_

    def to_json(self) -> str:
        check_is_fitted(self)
        return json.dumps({
            "kind": "rbf",
            "params": {"radii": list(map(float, self.radii)), "kernels_per_radius": self.kernels_per_radius},
            "low": self.low_.tolist(), "span": self.span_.tolist(),
            "centers": self.centers_.tolist(), "widths": self.widths_.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "RBFFeatures":
        doc = json.loads(text)
        fm = cls(**doc["params"])
        fm.low_ = np.asarray(doc["low"])
        fm.span_ = np.asarray(doc["span"])
        fm.centers_ = np.asarray(doc["centers"])
        fm.widths_ = np.asarray(doc["widths"])
        fm.n_features_out_ = fm.centers_.shape[0] + 1
        return fm


def collect_random_states(env, n_samples, rng):
    """Visit ``n_samples`` states with uniformly random actions from random resets."""
    n_samples = check_count(n_samples, "n_samples")
    states = []
    budget = 10 * n_samples + 10_000
    state = env.reset(rng)
    t = 0
    while len(states) < n_samples and budget > 0:
        states.append(state)
        out = env.step(state, int(rng.integers(env.n_actions)), rng)
        t += 1
        budget -= 1
        if out.done or t >= env.max_episode_steps:
            state, t = env.reset(rng), 0
        else:
            state = out.next_state
    if len(states) < n_samples:
        raise RuntimeError(f"collected only {len(states)} of {n_samples} states")
    return np.asarray(states, dtype=float)


def rbf_fit(env, n_samples=100_000, radii=(5.0, 2.0, 1.0, 0.5), kernels_per_radius=32, rng=None):
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    rng = check_random_state(rng)
    states = collect_random_states(env, n_samples, rng)
    fm = RBFFeatures(radii=tuple(radii), kernels_per_radius=kernels_per_radius,
                     random_state=int(rng.integers(2**31)))
    fm.fit(states)
    fm.visited_ = states
    return fm


def rbf_features(feature_map, state):
    return feature_map.phi(state)


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LinearSoftmaxPolicy:
    """Per-option softmax policies with logits ``phi @ weights[:, o, :]``."""

    kind = "linear"

    def __init__(self, n_features, n_options, n_actions, weights=None):
        self.weights = np.zeros((n_features, n_options, n_actions)) if weights is None else np.array(weights, float)

    def logits(self, phi):
        return linear_readout(self.weights, phi)

    def probs(self, phi):
        return _softmax_rows(self.logits(phi))

    def score_delta(self, phi, action, coef, probs=None):
        """Direction ``sum_o coef[o] * grad log pi(action | phi, o)``."""
        probs = self.probs(phi) if probs is None else probs
        g = -coef[:, None] * probs
        g[:, action] += coef
        return ("outer", phi, g)

    def apply(self, delta):
        _, phi, g = delta
        add_outer(self.weights, phi, g)

    def get_flat(self):
        return self.weights.ravel().copy()

    def set_flat(self, flat):
        self.weights = np.asarray(flat, float).reshape(self.weights.shape).copy()

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist()}

    def copy(self):
        return LinearSoftmaxPolicy(*self.weights.shape, weights=self.weights)


class TwoLayerActor:
    """Shared tanh trunk with one linear action head per option."""

    kind = "two_layer"

    def __init__(self, n_features, n_options, n_actions, hidden=128, rng=None, params=None):
        if params is not None:
            self.W1, self.b1, self.W2, self.b2 = (np.array(params[k], float) for k in ("W1", "b1", "W2", "b2"))
            return
        rng = check_random_state(rng)
        self.W1 = rng.normal(0.0, 1.0 / math.sqrt(n_features), size=(n_features, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((n_options, hidden, n_actions))
        self.b2 = np.zeros((n_options, n_actions))

    @property
    def hidden(self):
        return self.b1.shape[0]

    def _hidden(self, phi):
        return np.tanh(linear_readout(self.W1, phi) + self.b1)

    def logits(self, phi):
        h = self._hidden(phi)
        return np.einsum("h,kha->ka", h, self.W2) + self.b2

    def probs(self, phi):
        return _softmax_rows(self.logits(phi))

    def score_delta(self, phi, action, coef, probs=None):
        if isinstance(phi, (int, np.integer)):
            raise TypeError("TwoLayerActor expects dense feature vectors")
        phi = np.asarray(phi, float)
        if phi.shape[0] != self.W1.shape[0]:
            raise ValueError(f"feature dimension {phi.shape[0]} != actor input {self.W1.shape[0]}")
        h = self._hidden(phi)
        if probs is None:
            probs = _softmax_rows(np.einsum("h,kha->ka", h, self.W2) + self.b2)
        g = -coef[:, None] * probs
        g[:, action] += coef
        dh = np.einsum("kha,ka->h", self.W2, g)
        dpre = dh * (1.0 - h * h)
        return {"W1": np.multiply.outer(phi, dpre), "b1": dpre,
                "W2": h[None, :, None] * g[:, None, :], "b2": g}

    def apply(self, delta):
        self.W1 += delta["W1"]
        self.b1 += delta["b1"]
        self.W2 += delta["W2"]
        self.b2 += delta["b2"]

    def get_flat(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2.ravel()])

    def set_flat(self, flat):
        flat = np.asarray(flat, float)
        i = 0
        for name in ("W1", "b1", "W2", "b2"):
            arr = getattr(self, name)
            setattr(self, name, flat[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    @staticmethod
    def flatten_delta(delta):
        return np.concatenate([delta["W1"].ravel(), delta["b1"], delta["W2"].ravel(), delta["b2"].ravel()])

    def to_dict(self):
        return {"kind": self.kind, "W1": self.W1.tolist(), "b1": self.b1.tolist(),
                "W2": self.W2.tolist(), "b2": self.b2.tolist()}

    def copy(self):
        return TwoLayerActor(None, None, None, params={k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")})


def actor_forward_backward(actor, features, option, action, scale):
    """Logits of ``option`` and the gradient of ``scale * log pi(action | features, option)``."""
    n_options = actor.b2.shape[0]
    coef = np.zeros(n_options)
    coef[option] = scale
    logits = actor.logits(features)[option]
    return logits, actor.score_delta(features, action, coef)


def policy_from_dict(doc):
    if doc["kind"] == "linear":
        w = np.asarray(doc["weights"], float)
        return LinearSoftmaxPolicy(*w.shape, weights=w)
    if doc["kind"] == "two_layer":
        return TwoLayerActor(None, None, None, params=doc)
    raise ValueError(f"unknown policy kind {doc['kind']!r}")


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    passed: bool
    n_params: int


def finite_diff_check(func, params, perturbation=1e-5, tolerance=1e-5, indices=None):
    """Compare an analytic gradient against central differences.

    ``func(params)`` must return ``(value, gradient)``.  The relative error
    is the largest coordinate discrepancy divided by the larger of the two
    gradients' max-norms, so near-zero coordinates do not blow it up.
    ``indices`` restricts the check to a subset of coordinates.
    """
    if not perturbation > 0:
        raise ValueError("perturbation must be positive")
    x0 = np.array(params, dtype=float)
    f0, grad = func(x0.copy())
    grad = np.asarray(grad, dtype=float).ravel()
    if not np.isfinite(f0) or not np.all(np.isfinite(grad)):
        raise ValueError("function returned non-finite values")
    flat = x0.ravel()
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += perturbation
        fp, _ = func(xp.reshape(x0.shape))
        xm = flat.copy()
        xm[i] -= perturbation
        fm, _ = func(xm.reshape(x0.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("function returned non-finite values")
        numeric[j] = (fp - fm) / (2.0 * perturbation)
    analytic = grad[idx]
    abs_err = np.abs(analytic - numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-300)
    max_abs = float(abs_err.max(initial=0.0))
    rel = max_abs / scale if max_abs > 0 else 0.0
    return GradCheckReport(rel, max_abs, tolerance, bool(rel < tolerance), int(idx.size))

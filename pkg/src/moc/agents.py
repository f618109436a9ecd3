"""Estimator-style agents.

Hyperparameters are constructor arguments (so ``get_params``, ``set_params``
and ``sklearn.base.clone`` work); learned state lives in trailing-underscore
attributes created by ``fit`` / ``partial_fit``.  ``fit`` takes an
environment instead of a data matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import OneHotFeatures, TwoLayerActor, rbf_fit
from .learning import FlatActorCritic, LearnerConfig, RunMetrics, run_episode_moc, run_flat_ac
from .options import OptionSet, hallway_options, random_option_set
from .validation import check_count, check_random_state


class _AgentBase(BaseEstimator):
    def _learner_config(self, algorithm):
        lr = self.lr
        return LearnerConfig(
            algorithm=algorithm, eta=getattr(self, "eta", 0.0),
            lr_values=self.lr_values or lr, lr_policy=self.lr_policy or lr,
            lr_termination=getattr(self, "lr_termination", None) or lr,
            lr_meta=getattr(self, "lr_meta", None) or lr,
            discount=self.discount, n_step=self.n_step,
            is_ratio_cap=getattr(self, "is_ratio_cap", None),
            policy_is_correction=getattr(self, "policy_is_correction", True),
            action_ratio_on_bootstrap=getattr(self, "action_ratio_on_bootstrap", True),
        )

    def _build_features(self, env, rng):
        if self.features == "one_hot":
            return OneHotFeatures(env.n_states).fit()
        if self.features == "rbf":
            return rbf_fit(env, self.rbf_samples, self.rbf_radii, self.kernels_per_radius, rng)
        raise ValueError(f"unknown features {self.features!r}")

    def fit(self, env, n_episodes=100):
        """Learn from scratch for ``n_episodes`` episodes."""
        for attr in [a for a in vars(self) if a.endswith("_") and not a.startswith("_")]:
            delattr(self, attr)
        return self.partial_fit(env, n_episodes)

    def partial_fit(self, env, n_episodes=1, phase=None):
        n_episodes = check_count(n_episodes, "n_episodes", minimum=0)
        if not hasattr(self, "rng_"):
            self._initialize(env)
        phase = getattr(env, "phase", "source") if phase is None else phase
        for _ in range(n_episodes):
            stats = self._episode(env)
            self.history_.append(stats, phase)
            self.n_steps_seen_ += stats.steps
        return self

    def predict_proba(self, states):
        """Marginal action distribution for each state in ``states``."""
        check_is_fitted(self, "feature_map_")
        return np.stack([self._action_marginal(self.feature_map_.phi(s)) for s in states])

    def predict(self, states):
        return self.predict_proba(states).argmax(axis=1)


class OptionCriticAgent(_AgentBase):
    """Option-critic learner; ``algorithm="MOC"`` enables multi-option updates.

    ``options="hallway"`` uses the fixed FourRooms hallway options and only
    learns option values.  With ``features="rbf"`` the intra-option
    policies are a two-layer tanh actor and the policy over options has its
    own weights (``meta="param"``).
    """

    def __init__(self, algorithm="MOC", n_options=4, eta=0.3, lr=0.8, lr_values=None, lr_policy=None,
                 lr_termination=None, lr_meta=None, discount=0.99, n_step=1, options="learned",
                 meta="softmax_q", tau=1.0, epsilon_mu=0.05, epsilon_action=0.1,
                 hallway_termination=0.01, is_ratio_cap=None, policy_is_correction=True,
                 action_ratio_on_bootstrap=True, features="one_hot", hidden=128,
                 rbf_radii=(5.0, 2.0, 1.0, 0.5), kernels_per_radius=32, rbf_samples=100_000,
                 init_scale=0.0, random_state=None):
        self.algorithm = algorithm
        self.n_options = n_options
        self.eta = eta
        self.lr = lr
        self.lr_values = lr_values
        self.lr_policy = lr_policy
        self.lr_termination = lr_termination
        self.lr_meta = lr_meta
        self.discount = discount
        self.n_step = n_step
        self.options = options
        self.meta = meta
        self.tau = tau
        self.epsilon_mu = epsilon_mu
        self.epsilon_action = epsilon_action
        self.hallway_termination = hallway_termination
        self.is_ratio_cap = is_ratio_cap
        self.policy_is_correction = policy_is_correction
        self.action_ratio_on_bootstrap = action_ratio_on_bootstrap
        self.features = features
        self.hidden = hidden
        self.rbf_radii = rbf_radii
        self.kernels_per_radius = kernels_per_radius
        self.rbf_samples = rbf_samples
        self.init_scale = init_scale
        self.random_state = random_state

    def _initialize(self, env):
        if self.algorithm not in ("MOC", "OC"):
            raise ValueError(f"OptionCriticAgent runs MOC or OC, not {self.algorithm!r}")
        self.rng_ = check_random_state(self.random_state)
        self.config_ = self._learner_config(self.algorithm)
        self.feature_map_ = self._build_features(env, self.rng_)
        d = self.feature_map_.output_dim
        if self.options == "hallway":
            self.option_set_ = hallway_options(env, self.epsilon_action, self.hallway_termination,
                                               tau=self.tau, epsilon_mu=self.epsilon_mu)
        elif self.options == "learned":
            os_ = random_option_set(d, self.n_options, env.n_actions, self.rng_, meta=self.meta,
                                    scale=self.init_scale, tau=self.tau, epsilon_mu=self.epsilon_mu)
            if self.features == "rbf":
                os_.policy = TwoLayerActor(d, self.n_options, env.n_actions, self.hidden, self.rng_)
            self.option_set_ = os_
        else:
            raise ValueError(f"options must be 'learned' or 'hallway', got {self.options!r}")
        self.history_ = RunMetrics()
        self.n_steps_seen_ = 0

    def _episode(self, env):
        return run_episode_moc(self.option_set_, env, self.config_, self.rng_, self.feature_map_)

    def _action_marginal(self, phi):
        os_ = self.option_set_
        return os_.meta_probs(phi) @ os_.action_probs(phi)


class ActorCriticAgent(_AgentBase):
    """Flat actor-critic baseline (softmax policy, linear state-value critic)."""

    def __init__(self, lr=0.2, lr_values=None, lr_policy=None, discount=0.99, n_step=1,
                 features="one_hot", hidden=128, rbf_radii=(5.0, 2.0, 1.0, 0.5),
                 kernels_per_radius=32, rbf_samples=100_000, value_loss_coef=0.5, random_state=None):
        self.lr = lr
        self.lr_values = lr_values
        self.lr_policy = lr_policy
        self.discount = discount
        self.n_step = n_step
        self.features = features
        self.hidden = hidden
        self.rbf_radii = rbf_radii
        self.kernels_per_radius = kernels_per_radius
        self.rbf_samples = rbf_samples
        self.value_loss_coef = value_loss_coef
        self.random_state = random_state

    def _initialize(self, env):
        self.rng_ = check_random_state(self.random_state)
        self.config_ = self._learner_config("AC")
        self.config_.value_loss_coef = self.value_loss_coef
        self.feature_map_ = self._build_features(env, self.rng_)
        d = self.feature_map_.output_dim
        policy = TwoLayerActor(d, 1, env.n_actions, self.hidden, self.rng_) if self.features == "rbf" else None
        self.agent_ = FlatActorCritic(d, env.n_actions, policy)
        self.history_ = RunMetrics()
        self.n_steps_seen_ = 0

    def _episode(self, env):
        return run_flat_ac(self.agent_, env, self.config_, self.rng_, self.feature_map_)

    def _action_marginal(self, phi):
        return self.agent_.action_probs(phi)


def make_agent(algorithm, **params):
    if algorithm == "AC":
        return ActorCriticAgent(**params)
    return OptionCriticAgent(algorithm=algorithm, **params)


__all__ = ["OptionCriticAgent", "ActorCriticAgent", "make_agent", "OptionSet"]

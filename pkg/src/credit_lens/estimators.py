"""scikit-learn style front ends for the exact and plug-in credit pipelines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .credit import credit_reports, information_sparsity, pairwise_table
from .engine import enumerate_trajectories
from .info import MERGE_TOL
from .mdp import Mdp, check_mdp, check_policy
from .sampling import plugin_measures, sample_trajectories


def _check_steps(X, m: Mdp) -> np.ndarray:
    """Validate an ``(n, 3)`` integer array of 1-based ``(h, s, a)`` rows."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] != 3:
        raise ValueError(f"expected rows of (h, s, a), got {X.shape[1]} columns")
    bounds = np.array([m.horizon, m.num_states - 1, m.num_actions - 1])
    lows = np.array([1, 0, 0])
    bad = np.any((X < lows) | (X > bounds), axis=1)
    if bad.any():
        raise ValueError(f"row {int(np.argmax(bad))} is out of range for this MDP: {X[bad][0].tolist()}")
    return X


class ExactCreditAnalyzer(BaseEstimator):
    """Enumerate every trajectory of ``mdp`` under ``policy`` and compute the
    credit measures exactly.

    ``transform`` maps ``(h, s, a)`` rows to per-pair credit in nats; pairs the
    policy never reaches come back as NaN.
    """

    def __init__(self, policy="uniform", merge_tol=MERGE_TOL, budget=None, marginalize_time=False):
        self.policy = policy
        self.merge_tol = merge_tol
        self.budget = budget
        self.marginalize_time = marginalize_time

    def fit(self, mdp, y=None):
        m = check_mdp(mdp)
        pol = check_policy(self.policy, m)
        self.mdp_ = m
        self.table_ = enumerate_trajectories(m, pol, self.budget, self.merge_tol)
        self.information_sparsity_ = information_sparsity(self.table_, marginalize_time=self.marginalize_time)
        self.pairwise_credit_ = pairwise_table(self.table_)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        X = _check_steps(X, self.mdp_)
        return self.pairwise_credit_[X[:, 0] - 1, X[:, 1], X[:, 2]]

    def reports(self, measures=None):
        check_is_fitted(self, "table_")
        kw = {} if measures is None else {"measures": measures}
        return credit_reports(self.table_, marginalize_time=self.marginalize_time, **kw)

    def score(self, X=None, y=None):
        """Information sparsity of the fitted MDP (nats)."""
        check_is_fitted(self, "table_")
        return self.information_sparsity_


class PluginCreditEstimator(BaseEstimator):
    """Estimate the credit measures from ``n_samples`` seeded trajectories."""

    def __init__(self, policy="uniform", n_samples=10_000, seed=0, merge_tol=MERGE_TOL,
                 miller_madow=False, marginalize_time=False):
        self.policy = policy
        self.n_samples = n_samples
        self.seed = seed
        self.merge_tol = merge_tol
        self.miller_madow = miller_madow
        self.marginalize_time = marginalize_time

    def fit(self, mdp, y=None):
        m = check_mdp(mdp)
        pol = check_policy(self.policy, m)
        self.mdp_ = m
        self.batch_ = sample_trajectories(m, pol, int(self.n_samples), int(self.seed))
        self.reports_ = {
            r.measure: r
            for r in plugin_measures(self.batch_, self.merge_tol, miller_madow=self.miller_madow,
                                     marginalize_time=self.marginalize_time)
        }
        self.information_sparsity_ = self.reports_["info_sparsity"].scalar()
        pw = np.full((m.horizon, m.num_states, m.num_actions), np.nan)
        for (h, s, a), v in self.reports_["pairwise_kl"].values.items():
            pw[h - 1, s, a] = v
        self.pairwise_credit_ = pw
        return self

    def transform(self, X):
        check_is_fitted(self, "batch_")
        X = _check_steps(X, self.mdp_)
        return self.pairwise_credit_[X[:, 0] - 1, X[:, 1], X[:, 2]]

    def score(self, X=None, y=None):
        check_is_fitted(self, "batch_")
        return self.information_sparsity_

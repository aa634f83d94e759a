"""Estimator-style wrapper: hyperparameters in ``__init__``, work in ``fit``."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_scalar

from .algorithm import BASELINES, AlgoConfig, run
from .metrics import default_cadence
from .problems import ProblemInstance
from .topology import MixingMatrix, build_mixing


class DMGDA(BaseEstimator):
    """Fit a decentralized minimax problem with momentum GDA.

    ``fit`` takes a ``ProblemInstance`` in place of a data matrix. After fitting,
    ``x_``/``y_`` hold the node-averaged final iterates, ``summary_`` the run
    summary and ``records_`` the recorded metrics.
    """

    def __init__(self, T=1000, gamma=None, lam=None, eta_scale=1.0, alpha_scale=1.0,
                 beta_scale=1.0, schedule_mode="theorem1", seed=0, baseline="dmgda",
                 cadence=None, n_threads=1):
        self.T = T
        self.gamma = gamma
        self.lam = lam
        self.eta_scale = eta_scale
        self.alpha_scale = alpha_scale
        self.beta_scale = beta_scale
        self.schedule_mode = schedule_mode
        self.seed = seed
        self.baseline = baseline
        self.cadence = cadence
        self.n_threads = n_threads

    def _validate_params(self):
        check_scalar(self.T, "T", numbers.Integral, min_val=0)
        for name in ("eta_scale", "alpha_scale", "beta_scale"):
            check_scalar(getattr(self, name), name, numbers.Real, min_val=0, include_boundaries="neither")
        for name in ("gamma", "lam"):
            if getattr(self, name) is not None:
                check_scalar(getattr(self, name), name, numbers.Real, min_val=0, include_boundaries="neither")
        if self.cadence is not None:
            check_scalar(self.cadence, "cadence", numbers.Integral, min_val=1)
        check_scalar(self.n_threads, "n_threads", numbers.Integral, min_val=1)
        check_scalar(self.seed, "seed", numbers.Integral, min_val=0)
        if self.schedule_mode not in ("theorem1", "constant"):
            raise ValueError(f"schedule_mode must be 'theorem1' or 'constant', got {self.schedule_mode!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")

    def _config(self) -> AlgoConfig:
        return AlgoConfig(
            T=int(self.T), gamma=self.gamma, lam=self.lam, eta_scale=self.eta_scale,
            alpha_scale=self.alpha_scale, beta_scale=self.beta_scale,
            schedule_mode=self.schedule_mode, seed=int(self.seed), baseline=self.baseline,
        )

    def fit(self, problem: ProblemInstance, W=None, x0=None, y0=None) -> "DMGDA":
        """Run the algorithm on ``problem`` over ``W`` (ring by default when ``m > 1``)."""
        self._validate_params()
        if not isinstance(problem, ProblemInstance):
            raise TypeError(f"expected a ProblemInstance, got {type(problem).__name__}")
        m = problem.m
        if W is None:
            W = build_mixing("ring", m) if m > 1 else build_mixing("complete", 1)
        elif not isinstance(W, MixingMatrix):
            W = check_array(W, ensure_2d=True)
        x0 = np.ones(problem.d) if x0 is None else check_array(x0, ensure_2d=False)
        y0 = np.zeros(problem.p) if y0 is None else check_array(y0, ensure_2d=False)
        cadence = self.cadence or default_cadence(int(self.T))
        summary = run(self._config(), problem, W, x0, y0, cadence=cadence, threads=self.n_threads)
        self.config_ = summary.config
        self.summary_ = summary
        self.records_ = summary.records
        self.state_ = summary.final_state
        self.x_ = summary.final_state.x_bar
        self.y_ = summary.final_state.y_bar
        self.n_grad_calls_ = summary.grad_calls_total
        return self

    def stationarity(self, problem: ProblemInstance) -> float:
        """``||grad F||`` at the fitted primal average."""
        check_is_fitted(self)
        return float(np.linalg.norm(problem.oracle_F(self.x_).grad))

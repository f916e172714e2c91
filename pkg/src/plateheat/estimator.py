"""Estimator facade with a scikit-learn-style API.

``ThermalFieldRegressor`` wraps configuration, collocation building, and the
training loop behind ``fit``/``predict``.  The model is physics-trained: fit
takes no data (X and y are accepted and ignored so pipelines hold together),
and predict maps rows of (x, y, z, t, rho, cp, k) to temperatures in kelvin.
"""
from __future__ import annotations

import inspect

import numpy as np

from . import config as runcfg
from .model import Normalizer, predict_temperatures
from .sampling import build_collocation, get_profile
from .train import train


class NotFittedError(RuntimeError):
    """predict was called before fit."""


class ThermalFieldRegressor:
    """Zero-data surrogate for bare-plate moving-laser heating.

    Parameters mirror the run-config knobs most often varied; everything
    else stays at the profile's settings.  ``process`` and ``space`` accept
    ready-made :class:`~plateheat.physics.ProcessConfig` /
    :class:`~plateheat.physics.MaterialSpace` instances for non-default
    problems.
    """

    def __init__(self, architecture="decoupled", scaling="physics_guided",
                 kappa=1.5, epsilon=1e-3, profile="desk", seed=0,
                 adam_epochs=None, total_epochs=None, curriculum_epochs=None,
                 material=None, process=None, space=None):
        self.architecture = architecture
        self.scaling = scaling
        self.kappa = kappa
        self.epsilon = epsilon
        self.profile = profile
        self.seed = seed
        self.adam_epochs = adam_epochs
        self.total_epochs = total_epochs
        self.curriculum_epochs = curriculum_epochs
        self.material = material
        self.process = process
        self.space = space

    # -- sklearn plumbing --------------------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for "
                                 f"{type(self).__name__}")
            setattr(self, name, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    # -- fitting -----------------------------------------------------------

    def _resolved_config(self):
        cfg = runcfg.default_config()
        runcfg.apply_profile(cfg, self.profile)
        cfg["network"]["architecture"] = self.architecture
        cfg["network"]["scaling"] = self.scaling
        cfg["network"]["kappa"] = self.kappa
        cfg["network"]["epsilon"] = self.epsilon
        cfg["sampling"]["seed"] = int(self.seed)
        if self.material is not None:
            mat = self.material
            cfg["sampling"]["material"] = (mat if isinstance(mat, str)
                                           else [float(v) for v in mat])
        for key in ("adam_epochs", "total_epochs", "curriculum_epochs"):
            value = getattr(self, key)
            if value is not None:
                cfg["optimizer"][key] = int(value)
        runcfg.validate(cfg)
        return cfg

    def fit(self, X=None, y=None):
        """Train from physics residuals alone; X and y are ignored."""
        cfg = self._resolved_config()
        process = self.process if self.process is not None \
            else runcfg.process_config(cfg)
        space = self.space if self.space is not None \
            else runcfg.material_space(cfg)
        norm = Normalizer.for_problem(process, space)
        colloc = build_collocation(process,
                                   get_profile(cfg["sampling"]["profile"]))
        from .model import init_params
        net = init_params(self.architecture, seed=int(self.seed),
                          with_scale_aux=self.scaling == "learned_tmax")
        adam_batch, lbfgs_batch = runcfg.batch_specs(cfg)
        net, records = train(
            net, colloc, space, process, norm,
            runcfg.scaling_config(cfg),
            weights=runcfg.loss_weights(cfg),
            opt=runcfg.optimizer_config(cfg),
            adam_batch=adam_batch, lbfgs_batch=lbfgs_batch,
            seed=int(self.seed), fixed_lam=runcfg.fixed_material(cfg))
        self.net_ = net
        self.records_ = records
        self.process_ = process
        self.space_ = space
        self.normalizer_ = norm
        self.scaling_ = runcfg.scaling_config(cfg)
        return self

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                f"this {type(self).__name__} instance is not fitted yet; "
                "call fit before predict")

    def predict(self, X):
        """Temperatures for rows (x, y, z, t, rho, cp, k); a 4-column input
        is allowed when the estimator was fitted to one fixed material."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] not in (4, 7):
            raise ValueError("X must be (n, 7) rows (x, y, z, t, rho, cp, k) "
                             "or (n, 4) with a fixed material")
        if X.shape[1] == 4:
            if self.material is None:
                raise ValueError("4-column input requires the estimator's "
                                 "material parameter to be set")
            cfg = self._resolved_config()
            lam = runcfg.fixed_material(cfg)
        else:
            lam = X[:, 4:7]
        return predict_temperatures(self.net_, X[:, :4], lam, self.scaling_,
                                    self.process_, self.normalizer_)

    def score(self, X, y):
        """Coefficient of determination of predicted vs given temperatures."""
        y = np.asarray(y, dtype=np.float64)
        pred = self.predict(X)
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - np.mean(y)) ** 2))
        if ss_tot == 0.0:
            return 0.0 if ss_res > 0.0 else 1.0
        return 1.0 - ss_res / ss_tot

"""Error-imputation models and their propensity-weighted update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import propensity as prop
from .backbones import Adam, Backbone, make_backbone, weighted_update
from .errors import ContractError

CONVENTIONS = ("residual", "squared")


def prediction_error(ratings, predictions, convention):
    """``y - f`` for the residual convention, ``(y - f)**2`` for squared."""
    r = np.asarray(ratings, dtype=np.float64) - np.asarray(predictions, dtype=np.float64)
    if convention == "residual":
        return r
    if convention == "squared":
        return r * r
    raise ValueError(f"unknown error convention {convention!r}")


@dataclass
class ImputationModel:
    """A backbone regressing the prediction error of the current predictor.

    Under the ``residual`` convention the backbone learns ``y - f`` and the
    imputed *squared* error used by the estimators is its square; under
    ``squared`` it learns ``(y - f)**2`` directly.

    Each update pins the pseudo-rating ``f + m`` to a snapshot (``anchor``)
    of the predictor it was fitted against. When the live predictor moves
    on, the imputed residual becomes ``anchor + m - f`` rather than a stale
    ``m``, so prediction steps taken between imputation updates cannot
    overshoot the pseudo-rating.
    """

    backbone: Backbone
    optimizer: object = field(default_factory=Adam)
    kind: str = "mf"
    convention: str = "residual"
    cap: float | None = None
    frozen: bool = False
    anchor: Backbone | None = field(default=None, repr=False)
    live: Backbone | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown error convention {self.convention!r}")

    def impute_batch(self, users, items, capped=False):
        out = self.backbone.predict_batch(users, items)
        if capped and self.cap is not None:
            out = np.clip(out, -self.cap, self.cap)
        return out

    def attach(self, prediction_model):
        """Pin the pseudo-rating to ``prediction_model`` as it is now."""
        self.anchor = prediction_model.copy()
        self.live = prediction_model

    def imputed_residuals(self, users, items, capped=False):
        """``pseudo-rating - f`` for the live predictor (residual convention)."""
        r = self.impute_batch(users, items)
        if self.anchor is not None:
            r = r + self.anchor.predict_batch(users, items) - self.live.predict_batch(users, items)
        if capped and self.cap is not None:
            r = np.clip(r, -self.cap, self.cap)
        return r

    def imputed_errors(self, users, items, capped=False):
        """Imputed squared-error values that enter the estimators."""
        if self.convention == "squared":
            return self.impute_batch(users, items, capped)
        r = self.imputed_residuals(users, items, capped)
        return r * r

    def imputed_error_slope(self, users, items):
        """d(imputed error)/d(prediction) with the pseudo-rating held fixed."""
        if self.convention == "squared":
            return np.zeros(len(np.asarray(users)))
        return -2.0 * self.imputed_residuals(users, items)


class OracleImputation:
    """Imputes the exact squared error of a live prediction model (testing aid)."""

    kind = "oracle"
    convention = "squared"
    frozen = True

    def __init__(self, full_ratings, prediction_model, cap=None):
        self.full_ratings = np.asarray(full_ratings, dtype=np.float64)
        self.prediction_model = prediction_model
        self.cap = cap

    def impute_batch(self, users, items, capped=False):
        y = self.full_ratings[np.asarray(users), np.asarray(items)]
        out = prediction_error(y, self.prediction_model.predict_batch(users, items), "squared")
        if capped and self.cap is not None:
            out = np.clip(out, -self.cap, self.cap)
        return out

    imputed_errors = impute_batch

    def imputed_error_slope(self, users, items):
        y = self.full_ratings[np.asarray(users), np.asarray(items)]
        return -2.0 * (y - self.prediction_model.predict_batch(users, items))


def make_imputation_model(num_users, num_items, kind="mf", seed=0, lr=1e-2,
                          weight_decay=0.0, convention="residual", cap=None, **dims):
    backbone = make_backbone(kind, num_users, num_items, seed=seed, **dims)
    return ImputationModel(backbone, Adam(lr=lr, weight_decay=weight_decay), kind, convention, cap)


def impute(model, u, i, capped=False):
    return float(model.impute_batch(np.array([u]), np.array([i]), capped)[0])


def update_imputation(model, dataset, users, items, prediction_model, propensity_model):
    """One step on ``mean((m - e)**2 / p_hat)`` over observed cells.

    ``e`` is recomputed from ``prediction_model`` here, which stays frozen.
    Afterwards the model is anchored to ``prediction_model``. Returns the
    loss before the step.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if not np.all(dataset.is_observed(users, items)):
        raise ContractError("imputation batch contains unobserved cells")
    y = dataset.lookup(users, items)
    target = prediction_error(y, prediction_model.predict_batch(users, items), model.convention)
    p_hat = prop.estimate_cells(propensity_model, dataset, users, items)
    loss = weighted_update(model.backbone, users, items, target, 1.0 / p_hat, model.optimizer)
    if model.convention == "residual":
        model.attach(prediction_model)
    return loss

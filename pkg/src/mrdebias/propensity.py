"""Candidate propensity models and their clipped estimates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MissingMarSampleError, OracleUnavailableError

KINDS = ("naive_bayes", "naive_bayes_uniform", "user_frequency", "constant", "oracle")
DEFAULT_CLIP_FLOOR = 0.05


@dataclass
class PropensityModel:
    kind: str
    params: dict = field(default_factory=dict)
    clip_floor: float = DEFAULT_CLIP_FLOOR

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown propensity kind {self.kind!r}")
        if not 0 < self.clip_floor < 1:
            raise DomainError("clip_floor must lie in (0, 1)")

    def to_text(self):
        """Key/value dump; floats are written with ``repr`` so it round-trips."""
        lines = [f"kind = {json.dumps(self.kind)}", f"clip_floor = {json.dumps(self.clip_floor)}"]
        for key in sorted(self.params):
            val = self.params[key]
            if isinstance(val, np.ndarray):
                val = val.tolist()
            lines.append(f"{key} = {json.dumps(val)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = json.loads(raw)
        kind = values.pop("kind")
        floor = values.pop("clip_floor")
        for key in ("rates", "levels", "p_rating_given_obs", "p_rating", "p_obs_given_rating"):
            if key in values:
                values[key] = np.asarray(values[key], dtype=np.float64)
        return cls(kind, values, floor)


def _smoothed_frequencies(ratings, levels, pseudo=1.0):
    counts = np.array([np.sum(ratings == lv) for lv in levels], dtype=np.float64)
    return (counts + pseudo) / (counts.sum() + pseudo * len(levels))


def naive_bayes_propensity(p_rating_given_obs, p_obs, p_rating):
    """Bayes rule ``P(o=1 | y=r) = P(y=r | o=1) P(o=1) / P(y=r)``."""
    return np.asarray(p_rating_given_obs) * p_obs / np.asarray(p_rating)


def _nb_model(kind, train, p_rating, clip_floor):
    levels = train.rating_levels
    p_r_obs = _smoothed_frequencies(train.ratings, levels)
    p_obs = (train.num_observed + 1.0) / (train.num_cells + 2.0)
    table = naive_bayes_propensity(p_r_obs, p_obs, p_rating)
    params = {
        "levels": np.asarray(levels, dtype=np.float64),
        "p_obs": float(p_obs),
        "p_rating_given_obs": p_r_obs,
        "p_rating": np.asarray(p_rating, dtype=np.float64),
        "p_obs_given_rating": table,
    }
    return PropensityModel(kind, params, clip_floor)


def fit_naive_bayes(train, mar_sample, clip_floor=DEFAULT_CLIP_FLOOR):
    """Rating-only Naive Bayes propensities with the rating marginal from a MAR sample.

    All categorical frequencies carry a Laplace pseudo-count of one.
    """
    if mar_sample is None or mar_sample.num_observed == 0:
        raise MissingMarSampleError("naive_bayes needs a non-empty missing-at-random sample")
    if train.num_observed == 0:
        raise ValueError("empty training set")
    p_rating = _smoothed_frequencies(mar_sample.ratings, train.rating_levels)
    return _nb_model("naive_bayes", train, p_rating, clip_floor)


def fit_naive_bayes_uniform(train, clip_floor=DEFAULT_CLIP_FLOOR):
    """Naive Bayes with a uniform rating marginal; needs no MAR sample."""
    if train.num_observed == 0:
        raise ValueError("empty training set")
    R = len(train.rating_levels)
    return _nb_model("naive_bayes_uniform", train, np.full(R, 1.0 / R), clip_floor)


def fit_user_frequency(train, clip_floor=DEFAULT_CLIP_FLOOR):
    """Per-user observation rate ``(n_u + 1) / (num_items + 2)``."""
    if train.num_observed == 0:
        raise ValueError("empty training set")
    counts = np.bincount(train.users, minlength=train.num_users).astype(np.float64)
    rates = (counts + 1.0) / (train.num_items + 2.0)
    return PropensityModel("user_frequency", {"rates": rates}, clip_floor)


def constant_model(value, clip_floor=DEFAULT_CLIP_FLOOR):
    if not 0 < value <= 1:
        raise DomainError("constant propensity must lie in (0, 1]")
    return PropensityModel("constant", {"value": float(value)}, clip_floor)


def oracle_model(clip_floor=DEFAULT_CLIP_FLOOR):
    return PropensityModel("oracle", {}, clip_floor)


def raw_estimates(model, dataset, users, items):
    """Unclipped estimates at the given cells."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    kind, p = model.kind, model.params
    if kind == "constant":
        return np.full(users.shape, p["value"], dtype=np.float64)
    if kind == "user_frequency":
        return np.asarray(p["rates"])[users]
    if kind == "oracle":
        if dataset.true_propensities is None:
            raise OracleUnavailableError("oracle propensities need true_propensities")
        return dataset.true_propensities[users, items]
    # Naive Bayes: rating-specific on observed cells, marginal mixture elsewhere.
    levels = np.asarray(p["levels"])
    table = np.asarray(p["p_obs_given_rating"])
    mixture = float(np.dot(p["p_rating"], table))
    ratings = dataset.lookup(users, items)
    seen = ~np.isnan(ratings)
    out = np.full(users.shape, mixture)
    if seen.any():
        idx = np.searchsorted(levels, ratings[seen])
        idx = np.clip(idx, 0, len(levels) - 1)
        if not np.array_equal(levels[idx], ratings[seen]):
            raise DomainError("observed rating not among the model's rating levels")
        out[seen] = table[idx]
    return out


def estimate_cells(model, dataset, users, items):
    """Estimates clipped into ``[clip_floor, 1]``."""
    return np.clip(raw_estimates(model, dataset, users, items), model.clip_floor, 1.0)


def estimate(model, dataset, u, i):
    return float(estimate_cells(model, dataset, np.array([u]), np.array([i]))[0])


def estimate_matrix(model, dataset):
    u, i = np.divmod(np.arange(dataset.num_cells), dataset.num_items)
    return estimate_cells(model, dataset, u, i).reshape(dataset.shape)


def fit_propensity(kind, train, mar_sample=None, clip_floor=DEFAULT_CLIP_FLOOR, value=None):
    """Dispatch by kind name (used by the experiment runner)."""
    if kind == "naive_bayes":
        return fit_naive_bayes(train, mar_sample, clip_floor)
    if kind == "naive_bayes_uniform":
        return fit_naive_bayes_uniform(train, clip_floor)
    if kind == "user_frequency":
        return fit_user_frequency(train, clip_floor)
    if kind == "constant":
        return constant_model(train.density if value is None else value, clip_floor)
    if kind == "oracle":
        return oracle_model(clip_floor)
    raise ValueError(f"unknown propensity kind {kind!r}")

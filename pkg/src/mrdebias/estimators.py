"""Loss estimators over a user-item grid, the ridge eta solve, and oracles.

Array conventions: ``errors``, ``observed``, ``p_hat`` and ``m_hat`` are
arrays over the same set of cells (any shape; flattened internally).
``errors`` is only read where ``observed`` is true.  ``features`` is an
``(n, J + K)`` matrix whose first ``J`` columns are inverse propensities.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from ._rng import derive_seed, make_rng
from .data import sample_observation_mask
from .errors import (
    BoundInapplicableError,
    ContractError,
    DomainError,
    MonteCarloError,
    OracleUnavailableError,
    SingularSystemError,
    UndefinedEstimateError,
)

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


def squared_error(y, y_hat):
    d = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return d * d


def residual_error(y, y_hat):
    return np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)


# --------------------------------------------------------------------------
# Feature vectors and the eta solve


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    num_propensity: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector has non-finite entries")
        object.__setattr__(self, "values", v)


def build_feature_vector(ensemble, dataset, u, i):
    f = ensemble.features(dataset, np.array([u]), np.array([i]))[0]
    return FeatureVector(f, ensemble.J)


@dataclass
class EtaSolution:
    eta: np.ndarray
    lam: float
    gram_condition_estimate: float
    solved_on: str = ""
    lam_bumped: bool = False

    @property
    def l1_norm(self):
        return float(np.abs(self.eta).sum())


def _gram(features, lam):
    F = np.asarray(features, dtype=np.float64)
    return F.T @ F + lam * np.eye(F.shape[1])


def solve_eta(features, errors, lam=0.0, *, strict=True, solved_on=""):
    """Ridge coefficients ``(sum u u^T + lam I)^-1 sum u e``.

    With ``lam == 0`` a singular or ill-conditioned Gram matrix raises
    :class:`SingularSystemError` in strict mode; otherwise ``lam`` is bumped
    to ``1e-6 * trace / (J + K)`` with a warning.
    """
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    if F.shape[0] < 1:
        raise ContractError("eta batch is empty")
    if F.shape[0] != e.shape[0]:
        raise ContractError(f"{F.shape[0]} feature rows but {e.shape[0]} errors")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(e))):
        raise ContractError("non-finite features or errors in eta batch")

    gram = _gram(F, lam)
    cond = float(np.linalg.cond(gram))
    bumped = False
    if lam == 0 and not cond < CONDITION_LIMIT:
        if strict:
            raise SingularSystemError(
                f"Gram matrix is singular or ill-conditioned (condition {cond:.3g}); "
                "use a positive lambda"
            )
        lam = 1e-6 * float(np.trace(gram)) / F.shape[1]
        warnings.warn(f"ill-conditioned Gram matrix (condition {cond:.3g}); lambda bumped to {lam:.3g}")
        gram = _gram(F, lam)
        cond = float(np.linalg.cond(gram))
        bumped = True
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise SingularSystemError("Gram matrix is not positive definite; use a positive lambda") from None
    eta = linalg.cho_solve(factor, F.T @ e, check_finite=False)
    return EtaSolution(eta, float(lam), cond, solved_on, bumped)


def eta_sample_weights(features_eta, mean_loss_features, lam):
    """Per-sample weights ``w_m = u_m^T (G + lam I)^-1 ubar``.

    The mean MR loss over a batch equals ``sum_m w_m e_m`` exactly, so these
    are the weights with which each eta-batch error enters the loss.
    """
    gram = _gram(features_eta, lam)
    c = linalg.cho_solve(linalg.cho_factor(gram, lower=True), np.asarray(mean_loss_features))
    return np.asarray(features_eta) @ c


# --------------------------------------------------------------------------
# Estimators


def _flat(*arrays):
    return [None if a is None else np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]


def _observed(observed):
    return np.asarray(observed, dtype=bool).reshape(-1)


def _masked_errors(errors, o):
    (e,) = _flat(errors)
    return np.where(o, e, 0.0)


def mr_loss(features, eta):
    """Mean of ``u^T eta`` over the rows of ``features``."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    coef = eta.eta if isinstance(eta, EtaSolution) else np.asarray(eta, dtype=np.float64)
    if F.shape[1] != coef.shape[0]:
        raise ContractError(f"eta has length {coef.shape[0]} but features have {F.shape[1]} columns")
    return float(np.mean(F @ coef))


def mr_loss_rewritten(features, eta, observed, errors, j=0):
    """The same estimate written as ``mean(o e / p^j + (1 - o / p^j) u^T eta)``.

    Equal to :func:`mr_loss` when eta solves the normal equations (lambda 0)
    on the observed rows of this very set of cells.
    """
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    coef = eta.eta if isinstance(eta, EtaSolution) else np.asarray(eta, dtype=np.float64)
    o = _observed(observed)
    e = _masked_errors(errors, o)
    inv_p = F[:, j]
    fit = F @ coef
    return float(np.mean(o * e * inv_p + (1.0 - o * inv_p) * fit))


def ideal_loss(dataset, prediction_model, error_fn=squared_error):
    if dataset.full_ratings is None:
        raise OracleUnavailableError("ideal loss needs full_ratings")
    pred = prediction_model.predict_matrix()
    return float(np.mean(error_fn(dataset.full_ratings, pred)))


def naive_loss(errors, observed):
    o = _observed(observed)
    if not o.any():
        raise UndefinedEstimateError("naive estimate needs at least one observed cell")
    return float(_masked_errors(errors, o)[o].mean())


def eib_loss(errors, observed, m_hat):
    o = _observed(observed)
    (m,) = _flat(m_hat)
    return float(np.mean(np.where(o, _masked_errors(errors, o), m)))


def ips_loss(errors, observed, p_hat):
    o = _observed(observed)
    if not o.any():
        raise UndefinedEstimateError("IPS estimate needs at least one observed cell")
    (p,) = _flat(p_hat)
    return float(np.mean(o * _masked_errors(errors, o) / p))


def snips_loss(errors, observed, p_hat):
    o = _observed(observed)
    if not o.any():
        raise UndefinedEstimateError("SNIPS is undefined on an empty mask")
    (p,) = _flat(p_hat)
    w = o / p
    return float(np.sum(w * _masked_errors(errors, o)) / np.sum(w))


def dr_loss(errors, observed, p_hat, m_hat):
    o = _observed(observed)
    p, m = _flat(p_hat, m_hat)
    return float(np.mean(m + o * (_masked_errors(errors, o) - m) / p))


# --------------------------------------------------------------------------
# Monte-Carlo bias


@dataclass
class BiasReport:
    estimator: str
    mean_estimate: float
    ideal: float
    bias: float
    stderr: float
    trials: int
    seed: int
    config_hash: str = ""
    estimates: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")

    @property
    def signed_bias(self):
        return self.mean_estimate - self.ideal

    def to_record(self):
        return {
            "estimator": self.estimator,
            "value": self.mean_estimate,
            "ideal": self.ideal,
            "bias": self.bias,
            "stderr": self.stderr,
            "trials": self.trials,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


@dataclass
class EstimatorSpec:
    """A named estimator ``fn(mask, rng) -> float`` with its ideal target."""

    name: str
    fn: Callable
    ideal: float
    config: dict = field(default_factory=dict)

    def config_hash(self):
        blob = json.dumps({"name": self.name, **self.config}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def monte_carlo_bias(spec, dataset, trials, seed, min_trials=100):
    """Resample the mask ``trials`` times from the true propensities.

    Every trial uses its own derived seed for the mask and for any internal
    randomness (such as the eta batch), and results are reduced in trial order.
    """
    if trials < min_trials:
        raise DomainError(f"need at least {min_trials} trials, got {trials}")
    if dataset.true_propensities is None:
        raise OracleUnavailableError("Monte-Carlo bias needs true propensities")
    values = np.empty(trials)
    failures = []
    for t in range(trials):
        mask = sample_observation_mask(dataset.true_propensities, derive_seed(seed, "mask", t))
        rng = make_rng(derive_seed(seed, "estimator", t))
        try:
            values[t] = spec.fn(mask.cells, rng)
        except Exception as exc:  # collected and re-raised below
            failures.append((t, exc))
    if failures:
        first = ", ".join(f"trial {t}: {exc}" for t, exc in failures[:5])
        raise MonteCarloError(f"{len(failures)} of {trials} trials failed ({first})", failures)
    if np.all(values == values[0]):
        # exact for constant estimators such as the ideal loss
        mean, stderr = float(values[0]), 0.0
    else:
        mean = float(values.mean())
        stderr = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return BiasReport(
        spec.name, mean, float(spec.ideal), abs(mean - spec.ideal), stderr, trials, int(seed),
        spec.config_hash(), values,
    )


def _split_cells(n, fraction, rng):
    perm = rng.permutation(n)
    k = max(1, int(round(fraction * n)))
    return perm[:k], perm[k:]


def mr_estimate_split(features, errors, observed, lam, eta_fraction, rng, form="direct", strict=True):
    """MR estimate with eta fitted on a random part of the grid, evaluated on the rest."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    o = _observed(observed)
    (e,) = _flat(errors)
    eta_cells, eval_cells = _split_cells(len(o), eta_fraction, rng)
    fit = eta_cells[o[eta_cells]]
    sol = solve_eta(F[fit], e[fit], lam, strict=strict)
    if form == "direct":
        return mr_loss(F[eval_cells], sol)
    return mr_loss_rewritten(F[eval_cells], sol, o[eval_cells], e[eval_cells], j=int(form))


def make_estimator(name, errors, *, p_hat=None, m_hat=None, features=None, lam=0.0,
                   eta_fraction=0.5, form="direct"):
    """Build an :class:`EstimatorSpec` over a full grid of true errors.

    ``name`` is one of ideal, naive, eib, ips, snips, dr, mr.
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    ideal = float(e.mean())
    p, m = _flat(p_hat, m_hat)
    cfg = {"lam": lam, "eta_fraction": eta_fraction, "form": form, "n": len(e)}
    fns = {
        "ideal": lambda o, rng: ideal,
        "naive": lambda o, rng: naive_loss(e, o),
        "eib": lambda o, rng: eib_loss(e, o, m),
        "ips": lambda o, rng: ips_loss(e, o, p),
        "snips": lambda o, rng: snips_loss(e, o, p),
        "dr": lambda o, rng: dr_loss(e, o, p, m),
        "mr": lambda o, rng: mr_estimate_split(features, e, o, lam, eta_fraction, rng, form),
    }
    if name not in fns:
        raise ValueError(f"unknown estimator {name!r}")
    return EstimatorSpec(name, fns[name], ideal, cfg)


# --------------------------------------------------------------------------
# Oracles for the robustness and bias statements


@dataclass
class LinearWeights:
    weights: np.ndarray
    residual_norm: float
    rank_deficient: bool = False


def best_linear_weights(target, basis):
    """Least-squares ``w`` minimising ``||target - sum_j w_j basis_j||``.

    Rank-deficient bases get the minimum-norm solution and are flagged.
    """
    if len(basis) == 0:
        raise ContractError("basis must be non-empty")
    B = np.column_stack([np.asarray(b, dtype=np.float64).reshape(-1) for b in basis])
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    w, _, rank, _ = np.linalg.lstsq(B, t, rcond=None)
    resid = float(np.linalg.norm(t - B @ w))
    return LinearWeights(w, resid, bool(rank < B.shape[1]))


def mr_bias_dominant_term(true_p, inv_props, errors, features, eta):
    """Leading bias term of MR: mean of (1 - p * best-combo 1/p_hat) (e - u^T eta)."""
    p, e = _flat(true_p, errors)
    inv = np.atleast_2d(np.asarray(inv_props, dtype=np.float64))
    if inv.shape[0] != len(p):
        inv = inv.T
    w = best_linear_weights(1.0 / p, list(inv.T)).weights
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    coef = eta.eta if isinstance(eta, EtaSolution) else np.asarray(eta)
    return float(abs(np.mean((1.0 - p * (inv @ w)) * (e - F @ coef))))


def dr_bias_term(true_p, p_hat, errors, m_hat):
    p, ph, e, m = _flat(true_p, p_hat, errors, m_hat)
    return float(abs(np.mean((1.0 - p / ph) * (e - m))))


def tail_bound(delta, dataset_size, gamma, m_cap, eta, propensities=None, imputations=None):
    """Deviation bound ``sqrt(log(2/delta) / (2|D|)) * max(gamma - 1, M) * ||eta||_1``.

    When propensities or imputations are given, the range preconditions
    ``p >= 1/gamma`` and ``|m| <= M/2`` are checked first.
    """
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if gamma < 1:
        raise DomainError("gamma must be >= 1")
    if dataset_size < 1:
        raise DomainError("dataset size must be >= 1")
    if propensities is not None:
        p = np.asarray(propensities, dtype=np.float64)
        bad = np.argwhere((p < 1.0 / gamma) | (p > 1.0))
        if len(bad):
            raise BoundInapplicableError(
                f"{len(bad)} propensities outside [1/gamma, 1]", [tuple(c) for c in bad[:20]]
            )
    if imputations is not None:
        m = np.asarray(imputations, dtype=np.float64)
        bad = np.argwhere(np.abs(m) > m_cap / 2.0)
        if len(bad):
            raise BoundInapplicableError(
                f"{len(bad)} imputed errors exceed M/2", [tuple(c) for c in bad[:20]]
            )
    coef = eta.eta if isinstance(eta, EtaSolution) else np.asarray(eta, dtype=np.float64)
    l1 = float(np.abs(coef).sum())
    return math.sqrt(math.log(2.0 / delta) / (2.0 * dataset_size)) * max(gamma - 1.0, m_cap) * l1


def generalization_bound(mr_value, delta, dataset_size, gamma, m_cap, eta, hypothesis_count):
    """Upper bound on the ideal loss of the MR-selected predictor from a finite class."""
    if hypothesis_count < 1:
        raise DomainError("hypothesis count must be >= 1")
    return mr_value + tail_bound(delta / hypothesis_count, dataset_size, gamma, m_cap, eta)

"""Alternating multiple-robust training and the baseline training losses.

One *round* updates every imputation model and then takes a number of
prediction-model steps.  For MR each step draws a cell batch ``D'`` (whose
observed part fits eta) and a disjoint loss batch from the remaining cells.

Gradient of the MR loss ``mean_n u_n^T eta`` with eta held at its ridge
solution: the loss batch contributes through the imputed-error columns of
``u`` (pseudo-ratings held fixed) and, with ``joint_differentiation``, the
eta batch contributes through the errors in the regression targets with
weights ``u_m^T (G + lam I)^-1 ubar`` (no derivative through the inverse).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import propensity as prop
from ._rng import derive_seed, make_rng
from .backbones import Adam, apply_output_gradient
from .estimators import eta_sample_weights, solve_eta
from .evaluation import auc, mse
from .errors import (
    ContractError,
    NumericError,
    SingularSystemError,
    SparseDataError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .imputation import prediction_error, update_imputation

log = logging.getLogger(__name__)

METHODS = ("naive", "eib", "ips", "snips", "dr", "dr_joint_off", "mr", "ideal")


@dataclass
class TrainConfig:
    lam: float = 1.0
    batch_size_eta: int = 1024
    batch_size_pred: int = 1024
    batch_size_imputation: int = 256
    imputation_steps_per_round: int = 1
    prediction_steps_per_round: int = 10
    max_rounds: int = 50
    early_stop_patience: int = 5
    seed: int = 0
    error_convention: str = "residual"
    joint_differentiation: bool = True
    lr: float = 1e-2
    weight_decay: float = 0.0
    validation_metric: str = "auc"
    positive_threshold: float = 4.0
    strict: bool = True
    max_batch_retries: int = 10

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ContractError("max_rounds must be >= 1")
        for name in ("batch_size_eta", "batch_size_pred", "batch_size_imputation"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.error_convention not in ("residual", "squared"):
            raise ContractError(f"unknown error convention {self.error_convention!r}")
        if self.validation_metric not in ("auc", "mse"):
            raise ContractError("validation_metric must be 'auc' or 'mse'")


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    imputation_losses: list
    eta_l1: float
    condition: float
    singular_errors: int
    batch_overlap: int
    validation: float | None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainingTrace:
    method: str
    records: list = field(default_factory=list)
    best_round: int = -1
    best_validation: float | None = None
    stopped_early: bool = False

    @property
    def singular_errors(self):
        return sum(r.singular_errors for r in self.records)

    def to_jsonl(self):
        return "\n".join(r.to_json() for r in self.records) + "\n"

    def digest(self):
        blob = self.to_jsonl() + json.dumps(
            [self.method, self.best_round, self.best_validation, self.stopped_early]
        )
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class DisjointBatches:
    eta_cells: np.ndarray  # all of D'
    eta_users: np.ndarray  # observed part O'
    eta_items: np.ndarray
    loss_users: np.ndarray
    loss_items: np.ndarray

    def overlap(self, num_items):
        loss = self.loss_users * num_items + self.loss_items
        return int(np.intersect1d(self.eta_cells, loss).size)


def sample_disjoint_batches(dataset, config, round_seed, mask=None):
    """Draw ``D'`` uniformly from the grid and a loss batch from the rest.

    ``D'`` is redrawn (up to ``max_batch_retries`` times) while it contains
    no observed cell.
    """
    mask = dataset.observed_mask if mask is None else np.asarray(mask, dtype=bool)
    n = dataset.num_cells
    n_eta = min(config.batch_size_eta, n - 1)
    n_loss = min(config.batch_size_pred, n - n_eta)
    flat = mask.reshape(-1)
    rng = make_rng(round_seed)
    for _ in range(config.max_batch_retries):
        cells = rng.choice(n, size=n_eta + n_loss, replace=False)
        eta_cells, loss_cells = cells[:n_eta], cells[n_eta:]
        obs = eta_cells[flat[eta_cells]]
        if obs.size:
            eu, ei = np.divmod(obs, dataset.num_items)
            lu, li = np.divmod(loss_cells, dataset.num_items)
            return DisjointBatches(np.sort(eta_cells), eu, ei, lu, li)
    raise SparseDataError(
        f"no observed cell in {config.max_batch_retries} draws of {n_eta} cells; "
        "increase batch_size_eta"
    )


def _sample_observed(dataset, size, rng):
    n = dataset.num_observed
    idx = rng.choice(n, size=min(size, n), replace=False)
    return dataset.users[idx], dataset.items[idx]


def _validation_score(model, validation, config):
    """Higher is better: AUC, or negative MSE."""
    if validation is None or validation.num_observed == 0:
        return None
    pred = np.clip(model.predict_batch(validation.users, validation.items), *validation.rating_scale)
    if config.validation_metric == "auc":
        try:
            return auc(pred, validation.ratings >= config.positive_threshold)
        except UndefinedMetricError:
            pass
    return -mse(pred, validation.ratings)


def _error_slope(y, f):
    """d/df of the squared error (y - f)**2."""
    return -2.0 * (y - f)


# --------------------------------------------------------------------------
# Per-step losses.  Each returns (loss, users, items, dout).


def _mr_step(ensemble, dataset, config, batches, opt_lam):
    pred = ensemble.prediction
    F_eta = ensemble.features(dataset, batches.eta_users, batches.eta_items)
    F_loss = ensemble.features(dataset, batches.loss_users, batches.loss_items)
    y = dataset.lookup(batches.eta_users, batches.eta_items)
    f_eta = pred.predict_batch(batches.eta_users, batches.eta_items)
    e = prediction_error(y, f_eta, "squared")
    sol = solve_eta(F_eta, e, opt_lam, strict=config.strict)
    loss = float(np.mean(F_loss @ sol.eta))

    J = ensemble.J
    slopes = np.column_stack(
        [m.imputed_error_slope(batches.loss_users, batches.loss_items) for m in ensemble.imputation_models]
    )
    dout_loss = slopes @ sol.eta[J:] / len(batches.loss_users)
    users, items, douts = [batches.loss_users], [batches.loss_items], [dout_loss]
    if config.joint_differentiation:
        w = eta_sample_weights(F_eta, F_loss.mean(axis=0), sol.lam)
        users.append(batches.eta_users)
        items.append(batches.eta_items)
        douts.append(w * _error_slope(y, f_eta))
    return loss, sol, np.concatenate(users), np.concatenate(items), np.concatenate(douts)


def _baseline_step(method, prediction, dataset, config, rng, propensity_model, imputation_model):
    if method in ("naive", "ips", "snips"):
        size = max(1, int(round(config.batch_size_pred * dataset.density)))
        u, i = _sample_observed(dataset, size, rng)
        y = dataset.lookup(u, i)
        if method == "naive":
            w = np.ones(len(u))
        else:
            w = 1.0 / prop.estimate_cells(propensity_model, dataset, u, i)
            if method == "snips":
                w = w * len(w) / w.sum()
        f = prediction.predict_batch(u, i)
        loss = float(np.mean(w * (y - f) ** 2))
        return loss, u, i, w * _error_slope(y, f) / len(u)

    cells = rng.choice(dataset.num_cells, size=min(config.batch_size_pred, dataset.num_cells), replace=False)
    u, i = np.divmod(cells, dataset.num_items)
    o = dataset.is_observed(u, i)
    f = prediction.predict_batch(u, i)
    if method == "ideal":
        y = dataset.full_ratings[u, i]
        return float(np.mean((y - f) ** 2)), u, i, _error_slope(y, f) / len(u)
    y = np.where(o, dataset.lookup(u, i), 0.0)
    e = np.where(o, (y - f) ** 2, 0.0)
    de = np.where(o, _error_slope(y, f), 0.0)
    m = imputation_model.imputed_errors(u, i)
    dm = imputation_model.imputed_error_slope(u, i)
    if method == "eib":
        loss_terms = np.where(o, e, m)
        dout = np.where(o, de, dm)
    else:  # dr, dr_joint_off
        p_hat = prop.estimate_cells(propensity_model, dataset, u, i)
        ratio = o / p_hat
        loss_terms = m + ratio * (e - m)
        dout = (1.0 - ratio) * dm + ratio * de
    return float(np.mean(loss_terms)), u, i, dout / len(u)


# --------------------------------------------------------------------------
# Training loops


def _imputation_round(imputation_models, propensity_models, prediction, dataset, config, rng):
    losses = []
    for model in imputation_models:
        if getattr(model, "frozen", False):
            losses.append(0.0)
            continue
        step_losses = []
        for _ in range(config.imputation_steps_per_round):
            u, i = _sample_observed(dataset, config.batch_size_imputation, rng)
            j = int(rng.integers(len(propensity_models)))
            step_losses.append(update_imputation(model, dataset, u, i, prediction, propensity_models[j]))
        losses.append(float(np.mean(step_losses)))
    return losses


def _run(method, config, dataset, prediction, step, imputation_update, validation, optimizer):
    opt = optimizer or Adam(lr=config.lr, weight_decay=config.weight_decay)
    trace = TrainingTrace(method)
    best_score = -math.inf
    best_params = prediction.copy().params
    stale = 0
    for r in range(config.max_rounds):
        rng = make_rng(derive_seed(config.seed, method, "round", r))
        imp_losses = imputation_update(rng)
        losses, l1s, conds = [], [], []
        singular = overlap = 0
        for s in range(config.prediction_steps_per_round):
            try:
                out = step(rng, derive_seed(config.seed, method, "batch", r, s))
            except SingularSystemError as exc:
                singular += 1
                log.debug("round %d step %d skipped: %s", r, s, exc)
                continue
            loss, users, items, dout, info = out
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite {method} loss in round {r}", checkpoint=best_params, round_index=r
                )
            try:
                apply_output_gradient(prediction, users, items, dout, opt)
            except NumericError as exc:
                raise TrainingDivergedError(str(exc), checkpoint=best_params, round_index=r) from exc
            losses.append(loss)
            if info is not None:
                sol, ov = info
                l1s.append(sol.l1_norm)
                conds.append(sol.gram_condition_estimate)
                overlap += ov
        if overlap:
            raise AssertionError(f"eta and loss batches overlap in round {r}")
        score = _validation_score(prediction, validation, config)
        trace.records.append(
            RoundRecord(
                round=r,
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                imputation_losses=imp_losses,
                eta_l1=float(np.mean(l1s)) if l1s else 0.0,
                condition=float(np.max(conds)) if conds else 0.0,
                singular_errors=singular,
                batch_overlap=overlap,
                validation=score,
            )
        )
        if score is None:
            continue
        if score > best_score:
            best_score, stale = score, 0
            best_params = prediction.copy().params
            trace.best_round, trace.best_validation = r, score
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                trace.stopped_early = True
                break
    if trace.best_round >= 0:
        prediction.load_params(best_params)
    return trace


def train(config, dataset, ensemble, validation=None, optimizer=None):
    """Alternating multiple-robust learning with a ridge-stabilised eta.

    Propensity models are used as fitted; imputation models and the
    prediction model alternate.  Returns ``(ensemble, trace)`` with the
    prediction model restored to its best validation checkpoint.
    """
    for m in ensemble.imputation_models:
        if getattr(m, "convention", config.error_convention) != config.error_convention and not getattr(m, "frozen", False):
            raise ContractError("imputation model convention differs from the training config")

    def imputation_update(rng):
        return _imputation_round(
            ensemble.imputation_models, ensemble.propensity_models, ensemble.prediction, dataset, config, rng
        )

    def step(rng, batch_seed):
        batches = sample_disjoint_batches(dataset, config, batch_seed)
        loss, sol, u, i, dout = _mr_step(ensemble, dataset, config, batches, config.lam)
        return loss, u, i, dout, (sol, batches.overlap(dataset.num_items))

    trace = _run("mr", config, dataset, ensemble.prediction, step, imputation_update, validation, optimizer)
    return ensemble, trace


def train_baseline(method, config, dataset, prediction, propensity_model=None,
                   imputation_model=None, validation=None, optimizer=None,
                   pretrain_rounds=None):
    """Train ``prediction`` with one of the single-model estimators as loss.

    ``dr`` alternates imputation updates with prediction steps (joint
    learning); ``dr_joint_off`` fits the imputation model once against the
    initial predictor and then freezes it.
    """
    if method not in METHODS or method == "mr":
        raise ValueError(f"unknown baseline {method!r}")
    if method in ("ips", "snips", "dr", "dr_joint_off") and propensity_model is None:
        raise ContractError(f"{method} needs a propensity model")
    if method in ("eib", "dr", "dr_joint_off") and imputation_model is None:
        raise ContractError(f"{method} needs an imputation model")
    if method == "ideal" and dataset.full_ratings is None:
        raise ContractError("ideal training needs full_ratings")

    props = [propensity_model or prop.constant_model(1.0)]
    if method == "dr_joint_off":
        rng = make_rng(derive_seed(config.seed, method, "pretrain"))
        for _ in range(pretrain_rounds or config.max_rounds * config.prediction_steps_per_round):
            _imputation_round([imputation_model], props, prediction, dataset, config, rng)

    def imputation_update(rng):
        if method in ("eib", "dr"):
            return _imputation_round([imputation_model], props, prediction, dataset, config, rng)
        return []

    def step(rng, batch_seed):
        step_rng = make_rng(batch_seed)
        loss, u, i, dout = _baseline_step(
            method, prediction, dataset, config, step_rng, propensity_model, imputation_model
        )
        return loss, u, i, dout, None

    return _run(method, config, dataset, prediction, step, imputation_update, validation, optimizer)


def mr_objective(ensemble, dataset, config, batches):
    """MR loss value at the current parameters (used for gradient checks)."""
    return _mr_step(ensemble, dataset, config, batches, config.lam)[0]


def mr_output_gradient(ensemble, dataset, config, batches):
    """``(users, items, dLoss/dprediction)`` used by one MR step."""
    _, _, u, i, dout = _mr_step(ensemble, dataset, config, batches, config.lam)
    return u, i, dout

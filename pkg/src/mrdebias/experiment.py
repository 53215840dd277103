"""Experiment configuration, the per-seed pipeline, sweeps and report tables."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from . import propensity as prop
from .backbones import make_backbone
from .ensemble import ModelEnsemble
from .errors import ConfigError, MrDebiasError, StageError
from .estimators import make_estimator, monte_carlo_bias, squared_error
from .evaluation import evaluate
from .imputation import make_imputation_model
from .learning import METHODS, TrainConfig, train, train_baseline

TABLE_METRICS = ("mse", "auc", "ndcg@5", "ndcg@10")

DEFAULTS = {
    "method": "mr",
    "dataset": {
        "kind": "synthetic",
        "path": None,
        "format": "coat_ascii",
        "base": {"num_users": 300, "num_items": 300, "density": 0.06, "seed": 1},
        "level": 2,
        "density": 0.03,
        "sharpness": None,
        "seed": 7,
        "mar_items_per_user": 150,
        "mar_seed": 3,
        "validation": "mar",
        "validation_fraction": 0.2,
        "split_seed": 4,
    },
    "ensemble": {
        "propensities": ["naive_bayes", "user_frequency"],
        "imputations": [{"kind": "mf", "dim": 8}, {"kind": "mf", "dim": 8}],
        "clip_floor": 0.05,
    },
    "backbone": {"kind": "mf", "dim": 8},
    "train": {
        "lam": 1.0,
        "lr": 0.05,
        "max_rounds": 40,
        "prediction_steps_per_round": 20,
        "early_stop_patience": 10,
        "error_convention": "squared",
    },
    "metrics": list(TABLE_METRICS),
    "seeds": [0, 1, 2, 3, 4],
    "bias_trials": 0,
    "output": "runs",
    "grid": {},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "grid":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(tree, key, value):
    """Assign ``value`` at a dotted path such as ``train.lam``."""
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def parse_override(text):
    """``key=value`` with the value parsed as YAML (so ``0.1`` is a float)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key}: {exc}") from exc
    return key.strip(), value


@dataclass
class ExperimentConfig:
    """A fully resolved experiment description (nested plain data)."""

    tree: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw=None, overrides=()):
        tree = _merge(DEFAULTS, raw or {})
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            set_dotted(tree, key, value)
        return cls(tree)

    @classmethod
    def load(cls, path=None, overrides=()):
        raw = {}
        if path is not None:
            try:
                raw = yaml.safe_load(Path(path).read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw, overrides)

    # convenience views
    @property
    def methods(self):
        m = self.tree["method"]
        return list(m) if isinstance(m, list) else [m]

    @property
    def levels(self):
        lv = self.tree["dataset"]["level"]
        return list(lv) if isinstance(lv, list) else [lv]

    @property
    def seeds(self):
        return [int(s) for s in self.tree["seeds"]]

    @property
    def metrics(self):
        return list(self.tree["metrics"])

    @property
    def ks(self):
        ks = sorted({int(m[5:]) for m in self.metrics if m.startswith("ndcg@")})
        return tuple(ks)

    def single(self, method, level):
        """Copy pinned to one method and one bias level."""
        tree = copy.deepcopy(self.tree)
        tree["method"] = method
        tree["dataset"]["level"] = level
        return ExperimentConfig(tree)

    def train_config(self, seed):
        try:
            return TrainConfig(seed=int(seed), **self.tree["train"])
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        except MrDebiasError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self):
        return copy.deepcopy(self.tree)

    def hash(self):
        blob = json.dumps(self.tree, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self):
        t = self.tree
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        ens = t["ensemble"]
        if "mr" in self.methods and (not ens["propensities"] or not ens["imputations"]):
            raise ConfigError("method mr needs at least one propensity and one imputation model")
        for kind in ens["propensities"]:
            if kind not in prop.KINDS:
                raise ConfigError(f"unknown propensity kind {kind!r}")
        for metric in self.metrics:
            if metric not in ("mse", "auc") and not (metric.startswith("ndcg@") and metric[5:].isdigit()):
                raise ConfigError(f"unknown metric {metric!r}")
        ds = t["dataset"]
        if ds["kind"] not in ("synthetic", "files"):
            raise ConfigError(f"dataset.kind must be synthetic or files, got {ds['kind']!r}")
        if ds["kind"] == "files" and not ds.get("path"):
            raise ConfigError("dataset.path is required for kind=files")
        if ds["validation"] not in ("mar", "mnar"):
            raise ConfigError("dataset.validation must be mar or mnar")
        if not isinstance(t.get("grid", {}), dict):
            raise ConfigError("grid must map dotted keys to candidate lists")
        for key, cands in t.get("grid", {}).items():
            if not isinstance(cands, list) or not cands:
                raise ConfigError(f"grid entry {key} must be a non-empty list")
        self.train_config(0)


# --------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedData:
    train: data_mod.RatingDataset
    validation: data_mod.RatingDataset
    test: data_mod.RatingDataset
    mar_sample: data_mod.RatingDataset | None


def prepare_data(config):
    """Build ``(train, validation, test, MAR sample)`` for a single-level config."""
    ds = config.tree["dataset"]
    if ds["kind"] == "files":
        train_set, mar = data_mod.load_dataset_dir(ds["path"], ds["format"])
    else:
        b = ds["base"]
        if b.get("path"):
            base = data_mod.load_ratings(b["path"], b.get("format", "triplet_tsv"))
        else:
            base = data_mod.make_low_rank_ratings(
                int(b["num_users"]), int(b["num_items"]), float(b["density"]), int(b["seed"])
            )
        spec = data_mod.BiasLevelSpec.for_level(ds["level"], ds["density"], ds.get("sharpness"))
        train_set = data_mod.generate_semi_synthetic(base, spec, int(ds["seed"]))
        mar = data_mod.sample_mar_ratings(train_set, int(ds["mar_items_per_user"]), int(ds["mar_seed"]))
    frac, split_seed = float(ds["validation_fraction"]), int(ds["split_seed"])
    test, mar_val = data_mod.split_train_validation(mar, frac, split_seed)
    if ds["validation"] == "mar":
        return PreparedData(train_set, mar_val, test, mar_val)
    train_set, val = data_mod.split_train_validation(train_set, frac, split_seed)
    return PreparedData(train_set, val, test, mar_val)


# --------------------------------------------------------------------------
# Reports


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    best_round: int
    best_validation: float | None
    stopped_early: bool
    singular_errors: int
    trace_digest: str

    def to_record(self):
        return {
            "seed": self.seed,
            "metrics": self.metrics,
            "best_round": self.best_round,
            "best_validation": self.best_validation,
            "stopped_early": self.stopped_early,
            "singular_errors": self.singular_errors,
            "trace_digest": self.trace_digest,
        }


@dataclass
class ExperimentReport:
    method: str
    level: int | None
    config: dict
    config_hash: str
    per_seed: list
    bias_reports: list = field(default_factory=list)

    @property
    def seeds(self):
        return [r.seed for r in self.per_seed]

    def aggregate(self):
        """``{metric: (mean, sd)}`` over exactly the listed seeds."""
        out = {}
        for name in self.config["metrics"]:
            vals = np.array([r.metrics[name] for r in self.per_seed], dtype=np.float64)
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out[name] = (float(vals.mean()), sd)
        return out

    def mean_validation(self):
        vals = [r.best_validation for r in self.per_seed if r.best_validation is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_record(self):
        return {
            "method": self.method,
            "level": self.level,
            "config_hash": self.config_hash,
            "config": self.config,
            "aggregate": {k: {"mean": m, "sd": s} for k, (m, s) in self.aggregate().items()},
            "per_seed": [r.to_record() for r in self.per_seed],
            "bias": [b.to_record() for b in self.bias_reports],
        }

    def digest(self):
        blob = json.dumps(self.to_record(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (MrDebiasError, ValueError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def _build_imputations(config, data, seed):
    ens = config.tree["ensemble"]
    conv = config.tree["train"].get("error_convention", "residual")
    lr = config.tree["train"].get("lr", 1e-2)
    models = []
    for k, spec in enumerate(ens["imputations"]):
        spec = dict(spec)
        kind = spec.pop("kind", "mf")
        offset = int(spec.pop("seed", 10 + k))
        models.append(
            make_imputation_model(
                data.train.num_users, data.train.num_items, kind=kind, seed=seed + offset,
                lr=lr, convention=conv, **spec,
            )
        )
    return models


def _fit_propensities(config, data):
    ens = config.tree["ensemble"]
    return [
        prop.fit_propensity(kind, data.train, data.mar_sample, clip_floor=float(ens["clip_floor"]))
        for kind in ens["propensities"]
    ]


def _bias_reports(config, data, prediction, propensities, imputations, seed):
    """Monte-Carlo estimator bias for the trained predictor (synthetic data only)."""
    trials = int(config.tree.get("bias_trials", 0))
    ds = data.train
    if trials <= 0 or ds.true_propensities is None:
        return []
    errors = (ds.full_ratings - prediction.predict_matrix()) ** 2
    uu, ii = np.divmod(np.arange(ds.num_cells), ds.num_items)
    p_hat = prop.estimate_cells(propensities[0], ds, uu, ii)
    m_hat = imputations[0].imputed_errors(uu, ii)
    features = ModelEnsemble(propensities, imputations, prediction).features(ds, uu, ii)
    lam = float(config.tree["train"].get("lam", 0.0))
    reports = []
    for name in ("naive", "ips", "dr", "mr"):
        spec = make_estimator(name, errors, p_hat=p_hat, m_hat=m_hat, features=features, lam=lam)
        reports.append(monte_carlo_bias(spec, ds, trials, seed, min_trials=1))
    return reports


def run_seed(config, data, seed):
    """Train and evaluate one method for one seed; returns ``(SeedResult, prediction, extras)``."""
    method = config.methods[0]
    cfg = config.train_config(seed)
    bb = dict(config.tree["backbone"])
    kind = bb.pop("kind", "mf")
    prediction = make_backbone(kind, data.train.num_users, data.train.num_items, seed=seed, **bb)
    propensities = _stage("propensity", _fit_propensities, config, data)
    imputations = _build_imputations(config, data, seed)
    if method == "mr":
        ensemble = ModelEnsemble(propensities, imputations, prediction)
        _, trace = _stage("learning", train, cfg, data.train, ensemble, data.validation)
    else:
        trace = _stage(
            "learning", train_baseline, method, cfg, data.train, prediction,
            propensity_model=propensities[0] if propensities else None,
            imputation_model=imputations[0] if imputations else None,
            validation=data.validation,
        )
    result = _stage("eval", evaluate, prediction, data.test, ks=config.ks or (5,),
                    threshold=cfg.positive_threshold)
    metrics = {m: float(result.metric(m)) for m in config.metrics}
    seed_result = SeedResult(
        int(seed), metrics, trace.best_round, trace.best_validation, trace.stopped_early,
        trace.singular_errors, trace.digest(),
    )
    return seed_result, prediction, (propensities, imputations)


def run_experiment(config, data=None):
    """Run a single-method, single-level config over all of its seeds."""
    if len(config.methods) != 1 or len(config.levels) != 1:
        raise ConfigError("run_experiment needs exactly one method and one level; use run_table")
    if data is None:
        data = _stage("data", prepare_data, config)
    per_seed, bias = [], []
    for seed in config.seeds:
        res, prediction, (props, imps) = run_seed(config, data, seed)
        per_seed.append(res)
        if seed == config.seeds[0]:
            bias = _stage("estimators", _bias_reports, config, data, prediction, props, imps, seed)
    is_synthetic = config.tree["dataset"]["kind"] == "synthetic"
    return ExperimentReport(
        config.methods[0],
        int(config.levels[0]) if is_synthetic else None,
        config.resolved(),
        config.hash(),
        per_seed,
        bias,
    )


def run_table(config):
    """Every (method, level) combination of ``config``; data is shared per level."""
    reports = []
    for level in config.levels:
        data = None
        for method in config.methods:
            single = config.single(method, level)
            if data is None:
                data = _stage("data", prepare_data, single)
            reports.append(run_experiment(single, data))
    return reports


def expand_grid(config):
    """Cross product of the ``grid`` section as a list of ``(assignment, config)``."""
    grid = config.tree.get("grid") or {}
    keys = sorted(grid)
    points = []
    for values in itertools.product(*(grid[k] for k in keys)):
        tree = copy.deepcopy(config.tree)
        tree["grid"] = {}
        for k, v in zip(keys, values):
            set_dotted(tree, k, v)
        points.append((dict(zip(keys, values)), ExperimentConfig(tree)))
    return points


@dataclass
class SweepResult:
    points: list  # (assignment, ExperimentReport)
    best_index: int
    metric: str

    @property
    def best(self):
        return self.points[self.best_index]


def run_sweep(config):
    """Grid search; the point with the best mean validation score wins.

    Validation scores are AUC (higher is better) or MSE, which the training
    loop already negates so that higher is always better.
    """
    points = []
    for assignment, point in expand_grid(config):
        reports = run_table(point)
        if len(reports) != 1:
            raise ConfigError("sweep points must pin one method and one level")
        points.append((assignment, reports[0]))
    scores = [r.mean_validation() for _, r in points]
    best = int(np.nanargmax(scores)) if not np.all(np.isnan(scores)) else 0
    return SweepResult(points, best, config.tree["train"].get("validation_metric", "auc"))


# --------------------------------------------------------------------------
# Emission


def relative_drop(first, last):
    return (first - last) / first


def report_table(reports, metrics):
    """Rows per method; with several levels, per-level columns plus relative drops."""
    levels = sorted({r.level for r in reports if r.level is not None})
    methods = list(dict.fromkeys(r.method for r in reports))
    by_key = {(r.method, r.level): r for r in reports}
    sweep = len(levels) > 1
    header = ["method"]
    if sweep:
        for m in metrics:
            header += [f"{m}@L{lv}" for lv in levels] + [f"{m}_drop"]
    else:
        header += list(metrics)
    rows = []
    if not metrics:
        return header, rows
    for method in methods:
        row = [method]
        if sweep:
            for m in metrics:
                vals = [by_key[(method, lv)].aggregate()[m][0] for lv in levels]
                row += vals + [relative_drop(vals[0], vals[-1])]
        else:
            rep = next(r for r in reports if r.method == method)
            agg = rep.aggregate()
            row += [agg[m][0] for m in metrics]
        rows.append(row)
    return header, rows


def emit_report(reports, fmt, out_dir):
    """Write ``report.jsonl`` or ``table.csv`` under ``out_dir``; returns the path."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt in ("json", "json_lines"):
            path = out / "report.jsonl"
            with path.open("w") as fh:
                for r in reports:
                    rec = r.to_record()
                    rec["report_digest"] = r.digest()
                    fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
            return path
        if fmt in ("csv", "csv_table"):
            metrics = reports[0].config["metrics"] if reports else []
            header, rows = report_table(reports, metrics)
            path = out / "table.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for row in rows:
                    w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
            return path
    except OSError as exc:
        raise StageError("emit", exc) from exc
    raise ConfigError(f"unknown report format {fmt!r}")


def bias_oracle(config, estimator, trials, seed=0):
    """Monte-Carlo bias of one estimator for a briefly naive-trained predictor."""
    data = _stage("data", prepare_data, config.single("naive", config.levels[0]))
    if data.train.true_propensities is None:
        raise ConfigError("bias-oracle needs a synthetic dataset")
    tree = copy.deepcopy(config.tree)
    tree["train"]["max_rounds"] = min(int(tree["train"].get("max_rounds", 5)), 5)
    tree["bias_trials"] = 0
    short = ExperimentConfig(tree).single("naive", config.levels[0])
    _, prediction, (props, imps) = run_seed(short, data, seed)
    ds = data.train
    errors = squared_error(ds.full_ratings, prediction.predict_matrix())
    uu, ii = np.divmod(np.arange(ds.num_cells), ds.num_items)
    spec = make_estimator(
        estimator, errors,
        p_hat=prop.estimate_cells(props[0], ds, uu, ii),
        m_hat=imps[0].imputed_errors(uu, ii),
        features=ModelEnsemble(props, imps, prediction).features(ds, uu, ii),
        lam=float(tree["train"].get("lam", 0.0)),
    )
    return _stage("estimators", monte_carlo_bias, spec, ds, trials, seed)

"""Rating datasets: loading, splitting, semi-synthetic generation, masks.

Observed ratings are stored as three parallel arrays (users, items, ratings)
rather than a list of tuples; dense helpers are derived lazily.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import optimize

from ._rng import make_rng
from .errors import (
    BoundsError,
    DegenerateGenerationError,
    DomainError,
    DuplicateCellError,
    InvalidSplitError,
    ParseError,
)

FORMATS = ("coat_ascii", "triplet_tsv")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse explicit ratings over a ``num_users x num_items`` grid.

    ``full_ratings`` and ``true_propensities`` are only present for
    synthetic data, where the complete matrix and exposure model are known.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    rating_scale: tuple[float, float]
    full_ratings: np.ndarray | None = None
    true_propensities: np.ndarray | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        users = _frozen(self.users, np.int64).reshape(-1)
        items = _frozen(self.items, np.int64).reshape(-1)
        ratings = _frozen(self.ratings, np.float64).reshape(-1)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        lo, hi = (float(v) for v in self.rating_scale)
        object.__setattr__(self, "rating_scale", (lo, hi))

        if not (len(users) == len(items) == len(ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("dataset needs at least one user and one item")
        if lo > hi:
            raise ValueError(f"invalid rating scale {self.rating_scale}")
        if len(users):
            bad = (users < 0) | (users >= self.num_users) | (items < 0) | (items >= self.num_items)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise BoundsError(
                    f"cell ({users[k]}, {items[k]}) outside "
                    f"{self.num_users}x{self.num_items} grid"
                )
            cells = users * self.num_items + items
            uniq, counts = np.unique(cells, return_counts=True)
            if (counts > 1).any():
                c = int(uniq[counts > 1][0])
                raise DuplicateCellError(
                    f"cell ({c // self.num_items}, {c % self.num_items}) observed more than once"
                )
            if not np.all(np.isfinite(ratings)):
                raise ValueError("ratings must be finite")
            if ratings.min() < lo or ratings.max() > hi:
                raise DomainError(f"ratings outside declared scale {self.rating_scale}")

        shape = (self.num_users, self.num_items)
        if self.full_ratings is not None:
            full = _frozen(self.full_ratings, np.float64)
            if full.shape != shape:
                raise ValueError(f"full_ratings shape {full.shape} != {shape}")
            if len(users) and not np.array_equal(full[users, items], ratings):
                raise ValueError("observed ratings disagree with full_ratings")
            object.__setattr__(self, "full_ratings", full)
        if self.true_propensities is not None:
            props = _frozen(self.true_propensities, np.float64)
            if props.shape != shape:
                raise ValueError(f"true_propensities shape {props.shape} != {shape}")
            if not np.all((props > 0) & (props <= 1)):
                raise DomainError("true propensities must lie in (0, 1]")
            object.__setattr__(self, "true_propensities", props)

    @property
    def shape(self):
        return (self.num_users, self.num_items)

    @property
    def num_cells(self):
        return self.num_users * self.num_items

    @property
    def num_observed(self):
        return len(self.ratings)

    @property
    def density(self):
        return self.num_observed / self.num_cells

    @cached_property
    def cells(self):
        """Flat cell ids ``u * num_items + i`` of the observed entries."""
        c = self.users * self.num_items + self.items
        c.setflags(write=False)
        return c

    @cached_property
    def observed_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m[self.users, self.items] = True
        m.setflags(write=False)
        return m

    @cached_property
    def rating_matrix(self):
        """Dense ratings with NaN on unobserved cells."""
        r = np.full(self.shape, np.nan)
        r[self.users, self.items] = self.ratings
        r.setflags(write=False)
        return r

    @cached_property
    def rating_levels(self):
        """Distinct rating values on an integer scale, else those observed."""
        lo, hi = self.rating_scale
        if float(lo).is_integer() and float(hi).is_integer() and np.all(
            self.ratings == np.round(self.ratings)
        ):
            return np.arange(lo, hi + 1.0)
        return np.unique(self.ratings)

    def is_observed(self, users, items):
        return self.observed_mask[np.asarray(users), np.asarray(items)]

    def lookup(self, users, items):
        """Observed ratings at the given cells (NaN where unobserved)."""
        return self.rating_matrix[np.asarray(users), np.asarray(items)]

    def subset(self, index):
        """Dataset restricted to the observed entries selected by ``index``."""
        index = np.asarray(index)
        return RatingDataset(
            self.num_users,
            self.num_items,
            self.users[index],
            self.items[index],
            self.ratings[index],
            self.rating_scale,
            self.full_ratings,
            self.true_propensities,
            name=self.name,
        )

    def with_mask(self, mask):
        """Replace the observed set by ``mask`` (requires ``full_ratings``)."""
        if self.full_ratings is None:
            raise ValueError("with_mask requires full_ratings")
        cells = mask.cells if isinstance(mask, ObservationMask) else np.asarray(mask, dtype=bool)
        u, i = np.nonzero(cells)
        return RatingDataset(
            self.num_users,
            self.num_items,
            u,
            i,
            self.full_ratings[u, i],
            self.rating_scale,
            self.full_ratings,
            self.true_propensities,
            name=self.name,
        )

    def equals(self, other):
        """Exact equality of grid, observed set (order-free) and oracles."""
        if self.shape != other.shape or self.rating_scale != other.rating_scale:
            return False
        a, b = np.argsort(self.cells), np.argsort(other.cells)
        if not (
            np.array_equal(self.cells[a], other.cells[b])
            and np.array_equal(self.ratings[a], other.ratings[b])
        ):
            return False
        for x, y in (
            (self.full_ratings, other.full_ratings),
            (self.true_propensities, other.true_propensities),
        ):
            if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                return False
        return True


@dataclass(frozen=True, eq=False)
class ObservationMask:
    cells: np.ndarray
    seed: int

    @property
    def cardinality(self):
        return int(self.cells.sum())


@dataclass(frozen=True)
class BiasLevelSpec:
    """Exposure-bias knob for semi-synthetic generation.

    Propensities are ``c * sigmoid(exposure_sharpness * (y - mean(y)))``
    with ``c`` solved so that the mean propensity equals
    ``base_exposure_rate`` (the target observation density).
    """

    level: int
    exposure_sharpness: float
    base_exposure_rate: float

    SHARPNESS = {1: 1.0, 2: 3.0, 3: 6.0}

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise DomainError(f"bias level must be 1, 2 or 3, got {self.level}")
        if self.exposure_sharpness < 0:
            raise DomainError("exposure_sharpness must be >= 0")
        if not 0 < self.base_exposure_rate < 1:
            raise DomainError("base_exposure_rate must lie in (0, 1)")

    @classmethod
    def for_level(cls, level, density, sharpness=None):
        sharp = dict(cls.SHARPNESS, **(sharpness or {}))
        return cls(int(level), float(sharp[int(level)]), float(density))


# --------------------------------------------------------------------------
# Loading and saving


def load_ratings(path, format="coat_ascii", rating_scale=None, num_users=None, num_items=None):
    """Read a rating file.

    ``coat_ascii`` is a whitespace-separated integer matrix with 0 marking
    unobserved cells. ``triplet_tsv`` has ``user<TAB>item<TAB>rating`` lines
    with 0-based indices.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    text = path.read_text()
    name = path.stem
    if format == "coat_ascii":
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise ParseError(f"non-integer entry ({exc})", line=lineno) from None
            if len(rows) > 1 and len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"expected {len(rows[0])} columns, found {len(rows[-1])}", line=lineno
                )
        if not rows:
            raise ParseError("empty matrix file")
        mat = np.array(rows, dtype=np.float64)
        nu, ni = mat.shape
        if num_users is not None and nu > num_users or num_items is not None and ni > num_items:
            raise BoundsError(f"matrix {nu}x{ni} exceeds declared bounds")
        u, i = np.nonzero(mat)
        r = mat[u, i]
        nu = num_users or nu
        ni = num_items or ni
    else:
        us, its, rs = [], [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            try:
                us.append(int(parts[0]))
                its.append(int(parts[1]))
                rs.append(float(parts[2]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if us[-1] < 0 or its[-1] < 0:
                raise BoundsError(f"line {lineno}: negative index")
            if (num_users is not None and us[-1] >= num_users) or (
                num_items is not None and its[-1] >= num_items
            ):
                raise BoundsError(f"line {lineno}: index out of declared bounds")
        u = np.array(us, dtype=np.int64)
        i = np.array(its, dtype=np.int64)
        r = np.array(rs, dtype=np.float64)
        nu = num_users or (int(u.max()) + 1 if len(u) else 1)
        ni = num_items or (int(i.max()) + 1 if len(i) else 1)
        order = np.lexsort((i, u))
        u, i, r = u[order], i[order], r[order]
    if rating_scale is None:
        rating_scale = (float(r.min()), float(r.max())) if len(r) else (0.0, 1.0)
    return RatingDataset(nu, ni, u, i, r, rating_scale, name=name)


def _fmt(x):
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def save_ratings(dataset, path, format="triplet_tsv"):
    path = Path(path)
    if format == "coat_ascii":
        if not np.all(dataset.ratings == np.round(dataset.ratings)) or np.any(dataset.ratings == 0):
            raise ValueError("coat_ascii needs nonzero integer ratings")
        mat = np.zeros(dataset.shape, dtype=np.int64)
        mat[dataset.users, dataset.items] = dataset.ratings.astype(np.int64)
        lines = [" ".join(str(v) for v in row) for row in mat]
    elif format == "triplet_tsv":
        order = np.lexsort((dataset.items, dataset.users))
        lines = [
            f"{u}\t{i}\t{_fmt(r)}"
            for u, i, r in zip(dataset.users[order], dataset.items[order], dataset.ratings[order])
        ]
    else:
        raise ValueError(f"unknown format {format!r}")
    path.write_text("\n".join(lines) + "\n")


def _write_matrix(path, mat):
    with open(path, "w") as fh:
        for row in mat:
            fh.write("\t".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_matrix(path):
    rows = [
        [float(tok) for tok in line.split("\t")]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.float64)


def save_synthetic(dataset, directory):
    """Write a synthetic dataset as a directory of TSV files plus a manifest."""
    if dataset.full_ratings is None or dataset.true_propensities is None:
        raise ValueError("save_synthetic needs full_ratings and true_propensities")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_matrix(d / "full_ratings.tsv", dataset.full_ratings)
    _write_matrix(d / "propensities.tsv", dataset.true_propensities)
    save_ratings(dataset, d / "observed.tsv", "triplet_tsv")
    meta = {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_observed": dataset.num_observed,
        "rating_scale": list(dataset.rating_scale),
        "name": dataset.name,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_synthetic(directory):
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    obs = load_ratings(
        d / "observed.tsv",
        "triplet_tsv",
        rating_scale=tuple(meta["rating_scale"]),
        num_users=meta["num_users"],
        num_items=meta["num_items"],
    )
    return RatingDataset(
        obs.num_users,
        obs.num_items,
        obs.users,
        obs.items,
        obs.ratings,
        obs.rating_scale,
        _read_matrix(d / "full_ratings.tsv"),
        _read_matrix(d / "propensities.tsv"),
        name=meta.get("name", ""),
    )


# --------------------------------------------------------------------------
# Splitting and masks


def split_train_validation(dataset, fraction, seed):
    """Randomly partition the observed entries into (train, validation)."""
    if not 0 < fraction < 1:
        raise InvalidSplitError(f"fraction must lie in (0, 1), got {fraction}")
    n = dataset.num_observed
    if n < 2:
        raise InvalidSplitError("need at least two observed entries to split")
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise InvalidSplitError(f"fraction {fraction} of {n} entries leaves an empty split")
    perm = make_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def sample_observation_mask(true_propensities, seed):
    """Draw each cell independently with its own observation probability."""
    p = np.asarray(true_propensities, dtype=np.float64)
    if not np.all((p >= 0) & (p <= 1)):
        raise DomainError("propensities must lie in [0, 1]")
    cells = make_rng(seed).random(p.shape) < p
    cells.setflags(write=False)
    return ObservationMask(cells, int(seed))


def sample_mar_ratings(dataset, items_per_user, seed, exclude_observed=True):
    """Uniformly exposed test ratings: ``items_per_user`` random items per user."""
    if dataset.full_ratings is None:
        raise ValueError("sample_mar_ratings requires full_ratings")
    rng = make_rng(seed)
    us, its = [], []
    for u in range(dataset.num_users):
        pool = np.arange(dataset.num_items)
        if exclude_observed:
            pool = pool[~dataset.observed_mask[u]]
        k = min(items_per_user, len(pool))
        chosen = np.sort(rng.choice(pool, size=k, replace=False))
        us.append(np.full(k, u))
        its.append(chosen)
    u = np.concatenate(us)
    i = np.concatenate(its)
    return RatingDataset(
        dataset.num_users,
        dataset.num_items,
        u,
        i,
        dataset.full_ratings[u, i],
        dataset.rating_scale,
        name=f"{dataset.name}-mar",
    )


# --------------------------------------------------------------------------
# Semi-synthetic generation


def _als_complete(dataset, rank, reg, iters, seed):
    """Biased low-rank completion by alternating ridge solves."""
    rng = make_rng(seed)
    nu, ni = dataset.shape
    mu = float(dataset.ratings.mean())
    r = dataset.ratings - mu
    P = rng.normal(0.0, 0.1, size=(nu, rank))
    Q = rng.normal(0.0, 0.1, size=(ni, rank))
    bu = np.zeros(nu)
    bi = np.zeros(ni)
    by_user = [np.flatnonzero(dataset.users == u) for u in range(nu)]
    by_item = [np.flatnonzero(dataset.items == i) for i in range(ni)]
    eye = reg * np.eye(rank + 1)
    for _ in range(iters):
        for u, idx in enumerate(by_user):
            if not len(idx):
                continue
            it = dataset.items[idx]
            X = np.column_stack([Q[it], np.ones(len(idx))])
            sol = np.linalg.solve(X.T @ X + eye, X.T @ (r[idx] - bi[it]))
            P[u], bu[u] = sol[:rank], sol[rank]
        for i, idx in enumerate(by_item):
            if not len(idx):
                continue
            us = dataset.users[idx]
            X = np.column_stack([P[us], np.ones(len(idx))])
            sol = np.linalg.solve(X.T @ X + eye, X.T @ (r[idx] - bu[us]))
            Q[i], bi[i] = sol[:rank], sol[rank]
    return mu + bu[:, None] + bi[None, :] + P @ Q.T


def _match_marginal(scores, levels, probs):
    """Map scores to ``levels`` by rank so the level frequencies follow ``probs``."""
    flat = scores.reshape(-1)
    order = np.argsort(flat, kind="stable")
    bounds = np.round(np.cumsum(probs) * len(flat)).astype(np.int64)
    bounds[-1] = len(flat)
    out = np.empty_like(flat)
    start = 0
    for level, stop in zip(levels, bounds):
        out[order[start:stop]] = level
        start = stop
    return out.reshape(scores.shape)


def exposure_propensities(full_ratings, sharpness, density):
    """``c * sigmoid(sharpness * (y - mean y))`` with mean exactly ``density``."""
    y = np.asarray(full_ratings, dtype=np.float64)
    raw = 1.0 / (1.0 + np.exp(-sharpness * (y - y.mean())))

    def gap(c):
        return np.minimum(c * raw, 1.0).mean() - density

    hi = 1.0 / raw.min()
    c = optimize.brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return np.minimum(c * raw, 1.0)


def generate_semi_synthetic(base, spec, seed, rank=8, reg=5.0, iters=10):
    """Complete ``base`` with a low-rank model and re-sample its exposure.

    The completed scores are mapped to the rating levels so that the level
    frequencies match the base's observed histogram, exposure follows a
    logistic tilt on the true rating, and one mask is drawn from it.
    """
    if base.num_observed < 2 or np.ptp(base.ratings) == 0:
        raise DegenerateGenerationError("base dataset has a single distinct rating")
    if base.num_observed < rank + 1:
        raise DegenerateGenerationError("too few observed ratings to fit the completion model")
    scores = _als_complete(base, rank, reg, iters, seed)
    levels = base.rating_levels
    if np.all(base.ratings == np.round(base.ratings)):
        counts = np.array([(base.ratings == lv).sum() for lv in levels], dtype=np.float64)
        full = _match_marginal(scores, levels, counts / counts.sum())
    else:
        full = scores
    lo, hi = base.rating_scale
    full = np.clip(full, lo, hi)
    props = exposure_propensities(full, spec.exposure_sharpness, spec.base_exposure_rate)
    mask = sample_observation_mask(props, seed + 1)
    u, i = np.nonzero(mask.cells)
    return RatingDataset(
        base.num_users,
        base.num_items,
        u,
        i,
        full[u, i],
        base.rating_scale,
        full,
        props,
        name=f"{base.name or 'synthetic'}-{spec.level}",
    )


def make_low_rank_ratings(
    num_users,
    num_items,
    density,
    seed,
    rank=4,
    level_probs=(0.06, 0.11, 0.27, 0.34, 0.22),
    noise=0.5,
):
    """A MovieLens-shaped base: low-rank scores quantised to 1..5, random mask.

    Stands in for a real explicit-feedback corpus when none is on disk.
    """
    rng = make_rng(seed)
    P = rng.normal(size=(num_users, rank))
    Q = rng.normal(size=(num_items, rank))
    scores = P @ Q.T / np.sqrt(rank)
    scores += rng.normal(0, 0.5, size=(num_users, 1)) + rng.normal(0, 0.5, size=(1, num_items))
    scores += rng.normal(0, noise, size=scores.shape)
    levels = np.arange(1.0, len(level_probs) + 1.0)
    full = _match_marginal(scores, levels, np.asarray(level_probs) / np.sum(level_probs))
    mask = rng.random(full.shape) < density
    u, i = np.nonzero(mask)
    return RatingDataset(
        num_users, num_items, u, i, full[u, i], (1.0, float(len(level_probs))), name="lowrank"
    )


def load_dataset_dir(directory, format="coat_ascii"):
    """Load ``train``/``test`` files from a directory (Coat or Yahoo layout)."""
    d = Path(directory)
    if format == "coat_ascii":
        train, test = d / "train.ascii", d / "test.ascii"
    else:
        train, test = d / "train.tsv", d / "test.tsv"
    tr = load_ratings(train, format)
    te = load_ratings(test, format, num_users=tr.num_users, num_items=tr.num_items)
    scale = (min(tr.rating_scale[0], te.rating_scale[0]), max(tr.rating_scale[1], te.rating_scale[1]))
    tr = RatingDataset(tr.num_users, tr.num_items, tr.users, tr.items, tr.ratings, scale, name=tr.name)
    te = RatingDataset(te.num_users, te.num_items, te.users, te.items, te.ratings, scale, name=te.name)
    return tr, te

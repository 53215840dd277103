"""The J propensity models, K imputation models and the prediction model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import propensity as prop
from .backbones import Backbone
from .errors import ContractError, NumericError

# Full-grid inverse-propensity caches are only kept below this many cells.
_CACHE_LIMIT = 5_000_000


@dataclass
class ModelEnsemble:
    propensity_models: list
    imputation_models: list
    prediction: Backbone
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.propensity_models) < 1:
            raise ContractError("an ensemble needs at least one propensity model (J >= 1)")
        if len(self.imputation_models) < 1:
            raise ContractError("an ensemble needs at least one imputation model (K >= 1)")

    @property
    def J(self):
        return len(self.propensity_models)

    @property
    def K(self):
        return len(self.imputation_models)

    def _inverse_matrix(self, j, dataset):
        hit = self._cache.get(j)
        if hit is None or hit[0] is not dataset:
            hit = (dataset, 1.0 / prop.estimate_matrix(self.propensity_models[j], dataset))
            self._cache[j] = hit
        return hit[1]

    def inverse_propensities(self, dataset, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        cols = []
        for j, model in enumerate(self.propensity_models):
            if dataset.num_cells <= _CACHE_LIMIT:
                cols.append(self._inverse_matrix(j, dataset)[users, items])
            else:
                cols.append(1.0 / prop.estimate_cells(model, dataset, users, items))
        return np.column_stack(cols)

    def imputed_errors(self, users, items, capped=False):
        return np.column_stack(
            [m.imputed_errors(users, items, capped) for m in self.imputation_models]
        )

    def features(self, dataset, users, items, capped=False):
        """Rows ``(1/p^1, ..., 1/p^J, m^1, ..., m^K)`` for each cell."""
        f = np.hstack(
            [self.inverse_propensities(dataset, users, items), self.imputed_errors(users, items, capped)]
        )
        if not np.all(np.isfinite(f)):
            col = int(np.flatnonzero(~np.all(np.isfinite(f), axis=0))[0])
            name = (
                f"propensity model {col} ({self.propensity_models[col].kind})"
                if col < self.J
                else f"imputation model {col - self.J} ({self.imputation_models[col - self.J].kind})"
            )
            raise NumericError(f"non-finite feature from {name}", name=name)
        return f

    def invalidate(self):
        self._cache.clear()

"""Prediction backbones with hand-written gradients.

Both models keep their parameters in a ``dict[str, ndarray]`` so optimizers,
checkpoints and gradient checks can treat them uniformly.  ``gradients``
takes ``dout = dLoss/dprediction`` per sample and returns parameter
gradients; every training loss in the package is built on top of it.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .errors import BoundsError, NumericError

INIT_SCALE = 0.01


def _scatter_rows(n_rows, idx, vals):
    out = np.zeros((n_rows,) + vals.shape[1:])
    np.add.at(out, idx, vals)
    return out


class Backbone:
    kind = "base"

    def __init__(self, num_users, num_items, params, seed):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.params = params
        self.seed = int(seed)

    def _check(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (
            users.min() < 0
            or users.max() >= self.num_users
            or items.min() < 0
            or items.max() >= self.num_items
        ):
            raise BoundsError(
                f"index outside {self.num_users}x{self.num_items} grid"
            )
        return users, items

    def predict(self, u, i, clamp=None):
        """Prediction for a single cell; ``clamp=(lo, hi)`` only for evaluation."""
        out = float(self.predict_batch(np.array([u]), np.array([i]))[0])
        if clamp is not None:
            out = min(max(out, clamp[0]), clamp[1])
        return out

    def predict_matrix(self):
        u, i = np.divmod(np.arange(self.num_users * self.num_items), self.num_items)
        return self.predict_batch(u, i).reshape(self.num_users, self.num_items)

    def predict_batch(self, users, items):
        raise NotImplementedError

    def gradients(self, users, items, dout):
        raise NotImplementedError

    def manifest(self):
        return {
            "kind": self.kind,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "seed": self.seed,
            "dims": {k: list(v.shape) for k, v in self.params.items()},
        }

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def load_params(self, params):
        for k, v in params.items():
            self.params[k][...] = v

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params.values())


class MfModel(Backbone):
    """Biased matrix factorisation: ``g + b_u + b_i + <p_u, q_i>``."""

    kind = "mf"

    def __init__(self, num_users, num_items, dim=8, seed=0):
        if dim < 1:
            raise ValueError("latent dimension must be >= 1")
        rng = make_rng(seed)
        params = {
            "user_emb": rng.uniform(-INIT_SCALE, INIT_SCALE, (num_users, dim)),
            "item_emb": rng.uniform(-INIT_SCALE, INIT_SCALE, (num_items, dim)),
            "user_bias": np.zeros(num_users),
            "item_bias": np.zeros(num_items),
            "global_bias": np.zeros(1),
        }
        super().__init__(num_users, num_items, params, seed)
        self.dim = dim

    def predict_batch(self, users, items):
        users, items = self._check(users, items)
        p = self.params
        return (
            p["global_bias"][0]
            + p["user_bias"][users]
            + p["item_bias"][items]
            + np.einsum("nd,nd->n", p["user_emb"][users], p["item_emb"][items])
        )

    def gradients(self, users, items, dout):
        users, items = self._check(users, items)
        p = self.params
        dout = np.asarray(dout, dtype=np.float64)
        return {
            "user_emb": _scatter_rows(self.num_users, users, dout[:, None] * p["item_emb"][items]),
            "item_emb": _scatter_rows(self.num_items, items, dout[:, None] * p["user_emb"][users]),
            "user_bias": np.bincount(users, dout, minlength=self.num_users),
            "item_bias": np.bincount(items, dout, minlength=self.num_items),
            "global_bias": np.array([dout.sum()]),
        }


class NeuralInteractionModel(Backbone):
    """One tanh hidden layer over concatenated user/item embeddings."""

    kind = "neural"

    def __init__(self, num_users, num_items, dim=8, hidden=16, seed=0):
        if dim < 1 or hidden < 1:
            raise ValueError("dim and hidden must be >= 1")
        rng = make_rng(seed)
        lim1 = np.sqrt(6.0 / (2 * dim + hidden))
        lim2 = np.sqrt(6.0 / (hidden + 1))
        params = {
            "user_emb": rng.uniform(-INIT_SCALE, INIT_SCALE, (num_users, dim)),
            "item_emb": rng.uniform(-INIT_SCALE, INIT_SCALE, (num_items, dim)),
            "w_hidden": rng.uniform(-lim1, lim1, (2 * dim, hidden)),
            "b_hidden": np.zeros(hidden),
            "w_out": rng.uniform(-lim2, lim2, hidden),
            "b_out": np.zeros(1),
        }
        super().__init__(num_users, num_items, params, seed)
        self.dim = dim
        self.hidden = hidden

    def _forward(self, users, items):
        p = self.params
        z = np.concatenate([p["user_emb"][users], p["item_emb"][items]], axis=1)
        h = np.tanh(z @ p["w_hidden"] + p["b_hidden"])
        return z, h, h @ p["w_out"] + p["b_out"][0]

    def predict_batch(self, users, items):
        users, items = self._check(users, items)
        return self._forward(users, items)[2]

    def gradients(self, users, items, dout):
        users, items = self._check(users, items)
        p = self.params
        dout = np.asarray(dout, dtype=np.float64)
        z, h, _ = self._forward(users, items)
        da = (dout[:, None] * p["w_out"][None, :]) * (1.0 - h * h)
        dz = da @ p["w_hidden"].T
        d = self.dim
        return {
            "user_emb": _scatter_rows(self.num_users, users, dz[:, :d]),
            "item_emb": _scatter_rows(self.num_items, items, dz[:, d:]),
            "w_hidden": z.T @ da,
            "b_hidden": da.sum(axis=0),
            "w_out": h.T @ dout,
            "b_out": np.array([dout.sum()]),
        }


BACKBONES = {"mf": MfModel, "neural": NeuralInteractionModel}


def make_backbone(kind, num_users, num_items, seed=0, **kwargs):
    try:
        cls = BACKBONES[kind]
    except KeyError:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {sorted(BACKBONES)}") from None
    return cls(num_users, num_items, seed=seed, **kwargs)


# --------------------------------------------------------------------------
# Optimizers


class Adam:
    """Adam; ``weight_decay`` adds an L2 term to the gradient (coupled, not AdamW)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """Plain gradient descent; exists so scaling properties are exact."""

    def __init__(self, lr=1e-2, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        for name, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            params[name] -= self.lr * g


def check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'", name=name)


def apply_output_gradient(model, users, items, dout, opt):
    """One optimizer step given ``dLoss/dprediction`` for each sample."""
    grads = model.gradients(users, items, dout)
    check_finite(grads)
    opt.step(model.params, grads)


def weighted_squared_loss(model, users, items, targets, weights):
    pred = model.predict_batch(users, items)
    diff = pred - np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.mean(w * diff * diff)), 2.0 * w * diff / len(diff)


def weighted_update(model, users, items, targets, weights, opt):
    """One step on ``mean(w * (pred - target)**2)``; returns the loss before the step."""
    users = np.asarray(users)
    if users.size == 0:
        raise ValueError("empty batch")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite sample weight", name="weights")
    loss, dout = weighted_squared_loss(model, users, items, targets, w)
    apply_output_gradient(model, users, items, dout, opt)
    return loss


# --------------------------------------------------------------------------
# Checkpoints


def save_model(model, path, extra=None):
    """Write parameters and a JSON manifest into one ``.npz`` file."""
    manifest = model.manifest()
    manifest["hyper"] = {
        k: getattr(model, k) for k in ("dim", "hidden") if hasattr(model, k)
    }
    if extra:
        manifest["extra"] = extra
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.array(json.dumps(manifest, sort_keys=True)), **model.params)
    Path(path).write_bytes(buf.getvalue())


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["__manifest__"]))
        params = {k: z[k].copy() for k in z.files if k != "__manifest__"}
    model = make_backbone(
        manifest["kind"],
        manifest["num_users"],
        manifest["num_items"],
        seed=manifest["seed"],
        **manifest["hyper"],
    )
    model.load_params(params)
    return model, manifest

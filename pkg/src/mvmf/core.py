"""Multi-view factorization math: the joint objective over ratings, user
attributes, and item features, its gradients, closed-form row updates, Adam,
and cold-start inference. Everything here is plain numpy over immutable
inputs; federation and crypto live elsewhere.

The model factorizes three views with shared latent factors::

    R ~ P Q^T      (n x m ratings)
    X ~ P U^T      (n x l_x user attributes)
    Y ~ Q V^T      (m x l_y item features)

Row vectors are used throughout: ``p_i`` is row i of P, etc.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import RatingDataset

__all__ = [
    "DimensionError",
    "HyperparameterError",
    "Hyperparams",
    "FactorModel",
    "WeightScheme",
    "AdamState",
    "predict_rating",
    "objective",
    "objective_gradients",
    "grad_p",
    "gradient_p",
    "closed_form_p",
    "grad_u",
    "grad_q",
    "user_q_contribs",
    "user_u_contribs",
    "item_feat_contribs",
    "semials_update_p",
    "semials_update_v",
    "update_all_v",
    "cold_start_user",
    "cold_start_item",
]


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class HyperparameterError(ValueError):
    """A hyperparameter is outside its valid range."""


@dataclass
class Hyperparams:
    """Training hyperparameters; defaults follow the tuned MovieLens values.

    ``lam_side`` weights the side-information views, ``lam_reg`` the L2
    penalty. ``sample_ratio`` is the number of sampled unrated items per
    rated item under the sampled weighting. ``iters`` is carried in configs
    for completeness; the trainers take one server update per epoch.
    """

    n_factors: int = 6
    lam_side: float = 1.0
    lam_reg: float = 10.0
    alpha: float = 0.1
    lr: float = 0.05
    beta1: float = 0.5
    beta2: float = 0.99
    adam_eps: float = 1e-8
    sample_ratio: int = 1
    iters: int = 10
    epochs: int = 20
    keysize: int = 1024

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise HyperparameterError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.lam_side < 0 or self.lam_reg < 0:
            raise HyperparameterError("regularization weights must be >= 0")
        if self.lr <= 0:
            raise HyperparameterError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise HyperparameterError("Adam decay rates must be in [0, 1)")
        if self.adam_eps <= 0:
            raise HyperparameterError("adam_eps must be positive")
        if self.sample_ratio < 0 or int(self.sample_ratio) != self.sample_ratio:
            raise HyperparameterError("sample_ratio must be a non-negative integer")
        if self.n_factors < 1:
            raise HyperparameterError("n_factors must be >= 1")


@dataclass
class FactorModel:
    """The four latent matrices sharing column dimension ``n_factors``."""

    user_factors: np.ndarray       # P: (n, k)
    item_factors: np.ndarray       # Q: (m, k)
    user_attr_factors: np.ndarray  # U: (l_x, k)
    item_feat_factors: np.ndarray  # V: (l_y, k)

    @property
    def n_factors(self) -> int:
        return self.item_factors.shape[1]

    def validate(self) -> None:
        k = self.n_factors
        mats = (self.user_factors, self.item_factors, self.user_attr_factors, self.item_feat_factors)
        if any(mat.ndim != 2 or mat.shape[1] != k for mat in mats):
            raise DimensionError("factor matrices must share one latent dimension")
        if not all(np.isfinite(mat).all() for mat in mats):
            raise ValueError("non-finite factor entries")

    def copy(self) -> "FactorModel":
        return FactorModel(
            self.user_factors.copy(),
            self.item_factors.copy(),
            self.user_attr_factors.copy(),
            self.item_feat_factors.copy(),
        )

    @classmethod
    def init_random(cls, n: int, m: int, l_x: int, l_y: int, k: int,
                    rng: np.random.Generator, scale: float = 0.1) -> "FactorModel":
        """Seeded i.i.d. uniform [0, scale) initialization; small positive
        values keep the attack systems well-conditioned."""
        return cls(
            rng.uniform(0.0, scale, size=(n, k)),
            rng.uniform(0.0, scale, size=(m, k)),
            rng.uniform(0.0, scale, size=(l_x, k)),
            rng.uniform(0.0, scale, size=(l_y, k)),
        )


@dataclass(frozen=True)
class WeightScheme:
    """Per-record weight policy for the rating view.

    ``obs_only`` weights rated items 1 and skips the rest; ``incl_unc``
    weights every unrated item ``alpha``; ``sampled`` weights only a fixed
    per-user sample of unrated items ``alpha``.
    """

    kind: str
    alpha: float = 0.1
    sampled_sets: tuple = ()

    @classmethod
    def obs_only(cls) -> "WeightScheme":
        return cls("obs_only")

    @classmethod
    def incl_unc(cls, alpha: float = 0.1) -> "WeightScheme":
        return cls("incl_unc", alpha=alpha)

    @classmethod
    def sampled(cls, alpha: float, sampled_sets) -> "WeightScheme":
        return cls("sampled", alpha=alpha, sampled_sets=tuple(np.asarray(s, dtype=int) for s in sampled_sets))

    def upload_entries(self, user: int, data: RatingDataset):
        """Item indices with positive weight for ``user`` and their weights.

        These are exactly the rating gradients the user uploads.
        """
        rated = data.item_idx[user]
        if self.kind == "obs_only":
            return rated, np.ones(len(rated))
        if self.kind == "incl_unc":
            c = np.full(data.m, self.alpha)
            c[rated] = 1.0
            return np.arange(data.m), c
        if self.kind == "sampled":
            extra = self.sampled_sets[user]
            idx = np.sort(np.concatenate([rated, extra]))
            c = np.where(np.isin(idx, rated), 1.0, self.alpha)
            return idx, c
        raise ValueError(f"unknown weight scheme {self.kind!r}")

    def dense_weights(self, user: int, data: RatingDataset) -> np.ndarray:
        c = np.zeros(data.m)
        idx, w = self.upload_entries(user, data)
        c[idx] = w
        return c


class AdamState:
    """Bias-corrected Adam accumulators for one parameter matrix."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float,
             beta1: float, beta2: float, eps: float) -> np.ndarray:
        if param.shape != grad.shape or param.shape != self.m.shape:
            raise DimensionError("parameter/gradient/state shapes differ")
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        m_hat = self.m / (1.0 - beta1 ** self.t)
        v_hat = self.v / (1.0 - beta2 ** self.t)
        return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def predict_rating(p: np.ndarray, q: np.ndarray) -> float:
    """Inner product of one user and one item factor row."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"factor lengths differ: {p.shape} vs {q.shape}")
    return float(p @ q)


def objective(data: RatingDataset, model: FactorModel, weights: WeightScheme,
              lam_side: float, lam_reg: float) -> float:
    """Weighted squared error over the three views plus L2 regularization.

    Unobserved ratings enter as 0 with their scheme weight; zero-weight
    entries contribute nothing.
    """
    p_mat, q_mat = model.user_factors, model.item_factors
    u_mat, v_mat = model.user_attr_factors, model.item_feat_factors
    total = 0.0
    for i in range(data.n):
        idx, c = weights.upload_entries(i, data)
        r = np.zeros(len(idx))
        r[np.isin(idx, data.item_idx[i])] = data.values[i]
        err = r - q_mat[idx] @ p_mat[i]
        total += float(c @ (err * err))
    x_err = data.user_attrs - p_mat @ u_mat.T
    y_err = data.item_feats - q_mat @ v_mat.T
    total += lam_side * (float(np.sum(x_err * x_err)) + float(np.sum(y_err * y_err)))
    total += lam_reg * sum(float(np.sum(a * a)) for a in (p_mat, q_mat, u_mat, v_mat))
    if not np.isfinite(total):
        raise ValueError("objective is not finite")
    return total


# ---------------------------------------------------------------------------
# Per-user upload contributions (the quantities a client transmits)


def user_q_contribs(data: RatingDataset, model: FactorModel, weights: WeightScheme,
                    user: int, p: np.ndarray | None = None):
    """Item-factor contributions c_ij (r_ij - p q_j^T) p for the user's
    positive-weight items. Returns (item indices, (len, k) array)."""
    if p is None:
        p = model.user_factors[user]
    idx, c = weights.upload_entries(user, data)
    r = np.zeros(len(idx))
    r[np.isin(idx, data.item_idx[user])] = data.values[user]
    resid = c * (r - model.item_factors[idx] @ p)
    return idx, resid[:, None] * p[None, :]


def user_u_contribs(data: RatingDataset, model: FactorModel, user: int,
                    p: np.ndarray | None = None) -> np.ndarray:
    """Attribute-factor contributions (x_du - p u_du^T) p, shape (l_x, k)."""
    if p is None:
        p = model.user_factors[user]
    resid = data.user_attrs[user] - model.user_attr_factors @ p
    return resid[:, None] * p[None, :]


def item_feat_contribs(item_feats: np.ndarray, v_mat: np.ndarray, q_mat: np.ndarray) -> np.ndarray:
    """Feature contributions (y_jd - v_d q_j^T) v_d for all pairs, shape (m, l_y, k)."""
    resid = item_feats - q_mat @ v_mat.T
    return resid[:, :, None] * v_mat[None, :, :]


# ---------------------------------------------------------------------------
# Gradients of the objective


def gradient_p(p: np.ndarray, r: np.ndarray, c: np.ndarray, q_sub: np.ndarray,
               x: np.ndarray, u_mat: np.ndarray, lam_side: float, lam_reg: float) -> np.ndarray:
    """User-factor gradient from raw arrays; ``r``/``c``/``q_sub`` cover the
    positive-weight items only."""
    g = -2.0 * (c * (r - q_sub @ p)) @ q_sub
    g -= 2.0 * lam_side * (x - u_mat @ p) @ u_mat
    g += 2.0 * lam_reg * p
    return g


def grad_p(data: RatingDataset, model: FactorModel, weights: WeightScheme,
           lam_side: float, lam_reg: float, user: int,
           p: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the objective w.r.t. one user's factor row."""
    if user >= data.n:
        raise IndexError(f"user {user} out of range")
    if p is None:
        p = model.user_factors[user]
    idx, c = weights.upload_entries(user, data)
    r = np.zeros(len(idx))
    r[np.isin(idx, data.item_idx[user])] = data.values[user]
    return gradient_p(p, r, c, model.item_factors[idx], data.user_attrs[user],
                      model.user_attr_factors, lam_side, lam_reg)


def grad_u(u_mat: np.ndarray, contrib_sum: np.ndarray, lam_side: float,
           lam_reg: float) -> np.ndarray:
    """Attribute-factor gradient from the summed per-user contributions."""
    if contrib_sum.shape != u_mat.shape:
        raise DimensionError("contribution sum shape must match the factor matrix")
    return -2.0 * lam_side * contrib_sum + 2.0 * lam_reg * u_mat


def grad_q(q_mat: np.ndarray, rating_contrib_sum: np.ndarray, feat_contrib_sum: np.ndarray,
           lam_side: float, lam_reg: float) -> np.ndarray:
    """Item-factor gradient from summed rating and feature contributions."""
    if rating_contrib_sum.shape != q_mat.shape or feat_contrib_sum.shape != q_mat.shape:
        raise DimensionError("contribution sum shape must match the factor matrix")
    return -2.0 * rating_contrib_sum - 2.0 * lam_side * feat_contrib_sum + 2.0 * lam_reg * q_mat


def grad_v(item_feats: np.ndarray, v_mat: np.ndarray, q_mat: np.ndarray,
           lam_side: float, lam_reg: float) -> np.ndarray:
    resid = item_feats - q_mat @ v_mat.T
    return -2.0 * lam_side * resid.T @ q_mat + 2.0 * lam_reg * v_mat


def objective_gradients(data: RatingDataset, model: FactorModel, weights: WeightScheme,
                        lam_side: float, lam_reg: float) -> dict:
    """Analytic gradients of the objective w.r.t. all four factor matrices."""
    n, k = model.user_factors.shape
    gp = np.vstack([grad_p(data, model, weights, lam_side, lam_reg, i) for i in range(n)])
    u_sum = np.zeros_like(model.user_attr_factors)
    q_sum = np.zeros_like(model.item_factors)
    for i in range(n):
        u_sum += user_u_contribs(data, model, i)
        idx, contribs = user_q_contribs(data, model, weights, i)
        np.add.at(q_sum, idx, contribs)
    feat_sum = item_feat_contribs(data.item_feats, model.item_feat_factors, model.item_factors).sum(axis=1)
    return {
        "P": gp,
        "Q": grad_q(model.item_factors, q_sum, feat_sum, lam_side, lam_reg),
        "U": grad_u(model.user_attr_factors, u_sum, lam_side, lam_reg),
        "V": grad_v(data.item_feats, model.item_feat_factors, model.item_factors, lam_side, lam_reg),
    }


# ---------------------------------------------------------------------------
# Closed-form row updates


def _ridge_solve(system: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve p system = rhs for a row vector, trying the SPD fast path first."""
    try:
        cho = scipy.linalg.cho_factor(system, check_finite=False)
        return scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        return np.linalg.solve(system, rhs)


def closed_form_p(r: np.ndarray, c: np.ndarray, q_sub: np.ndarray, x: np.ndarray,
                  u_mat: np.ndarray, lam_side: float, lam_reg: float) -> np.ndarray:
    """Ridge-regularized optimal user factor row from raw arrays:
    (r C Q + lam_side x U)(Q^T C Q + lam_side U^T U + lam_reg I)^-1."""
    k = q_sub.shape[1]
    system = q_sub.T @ (c[:, None] * q_sub) + lam_side * u_mat.T @ u_mat + lam_reg * np.eye(k)
    rhs = (r * c) @ q_sub + lam_side * x @ u_mat
    return _ridge_solve(system, rhs)


def semials_update_p(data: RatingDataset, model: FactorModel, weights: WeightScheme,
                     lam_side: float, lam_reg: float, user: int) -> np.ndarray:
    """Optimal user factor row with the other matrices held fixed.

    Sums run only over the positive-weight items; for obs_only that is the
    reduced rated-items form.
    """
    idx, c = weights.upload_entries(user, data)
    r = np.zeros(len(idx))
    r[np.isin(idx, data.item_idx[user])] = data.values[user]
    return closed_form_p(r, c, model.item_factors[idx], data.user_attrs[user],
                         model.user_attr_factors, lam_side, lam_reg)


def semials_update_v(item_feats: np.ndarray, q_mat: np.ndarray, lam_side: float,
                     lam_reg: float, feature_row: int) -> np.ndarray:
    """Optimal item-feature factor row: (y_dy Q)(Q^T Q + (lam_reg/lam_side) I)^-1."""
    if lam_side <= 0:
        raise HyperparameterError("lam_side must be positive for the closed-form V update")
    k = q_mat.shape[1]
    system = q_mat.T @ q_mat + (lam_reg / lam_side) * np.eye(k)
    return _ridge_solve(system, item_feats[:, feature_row] @ q_mat)


def update_all_v(item_feats: np.ndarray, q_mat: np.ndarray, lam_side: float,
                 lam_reg: float) -> np.ndarray:
    """All item-feature factor rows in one solve; rows match semials_update_v."""
    if lam_side <= 0:
        raise HyperparameterError("lam_side must be positive for the closed-form V update")
    k = q_mat.shape[1]
    system = q_mat.T @ q_mat + (lam_reg / lam_side) * np.eye(k)
    return _ridge_solve(system, (item_feats.T @ q_mat).T).T


def cold_start_user(x: np.ndarray, u_mat: np.ndarray, lam_side: float,
                    lam_reg: float) -> np.ndarray:
    """Latent factors for a new user from attributes alone:
    x U (U^T U + (lam_reg/lam_side) I)^-1."""
    if lam_side <= 0:
        raise HyperparameterError("lam_side must be positive for cold-start inference")
    k = u_mat.shape[1]
    system = u_mat.T @ u_mat + (lam_reg / lam_side) * np.eye(k)
    return _ridge_solve(system, np.asarray(x, dtype=float) @ u_mat)


def cold_start_item(y: np.ndarray, v_mat: np.ndarray, lam_side: float,
                    lam_reg: float) -> np.ndarray:
    """Latent factors for a new item from features alone:
    y V (V^T V + (lam_reg/lam_side) I)^-1."""
    if lam_side <= 0:
        raise HyperparameterError("lam_side must be positive for cold-start inference")
    k = v_mat.shape[1]
    system = v_mat.T @ v_mat + (lam_reg / lam_side) * np.eye(k)
    return _ridge_solve(system, np.asarray(y, dtype=float) @ v_mat)

"""Deterministic in-process simulation of federated multi-view factorization.

Three roles exchange messages each epoch: clients update their own user
factor locally and upload per-item and per-attribute gradient vectors, the
item server refreshes the feature factors and uploads its contributions, and
the FL server aggregates everything and takes one Adam step on the shared
matrices. Clients may perturb uploads with element-wise Laplace noise.

In SGD mode a client uploads first and then takes its single local step with
the same received parameters, so two consecutive uploads straddle exactly
one user-factor update.
"""

from __future__ import annotations

import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import AdamState, FactorModel, Hyperparams, WeightScheme
from .data import RatingDataset

__all__ = [
    "ProtocolError",
    "GradientBundle",
    "ItemServerBundle",
    "NoiseConfig",
    "EpochRecord",
    "FedRunResult",
    "LocalQueue",
    "Client",
    "ItemServer",
    "FLServer",
    "run_federated",
]

MODES = ("semials", "sgd")


class ProtocolError(RuntimeError):
    """A round violated the message contract (missing/duplicate bundles)."""


@dataclass
class GradientBundle:
    """One client's upload: rating-view gradients for its positive-weight
    items and attribute-view gradients for every attribute."""

    user: int
    item_idx: np.ndarray   # (n_i,)
    q_grads: np.ndarray    # (n_i, k)
    u_grads: np.ndarray    # (l_x, k)


@dataclass
class ItemServerBundle:
    """Feature-view gradients for every (item, feature) pair, shape (m, l_y, k)."""

    feat_grads: np.ndarray


@dataclass
class NoiseConfig:
    """Element-wise Laplace perturbation of client uploads; 0 disables it."""

    scale: float = 0.0
    seed: int | None = None


@dataclass
class EpochRecord:
    """What an honest-but-curious server legitimately observed in one epoch."""

    epoch: int
    u_broadcast: np.ndarray
    q_broadcast: np.ndarray
    bundles: list
    u_after: np.ndarray
    q_after: np.ndarray


@dataclass
class FedRunResult:
    model: FactorModel
    loss_trace: list
    records: list
    timings: list
    seed: int


class LocalQueue:
    """Minimal in-process transport: named FIFO mailboxes. The simulation
    only depends on send/drain, so a socket transport could slot in later."""

    def __init__(self):
        self._boxes = defaultdict(deque)

    def send(self, box: str, msg) -> None:
        self._boxes[box].append(msg)

    def drain(self, box: str) -> list:
        out = list(self._boxes[box])
        self._boxes[box].clear()
        return out


class Client:
    """One user's device: owns its ratings, attributes, and factor row."""

    def __init__(self, user: int, data: RatingDataset, hp: Hyperparams,
                 weights: WeightScheme, mode: str, p0: np.ndarray,
                 noise_scale: float = 0.0, noise_rng: np.random.Generator | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.user = user
        self.data = data
        self.hp = hp
        self.weights = weights
        self.mode = mode
        self.p = np.array(p0, dtype=float, copy=True)
        self.noise_scale = noise_scale
        self.noise_rng = noise_rng
        self._idx, self._c = weights.upload_entries(user, data)
        self._r = np.zeros(len(self._idx))
        self._r[np.isin(self._idx, data.item_idx[user])] = data.values[user]
        self._x = data.user_attrs[user]

    def round(self, u_mat: np.ndarray, q_mat: np.ndarray) -> GradientBundle:
        if u_mat.shape[1] != self.hp.n_factors or q_mat.shape[0] != self.data.m:
            raise core.DimensionError("broadcast parameters do not match the dataset")
        q_sub = q_mat[self._idx]
        if self.mode == "semials":
            self.p = core.closed_form_p(self._r, self._c, q_sub, self._x, u_mat,
                                        self.hp.lam_side, self.hp.lam_reg)
        p = self.p
        q_grads = (self._c * (self._r - q_sub @ p))[:, None] * p[None, :]
        u_grads = (self._x - u_mat @ p)[:, None] * p[None, :]
        if self.mode == "sgd":
            g = core.gradient_p(p, self._r, self._c, q_sub, self._x, u_mat,
                                self.hp.lam_side, self.hp.lam_reg)
            self.p = p - self.hp.lr * g
        if self.noise_scale > 0:
            q_grads = q_grads + self.noise_rng.laplace(0.0, self.noise_scale, size=q_grads.shape)
            u_grads = u_grads + self.noise_rng.laplace(0.0, self.noise_scale, size=u_grads.shape)
        return GradientBundle(self.user, self._idx, q_grads, u_grads)


class ItemServer:
    """Holds the item features, refreshes V in closed form, and contributes
    feature-view gradients computed with the fresh V."""

    def __init__(self, item_feats: np.ndarray, hp: Hyperparams, v0: np.ndarray):
        self.item_feats = item_feats
        self.hp = hp
        self.v_mat = np.array(v0, dtype=float, copy=True)

    def round(self, q_mat: np.ndarray) -> ItemServerBundle:
        self.v_mat = core.update_all_v(self.item_feats, q_mat, self.hp.lam_side, self.hp.lam_reg)
        return ItemServerBundle(core.item_feat_contribs(self.item_feats, self.v_mat, q_mat))


class FLServer:
    """Aggregates gradients and owns the shared U and Q matrices."""

    def __init__(self, u0: np.ndarray, q0: np.ndarray, hp: Hyperparams):
        self.u_mat = np.array(u0, dtype=float, copy=True)
        self.q_mat = np.array(q0, dtype=float, copy=True)
        self.hp = hp
        self.adam_u = AdamState(u0.shape)
        self.adam_q = AdamState(q0.shape)

    def aggregate(self, bundles: list, n_expected: int):
        """Sum the client uploads into dense gradients; one bundle per user."""
        users = [b.user for b in bundles]
        if len(bundles) != n_expected or len(set(users)) != len(users):
            raise ProtocolError(f"expected {n_expected} distinct bundles, got {len(bundles)}")
        u_sum = np.zeros_like(self.u_mat)
        q_sum = np.zeros_like(self.q_mat)
        for b in sorted(bundles, key=lambda b: b.user):
            if b.u_grads.shape != self.u_mat.shape:
                raise core.DimensionError("attribute gradient shape mismatch")
            u_sum += b.u_grads
            np.add.at(q_sum, b.item_idx, b.q_grads)
        return u_sum, q_sum

    def update(self, u_sum: np.ndarray, q_sum: np.ndarray, item_bundle: ItemServerBundle) -> None:
        hp = self.hp
        feat_sum = item_bundle.feat_grads.sum(axis=1)
        gu = core.grad_u(self.u_mat, u_sum, hp.lam_side, hp.lam_reg)
        gq = core.grad_q(self.q_mat, q_sum, feat_sum, hp.lam_side, hp.lam_reg)
        self.u_mat = self.adam_u.step(self.u_mat, gu, hp.lr, hp.beta1, hp.beta2, hp.adam_eps)
        self.q_mat = self.adam_q.step(self.q_mat, gq, hp.lr, hp.beta1, hp.beta2, hp.adam_eps)


def _record_filter(record):
    if record in (None, "none", False):
        return lambda t: False
    if record in ("all", True):
        return lambda t: True
    chosen = set(int(t) for t in record)
    return lambda t: t in chosen


def run_federated(data: RatingDataset, hp: Hyperparams | None = None,
                  weights: WeightScheme | None = None, mode: str = "semials",
                  noise: NoiseConfig | None = None, epochs: int | None = None,
                  seed: int = 0, record=None, compute_loss: bool = True) -> FedRunResult:
    """Run the plaintext federated protocol for ``epochs`` rounds.

    Deterministic for a fixed ``seed``: initialization, client order, and
    noise streams all derive from it. ``record`` selects which epochs the
    server log keeps ("all", an iterable of epoch numbers, or None).
    """
    hp = hp or Hyperparams()
    hp.validate()
    weights = weights or WeightScheme.obs_only()
    noise = noise or NoiseConfig()
    if noise.scale < 0:
        raise ValueError("noise scale must be >= 0")
    epochs = hp.epochs if epochs is None else epochs

    root = np.random.SeedSequence(seed)
    init_ss, noise_ss = root.spawn(2)
    model0 = FactorModel.init_random(data.n, data.m, data.l_x, data.l_y, hp.n_factors,
                                     np.random.default_rng(init_ss))
    noise_seed = noise.seed if noise.seed is not None else noise_ss
    client_noise = np.random.SeedSequence(noise_seed).spawn(data.n) if noise.scale > 0 else [None] * data.n

    clients = [
        Client(i, data, hp, weights, mode, model0.user_factors[i],
               noise_scale=noise.scale,
               noise_rng=np.random.default_rng(client_noise[i]) if noise.scale > 0 else None)
        for i in range(data.n)
    ]
    item_server = ItemServer(data.item_feats, hp, model0.item_feat_factors)
    server = FLServer(model0.user_attr_factors, model0.item_factors, hp)
    bus = LocalQueue()
    keep = _record_filter(record)

    loss_trace, records, timings = [], [], []
    for t in range(1, epochs + 1):
        u_b, q_b = server.u_mat.copy(), server.q_mat.copy()

        tic = time.perf_counter()
        for client in clients:
            bus.send("fl", client.round(u_b, q_b))
        t_local = time.perf_counter() - tic

        tic = time.perf_counter()
        bus.send("fl_items", item_server.round(q_b))
        t_item = time.perf_counter() - tic

        bundles = bus.drain("fl")
        (item_bundle,) = bus.drain("fl_items")
        tic = time.perf_counter()
        u_sum, q_sum = server.aggregate(bundles, data.n)
        t_agg = time.perf_counter() - tic
        tic = time.perf_counter()
        server.update(u_sum, q_sum, item_bundle)
        t_upd = time.perf_counter() - tic

        if keep(t):
            records.append(EpochRecord(t, u_b, q_b, bundles,
                                       server.u_mat.copy(), server.q_mat.copy()))
        timings.append({"epoch": t, "local": t_local, "item_server": t_item,
                        "aggregation": t_agg, "server_update": t_upd})
        if compute_loss:
            snap = FactorModel(np.vstack([c.p for c in clients]), server.q_mat,
                               server.u_mat, item_server.v_mat)
            loss_trace.append(core.objective(data, snap, weights, hp.lam_side, hp.lam_reg))

    if epochs == 0:
        final = model0
    else:
        final = FactorModel(np.vstack([c.p for c in clients]), server.q_mat,
                            server.u_mat, item_server.v_mat)
    return FedRunResult(final, loss_trace, records, timings, seed)

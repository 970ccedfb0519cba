"""Dataset containers, MovieLens ingestion, feature engineering, splits, and
synthetic instance generators.

All datasets use dense 0-based user/item indices. Ratings are stored sparsely
as per-user index/value arrays; an unobserved rating is simply absent and is
materialized as 0 only where a formula needs it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RatingDataset",
    "RawMovieLens",
    "Split",
    "HeldOut",
    "ingest_movielens",
    "build_user_attrs",
    "build_item_feats",
    "assemble_dataset",
    "split",
    "subsample",
    "synth_instance",
    "movielens_like",
    "save_bundle",
    "load_bundle",
]

BUNDLE_VERSION = 1

# First zipcode digit -> US census region (0-3), unknown prefixes -> bucket 4.
_ZIP_REGION = {
    "0": 0, "1": 0,            # Northeast
    "2": 1, "3": 1, "7": 1,    # South
    "4": 2, "5": 2, "6": 2,    # Midwest
    "8": 3, "9": 3,            # West
}
N_REGIONS = 5
N_AGE_BINS = 7


class DataError(ValueError):
    """Malformed input data or an inconsistent dataset."""


@dataclass
class RatingDataset:
    """Sparse explicit ratings plus dense user-attribute and item-feature views.

    Attributes:
        item_idx: per-user int arrays of rated item indices (sorted ascending).
        values: per-user float arrays of ratings, aligned with ``item_idx``.
        user_attrs: (n, l_x) matrix of {0, 1} dummy attributes.
        item_feats: (m, l_y) real item feature matrix.
        r_max: maximum rating on the scale (MovieLens convention: 5).
    """

    item_idx: list
    values: list
    user_attrs: np.ndarray
    item_feats: np.ndarray
    r_max: float = 5.0

    @property
    def n(self) -> int:
        return self.user_attrs.shape[0]

    @property
    def m(self) -> int:
        return self.item_feats.shape[0]

    @property
    def l_x(self) -> int:
        return self.user_attrs.shape[1]

    @property
    def l_y(self) -> int:
        return self.item_feats.shape[1]

    @property
    def n_ratings(self) -> int:
        return int(sum(len(v) for v in self.values))

    def dense_row(self, user: int) -> np.ndarray:
        """Rating row for ``user`` with unobserved entries materialized as 0."""
        row = np.zeros(self.m)
        row[self.item_idx[user]] = self.values[user]
        return row

    def rated_mask(self, user: int) -> np.ndarray:
        mask = np.zeros(self.m, dtype=bool)
        mask[self.item_idx[user]] = True
        return mask

    def validate(self) -> None:
        if len(self.item_idx) != self.n or len(self.values) != self.n:
            raise DataError("per-user rating lists do not match user count")
        for i, (idx, val) in enumerate(zip(self.item_idx, self.values)):
            if len(idx) != len(val):
                raise DataError(f"user {i}: index/value length mismatch")
            if len(idx) == 0:
                raise DataError(f"user {i} has no ratings")
            if len(idx) and (idx.min() < 0 or idx.max() >= self.m):
                raise DataError(f"user {i}: item index out of range")
            # value arrays are aligned to indices by sorted order downstream
            if len(idx) > 1 and not np.all(np.diff(idx) > 0):
                raise DataError(f"user {i}: item indices must be strictly increasing")
            if np.any(val <= 0) or np.any(val > self.r_max):
                raise DataError(f"user {i}: rating outside (0, {self.r_max}]")
        attrs = np.asarray(self.user_attrs)
        if not np.isin(attrs, (0, 1)).all():
            raise DataError("user attributes must be 0/1 dummies")
        if not np.isfinite(self.item_feats).all():
            raise DataError("non-finite item features")


@dataclass
class RawMovieLens:
    """Parsed MovieLens-1M records before index remapping and feature building."""

    ratings: np.ndarray          # (N, 3): orig user id, orig movie id, rating
    user_ids: np.ndarray         # orig ids, sorted
    movie_ids: np.ndarray        # orig ids, sorted (movies with >=1 rating)
    user_gender: np.ndarray      # 'M'/'F' per user
    user_age: np.ndarray         # int per user
    user_occupation: np.ndarray  # int code per user
    user_zip: np.ndarray         # str per user
    genome: np.ndarray | None    # (len(movie_ids), n_tags) relevance, zero-filled
    n_tags: int = 0


def _parse_dat(path: Path, n_fields: int):
    rows = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != n_fields:
                raise DataError(f"{path}:{lineno}: expected {n_fields} '::' fields, got {len(parts)}")
            rows.append(parts)
    return rows


def ingest_movielens(root, genome_path=None) -> RawMovieLens:
    """Parse MovieLens-1M ``.dat`` files (``::`` delimiter) under ``root``.

    Duplicate (user, item) pairs keep the last occurrence with a warning.
    ``genome_path`` points to a tag-genome CSV (movieId,tagId,relevance);
    movies without genome rows get zero tag vectors.
    """
    root = Path(root)
    ratings_path = root / "ratings.dat"
    users_path = root / "users.dat"
    for p in (ratings_path, users_path):
        if not p.exists():
            raise FileNotFoundError(f"missing MovieLens file: {p}")

    seen = {}
    dupes = 0
    for parts in _parse_dat(ratings_path, 4):
        try:
            uid, mid, r = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise DataError(f"{ratings_path}: bad record {parts!r}") from exc
        if (uid, mid) in seen:
            dupes += 1
        seen[(uid, mid)] = r
    if dupes:
        warnings.warn(f"{dupes} duplicate (user, item) ratings; kept last occurrence")
    if seen:
        triples = np.array([(u, m, r) for (u, m), r in seen.items()], dtype=float)
    else:
        triples = np.zeros((0, 3))

    urec = {}
    for parts in _parse_dat(users_path, 5):
        urec[int(parts[0])] = (parts[1], int(parts[2]), int(parts[3]), parts[4])

    user_ids = np.unique(triples[:, 0]).astype(int) if len(triples) else np.zeros(0, dtype=int)
    movie_ids = np.unique(triples[:, 1]).astype(int) if len(triples) else np.zeros(0, dtype=int)
    missing = [u for u in user_ids if u not in urec]
    if missing:
        raise DataError(f"{len(missing)} rated users missing from users.dat (first: {missing[0]})")

    gender = np.array([urec[u][0] for u in user_ids])
    age = np.array([urec[u][1] for u in user_ids])
    occ = np.array([urec[u][2] for u in user_ids])
    zipc = np.array([urec[u][3] for u in user_ids])

    genome = None
    n_tags = 0
    if genome_path is not None:
        genome, n_tags = _read_genome(Path(genome_path), movie_ids)

    return RawMovieLens(triples, user_ids, movie_ids, gender, age, occ, zipc, genome, n_tags)


def _read_genome(path: Path, movie_ids: np.ndarray):
    if not path.exists():
        raise FileNotFoundError(f"missing tag-genome file: {path}")
    mid_to_row = {mid: i for i, mid in enumerate(movie_ids)}
    records = []
    max_tag = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.lower().startswith("movieid"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected movieId,tagId,relevance")
            mid, tag, rel = int(parts[0]), int(parts[1]), float(parts[2])
            max_tag = max(max_tag, tag)
            if mid in mid_to_row:
                records.append((mid_to_row[mid], tag - 1, rel))
    genome = np.zeros((len(movie_ids), max_tag))
    for row, tag, rel in records:
        genome[row, tag] = rel
    return genome, max_tag


def build_user_attrs(raw: RawMovieLens):
    """Dummy-encode users: 7 equal-width age bins, gender, occupation one-hot,
    US region from the zipcode's first digit.

    Returns the (n, l_x) 0/1 matrix and the list of column labels.
    """
    n = len(raw.user_ids)
    age = raw.user_age.astype(float)
    lo, hi = age.min(), age.max()
    width = (hi - lo) / N_AGE_BINS if hi > lo else 1.0
    age_bin = np.minimum(((age - lo) / width).astype(int), N_AGE_BINS - 1)

    occ_codes = np.unique(raw.user_occupation)
    occ_col = {c: j for j, c in enumerate(occ_codes)}

    blocks = []
    labels = []
    ab = np.zeros((n, N_AGE_BINS))
    ab[np.arange(n), age_bin] = 1
    blocks.append(ab)
    labels += [f"age_bin_{b}" for b in range(N_AGE_BINS)]

    gb = np.zeros((n, 2))
    gb[np.arange(n), (raw.user_gender == "F").astype(int)] = 1
    blocks.append(gb)
    labels += ["gender_M", "gender_F"]

    ob = np.zeros((n, len(occ_codes)))
    ob[np.arange(n), [occ_col[c] for c in raw.user_occupation]] = 1
    blocks.append(ob)
    labels += [f"occupation_{c}" for c in occ_codes]

    rb = np.zeros((n, N_REGIONS))
    region = np.array([_ZIP_REGION.get(str(z)[:1], N_REGIONS - 1) for z in raw.user_zip])
    rb[np.arange(n), region] = 1
    blocks.append(rb)
    labels += ["region_ne", "region_south", "region_midwest", "region_west", "region_other"]

    return np.hstack(blocks), labels


def build_item_feats(tag_matrix: np.ndarray, n_components: int = 20) -> np.ndarray:
    """Project a (m, n_tags) relevance matrix onto its top principal components.

    Columns are centered first. The sign of each component is fixed so the
    largest-magnitude loading is positive; directions beyond the matrix rank
    are zero-padded with a warning.
    """
    tags = np.asarray(tag_matrix, dtype=float)
    centered = tags - tags.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(centered.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int((s > tol).sum())
    k = min(n_components, rank)
    if k < n_components:
        warnings.warn(f"tag matrix has only {rank} non-degenerate directions; zero-padding to {n_components}")
    comps = np.zeros((tags.shape[0], n_components))
    for j in range(k):
        load = vt[j]
        sign = 1.0 if load[np.argmax(np.abs(load))] >= 0 else -1.0
        comps[:, j] = sign * u[:, j] * s[j]
    return comps


def assemble_dataset(raw: RawMovieLens, n_components: int = 20, r_max: float = 5.0) -> RatingDataset:
    """Remap ids densely and build the attribute/feature views from raw records."""
    uid_to_row = {u: i for i, u in enumerate(raw.user_ids)}
    mid_to_col = {mid: j for j, mid in enumerate(raw.movie_ids)}
    n = len(raw.user_ids)

    per_user = [[] for _ in range(n)]
    for u, mitem, r in raw.ratings:
        per_user[uid_to_row[int(u)]].append((mid_to_col[int(mitem)], r))
    item_idx, values = [], []
    for entries in per_user:
        entries.sort()
        item_idx.append(np.array([e[0] for e in entries], dtype=int))
        values.append(np.array([e[1] for e in entries]))

    attrs, _ = build_user_attrs(raw)
    if raw.genome is not None:
        feats = build_item_feats(raw.genome, n_components)
    else:
        feats = np.zeros((len(raw.movie_ids), n_components))
    data = RatingDataset(item_idx, values, attrs, feats, r_max=r_max)
    data.validate()
    return data


# ---------------------------------------------------------------------------
# Splits


@dataclass
class HeldOut:
    """Held-out ratings for evaluation, plus side info for cold entities.

    For ``existing`` the users/items index into the train dataset. For
    ``cold_item`` the item indices are local to ``item_feats`` (the held
    items); for ``cold_user`` the user indices are local to ``user_attrs``.
    """

    item_idx: list
    values: list
    user_attrs: np.ndarray | None = None
    item_feats: np.ndarray | None = None


@dataclass
class Split:
    scenario: str
    train: RatingDataset
    test: HeldOut
    seed: int


def split(data: RatingDataset, scenario: str, seed: int = 0) -> Split:
    """Produce disjoint train/test sets for one evaluation scenario.

    ``existing``: per-user 80/20 rating split. ``cold_item``: 10% of items
    held out entirely (no training ratings, features go to the test side).
    ``cold_user``: 10% of users held out entirely.
    """
    rng = np.random.default_rng(seed)
    if scenario == "existing":
        tr_idx, tr_val, te_idx, te_val = [], [], [], []
        for i in range(data.n):
            k = len(data.item_idx[i])
            if k < 2:
                warnings.warn(f"user {i} has <2 ratings; keeping all in train")
                tr_idx.append(data.item_idx[i].copy())
                tr_val.append(data.values[i].copy())
                te_idx.append(np.zeros(0, dtype=int))
                te_val.append(np.zeros(0))
                continue
            perm = rng.permutation(k)
            n_test = max(1, int(np.floor(0.2 * k)))
            test_pos, train_pos = np.sort(perm[:n_test]), np.sort(perm[n_test:])
            tr_idx.append(data.item_idx[i][train_pos])
            tr_val.append(data.values[i][train_pos])
            te_idx.append(data.item_idx[i][test_pos])
            te_val.append(data.values[i][test_pos])
        train = RatingDataset(tr_idx, tr_val, data.user_attrs.copy(), data.item_feats.copy(), data.r_max)
        return Split("existing", train, HeldOut(te_idx, te_val), seed)

    if scenario == "cold_item":
        n_held = max(1, int(round(0.1 * data.m)))
        held = np.sort(rng.choice(data.m, size=n_held, replace=False))
        held_set = set(held.tolist())
        keep = np.array([j for j in range(data.m) if j not in held_set], dtype=int)
        new_col = -np.ones(data.m, dtype=int)
        new_col[keep] = np.arange(len(keep))
        held_col = -np.ones(data.m, dtype=int)
        held_col[held] = np.arange(n_held)

        tr_idx, tr_val, te_idx, te_val, kept_users = [], [], [], [], []
        for i in range(data.n):
            mask = np.isin(data.item_idx[i], keep)
            if not mask.any():
                warnings.warn(f"user {i} rated only held-out items; dropped from train")
                continue
            kept_users.append(i)
            tr_idx.append(new_col[data.item_idx[i][mask]])
            tr_val.append(data.values[i][mask])
            te_idx.append(held_col[data.item_idx[i][~mask]])
            te_val.append(data.values[i][~mask])
        train = RatingDataset(
            tr_idx, tr_val, data.user_attrs[kept_users], data.item_feats[keep], data.r_max
        )
        test = HeldOut(te_idx, te_val, item_feats=data.item_feats[held])
        return Split("cold_item", train, test, seed)

    if scenario == "cold_user":
        n_held = max(1, int(round(0.1 * data.n)))
        held = np.sort(rng.choice(data.n, size=n_held, replace=False))
        keep = np.setdiff1d(np.arange(data.n), held)
        train = RatingDataset(
            [data.item_idx[i].copy() for i in keep],
            [data.values[i].copy() for i in keep],
            data.user_attrs[keep],
            data.item_feats.copy(),
            data.r_max,
        )
        test = HeldOut(
            [data.item_idx[i].copy() for i in held],
            [data.values[i].copy() for i in held],
            user_attrs=data.user_attrs[held],
        )
        return Split("cold_user", train, test, seed)

    raise ValueError(f"unknown scenario {scenario!r}")


def subsample(data: RatingDataset, n_users: int, n_items: int, seed: int = 0,
              min_ratings: int = 10) -> RatingDataset:
    """Seeded desk-scale subsample: the most-rated items and a random draw of
    users holding at least ``min_ratings`` ratings within them."""
    counts = np.zeros(data.m, dtype=int)
    for idx in data.item_idx:
        counts[idx] += 1
    top_items = np.sort(np.argsort(-counts, kind="stable")[:n_items])
    new_col = -np.ones(data.m, dtype=int)
    new_col[top_items] = np.arange(len(top_items))

    eligible, per_user = [], {}
    for i in range(data.n):
        mask = np.isin(data.item_idx[i], top_items)
        if mask.sum() >= min_ratings:
            eligible.append(i)
            per_user[i] = (new_col[data.item_idx[i][mask]], data.values[i][mask])
    if len(eligible) < n_users:
        raise DataError(f"only {len(eligible)} users have >= {min_ratings} ratings in the item subset")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(np.array(eligible), size=n_users, replace=False))
    return RatingDataset(
        [per_user[i][0] for i in chosen],
        [per_user[i][1] for i in chosen],
        data.user_attrs[chosen],
        data.item_feats[top_items],
        data.r_max,
    )


# ---------------------------------------------------------------------------
# Synthetic instances


def synth_instance(n: int, m: int, l_x: int, l_y: int, k_true: int, density: float,
                   seed: int = 0, r_max: float = 5.0):
    """Desk-scale instance with known generating factors.

    Ratings are the clipped, rounded low-rank product; attributes threshold
    the user-factor/attribute-factor product; item features are the exact
    low-rank product. Returns (dataset, truth dict).
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    p_true = rng.uniform(0.35, 1.15, size=(n, k_true))
    q_true = rng.uniform(0.35, 1.15, size=(m, k_true))
    u_true = rng.normal(0.0, 1.0, size=(l_x, k_true))
    v_true = rng.uniform(-0.5, 0.5, size=(l_y, k_true))

    full = p_true @ q_true.T if k_true else np.zeros((n, m))
    ratings = np.clip(np.floor(full + 0.5), 1.0, r_max)

    item_idx, values = [], []
    for i in range(n):
        mask = rng.random(m) < density
        if mask.sum() < 2:
            mask[rng.choice(m, size=2, replace=False)] = True
        idx = np.flatnonzero(mask)
        item_idx.append(idx)
        values.append(ratings[i, idx])

    scores = p_true @ u_true.T if k_true else np.zeros((n, l_x))
    thresh = np.median(scores, axis=0, keepdims=True)
    attrs = (scores > thresh).astype(float)
    feats = q_true @ v_true.T if k_true else np.zeros((m, l_y))

    data = RatingDataset(item_idx, values, attrs, feats, r_max=r_max)
    truth = {"P": p_true, "Q": q_true, "U": u_true, "V": v_true, "ratings": ratings}
    return data, truth


def movielens_like(n_users: int, n_items: int, seed: int = 0, l_y: int = 20,
                   min_ratings: int = 20, r_max: float = 5.0) -> RatingDataset:
    """Stand-in dataset with MovieLens-1M-shaped structure: integer 1-5 ratings
    from a noisy low-rank model, power-law item popularity, >= ``min_ratings``
    ratings per user, one-hot attribute groups, and PCA-reduced tag features.

    Used by desk-scale experiments when the real dataset files are absent.
    """
    rng = np.random.default_rng(seed)
    k = 6
    p_true = rng.uniform(0.35, 1.15, size=(n_users, k))
    q_true = rng.uniform(0.35, 1.15, size=(n_items, k))

    popularity = (np.arange(n_items) + 1.0) ** -0.8
    popularity /= popularity.sum()

    cap = max(min_ratings + 5, n_items // 2)
    item_idx, values = [], []
    for i in range(n_users):
        size = int(np.clip(rng.lognormal(np.log(min_ratings * 2), 0.5), min_ratings, cap))
        idx = np.sort(rng.choice(n_items, size=size, replace=False, p=popularity))
        raw = p_true[i] @ q_true[idx].T + rng.normal(0.0, 0.35, size=size)
        values.append(np.clip(np.floor(raw + 0.5), 1.0, r_max))
        item_idx.append(idx)

    # One-hot groups driven by the user factors so cold-start has signal.
    def group(dirs, bins):
        score = p_true @ dirs + rng.normal(0.0, 0.2, size=n_users)
        edges = np.quantile(score, np.linspace(0, 1, bins + 1)[1:-1])
        return np.digitize(score, edges)

    blocks = []
    for bins in (N_AGE_BINS, 2, 8, N_REGIONS):
        g = group(rng.normal(size=k), bins)
        onehot = np.zeros((n_users, bins))
        onehot[np.arange(n_users), g] = 1
        blocks.append(onehot)
    attrs = np.hstack(blocks)

    n_tags = max(2 * l_y, 40)
    tags = np.maximum(q_true @ rng.normal(size=(k, n_tags)) + rng.normal(0.0, 0.3, size=(n_items, n_tags)), 0.0)
    feats = build_item_feats(tags, n_components=l_y)

    data = RatingDataset(item_idx, values, attrs, feats, r_max=r_max)
    data.validate()
    return data


# ---------------------------------------------------------------------------
# Bundle serialization


def save_bundle(path, data: RatingDataset, user_ids=None, item_ids=None) -> str:
    """Write a dataset to a self-describing ``.npz`` bundle; returns its sha256."""
    path = Path(path)
    users = np.concatenate([np.full(len(idx), i, dtype=int) for i, idx in enumerate(data.item_idx)])
    items = np.concatenate(data.item_idx).astype(int)
    vals = np.concatenate(data.values)
    meta = {"version": BUNDLE_VERSION, "r_max": data.r_max, "n": data.n, "m": data.m}
    np.savez_compressed(
        path,
        meta=json.dumps(meta),
        rating_user=users,
        rating_item=items,
        rating_value=vals,
        user_attrs=data.user_attrs,
        item_feats=data.item_feats,
        user_ids=np.asarray(user_ids if user_ids is not None else np.arange(data.n)),
        item_ids=np.asarray(item_ids if item_ids is not None else np.arange(data.m)),
    )
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_bundle(path) -> RatingDataset:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["version"] != BUNDLE_VERSION:
            raise DataError(f"unsupported bundle version {meta['version']}")
        n = meta["n"]
        item_idx = [[] for _ in range(n)]
        values = [[] for _ in range(n)]
        for u, j, r in zip(z["rating_user"], z["rating_item"], z["rating_value"]):
            item_idx[int(u)].append(int(j))
            values[int(u)].append(float(r))
        order = [np.argsort(np.array(idx)) for idx in item_idx]
        data = RatingDataset(
            [np.array(idx, dtype=int)[o] for idx, o in zip(item_idx, order)],
            [np.array(val)[o] for val, o in zip(values, order)],
            z["user_attrs"],
            z["item_feats"],
            r_max=meta["r_max"],
        )
    data.validate()
    return data

"""Implicit-feedback data handling.

Covers loading tab-separated interaction files, iterative 5-core filtering,
per-user train/val/test splitting, pairwise/generic triple sampling, item
feature matrices with their mean vectors, and a synthetic generator whose
per-modality signal fractions control how informative each modality is.
"""

import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeding import substream

DEFAULT_RATIOS = (0.8, 0.1, 0.1)


def corrected_mean(matrix: np.ndarray) -> np.ndarray:
    """Column mean with a compensation pass.

    The second pass removes the rounding of the naive mean, so the mean of a
    matrix whose rows are all equal to some vector returns that vector
    bitwise. Plain ``matrix.mean(0)`` does not have that property.
    """
    m = matrix.mean(axis=0)
    return m + (matrix - m).mean(axis=0)


@dataclass
class ModalityFeatures:
    """Per-item feature matrix for one content modality."""

    modality_id: str
    matrix: np.ndarray
    mean_item_vector: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.size == 0:
            raise DataError(f"feature matrix for '{self.modality_id}' must be a nonempty 2-D array")
        if not np.isfinite(self.matrix).all():
            raise DataError(f"feature matrix for '{self.modality_id}' contains non-finite values")
        if self.mean_item_vector is None:
            self.mean_item_vector = compute_feature_means(self.matrix)

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def compute_feature_means(matrix: np.ndarray) -> np.ndarray:
    """Arithmetic column mean of an item feature matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        raise DataError("cannot take the mean of an empty feature matrix")
    return corrected_mean(matrix)


@dataclass
class InteractionData:
    """User-item implicit feedback with per-user train/val/test splits."""

    n_users: int
    n_items: int
    train: list
    val: list
    test: list
    user_index_map: dict
    item_index_map: dict

    def __post_init__(self):
        self._interaction_sets = None

    @property
    def n_train_interactions(self) -> int:
        return int(sum(len(t) for t in self.train))

    def split_lists(self, split: str) -> list:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split '{split}'")
        return getattr(self, split)

    def interaction_sets(self) -> list:
        """All items of each user (train, val and test), as frozensets."""
        if self._interaction_sets is None:
            self._interaction_sets = [
                frozenset(np.concatenate([self.train[u], self.val[u], self.test[u]]).tolist())
                for u in range(self.n_users)
            ]
        return self._interaction_sets


@dataclass
class TripleBatch:
    """A batch of (user, item, item) index triples.

    For kind="bpr" the columns are (user, positive, sampled negative). For
    kind="generic" both item columns are unconstrained uniform draws.
    """

    users: np.ndarray
    items_i: np.ndarray
    items_j: np.ndarray
    kind: str = "bpr"

    def __len__(self) -> int:
        return len(self.users)


def load_interactions(path) -> list:
    """Read "user_id<TAB>item_id" lines, deduplicated, in file order."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read interactions file {path}: {exc}") from exc
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DataError(f"{path}: line {lineno}: expected 'user_id<TAB>item_id', got {line!r}")
        pairs[(parts[0], parts[1])] = None
    if not pairs:
        raise DataError(f"{path}: empty interactions file")
    return list(pairs)


def five_core_filter(raw: list, min_core: int = 5) -> list:
    """Iteratively drop users/items with fewer than min_core interactions.

    Stops at the fixpoint, which is the unique maximal subgraph where every
    remaining user and item keeps at least min_core interactions.
    """
    if not raw:
        raise DataError("cannot core-filter an empty interaction list")
    pairs = list(dict.fromkeys(raw))
    while True:
        user_deg = Counter(u for u, _ in pairs)
        item_deg = Counter(i for _, i in pairs)
        kept = [(u, i) for u, i in pairs if user_deg[u] >= min_core and item_deg[i] >= min_core]
        if len(kept) == len(pairs):
            break
        pairs = kept
    if not pairs:
        raise DataError(f"dataset vanishes under {min_core}-core filtering")
    return pairs


def _split_user_items(items: np.ndarray, rng: np.random.Generator, ratios) -> tuple:
    """Shuffle one user's items and cut train/val/test at the ratio boundaries.

    Cut points are floor(r1*n) and floor((r1+r2)*n). If the val or test part
    comes out empty, one item is moved from the end of train, so every user
    has at least one item in each part (needs n >= 3).
    """
    n = len(items)
    order = rng.permutation(n)
    shuffled = [items[o] for o in order]
    a = math.floor(ratios[0] * n)
    b = math.floor((ratios[0] + ratios[1]) * n)
    train, val, test = shuffled[:a], shuffled[a:b], shuffled[b:]
    if not test:
        test = [train.pop()]
    if not val:
        val = [train.pop()]
    if not train:
        raise DataError(f"user with {n} interactions cannot populate three splits")
    return (
        np.array(sorted(train), dtype=np.int64),
        np.array(sorted(val), dtype=np.int64),
        np.array(sorted(test), dtype=np.int64),
    )


def split(interactions: list, ratios=DEFAULT_RATIOS, seed: int = 0) -> InteractionData:
    """Per-user seeded split of raw (user_id, item_id) pairs.

    Ids are mapped to dense indices in first-appearance order; the maps are
    part of the result so feature rows can be aligned later.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    user_map, item_map = {}, {}
    per_user = []
    for u_ext, i_ext in interactions:
        if u_ext not in user_map:
            user_map[u_ext] = len(user_map)
            per_user.append([])
        if i_ext not in item_map:
            item_map[i_ext] = len(item_map)
        per_user[user_map[u_ext]].append(item_map[i_ext])
    rng = substream(seed, "split")
    train, val, test = [], [], []
    for u_ext, u in user_map.items():
        items = np.array(per_user[u], dtype=np.int64)
        if len(items) < 3:
            raise DataError(f"user '{u_ext}' has {len(items)} interactions, need >= 3 to split")
        tr, va, te = _split_user_items(items, rng, ratios)
        train.append(tr)
        val.append(va)
        test.append(te)
    return InteractionData(
        n_users=len(user_map),
        n_items=len(item_map),
        train=train,
        val=val,
        test=test,
        user_index_map=user_map,
        item_index_map=item_map,
    )


def sample_bpr_batch(
    data: InteractionData, batch_size: int, rng: np.random.Generator, max_attempts: int = 1000
) -> TripleBatch:
    """Sample (u, i, j) with i from u's train items and j unseen by u.

    Negatives are rejection-sampled uniformly over all items until they fall
    outside the user's full interaction set (train, val and test, so held-out
    positives never leak in as training negatives).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    users = rng.integers(data.n_users, size=batch_size)
    pos = np.empty(batch_size, dtype=np.int64)
    for t, u in enumerate(users):
        items = data.train[u]
        pos[t] = items[rng.integers(items.size)]
    seen = data.interaction_sets()
    neg = rng.integers(data.n_items, size=batch_size)
    pending = np.array([neg[t] in seen[u] for t, u in enumerate(users)])
    attempts = 1
    while pending.any():
        if attempts >= max_attempts:
            bad = users[np.flatnonzero(pending)[0]]
            raise DataError(f"negative sampling for user index {bad} exceeded {max_attempts} attempts")
        idx = np.flatnonzero(pending)
        neg[idx] = rng.integers(data.n_items, size=idx.size)
        for t in idx:
            pending[t] = neg[t] in seen[users[t]]
        attempts += 1
    return TripleBatch(users=users, items_i=pos, items_j=neg, kind="bpr")


def sample_generic_batch(data: InteractionData, batch_size: int, rng: np.random.Generator) -> TripleBatch:
    """Sample (u, j, k): user uniform, both items uniform, j != k."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if data.n_items < 2:
        raise DataError("generic sampling needs at least 2 items")
    users = rng.integers(data.n_users, size=batch_size)
    first = rng.integers(data.n_items, size=batch_size)
    second = rng.integers(data.n_items, size=batch_size)
    dup = second == first
    while dup.any():
        idx = np.flatnonzero(dup)
        second[idx] = rng.integers(data.n_items, size=idx.size)
        dup[idx] = second[idx] == first[idx]
    return TripleBatch(users=users, items_i=first, items_j=second, kind="generic")


@dataclass
class SynthConfig:
    """Knobs of the synthetic generator.

    signal_fractions maps each modality name to the share of its features
    explained by the item latents (1.0 fully informative, 0.0 pure noise);
    the rest is gaussian noise scaled by noise_scale.
    """

    n_users: int
    n_items: int
    latent_dim: int
    signal_fractions: dict
    noise_scale: float
    interactions_per_user: int
    seed: int
    feature_dims: dict = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.feature_dims is None:
            self.feature_dims = {m: self.latent_dim for m in self.signal_fractions}

    def validate(self):
        for name, value in (("n_users", self.n_users), ("n_items", self.n_items),
                            ("latent_dim", self.latent_dim),
                            ("interactions_per_user", self.interactions_per_user)):
            if int(value) < 1:
                raise DataError(f"{name} must be positive, got {value}")
        if not self.signal_fractions:
            raise DataError("at least one modality is required")
        for m, f in self.signal_fractions.items():
            if not 0.0 <= float(f) <= 1.0:
                raise DataError(f"signal_fraction for '{m}' must be in [0, 1], got {f}")
        if float(self.noise_scale) < 0:
            raise DataError(f"noise_scale must be nonnegative, got {self.noise_scale}")
        if self.interactions_per_user >= self.n_items:
            raise DataError("interactions_per_user must be smaller than n_items")
        for m, d in self.feature_dims.items():
            if int(d) < 1:
                raise DataError(f"feature dim for '{m}' must be positive, got {d}")


def synth_generate(config: SynthConfig) -> tuple:
    """Generate an interaction dataset plus per-modality feature matrices.

    Users interact with their top-scoring items under a latent space; each
    modality observes a linear image of the item latents mixed with noise
    according to its signal fraction. With several modalities, half of the
    latent coordinates are visible to all of them and the rest are divided
    into per-modality private blocks, so every modality carries signal the
    others cannot supply. Deterministic under the seed.
    """
    config.validate()
    seed = config.seed
    z_users = substream(seed, "synth/latent-users").standard_normal((config.n_users, config.latent_dim))
    z_items = substream(seed, "synth/latent-items").standard_normal((config.n_items, config.latent_dim))
    affinity = z_users @ z_items.T
    top = np.argsort(-affinity, axis=1, kind="stable")[:, : config.interactions_per_user]

    split_rng = substream(seed, "synth/split")
    train, val, test = [], [], []
    for u in range(config.n_users):
        tr, va, te = _split_user_items(np.sort(top[u]).astype(np.int64), split_rng, DEFAULT_RATIOS)
        train.append(tr)
        val.append(va)
        test.append(te)
    data = InteractionData(
        n_users=config.n_users,
        n_items=config.n_items,
        train=train,
        val=val,
        test=test,
        user_index_map={f"u{n}": n for n in range(config.n_users)},
        item_index_map={f"i{n}": n for n in range(config.n_items)},
    )

    mods = sorted(config.signal_fractions)
    n_shared = (config.latent_dim + 1) // 2 if len(mods) > 1 else config.latent_dim
    visible = {m: list(range(n_shared)) for m in mods}
    for offset, coord in enumerate(range(n_shared, config.latent_dim)):
        visible[mods[offset % len(mods)]].append(coord)

    features = {}
    for m in mods:
        d_m = int(config.feature_dims.get(m, config.latent_dim))
        mixing = substream(seed, f"synth/map/{m}").standard_normal((len(visible[m]), d_m))
        noise = substream(seed, f"synth/noise/{m}").standard_normal((config.n_items, d_m))
        signal = z_items[:, visible[m]] @ mixing
        matrix = float(config.signal_fractions[m]) * signal + float(config.noise_scale) * noise
        features[m] = ModalityFeatures(modality_id=m, matrix=matrix)
    return data, features


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------
#
# interactions file : one "user_id<TAB>item_id" per line (UTF-8)
# feature file      : first line "n_items d_m", then n_items rows of d_m
#                     space-separated decimal floats; row r is item index r
# index map sidecar : one "external_id<TAB>dense_index" per line


def write_interactions(path, pairs: list):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")


def write_index_map(path, index_map: dict):
    ordered = sorted(index_map.items(), key=lambda kv: kv[1])
    with open(path, "w", encoding="utf-8") as fh:
        for ext, dense in ordered:
            fh.write(f"{ext}\t{dense}\n")


def load_index_map(path) -> dict:
    index_map = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 'external_id<TAB>dense_index'")
            index_map[parts[0]] = int(parts[1])
    return index_map


def write_feature_file(path, matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_feature_file(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty feature file")
    head = lines[0].split()
    if len(head) != 2:
        raise DataError(f"{path}: line 1: expected 'n_items d_m'")
    n_items, dim = int(head[0]), int(head[1])
    if len(lines) - 1 != n_items:
        raise DataError(f"{path}: declared {n_items} rows, found {len(lines) - 1}")
    matrix = np.empty((n_items, dim), dtype=np.float64)
    for r, line in enumerate(lines[1:]):
        values = line.split()
        if len(values) != dim:
            raise DataError(f"{path}: line {r + 2}: expected {dim} values, found {len(values)}")
        matrix[r] = [float(v) for v in values]
    return matrix


def load_modality_features(paths: dict, n_items: int = None) -> dict:
    """Load one feature file per modality and wrap them with their means."""
    features = {}
    for m in sorted(paths):
        matrix = load_feature_file(paths[m])
        if n_items is not None and matrix.shape[0] != n_items:
            raise DataError(
                f"feature file for '{m}' has {matrix.shape[0]} rows, dataset has {n_items} items"
            )
        features[m] = ModalityFeatures(modality_id=m, matrix=matrix)
    return features


def _split_pairs(data: InteractionData, split_name: str) -> list:
    users = sorted(data.user_index_map.items(), key=lambda kv: kv[1])
    items = sorted(data.item_index_map.items(), key=lambda kv: kv[1])
    item_ext = [ext for ext, _ in items]
    pairs = []
    for u_ext, u in users:
        for i in data.split_lists(split_name)[u]:
            pairs.append((u_ext, item_ext[i]))
    return pairs


def write_dataset_dir(out_dir, data: InteractionData):
    """Materialize split files and index maps under a directory."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("train", "val", "test"):
        write_interactions(os.path.join(out_dir, f"{name}.tsv"), _split_pairs(data, name))
    write_index_map(os.path.join(out_dir, "user_map.tsv"), data.user_index_map)
    write_index_map(os.path.join(out_dir, "item_map.tsv"), data.item_index_map)


def load_dataset_dir(path) -> InteractionData:
    """Load a directory produced by write_dataset_dir."""
    user_map = load_index_map(os.path.join(path, "user_map.tsv"))
    item_map = load_index_map(os.path.join(path, "item_map.tsv"))
    n_users, n_items = len(user_map), len(item_map)
    splits = {}
    for name in ("train", "val", "test"):
        per_user = [[] for _ in range(n_users)]
        for u_ext, i_ext in load_interactions(os.path.join(path, f"{name}.tsv")):
            try:
                per_user[user_map[u_ext]].append(item_map[i_ext])
            except KeyError as exc:
                raise DataError(f"{name}.tsv references unknown id {exc}") from exc
        splits[name] = [np.array(sorted(lst), dtype=np.int64) for lst in per_user]
    return InteractionData(
        n_users=n_users,
        n_items=n_items,
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        user_index_map=user_map,
        item_index_map=item_map,
    )

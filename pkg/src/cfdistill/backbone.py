"""Late-fusion scoring backbone.

The model scores a user-item pair as

    score(u, i) = x_u . x_i  +  sum_m  p_u^m . (W_m e_i^m)

with ID embeddings x, per-modality user preferences p^m, and a projection
W_m mapping item features into the embedding space. Masking a modality
replaces its item feature with the dataset mean vector and the user
preference with the mean preference over users, which keeps the input
in-distribution but uninformative. Gradients are analytic (no autodiff) and
optimization is plain Adam.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import corrected_mean
from .errors import ConfigError, DataError, TrainingDiverged
from .seeding import substream


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2 or min(shape) < 1:
        raise ConfigError(f"xavier init needs a 2-D shape with positive dims, got {shape}")
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    """All trainable tensors, float64 throughout."""

    user_embed: np.ndarray          # (n_users, d)
    item_embed: np.ndarray          # (n_items, d)
    pref: dict                      # modality -> (n_users, d)
    proj: dict                      # modality -> (d, d_m)

    def __post_init__(self):
        # the modality set is fixed for the lifetime of the params
        self._modalities = sorted(self.pref)

    @property
    def n_users(self) -> int:
        return self.user_embed.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_embed.shape[0]

    @property
    def dim(self) -> int:
        return self.user_embed.shape[1]

    @property
    def modalities(self) -> list:
        return self._modalities

    def tensors(self) -> list:
        """(name, array) pairs in the canonical (checkpoint) order."""
        out = [("user_embed", self.user_embed), ("item_embed", self.item_embed)]
        for m in self.modalities:
            out.append((f"pref:{m}", self.pref[m]))
            out.append((f"proj:{m}", self.proj[m]))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            user_embed=self.user_embed.copy(),
            item_embed=self.item_embed.copy(),
            pref={m: a.copy() for m, a in self.pref.items()},
            proj={m: a.copy() for m, a in self.proj.items()},
        )

    def check_finite(self, context: str = ""):
        for name, arr in self.tensors():
            if not np.isfinite(arr).all():
                raise TrainingDiverged(f"non-finite values in parameter '{name}'{context}")


def init_params(n_users: int, n_items: int, dim: int, feature_dims: dict, seed: int) -> ModelParams:
    """Xavier-initialized parameters; draw order is the canonical tensor order."""
    if min(n_users, n_items, dim) < 1:
        raise ConfigError("n_users, n_items and dim must be positive")
    rng = substream(seed, "init")
    user_embed = xavier_uniform((n_users, dim), rng)
    item_embed = xavier_uniform((n_items, dim), rng)
    pref, proj = {}, {}
    for m in sorted(feature_dims):
        pref[m] = xavier_uniform((n_users, dim), rng)
        proj[m] = xavier_uniform((dim, int(feature_dims[m])), rng)
    return ModelParams(user_embed=user_embed, item_embed=item_embed, pref=pref, proj=proj)


def _as_keep(params: ModelParams, keep) -> frozenset:
    if keep is None:
        return frozenset(params.modalities)
    keep = frozenset(keep)
    unknown = keep - set(params.modalities)
    if unknown:
        raise ConfigError(f"unknown modalities in keep set: {sorted(unknown)}")
    return keep


def user_pref_means(params: ModelParams, modalities=None) -> dict:
    """Mean preference vector over users, recomputed from current values."""
    if modalities is None:
        modalities = params.modalities
    return {m: corrected_mean(params.pref[m]) for m in modalities}


def masked_offset(params: ModelParams, features: dict, keep) -> float:
    """Constant score contribution of the ablated modalities.

    Every masked modality adds mean_pref . (W mean_feature), the same value
    for all user-item pairs, so it is computed once per forward call.
    """
    masked = [m for m in params.modalities if m not in keep]
    means = user_pref_means(params, masked)
    return float(sum(means[m] @ (params.proj[m] @ features[m].mean_item_vector) for m in masked))


def _side_scores(params, features, users, items, keep, offset) -> np.ndarray:
    """Scores of (users[t], items[t]) pairs under the given modality mask."""
    s = np.einsum("bd,bd->b", params.user_embed[users], params.item_embed[items])
    for m in params.modalities:
        if m in keep:
            projected = features[m].matrix[items] @ params.proj[m].T
            s = s + np.einsum("bd,bd->b", params.pref[m][users], projected)
    return s + offset if offset else s


def _check_indices(params, u, i):
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"(u={u}, i={i}) out of range for {params.n_users} users / {params.n_items} items")


def score_full(params: ModelParams, features: dict, u: int, i: int) -> float:
    """Full-input score of one user-item pair."""
    _check_indices(params, u, i)
    keep = frozenset(params.modalities)
    return float(_side_scores(params, features, np.array([u]), np.array([i]), keep, 0.0)[0])


def score_masked(params: ModelParams, features: dict, u: int, i: int, keep) -> float:
    """Score with every modality outside `keep` ablated by its mean vectors."""
    _check_indices(params, u, i)
    keep = _as_keep(params, keep)
    offset = masked_offset(params, features, keep)
    return float(_side_scores(params, features, np.array([u]), np.array([i]), keep, offset)[0])


def forward_margins(params: ModelParams, features: dict, batch, keep=None) -> np.ndarray:
    """Pairwise margins score(u, i) - score(u, j) under a modality mask."""
    keep = _as_keep(params, keep)
    offset = masked_offset(params, features, keep) if len(keep) < len(params.modalities) else 0.0
    xu = params.user_embed[batch.users]
    si = np.einsum("bd,bd->b", xu, params.item_embed[batch.items_i])
    sj = np.einsum("bd,bd->b", xu, params.item_embed[batch.items_j])
    for m in params.modalities:
        if m in keep:
            pu = params.pref[m][batch.users]
            si = si + np.einsum("bd,bd->b", pu, features[m].matrix[batch.items_i] @ params.proj[m].T)
            sj = sj + np.einsum("bd,bd->b", pu, features[m].matrix[batch.items_j] @ params.proj[m].T)
    if offset:
        si = si + offset
        sj = sj + offset
    return si - sj


@dataclass
class BatchMargins:
    """Margins of one batch plus their per-modality decomposition.

    delta_full comes from the score route; id_margin and modality_scores
    come from the decomposition route, so delta_full = id_margin + sum of
    modality_scores only up to float rounding. delta_masked[m] is the margin
    with modality m kept and all others ablated.
    """

    delta_full: np.ndarray
    id_margin: np.ndarray
    modality_scores: dict
    delta_masked: dict


def forward_batch(params: ModelParams, features: dict, batch) -> BatchMargins:
    """Full forward of a batch with the per-modality margin decomposition."""
    delta_full = forward_margins(params, features, batch, None)
    xu = params.user_embed[batch.users]
    id_margin = np.einsum(
        "bd,bd->b", xu, params.item_embed[batch.items_i] - params.item_embed[batch.items_j]
    )
    modality_scores = {}
    delta_masked = {}
    for m in params.modalities:
        diff = features[m].matrix[batch.items_i] - features[m].matrix[batch.items_j]
        modality_scores[m] = np.einsum("bd,bd->b", params.pref[m][batch.users], diff @ params.proj[m].T)
        delta_masked[m] = forward_margins(params, features, batch, {m})
    return BatchMargins(
        delta_full=delta_full,
        id_margin=id_margin,
        modality_scores=modality_scores,
        delta_masked=delta_masked,
    )


@dataclass
class Gradients:
    """Gradient accumulators matching ModelParams tensor for tensor."""

    user_embed: np.ndarray
    item_embed: np.ndarray
    pref: dict
    proj: dict

    @staticmethod
    def zeros_like(params: ModelParams) -> "Gradients":
        return Gradients(
            user_embed=np.zeros_like(params.user_embed),
            item_embed=np.zeros_like(params.item_embed),
            pref={m: np.zeros_like(a) for m, a in params.pref.items()},
            proj={m: np.zeros_like(a) for m, a in params.proj.items()},
        )

    def tensors(self) -> list:
        out = [("user_embed", self.user_embed), ("item_embed", self.item_embed)]
        for m in sorted(self.pref):
            out.append((f"pref:{m}", self.pref[m]))
            out.append((f"proj:{m}", self.proj[m]))
        return out


def backward(params: ModelParams, features: dict, batch, pass_grads, out: Gradients = None) -> Gradients:
    """Accumulate analytic margin gradients into parameter gradients.

    pass_grads is a sequence of (keep, dloss_dmargin) pairs, one entry per
    forward variant of this batch. For each triple with weight g:

        d margin / d x_u    = x_i - x_j
        d margin / d x_i    = x_u          d margin / d x_j = -x_u
        d margin / d p_u^m  = W_m (e_i^m - e_j^m)        (m in keep)
        d margin / d W_m    = p_u^m outer (e_i^m - e_j^m) (m in keep)

    Mean vectors used for ablation are constants, so masked-out modalities
    receive no gradient.
    """
    grads = Gradients.zeros_like(params) if out is None else out
    xu = params.user_embed[batch.users]
    xi = params.item_embed[batch.items_i]
    xj = params.item_embed[batch.items_j]
    for keep, w in pass_grads:
        keep = _as_keep(params, keep)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(batch),):
            raise ValueError(f"margin gradient shape {w.shape} does not match batch size {len(batch)}")
        wcol = w[:, None]
        np.add.at(grads.user_embed, batch.users, wcol * (xi - xj))
        np.add.at(grads.item_embed, batch.items_i, wcol * xu)
        np.add.at(grads.item_embed, batch.items_j, -wcol * xu)
        for m in params.modalities:
            if m not in keep:
                continue
            diff = features[m].matrix[batch.items_i] - features[m].matrix[batch.items_j]
            np.add.at(grads.pref[m], batch.users, wcol * (diff @ params.proj[m].T))
            grads.proj[m] += (params.pref[m][batch.users] * wcol).T @ diff
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: ModelParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = {name: np.zeros_like(arr) for name, arr in params.tensors()}
        return AdamState(
            m={k: z.copy() for k, z in zeros.items()},
            v=zeros,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, lr: float) -> ModelParams:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    grad_map = dict(grads.tensors())
    for name, arr in params.tensors():
        g = grad_map[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {arr.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for tensor '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.check_finite(context=f" after optimizer step {t}")
    return params


def gradient_bridge(params: ModelParams, features: dict, triple, h: float = 1e-6) -> dict:
    """Shared sensitivity of the pairwise loss to each modality's margin share.

    For L = -ln sigmoid(margin) the magnitude of dL/dS^m is
    1 / (1 + exp(margin)) for every modality m, a single scalar that couples
    their updates. Returns per modality a (closed_form, finite_difference)
    pair, the finite difference being the centered derivative of L when that
    modality's share of the margin is perturbed (sign flipped to match the
    magnitude convention).
    """
    margins = forward_margins(params, features, triple, None)
    if margins.shape != (1,):
        raise ValueError("gradient_bridge expects a single triple")
    delta = float(margins[0])
    if delta >= 0:
        e = np.exp(-delta)
        closed = float(e / (1.0 + e))
    else:
        closed = float(1.0 / (1.0 + np.exp(delta)))

    def loss(x):
        # softplus(-x), stable on both tails
        return float(np.maximum(-x, 0.0) + np.log1p(np.exp(-abs(x))))

    out = {}
    for m in params.modalities:
        fd = -(loss(delta + h) - loss(delta - h)) / (2.0 * h)
        out[m] = (closed, fd)
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line (sorted keys), then the tensors as
# little-endian float64 blobs concatenated in header-declared order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "cfdistill-checkpoint"


def save_checkpoint(path, params: ModelParams, meta: dict = None):
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "n_users": params.n_users,
        "n_items": params.n_items,
        "dim": params.dim,
        "modalities": params.modalities,
        "feature_dims": {m: params.proj[m].shape[1] for m in params.modalities},
        "meta": meta or {},
        "tensors": [[name, list(arr.shape)] for name, arr in params.tensors()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in params.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Read a checkpoint, returning (params, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a checkpoint file: {exc}") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: unexpected checkpoint format {header.get('format')!r}")
    expected = sum(int(np.prod(shape)) * 8 for _, shape in header["tensors"])
    if expected != len(blob):
        raise DataError(f"{path}: tensor payload is {len(blob)} bytes, header declares {expected}")
    arrays = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += count * 8
    params = ModelParams(
        user_embed=arrays["user_embed"],
        item_embed=arrays["item_embed"],
        pref={m: arrays[f"pref:{m}"] for m in header["modalities"]},
        proj={m: arrays[f"proj:{m}"] for m in header["modalities"]},
    )
    return params, header

"""NetVLAD and spatial-attention NetVLAD aggregation.

Every stage has a ``*_forward`` returning ``(value, cache)`` and a
``*_backward`` mapping the upstream gradient back to its inputs.  The plain
names (``soft_assign``, ``att_vlad`` ...) return values only.  Feature maps
may carry leading batch dimensions, ``(..., t, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import ShapeError

ZERO_NORM = 1e-12


class ZeroDescriptorError(ArithmeticError):
    pass


@dataclass
class VladParams:
    centers: np.ndarray  # K x D
    assign_weights: np.ndarray  # K x D
    assign_bias: np.ndarray  # K
    attention_weights: np.ndarray  # D
    attention_bias: np.ndarray  # shape (1,)

    def __post_init__(self):
        k, d = self.centers.shape
        if k < 1:
            raise ShapeError("need at least one cluster")
        if self.assign_weights.shape != (k, d) or self.assign_bias.shape != (k,):
            raise ShapeError("assignment parameters do not match centers")
        if self.attention_weights.shape != (d,) or self.attention_bias.shape != (1,):
            raise ShapeError("attention parameters do not match feature width")

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def zeros_like(self) -> "VladParams":
        return VladParams(*(np.zeros_like(a) for a in (
            self.centers, self.assign_weights, self.assign_bias,
            self.attention_weights, self.attention_bias)))


def init_vlad(n_clusters: int, dim: int, rng: np.random.Generator,
              features: np.ndarray | None = None, alpha: float = 1.0) -> VladParams:
    """Initialize a VLAD layer.

    With ``features`` (rows of local features) the centers are a random
    subset of rows and the assignment is set so that ``w_k . f + b_k`` equals
    ``-alpha * |f - c_k|^2`` up to a term shared by all clusters.  Without
    features, centers and assignment weights are drawn uniformly.  Attention
    starts at zero, i.e. every location weighted 0.5.
    """
    if features is not None:
        rows = features.reshape(-1, dim)
        pick = rng.choice(rows.shape[0], size=n_clusters, replace=rows.shape[0] < n_clusters)
        centers = rows[pick].copy()
        scale = np.mean(np.sum((rows[:, None, :] - centers[None]) ** 2, axis=-1))
        a = alpha / max(scale, 1e-12)
        assign_w = 2.0 * a * centers
        assign_b = -a * np.sum(centers ** 2, axis=1)
    else:
        lim = np.sqrt(6.0 / (n_clusters + dim))
        centers = rng.uniform(-lim, lim, size=(n_clusters, dim))
        assign_w = rng.uniform(-lim, lim, size=(n_clusters, dim))
        assign_b = np.zeros(n_clusters)
    return VladParams(centers, assign_w, assign_b, np.zeros(dim), np.zeros(1))


def _check_dim(fmap: np.ndarray, params: VladParams):
    if fmap.shape[-1] != params.dim:
        raise ShapeError(f"feature width {fmap.shape[-1]} != VLAD width {params.dim}")


def soft_assign_forward(fmap: np.ndarray, params: VladParams):
    _check_dim(fmap, params)
    logits = fmap @ params.assign_weights.T + params.assign_bias
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    assign = e / e.sum(axis=-1, keepdims=True)
    return assign, (fmap, assign, params)


def soft_assign_backward(grad: np.ndarray, cache):
    """Returns ``(d_fmap, d_assign_weights, d_assign_bias)``."""
    fmap, assign, params = cache
    dlogits = assign * (grad - np.sum(grad * assign, axis=-1, keepdims=True))
    d_fmap = dlogits @ params.assign_weights
    flat_dl = dlogits.reshape(-1, dlogits.shape[-1])
    d_w = flat_dl.T @ fmap.reshape(-1, fmap.shape[-1])
    return d_fmap, d_w, flat_dl.sum(axis=0)


def soft_assign(fmap: np.ndarray, params: VladParams) -> np.ndarray:
    """Softmax over clusters of ``w_k . f_l + b_k``; rows sum to one."""
    return soft_assign_forward(fmap, params)[0]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


def spatial_attention_forward(fmap: np.ndarray, params: VladParams):
    _check_dim(fmap, params)
    att = _sigmoid(fmap @ params.attention_weights + params.attention_bias[0])
    return att, (fmap, att, params)


def spatial_attention_backward(grad: np.ndarray, cache):
    """Returns ``(d_fmap, d_attention_weights, d_attention_bias)``."""
    fmap, att, params = cache
    dz = grad * att * (1.0 - att)
    d_fmap = dz[..., None] * params.attention_weights
    d_w = dz.reshape(-1) @ fmap.reshape(-1, fmap.shape[-1])
    return d_fmap, d_w, np.array([dz.sum()])


def spatial_attention(fmap: np.ndarray, params: VladParams) -> np.ndarray:
    """Per-location weight ``sigmoid(w . f_l + b)`` from a 1x1 convolution."""
    return spatial_attention_forward(fmap, params)[0]


def l2_normalize_forward(x: np.ndarray, axis: int = -1):
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(norm < ZERO_NORM):
        raise ZeroDescriptorError("zero descriptor")
    y = x / norm
    return y, (y, norm, axis)


def l2_normalize_backward(grad: np.ndarray, cache):
    y, norm, axis = cache
    return (grad - y * np.sum(y * grad, axis=axis, keepdims=True)) / norm


def att_vlad_forward(fmap, att, assign, params: VladParams, intra_norm: bool = True):
    fmap = np.asarray(fmap, dtype=np.float64)
    _check_dim(fmap, params)
    k = params.n_clusters
    if assign.shape != fmap.shape[:-1] + (k,) or att.shape != fmap.shape[:-1]:
        raise ShapeError("attention / assignment shapes do not match the feature map")
    weights = att[..., None] * assign  # (..., t, K)
    mass = weights.sum(axis=-2)  # (..., K)
    resid = np.swapaxes(weights, -1, -2) @ fmap - mass[..., None] * params.centers
    cache = {"fmap": fmap, "att": att, "assign": assign, "weights": weights,
             "centers": params.centers, "intra": None}
    v = resid
    if intra_norm:
        v, cache["intra"] = l2_normalize_forward(v, axis=-1)
    flat = v.reshape(*v.shape[:-2], -1)
    out, cache["final"] = l2_normalize_forward(flat, axis=-1)
    return out, cache


def att_vlad_backward(grad: np.ndarray, cache):
    """Returns ``(d_fmap, d_att, d_assign, d_centers)``."""
    g = l2_normalize_backward(grad, cache["final"])
    centers = cache["centers"]
    g = g.reshape(*g.shape[:-1], *centers.shape)
    if cache["intra"] is not None:
        g = l2_normalize_backward(g, cache["intra"])
    fmap, att, assign, weights = cache["fmap"], cache["att"], cache["assign"], cache["weights"]
    # resid_k = sum_l w_lk f_l - (sum_l w_lk) c_k
    d_weights = fmap @ np.swapaxes(g, -1, -2) - np.sum(g * centers, axis=-1)[..., None, :]
    d_fmap = weights @ g
    mass = weights.sum(axis=-2)
    d_centers = -(mass[..., None] * g).reshape(-1, *centers.shape).sum(axis=0)
    d_att = np.sum(d_weights * assign, axis=-1)
    d_assign = d_weights * att[..., None]
    return d_fmap, d_att, d_assign, d_centers


def att_vlad(fmap, att, assign, params: VladParams, intra_norm: bool = True) -> np.ndarray:
    """Attention-weighted VLAD: ``V_k = sum_l att_l a_lk (f_l - c_k)``, normalized.

    With ``intra_norm`` each cluster block is L2-normalized before the
    blocks are concatenated; the concatenation is always L2-normalized.
    """
    return att_vlad_forward(fmap, att, assign, params, intra_norm)[0]


def net_vlad(fmap, assign, params: VladParams, intra_norm: bool = True) -> np.ndarray:
    """NetVLAD: ``att_vlad`` with every location weighted 1."""
    fmap = np.asarray(fmap, dtype=np.float64)
    return att_vlad(fmap, np.ones(fmap.shape[:-1]), assign, params, intra_norm)

"""Small per-point and per-patch MLP feature extractors.

Both backbones are a shared one-hidden-layer ReLU MLP applied row-wise, so
``point_backbone`` is permutation-equivariant by construction.  Each ``*_forward``
function returns ``(features, cache)``; the matching ``*_backward`` turns an
upstream gradient into parameter gradients and an input gradient.

Inputs may carry leading batch dimensions: a cloud batch is ``(..., N, 3)``
and an image batch ``(..., H, W, C)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PICNETCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


@dataclass
class MlpParams:
    weights: list  # (fan_in, fan_out) per layer
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input width {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


def init_mlp(dims, rng: np.random.Generator) -> MlpParams:
    """Uniform Glorot initialization, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(x: np.ndarray, params: MlpParams):
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != MLP input width {params.in_dim}")
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return h, (acts, pre, params)


def mlp_backward(grad: np.ndarray, cache):
    acts, pre, params = cache
    gw, gb = [], []
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            grad = grad * (pre[i] > 0.0)
        inp = acts[i]
        gw.append(inp.reshape(-1, inp.shape[-1]).T @ grad.reshape(-1, grad.shape[-1]))
        gb.append(grad.reshape(-1, grad.shape[-1]).sum(axis=0))
        grad = grad @ params.weights[i].T
    return MlpParams(gw[::-1], gb[::-1]), grad


def point_backbone_forward(cloud: np.ndarray, params: MlpParams):
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape[-1] != 3 or params.in_dim != 3:
        raise ShapeError("point backbone expects 3-D points and a 3-wide MLP")
    return mlp_forward(cloud, params)


def point_backbone(cloud: np.ndarray, params: MlpParams) -> np.ndarray:
    """Per-point features ``(..., N, D1)`` from a cloud ``(..., N, 3)``."""
    return point_backbone_forward(cloud, params)[0]


def point_backbone_backward(grad: np.ndarray, cache):
    return mlp_backward(grad, cache)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., (H/p)*(W/p), p*p*C)`` in row-major patch order."""
    *lead, h, w, c = image.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, shape, patch: int) -> np.ndarray:
    *lead, h, w, c = shape
    gh, gw = h // patch, w // patch
    x = patches.reshape(*lead, gh, gw, patch, patch, c)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, c)


def image_backbone_forward(image: np.ndarray, params: MlpParams, patch: int):
    image = np.asarray(image, dtype=np.float64)
    x = patchify(image, patch)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"patch width {x.shape[-1]} != MLP input width {params.in_dim}")
    out, cache = mlp_forward(x, params)
    return out, (cache, image.shape, patch)


def image_backbone(image: np.ndarray, params: MlpParams, patch: int) -> np.ndarray:
    """Per-patch features ``(..., t, D2)`` with ``t = (H/patch)*(W/patch)``."""
    return image_backbone_forward(image, params, patch)[0]


def image_backbone_backward(grad: np.ndarray, cache):
    mlp_cache, shape, patch = cache
    gparams, gx = mlp_backward(grad, mlp_cache)
    return gparams, unpatchify(gx, shape, patch)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: dict, meta: dict | None = None) -> None:
    """Write named f64 tensors to one binary file.

    Layout: magic, u32 version, u32 metadata length, UTF-8 JSON metadata,
    u32 entry count, then per entry: u32 name length, name, u32 ndim,
    u32 dims, little-endian f64 data.  Entries are written in sorted name
    order so identical models give identical bytes.
    """
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.astype(np.float64)
    return tensors, meta

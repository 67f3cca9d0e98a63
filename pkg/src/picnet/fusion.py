"""Channel attention, cross-modal fusion and the configurable PIC pipeline.

The pipeline runs, per branch: backbone -> (Att)VLAD -> optional local
channel attention; then concatenation (point block first) -> optional
global channel attention -> L2 normalization.  ``PipelineConfig.pic`` builds
the four table configurations PIC-01 ... PIC-04.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import aggregation as agg
from .backbones import (MlpParams, ShapeError, image_backbone_backward, image_backbone_forward,
                        init_mlp, point_backbone_backward, point_backbone_forward)
from .daynight import histogram_normalize

PIC_VARIANTS = {
    "PIC-01": ("netvlad", False),
    "PIC-02": ("attvlad", False),
    "PIC-03": ("netvlad", True),
    "PIC-04": ("attvlad", True),
}
MODALITIES = ("both", "point", "image")


@dataclass
class ChannelGateParams:
    weight: np.ndarray  # D x D
    sigmoid: bool = False

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"gate weight must be square, got {self.weight.shape}")


def channel_gate_forward(g: np.ndarray, params: ChannelGateParams):
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != params.weight.shape[0]:
        raise ShapeError(f"vector width {g.shape[-1]} != gate width {params.weight.shape[0]}")
    gate = g @ params.weight.T
    if params.sigmoid:
        gate = agg.sigmoid(gate)
    return gate * g, (g, gate, params)


def channel_gate_backward(grad: np.ndarray, cache):
    """Returns ``(d_g, d_weight)``."""
    g, gate, params = cache
    dz = grad * g
    if params.sigmoid:
        dz = dz * gate * (1.0 - gate)
    d_g = grad * gate + dz @ params.weight
    d_w = dz.reshape(-1, dz.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return d_g, d_w


def local_channel_attention(g: np.ndarray, params: ChannelGateParams) -> np.ndarray:
    """Reweight a branch descriptor by its own gate: ``(W g) * g``."""
    return channel_gate_forward(g, params)[0]


def global_channel_attention(g_fused: np.ndarray, params: ChannelGateParams) -> np.ndarray:
    """Same gate as the local one, applied across the concatenated descriptor."""
    return channel_gate_forward(g_fused, params)[0]


def concat(gp: np.ndarray, gi: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(gp, dtype=np.float64), np.asarray(gi, dtype=np.float64)],
                          axis=-1)


@dataclass(frozen=True)
class PipelineConfig:
    vlad_flavor: str = "attvlad"
    gca_enabled: bool = True
    lca_enabled: bool | None = None  # None: follow gca_enabled
    daynight_enabled: bool = False
    gate_sigmoid: bool = False
    modalities: str = "both"
    intra_norm: bool = True
    point_backbone_tag: str = "mlp"
    n_points: int = 128
    image_shape: tuple = (32, 32, 3)
    patch: int = 4
    hidden: int = 64
    point_dim: int = 32
    image_dim: int = 32
    n_clusters: int = 8

    def __post_init__(self):
        if self.vlad_flavor not in ("netvlad", "attvlad"):
            raise ValueError(f"unknown VLAD flavor {self.vlad_flavor!r}")
        if self.modalities not in MODALITIES:
            raise ValueError(f"unknown modalities {self.modalities!r}")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        h, w, _ = self.image_shape
        if h % self.patch or w % self.patch:
            raise ValueError("image size must be divisible by patch")

    @classmethod
    def pic(cls, name: str, **overrides) -> "PipelineConfig":
        flavor, gca = PIC_VARIANTS[name]
        return cls(vlad_flavor=flavor, gca_enabled=gca, **overrides)

    @property
    def name(self) -> str:
        if self.modalities != "both":
            tag = f"{self.modalities}-only"
        else:
            tag = next(k for k, v in PIC_VARIANTS.items()
                       if v == (self.vlad_flavor, self.gca_enabled))
        return tag + ("-dn" if self.daynight_enabled else "")

    @property
    def use_lca(self) -> bool:
        return self.gca_enabled if self.lca_enabled is None else self.lca_enabled

    @property
    def branches(self) -> tuple:
        return ("point", "image") if self.modalities == "both" else (self.modalities,)

    def branch_dim(self, branch: str) -> int:
        width = self.point_dim if branch == "point" else self.image_dim
        return self.n_clusters * width

    @property
    def descriptor_dim(self) -> int:
        return sum(self.branch_dim(b) for b in self.branches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


@dataclass
class Model:
    """All trainable tensors by name, plus non-trainable buffers."""
    config: PipelineConfig
    params: dict
    buffers: dict = field(default_factory=dict)

    def mlp(self, branch: str) -> MlpParams:
        p = self.params
        return MlpParams([p[f"{branch}.mlp.w0"], p[f"{branch}.mlp.w1"]],
                         [p[f"{branch}.mlp.b0"], p[f"{branch}.mlp.b1"]])

    def vlad(self, branch: str) -> agg.VladParams:
        p = self.params
        return agg.VladParams(p[f"{branch}.vlad.centers"], p[f"{branch}.vlad.assign_w"],
                              p[f"{branch}.vlad.assign_b"], p[f"{branch}.vlad.att_w"],
                              p[f"{branch}.vlad.att_b"])

    def lca(self, branch: str) -> ChannelGateParams:
        return ChannelGateParams(self.params[f"{branch}.lca.weight"], self.config.gate_sigmoid)

    def gca(self) -> ChannelGateParams:
        return ChannelGateParams(self.params["gca.weight"], self.config.gate_sigmoid)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})

    def tensors(self) -> dict:
        out = dict(self.params)
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_tensors(cls, config: PipelineConfig, tensors: dict) -> "Model":
        params = {k: v for k, v in tensors.items() if not k.startswith("buffer.")}
        buffers = {k[len("buffer."):]: v for k, v in tensors.items() if k.startswith("buffer.")}
        expected = init_model(config, np.random.default_rng(0)).params
        if set(expected) != set(params):
            missing = sorted(set(expected) ^ set(params))
            raise ShapeError(f"checkpoint does not match config: entries {missing}")
        for k, v in expected.items():
            if v.shape != params[k].shape:
                raise ShapeError(f"checkpoint entry {k} has shape {params[k].shape}, "
                                 f"config expects {v.shape}")
        return cls(config, params, buffers)


def _gate_init(dim: int, sigmoid: bool) -> np.ndarray:
    # sigmoid gates start at 0.5 everywhere; linear gates start at identity
    return np.zeros((dim, dim)) if sigmoid else np.eye(dim)


def init_model(config: PipelineConfig, rng: np.random.Generator,
               clouds: np.ndarray | None = None, images: np.ndarray | None = None) -> Model:
    """Seeded initialization.

    When sample ``clouds`` / ``images`` are given, VLAD centers are seeded
    from the initial backbone features of those samples.
    """
    params = {}
    h, w, c = config.image_shape
    samples = {"point": clouds, "image": images}
    for branch in ("point", "image"):
        if branch not in config.branches:
            continue
        in_dim = 3 if branch == "point" else config.patch * config.patch * c
        out_dim = config.point_dim if branch == "point" else config.image_dim
        mlp = init_mlp([in_dim, config.hidden, out_dim], rng)
        feats = None
        if samples[branch] is not None:
            if branch == "point":
                feats = point_backbone_forward(samples[branch], mlp)[0]
            else:
                feats = image_backbone_forward(samples[branch], mlp, config.patch)[0]
        vlad = agg.init_vlad(config.n_clusters, out_dim, rng, features=feats)
        params.update({
            f"{branch}.mlp.w0": mlp.weights[0], f"{branch}.mlp.b0": mlp.biases[0],
            f"{branch}.mlp.w1": mlp.weights[1], f"{branch}.mlp.b1": mlp.biases[1],
            f"{branch}.vlad.centers": vlad.centers,
            f"{branch}.vlad.assign_w": vlad.assign_weights,
            f"{branch}.vlad.assign_b": vlad.assign_bias,
            f"{branch}.vlad.att_w": vlad.attention_weights,
            f"{branch}.vlad.att_b": vlad.attention_bias,
        })
        if config.use_lca:
            params[f"{branch}.lca.weight"] = _gate_init(config.branch_dim(branch),
                                                        config.gate_sigmoid)
    if config.gca_enabled:
        params["gca.weight"] = _gate_init(config.descriptor_dim, config.gate_sigmoid)
    return Model(config, params)


def _branch_forward(branch: str, x: np.ndarray, model: Model):
    cfg = model.config
    cache = {}
    if branch == "point":
        fmap, cache["backbone"] = point_backbone_forward(x, model.mlp("point"))
    else:
        fmap, cache["backbone"] = image_backbone_forward(x, model.mlp("image"), cfg.patch)
    vlad = model.vlad(branch)
    assign, cache["assign"] = agg.soft_assign_forward(fmap, vlad)
    if cfg.vlad_flavor == "attvlad":
        att, cache["att"] = agg.spatial_attention_forward(fmap, vlad)
    else:
        att = np.ones(fmap.shape[:-1])
    g, cache["vlad"] = agg.att_vlad_forward(fmap, att, assign, vlad, cfg.intra_norm)
    if cfg.use_lca:
        g, cache["lca"] = channel_gate_forward(g, model.lca(branch))
    return g, cache


def _branch_backward(branch: str, grad: np.ndarray, cache, model: Model, grads: dict):
    cfg = model.config
    if "lca" in cache:
        grad, grads[f"{branch}.lca.weight"] = channel_gate_backward(grad, cache["lca"])
    d_fmap, d_att, d_assign, d_centers = agg.att_vlad_backward(grad, cache["vlad"])
    grads[f"{branch}.vlad.centers"] = d_centers
    if "att" in cache:
        df, dw, db = agg.spatial_attention_backward(d_att, cache["att"])
        d_fmap = d_fmap + df
        grads[f"{branch}.vlad.att_w"] = dw
        grads[f"{branch}.vlad.att_b"] = db
    else:
        grads[f"{branch}.vlad.att_w"] = np.zeros_like(model.params[f"{branch}.vlad.att_w"])
        grads[f"{branch}.vlad.att_b"] = np.zeros_like(model.params[f"{branch}.vlad.att_b"])
    df, dw, db = agg.soft_assign_backward(d_assign, cache["assign"])
    d_fmap = d_fmap + df
    grads[f"{branch}.vlad.assign_w"] = dw
    grads[f"{branch}.vlad.assign_b"] = db
    if branch == "point":
        gp, d_in = point_backbone_backward(d_fmap, cache["backbone"])
    else:
        gp, d_in = image_backbone_backward(d_fmap, cache["backbone"])
    for i in range(2):
        grads[f"{branch}.mlp.w{i}"] = gp.weights[i]
        grads[f"{branch}.mlp.b{i}"] = gp.biases[i]
    return d_in


def preprocess_images(images: np.ndarray, model: Model) -> np.ndarray:
    if not model.config.daynight_enabled:
        return images
    ref = model.buffers.get("reference_cdf")
    if ref is None:
        raise ValueError("day-night normalization enabled but the model has no reference CDF")
    if images.ndim == 3:
        return histogram_normalize(images, ref)
    return np.stack([histogram_normalize(im, ref) for im in images])


def encode_forward(images: np.ndarray | None, clouds: np.ndarray | None, model: Model,
                   preprocessed: bool = False):
    """Batched pipeline forward.  Returns ``(descriptors, cache)``."""
    cfg = model.config
    inputs = {"point": clouds, "image": images}
    if "image" in cfg.branches and not preprocessed:
        inputs["image"] = preprocess_images(np.asarray(images, dtype=np.float64), model)
    blocks, caches = [], {}
    for branch in cfg.branches:
        if inputs[branch] is None:
            raise ValueError(f"{branch} input required by config {cfg.name}")
        g, caches[branch] = _branch_forward(branch, inputs[branch], model)
        blocks.append(g)
    fused = np.concatenate(blocks, axis=-1)
    if cfg.gca_enabled:
        fused, caches["gca"] = channel_gate_forward(fused, model.gca())
    out, caches["final"] = agg.l2_normalize_forward(fused)
    return out, caches


def encode_backward(grad: np.ndarray, cache, model: Model) -> tuple[dict, dict]:
    """Returns ``(param_grads, input_grads)``; input grads keyed by branch."""
    cfg = model.config
    grads = {}
    g = agg.l2_normalize_backward(grad, cache["final"])
    if "gca" in cache:
        g, grads["gca.weight"] = channel_gate_backward(g, cache["gca"])
    inputs = {}
    start = 0
    for branch in cfg.branches:
        width = cfg.branch_dim(branch)
        inputs[branch] = _branch_backward(branch, g[..., start:start + width],
                                          cache[branch], model, grads)
        start += width
    return grads, inputs


def forward_pipeline(scene, model: Model, config: PipelineConfig | None = None) -> np.ndarray:
    """Unit-norm global descriptor of one scene."""
    if config is not None and config != model.config:
        model = replace(model, config=config)
    return encode_forward(scene.image, scene.cloud, model)[0]


def encode_scenes(scenes, model: Model, batch: int = 64) -> np.ndarray:
    out = []
    scenes = list(scenes)
    for i in range(0, len(scenes), batch):
        chunk = scenes[i:i + batch]
        images = np.stack([s.image for s in chunk])
        clouds = np.stack([s.cloud for s in chunk])
        out.append(encode_forward(images, clouds, model)[0])
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.descriptor_dim))

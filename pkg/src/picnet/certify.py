"""Finite-difference certification of every analytic backward pass.

Each check builds a small seeded instance, turns the operation into a
scalar ``x -> sum(r * op(x))`` with a fixed random projection ``r`` and runs
``gradcheck`` on it.  Instances whose ReLU pre-activations or hinge/max
decisions sit within ``MARGIN`` of a kink are rejected and redrawn, as are
instances with a nonzero gradient coordinate below ``MIN_GRAD``: at
``h = 1e-5`` the central difference carries roughly ``1e-10`` of rounding
noise, which alone would exceed the tolerance on such a coordinate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import aggregation as agg
from .backbones import (MlpParams, image_backbone_backward, image_backbone_forward, patchify,
                        point_backbone_backward, point_backbone_forward)
from .fusion import (ChannelGateParams, PipelineConfig, channel_gate_backward,
                     channel_gate_forward, encode_forward, init_model)
from .training import TrainParams, gradcheck, lazy_quadruplet_loss_grad, tuple_loss_and_grads

TOLERANCE = 1e-4
STEP = 1e-5
MARGIN = 1e-3
MIN_GRAD = 1e-6


class _Packer:
    """Flatten a list of arrays into one vector and back."""

    def __init__(self, arrays):
        self.shapes = [a.shape for a in arrays]
        self.sizes = [int(np.prod(s)) for s in self.shapes]

    def pack(self, arrays) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])

    def unpack(self, x):
        out, off = [], 0
        for shape, n in zip(self.shapes, self.sizes):
            out.append(x[off:off + n].reshape(shape))
            off += n
        return out


def _mlp(rng, dims):
    ws = [rng.normal(0, 0.8, size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [rng.normal(0, 0.3, size=b) for b in dims[1:]]
    return MlpParams(ws, bs)


def _mlp_ok(x, mlp):
    z = x @ mlp.weights[0] + mlp.biases[0]
    return np.abs(z).min() > MARGIN


def _vlad(rng, k, d):
    return agg.VladParams(rng.normal(0, 1, (k, d)), rng.normal(0, 1, (k, d)),
                          rng.normal(0, 0.5, k), rng.normal(0, 1, d), rng.normal(0, 0.5, 1))


def check_point_backbone(rng, perturb=0.0):
    while True:
        cloud = rng.normal(size=(6, 3))
        mlp = _mlp(rng, [3, 5, 4])
        if _mlp_ok(cloud, mlp):
            break
    r = rng.normal(size=(6, 4))
    pk = _Packer([cloud, *mlp.weights, *mlp.biases])

    def f(x):
        c, w0, w1, b0, b1 = pk.unpack(x)
        out, cache = point_backbone_forward(c, MlpParams([w0, w1], [b0, b1]))
        gp, gc = point_backbone_backward(r, cache)
        return float(np.sum(r * out)), pk.pack([gc, *gp.weights, *gp.biases]) + perturb

    return f, pk.pack([cloud, *mlp.weights, *mlp.biases])


def check_image_backbone(rng, perturb=0.0):
    while True:
        image = rng.uniform(size=(4, 4, 2))
        mlp = _mlp(rng, [8, 5, 3])
        if _mlp_ok(patchify(image, 2), mlp):
            break
    r = rng.normal(size=(4, 3))
    pk = _Packer([image, *mlp.weights, *mlp.biases])

    def f(x):
        im, w0, w1, b0, b1 = pk.unpack(x)
        out, cache = image_backbone_forward(im, MlpParams([w0, w1], [b0, b1]), 2)
        gp, gi = image_backbone_backward(r, cache)
        return float(np.sum(r * out)), pk.pack([gi, *gp.weights, *gp.biases]) + perturb

    return f, pk.pack([image, *mlp.weights, *mlp.biases])


def check_soft_assign(rng, perturb=0.0):
    t, d, k = 7, 4, 3
    fmap = rng.normal(size=(t, d))
    p = _vlad(rng, k, d)
    r = rng.normal(size=(t, k))
    pk = _Packer([fmap, p.assign_weights, p.assign_bias])

    def f(x):
        fm, w, b = pk.unpack(x)
        q = agg.VladParams(p.centers, w, b, p.attention_weights, p.attention_bias)
        out, cache = agg.soft_assign_forward(fm, q)
        gf, gw, gb = agg.soft_assign_backward(r, cache)
        return float(np.sum(r * out)), pk.pack([gf, gw, gb]) + perturb

    return f, pk.pack([fmap, p.assign_weights, p.assign_bias])


def check_spatial_attention(rng, perturb=0.0):
    t, d = 7, 4
    fmap = rng.normal(size=(t, d))
    p = _vlad(rng, 2, d)
    r = rng.normal(size=t)
    pk = _Packer([fmap, p.attention_weights, p.attention_bias])

    def f(x):
        fm, w, b = pk.unpack(x)
        q = agg.VladParams(p.centers, p.assign_weights, p.assign_bias, w, b)
        out, cache = agg.spatial_attention_forward(fm, q)
        gf, gw, gb = agg.spatial_attention_backward(r, cache)
        return float(np.sum(r * out)), pk.pack([gf, gw, gb]) + perturb

    return f, pk.pack([fmap, p.attention_weights, p.attention_bias])


def _check_vlad(rng, perturb, unit_attention, intra_norm):
    t, d, k = 8, 4, 3
    fmap = rng.normal(size=(t, d))
    att = np.ones(t) if unit_attention else rng.uniform(0.1, 0.9, t)
    assign = rng.dirichlet(np.ones(k), size=t)
    centers = rng.normal(size=(k, d))
    r = rng.normal(size=k * d)
    pk = _Packer([fmap, att, assign, centers])

    def f(x):
        fm, a, s, c = pk.unpack(x)
        if unit_attention:
            a = np.ones(t)
        q = agg.VladParams(c, np.zeros((k, d)), np.zeros(k), np.zeros(d), np.zeros(1))
        out, cache = agg.att_vlad_forward(fm, a, s, q, intra_norm)
        gf, ga, gs, gc = agg.att_vlad_backward(r, cache)
        if unit_attention:
            ga = np.zeros(t)
        return float(np.sum(r * out)), pk.pack([gf, ga, gs, gc]) + perturb

    return f, pk.pack([fmap, att, assign, centers])


def check_att_vlad(rng, perturb=0.0):
    return _check_vlad(rng, perturb, False, True)


def check_att_vlad_no_intra(rng, perturb=0.0):
    return _check_vlad(rng, perturb, False, False)


def check_net_vlad(rng, perturb=0.0):
    return _check_vlad(rng, perturb, True, True)


def _check_gate(rng, perturb, dim, sigmoid):
    g = rng.normal(size=dim)
    w = rng.normal(0, 0.7, size=(dim, dim))
    r = rng.normal(size=dim)
    pk = _Packer([g, w])

    def f(x):
        gv, wv = pk.unpack(x)
        out, cache = channel_gate_forward(gv, ChannelGateParams(wv, sigmoid))
        dg, dw = channel_gate_backward(r, cache)
        return float(np.sum(r * out)), pk.pack([dg, dw]) + perturb

    return f, pk.pack([g, w])


def check_local_channel_attention(rng, perturb=0.0):
    return _check_gate(rng, perturb, 6, False)


def check_local_channel_attention_sigmoid(rng, perturb=0.0):
    return _check_gate(rng, perturb, 6, True)


def check_global_channel_attention(rng, perturb=0.0):
    return _check_gate(rng, perturb, 10, True)


def _loss_decisions_ok(a, p, n, dec, alpha, beta):
    dp = np.sum((p - a) ** 2, axis=-1)
    h1 = alpha + dp.min() - np.sum((n - a) ** 2, axis=-1)
    h2 = beta + dp.min() - np.sum((n - dec) ** 2, axis=-1)
    for v in (dp, -h1, -h2):
        s = np.sort(v)
        if len(s) > 1 and s[1] - s[0] < MARGIN:
            return False
    return abs(h1.max()) > MARGIN and abs(h2.max()) > MARGIN


def check_lazy_quadruplet_loss(rng, perturb=0.0):
    d, alpha, beta = 5, 2.0, 2.0
    while True:
        a = rng.normal(size=d)
        p = a + rng.normal(0, 0.6, size=(3, d))
        n = rng.normal(size=(4, d))
        dec = rng.normal(size=d)
        if _loss_decisions_ok(a, p, n, dec, alpha, beta):
            break
    pk = _Packer([a, p, n, dec])

    def f(x):
        av, pv, nv, dv = pk.unpack(x)
        loss, ga, gp, gn, gd = lazy_quadruplet_loss_grad(av, pv, nv, dv, alpha, beta)
        return float(loss), pk.pack([ga, gp, gn, gd]) + perturb

    return f, pk.pack([a, p, n, dec])


def check_full_pipeline(rng, perturb=0.0):
    """PIC-04 (sigmoid gates) composed with the loss on a tiny instance."""
    cfg = PipelineConfig.pic("PIC-04", n_points=6, image_shape=(4, 4, 2), patch=2, hidden=5,
                             point_dim=4, image_dim=3, n_clusters=2, gate_sigmoid=True)
    hp = TrainParams(n_pos=2, n_neg=3, alpha=2.0, beta=2.0)
    width = 1 + hp.n_pos + hp.n_neg + 1
    index = np.arange(width)[None]
    while True:
        model = init_model(cfg, rng)
        for key, v in model.params.items():
            model.params[key] = v + rng.normal(0, 0.5, v.shape)
        images = rng.uniform(size=(width, 4, 4, 2))
        clouds = rng.normal(size=(width, 6, 3))
        if not (_mlp_ok(clouds, model.mlp("point"))
                and _mlp_ok(patchify(images, 2), model.mlp("image"))):
            continue
        desc = encode_forward(images, clouds, model)[0]
        if _loss_decisions_ok(desc[0], desc[1:3], desc[3:6], desc[6], hp.alpha, hp.beta):
            break
    keys = sorted(model.params)
    pk = _Packer([model.params[k] for k in keys])

    def f(x):
        for key, v in zip(keys, pk.unpack(x)):
            model.params[key] = v
        loss, grads = tuple_loss_and_grads(model, images, clouds, index, hp)
        return loss, pk.pack([grads[k] for k in keys]) + perturb

    return f, pk.pack([model.params[k] for k in keys])


CHECKS = {
    "point_backbone": check_point_backbone,
    "image_backbone": check_image_backbone,
    "soft_assign": check_soft_assign,
    "spatial_attention": check_spatial_attention,
    "att_vlad": check_att_vlad,
    "att_vlad_no_intra_norm": check_att_vlad_no_intra,
    "net_vlad": check_net_vlad,
    "local_channel_attention": check_local_channel_attention,
    "local_channel_attention_sigmoid": check_local_channel_attention_sigmoid,
    "global_channel_attention": check_global_channel_attention,
    "lazy_quadruplet_loss": check_lazy_quadruplet_loss,
    "full_pipeline": check_full_pipeline,
}


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def run_checks(seeds=range(5), ops=None, perturb: dict | None = None,
               base_seed: int = 0) -> list[CheckResult]:
    """Run every (or the named) check over ``seeds``; ``perturb`` adds a bias
    to the analytic gradient of the named ops (negative controls)."""
    perturb = perturb or {}
    results = []
    for op in (ops or CHECKS):
        t0 = time.perf_counter()
        worst = 0.0
        seeds = list(seeds)
        for s in seeds:
            rng = np.random.default_rng([base_seed, s, len(op)])
            while True:
                f, x0 = CHECKS[op](rng, perturb.get(op, 0.0))
                g = np.abs(f(x0.copy())[1])
                if np.all((g == 0) | (g >= MIN_GRAD)):
                    break
            worst = max(worst, gradcheck(f, x0, STEP))
        results.append(CheckResult(op, worst, len(seeds), time.perf_counter() - t0))
    return results

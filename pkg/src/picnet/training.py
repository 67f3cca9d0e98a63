"""Lazy quadruplet loss, radius-based tuple mining, Adam and the training loop.

Also hosts ``gradcheck``, the central-difference oracle used to certify
every analytic backward pass in the package.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .daynight import reference_cdf
from .fusion import Model, PipelineConfig, encode_backward, encode_forward, init_model, \
    preprocess_images
from .scenes import Scene, SceneDatabase

log = logging.getLogger(__name__)


class MiningError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass(frozen=True)
class QuadrupletTuple:
    anchor: int
    positives: tuple
    negatives: tuple
    decoy: int
    db: SceneDatabase = field(repr=False, compare=False, default=None)

    def scenes(self) -> tuple[Scene, list, list, Scene]:
        s = self.db.scenes
        return (s[self.anchor], [s[i] for i in self.positives],
                [s[i] for i in self.negatives], s[self.decoy])

    @property
    def indices(self) -> list:
        return [self.anchor, *self.positives, *self.negatives, self.decoy]


def radius_candidates(coords: np.ndarray, anchor: int, r_pos: float, r_neg: float):
    """Indices within ``r_pos`` of ``anchor`` (excluding it) and beyond ``r_neg``."""
    d = np.sqrt(((np.asarray(coords) - coords[anchor]) ** 2).sum(-1))
    pos = np.flatnonzero(d <= r_pos)
    return pos[pos != anchor], np.flatnonzero(d > r_neg)


def mine_tuples(db: SceneDatabase, r_pos: float, r_neg: float, n_pos: int, n_neg: int,
                seed: int) -> list[QuadrupletTuple]:
    """One tuple per usable anchor, in database order.

    Positives lie within ``r_pos`` of the anchor; if fewer than ``n_pos``
    exist they are drawn with replacement.  Negatives lie beyond ``r_neg``.
    The decoy is beyond ``r_neg`` of the anchor and of every chosen negative.
    Anchors lacking a positive, ``n_neg`` negatives or a decoy are skipped.
    """
    if not r_pos < r_neg:
        raise MiningError("r_pos must be smaller than r_neg")
    rng = np.random.default_rng(seed)
    coords = db.coords
    dist = np.sqrt(((coords[:, None, :] - coords[None]) ** 2).sum(-1))
    n = len(db)
    tuples = []
    for a in range(n):
        pos, neg = radius_candidates(coords, a, r_pos, r_neg)
        if len(pos) == 0 or len(neg) < n_neg:
            continue
        positives = rng.choice(pos, size=n_pos, replace=len(pos) < n_pos)
        negatives = rng.choice(neg, size=n_neg, replace=False)
        far = (dist[a] > r_neg) & np.all(dist[negatives] > r_neg, axis=0)
        far[negatives] = False
        candidates = np.flatnonzero(far)
        if len(candidates) == 0:
            continue
        decoy = int(rng.choice(candidates))
        tuples.append(QuadrupletTuple(a, tuple(int(i) for i in positives),
                                      tuple(int(i) for i in negatives), decoy, db))
    if not tuples:
        raise MiningError("no tuples")
    return tuples


def lazy_quadruplet_loss_grad(anchor, positives, negatives, decoy, alpha: float, beta: float):
    """Loss and gradients for one tuple or a batch of tuples.

    Shapes: anchor ``(..., D)``, positives ``(..., P, D)``, negatives
    ``(..., Q, D)``, decoy ``(..., D)``.  Returns ``(loss, d_anchor,
    d_positives, d_negatives, d_decoy)`` where ``loss`` has the batch shape.
    Minima and maxima resolve ties to the lowest index; a hinge exactly at
    zero contributes no gradient.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    decoy = np.asarray(decoy, dtype=np.float64)
    if positives.shape[-2] == 0 or negatives.shape[-2] == 0:
        raise ValueError("positives and negatives must be non-empty")
    dp = positives - anchor[..., None, :]
    dn = negatives - anchor[..., None, :]
    dd = negatives - decoy[..., None, :]
    d_pos = np.sum(dp * dp, axis=-1)
    d_neg = np.sum(dn * dn, axis=-1)
    d_dec = np.sum(dd * dd, axis=-1)
    ip = np.argmin(d_pos, axis=-1)
    delta = np.take_along_axis(d_pos, ip[..., None], -1)[..., 0]
    h1 = alpha + delta[..., None] - d_neg
    h2 = beta + delta[..., None] - d_dec
    j1 = np.argmax(h1, axis=-1)
    j2 = np.argmax(h2, axis=-1)
    m1 = np.take_along_axis(h1, j1[..., None], -1)[..., 0]
    m2 = np.take_along_axis(h2, j2[..., None], -1)[..., 0]
    on1 = (m1 > 0).astype(np.float64)
    on2 = (m2 > 0).astype(np.float64)
    loss = np.maximum(m1, 0.0) + np.maximum(m2, 0.0)

    g_anchor = np.zeros_like(anchor)
    g_pos = np.zeros_like(positives)
    g_neg = np.zeros_like(negatives)
    g_decoy = np.zeros_like(decoy)
    # d delta: anchor -> -2 dp*, positive* -> +2 dp*
    dp_star = np.take_along_axis(dp, ip[..., None, None], -2)[..., 0, :]
    w_delta = (on1 + on2)[..., None]
    g_anchor -= 2.0 * w_delta * dp_star
    np.put_along_axis(g_pos, ip[..., None, None],
                      (2.0 * w_delta * dp_star)[..., None, :], -2)
    # -d(anchor, neg_j1)
    dn_star = np.take_along_axis(dn, j1[..., None, None], -2)[..., 0, :]
    g_anchor += 2.0 * on1[..., None] * dn_star
    add = np.zeros_like(negatives)
    np.put_along_axis(add, j1[..., None, None], (-2.0 * on1[..., None] * dn_star)[..., None, :], -2)
    g_neg += add
    # -d(decoy, neg_j2)
    dd_star = np.take_along_axis(dd, j2[..., None, None], -2)[..., 0, :]
    g_decoy += 2.0 * on2[..., None] * dd_star
    add = np.zeros_like(negatives)
    np.put_along_axis(add, j2[..., None, None], (-2.0 * on2[..., None] * dd_star)[..., None, :], -2)
    g_neg += add
    return loss, g_anchor, g_pos, g_neg, g_decoy


def lazy_quadruplet_loss(anchor, positives, negatives, decoy, alpha: float = 0.5,
                         beta: float = 0.2):
    """``max_j [alpha + d_pos - d(a, n_j)]_+ + max_j [beta + d_pos - d(decoy, n_j)]_+``.

    ``d`` is the squared Euclidean distance and ``d_pos`` the distance to
    the closest positive.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("positives and negatives must be non-empty")
    return float(lazy_quadruplet_loss_grad(anchor, positives, negatives, decoy, alpha, beta)[0])


def gradcheck(f: Callable, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)``.  The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    if not np.isfinite(value):
        raise ValueError("function is not finite at x")
    numeric = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x)[0])
        flat_x[i] = orig - h
        fm = float(f(x)[0])
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"function is not finite near coordinate {i}")
        flat_n[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# -- optimization ----------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)  # per-parameter lr multipliers

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            lr = self.lr * self.scale.get(name, 1.0)
            params[name] -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass(frozen=True)
class TrainParams:
    steps: int = 300
    batch_tuples: int = 8
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.5
    beta: float = 0.2
    r_pos: float = 10.0
    r_neg: float = 50.0
    n_pos: int = 2
    n_neg: int = 6
    gate_lr_scale: float = 0.02
    attention_lr_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_tuples < 1 or self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("steps >= 0, batch_tuples >= 1, n_pos >= 1, n_neg >= 1 required")
        if min(self.lr, self.gate_lr_scale, self.attention_lr_scale) < 0:
            raise ValueError("learning rates must be non-negative")
        if not self.r_pos < self.r_neg:
            raise ValueError("r_pos must be smaller than r_neg")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    history: list


def tuple_loss_and_grads(model: Model, images, clouds, index: np.ndarray, hp: TrainParams,
                         preprocessed: bool = True):
    """Mean lazy-quadruplet loss over a batch of tuples and its parameter gradients.

    ``index`` is ``(B, 1 + P + Q + 1)`` scene indices laid out as anchor,
    positives, negatives, decoy.
    """
    b, width = index.shape
    flat = index.reshape(-1)
    img = images[flat] if images is not None else None
    cld = clouds[flat] if clouds is not None else None
    desc, cache = encode_forward(img, cld, model, preprocessed=preprocessed)
    desc = desc.reshape(b, width, -1)
    p = hp.n_pos
    loss, ga, gp, gn, gd = lazy_quadruplet_loss_grad(
        desc[:, 0], desc[:, 1:1 + p], desc[:, 1 + p:-1], desc[:, -1], hp.alpha, hp.beta)
    grad = np.concatenate([ga[:, None], gp, gn, gd[:, None]], axis=1) / b
    grads, _ = encode_backward(grad.reshape(b * width, -1), cache, model)
    return float(loss.mean()), grads


def prepare_inputs(db: SceneDatabase, model: Model):
    cfg = model.config
    images = clouds = None
    if "image" in cfg.branches:
        images = preprocess_images(db.images(), model)
    if "point" in cfg.branches:
        clouds = db.clouds()
    return images, clouds


def train(db: SceneDatabase, config: PipelineConfig, hp: TrainParams = TrainParams(),
          seed: int = 0, tuples: list | None = None) -> TrainResult:
    """Train a model on ``db`` with the lazy quadruplet loss and Adam.

    Deterministic for fixed ``(db, config, hp, seed)``.
    """
    rng = np.random.default_rng(seed)
    if tuples is None:
        tuples = mine_tuples(db, hp.r_pos, hp.r_neg, hp.n_pos, hp.n_neg, seed)
    index = np.array([t.indices for t in tuples])

    buffers = {}
    if config.daynight_enabled:
        day = [s.image for s in db.scenes if not s.night]
        buffers["reference_cdf"] = reference_cdf(np.stack(day if day else db.images()))
    probe = Model(config, {}, buffers)
    images, clouds = prepare_inputs(db, probe)
    sample = rng.choice(len(db), size=min(len(db), 16), replace=False)
    model = init_model(config, rng,
                       clouds=clouds[sample] if clouds is not None else None,
                       images=images[sample] if images is not None else None)
    model.buffers.update(buffers)

    scale = {k: hp.gate_lr_scale for k in model.params if k.endswith("weight")}
    scale.update({k: hp.attention_lr_scale for k in model.params if ".vlad.att_" in k})
    opt = Adam(hp.lr, hp.beta1, hp.beta2, hp.eps, scale=scale)
    history = []
    bsz = min(hp.batch_tuples, len(index))
    for step in range(hp.steps):
        pick = rng.choice(len(index), size=bsz, replace=False)
        loss, grads = tuple_loss_and_grads(model, images, clouds, index[pick], hp)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        history.append(loss)
        opt.update(model.params, grads)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise DivergenceError(step, float("nan"))
    log.debug("trained %s: final loss %.4f", config.name, history[-1] if history else float("nan"))
    return TrainResult(model, history)


def save_history(path: str | Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i, repr(float(v))])


def load_history(path: str | Path) -> list:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]

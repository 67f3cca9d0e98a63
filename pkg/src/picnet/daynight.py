"""Synthetic two-traversal world with night corruption, and color normalization.

``generate_world`` lays places out along a boustrophedon path and renders,
for each place, an image from the place's appearance latent and a point
cloud from its geometry latent.  Both traversals share places and latents
but draw independent observation noise.  A fraction of the query traversal
is rendered at "night": gamma darkening, sensor noise and point dropout.

Color normalization goes through the ``DomainTransform`` interface; the
reference implementation is per-channel histogram matching against a day
reference CDF.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .scenes import Scene, SceneDatabase, downsample, normalize_cloud

BINS = 256


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    n_places: int = 200
    area_m: float = 1000.0
    min_spacing_m: float = 30.0
    latent_dim: int = 8
    night_fraction: float = 0.3
    gamma: float = 5.0
    noise_sigma: float = 0.08
    point_dropout: float = 0.1
    seed: int = 0
    render_seed: int = 7
    n_points: int = 128
    raw_points: int = 512
    image_shape: tuple = (32, 32, 3)
    coord_jitter_m: float = 1.0
    latent_noise: float = 0.15
    pixel_noise: float = 0.03
    point_noise: float = 0.05
    clutter_fraction: float = 0.4
    clutter_blocks: int = 4
    shared_latent: int = 2

    def __post_init__(self):
        if self.n_places < 2:
            raise WorldError("n_places must be >= 2")
        if self.min_spacing_m <= 0:
            raise WorldError("min_spacing_m must be positive")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise WorldError("night_fraction must lie in [0, 1]")
        if self.gamma <= 0 or self.noise_sigma < 0:
            raise WorldError("gamma must be > 0 and noise sigma >= 0")
        if not 0.0 <= self.point_dropout < 1.0:
            raise WorldError("point_dropout must lie in [0, 1)")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @property
    def geometry_dims(self) -> slice:
        half = (self.latent_dim + self.shared_latent) // 2
        return slice(0, half)

    @property
    def appearance_dims(self) -> slice:
        half = (self.latent_dim + self.shared_latent) // 2
        return slice(self.latent_dim - half, self.latent_dim)


# -- corruption and normalization -------------------------------------------

def night_corrupt(image: np.ndarray, gamma: float, sigma: float, seed) -> np.ndarray:
    """``clip(pixel ** gamma + noise, 0, 1)`` with seeded Gaussian noise."""
    if gamma <= 0 or sigma < 0:
        raise WorldError("gamma must be > 0 and sigma >= 0")
    image = np.asarray(image, dtype=np.float64)
    out = image ** gamma
    if sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((values * bins).astype(np.int64), bins - 1)


def channel_histograms(image: np.ndarray, bins: int = BINS) -> np.ndarray:
    """Per-channel normalized histograms, shape ``(C, bins)``."""
    image = np.asarray(image, dtype=np.float64)
    flat = image.reshape(-1, image.shape[-1])
    out = np.empty((flat.shape[1], bins))
    for c in range(flat.shape[1]):
        out[c] = np.bincount(_bin_index(flat[:, c], bins), minlength=bins) / flat.shape[0]
    return out


def reference_cdf(images, bins: int = BINS) -> np.ndarray:
    """Pooled per-channel CDF at the upper bin edges, shape ``(C, bins)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    hist = channel_histograms(images.reshape(-1, 1, images.shape[-1]), bins)
    cdf = np.cumsum(hist, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _inverse_cdf(u: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    """Inverse of the piecewise-linear CDF; empty bins are skipped."""
    bins = cdf.shape[0]
    mass = np.diff(np.concatenate([[0.0], cdf]))
    occupied = np.flatnonzero(mass > 0)
    u = np.asarray(u, dtype=np.float64)
    k = np.minimum(np.searchsorted(cdf[occupied], u, side="left"), len(occupied) - 1)
    j = occupied[k]
    frac = np.clip((u - (cdf[j] - mass[j])) / mass[j], 0.0, 1.0)
    return (j + frac) / bins


def histogram_normalize(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Map each channel through ``reference_cdf^-1(empirical_cdf(pixel))``.

    The empirical CDF is evaluated at the middle of each pixel's bin, so an
    image matched against its own CDF moves each pixel to its bin center.
    A constant channel is mapped to the reference median.
    """
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    bins = reference.shape[1]
    if np.any(np.diff(reference, axis=1) < -1e-12):
        raise WorldError("reference CDF must be monotone")
    out = np.empty_like(image)
    for c in range(image.shape[-1]):
        chan = image[..., c]
        if np.ptp(chan) == 0.0:
            out[..., c] = _inverse_cdf(np.array(0.5), reference[c])
            continue
        idx = _bin_index(chan.ravel(), bins)
        counts = np.bincount(idx, minlength=bins) / idx.size
        below = np.concatenate([[0.0], np.cumsum(counts)[:-1]])
        u = below[idx] + 0.5 * counts[idx]
        out[..., c] = _inverse_cdf(u, reference[c]).reshape(chan.shape)
    return np.clip(out, 0.0, 1.0)


def cdf_mean(reference: np.ndarray) -> np.ndarray:
    """Per-channel mean of the distribution described by a binned CDF."""
    bins = reference.shape[1]
    pdf = np.diff(np.concatenate([np.zeros((reference.shape[0], 1)), reference], axis=1), axis=1)
    centers = (np.arange(bins) + 0.5) / bins
    return pdf @ centers


class DomainTransform:
    """Image-to-image mapping identified by name; must keep pixels in [0, 1]."""

    name = "identity"

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float64)


class HistogramMatching(DomainTransform):
    name = "histogram"

    def __init__(self, reference: np.ndarray):
        self.reference = np.asarray(reference, dtype=np.float64)

    def __call__(self, image):
        return histogram_normalize(image, self.reference)


def save_reference_cdf(path: str | Path, reference: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "bin", "cumulative"])
        for c in range(reference.shape[0]):
            for b in range(reference.shape[1]):
                writer.writerow([c, b, repr(float(reference[c, b]))])


def load_reference_cdf(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_c = max(int(r["channel"]) for r in rows) + 1
    n_b = max(int(r["bin"]) for r in rows) + 1
    out = np.zeros((n_c, n_b))
    for r in rows:
        out[int(r["channel"]), int(r["bin"])] = float(r["cumulative"])
    return out


# -- world generation ----------------------------------------------------------

def _place_coords(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    step = 1.25 * spec.min_spacing_m
    row_gap = 1.5 * spec.min_spacing_m
    per_row = int(spec.area_m // step)
    if per_row < 1:
        raise WorldError("cannot satisfy spacing: area narrower than one step")
    n_rows = -(-spec.n_places // per_row)
    if (n_rows - 1) * row_gap > spec.area_m:
        raise WorldError(f"cannot satisfy spacing: {spec.n_places} places at "
                         f"{spec.min_spacing_m} m do not fit in {spec.area_m} m")
    phase = rng.uniform(0, 2 * np.pi)
    coords = []
    for i in range(spec.n_places):
        row, col = divmod(i, per_row)
        if row % 2:
            col = per_row - 1 - col
        x = (col + 0.5) * step + rng.uniform(-0.04, 0.04) * step
        y = row * row_gap + 0.08 * spec.min_spacing_m * np.sin(x / 150.0 + phase)
        coords.append((x, y))
    coords = np.array(coords)
    diff = coords[:, None, :] - coords[None]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    if dist.min() < spec.min_spacing_m:
        raise WorldError("cannot satisfy spacing")
    return coords


def _image_basis(spec: WorldSpec, rng: np.random.Generator):
    h, w, c = spec.image_shape
    n = spec.appearance_dims.stop - spec.appearance_dims.start
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    freqs = rng.uniform(0.5, 3.0, size=(n, 2)) * rng.choice([-1, 1], size=(n, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(n, c))
    basis = np.sin(2 * np.pi * (freqs[:, 0, None, None, None] * xx[None, :, :, None]
                                + freqs[:, 1, None, None, None] * yy[None, :, :, None])
                   + phases[:, None, None, :])
    return basis  # (n, h, w, c)


def _cloud_basis(spec: WorldSpec, rng: np.random.Generator):
    n = spec.geometry_dims.stop - spec.geometry_dims.start
    centers = rng.uniform(-1, 1, size=(n, 2))
    widths = rng.uniform(0.25, 0.6, size=n)
    return centers, widths


def render_image(latent: np.ndarray, basis: np.ndarray, rng: np.random.Generator,
                 spec: WorldSpec) -> np.ndarray:
    field = np.tensordot(latent, basis, axes=1) / np.sqrt(len(latent))
    image = 1.0 / (1.0 + np.exp(-1.6 * field))
    image = image + rng.normal(0.0, spec.pixel_noise, size=image.shape)
    h, w, c = spec.image_shape
    # uniform "vehicle" blocks carry no place information
    for _ in range(spec.clutter_blocks):
        bh, bw = rng.integers(4, 9, size=2)
        r0, c0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        image[r0:r0 + bh, c0:c0 + bw] = rng.uniform(0.2, 0.8, size=c)
    return np.clip(image, 0.0, 1.0)


def render_cloud(latent: np.ndarray, basis, rng: np.random.Generator, spec: WorldSpec,
                 dropout: float = 0.0) -> np.ndarray:
    centers, widths = basis
    m = spec.raw_points
    n_clutter = int(round(spec.clutter_fraction * m))
    xy = rng.uniform(-1, 1, size=(m - n_clutter, 2))
    d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
    height = (np.exp(-d2 / (2 * widths ** 2)) * latent).sum(-1) / np.sqrt(len(latent))
    structure = np.column_stack([xy, height])
    # ground clutter: flat, low, uninformative
    ground = np.column_stack([rng.uniform(-1, 1, size=(n_clutter, 2)),
                              np.full(n_clutter, -1.2) + rng.normal(0, 0.02, n_clutter)])
    pts = np.vstack([structure, ground])
    pts = pts + rng.normal(0.0, spec.point_noise, size=pts.shape)
    if dropout > 0:
        keep = rng.random(len(pts)) >= dropout
        if keep.sum() >= 1:
            pts = pts[keep]
    cloud = downsample(pts, spec.n_points, int(rng.integers(2 ** 31)))
    return normalize_cloud(cloud)


def _traversal(spec: WorldSpec, coords, latents, bases, stream: int, id_offset: int,
               night_mask: np.ndarray, t0: float) -> SceneDatabase:
    img_basis, cld_basis = bases
    scenes = []
    for i, (coord, z) in enumerate(zip(coords, latents)):
        # one stream per scene, so corrupting one scene never shifts the others
        rng = np.random.default_rng([spec.seed, stream, i])
        obs = z + rng.normal(0.0, spec.latent_noise, size=z.shape)
        image = render_image(obs[spec.appearance_dims], img_basis, rng, spec)
        night = bool(night_mask[i])
        if night:
            image = night_corrupt(image, spec.gamma, spec.noise_sigma, int(rng.integers(2 ** 31)))
        cloud = render_cloud(obs[spec.geometry_dims], cld_basis, rng, spec,
                             dropout=spec.point_dropout if night else 0.0)
        t_place = t0 + 1.0 + 2.0 * i
        scenes.append(Scene(
            id=id_offset + i,
            image=image,
            cloud=cloud,
            coord=coord + rng.normal(0.0, spec.coord_jitter_m, size=2),
            t_image=t_place + rng.uniform(-0.2, 0.2),
            t_cloud=t_place + rng.uniform(-0.2, 0.2),
            night=night,
        ))
    return SceneDatabase(tuple(scenes), "test")


def generate_world(spec: WorldSpec) -> tuple[SceneDatabase, SceneDatabase]:
    """Return ``(database_traversal, query_traversal)``.

    Database ids are ``0 .. n-1`` and the query for place ``i`` has id
    ``n + i``.  Only the query traversal receives night corruption.
    """
    rng = np.random.default_rng([spec.seed, 0])
    coords = _place_coords(spec, rng)
    latents = rng.normal(0.0, 1.0, size=(spec.n_places, spec.latent_dim))
    # the rendering model is shared by every world built with the same render_seed
    render_rng = np.random.default_rng([spec.render_seed, 99])
    bases = (_image_basis(spec, render_rng), _cloud_basis(spec, render_rng))
    n_night = int(round(spec.night_fraction * spec.n_places))
    night = np.zeros(spec.n_places, dtype=bool)
    night[rng.permutation(spec.n_places)[:n_night]] = True
    db = _traversal(spec, coords, latents, bases, 1, 0, np.zeros(spec.n_places, bool), 0.0)
    queries = _traversal(spec, coords, latents, bases, 2, spec.n_places, night, 10_000.0)
    return db, queries

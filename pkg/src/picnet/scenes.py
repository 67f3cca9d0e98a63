"""Scene data model, dataset preparation rules and on-disk scene databases.

A scene pairs one camera image with one point-cloud submap captured at a
planar world coordinate.  Databases are persisted as a directory holding
``scenes.jsonl`` plus one little-endian binary file per image and cloud.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_POINTS = 128
DEFAULT_IMAGE_SHAPE = (32, 32, 3)


class SceneError(ValueError):
    """Raised on invalid scene data or preparation requests."""


@dataclass(frozen=True)
class Scene:
    id: int
    image: np.ndarray  # H x W x C in [0, 1]
    cloud: np.ndarray  # N x 3
    coord: np.ndarray  # (x, y) meters
    t_image: float = 0.0
    t_cloud: float = 0.0
    night: bool = False

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        cloud = np.asarray(self.cloud, dtype=np.float64)
        coord = np.asarray(self.coord, dtype=np.float64).reshape(2)
        if image.ndim != 3:
            raise SceneError(f"scene {self.id}: image must be H x W x C, got {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise SceneError(f"scene {self.id}: image values outside [0, 1]")
        if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
            raise SceneError(f"scene {self.id}: cloud must be N x 3, got {cloud.shape}")
        if not np.all(np.isfinite(coord)):
            raise SceneError(f"scene {self.id}: non-finite coordinate")
        for t in (self.t_image, self.t_cloud):
            if not np.isfinite(t) or t < 0:
                raise SceneError(f"scene {self.id}: invalid timestamp {t}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "cloud", cloud)
        object.__setattr__(self, "coord", coord)


@dataclass(frozen=True)
class SceneDatabase:
    scenes: tuple[Scene, ...]
    split_tag: str = "test"
    ids: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        scenes = tuple(self.scenes)
        ids = tuple(s.id for s in scenes)
        if len(set(ids)) != len(ids):
            raise SceneError("scene ids must be unique within a database")
        if self.split_tag not in ("train", "test"):
            raise SceneError(f"unknown split tag {self.split_tag!r}")
        object.__setattr__(self, "scenes", scenes)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    @property
    def coords(self) -> np.ndarray:
        return np.stack([s.coord for s in self.scenes]) if self.scenes else np.zeros((0, 2))

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])

    def clouds(self) -> np.ndarray:
        return np.stack([s.cloud for s in self.scenes])


def pair_by_timestamp(images: Sequence, clouds: Sequence) -> list[tuple[int, int]]:
    """Pair every cloud with the image whose timestamp is closest.

    ``images`` and ``clouds`` are sequences of ``(timestamp, payload)``.
    Returns ``(image_index, cloud_index)`` pairs in cloud order.  Ties go to
    the smaller image index.
    """
    if len(images) == 0 or len(clouds) == 0:
        raise SceneError("no candidates")
    t_img = np.array([float(t) for t, _ in images])
    t_cld = np.array([float(t) for t, _ in clouds])
    order = np.argsort(t_img, kind="stable")
    sorted_t = t_img[order]
    pairs = []
    for k, tc in enumerate(t_cld):
        pos = int(np.searchsorted(sorted_t, tc))
        candidates = set()
        # every image sharing the neighbouring timestamp values competes
        for p in (pos - 1, pos):
            if 0 <= p < len(sorted_t):
                tv = sorted_t[p]
                lo = np.searchsorted(sorted_t, tv, side="left")
                hi = np.searchsorted(sorted_t, tv, side="right")
                candidates.update(int(i) for i in order[lo:hi])
        best = min(candidates, key=lambda i: (abs(t_img[i] - tc), i))
        pairs.append((best, k))
    return pairs


def downsample(points: np.ndarray, target: int, seed: int) -> np.ndarray:
    """Seeded uniform sampling of ``target`` rows (with replacement only if short)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise SceneError("downsample needs at least one point")
    if target < 1:
        raise SceneError("target must be >= 1")
    rng = np.random.default_rng(seed)
    m = points.shape[0]
    idx = rng.choice(m, size=target, replace=m < target)
    return points[idx].copy()


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale by the max absolute coordinate."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise SceneError("normalize_cloud needs at least one point")
    centered = points - points.mean(axis=0)
    s = np.abs(centered).max()
    if s == 0.0:
        raise SceneError("degenerate cloud")
    return centered / s


def split_by_spacing(scenes: Sequence[Scene], train_overlap_m: float,
                     test_spacing_m: float) -> tuple[SceneDatabase, SceneDatabase]:
    """Split a trajectory-ordered scene list into train and test databases.

    Test scenes are picked greedily in id order so that every pair is at
    least ``test_spacing_m`` apart.  The remaining scenes are thinned along
    the trajectory: a scene is dropped only when the next candidate is still
    within ``train_overlap_m`` of the last kept one, so consecutive kept
    train scenes stay at most ``train_overlap_m`` apart wherever the input
    allows it.
    """
    if len(scenes) < 2:
        raise SceneError("need at least 2 scenes to split")
    ordered = sorted(scenes, key=lambda s: s.id)
    test: list[Scene] = []
    rest: list[Scene] = []
    for s in ordered:
        if all(np.linalg.norm(s.coord - t.coord) >= test_spacing_m for t in test):
            test.append(s)
        else:
            rest.append(s)

    train: list[Scene] = []
    for i, s in enumerate(rest):
        if not train or i == len(rest) - 1:
            train.append(s)
            continue
        nxt = rest[i + 1]
        if np.linalg.norm(nxt.coord - train[-1].coord) > train_overlap_m:
            train.append(s)
    return SceneDatabase(tuple(train), "train"), SceneDatabase(tuple(test), "test")


# -- persistence -------------------------------------------------------------

def write_cloud(path: Path, points: np.ndarray) -> None:
    points = np.ascontiguousarray(points, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", points.shape[0]))
        fh.write(points.tobytes())


def read_cloud(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    arr = np.frombuffer(data, dtype="<f8", offset=4)
    if arr.size != 3 * n:
        raise SceneError(f"{path}: expected {3 * n} values, found {arr.size}")
    return arr.reshape(n, 3).astype(np.float64)


def write_image(path: Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *image.shape))
        fh.write(image.tobytes())


def read_image(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w, c = struct.unpack_from("<3I", data, 0)
    arr = np.frombuffer(data, dtype="<f8", offset=12)
    if arr.size != h * w * c:
        raise SceneError(f"{path}: expected {h * w * c} values, found {arr.size}")
    return arr.reshape(h, w, c).astype(np.float64)


def save_database(db: SceneDatabase, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "clouds").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in db.scenes:
        img_rel = f"images/{s.id:06d}.bin"
        cld_rel = f"clouds/{s.id:06d}.bin"
        write_image(directory / img_rel, s.image)
        write_cloud(directory / cld_rel, s.cloud)
        record = {
            "id": s.id,
            "coord": [float(s.coord[0]), float(s.coord[1])],
            "t_image": float(s.t_image),
            "t_cloud": float(s.t_cloud),
            "night": bool(s.night),
            "image": img_rel,
            "cloud": cld_rel,
        }
        lines.append(json.dumps(record, sort_keys=True))
    meta = {"split_tag": db.split_tag, "count": len(db)}
    (directory / "scenes.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    (directory / "database.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return directory


def load_database(directory: str | Path) -> SceneDatabase:
    directory = Path(directory)
    index = directory / "scenes.jsonl"
    if not index.exists():
        raise SceneError(f"no scenes.jsonl in {directory}")
    split_tag = "test"
    meta_path = directory / "database.json"
    if meta_path.exists():
        split_tag = json.loads(meta_path.read_text())["split_tag"]
    scenes = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        scenes.append(Scene(
            id=int(rec["id"]),
            image=read_image(directory / rec["image"]),
            cloud=read_cloud(directory / rec["cloud"]),
            coord=np.array(rec["coord"], dtype=np.float64),
            t_image=float(rec["t_image"]),
            t_cloud=float(rec["t_cloud"]),
            night=bool(rec.get("night", False)),
        ))
    return SceneDatabase(tuple(scenes), split_tag)

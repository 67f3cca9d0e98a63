"""Descriptor databases and the recall@N / recall@1% evaluation protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import Model, encode_scenes

SUCCESS_RADIUS_M = 25.0
MAX_RANK = 25


@dataclass(frozen=True)
class DescriptorDatabase:
    descriptors: np.ndarray  # n x D
    coords: np.ndarray  # n x 2
    ids: np.ndarray  # n

    def __post_init__(self):
        n = self.descriptors.shape[0]
        if n < 1:
            raise ValueError("descriptor database must not be empty")
        if self.coords.shape != (n, 2) or self.ids.shape != (n,):
            raise ValueError("coords / ids do not match descriptor count")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("database descriptors must be unit-norm")

    def __len__(self):
        return self.descriptors.shape[0]


@dataclass(frozen=True)
class RecallReport:
    recall_at_rank: np.ndarray  # recall at ranks 1..25
    recall_at_1pct: float
    n_queries: int
    k_1pct: int

    def to_dict(self) -> dict:
        return {
            "recall_at_rank": [float(v) for v in self.recall_at_rank],
            "recall_at_1pct": float(self.recall_at_1pct),
            "n_queries": int(self.n_queries),
            "k_1pct": int(self.k_1pct),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecallReport":
        return cls(np.array(d["recall_at_rank"], dtype=np.float64), float(d["recall_at_1pct"]),
                   int(d["n_queries"]), int(d["k_1pct"]))

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            self.save_csv(csv_path)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "recall"])
            for r, v in enumerate(self.recall_at_rank, start=1):
                writer.writerow([r, repr(float(v))])

    @classmethod
    def load(cls, json_path: str | Path) -> "RecallReport":
        return cls.from_dict(json.loads(Path(json_path).read_text()))


def build_database(scenes, model: Model) -> DescriptorDatabase:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes to index")
    try:
        desc = encode_scenes(scenes, model)
    except ArithmeticError:
        # re-run one at a time to name the offending scene
        for s in scenes:
            try:
                encode_scenes([s], model)
            except ArithmeticError as exc:
                raise type(exc)(f"scene {s.id}: {exc}") from exc
        raise
    return DescriptorDatabase(desc, np.stack([s.coord for s in scenes]),
                              np.array([s.id for s in scenes]))


def query_topk(q: np.ndarray, db: DescriptorDatabase, k: int) -> list[tuple[int, float]]:
    """Exact top-k by Euclidean distance; ties go to the lower id."""
    n = len(db)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    dist = np.sqrt(np.sum((db.descriptors - np.asarray(q)) ** 2, axis=1))
    order = np.lexsort((db.ids, dist))[:k]
    return [(int(db.ids[i]), float(dist[i])) for i in order]


def is_success(q_coord, r_coord, radius_m: float = SUCCESS_RADIUS_M) -> bool:
    d = np.asarray(q_coord, dtype=np.float64) - np.asarray(r_coord, dtype=np.float64)
    return bool(np.sqrt(d @ d) <= radius_m)


def k_one_percent(n: int) -> int:
    # Python's round() is half-to-even
    return max(1, round(0.01 * n))


def evaluate(queries, db: DescriptorDatabase, radius_m: float = SUCCESS_RADIUS_M) -> RecallReport:
    """Recall at ranks 1..25 and at the top 1% of the database.

    ``queries`` is a sequence of ``(descriptor, coord)`` pairs.  A query
    counts at rank r when any of its top-r results lies within ``radius_m``.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("no queries to evaluate")
    n = len(db)
    k1 = k_one_percent(n)
    depth = min(n, max(MAX_RANK, k1))
    id_to_row = {int(i): r for r, i in enumerate(db.ids)}
    first_hit = np.full(len(queries), np.inf)
    for qi, (desc, coord) in enumerate(queries):
        for rank, (rid, _) in enumerate(query_topk(desc, db, depth), start=1):
            if is_success(coord, db.coords[id_to_row[rid]], radius_m):
                first_hit[qi] = rank
                break
    ranks = np.arange(1, MAX_RANK + 1)
    recall = np.array([(first_hit <= r).mean() for r in ranks])
    return RecallReport(recall, float((first_hit <= k1).mean()), len(queries), k1)


def evaluate_scenes(query_scenes, db_scenes, model: Model,
                    radius_m: float = SUCCESS_RADIUS_M) -> RecallReport:
    db = build_database(db_scenes, model)
    query_scenes = list(query_scenes)
    if not query_scenes:
        raise ValueError("no queries to evaluate")
    qdesc = encode_scenes(query_scenes, model)
    return evaluate([(d, s.coord) for d, s in zip(qdesc, query_scenes)], db, radius_m)

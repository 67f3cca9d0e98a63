"""Benchmark runs: train on one synthetic world, evaluate on another.

A benchmark seed ``s`` fixes a training world (world seed ``s + 1000``) and
a test world (world seed ``s``); both share the rendering model so features
learned on one transfer to the other.  The training set is the union of the
training world's two traversals; the test protocol indexes the test world's
database traversal and queries it with the (partly night) query traversal.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .daynight import WorldSpec, generate_world
from .fusion import PipelineConfig, encode_scenes
from .retrieval import SUCCESS_RADIUS_M, RecallReport, build_database, evaluate, k_one_percent
from .scenes import SceneDatabase
from .training import TrainParams, train

log = logging.getLogger(__name__)

TRAIN_SEED_OFFSET = 1000
ABLATION_VARIANTS = ("image-only", "point-only", "PIC-01", "PIC-02", "PIC-03", "PIC-04")


def variant_config(name: str, base: PipelineConfig, daynight: bool = False) -> PipelineConfig:
    """Config for ``image-only``, ``point-only`` or ``PIC-0x`` on top of ``base``."""
    if name == "image-only":
        cfg = replace(base, modalities="image", vlad_flavor="netvlad", gca_enabled=False)
    elif name == "point-only":
        cfg = replace(base, modalities="point", vlad_flavor="netvlad", gca_enabled=False)
    else:
        cfg = PipelineConfig.pic(name, **{k: v for k, v in base.to_dict().items()
                                         if k not in ("vlad_flavor", "gca_enabled")})
        cfg = replace(cfg, modalities="both")
    return replace(cfg, daynight_enabled=daynight)


def ablation_matrix(variants=ABLATION_VARIANTS) -> list[tuple[str, bool]]:
    """(variant, daynight) pairs.  Every variant with an image branch also runs with
    histogram normalization; point-only runs once since normalization cannot reach it."""
    out = []
    for v in variants:
        out.append((v, False))
        if v != "point-only":
            out.append((v, True))
    return out


def training_database(world: WorldSpec, seed: int) -> SceneDatabase:
    spec = replace(world, seed=seed + TRAIN_SEED_OFFSET)
    a, b = generate_world(spec)
    return SceneDatabase(a.scenes + b.scenes, "train")


def test_traversals(world: WorldSpec, seed: int):
    return generate_world(replace(world, seed=seed))


@dataclass
class VariantResult:
    variant: str
    seed: int
    daynight: bool
    recall_at_1pct: float
    recall_at_1: float
    night_recall_at_1pct: float
    day_recall_at_1pct: float
    report: RecallReport
    final_loss: float
    seconds: float

    def row(self) -> dict:
        return {
            "variant": self.variant,
            "daynight": int(self.daynight),
            "seed": self.seed,
            "recall_at_1pct": round(100 * self.recall_at_1pct, 4),
            "recall_at_1": round(100 * self.recall_at_1, 4),
            "night_recall_at_1pct": round(100 * self.night_recall_at_1pct, 4),
            "day_recall_at_1pct": round(100 * self.day_recall_at_1pct, 4),
            "final_loss": round(self.final_loss, 6),
        }


def _subset_recall(qdesc, queries, db, mask, radius_m) -> float:
    if not mask.any():
        return float("nan")
    pairs = [(d, s.coord) for d, s, m in zip(qdesc, queries, mask) if m]
    return evaluate(pairs, db, radius_m).recall_at_1pct


def evaluate_model(model, db_trav: SceneDatabase, q_trav: SceneDatabase,
                   radius_m: float = SUCCESS_RADIUS_M):
    """``(report, night recall@1%, day recall@1%)``; a subset recall is NaN when empty."""
    db = build_database(db_trav.scenes, model)
    qdesc = encode_scenes(q_trav.scenes, model)
    report = evaluate([(d, s.coord) for d, s in zip(qdesc, q_trav.scenes)], db, radius_m)
    night = np.array([s.night for s in q_trav.scenes])
    return (report, _subset_recall(qdesc, q_trav.scenes, db, night, radius_m),
            _subset_recall(qdesc, q_trav.scenes, db, ~night, radius_m))


def run_variant(variant: str, seed: int, world: WorldSpec, base: PipelineConfig,
                hp: TrainParams, daynight: bool = False, data=None,
                radius_m: float = SUCCESS_RADIUS_M) -> VariantResult:
    """Train ``variant`` on the seed's training world and evaluate on its test world."""
    t0 = time.perf_counter()
    cfg = variant_config(variant, base, daynight)
    if data is None:
        data = (training_database(world, seed), *test_traversals(world, seed))
    train_db, db_trav, q_trav = data
    result = train(train_db, cfg, hp, seed=seed)
    report, night, day = evaluate_model(result.model, db_trav, q_trav, radius_m)
    name = cfg.name
    log.info("%s seed %d: recall@1%% %.2f (night %.2f)", name, seed,
             100 * report.recall_at_1pct, 100 * night)
    return VariantResult(name, seed, daynight, report.recall_at_1pct,
                         float(report.recall_at_rank[0]), night, day, report,
                         float(result.history[-1]) if result.history else float("nan"),
                         time.perf_counter() - t0)


__all__ = ["ABLATION_VARIANTS", "VariantResult", "ablation_matrix", "k_one_percent",
           "run_variant", "training_database", "test_traversals", "variant_config",
           "evaluate_model"]

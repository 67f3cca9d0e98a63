"""Acceptance suite.  Each test checks one criterion at its stated tolerance and
logs a PASS/FAIL line that the terminal summary prints (see conftest.py).

The benchmark criteria (fusion, attention, day-night) share one run of the
default ablation matrix over five seeds, written through the ``ablate`` command.
"""

import csv
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from picnet import certify
from picnet.aggregation import VladParams, att_vlad, net_vlad, soft_assign, spatial_attention
from picnet.cli import cmd_ablate, run
from picnet.config import ExperimentConfig
from picnet.daynight import WorldSpec, generate_world
from picnet.experiments import evaluate_model
from picnet.fusion import PipelineConfig, encode_forward, init_model
from picnet.retrieval import DescriptorDatabase, evaluate, k_one_percent, query_topk
from picnet.scenes import SceneDatabase, pair_by_timestamp
from picnet.training import TrainParams, lazy_quadruplet_loss, train

SEEDS = (0, 1, 2, 3, 4)


# -- independent oracles --------------------------------------------------------

def loop_vlad(fmap, att, assign, centers):
    t, d = fmap.shape
    blocks = []
    for k in range(centers.shape[0]):
        v = [sum(att[l] * assign[l, k] * (fmap[l, j] - centers[k, j]) for l in range(t))
             for j in range(d)]
        n = sum(x * x for x in v) ** 0.5
        blocks.extend(x / n for x in v)
    n = sum(x * x for x in blocks) ** 0.5
    return np.array([x / n for x in blocks])


def loop_loss(a, pos, neg, dec, alpha, beta):
    def d(x, y):
        return sum((xi - yi) ** 2 for xi, yi in zip(x, y))

    delta = min(d(a, p) for p in pos)
    return (max(0.0, max(alpha + delta - d(a, n) for n in neg))
            + max(0.0, max(beta + delta - d(dec, n) for n in neg)))


def sorted_ids(q, db):
    keys = [(float(np.linalg.norm(db.descriptors[i] - q)), int(db.ids[i])) for i in range(len(db))]
    return [i for _, i in sorted(keys)]


def recount(queries, db, radius=25.0):
    k1 = max(1, round(0.01 * len(db)))
    coord_of = {int(i): c for i, c in zip(db.ids, db.coords)}
    first = []
    for desc, coord in queries:
        hits = [r for r, i in enumerate(sorted_ids(desc, db), start=1)
                if np.hypot(*(coord_of[i] - coord)) <= radius]
        first.append(hits[0] if hits else None)
    at = [sum(h is not None and h <= r for h in first) / len(first) for r in range(1, 26)]
    return at, sum(h is not None and h <= k1 for h in first) / len(first)


def brute_pairs(ti, tc):
    return [(min(range(len(ti)), key=lambda i: (abs(ti[i] - c), i)), k) for k, c in enumerate(tc)]


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- 1. gradient certification --------------------------------------------------

def test_gradient_certification(record):
    t0 = time.perf_counter()
    results = certify.run_checks(seeds=range(5))
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed and r.seeds >= 5 for r in results) and elapsed < 120
    record(1, "gradient certification", ok,
           f"{len(results)} ops x 5 seeds, worst {worst.op} {worst.max_rel_error:.2e} "
           f"(tol {certify.TOLERANCE:g}, h {certify.STEP:g}), {elapsed:.1f} s")
    assert ok


# -- 2. oracle equivalence ------------------------------------------------------

def test_oracle_equivalence(record):
    rng = np.random.default_rng(2)
    vlad_err = 0.0
    for _ in range(100):
        t, d, k = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        fmap = rng.normal(size=(t, d))
        p = VladParams(rng.normal(size=(k, d)), rng.normal(size=(k, d)), rng.normal(size=k),
                       rng.normal(size=d), rng.normal(size=1))
        att, assign = spatial_attention(fmap, p), soft_assign(fmap, p)
        got = att_vlad(fmap, att, assign, p)
        vlad_err = max(vlad_err, np.abs(got - loop_vlad(fmap, att, assign, p.centers)).max())

    loss_err = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        a, p, n, dec = (rng.normal(size=d), rng.normal(size=(int(rng.integers(1, 5)), d)),
                        rng.normal(size=(int(rng.integers(1, 8)), d)), rng.normal(size=d))
        loss_err = max(loss_err, abs(lazy_quadruplet_loss(a, p, n, dec, 0.5, 0.2)
                                     - loop_loss(a, p, n, dec, 0.5, 0.2)))

    topk_ok, recall_ok = True, True
    for s in range(5):
        r = np.random.default_rng(100 + s)
        db = DescriptorDatabase(unit_rows(r, 300, 8), r.uniform(0, 200, (300, 2)),
                                r.permutation(3000)[:300])
        queries = list(zip(unit_rows(r, 30, 8), r.uniform(0, 200, (30, 2))))
        for q, _ in queries[:10]:
            topk_ok &= [i for i, _ in query_topk(q, db, len(db))] == sorted_ids(q, db)
        rep = evaluate(queries, db)
        at, at1 = recount(queries, db)
        recall_ok &= list(rep.recall_at_rank) == at and rep.recall_at_1pct == at1

    ok = vlad_err <= 1e-12 and loss_err <= 1e-12 and topk_ok and recall_ok
    record(2, "oracle equivalence", ok,
           f"att_vlad max err {vlad_err:.1e}, loss max err {loss_err:.1e}, "
           f"top-k exact {topk_ok}, recall recount exact {recall_ok}")
    assert ok


# -- 3. structural invariants ---------------------------------------------------

def test_structural_invariants(record):
    rng = np.random.default_rng(3)
    cfg = PipelineConfig.pic("PIC-04", gate_sigmoid=True)
    model = init_model(cfg, rng)
    h, w, c = cfg.image_shape
    images = rng.uniform(0, 1, size=(100, h, w, c))
    clouds = rng.normal(size=(100, cfg.n_points, 3))
    desc, _ = encode_forward(images, clouds, model)
    norm_err = np.abs(np.linalg.norm(desc, axis=1) - 1).max()

    point_model = init_model(replace(cfg, modalities="point"), rng)
    perm = np.stack([cl[rng.permutation(cfg.n_points)] for cl in clouds])
    perm_err = np.abs(encode_forward(None, clouds, point_model)[0]
                      - encode_forward(None, perm, point_model)[0]).max()

    unit_err = 0.0
    for _ in range(100):
        t, d, k = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        fmap = rng.normal(size=(t, d))
        p = VladParams(rng.normal(size=(k, d)), rng.normal(size=(k, d)), rng.normal(size=k),
                       np.zeros(d), np.zeros(1))
        a = soft_assign(fmap, p)
        unit_err = max(unit_err, np.abs(att_vlad(fmap, np.ones(t), a, p)
                                        - net_vlad(fmap, a, p)).max())

    monotone = True
    for s in range(20):
        r = np.random.default_rng(300 + s)
        db = DescriptorDatabase(unit_rows(r, 100, 6), r.uniform(0, 150, (100, 2)), np.arange(100))
        rep = evaluate(list(zip(unit_rows(r, 20, 6), r.uniform(0, 150, (20, 2)))), db)
        monotone &= bool(np.all(np.diff(rep.recall_at_rank) >= 0))

    ok = norm_err <= 1e-9 and perm_err <= 1e-9 and unit_err <= 1e-15 and monotone
    record(3, "structural invariants", ok,
           f"unit-norm err {norm_err:.1e}, permutation err {perm_err:.1e}, "
           f"unit attention vs net_vlad {unit_err:.1e}, monotone curves {monotone}")
    assert ok


# -- 4. timestamp pairing and top-1% rounding -----------------------------------

def test_pairing_and_rounding(record):
    rng = np.random.default_rng(4)
    agree = 0
    for i in range(1000):
        n_i, n_c = int(rng.integers(1, 15)), int(rng.integers(1, 15))
        # half the sets use integer stamps so exact ties are exercised
        if i % 2:
            ti, tc = rng.integers(0, 10, n_i).astype(float), rng.integers(0, 10, n_c).astype(float)
        else:
            ti, tc = rng.uniform(0, 100, n_i), rng.uniform(0, 100, n_c)
        got = pair_by_timestamp([(t, None) for t in ti], [(t, None) for t in tc])
        agree += got == brute_pairs(list(ti), list(tc))
    ok = agree == 1000 and k_one_percent(3030) == 30
    record(4, "timestamp pairing", ok,
           f"{agree}/1000 sets agree with brute force, k_1pct(3030) = {k_one_percent(3030)}")
    assert ok


# -- 5-7. the default benchmark -------------------------------------------------

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    base = ExperimentConfig()
    out = tmp_path_factory.mktemp("benchmark")
    cfg = replace(base, run=replace(base.run, output=str(out), seeds=SEEDS))
    t0 = time.perf_counter()
    cmd_ablate(cfg)
    elapsed = time.perf_counter() - t0
    with open(out / "runs.csv") as fh:
        rows = list(csv.DictReader(fh))
    table = {}
    for r in rows:
        table.setdefault(r["variant"], {})[int(r["seed"])] = {
            k: float(v) for k, v in r.items() if k not in ("variant",)}
    return table, elapsed


def _mean(table, variant, key="recall_at_1pct"):
    return float(np.mean([table[variant][s][key] for s in SEEDS]))


def test_fusion_beats_single_modalities(benchmark, record):
    table, elapsed = benchmark
    fused = _mean(table, "PIC-01")
    image, point = _mean(table, "image-only"), _mean(table, "point-only")
    ok = fused >= max(image, point) + 3.0 and elapsed < 1800
    record(5, "fusion trend", ok,
           f"PIC-01 {fused:.2f} vs image-only {image:.2f}, point-only {point:.2f} "
           f"(need +3.00), full matrix {elapsed / 60:.1f} min")
    assert ok


def test_attention_trends(benchmark, record):
    table, _ = benchmark
    names = ("PIC-01", "PIC-02", "PIC-03", "PIC-04")
    means = {n: _mean(table, n) for n in names}
    best = sum(table["PIC-04"][s]["recall_at_1pct"]
               >= max(table[n][s]["recall_at_1pct"] for n in names) for s in SEEDS)
    ok = (means["PIC-02"] >= means["PIC-01"] and means["PIC-04"] >= means["PIC-02"]
          and best >= 3)
    record(6, "attention trend", ok,
           ", ".join(f"{n} {m:.2f}" for n, m in means.items())
           + f"; PIC-04 best in {best}/5 seeds")
    assert ok


def test_daynight_helps_image_branch_at_night(benchmark, record):
    table, _ = benchmark
    plain = _mean(table, "image-only", "night_recall_at_1pct")
    normalized = _mean(table, "image-only-dn", "night_recall_at_1pct")
    ok = normalized - plain > 0
    record(7, "day-night trend", ok,
           f"image-only night recall@1% {plain:.2f} -> {normalized:.2f} with normalization")
    assert ok


# -- 8. overfit sanity ----------------------------------------------------------

def test_overfit_ten_scenes(record):
    # five well-separated places seen twice each: ten scenes
    db, q = generate_world(WorldSpec(n_places=5, min_spacing_m=150.0, seed=3))
    scenes = SceneDatabase(db.scenes + q.scenes, "train")
    hp = TrainParams(steps=500, n_pos=1, n_neg=3)
    res = train(scenes, ExperimentConfig().pipeline, hp, seed=0)
    rep, _, _ = evaluate_model(res.model, db, q)
    back, _, _ = evaluate_model(res.model, q, db)
    r1 = min(rep.recall_at_rank[0], back.recall_at_rank[0])
    ok = len(scenes) == 10 and r1 == 1.0
    record(8, "overfit sanity", ok,
           f"recall@1 {100 * r1:.0f}% on the training scenes after {hp.steps} steps, "
           f"final loss {res.history[-1]:.4f}")
    assert ok


# -- 9. determinism ---------------------------------------------------------------

def test_reruns_are_byte_identical(tmp_path, monkeypatch, record):
    monkeypatch.setenv("PICNET_OUTPUT_ROOT", str(tmp_path))
    out = tmp_path / "rerun"
    names = ("manifest.json", "loss.csv", "report.json", "recall.csv")
    snaps = []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        codes = [run(["generate", "--out", "rerun"]),
                 run(["train", "--out", "rerun", "--daynight"]),
                 run(["eval", "--out", "rerun"])]
        assert codes == [0, 0, 0]
        snaps.append({n: (out / n).read_bytes() for n in names})
    same = [n for n in names if snaps[0][n] == snaps[1][n]]
    ok = len(same) == len(names)
    record(9, "determinism", ok, f"{len(same)}/{len(names)} artifacts byte-identical "
                                 f"({', '.join(names)})")
    assert ok


"""``picnet`` command line: generate, train, eval, gradcheck, ablate, print-config.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure
(divergence, zero descriptor, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import certify
from .backbones import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .daynight import save_reference_cdf
from .experiments import (TRAIN_SEED_OFFSET, ablation_matrix, evaluate_model, run_variant,
                          test_traversals, training_database, variant_config)
from .fusion import Model, PipelineConfig
from .plotting import plot_ablation, plot_loss, plot_recall_curves
from .scenes import load_database, save_database
from .training import save_history, train

log = logging.getLogger("picnet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class NumericalFailure(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    run = cfg.run
    if getattr(args, "out", None):
        run = replace(run, output=args.out)
    if getattr(args, "seed", None) is not None:
        run = replace(run, seed=args.seed)
    if getattr(args, "seeds", None):
        run = replace(run, seeds=tuple(int(s) for s in args.seeds.split(",")))
    if getattr(args, "variant", None):
        run = replace(run, variant=args.variant)
    if getattr(args, "daynight", False):
        run = replace(run, daynight=True)
    if getattr(args, "variants", None):
        run = replace(run, variants=tuple(args.variants.split(",")))
    return replace(cfg, run=run)


# -- generate ---------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Write the training set and the test traversals for ``run.seed``."""
    out = cfg.output_dir()
    data = out / "data"
    seed = cfg.run.seed
    train_db = training_database(cfg.world, seed)
    db_trav, q_trav = test_traversals(cfg.world, seed)
    for name, db in (("train", train_db), ("db", db_trav), ("query", q_trav)):
        save_database(db, data / name)
    files = sorted(p for p in data.rglob("*") if p.is_file())
    manifest = {
        "seed": seed,
        "train_world_seed": seed + TRAIN_SEED_OFFSET,
        "world": cfg.world.to_dict(),
        "counts": {"train": len(train_db), "db": len(db_trav), "query": len(q_trav)},
        "night_queries": int(sum(s.night for s in q_trav)),
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"generated {len(train_db)} training scenes, {len(db_trav)} database and "
          f"{len(q_trav)} query scenes ({manifest['night_queries']} night) in {data}")
    return out / "manifest.json"


def _load_split(out: Path, name: str):
    path = out / "data" / name
    if not (path / "scenes.jsonl").exists():
        raise FileNotFoundError(f"{path} has no scene database; run `picnet generate` first")
    return load_database(path)


# -- train ------------------------------------------------------------------------

def _model_config(cfg: ExperimentConfig) -> PipelineConfig:
    return variant_config(cfg.run.variant, cfg.pipeline, cfg.run.daynight)


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir()
    train_db = _load_split(out, "train")
    model_cfg = _model_config(cfg)
    result = train(train_db, model_cfg, cfg.train, seed=cfg.run.seed)
    meta = {"pipeline": model_cfg.to_dict(), "variant": model_cfg.name, "seed": cfg.run.seed,
            "train": cfg.train.to_dict()}
    save_checkpoint(out / "model.ckpt", result.model.tensors(), meta)
    save_history(out / "loss.csv", result.history)
    plot_loss(result.history, out / "loss.png")
    if "reference_cdf" in result.model.buffers:
        save_reference_cdf(out / "reference_cdf.csv", result.model.buffers["reference_cdf"])
    print(f"trained {model_cfg.name} for {len(result.history)} steps; "
          f"final loss {result.history[-1] if result.history else float('nan'):.4f}")
    return out / "model.ckpt"


def load_model(path: Path) -> Model:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `picnet train` first")
    tensors, meta = load_checkpoint(path)
    pipe = dict(meta["pipeline"])
    return Model.from_tensors(PipelineConfig(**pipe), tensors)


# -- eval -------------------------------------------------------------------------

def cmd_eval(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir()
    model = load_model(out / "model.ckpt")
    db_trav, q_trav = _load_split(out, "db"), _load_split(out, "query")
    if len(q_trav) == 0:
        raise ValueError("no queries to evaluate")
    report, night, day = evaluate_model(model, db_trav, q_trav, cfg.run.radius_m)
    body = report.to_dict()
    body.update({
        "variant": model.config.name,
        "seed": cfg.run.seed,
        "n_database": len(db_trav),
        "radius_m": cfg.run.radius_m,
        "night_queries": int(sum(s.night for s in q_trav)),
        "night_recall_at_1pct": None if np.isnan(night) else float(night),
        "day_recall_at_1pct": None if np.isnan(day) else float(day),
    })
    _write_json(out / "report.json", body)
    report.save_csv(out / "recall.csv")
    plot_recall_curves({model.config.name: report.recall_at_rank}, out / "recall.png",
                       title=f"{model.config.name}, seed {cfg.run.seed}")
    print(f"{model.config.name}: recall@1% {100 * report.recall_at_1pct:.2f} "
          f"(k={report.k_1pct}), recall@1 {100 * report.recall_at_rank[0]:.2f}, "
          f"night {100 * night:.2f}, day {100 * day:.2f}")
    return out / "report.json"


# -- gradcheck --------------------------------------------------------------------

def cmd_gradcheck(cfg: ExperimentConfig, n_seeds: int = 5, perturb: dict | None = None) -> bool:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    results = certify.run_checks(seeds=range(n_seeds), perturb=perturb)
    rows = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.op:34s} max rel err {r.max_rel_error:.3e} "
              f"({r.seeds} seeds, {r.seconds:.2f} s)")
        rows.append({"op": r.op, "max_rel_error": r.max_rel_error, "seeds": r.seeds,
                     "passed": r.passed})
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["op", "max_rel_error", "seeds", "passed"])
        writer.writeheader()
        writer.writerows(rows)
    ok = all(r.passed for r in results)
    _write_json(out / "gradcheck.json", {"tolerance": certify.TOLERANCE, "step": certify.STEP,
                                         "passed": ok, "ops": rows})
    return ok


# -- ablate -----------------------------------------------------------------------

ROW_FIELDS = ["variant", "daynight", "seed", "recall_at_1pct", "recall_at_1",
              "night_recall_at_1pct", "day_recall_at_1pct", "final_loss"]


def summarize(rows: list[dict]) -> list[dict]:
    """Seed-averaged statistics per variant, in first-seen order."""
    order = list(dict.fromkeys(r["variant"] for r in rows))
    summary = []
    for name in order:
        sel = [r for r in rows if r["variant"] == name]
        v = np.array([r["recall_at_1pct"] for r in sel])
        night = np.array([r["night_recall_at_1pct"] for r in sel], dtype=np.float64)
        summary.append({
            "variant": name,
            "n_seeds": len(sel),
            "recall_at_1pct_mean": round(float(v.mean()), 4),
            "recall_at_1pct_se": round(float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1
                                       else 0.0, 4),
            "recall_at_1_mean": round(float(np.mean([r["recall_at_1"] for r in sel])), 4),
            "night_recall_at_1pct_mean": round(float(np.nanmean(night)), 4)
            if np.isfinite(night).any() else float("nan"),
            "day_recall_at_1pct_mean": round(float(np.mean([r["day_recall_at_1pct"]
                                                            for r in sel])), 4),
        })
    return summary


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    matrix = ablation_matrix(cfg.run.variants)
    rows, curves, timing = [], {}, []
    for seed in cfg.run.seeds:
        data = (training_database(cfg.world, seed), *test_traversals(cfg.world, seed))
        for variant, dn in matrix:
            res = run_variant(variant, seed, cfg.world, cfg.pipeline, cfg.train, daynight=dn,
                              data=data, radius_m=cfg.run.radius_m)
            rows.append(res.row())
            curves.setdefault(res.variant, []).append(res.report.recall_at_rank)
            timing.append({"variant": res.variant, "seed": seed,
                           "seconds": round(res.seconds, 3)})
            print(f"seed {seed} {res.variant:14s} recall@1% {100 * res.recall_at_1pct:6.2f}  "
                  f"night {100 * res.night_recall_at_1pct:6.2f}  ({res.seconds:.1f} s)",
                  flush=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    summary = summarize(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0]))
        writer.writeheader()
        writer.writerows(summary)
    _write_json(out / "summary.json", {"seeds": list(cfg.run.seeds), "variants": summary})
    _write_json(out / "timing.json", timing)
    plot_ablation(summary, out / "ablation.png")
    plot_recall_curves({k: np.mean(v, axis=0) for k, v in curves.items()},
                       out / "recall_curves.png", title="Seed-averaged recall at top-N")
    print()
    for s in summary:
        print(f"{s['variant']:14s} recall@1% {s['recall_at_1pct_mean']:6.2f} "
              f"+- {s['recall_at_1pct_se']:.2f}  night {s['night_recall_at_1pct_mean']:6.2f}")
    return out / "summary.csv"


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="picnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, seed=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--out", help="output directory (relative to $PICNET_OUTPUT_ROOT)")
        if seed:
            p.add_argument("--seed", type=int, help="override run.seed")
        return p

    add("generate", "write a synthetic benchmark (training set + test traversals)")
    p = add("train", "train run.variant on the generated training set")
    p.add_argument("--variant", help="override run.variant")
    p.add_argument("--daynight", action="store_true", help="enable histogram normalization")
    p = add("eval", "evaluate the trained model on the generated test traversals")
    p = add("gradcheck", "finite-difference check of every analytic gradient", seed=False)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--perturb", action="append", default=[], metavar="OP=BIAS",
                   help="add BIAS to OP's analytic gradient (negative control)")
    p = add("ablate", "train and evaluate the variant matrix over run.seeds", seed=False)
    p.add_argument("--seeds", help="comma-separated seeds overriding run.seeds")
    p.add_argument("--variants", help="comma-separated variants overriding run.variants")
    p = sub.add_parser("print-config", help="print the effective configuration as TOML")
    p.add_argument("--config", type=Path)
    return parser


def _parse_perturb(items) -> dict:
    out = {}
    for item in items:
        op, _, bias = item.partition("=")
        if op not in certify.CHECKS:
            raise ValueError(f"unknown op {op!r}")
        out[op] = float(bias or 1e-3)
    return out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "print-config":
            sys.stdout.write(cfg.to_toml())
        elif args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "gradcheck":
            if not cmd_gradcheck(cfg, args.n_seeds, _parse_perturb(args.perturb)):
                raise NumericalFailure("gradient check failed")
        elif args.command == "ablate":
            t0 = time.perf_counter()
            cmd_ablate(cfg)
            log.info("ablation finished in %.1f s", time.perf_counter() - t0)
    except (ArithmeticError, NumericalFailure) as exc:
        print(f"picnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"picnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

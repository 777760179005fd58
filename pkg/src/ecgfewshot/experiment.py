"""Experiment matrix driver: modes x representations x folds.

Each (mode, representation, fold) run trains one model on four folds and
evaluates on the held-out fold. Runs are independent and deterministic given
the global seed (per-run seeds derive from the run identity, never from
scheduling), so they may execute in parallel worker processes; results merge
by key.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import report
from .dataset import Representation, load_catalog
from .errors import DataError
from .fewshot import EpisodeSpec, ImageStore, TrainConfig, evaluate, train

MODES = {"few-shot": 5, "one-shot": 1}

_WORKER_LIMITS = None


def run_seed(global_seed: int, mode: str, representation: str, fold: int) -> int:
    """Stable per-run seed derived from the run identity."""
    text = f"{global_seed}/{mode}/{representation}/{fold}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def episode_csv_path(out_dir: Path, mode: str, rep: str, fold: int) -> Path:
    return out_dir / "episodes" / f"episodes_{mode}_{rep}_{fold}.csv"


def loss_csv_path(out_dir: Path, mode: str, rep: str, fold: int) -> Path:
    return out_dir / "losses" / f"loss_{mode}_{rep}_{fold}.csv"


def artifact_path(out_dir: Path, mode: str, rep: str, fold: int) -> Path:
    return out_dir / "models" / f"{mode}_{rep}_fold{fold}.npz"


def _write_loss_csv(losses, path: Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, f"{loss:.10g}"])


def run_one(catalog, data_dir, out_dir, mode: str, rep: Representation, fold: int,
            config: TrainConfig, global_seed: int, log_fn=None):
    """Train on all folds but `fold`, evaluate on `fold`; persist outputs."""
    out_dir = Path(out_dir)
    for sub in ("episodes", "losses", "models"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    train_entries = [e for e in catalog if e.fold_id != fold]
    eval_entries = [e for e in catalog if e.fold_id == fold]
    if not train_entries or not eval_entries:
        raise DataError(f"fold {fold} leaves an empty train or eval partition")

    spec = EpisodeSpec(n_way=2, k_shot=MODES[mode], q_query=10, representation=rep)
    seed = run_seed(global_seed, mode, rep.value, fold)
    run_config = replace(config, seed=seed)
    store = ImageStore(data_dir, rep, config.input_hw_for(rep), config.dtype)

    artifact, losses = train(train_entries, spec, run_config, store, log_fn=log_fn)
    eval_rng = np.random.default_rng(run_seed(global_seed, mode + "-eval", rep.value, fold))
    records, ep_losses, counts = evaluate(
        artifact, eval_entries, spec, config.eval_episodes, eval_rng, store
    )

    artifact.save(artifact_path(out_dir, mode, rep.value, fold))
    _write_loss_csv(losses, loss_csv_path(out_dir, mode, rep.value, fold))
    report.write_episode_csv(
        records, ep_losses, counts, episode_csv_path(out_dir, mode, rep.value, fold)
    )
    return records


def _worker_init():
    # worker math stays single-threaded; parallelism comes from processes
    global _WORKER_LIMITS
    _WORKER_LIMITS = threadpool_limits(limits=1)


def _worker_run(args):
    data_dir, out_dir, runs, config, global_seed = args
    catalog = load_catalog(Path(data_dir) / "catalog.csv")
    done = []
    for mode, rep_name, fold in runs:
        run_one(
            catalog, data_dir, out_dir, mode, Representation(rep_name), fold,
            config, global_seed,
        )
        done.append((mode, rep_name, fold))
    return done


def run_matrix(data_dir, out_dir, modes, reps, folds, config: TrainConfig,
               global_seed: int, jobs: int = 1, log_fn=None):
    """Run every (mode, representation, fold) cell; return aggregated cells.

    Runs are grouped by representation so each worker loads one image store
    per group. Output files land under out_dir; aggregation reads the
    persisted per-episode CSVs so parallel and serial execution produce
    identical results.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    catalog = load_catalog(data_dir / "catalog.csv")
    if any(e.fold_id is None for e in catalog):
        raise DataError("catalog has unassigned folds; run prepare first")

    groups = []
    for rep in reps:
        runs = [(mode, rep.value, fold) for mode in modes for fold in folds]
        groups.append((str(data_dir), str(out_dir), runs, config, global_seed))

    if jobs > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            for done in pool.map(_worker_run, groups):
                if log_fn:
                    for mode, rep_name, fold in done:
                        log_fn(f"finished {mode}/{rep_name}/fold{fold}")
    else:
        with threadpool_limits(limits=1):
            for group in groups:
                for mode, rep_name, fold in _worker_run(group):
                    if log_fn:
                        log_fn(f"finished {mode}/{rep_name}/fold{fold}")

    cells = {}
    for mode in modes:
        cells[mode] = {}
        for rep in reps:
            per_fold = []
            for fold in folds:
                records, _, _ = report.read_episode_csv(
                    episode_csv_path(out_dir, mode, rep.value, fold)
                )
                per_fold.append(records)
            cells[mode][rep.value] = report.aggregate(mode, rep.value, per_fold)
    return cells


def write_mode_outputs(cells_for_mode: dict, mode: str, out_dir, make_figures=True):
    """results CSV + aligned text + figures for one learning mode."""
    from . import figures

    out_dir = Path(out_dir)
    report.write_results_csv(cells_for_mode, mode, out_dir / f"results_{mode}.csv")
    text = report.render_table(cells_for_mode, mode)
    (out_dir / f"results_{mode}.txt").write_text(text)
    if make_figures:
        figures.save_metric_bars(cells_for_mode, mode, out_dir / f"results_{mode}.png")
        curves = {}
        for rep_name, cell in cells_for_mode.items():
            for fold in range(len(cell.fold_records)):
                path = loss_csv_path(out_dir, mode, rep_name, fold)
                if path.exists():
                    with open(path, newline="") as fh:
                        losses = [float(r["loss"]) for r in csv.DictReader(fh)]
                    curves[f"{rep_name}/fold{fold}"] = losses
        if curves:
            figures.save_loss_curves(
                curves, out_dir / f"loss_curves_{mode}.png",
                title=f"Training loss ({mode})",
            )
    return text

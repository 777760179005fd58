"""Command-line entry point.

One binary with verb subcommands: synth, prepare, experiment, explain,
report. Every run writes a run.json provenance record (resolved config hash,
seeds, versions, wall time, output digests); exit codes are 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .dataset import (
    Grouping,
    Representation,
    ingest_manifest,
    load_catalog,
    make_folds,
    materialize_images,
    save_catalog,
    save_folds,
)
from .errors import NumericError, PipelineError, UsageError
from .experiment import MODES, run_matrix, write_mode_outputs
from .explain import (
    colored_segments,
    default_cell_px,
    explain_image,
    qt_span_weight_split,
    segment_image,
)
from .fewshot import ModelArtifact
from .nomogram import load_boundary, load_default_boundary
from .render import decode_png, image_filename
from .synth import generate_dataset

OUTPUT_ROOT_ENV = "ECGFEWSHOT_OUTPUT_ROOT"


def log(msg: str):
    print(f"[ecgfewshot] {msg}", flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_out(path_str: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    path = Path(path_str)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.seed is None:
        cfg.seed = cfg.synth.seed
    if getattr(args, "boundary", None):
        cfg.boundary_path = args.boundary
    return cfg


def _boundary_for(cfg: RunConfig):
    if cfg.boundary_path:
        path = Path(cfg.boundary_path)
        if not path.exists():
            raise UsageError(f"boundary file not found: {path}")
        return load_boundary(path)
    return load_default_boundary()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir: Path, command: str, cfg: RunConfig, started: float,
                      outputs: list, extra: dict | None = None):
    record = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical_text().splitlines(),
        "seed": cfg.seed,
        "versions": {
            "ecgfewshot": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "started_unix": round(started, 3),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": {
            str(p.relative_to(out_dir)): _sha256_file(p)
            for p in sorted(outputs)
            if p.exists()
        },
    }
    if extra:
        record.update(extra)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# --- subcommands ---

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    spec = cfg.synth
    overrides = {}
    if args.n is not None:
        overrides["n_records"] = args.n
    if args.positive_frac is not None:
        overrides["positive_fraction"] = args.positive_frac
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.qt_margin is not None:
        overrides["qt_margin_ms"] = args.qt_margin
    if args.noise_sd is not None:
        overrides["noise_sd_mv"] = args.noise_sd
    if overrides:
        spec = replace(spec, **overrides)
    cfg.synth = spec
    boundary = _boundary_for(cfg)
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    log(f"generating {spec.n_records} records into {out_dir}")
    manifest = generate_dataset(spec, boundary, out_dir)
    outputs = [manifest] + sorted((out_dir / "records").glob("*.csv"))
    _write_run_record(out_dir, "synth", cfg, started, outputs)
    log(f"wrote {manifest}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    boundary = _boundary_for(cfg)
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UsageError(f"manifest not found: {manifest}")
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    log(f"ingesting {manifest}")
    records = ingest_manifest(manifest)
    log(f"rendering {len(records)} records x 4 representations")
    catalog = materialize_images(records, boundary, cfg.render, out_dir)
    plan = make_folds(
        catalog,
        k=args.k,
        stratified=not args.no_stratify,
        grouping=Grouping(args.grouping),
        seed=cfg.seed,
    )
    save_catalog(catalog, out_dir / "catalog.csv")
    save_folds(plan, out_dir / "folds.csv")
    outputs = [out_dir / "catalog.csv", out_dir / "folds.csv"]
    _write_run_record(out_dir, "prepare", cfg, started, outputs,
                      extra={"n_records": len(records), "k_folds": args.k})
    log(f"catalog and {args.k}-fold plan written to {out_dir}")
    return 0


def cmd_experiment(args) -> int:
    if args.from_run:
        return _experiment_from_run(args)
    cfg = _load_config(args)
    if args.train_episodes is not None:
        cfg.train = replace(cfg.train, train_episodes=args.train_episodes)
    if args.eval_episodes is not None:
        cfg.train = replace(cfg.train, eval_episodes=args.eval_episodes)
    modes = list(MODES) if args.mode == "all" else [args.mode]
    if args.all or args.representation is None:
        reps = list(Representation)
    else:
        reps = [Representation(args.representation)]
    return _run_experiment(args, cfg, modes, reps)


def _experiment_from_run(args) -> int:
    run_path = Path(args.from_run)
    if not run_path.exists():
        raise UsageError(f"run record not found: {run_path}")
    record = json.loads(run_path.read_text())
    if record.get("command") != "experiment":
        raise UsageError(f"{run_path} does not describe an experiment run")
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(_ini_from_canonical(record["config"]))
        tmp = fh.name
    try:
        cfg = RunConfig.from_file(tmp)
    finally:
        os.unlink(tmp)
    cfg.seed = record["seed"]
    modes = record.get("modes", list(MODES))
    reps = [Representation(r) for r in record.get("representations", [r.value for r in Representation])]
    return _run_experiment(args, cfg, modes, reps)


def _ini_from_canonical(lines) -> str:
    sections = {}
    for line in lines:
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        sections.setdefault(section, []).append((name, value))
    out = []
    for section, items in sections.items():
        out.append(f"[{section}]")
        out += [f"{k} = {v}" for k, v in items]
        out.append("")
    return "\n".join(out)


def _run_experiment(args, cfg: RunConfig, modes, reps) -> int:
    data_dir = Path(args.data)
    if not (data_dir / "catalog.csv").exists():
        raise UsageError(f"no catalog.csv under {data_dir}; run prepare first")
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = sorted({e.fold_id for e in load_catalog(data_dir / "catalog.csv")})
    started = time.time()
    jobs = args.jobs or 1
    n_runs = len(modes) * len(reps) * len(folds)
    log(f"running {n_runs} train/eval runs ({', '.join(modes)}; jobs={jobs})")
    cells = run_matrix(
        data_dir, out_dir, modes, reps, folds, cfg.train, cfg.seed,
        jobs=jobs, log_fn=log,
    )
    outputs = []
    full_matrix = len(reps) == len(Representation)
    for mode in modes:
        if full_matrix:
            text = write_mode_outputs(cells[mode], mode, out_dir, make_figures=not args.no_figures)
            print(text)
            outputs += [
                out_dir / f"results_{mode}.csv",
                out_dir / f"results_{mode}.txt",
                out_dir / f"results_{mode}.png",
                out_dir / f"loss_curves_{mode}.png",
            ]
        else:
            for rep in reps:
                avg = cells[mode][rep.value].fold_averaged()
                acc = avg.get("accuracy")
                log(f"{mode}/{rep.value}: fold-averaged accuracy "
                    f"{'absent' if acc is None else f'{acc * 100:.2f}'}")
    outputs += sorted((out_dir / "episodes").glob("*.csv"))
    outputs += sorted((out_dir / "losses").glob("*.csv"))
    outputs += sorted((out_dir / "models").glob("*.npz"))
    _write_run_record(
        out_dir, "experiment", cfg, started, outputs,
        extra={"modes": modes, "representations": [r.value for r in reps],
               "folds": folds, "jobs": jobs},
    )
    log(f"experiment outputs in {out_dir} ({time.time() - started:.0f} s)")
    return 0


def cmd_explain(args) -> int:
    if args.self_test:
        return _explain_self_test(args)
    cfg = _load_config(args)
    artifact = ModelArtifact.load(Path(args.artifact))
    data_dir = Path(args.data)
    catalog = load_catalog(data_dir / "catalog.csv")
    by_id = {e.record_id: e for e in catalog}
    if args.record_ids:
        missing = [r for r in args.record_ids if r not in by_id]
        if missing:
            raise UsageError(f"record ids not in catalog: {', '.join(missing)}")
        chosen = [by_id[r] for r in args.record_ids]
    else:
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(len(catalog), size=min(args.sample, len(catalog)), replace=False)
        chosen = [catalog[i] for i in sorted(idx)]
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    rep = artifact.spec.representation
    outputs = []
    for entry in chosen:
        image = decode_png(data_dir / entry.image_paths[rep])
        rng = np.random.default_rng(cfg.seed + hash_stable(entry.record_id))
        explanation, overlay = explain_image(
            artifact.predict_proba, image, rng=rng, n_samples=args.samples,
        )
        stem = image_filename(entry.record_id, rep.kind, rep.colored)[: -len(".png")]
        overlay_path = out_dir / f"{stem}_explain.png"
        from PIL import Image

        Image.fromarray(overlay, mode="RGB").save(overlay_path, format="PNG", compress_level=6)
        json_path = out_dir / f"{stem}_explain.json"
        payload = json.loads(explanation.to_json())
        if rep.colored:
            seg_map = segment_image(image, explanation.cell_px)
            payload["qt_span_split"] = qt_span_weight_split(
                explanation, colored_segments(image, seg_map)
            )
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        outputs += [overlay_path, json_path]
        flag = " (low confidence)" if explanation.low_confidence else ""
        log(f"{entry.record_id}: fidelity {explanation.fidelity:.3f}{flag}")
    _write_run_record(out_dir, "explain", cfg, started, outputs)
    return 0


def hash_stable(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big")


def _explain_self_test(args) -> int:
    """Built-in checks of the explainer on oracle models."""
    rng = np.random.default_rng(7)
    image = (rng.random((128, 128, 3)) * 255).astype(np.uint8)
    seg_map = segment_image(image, 16)

    if args.self_test == "constant":
        def predict(stack):
            return np.tile([0.3, 0.7], (len(stack), 1))

        explanation, _ = explain_image(
            predict, image, rng=np.random.default_rng(11), n_samples=args.samples
        )
        worst = float(np.abs(explanation.weights).max())
        ok = worst < 0.01
        log(f"constant-model self-test: max |weight| {worst:.5f} -> {'PASS' if ok else 'FAIL'}")
    else:
        target_seg = 21
        region = seg_map.ids == target_seg

        def predict(stack):
            vals = stack[:, region].mean(axis=(1, 2)) / 255.0
            return np.stack([1.0 - vals, vals], axis=1)

        explanation, _ = explain_image(
            predict, image, rng=np.random.default_rng(11), n_samples=args.samples,
            target_class=1,
        )
        top = int(np.argmax(np.abs(explanation.weights)))
        ok = top == target_seg
        log(f"planted-oracle self-test: top segment {top} (planted {target_seg}) "
            f"-> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericError(f"explain self-test '{args.self_test}' failed")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args.out or args.results)
    results_dir = Path(args.results)
    started = time.time()
    from . import report as report_mod
    from .experiment import episode_csv_path

    modes = list(MODES) if args.mode == "all" else [args.mode]
    outputs = []
    for mode in modes:
        cells = {}
        for rep in Representation:
            per_fold = []
            fold = 0
            while episode_csv_path(results_dir, mode, rep.value, fold).exists():
                records, _, _ = report_mod.read_episode_csv(
                    episode_csv_path(results_dir, mode, rep.value, fold)
                )
                per_fold.append(records)
                fold += 1
            if not per_fold:
                raise UsageError(
                    f"no episode CSVs for {mode}/{rep.value} under {results_dir}"
                )
            cells[rep.value] = report_mod.aggregate(mode, rep.value, per_fold)
        out_dir.mkdir(parents=True, exist_ok=True)
        text = write_mode_outputs(cells, mode, out_dir, make_figures=not args.no_figures)
        print(text)
        outputs += [out_dir / f"results_{mode}.csv", out_dir / f"results_{mode}.txt"]
    _write_run_record(out_dir, "report", cfg, started, outputs)
    return 0


# --- parser ---

def build_parser() -> _Parser:
    parser = _Parser(prog="ecgfewshot", description=__doc__)
    parser.add_argument("--print-config", action="store_true",
                        help="print the fully resolved default config and exit")
    parser.add_argument("--config", help="INI config file (flags win over file values)")
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--positive-frac", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--qt-margin", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--boundary", help="nomogram CSV (default: shipped transcription)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest a manifest, render images, assign folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--grouping", choices=[g.value for g in Grouping],
                   default=Grouping.BY_RECORD.value)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--boundary")
    p.add_argument("--config")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("experiment", help="run the train/eval matrix")
    p.add_argument("--data", required=True, help="prepared data dir (catalog.csv)")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=list(MODES) + ["all"], default="all")
    p.add_argument("--representation", choices=[r.value for r in Representation])
    p.add_argument("--all", action="store_true", help="all four representations")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--train-episodes", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--from-run", help="re-run from a previous run.json")
    p.add_argument("--config")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("explain", help="explain predictions on catalog records")
    p.add_argument("--artifact")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--record-ids", nargs="*", default=None)
    p.add_argument("--sample", type=int, default=5)
    p.add_argument("--samples", type=int, default=1000,
                   help="perturbation samples per explanation")
    p.add_argument("--seed", type=int)
    p.add_argument("--self-test", choices=["constant", "planted"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="re-aggregate tables from episode CSVs")
    p.add_argument("--results", required=True, help="experiment output dir")
    p.add_argument("--out")
    p.add_argument("--mode", choices=list(MODES) + ["all"], default="all")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_config:
            print(RunConfig.from_file(getattr(args, "config", None)).print_config())
            return 0
        if not getattr(args, "subcommand", None):
            raise UsageError("a subcommand is required (synth, prepare, experiment, explain, report)")
        if args.subcommand == "explain" and not args.self_test:
            for required in ("artifact", "data", "out"):
                if getattr(args, required) is None:
                    raise UsageError(f"explain requires --{required}")
        return args.func(args)
    except PipelineError as exc:
        message = str(exc).replace("\n", "; ")
        print(f"error[{type(exc).__name__}]: {message}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("error[Interrupted]: interrupted by user", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ssdca synth | train | eval | ablate-stage | explain``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import ArchiveFormatError, CheckpointMismatchError, load_checkpoint, read_archive
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict
from .data import ImageStore, ManifestError, build_pairs, load_mask, read_manifest
from .evaluation import (
    aggregate_records,
    paired_t_test,
    read_predictions_csv,
    robustness_report,
    write_metrics_csv,
    write_predictions_csv,
    write_robustness_csv,
)
from .fusion import SSDCA, PairModel, build_model
from .interpret import (
    attention_correspondence,
    cell_coverage,
    cluster_metrics,
    extract_embeddings,
    gradcam,
    project_2d,
    write_embeddings_csv,
    write_grid_csv,
    write_grid_png,
)
from .synth import SynthSpec, synth_generate
from .training import NumericalError, cross_validate, evaluate_pairs, set_determinism

log = logging.getLogger("ssdca")

DATA_ROOT_ENV = "SSDCA_DATA_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4
METRIC_KEYS = ("balanced_accuracy", "sensitivity", "specificity")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML run config")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--threads", type=int, default=d)
    parser.add_argument("--profile", choices=["paper", "toy"], default=d)
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--force", action="store_true", default=d if suppress else False)
    parser.add_argument(
        "--no-strict", dest="strict", action="store_false", default=d if suppress else True,
        help="allow non-deterministic kernels and multiple threads",
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdca", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--spec", help="YAML dataset spec (defaults otherwise)")

    t = sub.add_parser("train", parents=[common], help="k-fold cross-validation")
    t.add_argument("--manifest")
    t.add_argument("--variant", choices=["ssdca", "ssfc", "single"])
    t.add_argument("--resume", action="store_true")
    t.add_argument("--encoder-checkpoint", help="tensor archive with encoder.* weights")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on test pairs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--topk", type=int)
    e.add_argument("--cohort", default="test", choices=["test", "dev", "all"])
    e.add_argument("--compare", help="predictions CSV of another model for a paired t-test")

    a = sub.add_parser("ablate-stage", parents=[common], help="cross-validate every fusion stage")
    a.add_argument("--manifest")
    a.add_argument("--stages", type=int, nargs="+", default=[1, 2, 3, 4])

    x = sub.add_parser("explain", parents=[common], help="embeddings, GradCAM and attention exports")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest")
    x.add_argument("--cohort", default="test", choices=["test", "dev", "all"])
    x.add_argument("--pairs", type=int, default=4, help="number of pairs to export maps for")
    x.add_argument("--branch", default="pre", choices=["pre", "post"], help="GradCAM branch")
    x.add_argument("--png", action="store_true", help="also rasterize grids")
    return p


# -- helpers ---------------------------------------------------------------


def _resolve_run(args, overrides: dict | None = None) -> RunConfig:
    run = load_run_config(args.config, profile=args.profile, seed=args.seed)
    data = run.to_dict()
    data["strict"] = args.strict
    if args.threads is not None:
        data["threads"] = args.threads
    for section, values in (overrides or {}).items():
        data[section].update(values)
    return run_config_from_dict(data, profile=run.profile, seed=run.seed)


def _prepare_out(path: str | Path, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise CommandError(f"output directory {out} is not empty (use --force)", EXIT_CONFIG)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, run: RunConfig | None, extra: dict) -> None:
    doc = {"command": command, **extra}
    if run is not None:
        doc["config"] = run.to_dict()
        doc["config_hash"] = run.config_hash()
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    if run is not None:
        (out / "config_hash.txt").write_text(run.config_hash() + "\n")


def _manifest_path(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise CommandError(f"--manifest not given and {DATA_ROOT_ENV} unset", EXIT_CONFIG)
    return Path(root) / "manifest.jsonl"


def _default_out(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if args.command == "synth" and os.environ.get(DATA_ROOT_ENV):
        return Path(os.environ[DATA_ROOT_ENV])
    return Path("runs") / name


def _with_hash(rows, run: RunConfig):
    h = run.config_hash()
    return [{**r, "config_hash": h} for r in rows]


def _select_records(records, cohort: str):
    return records if cohort == "all" else [r for r in records if r.cohort == cohort]


def _load_model(checkpoint: str, args) -> tuple[PairModel, RunConfig]:
    """Model from a ``.tns`` archive; its JSON sidecar supplies the config unless --config is given."""
    ck = Path(checkpoint)
    sidecar = ck.with_suffix(".json")
    saved = json.loads(sidecar.read_text()).get("config") if sidecar.exists() else None
    if args.config is None and saved is not None:
        saved_run = {**saved, "strict": args.strict}
        if args.threads is not None:
            saved_run["threads"] = args.threads
        run = run_config_from_dict(saved_run, profile=saved.get("profile"), seed=saved.get("seed"))
    else:
        run = _resolve_run(args)
        current = json.loads(json.dumps(run.to_dict()["model"]))
        if saved is not None and saved.get("model") != current:
            diff = sorted(k for k in current if saved["model"].get(k) != current[k])
            raise CommandError(f"checkpoint was trained with a different model config ({', '.join(diff)})",
                               EXIT_MISMATCH)
    model = build_model(run.model)
    tensors = {k: v for k, v in read_archive(ck).items() if not k.startswith("adam.")}
    load_checkpoint(tensors, model)
    return model.eval(), run


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.spec:
        data = yaml.safe_load(Path(args.spec).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("dataset spec must be a mapping", "spec")
        spec = SynthSpec.from_dict(data)
    seed = 0 if args.seed is None else args.seed
    out = _prepare_out(_default_out(args, "synth"), args.force)
    manifest = synth_generate(spec, seed, out)
    _write_resolved(out, "synth", None, {"spec": vars(spec), "seed": seed})
    records = read_manifest(manifest)
    patients = {r.patient_id: r.outcome for r in records}
    train_pairs = build_pairs(records, "train")
    artifacts = Counter(t for r in records for t in r.artifacts)
    label_counts = Counter(patients.values())
    print(f"manifest: {manifest}")
    print(f"patients: {len(patients)} (LR {label_counts['LR']}, cCR {label_counts['cCR']})")
    print(f"images: {len(records)}; ordered pairs: {len(train_pairs)}"
          f" (LR ratio {np.mean([p.label for p in train_pairs]):.2f})")
    print("artifacts: " + ", ".join(f"{t}={artifacts.get(t, 0)}" for t in ("blood", "stool", "TLG", "PQ")))
    return EXIT_OK


def _run_cv(records, run: RunConfig, out: Path, resume=False, encoder_checkpoint=None):
    report = cross_validate(records, run, ImageStore(run.model.encoder.image_size), out, resume, encoder_checkpoint)
    write_metrics_csv(_with_hash(report.rows(), run), out / "report.csv")
    for fold, preds in report.test_predictions.items():
        write_predictions_csv(preds, out / f"fold{fold}" / "test_predictions.csv")
    return report


def cmd_train(args) -> int:
    run = _resolve_run(args, {"model": {"variant": args.variant}} if args.variant else None)
    set_determinism(run.strict, run.threads)
    records = read_manifest(_manifest_path(args.manifest))
    out = _prepare_out(_default_out(args, f"train-{run.model.variant}"), args.force, allow_existing=args.resume)
    _write_resolved(out, "train", run, {"manifest": str(_manifest_path(args.manifest))})
    t0 = time.perf_counter()
    report = _run_cv(records, run, out, args.resume, args.encoder_checkpoint)
    for k, (mu, sd) in report.summary().items():
        print(f"{k}: {mu:.2f} +/- {sd:.2f}")
    print(f"elapsed: {time.perf_counter() - t0:.1f}s")
    if report.failed:
        folds = ", ".join(str(f) for f in sorted(report.failed))
        raise CommandError(f"numerical abort in fold(s) {folds}: " + "; ".join(report.failed.values()),
                           EXIT_NUMERIC)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, run = _load_model(args.checkpoint, args)
    set_determinism(run.strict, run.threads)
    if args.topk is not None:
        run = run_config_from_dict({**run.to_dict(), "train": {**run.to_dict()["train"], "topk": args.topk}},
                                   profile=run.profile, seed=run.seed)
    records = _select_records(read_manifest(_manifest_path(args.manifest)), args.cohort)
    pairs = build_pairs(records, "test")
    out = _prepare_out(_default_out(args, "eval"), args.force)
    _write_resolved(out, "eval", run, {"checkpoint": args.checkpoint, "cohort": args.cohort})
    metrics, raw = evaluate_pairs(model, pairs, ImageStore(run.model.encoder.image_size), run.train)
    write_predictions_csv(raw, out / "predictions.csv")
    write_predictions_csv(aggregate_records(raw, run.train.topk), out / "aggregated.csv")
    write_metrics_csv(_with_hash([metrics.as_dict()], run), out / "metrics.csv")
    rob = robustness_report(raw, run.train.threshold)
    write_robustness_csv(rob, out / "robustness.csv", out / "robustness_hist.csv")
    print(" ".join(f"{k}={getattr(metrics, k):.2f}" for k in METRIC_KEYS))
    if args.compare:
        _compare(raw, read_predictions_csv(args.compare), run, out)
    return EXIT_OK


def _compare(mine, other, run: RunConfig, out: Path) -> None:
    """Paired t-test on the per-record probability of the true class."""
    key = lambda r: (r.patient_id, r.group)  # noqa: E731
    a = {key(r): r for r in aggregate_records(mine, run.train.topk)}
    b = {key(r): r for r in aggregate_records(other, run.train.topk)}
    shared = sorted(set(a) & set(b))
    if not shared:
        raise CommandError("no shared (patient, group) records to compare", EXIT_MISMATCH)
    conf = lambda r: r.probability if r.label else 1.0 - r.probability  # noqa: E731
    res = paired_t_test([conf(a[k]) for k in shared], [conf(b[k]) for k in shared])
    row = {"n": len(shared), "mean_diff": res.mean_diff, "t": res.t, "dof": res.dof, "p": res.p_two_sided,
           "ci_lo": res.ci95[0], "ci_hi": res.ci95[1], "degenerate": int(res.degenerate)}
    write_metrics_csv(_with_hash([row], run), out / "compare.csv")
    print(f"paired t-test: t={res.t:.4f} dof={res.dof} p={res.p_two_sided:.4g}")


def cmd_ablate_stage(args) -> int:
    base = _resolve_run(args)
    set_determinism(base.strict, base.threads)
    records = read_manifest(_manifest_path(args.manifest))
    out = _prepare_out(_default_out(args, "ablate-stage"), args.force)
    _write_resolved(out, "ablate-stage", base, {"stages": args.stages})
    enc = base.model.encoder
    rows = []
    for stage in args.stages:
        run = _resolve_run(args, {"model": {"fusion_stage": stage}})
        rows_ = cols_ = enc.stage_grid(stage)
        log.info("stage %d: %d tokens x %d channels", stage, rows_ * cols_, enc.stage_channels(stage))
        print(f"stage {stage}: {rows_ * cols_} tokens")
        report = _run_cv(records, run, out / f"stage{stage}")
        summ = report.summary()
        row = {"stage": stage, "tokens": rows_ * cols_, "channels": enc.stage_channels(stage)}
        for k in METRIC_KEYS:
            row[f"{k}_mean"], row[f"{k}_std"] = summ[k]
        rows.append(row)
    best = max(rows, key=lambda r: r["balanced_accuracy_mean"])
    for r in rows:
        r["flag"] = "best" if r is best else ""
    stage4 = [r for r in rows if r["stage"] == 4]
    if stage4 and stage4[0]["balanced_accuracy_mean"] < best["balanced_accuracy_mean"]:
        print(f"note: stage 4 is not the best fusion stage here (stage {best['stage']} is)")
    write_metrics_csv(_with_hash(rows, base), out / "stage_ablation.csv")
    for r in rows:
        print(f"stage {r['stage']}: BA {r['balanced_accuracy_mean']:.2f} +/- {r['balanced_accuracy_std']:.2f} {r['flag']}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, run = _load_model(args.checkpoint, args)
    set_determinism(run.strict, run.threads)
    records = _select_records(read_manifest(_manifest_path(args.manifest)), args.cohort)
    pairs = build_pairs(records, "test")
    store = ImageStore(run.model.encoder.image_size)
    out = _prepare_out(_default_out(args, "explain"), args.force)
    _write_resolved(out, "explain", run, {"checkpoint": args.checkpoint, "cohort": args.cohort})

    emb = extract_embeddings(model, pairs, store, run.train.batch_size)
    write_embeddings_csv(emb, out / "embeddings.csv")
    X = np.stack([e.vector for e in emb])
    y = [e.label for e in emb]
    rows = []
    if len(set(y)) == 2:
        inter, intra = cluster_metrics(X, y)
        rows.append({"space": "feature", "inter": inter, "intra": intra})
        if len(X) >= 3:
            inter2, intra2 = cluster_metrics(project_2d(X), y)
            rows.append({"space": "pca2", "inter": inter2, "intra": intra2})
            np.savetxt(out / "projection.csv", project_2d(X), delimiter=",", fmt="%.8f")
    else:
        warnings.warn("cluster metrics need both classes in the selected cohort", stacklevel=1)
    write_metrics_csv(_with_hash(rows, run), out / "cluster_metrics.csv")

    _, raw = evaluate_pairs(model, pairs, store, run.train)
    write_robustness_csv(robustness_report(raw, run.train.threshold), out / "robustness.csv",
                         out / "robustness_hist.csv")

    for pair in pairs[: args.pairs]:
        name = f"{pair.pre.image_id}__{pair.post.image_id}"
        bundle = out / "pairs" / name
        bundle.mkdir(parents=True, exist_ok=True)
        pre, post = store.get(pair.pre), store.get(pair.post)
        cam = gradcam(model, pre, post, target_class=1, upsample=False, branch=args.branch)
        write_grid_csv(cam, bundle / f"gradcam_{args.branch}.csv")
        grids = {f"gradcam_{args.branch}": cam}
        if isinstance(model, SSDCA):
            maps = attention_correspondence(model, pre, post)
            # query cell: strongest GradCAM cell, or the lesion centre when a mask exists
            mask_rec = pair.pre if args.branch == "pre" else pair.post
            q = np.unravel_index(np.argmax(cam), cam.shape)
            if mask_rec.mask_path:
                cov = cell_coverage(load_mask(mask_rec.mask_path, run.model.encoder.image_size), maps.grid)
                q = np.unravel_index(np.argmax(cov), cov.shape)
            direction = "pre_to_post" if args.branch == "pre" else "post_to_pre"
            other = "post_to_pre" if direction == "pre_to_post" else "pre_to_post"
            grids[f"attention_{direction}"] = maps.query_map(direction, q)
            # reverse direction queried from the peak of the forward map
            peak = np.unravel_index(np.argmax(grids[f"attention_{direction}"]), maps.grid)
            grids[f"attention_{other}"] = maps.query_map(other, peak)
            for n, g in grids.items():
                if n.startswith("attention"):
                    write_grid_csv(g, bundle / f"{n}.csv")
            (bundle / "queries.json").write_text(json.dumps(
                {direction: [int(q[0]), int(q[1])], other: [int(peak[0]), int(peak[1])]}, indent=2) + "\n")
        if args.png:
            for n, g in grids.items():
                write_grid_png(g, bundle / f"{n}.png", size=run.model.encoder.image_size)
    print(f"explain bundle written to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-stage": cmd_ablate_stage,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        field = f" [field: {err.field_name}]" if err.field_name else ""
        print(f"config error{field}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as err:
        print(f"manifest error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        fold = f" (fold {err.fold})" if err.fold is not None else ""
        print(f"numerical abort{fold}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointMismatchError, ArchiveFormatError) as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except CommandError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())

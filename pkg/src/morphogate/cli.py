"""Command-line interface.

One executable covering the pipeline end to end: cohort generation, atlas
construction, morphometry maps, gate inspection, training, prediction,
evaluation, component ablation, and report rendering. Results go to stdout
and files; logs are line-oriented JSON on stderr. Exit codes: 0 success,
1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .atlas import build_masks, procedural_parcellation
from .clinical import HashingEmbedder, read_manifest, record_from_dict
from .cohort import generate_cohort, read_cohort_spec
from .dbm import DbmConfig, dbm_pipeline
from .errors import (
    AtlasMismatch,
    GeometryMismatch,
    MalformedHeader,
    MorphogateError,
    UnknownSubject,
    UnlabeledSubject,
)
from .metrics import (
    DEFAULT_TAU,
    ConfusionCounts,
    balance_indices,
    calibration_report,
    classification_metrics,
    decision_curve,
    format_percent,
    improvement_rate,
)
from .model import (
    AblationConfig,
    FusionConfig,
    TrainConfig,
    embedder_for_state,
    featurize_many,
    load_checkpoint,
    predict_features,
    run_ablation,
    save_checkpoint,
    train_model,
)
from .report import load_eval, render_report
from .volume import (
    DeformationField,
    GridGeometry,
    LabelVolume,
    read_volume,
    sha256_of_file,
    write_volume,
)
from .weighting import GateParams, PriorWeights, gates_forward, indicator_map, weight_map


def log_event(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _csv_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part != ""]


def _csv_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part != ""]


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return os.cpu_count() or 1


def _read_atlas(path: str) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise MalformedHeader(f"{path} is not a label volume")
    return vol


def _labels_for(entries, tau: float) -> list[int]:
    labels = []
    for entry in entries:
        if entry.record.updrs3_post is None:
            raise UnlabeledSubject(f"subject {entry.record.subject_id!r} has no outcome score")
        labels.append(improvement_rate(entry.record, tau).label)
    return labels


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_cohort(args) -> int:
    spec = read_cohort_spec(args.spec)
    log_event("gen-cohort", n_subjects=spec.n_subjects, out_dir=args.out_dir, seed=spec.seed)
    summary = generate_cohort(spec, args.out_dir, threads=_threads(args))
    emit(summary)
    return 0


def cmd_atlas_gen(args) -> int:
    dims = tuple(_csv_ints(args.dims))
    spacing = tuple(_csv_floats(args.spacing))
    if len(dims) != 3 or len(spacing) != 3:
        raise MalformedHeader("--dims and --spacing need exactly three comma-separated values")
    try:
        geometry = GridGeometry(dims, spacing)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from exc
    atlas = procedural_parcellation(geometry, args.m, args.seed)
    write_volume(atlas, args.out)
    masks = build_masks(atlas, args.m)
    log_event("atlas-gen", out=args.out, m=args.m, seed=args.seed)
    emit(
        {
            "out": args.out,
            "m": args.m,
            "region_voxels": [int(c) for c in masks.counts],
            "sha256": sha256_of_file(args.out),
        }
    )
    return 0


def cmd_dbm(args) -> int:
    vol = read_volume(args.field)
    if not isinstance(vol, DeformationField):
        raise MalformedHeader(f"{args.field} is not a displacement volume")
    cfg = DbmConfig(
        sigma_mm=args.sigma_mm,
        max_nonpositive_fraction=args.max_nonpos,
        clamp_epsilon=args.clamp_eps,
    )
    lj, dbm_report = dbm_pipeline(vol, cfg)
    write_volume(lj, args.out)
    log_event("dbm", field=args.field, out=args.out, sigma_mm=args.sigma_mm)
    emit(dbm_report.as_dict())
    return 0


def cmd_weights(args) -> int:
    with open(args.record, "r", encoding="utf-8") as fh:
        record = record_from_dict(json.load(fh))
    prior = PriorWeights.from_json(args.prior)
    state = load_checkpoint(args.mlp)
    atlas = _read_atlas(args.atlas)
    masks = build_masks(atlas, prior.m)
    if prior.m != state.m:
        raise GeometryMismatch(
            f"prior has {prior.m} regions but the model was trained with {state.m}"
        )
    embedding = embedder_for_state(state).embed(record)
    mode = state.ablation.gate_mode
    if mode.gated:
        w, cache = gates_forward(embedding, state.mlp, prior, state.gate, mode)
        delta = cache.delta
        volume = weight_map(w, masks)
    else:
        w = np.ones(prior.m, dtype=np.float64)
        delta = np.zeros(prior.m, dtype=np.float64)
        volume = indicator_map(masks)
    write_volume(volume, args.out)
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_index", "prior", "delta", "gate"])
        for r in range(prior.m):
            writer.writerow([r + 1, repr(float(prior.values[r])), repr(float(delta[r])), repr(float(w[r]))])
    log_event("weights", record=record.subject_id, out=args.out, report=args.report)
    emit({"out": args.out, "report": args.report, "gated": mode.gated})
    return 0


def _dbm_config(args) -> DbmConfig:
    return DbmConfig(
        sigma_mm=args.sigma_mm,
        max_nonpositive_fraction=args.max_nonpos,
        clamp_epsilon=args.clamp_eps,
    )


def cmd_train(args) -> int:
    entries = read_manifest(args.manifest)
    labels = _labels_for(entries, args.tau)
    kept = balance_indices(labels, args.seed)
    if len(kept) < len(entries):
        log_event("balance", kept=len(kept), dropped=len(entries) - len(kept))
    entries = [entries[i] for i in kept]

    atlas = _read_atlas(args.atlas)
    prior = PriorWeights.from_json(args.prior)
    masks = build_masks(atlas, prior.m)
    embedder = HashingEmbedder(dim=args.embed_dim, seed=args.embed_seed)
    dbm_cfg = _dbm_config(args)
    log_event("featurize", subjects=len(entries), threads=_threads(args))
    feats = featurize_many(entries, masks, dbm_cfg, embedder, args.tau, threads=_threads(args))

    cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        warmup_epochs=args.warmup_epochs,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        early_stop_patience=args.patience,
        seed=args.seed,
        val_fraction=args.val_fraction,
        hidden_width=args.hidden,
    )
    ablation = AblationConfig(
        use_dbm=not args.no_dbm,
        use_prior=not args.no_prior,
        use_patient=not args.no_patient,
    )
    state, train_log = train_model(
        feats,
        prior,
        cfg,
        GateParams(prior_scale=args.prior_scale, offset_scale=args.offset_scale),
        FusionConfig(image_weight=getattr(args, "lambda")),
        ablation,
        dbm_cfg,
        args.tau,
        embedder_desc=embedder.describe(),
        atlas_sha256=sha256_of_file(args.atlas),
        prior_sha256=sha256_of_file(args.prior),
        atlas_path=os.path.abspath(args.atlas),
        prior_path=os.path.abspath(args.prior),
    )
    for entry in train_log:
        log_event("epoch", **entry.as_dict())
    save_checkpoint(state, args.out)
    best_val = min(entry.val_loss for entry in train_log)
    emit(
        {
            "checkpoint": args.out,
            "epochs_run": len(train_log),
            "best_val_loss": best_val,
            "final_train_loss": train_log[-1].train_loss,
            "subjects": len(feats),
        }
    )
    return 0


def cmd_predict(args) -> int:
    state = load_checkpoint(args.model)
    atlas_path = args.atlas or state.atlas_path
    if not atlas_path:
        raise MalformedHeader("checkpoint has no atlas path; pass --atlas")
    if sha256_of_file(atlas_path) != state.atlas_sha256:
        raise AtlasMismatch(
            f"{atlas_path} does not match the atlas the model was trained with"
        )
    atlas = _read_atlas(atlas_path)
    masks = build_masks(atlas, state.m)
    embedder = embedder_for_state(state)
    entries = read_manifest(args.manifest)
    log_event("predict", subjects=len(entries), model=args.model)
    feats = featurize_many(entries, masks, state.dbm, embedder, state.tau, threads=_threads(args))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "prob", "class"])
        for f in feats:
            prob, cls = predict_features(f, state)
            writer.writerow([f.subject_id, repr(prob), cls])
    emit({"out": args.out, "subjects": len(feats)})
    return 0


def read_predictions(path: str) -> dict[str, tuple[float, int]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"subject_id", "prob", "class"}.issubset(
                reader.fieldnames
            ):
                raise MalformedHeader(f"{path} lacks subject_id,prob,class columns")
            preds = {}
            for row in reader:
                preds[row["subject_id"]] = (float(row["prob"]), int(row["class"]))
    except OSError as exc:
        raise MalformedHeader(f"cannot read predictions {path}: {exc}") from exc
    except ValueError as exc:
        raise MalformedHeader(f"bad prediction row in {path}: {exc}") from exc
    return preds


def evaluate_predictions(
    preds: dict[str, tuple[float, int]], entries, tau: float
) -> dict:
    labels = _labels_for(entries, tau)
    probs, classes, actual = [], [], []
    for entry, y in zip(entries, labels):
        sid = entry.record.subject_id
        if sid not in preds:
            raise UnknownSubject(f"no prediction for subject {sid!r}")
        prob, cls = preds[sid]
        probs.append(prob)
        classes.append(cls)
        actual.append(y)
    probs = np.asarray(probs)
    classes = np.asarray(classes)
    actual = np.asarray(actual)
    counts = ConfusionCounts.from_pairs(classes, actual)
    mets = classification_metrics(counts)
    cal = calibration_report(probs, actual)
    curve = decision_curve(probs, actual)
    return {
        "n": int(actual.size),
        "tau": tau,
        "counts": {"tp": counts.tp, "fn": counts.fn, "fp": counts.fp, "tn": counts.tn},
        "metrics": {
            "acc": float(mets["acc"]),
            "tpr": float(mets["tpr"]),
            "fpr": float(mets["fpr"]),
            "acc_percent": format_percent(mets["acc"]),
            "tpr_percent": format_percent(mets["tpr"]),
            "fpr_percent": format_percent(mets["fpr"]),
        },
        "calibration": {
            "ece": cal.ece,
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "mean_prob": b.mean_prob,
                    "frac_positive": b.frac_positive,
                }
                for b in cal.bins
            ],
        },
        "net_benefit": [
            {
                "threshold": row.threshold,
                "model": row.model,
                "treat_all": row.treat_all,
                "treat_none": row.treat_none,
            }
            for row in curve
        ],
    }


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.preds)
    entries = read_manifest(args.manifest)
    result = evaluate_predictions(preds, entries, args.tau)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=1)
        fh.write("\n")
    log_event("evaluate", preds=args.preds, out=args.out, n=result["n"])
    emit(
        {
            "out": args.out,
            "n": result["n"],
            "acc_percent": result["metrics"]["acc_percent"],
            "ece": result["calibration"]["ece"],
        }
    )
    return 0


def cmd_ablate(args) -> int:
    dev_entries = read_manifest(args.manifest)
    labels = _labels_for(dev_entries, args.tau)
    kept = balance_indices(labels, args.seeds[0])
    dev_entries = [dev_entries[i] for i in kept]
    test_entries = read_manifest(args.test_manifest)

    atlas = _read_atlas(args.atlas)
    prior = PriorWeights.from_json(args.prior)
    masks = build_masks(atlas, prior.m)
    embedder = HashingEmbedder(dim=args.embed_dim, seed=args.embed_seed)
    dbm_cfg = _dbm_config(args)
    log_event("featurize", subjects=len(dev_entries) + len(test_entries), threads=_threads(args))
    dev_feats = featurize_many(dev_entries, masks, dbm_cfg, embedder, args.tau, threads=_threads(args))
    test_feats = featurize_many(test_entries, masks, dbm_cfg, embedder, args.tau, threads=_threads(args))

    cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        warmup_epochs=args.warmup_epochs,
        max_epochs=args.max_epochs,
        batch_size=args.batch_size,
        early_stop_patience=args.patience,
        val_fraction=args.val_fraction,
        hidden_width=args.hidden,
    )
    rows = run_ablation(
        dev_feats,
        test_feats,
        prior,
        args.seeds,
        cfg,
        GateParams(prior_scale=args.prior_scale, offset_scale=args.offset_scale),
        FusionConfig(image_weight=getattr(args, "lambda")),
        dbm_cfg,
        args.tau,
    )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        seed_cols = [f"acc_seed_{s}" for s in args.seeds]
        writer.writerow(["config", "use_dbm", "use_prior", "use_patient", *seed_cols, "mean_acc"])
        for row in rows:
            writer.writerow(
                [
                    row["config"],
                    int(row["use_dbm"]),
                    int(row["use_prior"]),
                    int(row["use_patient"]),
                    *[repr(a) for a in row["acc_by_seed"]],
                    repr(row["mean_acc"]),
                ]
            )
    log_event("ablate", out=args.out, configs=len(rows), seeds=args.seeds)
    emit({"out": args.out, "mean_acc": {row["config"]: row["mean_acc"] for row in rows}})
    return 0


def cmd_report(args) -> int:
    evals = []
    for item in args.eval:
        if "=" in item:
            label, path = item.split("=", 1)
        else:
            label = os.path.splitext(os.path.basename(item))[0]
            path = item
        evals.append((label, load_eval(path)))
    written = render_report(evals, args.out_dir)
    log_event("report", out_dir=args.out_dir, splits=[label for label, _ in evals])
    emit(written)
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_threads(p) -> None:
    p.add_argument("--threads", type=int, default=None, help="max parallelism (default: cores)")


def _add_dbm_flags(p) -> None:
    p.add_argument("--sigma-mm", type=float, default=1.0)
    p.add_argument("--clamp-eps", type=float, default=None)
    p.add_argument("--max-nonpos", type=float, default=0.0)


def _add_optim_flags(p) -> None:
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=10)


def _add_train_flags(p) -> None:
    p.add_argument("--lambda", type=float, default=0.1, help="image-channel fusion weight")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--embed-seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--prior-scale", type=float, default=1.0)
    p.add_argument("--offset-scale", type=float, default=1.0)
    _add_dbm_flags(p)
    _add_threads(p)


def build_parser() -> _Parser:
    parser = _Parser(prog="morphogate", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-cohort", help="generate a synthetic cohort")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_gen_cohort)

    p_atlas = sub.add_parser("atlas", help="atlas operations")
    atlas_sub = p_atlas.add_subparsers(dest="atlas_command", metavar="subcommand", parser_class=_Parser)
    p = atlas_sub.add_parser("gen", help="procedural parcellation")
    p.add_argument("--dims", required=True, help="comma-separated, e.g. 32,40,32")
    p.add_argument("--spacing", default="1,1,1")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_atlas_gen)

    p = sub.add_parser("dbm", help="log-Jacobian map from a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    _add_dbm_flags(p)
    p.set_defaults(func=cmd_dbm)

    p = sub.add_parser("weights", help="per-region gate inspection")
    p.add_argument("--record", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--mlp", required=True, help="model checkpoint path")
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="train the outcome model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_optim_flags(p)
    p.add_argument("--no-dbm", action="store_true")
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--no-patient", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with a trained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--atlas", default=None, help="override the checkpoint's atlas path")
    _add_threads(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the component toggle grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2, 3, 4])
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render evaluation reports")
    p.add_argument(
        "--eval",
        action="append",
        required=True,
        help="evaluation JSON, optionally label=path; repeatable",
    )
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except MorphogateError as exc:
        log_event("error", type=type(exc).__name__, message=str(exc))
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

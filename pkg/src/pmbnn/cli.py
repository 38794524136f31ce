"""Command-line entry point.

Subcommands wire the pipeline end to end: ``preprocess`` -> ``split`` ->
``train`` (one model per invocation) -> ``reconstruct`` -> ``evaluate``
-> ``report``, plus ``synth`` for generating oracle subjects and
``gradcheck`` for verifying the reverse-mode gradients. Configuration is
a JSON file with flat dotted keys; any ``--section.key value`` flag
overrides the file. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import nn_core, stats_eval, training
from .errors import PmbnnError
from .experiment import (
    ActivityPhase,
    DEFAULT_PLAN,
    SyntheticSpec,
    generate_synthetic_subject,
    reconstruct_pmbnn_r,
    split_by_activity,
)
from .physio_model import LambdaParams
from .signal_pipeline import (
    FilterConfig,
    SubjectRecord,
    parse_recording_csv,
    preprocess_subject,
    record_to_csv_bytes,
    resample_linear_1hz,
)
from .training import PmFitConfig, TrainConfig

log = logging.getLogger("pmbnn")

DEFAULTS = {
    "filter.sg_window": 15,
    "filter.sg_polyorder": 1,
    "filter.fir_taps": 10,
    "filter.vo2_floor": 0.05,
    "filter.sg_on_hr": False,
    "split.ratio": 0.8,
    "train.max_epochs": 5000,
    "train.stop_threshold": 10.0,
    "train.de_weight": 1e5,
    "train.lr": 0.01,
    "train.seed": 0,
    "pm.iters": 150,
    "pm.fd_step": 1e-6,
    "pm.objective": "trajectory",
    "pm.proximal": 1e-3,
}

MODEL_COLUMNS = {
    "pmbnn": "hr_pmbnn",
    "fcnn": "hr_fcnn",
    "pm": "hr_pm",
    "pmbnn_r": "hr_pmbnn_r",
}
JOINED_HEADER = ["t_s", "hr_true", "hr_pmbnn", "hr_fcnn", "hr_pm",
                 "hr_pmbnn_r", "activity"]

#: default ground truth for ``synth``: rising-HR configuration inside the box
SYNTH_DEFAULT_LAMBDA = LambdaParams(0.025, 0.08, -2.8, 19.0, 0.44, 0.1)


def _load_config(path: str | None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        with open(path, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        for key, value in file_cfg.items():
            cfg[key] = value
    return cfg


def _apply_overrides(cfg: dict, extras: list[str]) -> dict:
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--") or "." not in token:
            raise SystemExit(f"unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            i += 1
            if i >= len(extras):
                raise SystemExit(f"flag {token} expects a value")
            raw = extras[i]
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
        i += 1
    return cfg


def _filter_config(cfg: dict) -> FilterConfig:
    return FilterConfig(
        sg_window=int(cfg["filter.sg_window"]),
        sg_polyorder=int(cfg["filter.sg_polyorder"]),
        fir_taps=int(cfg["filter.fir_taps"]),
        vo2_floor=float(cfg["filter.vo2_floor"]),
        sg_on_hr=bool(cfg["filter.sg_on_hr"]),
    )


def _train_config(cfg: dict, seed_override: int | None) -> TrainConfig:
    return TrainConfig(
        max_epochs=int(cfg["train.max_epochs"]),
        stop_threshold=float(cfg["train.stop_threshold"]),
        de_weight=float(cfg["train.de_weight"]),
        learning_rate=float(cfg["train.lr"]),
        seed=int(cfg["train.seed"] if seed_override is None else seed_override),
    )


def _pm_config(cfg: dict) -> PmFitConfig:
    return PmFitConfig(
        iters=int(cfg["pm.iters"]),
        fd_step=float(cfg["pm.fd_step"]),
        objective=str(cfg["pm.objective"]),
        proximal=float(cfg["pm.proximal"]),
    )


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _write_manifest(out_dir: str, name: str, payload: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _read_record(path: str) -> SubjectRecord:
    with open(path, "rb") as fh:
        raw = parse_recording_csv(fh.read(), subject_id=_subject_id(path))
    return resample_linear_1hz(raw)


def _subject_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _write_predictions(path: str, column: str, times, hr_true, pred, labels):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_s", "hr_true", column, "activity"])
        for t, h, p, a in zip(times, hr_true, pred, labels):
            writer.writerow([f"{t:.10g}", f"{h:.10g}", f"{p:.10g}", a])


def _test_times(rec: SubjectRecord, split) -> np.ndarray:
    return rec.vo2.t0 + rec.vo2.dt * split.test_indices


# --- subcommands ------------------------------------------------------------

def cmd_preprocess(args, cfg: dict) -> int:
    rec = _read_record(args.input)
    out = preprocess_subject(rec, _filter_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    dest = os.path.join(args.out, "preprocessed.csv")
    with open(dest, "wb") as fh:
        fh.write(record_to_csv_bytes(out))
    _write_manifest(args.out, "preprocess_manifest.json", {
        "command": "preprocess",
        "input": os.path.basename(args.input),
        "subject_id": rec.subject_id,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "n_samples": len(out),
    })
    log.info("preprocessed %s -> %s", args.input, dest)
    return 0


def _spec_from_file(path: str, seed: int | None) -> SyntheticSpec:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    plan = tuple(
        ActivityPhase(
            label=p["label"],
            duration_s=int(p["duration_s"]),
            target_vo2=float(p["target_vo2"]),
            tau_s=float(p.get("tau_s", 30.0)),
        )
        for p in payload["plan"]
    )
    return SyntheticSpec(
        subject_id=payload.get("subject_id", "synthetic"),
        plan=plan,
        lambda_true=LambdaParams.from_array(payload["lambda_true"]),
        hr0=float(payload.get("hr0", 70.0)),
        noise_sigma_hr=float(payload.get("noise_sigma_hr", 0.0)),
        noise_sigma_vo2=float(payload.get("noise_sigma_vo2", 0.0)),
        seed=int(payload.get("seed", 0) if seed is None else seed),
    )


def cmd_synth(args, cfg: dict) -> int:
    if args.spec:
        spec = _spec_from_file(args.spec, args.seed)
    else:
        spec = SyntheticSpec(
            subject_id="synthetic",
            plan=DEFAULT_PLAN,
            lambda_true=SYNTH_DEFAULT_LAMBDA,
            hr0=70.0,
            noise_sigma_hr=args.noise_hr,
            seed=args.seed if args.seed is not None else 0,
        )
    rec = generate_synthetic_subject(spec)
    os.makedirs(args.out, exist_ok=True)
    dest = os.path.join(args.out, f"{spec.subject_id}.csv")
    with open(dest, "wb") as fh:
        fh.write(record_to_csv_bytes(rec))
    _write_manifest(args.out, "synth_manifest.json", {
        "command": "synth",
        "subject_id": spec.subject_id,
        "lambda_true": list(spec.lambda_true.as_array()),
        "hr0": spec.hr0,
        "noise_sigma_hr": spec.noise_sigma_hr,
        "noise_sigma_vo2": spec.noise_sigma_vo2,
        "seed": spec.seed,
        "plan": [
            {"label": p.label, "duration_s": p.duration_s,
             "target_vo2": p.target_vo2, "tau_s": p.tau_s}
            for p in spec.plan
        ],
        "config_hash": _config_hash(cfg),
    })
    log.info("synthesized %s (%d samples)", dest, len(rec))
    return 0


def cmd_split(args, cfg: dict) -> int:
    rec = _read_record(args.input)
    split = split_by_activity(rec, float(cfg["split.ratio"]))
    os.makedirs(args.out, exist_ok=True)
    for name, part in (("train", split.train), ("test", split.test)):
        with open(os.path.join(args.out, f"{name}.csv"), "wb") as fh:
            fh.write(record_to_csv_bytes(part))
    _write_manifest(args.out, "split_manifest.json", {
        "command": "split",
        "subject_id": rec.subject_id,
        "ratio": cfg["split.ratio"],
        "split_hash": split.provenance_hash(),
        "train_indices": split.train_indices.tolist(),
        "test_indices": split.test_indices.tolist(),
        "config": cfg,
    })
    return 0


def cmd_train(args, cfg: dict) -> int:
    rec = _read_record(args.input)
    split = split_by_activity(rec, float(cfg["split.ratio"]))
    times = _test_times(rec, split)
    labels = split.test.activity_labels
    hr_true = split.test.hr.values
    os.makedirs(args.out, exist_ok=True)
    started = time.perf_counter()

    if args.model in ("pmbnn", "fcnn"):
        tc = _train_config(cfg, args.seed)
        trainer = training.train_pmbnn if args.model == "pmbnn" else training.train_fcnn
        model = trainer(split.train, tc)
        pred = nn_core.mlp_forward(model.mlp, split.test.vo2.values)
        ckpt = os.path.join(args.out, f"{args.model}_checkpoint.json")
        nn_core.save_checkpoint(ckpt, model.mlp, tc.bounds, tc.seed, _config_hash(cfg))
        lam = model.lam
        final = model.loss_history[-1] if model.loss_history else None
        extra = {
            "stopped_reason": model.stopped_reason,
            "epochs_run": len(model.loss_history),
            "final_losses": None if final is None else {
                "l_data": final.l_data, "l_de": final.l_de, "l_tot": final.l_tot,
            },
        }
    else:
        pm_cfg = _pm_config(cfg)
        lam = training.fit_pm(split.train, cfg=pm_cfg)
        pred = reconstruct_pmbnn_r(split.test, lam).values
        ckpt = os.path.join(args.out, "pm_lambda.json")
        with open(ckpt, "w", encoding="utf-8") as fh:
            json.dump({"lambda": list(lam.as_array()),
                       "config_hash": _config_hash(cfg)}, fh, sort_keys=True)
            fh.write("\n")
        train_pred = training.simulate_record_hr(split.train, lam).values
        extra = {
            "train_mse": training.loss_data(train_pred, split.train.hr.values),
        }

    wall = time.perf_counter() - started
    pred_path = os.path.join(args.out, f"predictions_{args.model}.csv")
    _write_predictions(pred_path, MODEL_COLUMNS[args.model], times, hr_true,
                       pred, labels)
    _write_manifest(args.out, f"{args.model}_run_manifest.json", {
        "command": "train",
        "model": args.model,
        "subject_id": rec.subject_id,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "split_hash": split.provenance_hash(),
        "lambda": list(lam.as_array()),
        "wall_time_s": wall,
        **extra,
    })
    return 0


def cmd_reconstruct(args, cfg: dict) -> int:
    params, bounds, _seed, _hash = nn_core.load_checkpoint(args.checkpoint)
    lam = nn_core.lambda_from_theta(params.theta, bounds)
    rec = _read_record(args.input)
    split = split_by_activity(rec, float(cfg["split.ratio"]))
    pred = reconstruct_pmbnn_r(split.test, lam, bounds).values
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions_pmbnn_r.csv")
    _write_predictions(pred_path, MODEL_COLUMNS["pmbnn_r"],
                       _test_times(rec, split), split.test.hr.values, pred,
                       split.test.activity_labels)
    _write_manifest(args.out, "pmbnn_r_run_manifest.json", {
        "command": "reconstruct",
        "subject_id": rec.subject_id,
        "checkpoint": os.path.basename(args.checkpoint),
        "lambda": list(lam.as_array()),
        "split_hash": split.provenance_hash(),
        "config": cfg,
    })
    return 0


def _read_predictions(path: str):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    model_cols = [h for h in header if h in MODEL_COLUMNS.values()]
    if header[:2] != ["t_s", "hr_true"] or header[-1] != "activity" or not model_cols:
        raise PmbnnError(f"{path}: not a predictions CSV (header {header})")
    return header, rows


def cmd_evaluate(args, cfg: dict) -> int:
    joined: dict[float, dict] = {}
    for path in args.pred:
        header, rows = _read_predictions(path)
        for row in rows:
            t = float(row[0])
            entry = joined.setdefault(
                t, {"hr_true": row[1], "activity": row[-1]}
            )
            for col, value in zip(header[2:-1], row[2:-1]):
                entry[col] = value
    times = sorted(joined)
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.csv")
    with open(pred_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(JOINED_HEADER)
        for t in times:
            e = joined[t]
            writer.writerow([f"{t:.10g}", e["hr_true"]]
                            + [e.get(c, "") for c in JOINED_HEADER[2:-1]]
                            + [e["activity"]])

    hr_true = np.array([float(joined[t]["hr_true"]) for t in times])
    labels = np.array([joined[t]["activity"] for t in times])
    metrics: dict[str, dict] = {}
    for model, col in MODEL_COLUMNS.items():
        have = [t for t in times if col in joined[t]]
        if not have:
            continue
        pred = np.array([float(joined[t][col]) for t in have])
        ref = np.array([float(joined[t]["hr_true"]) for t in have])
        labs = np.array([joined[t]["activity"] for t in have])
        entry = {"overall": _metric_dict(ref, pred), "per_activity": {}}
        for label in dict.fromkeys(labs.tolist()):
            mask = labs == label
            entry["per_activity"][label] = _metric_dict(ref[mask], pred[mask])
        metrics[model] = entry
    _write_manifest(args.out, "metrics.json", {
        "command": "evaluate",
        "participant": args.subject,
        "n_samples": len(times),
        "models": metrics,
        "config": cfg,
    })
    log.info("evaluated %d models on %d joined samples", len(metrics), len(times))
    return 0


def _metric_dict(ref: np.ndarray, pred: np.ndarray) -> dict:
    from .errors import ConstantReference

    try:
        r2 = stats_eval.r_squared(ref, pred)
    except ConstantReference:
        r2 = None
    return {"r2": r2, "rmse": stats_eval.rmse(ref, pred)}


def cmd_report(args, cfg: dict) -> int:
    subjects = []
    for path in args.metrics:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        overall, per_activity = {}, {}
        for model, entry in payload["models"].items():
            overall[model] = stats_eval.MetricPair(**entry["overall"])
            for act, m in entry["per_activity"].items():
                per_activity.setdefault(act, {})[model] = stats_eval.MetricPair(**m)
        subjects.append(stats_eval.SubjectMetrics(
            participant=payload["participant"],
            overall=overall,
            per_activity=per_activity,
        ))
    report = stats_eval.build_eval_report(subjects)
    paths = stats_eval.emit_report(report, args.out)
    _write_manifest(args.out, "report_manifest.json", {
        "command": "report",
        "inputs": [os.path.basename(p) for p in args.metrics],
        "participants": [s.participant for s in subjects],
        "config": cfg,
        "config_hash": _config_hash(cfg),
    })
    log.info("report written: %s", paths["csv"])
    return 0


def cmd_gradcheck(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else 0
    err = nn_core.run_gradcheck(seed)
    print(f"max relative gradient error (seed {seed}): {err:.3e}")
    return 0 if err <= 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmbnn",
        description="Physiological-model-based neural network pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file with flat dotted keys")
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("preprocess", help="resample + filter a recording")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic oracle subject")
    p.add_argument("--spec", help="synthetic spec JSON")
    p.add_argument("--noise-hr", type=float, default=0.0)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="per-activity 80/20 split")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model on one subject")
    p.add_argument("--model", required=True, choices=("pmbnn", "fcnn", "pm"))
    p.add_argument("--input", required=True, help="preprocessed subject CSV")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="PM with lambdas from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="join prediction CSVs and score them")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--subject", default="subject")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate per-subject metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="verify reverse-mode gradients")
    common(p, out=False)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PMBNN_LOG", "WARNING"))
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        cfg = _apply_overrides(_load_config(args.config), extras)
        return args.func(args, cfg)
    except PmbnnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

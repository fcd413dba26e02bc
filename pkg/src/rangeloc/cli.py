"""Batch entry points wiring the pipeline end to end.

Subcommands: simulate -> prepare -> train / baseline -> evaluate, plus the
ablate grid. All stages share one config (profile + optional file +
``--set`` overrides) and a seed; every output file is stamped with the
resolved config hash and seed, and contains no timestamps or absolute paths,
so a re-run with equal hash and seed is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as dsmod
from . import evaluate as evmod
from . import models as mdmod
from .autodiff import save_checkpoint
from .config import config_hash, load_config
from .dataset import Layout, Normalizer, PreparedTrial
from .geometry import AnchorParams, TagMount, Vec3
from .go import GoConfig, run_go_pipeline
from .hashing import canonical_hash
from .sim import (
    Box,
    Environment,
    NoiseModel,
    OslBiasField,
    TrialData,
    anchors_visible,
    generate_trajectory,
    gt_labels,
    osl_labels,
    read_trial,
    sample_measurements,
    write_trial,
)

FLOAT_FMT = "%.9g"


# ---------------------------------------------------------------------------
# config-to-object builders
# ---------------------------------------------------------------------------


def build_environment(cfg: dict) -> Environment:
    env = cfg["environment"]
    return Environment(
        bounds=Box(tuple(env["bounds"][0]), tuple(env["bounds"][1])),
        anchors=tuple(
            AnchorParams(int(a[0]), Vec3(a[1], a[2], a[3]), a[4], a[5])
            for a in env["anchors"]
        ),
        occluders=tuple(Box(tuple(b[0]), tuple(b[1])) for b in env["occluders"]),
    )


def build_mounts(cfg: dict) -> list[TagMount]:
    return [TagMount(int(m[0]), Vec3(m[1], m[2], m[3])) for m in cfg["rig"]["mounts"]]


def build_noise(cfg: dict) -> NoiseModel:
    n = cfg["noise"]
    return NoiseModel(
        sigma_range=n["sigma_range"],
        p_outlier=n["p_outlier"],
        outlier_spread=n["outlier_spread"],
        nlos_bias=n["nlos_bias"],
        p_detect_los=n["p_detect_los"],
        p_detect_nlos=n["p_detect_nlos"],
    )


def trajectory_box(cfg: dict) -> Box:
    lo, hi = cfg["environment"]["bounds"]
    m = cfg["trajectory"]["margin"]
    z0, z1 = cfg["trajectory"]["z_band"]
    return Box((lo[0] + m, lo[1] + m, z0), (hi[0] - m, hi[1] - m, z1))


def data_hash(cfg: dict, seed: int) -> str:
    """Hash of the data-generating stages only; training-stage knobs (epochs,
    repeats) may vary between runs that share one simulated dataset."""
    keys = ("environment", "rig", "noise", "trajectory", "dataset")
    return canonical_hash({k: cfg[k] for k in keys} | {"seed": seed})


def _stamp(cfg: dict, seed: int) -> str:
    return f"# config={config_hash(cfg)} seed={seed}"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_one(args) -> tuple[str, int]:
    cfg, workdir, seed, i = args
    trial_id = f"trial_{i:03d}"
    env = build_environment(cfg)
    mounts = build_mounts(cfg)
    noise = build_noise(cfg)
    tcfg = cfg["trajectory"]
    trial_seed = seed * 100003 + i
    traj = generate_trajectory(
        trajectory_box(cfg), tcfg["waypoint_count"], tcfg["speed"], tcfg["dt"],
        seed=trial_seed, max_duration_s=tcfg["max_duration_s"],
    )
    records = sample_measurements(env, traj, noise, cfg["noise"]["rate_hz"], mounts,
                                  seed=trial_seed)
    e = cfg["environment"]
    field = OslBiasField.from_seed(
        env.bounds, e["osl_bumps"], seed=seed,
        xy_cap=e["osl_xy_cap"], z_amp=tuple(e["osl_z_amp"]),
    )
    trial = TrialData(
        trial_id=trial_id,
        env=env,
        mounts=mounts,
        records=records,
        gt=gt_labels(traj, mounts),
        osl=osl_labels(traj, field, mounts),
        meta={"config_hash": config_hash(cfg), "seed": seed, "trial_seed": trial_seed},
    )
    write_trial(Path(workdir) / "trials" / trial_id, trial)
    _, counts = anchors_visible(records, window_s=1.0)
    return trial_id, int(counts.min()) if len(counts) else 0


def cmd_simulate(cfg: dict, workdir: str | Path, seed: int,
                 n_trials: int | None = None, force: bool = False,
                 jobs: int = 1) -> dict:
    workdir = Path(workdir)
    trials_dir = workdir / "trials"
    if trials_dir.exists() and not force:
        raise FileExistsError(f"{trials_dir} exists; pass --force to overwrite")
    n = n_trials if n_trials is not None else cfg["dataset"]["n_trials"]
    n_train = min(cfg["dataset"]["n_train"], n)
    work = [(cfg, str(workdir), seed, i) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_simulate_one, work))
    else:
        results = [_simulate_one(w) for w in work]
    trial_ids = [tid for tid, _ in results]
    train_ids, test_ids = trial_ids[:n_train], trial_ids[n_train:]
    if not test_ids:
        print("warning: empty test split", file=sys.stderr)
    manifest = {
        "config_hash": config_hash(cfg),
        "data_hash": data_hash(cfg, seed),
        "seed": seed,
        "trials": trial_ids,
        "train_ids": train_ids,
        "test_ids": test_ids,
        "min_visible_1s": {tid: mv for tid, mv in results},
    }
    with open(workdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"simulated {n} trials -> {trials_dir} (split {len(train_ids)}/{len(test_ids)})")
    return manifest


def read_manifest(workdir: str | Path) -> dict:
    with open(Path(workdir) / "manifest.json") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: dict, workdir: str | Path, seed: int) -> Path:
    workdir = Path(workdir)
    manifest = read_manifest(workdir)
    if manifest["data_hash"] != data_hash(cfg, seed):
        raise ValueError(
            "config/seed do not match the simulated trials "
            f"({manifest['data_hash']} vs {data_hash(cfg, seed)})"
        )
    env = build_environment(cfg)
    mounts = build_mounts(cfg)
    layout = Layout(tuple(m.tag_id for m in mounts),
                    tuple(a.anchor_id for a in env.anchors))
    S = cfg["dataset"]["S"]
    bin_width = cfg["dataset"]["bin_width"]
    prepared: list[PreparedTrial] = []
    kept = []
    for tid in manifest["trials"]:
        trial = read_trial(workdir / "trials" / tid)
        frames = dsmod.bin_measurements(trial.records, layout, bin_width)
        K = len(frames)
        if K < S:
            print(f"warning: {tid} skipped (K={K} < S={S})", file=sys.stderr)
            continue
        pairs_osl = dsmod.attach_labels(frames, trial.osl)
        pairs_gt = dsmod.attach_labels(frames, trial.gt)
        prepared.append(PreparedTrial(
            trial_id=tid,
            stamps=np.array([f.stamp for f in frames]),
            frames=np.stack([f.values for f in frames]),
            labels_osl=np.stack([l.values for _, l in pairs_osl]),
            labels_gt=np.stack([l.values for _, l in pairs_gt]),
            clamped=np.array([l.clamped for _, l in pairs_osl], dtype=bool),
        ))
        kept.append(tid)
        print(f"{tid}: K={K} M={K - S + 1}")
    train_ids = [t for t in manifest["train_ids"] if t in kept]
    test_ids = [t for t in manifest["test_ids"] if t in kept]
    train_trials = [t for t in prepared if t.trial_id in train_ids]
    if not train_trials:
        raise ValueError("no training trials survived preparation")
    scaler = dsmod.fit_normalizer(
        [t.frames for t in train_trials], [t.labels_osl for t in train_trials]
    )
    ds_dir = workdir / "dataset"
    ds_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "config_hash": config_hash(cfg),
        "data_hash": manifest["data_hash"],
        "seed": seed,
        "train_ids": train_ids,
        "test_ids": test_ids,
    }
    dsmod.save_prepared(ds_dir / "dataset.npz", prepared, layout, S, scaler, meta)
    for t in prepared:
        dsmod.export_frames_csv(
            ds_dir / f"frames_{t.trial_id}.csv", t,
            meta_line=f"config={config_hash(cfg)} seed={seed}",
        )
    return ds_dir / "dataset.npz"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _subset_columns(trial: PreparedTrial, layout: Layout, labels: str, tags: int):
    n_anchors = len(layout.anchor_ids)
    lab = trial.labels_gt if labels == "gt" else trial.labels_osl
    if tags == 1:
        return trial.frames[:, :n_anchors], lab[:, :3]
    return trial.frames, lab


def _normalized_windows(trials, layout, S, scaler, labels, tags):
    tws = []
    for t in trials:
        fr, lb = _subset_columns(t, layout, labels, tags)
        tws.append(dsmod.TrialWindows(
            t.trial_id, t.stamps, scaler.apply_ranges(fr), scaler.apply_positions(lb)
        ))
    return dsmod.WindowedDataset(S, tws, scaler)


def _write_pred_csv(path: Path, stamps, positions, tag_ids, meta_line: str):
    with open(path, "w", newline="") as f:
        f.write(meta_line + "\n")
        header = ["stamp"]
        for tid in tag_ids:
            header += [f"tag{tid}_x", f"tag{tid}_y", f"tag{tid}_z"]
        f.write(",".join(header) + "\n")
        for t, row in zip(stamps, positions.reshape(len(stamps), -1)):
            f.write(",".join([FLOAT_FMT % t] + [FLOAT_FMT % v for v in row]) + "\n")


def cmd_train(cfg: dict, workdir: str | Path, seed: int, model_kind: str = "mamba",
              labels: str | None = None, tags: int | None = None,
              run_name: str | None = None, epochs: int | None = None,
              repeats: int | None = None) -> Path:
    workdir = Path(workdir)
    trials, layout, S, scaler, meta = dsmod.load_prepared(workdir / "dataset" / "dataset.npz")
    if meta["data_hash"] != data_hash(cfg, seed):
        raise ValueError("config/seed do not match the prepared dataset")
    tcfg = cfg["train"]
    labels = labels or tcfg["labels"]
    tags = tags if tags is not None else len(layout.tag_ids)
    run_name = run_name or model_kind
    n_anchors = len(layout.anchor_ids)
    input_dim = n_anchors * tags
    label_dim = 3 * tags

    if model_kind == "mamba":
        model_cfg = mdmod.MambaConfig(
            input_dim=input_dim, label_dim=label_dim, S=S, **cfg["model"]["mamba"]
        )
    else:
        model_cfg = mdmod.RnnConfig(
            cell=model_kind, input_dim=input_dim, label_dim=label_dim,
            **cfg["model"][model_kind],
        )
    train_cfg = mdmod.TrainConfig(
        batch=tcfg["batch"],
        epochs=epochs if epochs is not None else tcfg["epochs"],
        lr0=tcfg["lr0"],
        lr_step=tcfg["lr_step"],
        lr_factor=tcfg["lr_factor"],
        repeats=repeats if repeats is not None else tcfg["repeats"],
        seed=seed,
    )
    by_id = {t.trial_id: t for t in trials}
    train_trials = [by_id[t] for t in meta["train_ids"]]
    test_trials = [by_id[t] for t in meta["test_ids"]]
    ds = _normalized_windows(train_trials, layout, S, scaler, labels, tags)
    dtype = np.float32 if tcfg["precision"] == "single" else np.float64
    runs = mdmod.train_repeats(model_kind, model_cfg, ds, train_cfg, dtype=dtype)

    run_dir = workdir / "runs" / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, seed)
    with open(run_dir / "train_log.csv", "w", newline="") as f:
        f.write(stamp + "\n")
        f.write("repeat,epoch,lr,loss\n")
        for r, (_, hist) in enumerate(runs, start=1):
            for e, lr, loss in zip(hist.epochs, hist.lrs, hist.losses):
                f.write(f"{r},{e},{FLOAT_FMT % lr},{FLOAT_FMT % loss}\n")
    tag_ids = list(layout.tag_ids[:tags])
    for r, (model, _) in enumerate(runs, start=1):
        save_checkpoint(run_dir / f"ckpt_r{r}.npz", model.parameters(), model.config_hash())
        pred_dir = run_dir / f"preds_r{r}"
        pred_dir.mkdir(exist_ok=True)
        for t in test_trials:
            fr, _ = _subset_columns(t, layout, labels, tags)
            pred_n = mdmod.predict_trajectory(
                model, scaler.apply_ranges(fr), S, assemble=tcfg["assemble"]
            )
            pred = scaler.invert_positions(pred_n)
            _write_pred_csv(pred_dir / f"{t.trial_id}.csv", t.stamps, pred, tag_ids, stamp)
    run_meta = {
        "method": run_name,
        "model": model_kind,
        "labels": labels,
        "tags": tags,
        "tag_ids": tag_ids,
        "repeats": train_cfg.repeats,
        "config_hash": config_hash(cfg),
        "model_config_hash": runs[0][0].config_hash(),
        "seed": seed,
        "test_ids": meta["test_ids"],
    }
    with open(run_dir / "metadata.json", "w") as f:
        json.dump(run_meta, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"trained {model_kind} ({train_cfg.repeats} repeat(s)) -> {run_dir}")
    return run_dir


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def cmd_baseline(cfg: dict, workdir: str | Path, seed: int) -> Path:
    workdir = Path(workdir)
    manifest = read_manifest(workdir)
    if manifest["data_hash"] != data_hash(cfg, seed):
        raise ValueError("config/seed do not match the simulated trials")
    g = cfg["go"]
    go_cfg = GoConfig(
        window_frames=g["window_frames"], huber_delta=g["huber_delta"],
        max_iters=g["max_iters"], rel_tol=g["rel_tol"], lm_lambda0=g["lm_lambda0"],
        motion_sigma=g["motion_sigma"], init_mode=g["init_mode"],
    )
    run_dir = workdir / "runs" / "go"
    pred_dir = run_dir / "preds_r1"
    pred_dir.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, seed)
    first_tag = None
    for tid in manifest["test_ids"]:
        trial = read_trial(workdir / "trials" / tid)
        first_tag = trial.mounts[0].tag_id
        out = run_go_pipeline(trial, list(trial.env.anchors), go_cfg,
                              bin_width=cfg["dataset"]["bin_width"])
        with open(pred_dir / f"{tid}.csv", "w", newline="") as f:
            f.write(stamp + "\n")
            f.write("stamp,x,y,z,converged,cost\n")
            for t, p, c, q in zip(out.stamps, out.positions, out.converged, out.costs):
                f.write(",".join([
                    FLOAT_FMT % t, FLOAT_FMT % p[0], FLOAT_FMT % p[1], FLOAT_FMT % p[2],
                    str(int(c)), FLOAT_FMT % q,
                ]) + "\n")
        print(f"go {tid}: rmse={out.rmse:.3f} m")
    run_meta = {
        "method": "go",
        "model": "go",
        "labels": "n/a",
        "tags": 1,
        "tag_ids": [first_tag if first_tag is not None else 0],
        "repeats": 1,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "test_ids": manifest["test_ids"],
    }
    with open(run_dir / "metadata.json", "w") as f:
        json.dump(run_meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return run_dir


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _read_pred_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    arr = np.array([[float(v) for v in row] for row in rows[1:]])
    return arr[:, 0], arr[:, 1:]


def _gt_reference(workdir: Path, tid: str, stamps: np.ndarray, tag_ids: list[int]) -> np.ndarray:
    trial = read_trial(workdir / "trials" / tid)
    gt = trial.gt.sample(stamps)
    cols = []
    for tag in tag_ids:
        k = 3 * trial.gt.tag_ids.index(tag)
        cols.append(gt[:, k : k + 3])
    return np.concatenate(cols, axis=1)


def evaluate_run(cfg: dict, workdir: str | Path, run_name: str) -> evmod.MetricReport:
    """Score one run directory against true ground truth."""
    workdir = Path(workdir)
    run_dir = workdir / "runs" / run_name
    with open(run_dir / "metadata.json") as f:
        meta = json.load(f)
    tag_ids = meta["tag_ids"]
    repeats = []
    for r in range(1, meta["repeats"] + 1):
        per_trial = {}
        for tid in meta["test_ids"]:
            stamps, pred = _read_pred_csv(run_dir / f"preds_r{r}" / f"{tid}.csv")
            pred = pred[:, : 3 * len(tag_ids)]  # drop converged/cost extras
            ref = _gt_reference(workdir, tid, stamps, tag_ids)
            per_trial[tid] = (pred, ref)
        repeats.append(per_trial)
    return evmod.build_report_multi(meta["method"], repeats, config_hash(cfg))


def cmd_evaluate(cfg: dict, workdir: str | Path, seed: int,
                 methods: list[str]) -> evmod.ComparisonTable:
    workdir = Path(workdir)
    reports = [evaluate_run(cfg, workdir, m) for m in methods]
    rep_dir = workdir / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, seed)
    for rep in reports:
        with open(rep_dir / f"metrics_{rep.method}.json", "w") as f:
            f.write(rep.to_json() + "\n")
    table = evmod.compare_methods(reports)
    (rep_dir / "comparison.csv").write_text(stamp + "\n" + table.to_csv())
    (rep_dir / "comparison.txt").write_text(stamp + "\n" + table.to_text())
    # long-format per-sample errors of the first repeat, for external plotting
    long_rows = []
    for m in methods:
        run_dir = workdir / "runs" / m
        with open(run_dir / "metadata.json") as f:
            meta = json.load(f)
        for tid in meta["test_ids"]:
            stamps, pred = _read_pred_csv(run_dir / "preds_r1" / f"{tid}.csv")
            pred = pred[:, : 3 * len(meta["tag_ids"])]
            ref = _gt_reference(workdir, tid, stamps, meta["tag_ids"])
            long_rows.append((tid, m, evmod.error_samples(pred, ref)))
    evmod.write_long_format_csv(rep_dir / "errors_long.csv", long_rows)
    print(table.to_text())
    return table


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(cfg: dict, workdir: str | Path, seed: int,
               models: list[str] | None = None) -> dict:
    workdir = Path(workdir)
    models = models or cfg["ablate"]["models"]
    epochs = cfg["ablate"]["epochs"]
    rows = []
    for model in models:
        for labels in ("gt", "osl"):
            for tags in (2, 1):
                name = f"ablate_{model}_{labels}_{tags}tag"
                cmd_train(cfg, workdir, seed, model_kind=model, labels=labels,
                          tags=tags, run_name=name, epochs=epochs, repeats=1)
                rep = evaluate_run(cfg, workdir, name)
                assert rep.reference == "ground_truth"
                rows.append({
                    "model": model, "labels": labels, "tags": tags,
                    "rmse": rep.overall_rmse, "reference": rep.reference,
                })
    report = evmod.ablation_report(rows)
    report["config_hash"] = config_hash(cfg)
    report["seed"] = seed
    abl_dir = workdir / "reports"
    abl_dir.mkdir(parents=True, exist_ok=True)
    with open(abl_dir / "ablation.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(abl_dir / "ablation.csv", "w", newline="") as f:
        f.write(_stamp(cfg, seed) + "\n")
        f.write("model,labels,tags,rmse_mean,runs\n")
        for r in report["rows"]:
            f.write(f"{r['model']},{r['labels']},{r['tags']},"
                    f"{FLOAT_FMT % r['rmse_mean']},{r['runs']}\n")
    print(f"ablation grid complete: {len(report['rows'])} cells, "
          f"{len(report['missing'])} missing")
    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--workdir", required=True, help="run directory (all paths relative to it)")
    p.add_argument("--config", default=None, help="JSON config file merged over the profile")
    p.add_argument("--profile", default="desk", help="bundled profile: desk or paper")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="trial-level parallelism (1 = serial)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY.PATH=VALUE", help="config override, JSON-parsed value")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rangeloc",
        description="synthetic range-only localization workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "prepare", "train", "baseline", "evaluate", "ablate"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "simulate":
            p.add_argument("--n-trials", type=int, default=None)
        if name == "train":
            p.add_argument("--model", default="mamba",
                           choices=["mamba", "bilstm", "lstm", "gru"])
            p.add_argument("--labels", default=None, choices=["osl", "gt"])
            p.add_argument("--tags", type=int, default=None, choices=[1, 2])
            p.add_argument("--run-name", default=None)
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--repeats", type=int, default=None)
        if name == "evaluate":
            p.add_argument("--methods", default="mamba,bilstm,go")
        if name == "ablate":
            p.add_argument("--models", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.profile, args.config, args.sets)
        if args.command == "simulate":
            cmd_simulate(cfg, args.workdir, args.seed, n_trials=args.n_trials,
                         force=args.force, jobs=args.jobs)
        elif args.command == "prepare":
            cmd_prepare(cfg, args.workdir, args.seed)
        elif args.command == "train":
            cmd_train(cfg, args.workdir, args.seed, model_kind=args.model,
                      labels=args.labels, tags=args.tags, run_name=args.run_name,
                      epochs=args.epochs, repeats=args.repeats)
        elif args.command == "baseline":
            cmd_baseline(cfg, args.workdir, args.seed)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.workdir, args.seed, args.methods.split(","))
        elif args.command == "ablate":
            models = args.models.split(",") if args.models else None
            cmd_ablate(cfg, args.workdir, args.seed, models)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

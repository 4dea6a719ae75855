"""Command-line front end: phantom-gen, edt, gate, train, infer, eval, end-to-end.

Every command is reproducible from (config, seed); resolved configs are
echoed into the outputs.  ``--threads 1`` pins the BLAS thread pools before
numpy is imported, which makes runs bit-for-bit deterministic; this module
therefore defers all heavy imports until after argument parsing.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

DEFAULT_SEED = 7

END_TO_END_DEFAULTS = {
    "phantom": {"n_cases": 30},
    "train": {
        "steps": 150,
        "batch_crops": 4,
        "lr": 0.01,
        "momentum": 0.9,
        "crop_size": [32, 32, 16],
        "trunk_channels": [6, 6],
        "max_rotation_deg": 10.0,
    },
    "infer": {"window": [80, 80, 28], "stride": [80, 80, 28]},
    "eval": {"extract_threshold": 0.5, "min_voxels": 4},
    "gating": {"d0_mm": 70.0, "d_prox_mm": 50.0, "d_dist_mm": 90.0},
    "modes": ["single", "bg", "sg"],
}

REPORT_METRIC_COLUMNS = ("mRecall", "Recall_max", "mFROC", "FROC@4", "FROC@6")


def _apply_thread_limit(argv: list[str]) -> None:
    """Set BLAS thread env vars from --threads before numpy gets imported."""
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(threads)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="root random seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="thread budget; 1 forces the fully deterministic serial mode",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distgate",
        description="distance-gated multi-branch detection-by-segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    _common_flags(p)
    p.add_argument("--cases", type=int, default=30)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", default=None, help="phantom config JSON file")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("edt", help="exact distance transform of a tumor mask")
    _common_flags(p)
    p.add_argument("--tumor", required=True, help="tumor mask volume prefix")
    p.add_argument("--out", required=True, help="distance map output prefix")
    p.set_defaults(func=cmd_edt)

    p = sub.add_parser("gate", help="gating weight volumes from a distance map")
    _common_flags(p)
    p.add_argument("--dist", required=True, help="distance map volume prefix")
    p.add_argument("--mode", choices=("binary", "soft"), required=True)
    p.add_argument("--d0-cm", type=float, default=7.0)
    p.add_argument("--dprox-cm", type=float, default=5.0)
    p.add_argument("--ddist-cm", type=float, default=9.0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("train", help="train one mode from a dataset manifest")
    _common_flags(p)
    p.add_argument("--config", required=True, help="training config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window prediction for one case")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--mode", choices=("single", "bg", "sg"), required=True)
    p.add_argument("--d0-cm", type=float, default=7.0)
    p.add_argument("--dprox-cm", type=float, default=5.0)
    p.add_argument("--ddist-cm", type=float, default=9.0)
    p.add_argument("--window", type=int, nargs=3, default=(96, 96, 64))
    p.add_argument("--stride", type=int, nargs=3, default=(64, 64, 32))
    p.add_argument("--out", required=True, help="fused probability volume prefix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="detection metrics from predictions + ground truth")
    _common_flags(p)
    p.add_argument("--pred-dir", required=True, help="directory of <case_id> volumes")
    p.add_argument("--gt-dir", required=True, help="dataset directory with case subdirs")
    p.add_argument("--extract-threshold", type=float, default=0.5)
    p.add_argument("--min-voxels", type=int, default=4)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="optional PR-curve CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("end-to-end", help="phantom-gen + train + infer + eval, all modes")
    _common_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="config JSON overriding the defaults")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="debug: replace model predictions with ground truth (all metrics 1.0)",
    )
    p.set_defaults(func=cmd_end_to_end)

    return parser


def cmd_phantom_gen(args) -> int:
    from . import phantom

    config = phantom.PhantomConfig()
    if args.config:
        with open(args.config) as fh:
            config = phantom.config_from_dict(json.load(fh))
    seed = DEFAULT_SEED if args.seed is None else args.seed
    manifest = phantom.generate_dataset(seed, args.cases, args.out, config=config)
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")
    return 0


def cmd_edt(args) -> int:
    from .edt import edt_exact
    from .volume import BinaryMask, load_volume, save_volume

    mask = load_volume(args.tumor)
    if not isinstance(mask, BinaryMask):
        raise ValueError(f"--tumor must be a u8 mask volume, got {type(mask).__name__}")
    dist = edt_exact(mask)
    save_volume(dist.as_scalar(), args.out)
    print(f"wrote distance map to {args.out}")
    return 0


def cmd_gate(args) -> int:
    from .edt import DistanceMap
    from .gating import binary_gate, soft_gate
    from .volume import ScalarVolume, load_volume, save_volume

    vol = load_volume(args.dist)
    if not isinstance(vol, ScalarVolume):
        raise ValueError("--dist must be an f32 distance-map volume")
    dist = DistanceMap(vol.grid, vol.data)
    if args.mode == "binary":
        weights = binary_gate(dist, args.d0_cm * 10.0)
    else:
        weights = soft_gate(dist, args.dprox_cm * 10.0, args.ddist_cm * 10.0)
    save_volume(weights.g_prox, f"{args.out_prefix}_prox")
    save_volume(weights.g_dist, f"{args.out_prefix}_dist")
    print(f"wrote {args.out_prefix}_prox / {args.out_prefix}_dist")
    return 0


def _load_train_config(path: str, seed_override: int | None):
    from . import train as train_mod

    with open(path) as fh:
        raw = json.load(fh)
    manifest_path = raw.pop("manifest", None)
    if manifest_path is None:
        raise ValueError("training config must name a dataset 'manifest'")
    cfg = train_mod.config_from_dict(raw)
    if seed_override is not None:
        cfg.seed = seed_override
    manifest_path = Path(manifest_path)
    if not manifest_path.is_absolute():
        manifest_path = Path(path).parent / manifest_path
    return cfg, manifest_path


def cmd_train(args) -> int:
    from . import pipeline, train as train_mod
    from .model import save_checkpoint

    cfg, manifest_path = _load_train_config(args.config, args.seed)
    manifest = pipeline.load_manifest(manifest_path)
    cases = pipeline.load_split(manifest, "train")
    pool = train_mod.build_crop_pool(cases, cfg)
    result = train_mod.train(pool, cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_mod.save_history_csv(result.history, out_dir / "train_log.csv")
    save_checkpoint(out_dir / "checkpoint", result.params, extra={"mode": cfg.mode})
    with open(out_dir / "config_resolved.json", "w") as fh:
        json.dump(
            {"manifest": str(manifest_path), **cfg.to_dict()},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    if not result.last_loss < float("inf"):
        raise FloatingPointError("training loss is not finite")
    print(
        f"trained mode={cfg.mode} steps={cfg.steps}: "
        f"loss {result.first_loss:.4f} -> {result.last_loss:.4f}"
    )
    return 0


def cmd_infer(args) -> int:
    from .gating import GatingConfig
    from .inference import sliding_window_predict
    from .model import load_checkpoint
    from .pipeline import load_case_dir
    from .volume import save_volume

    params, _ = load_checkpoint(args.checkpoint)
    case = load_case_dir(args.case)
    gating = GatingConfig(
        d0_mm=args.d0_cm * 10.0,
        d_prox_mm=args.dprox_cm * 10.0,
        d_dist_mm=args.ddist_cm * 10.0,
    )
    result = sliding_window_predict(
        params, case, window=tuple(args.window), stride=tuple(args.stride),
        mode=args.mode, gating=gating,
    )
    save_volume(result.fused, args.out)
    print(f"wrote fused probability volume to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import metrics
    from .instances import extract_instances, instances_to_json, match_hits
    from .volume import LabelVolume, ScalarVolume, load_volume

    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pred_files = sorted(pred_dir.glob("*.json"))
    if not pred_files:
        raise FileNotFoundError(f"no prediction volumes in {pred_dir}")
    records = []
    total_gt = 0
    n_cases = 0
    instance_rows = []
    for header in pred_files:
        case_id = header.stem
        prob = load_volume(header)
        if not isinstance(prob, ScalarVolume):
            raise ValueError(f"prediction {header} is not an f32 volume")
        gt = load_volume(gt_dir / case_id / "gtvln")
        if not isinstance(gt, LabelVolume):
            raise ValueError(f"{gt_dir / case_id} has no u32 gtvln volume")
        preds = extract_instances(
            prob, args.extract_threshold, min_voxels=args.min_voxels, case_id=case_id
        )
        match = match_hits(preds, gt)
        records.extend(metrics.records_from_matches(preds, match))
        instance_rows.extend(instances_to_json(preds, match))
        total_gt += gt.num_instances
        n_cases += 1
    report = metrics.build_report(records, total_gt, n_cases)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    metrics.save_report(report, out_path)
    with open(out_path.with_name(out_path.stem + "_instances.json"), "w") as fh:
        json.dump(instance_rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.csv:
        metrics.save_curve_csv(report.points, args.csv)
    print(
        f"evaluated {n_cases} cases, {total_gt} instances: "
        f"mRecall={report.m_recall:.4f} mFROC={report.m_froc:.4f}"
    )
    return 0


def _merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_config(out[key], value)
        else:
            out[key] = value
    return out


def resolve_end_to_end_config(config_path: str | None, seed: int | None) -> dict:
    config = copy.deepcopy(END_TO_END_DEFAULTS)
    config["seed"] = DEFAULT_SEED
    if config_path:
        with open(config_path) as fh:
            config = _merge_config(config, json.load(fh))
    if seed is not None:
        config["seed"] = seed
    return config


def run_end_to_end(out_dir: Path, config: dict, oracle: bool = False) -> dict:
    """Generate data, train every mode, evaluate on the test split."""
    from . import metrics, phantom, pipeline, train as train_mod
    from .gating import GatingConfig
    from .inference import sliding_window_predict
    from .instances import extract_instances, match_hits
    from .model import save_checkpoint
    from .volume import ScalarVolume

    seed = config["seed"]
    gating = GatingConfig(**config["gating"])
    modes = list(config["modes"])

    dataset_dir = out_dir / "dataset"
    phantom_cfg = phantom.config_from_dict(config["phantom"])
    manifest = phantom.generate_dataset(
        seed, config["phantom"]["n_cases"], dataset_dir, config=phantom_cfg
    )
    manifest["_root"] = str(dataset_dir)

    train_cases = pipeline.load_split(manifest, "train")
    test_cases = pipeline.load_split(manifest, "test")

    base_pool = None
    results = {}
    for mode in modes:
        cfg = train_mod.config_from_dict({**config["train"], "mode": mode, "seed": seed,
                                          "gating": config["gating"]})
        if base_pool is None:
            base_pool = train_mod.build_crop_pool(train_cases, cfg)
        pool = [pipeline.regate_crop(c, mode, gating) for c in base_pool]
        result = train_mod.train(pool, cfg)
        mode_dir = out_dir / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        train_mod.save_history_csv(result.history, mode_dir / "train_log.csv")
        save_checkpoint(mode_dir / "checkpoint", result.params, extra={"mode": mode})
        results[mode] = result

    eval_cfg = config["eval"]
    infer_cfg = config["infer"]
    records_by_mode = {mode: [] for mode in modes}
    total_gt = 0
    for case in test_cases:
        total_gt += case.gtvln.num_instances
        for mode in modes:
            if oracle:
                fused = ScalarVolume(case.grid, case.foreground().data.astype("float32"))
            else:
                fused = sliding_window_predict(
                    results[mode].params,
                    case,
                    window=tuple(infer_cfg["window"]),
                    stride=tuple(infer_cfg["stride"]),
                    mode=mode,
                    gating=gating,
                ).fused
            preds = extract_instances(
                fused,
                eval_cfg["extract_threshold"],
                min_voxels=eval_cfg["min_voxels"],
                case_id=case.case_id,
            )
            match = match_hits(preds, case.gtvln)
            records_by_mode[mode].extend(metrics.records_from_matches(preds, match))

    report: dict = {"seed": seed, "config": _report_config(config), "modes": {}}
    for mode in modes:
        mode_report = metrics.build_report(records_by_mode[mode], total_gt, len(test_cases))
        first, last = results[mode].first_loss, results[mode].last_loss
        report["modes"][mode] = {
            "mRecall": mode_report.m_recall,
            "Recall_max": mode_report.recall_max,
            "mFROC": mode_report.m_froc,
            "FROC@4": mode_report.froc_at[4.0],
            "FROC@6": mode_report.froc_at[6.0],
            "loss_first": first,
            "loss_last": last,
            "loss_ratio": last / first,
        }
        metrics.save_report(mode_report, out_dir / f"eval_{mode}.json")
    return report


def _report_config(config: dict) -> dict:
    config = copy.deepcopy(config)
    config.pop("seed", None)
    return config


def save_end_to_end_report(report: dict, out_dir: Path) -> None:
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["mode," + ",".join(REPORT_METRIC_COLUMNS)]
    for mode, row in report["modes"].items():
        lines.append(mode + "," + ",".join(repr(row[c]) for c in REPORT_METRIC_COLUMNS))
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n")


def cmd_end_to_end(args) -> int:
    config = resolve_end_to_end_config(args.config, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_end_to_end(out_dir, config, oracle=args.oracle)
    save_end_to_end_report(report, out_dir)
    for mode, row in report["modes"].items():
        print(
            f"{mode}: mRecall={row['mRecall']:.4f} Recall_max={row['Recall_max']:.4f} "
            f"mFROC={row['mFROC']:.4f} loss_ratio={row['loss_ratio']:.3f}"
        )
    print(f"report written to {out_dir / 'report.json'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_limit(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())

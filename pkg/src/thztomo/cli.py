"""Command-line pipeline driver.

thz-tomo <gen-data|train|restore|reconstruct|evaluate> --config <path>
         [--seed N] [--out DIR] [--preset desk|full]

Each subcommand merges its built-in defaults with the JSON config file
and the command-line overrides, validates the result against a schema
(unknown keys are rejected, messages name the offending key path),
writes the fully resolved config to <out>/config.json, and only then
executes. Setting THZ_TOMO_DETERMINISTIC=1 in the environment forces
64-bit deterministic numerics.

Exit codes: 0 success, 2 invalid configuration, 3 missing prerequisite
(file or directory), 4 inconsistent data.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataMismatchError, MissingInputError, ShapeError
from .metrics import (
    chamfer,
    cross_section_mse,
    default_tau,
    fscore,
    iou,
    psnr,
    volume_to_pointcloud,
)
from .phantom import (
    AngleCfg,
    CorruptCfg,
    RenderCfg,
    build_dataset,
    load_manifest,
    load_phantom_grid,
)
from .sarnet import NetworkCfg
from .tomo import Volume, load_volume, reconstruct_volume, save_volume
from .train import TrainCfg, ViewStore, load_trained, restore_view, train_stage

_DEFAULT_OBJECTS = [
    {"id": "ball_and_rod",
     "shape": {"op": "union", "shapes": [
         {"primitive": "sphere", "center": [0.0, 4.0, 0.0], "radius": 8.0},
         {"primitive": "cylinder", "center": [0.0, -6.0, 0.0], "radius": 3.0,
          "height": 16.0, "axis": 1},
     ]}},
    {"id": "hollow_box",
     "shape": {"op": "difference", "shapes": [
         {"primitive": "box", "center": [0.0, 0.0, 0.0],
          "size": [20.0, 20.0, 20.0]},
         {"primitive": "box", "center": [0.0, 0.0, 0.0],
          "size": [12.0, 24.0, 12.0]},
     ]}},
]

# schema leaves: (kind, ...) where kind in int/float/bool/str/enum/
# open (free-form subtree) / opt (nullable inner) / dict (nested schema)
_GEN_SCHEMA = {
    "out": ("str",),
    "seed": ("int",),
    "objects": ("open",),
    "angles": ("dict", {"count": ("int",), "span_deg": ("float",)}),
    "render": ("dict", {"grid_size": ("int",), "voxel_mm": ("float",)}),
    "corrupt": ("dict", {"beam_min_mm": ("float",), "k_blur": ("float",),
                         "snr_db": ("opt", ("float",))}),
}

_NETWORK_SCHEMA = {
    "channels": ("open",),
    "subspace_rank": ("int",),
    "safm_channels": ("int",),
    "max_tokens": ("int",),
    "cam_reduction": ("int",),
    "band_to_scale": ("open",),
    "n_bands": ("int",),
}

_TRAIN_SECTION_SCHEMA = {
    "lr0": ("float",),
    "betas": ("open",),
    "eps": ("float",),
    "decay_every": ("int",),
    "decay_factor": ("float",),
    "epochs": ("int",),
    "batch_size": ("int",),
    "crop": ("opt", ("int",)),
    "stage": ("int",),
    "stage2_lr_mult": ("float",),
    "views_per_epoch": ("opt", ("int",)),
    "val_views": ("opt", ("int",)),
    "zero_bands": ("bool",),
    "deterministic": ("bool",),
}

_TRAIN_SCHEMA = {
    "out": ("str",),
    "dataset": ("str",),
    "seed": ("int",),
    "preset": ("enum", ("desk", "full")),
    "network": ("dict", _NETWORK_SCHEMA),
    "train": ("dict", _TRAIN_SECTION_SCHEMA),
    "holdout": ("opt", ("str",)),
    "stage1_ckpt": ("opt", ("str",)),
    "resume": ("bool",),
}

_RESTORE_SCHEMA = {
    "out": ("str",),
    "dataset": ("str",),
    "checkpoint": ("str",),
    "seed": ("int",),
    "zero_bands": ("bool",),
    "objects": ("opt", ("open",)),
}

_RECONSTRUCT_SCHEMA = {
    "out": ("str",),
    "dataset": ("str",),
    "views": ("str",),
    "source": ("enum", ("restored", "gt")),
    "method": ("enum", ("fbp", "sart")),
    "filter": ("enum", ("ramp", "ramp-rolloff", "shepp-logan")),
    "sart_iters": ("int",),
    "sart_relax": ("float",),
    "objects": ("opt", ("open",)),
    "previews": ("bool",),
    "seed": ("int",),
}

_EVALUATE_SCHEMA = {
    "out": ("str",),
    "dataset": ("str",),
    "volumes": ("str",),
    "restored": ("str",),
    "threshold": ("float",),
    "tau_fraction": ("float",),
    "plots": ("bool",),
    "seed": ("int",),
}

_DEFAULTS = {
    "gen-data": {
        "out": "runs/dataset", "seed": 0, "objects": _DEFAULT_OBJECTS,
        "angles": {"count": 60, "span_deg": 180.0},
        "render": {"grid_size": 144, "voxel_mm": 0.25},
        "corrupt": {"beam_min_mm": 1.25, "k_blur": 1.0, "snr_db": 30.0},
    },
    "train": {
        "out": "runs/train", "dataset": "runs/dataset", "seed": 0,
        "preset": "desk", "network": {},
        "train": {k: v for k, v in TrainCfg().to_dict().items()
                  if k not in ("seed",)},
        "holdout": None, "stage1_ckpt": None, "resume": False,
    },
    "restore": {
        "out": "runs/restore", "dataset": "runs/dataset",
        "checkpoint": "runs/train/ckpt_best.bin", "seed": 0,
        "zero_bands": False, "objects": None,
    },
    "reconstruct": {
        "out": "runs/volumes", "dataset": "runs/dataset",
        "views": "runs/restore", "source": "restored", "method": "fbp",
        "filter": "ramp-rolloff", "sart_iters": 20, "sart_relax": 0.25,
        "objects": None, "previews": True, "seed": 0,
    },
    "evaluate": {
        "out": "runs/report", "dataset": "runs/dataset",
        "volumes": "runs/volumes", "restored": "runs/restore",
        "threshold": 0.5, "tau_fraction": 0.01, "plots": False, "seed": 0,
    },
}

_SCHEMAS = {
    "gen-data": _GEN_SCHEMA,
    "train": _TRAIN_SCHEMA,
    "restore": _RESTORE_SCHEMA,
    "reconstruct": _RECONSTRUCT_SCHEMA,
    "evaluate": _EVALUATE_SCHEMA,
}


def _check_leaf(value, spec, path: str):
    kind = spec[0]
    if kind == "opt":
        if value is None:
            return
        _check_leaf(value, spec[1], path)
        return
    if kind == "open":
        return
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
    elif kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif kind == "enum":
        if value not in spec[1]:
            raise ConfigError(
                f"{path}: expected one of {list(spec[1])}, got {value!r}")
    else:  # pragma: no cover - schema author error
        raise AssertionError(f"bad schema kind {kind}")


def validate_config(cfg: dict, schema: dict, path: str = "") -> None:
    """Reject unknown keys and wrong leaf types, naming the key path."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for key in cfg:
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where}")
        spec = schema[key]
        if spec[0] == "dict":
            validate_config(cfg[key], spec[1], where)
        else:
            _check_leaf(cfg[key], spec, where)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(command: str, file_cfg: dict, seed=None, out=None,
                   preset=None) -> dict:
    """Defaults <- config file <- command-line flags; then validate."""
    schema = _SCHEMAS[command]
    validate_config(file_cfg, schema)
    cfg = _merge(_DEFAULTS[command], file_cfg)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if preset is not None:
        if "preset" not in schema:
            raise ConfigError(f"--preset does not apply to {command}")
        cfg["preset"] = preset
    validate_config(cfg, schema)
    return cfg


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise MissingInputError(f"config file {path} not found")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _echo_config(cfg: dict) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_f32(path, arr) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def cmd_gen_data(cfg: dict) -> int:
    _echo_config(cfg)
    manifest = build_dataset(
        cfg["objects"], cfg["out"], seed=cfg["seed"],
        angles=AngleCfg(count=cfg["angles"]["count"],
                        span_deg=cfg["angles"]["span_deg"]),
        render=RenderCfg(grid_size=cfg["render"]["grid_size"],
                         voxel_mm=cfg["render"]["voxel_mm"]),
        corrupt=CorruptCfg(beam_min_mm=cfg["corrupt"]["beam_min_mm"],
                           k_blur=cfg["corrupt"]["k_blur"],
                           snr_db=cfg["corrupt"]["snr_db"]))
    n_views = sum(o["n_views"] for o in manifest.objects)
    print(f"wrote {len(manifest.objects)} objects, {n_views} views to "
          f"{cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    _echo_config(cfg)
    net_cfg = NetworkCfg.from_dict(
        _merge(NetworkCfg.preset(cfg["preset"]).to_dict(), cfg["network"]))
    train_cfg = TrainCfg.from_dict(dict(cfg["train"], seed=cfg["seed"]))
    if train_cfg.stage == 2:
        if not cfg["stage1_ckpt"]:
            raise ConfigError("train.stage 2 requires stage1_ckpt")
        if not os.path.exists(cfg["stage1_ckpt"]):
            raise MissingInputError(
                f"stage-1 checkpoint {cfg['stage1_ckpt']} not found")
    if not os.path.exists(os.path.join(cfg["dataset"], "manifest.json")):
        raise MissingInputError(f"no dataset at {cfg['dataset']}")
    summary = train_stage(cfg["dataset"], cfg["out"], net_cfg, train_cfg,
                          holdout=cfg["holdout"],
                          stage1_ckpt=cfg["stage1_ckpt"],
                          resume=cfg["resume"])
    print(f"stage {summary['stage']}: best val PSNR "
          f"{summary['best_psnr']:.3f} dB at epoch {summary['best_epoch']}; "
          f"checkpoints in {cfg['out']}")
    return 0


def _object_subset(manifest, wanted):
    ids = manifest.object_ids()
    if wanted is None:
        return ids
    missing = [o for o in wanted if o not in ids]
    if missing:
        raise ConfigError(f"objects not in dataset: {missing}")
    return list(wanted)


def cmd_restore(cfg: dict) -> int:
    _echo_config(cfg)
    model, _, extra = load_trained(cfg["checkpoint"])
    manifest = load_manifest(cfg["dataset"])
    object_ids = _object_subset(manifest, cfg["objects"])
    store = ViewStore(cfg["dataset"], object_ids)
    count = 0
    for oid in object_ids:
        for k in range(store.n_views(oid)):
            rec, meta = store.get(oid, k)
            restored = restore_view(model, store, oid, k,
                                    zero_bands=cfg["zero_bands"])
            vdir = os.path.join(cfg["out"], oid, f"view_{k}")
            os.makedirs(vdir, exist_ok=True)
            _write_f32(os.path.join(vdir, "restored.f32"),
                       restored * meta["gt_max_mm"])
            with open(os.path.join(vdir, "meta.json"), "w",
                      encoding="utf-8") as fh:
                json.dump({"theta_deg": meta["theta_deg"],
                           "height": meta["height"], "width": meta["width"],
                           "gt_max_mm": meta["gt_max_mm"], "object_id": oid,
                           "view_index": k}, fh, indent=2, sort_keys=True)
                fh.write("\n")
            count += 1
    with open(os.path.join(cfg["out"], "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"dataset": cfg["dataset"], "checkpoint": cfg["checkpoint"],
                   "stage": extra.get("stage", 1),
                   "objects": {oid: store.n_views(oid) for oid in object_ids}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"restored {count} views to {cfg['out']}")
    return 0


def _load_view_stack(cfg, manifest, oid):
    """(A, H, W) stack for one object from restored or gt images."""
    angles = np.asarray(manifest.angles_deg, dtype=np.float64)
    n_views = next(o["n_views"] for o in manifest.objects if o["id"] == oid)
    if n_views != angles.size:
        raise DataMismatchError(
            f"{oid}: manifest lists {angles.size} angles but {n_views} views")
    grid = next(o["grid"] for o in manifest.objects if o["id"] == oid)
    h, w = grid[1], grid[2]
    stack = np.empty((angles.size, h, w), dtype=np.float64)
    for k in range(angles.size):
        if cfg["source"] == "gt":
            vdir = os.path.join(cfg["dataset"], oid, f"view_{k}")
            img_path = os.path.join(vdir, "gt.f32")
        else:
            vdir = os.path.join(cfg["views"], oid, f"view_{k}")
            img_path = os.path.join(vdir, "restored.f32")
        meta_path = os.path.join(vdir, "meta.json")
        if not os.path.exists(vdir) or not os.path.exists(img_path):
            raise DataMismatchError(
                f"{oid}: expected {angles.size} views, none at {vdir}")
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if abs(meta["theta_deg"] - angles[k]) > 1e-6:
            raise DataMismatchError(
                f"{oid} view {k}: angle {meta['theta_deg']} does not match "
                f"manifest angle {angles[k]}")
        raw = np.fromfile(img_path, dtype="<f4")
        if raw.size != h * w:
            raise DataMismatchError(f"{img_path}: expected {h * w} values, "
                                    f"got {raw.size}")
        stack[k] = raw.reshape(h, w)
    extra = os.path.join(
        cfg["dataset"] if cfg["source"] == "gt" else cfg["views"],
        oid, f"view_{angles.size}")
    if os.path.isdir(extra):
        raise DataMismatchError(
            f"{oid}: more view directories than manifest angles")
    return stack, angles


def cmd_reconstruct(cfg: dict) -> int:
    _echo_config(cfg)
    manifest = load_manifest(cfg["dataset"])
    object_ids = _object_subset(manifest, cfg["objects"])
    voxel = manifest.geometry["voxel_mm"]
    for oid in object_ids:
        stack, angles = _load_view_stack(cfg, manifest, oid)
        residuals = {}
        callback = None
        if cfg["method"] == "sart":
            def callback(height, sweep, resid, acc=residuals):
                acc.setdefault(sweep, []).append(resid)
        volume = reconstruct_volume(stack, angles, voxel_size=voxel,
                                    method=cfg["method"],
                                    filter=cfg["filter"],
                                    sart_iters=cfg["sart_iters"],
                                    sart_relax=cfg["sart_relax"],
                                    sart_callback=callback)
        obj_dir = os.path.join(cfg["out"], oid)
        save_volume(volume, obj_dir, previews=cfg["previews"])
        if cfg["method"] == "sart":
            with open(os.path.join(obj_dir, "sart_residuals.ndjson"), "w",
                      encoding="utf-8") as fh:
                for sweep in sorted(residuals):
                    fh.write(json.dumps(
                        {"sweep": sweep,
                         "residual_mean": float(np.mean(residuals[sweep]))})
                        + "\n")
        print(f"{oid}: volume {volume.data.shape} -> {obj_dir}")
    return 0


def _psnr_mean(cfg, manifest, oid) -> float:
    angles = manifest.angles_deg
    gt_max = next(o["gt_max_mm"] for o in manifest.objects if o["id"] == oid)
    scale = gt_max if gt_max > 0 else 1.0
    values = []
    for k in range(len(angles)):
        gt_path = os.path.join(cfg["dataset"], oid, f"view_{k}", "gt.f32")
        rst_path = os.path.join(cfg["restored"], oid, f"view_{k}",
                                "restored.f32")
        if not os.path.exists(gt_path):
            raise MissingInputError(f"missing ground truth {gt_path}")
        if not os.path.exists(rst_path):
            raise MissingInputError(f"missing restored view {rst_path}")
        gt = np.fromfile(gt_path, dtype="<f4").astype(np.float64) / scale
        rst = np.fromfile(rst_path, dtype="<f4").astype(np.float64) / scale
        if gt.size != rst.size:
            raise DataMismatchError(
                f"{oid} view {k}: restored size {rst.size} != gt {gt.size}")
        values.append(psnr(gt, rst))
    return float(np.mean(values))


def cmd_evaluate(cfg: dict) -> int:
    _echo_config(cfg)
    manifest = load_manifest(cfg["dataset"])
    voxel = manifest.geometry["voxel_mm"]
    report = {}
    for oid in manifest.object_ids():
        gt_grid = load_phantom_grid(cfg["dataset"], oid, manifest)
        vol_dir = os.path.join(cfg["volumes"], oid)
        if not os.path.isdir(vol_dir):
            raise MissingInputError(f"no reconstructed volume at {vol_dir}")
        volume = load_volume(vol_dir)
        if volume.data.shape != gt_grid.shape:
            raise DataMismatchError(
                f"{oid}: volume shape {volume.data.shape} does not match "
                f"phantom {gt_grid.shape}")
        gt_cloud = volume_to_pointcloud(gt_grid, cfg["threshold"], voxel)
        rec_cloud = volume_to_pointcloud(volume.data, cfg["threshold"], voxel)
        if gt_cloud.points.shape[0] and rec_cloud.points.shape[0]:
            tau = default_tau(gt_cloud, cfg["tau_fraction"])
            f_val = fscore(rec_cloud, gt_cloud, tau)
            ch_val = chamfer(rec_cloud, gt_cloud)
        elif not gt_cloud.points.shape[0] and not rec_cloud.points.shape[0]:
            f_val, ch_val = 1.0, 0.0
        else:
            # one surface is empty: no pair distances exist
            f_val, ch_val = 0.0, float("inf")
        report[oid] = {
            "psnr_mean": _psnr_mean(cfg, manifest, oid),
            "mse3d": cross_section_mse(volume.data, gt_grid),
            "iou": iou(volume.data, gt_grid, cfg["threshold"]),
            "fscore": f_val,
            "chamfer": ch_val,
        }
    with open(os.path.join(cfg["out"], "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    fields = ["object_id", "psnr_mean", "mse3d", "iou", "fscore", "chamfer"]
    with open(os.path.join(cfg["out"], "report.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for oid in sorted(report):
            writer.writerow([oid] + [report[oid][f] for f in fields[1:]])
    if cfg["plots"]:
        _write_plots(report, cfg["out"])
    for oid in sorted(report):
        row = report[oid]
        print(f"{oid}: psnr {row['psnr_mean']:.2f} dB, iou {row['iou']:.3f}, "
              f"fscore {row['fscore']:.3f}")
    print(f"report in {cfg['out']}")
    return 0


def _write_plots(report: dict, out_dir) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    oids = sorted(report)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(oids, [report[o]["psnr_mean"] for o in oids])
    axes[0].set_ylabel("restored view PSNR (dB)")
    axes[1].bar(oids, [report[o]["iou"] for o in oids], color="#888")
    axes[1].set_ylabel("volume IoU")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "metrics.png"), dpi=120)
    plt.close(fig)


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "restore": cmd_restore,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thz-tomo",
        description="Synthesize, restore, and reconstruct tomographic "
                    "measurement volumes.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "synthesize a corrupted multi-view dataset",
        "train": "train the restoration network (stage 1 or 2)",
        "restore": "run a trained network over a dataset's views",
        "reconstruct": "invert restored views into volumes",
        "evaluate": "score volumes and restored views against ground truth",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the run directory")
        p.add_argument("--preset", choices=("desk", "full"), default=None,
                       help="network size preset (train only)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = _read_config_file(args.config)
        cfg = resolve_config(args.command, file_cfg, seed=args.seed,
                             out=args.out, preset=args.preset)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except (DataMismatchError, ShapeError) as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Training loops for the restoration network.

Stage 1 trains the single-view network on corrupted views of every
object except an optional held-out one; stage 2 starts from a stage-1
checkpoint and fine-tunes the same weights plus the multi-view fusion
block at a reduced learning rate.

Runs are resumable and, in deterministic mode (64-bit, forced by the
THZ_TOMO_DETERMINISTIC=1 environment variable), byte-identical: every
random draw comes from a generator keyed by (seed, stream, epoch, item),
so no state needs to survive an interruption beyond the last checkpoint.
Each epoch appends one JSON line {epoch, lr, train_loss, val_psnr} to
log.ndjson in the run directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataMismatchError, ShapeError
from .metrics import psnr
from .phantom import apply_transform, load_manifest, load_view, sample_transform
from .sarnet import (
    NetworkCfg,
    SARNet,
    SARNetMV,
    load_checkpoint,
    load_model_state,
    model_state,
    save_checkpoint,
)

BEST_NAME = "ckpt_best.bin"
LAST_NAME = "ckpt_last.bin"
LOG_NAME = "log.ndjson"

# rng stream ids; every draw is keyed by (seed, stream, ...) so streams
# never collide and resume needs no carried state
_STREAM_SHUFFLE = 0
_STREAM_AUG = 1
_STREAM_VAL = 2
_STREAM_FIT = 3

_TINY = 1e-12


def deterministic_mode() -> bool:
    """True when the environment forces 64-bit deterministic runs."""
    return os.environ.get("THZ_TOMO_DETERMINISTIC", "") == "1"


def _rng(seed: int, stream: int, *extras: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(stream), *map(int, extras)]))


def mse_loss(x_gt, x_rec):
    """Mean squared error over all elements; shapes must match."""
    if tuple(x_gt.shape) != tuple(x_rec.shape):
        raise ShapeError(
            f"shape mismatch {tuple(x_gt.shape)} vs {tuple(x_rec.shape)}")
    diff = x_gt - x_rec
    return (diff * diff).mean()


def lr_at(epoch: int, lr0: float = 1e-4, decay_every: int = 300,
          decay_factor: float = 0.1) -> float:
    """Step schedule: lr0 scaled by decay_factor every decay_every epochs."""
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    if decay_every < 1:
        raise ConfigError("decay_every must be >= 1")
    return lr0 * decay_factor ** (epoch // decay_every)


def init_weights(model: nn.Module, seed: int = 0) -> None:
    """He-normal conv weights, unit batch-norm scale, zero shifts/biases.

    Draws come from a dedicated generator in a fixed module order, so the
    same seed always produces the same parameters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                draw = torch.randn(module.weight.shape, generator=gen,
                                   dtype=torch.float64) * std
                module.weight.copy_(draw.to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_running_stats()
                module.weight.fill_(1.0)
                module.bias.zero_()


def leave_one_out(object_ids):
    """Splits (holdout, train_ids) covering each object exactly once."""
    ids = list(object_ids)
    if len(ids) < 2:
        raise ConfigError("leave-one-out needs at least two objects")
    return [(oid, [o for o in ids if o != oid]) for oid in ids]


@dataclass(frozen=True)
class TrainCfg:
    """Optimization settings; epochs and stage come from the caller's run."""

    lr0: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_every: int = 300
    decay_factor: float = 0.1
    epochs: int = 1000
    batch_size: int = 4
    crop: int | None = 128
    seed: int = 0
    stage: int = 1
    stage2_lr_mult: float = 0.1
    views_per_epoch: int | None = None
    val_views: int | None = None
    zero_bands: bool = False
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr0 <= 0 or self.eps <= 0:
            raise ConfigError("lr0 and eps must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_every >= 1 and 0 < decay_factor <= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.crop is not None and (self.crop < 16 or self.crop % 16):
            raise ConfigError("crop must be a positive multiple of 16")
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.stage2_lr_mult <= 0:
            raise ConfigError("stage2_lr_mult must be positive")
        for name in ("views_per_epoch", "val_views"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0, "betas": list(self.betas), "eps": self.eps,
            "decay_every": self.decay_every, "decay_factor": self.decay_factor,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "crop": self.crop, "seed": self.seed, "stage": self.stage,
            "stage2_lr_mult": self.stage2_lr_mult,
            "views_per_epoch": self.views_per_epoch,
            "val_views": self.val_views, "zero_bands": self.zero_bands,
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainCfg":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        kwargs = dict(raw)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        return cls(**kwargs)


class ViewStore:
    """All views of the chosen objects, held in memory with their metadata."""

    def __init__(self, root, object_ids=None, variant: str = "corrupt"):
        self.root = root
        self.manifest = load_manifest(root)
        known = self.manifest.object_ids()
        if object_ids is None:
            object_ids = known
        missing = [o for o in object_ids if o not in known]
        if missing:
            raise ConfigError(f"objects not in dataset: {missing}")
        self.object_ids = list(object_ids)
        self._n_views = {o["id"]: o["n_views"] for o in self.manifest.objects}
        self._views = {}
        for oid in self.object_ids:
            for k in range(self._n_views[oid]):
                self._views[(oid, k)] = load_view(root, oid, k, variant=variant)

    def n_views(self, object_id: str) -> int:
        return self._n_views[object_id]

    def get(self, object_id: str, view_index: int):
        return self._views[(object_id, view_index)]

    def items(self, object_ids) -> list:
        return [(oid, k) for oid in object_ids
                for k in range(self._n_views[oid])]


def normalized_arrays(record, meta, zero_bands: bool = False) -> dict:
    """Channel-first float64 arrays scaled to the network's input ranges.

    Time-max is divided by the air reference, each band amplitude by the
    air amplitude of that band, phase by pi, and the target thickness by
    the object's maximum thickness.
    """
    air_tm = max(float(meta["air_timemax"]), _TINY)
    air_amp = np.maximum(np.asarray(meta["air_amp"], dtype=np.float64), _TINY)
    gt_max = max(float(meta["gt_max_mm"]), _TINY)
    tm = record.timemax[None, :, :] / air_tm
    gt = record.gt_thickness[None, :, :] / gt_max
    if zero_bands:
        nb = record.cube.amplitude.shape[2]
        amp = np.zeros((nb,) + record.shape, dtype=np.float64)
        phase = np.zeros_like(amp)
    else:
        amp = np.moveaxis(record.cube.amplitude, 2, 0) / air_amp[:, None, None]
        phase = np.moveaxis(record.cube.phase, 2, 0) / np.pi
    return {"timemax": tm, "amp": amp, "phase": phase, "gt": gt,
            "gt_max": gt_max}


def _clamped_triple(k: int, n: int):
    return max(k - 1, 0), k, min(k + 1, n - 1)


def _stack(arrays, key, dtype):
    return torch.from_numpy(np.stack([a[key] for a in arrays])).to(dtype)


def _batch_stage1(examples, dtype):
    return (_stack(examples, "timemax", dtype), _stack(examples, "amp", dtype),
            _stack(examples, "phase", dtype), _stack(examples, "gt", dtype))


def restore_view(model, store: ViewStore, object_id: str, view_index: int,
                 zero_bands: bool = False) -> np.ndarray:
    """Run the network on one stored view; normalized output in [0, 1]."""
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        if isinstance(model, SARNetMV):
            n = store.n_views(object_id)
            triple = _clamped_triple(view_index, n)
            views = []
            for idx in triple:
                rec, meta = store.get(object_id, idx)
                ex = normalized_arrays(rec, meta, zero_bands)
                views.append(tuple(
                    torch.from_numpy(ex[key][None]).to(dtype)
                    for key in ("timemax", "amp", "phase")))
            out = model(views, 1)
        else:
            rec, meta = store.get(object_id, view_index)
            ex = normalized_arrays(rec, meta, zero_bands)
            out, _ = model(torch.from_numpy(ex["timemax"][None]).to(dtype),
                           torch.from_numpy(ex["amp"][None]).to(dtype),
                           torch.from_numpy(ex["phase"][None]).to(dtype))
    return np.clip(out[0, 0].double().numpy(), 0.0, 1.0)


def mean_psnr(model, store: ViewStore, items, zero_bands: bool = False) -> float:
    """Mean PSNR of restored views against their normalized ground truth."""
    values = []
    for oid, k in items:
        rec, meta = store.get(oid, k)
        gt = normalized_arrays(rec, meta)["gt"][0]
        restored = restore_view(model, store, oid, k, zero_bands)
        values.append(psnr(gt, restored))
    return float(np.mean(values))


def _build_model(net_cfg: NetworkCfg, stage: int, seed: int, dtype):
    model = SARNetMV(net_cfg) if stage == 2 else SARNet(net_cfg)
    init_weights(model, seed)
    return model.to(dtype)


def _model_tensors(tensors: dict) -> dict:
    return {k: v for k, v in tensors.items() if not k.startswith("adam.")}


def _fit_passthrough_range(sarnet, store, items, seed: int, dtype,
                           sample: int = 12):
    """Least-squares map from restored images back to raw input range.

    Restored thickness maps and the raw images the core was trained on
    occupy different value ranges, so the pass-through fusion needs an
    affine bridge. Fitting raw ~ scale * restored + offset on a few
    training views calibrates it for whatever corruption the dataset
    carries.
    """
    pick = _rng(seed, _STREAM_FIT).choice(
        len(items), size=min(sample, len(items)), replace=False)
    xs, ys = [], []
    sarnet.eval()
    with torch.no_grad():
        for i in sorted(pick):
            oid, k = items[i]
            rec, meta = store.get(oid, k)
            ex = normalized_arrays(rec, meta)
            tm = torch.as_tensor(ex["timemax"], dtype=dtype)[None]
            amp = torch.as_tensor(ex["amp"], dtype=dtype)[None]
            phase = torch.as_tensor(ex["phase"], dtype=dtype)[None]
            restored, _ = sarnet(tm, amp, phase)
            xs.append(restored.double().numpy().ravel())
            ys.append(ex["timemax"].ravel())
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.float64)
    design = np.stack([x, np.ones_like(x)], axis=1)
    (scale, offset), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(scale), float(offset)


def _save_last(path, model, optimizer, net_cfg, train_cfg, next_epoch,
               best_psnr, best_epoch, holdout) -> None:
    tensors = dict(model_state(model))
    for i, p in enumerate([p for p in model.parameters()]):
        state = optimizer.state.get(p)
        if state:
            tensors[f"adam.{i}.step"] = state["step"]
            tensors[f"adam.{i}.exp_avg"] = state["exp_avg"]
            tensors[f"adam.{i}.exp_avg_sq"] = state["exp_avg_sq"]
    save_checkpoint(path, tensors,
                    config={"network": net_cfg.to_dict(),
                            "train": train_cfg.to_dict()},
                    extra={"kind": "last", "stage": train_cfg.stage,
                           "next_epoch": next_epoch, "best_psnr": best_psnr,
                           "best_epoch": best_epoch, "holdout": holdout})


def _load_last(path, model, optimizer):
    tensors, _, extra = load_checkpoint(path)
    load_model_state(model, _model_tensors(tensors))
    params = [p for p in model.parameters()]
    for i, p in enumerate(params):
        key = f"adam.{i}.step"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(np.asarray(tensors[key])).reshape(()).float(),
            "exp_avg": torch.from_numpy(tensors[f"adam.{i}.exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"adam.{i}.exp_avg_sq"]).to(p.dtype),
        }
    return extra


def load_trained(path, deterministic: bool | None = None):
    """Rebuild a trained model from a checkpoint: (model, net_cfg, extra)."""
    tensors, config, extra = load_checkpoint(path)
    if "network" not in config:
        raise DataMismatchError(f"{path}: checkpoint carries no network config")
    net_cfg = NetworkCfg.from_dict(config["network"])
    stage = int(extra.get("stage", 1))
    if deterministic is None:
        deterministic = deterministic_mode()
    dtype = torch.float64 if deterministic else torch.float32
    model = (SARNetMV(net_cfg) if stage == 2 else SARNet(net_cfg)).to(dtype)
    load_model_state(model, _model_tensors(tensors))
    model.eval()
    return model, net_cfg, extra


def train_stage(dataset_root, out_dir, net_cfg: NetworkCfg,
                train_cfg: TrainCfg, holdout: str | None = None,
                stage1_ckpt=None, resume: bool = False) -> dict:
    """Run one training stage; returns a summary of the run.

    Writes ckpt_best.bin (weights at the best validation PSNR),
    ckpt_last.bin (weights plus optimizer state, for resuming), and
    log.ndjson to out_dir. With resume=True an existing ckpt_last.bin
    continues the run and reproduces the uninterrupted log.
    """
    cfg = train_cfg
    det = cfg.deterministic or deterministic_mode()
    torch.use_deterministic_algorithms(bool(det))
    dtype = torch.float64 if det else torch.float32

    manifest = load_manifest(dataset_root)
    all_ids = manifest.object_ids()
    if holdout is not None and holdout not in all_ids:
        raise ConfigError(f"holdout object {holdout!r} not in dataset")
    train_ids = [o for o in all_ids if o != holdout]
    if not train_ids:
        raise ConfigError("no training objects left after holdout")
    val_ids = [holdout] if holdout is not None else train_ids

    if cfg.stage == 2 and stage1_ckpt is None:
        raise ConfigError("stage 2 training requires a stage-1 checkpoint")

    os.makedirs(out_dir, exist_ok=True)
    store = ViewStore(dataset_root, sorted(set(train_ids + val_ids),
                                           key=all_ids.index))
    items = store.items(train_ids)
    val_items = store.items(val_ids)
    if cfg.val_views is not None and cfg.val_views < len(val_items):
        pick = _rng(cfg.seed, _STREAM_VAL).choice(
            len(val_items), size=cfg.val_views, replace=False)
        val_items = [val_items[i] for i in sorted(pick)]

    model = _build_model(net_cfg, cfg.stage, cfg.seed, dtype)
    if cfg.stage == 2:
        tensors, config, _ = load_checkpoint(stage1_ckpt)
        if config.get("network") != net_cfg.to_dict():
            raise DataMismatchError(
                "stage-1 checkpoint was trained with a different architecture")
        load_model_state(model.sarnet, _model_tensors(tensors))
        # must follow the core load: the pass-through composes the
        # loaded head and input-conv weights
        scale, offset = _fit_passthrough_range(model.sarnet, store, items,
                                               cfg.seed, dtype)
        model.init_fusion_passthrough(scale=scale, offset=offset)
    lr_mult = cfg.stage2_lr_mult if cfg.stage == 2 else 1.0

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0 * lr_mult,
                                 betas=cfg.betas, eps=cfg.eps)

    log_path = os.path.join(out_dir, LOG_NAME)
    best_path = os.path.join(out_dir, BEST_NAME)
    last_path = os.path.join(out_dir, LAST_NAME)

    start_epoch = 0
    best_psnr = -np.inf
    best_epoch = -1
    if resume and os.path.exists(last_path):
        extra = _load_last(last_path, model, optimizer)
        start_epoch = int(extra["next_epoch"])
        best_psnr = float(extra["best_psnr"])
        best_epoch = int(extra["best_epoch"])
        lines = []
        if os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.writelines(lines[:start_epoch])
    else:
        with open(log_path, "w", encoding="utf-8"):
            pass

    n_epoch_items = len(items)
    if cfg.views_per_epoch is not None:
        n_epoch_items = min(cfg.views_per_epoch, len(items))

    log = open(log_path, "a", encoding="utf-8")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg.lr0, cfg.decay_every, cfg.decay_factor) * lr_mult
            for group in optimizer.param_groups:
                group["lr"] = lr

            order = _rng(cfg.seed, _STREAM_SHUFFLE, epoch).permutation(len(items))
            epoch_items = [items[i] for i in order[:n_epoch_items]]

            model.train()
            total_loss = 0.0
            for lo in range(0, len(epoch_items), cfg.batch_size):
                batch = epoch_items[lo:lo + cfg.batch_size]
                examples = []
                for oid, k in batch:
                    rec, meta = store.get(oid, k)
                    rng = _rng(cfg.seed, _STREAM_AUG, epoch,
                               items.index((oid, k)))
                    tf = sample_transform(rec.shape, cfg.crop, rng)
                    if cfg.stage == 2:
                        triple = _clamped_triple(k, store.n_views(oid))
                        group_ex = []
                        for idx in triple:
                            r, m = store.get(oid, idx)
                            group_ex.append(normalized_arrays(
                                apply_transform(r, tf), m, cfg.zero_bands))
                        examples.append(group_ex)
                    else:
                        examples.append(normalized_arrays(
                            apply_transform(rec, tf), meta, cfg.zero_bands))

                optimizer.zero_grad()
                if cfg.stage == 2:
                    views = []
                    for slot in range(3):
                        slot_ex = [g[slot] for g in examples]
                        views.append((_stack(slot_ex, "timemax", dtype),
                                      _stack(slot_ex, "amp", dtype),
                                      _stack(slot_ex, "phase", dtype)))
                    target = _stack([g[1] for g in examples], "gt", dtype)
                    restored = model(views, 1)
                else:
                    tm, amp, phase, target = _batch_stage1(examples, dtype)
                    restored, _ = model(tm, amp, phase)
                loss = mse_loss(target, restored)
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(batch)
            train_loss = total_loss / max(len(epoch_items), 1)

            val_psnr = mean_psnr(model, store, val_items, cfg.zero_bands)

            log.write(json.dumps({"epoch": epoch, "lr": lr,
                                  "train_loss": train_loss,
                                  "val_psnr": val_psnr},
                                 sort_keys=True) + "\n")
            log.flush()

            if val_psnr > best_psnr:
                best_psnr = val_psnr
                best_epoch = epoch
                save_checkpoint(best_path, model_state(model),
                                config={"network": net_cfg.to_dict(),
                                        "train": cfg.to_dict()},
                                extra={"kind": "best", "stage": cfg.stage,
                                       "epoch": epoch, "val_psnr": val_psnr,
                                       "holdout": holdout})
            _save_last(last_path, model, optimizer, net_cfg, cfg, epoch + 1,
                       best_psnr, best_epoch, holdout)
    finally:
        log.close()

    return {"stage": cfg.stage, "epochs_run": cfg.epochs - start_epoch,
            "best_epoch": best_epoch, "best_psnr": best_psnr,
            "holdout": holdout, "train_objects": train_ids,
            "val_objects": val_ids, "deterministic": det,
            "log_path": log_path, "best_path": best_path,
            "last_path": last_path}

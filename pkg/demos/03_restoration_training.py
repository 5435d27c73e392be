"""Train the restoration network on a small synthetic set.

Generates two objects' worth of corrupted views, trains the desk-size
network briefly, and compares the corrupted input against the restored
output on a view the optimizer saw. A short run is enough to watch the
mechanism bite; real runs use hundreds of epochs (see thz-tomo train).

Run from the repository root:  python3 demos/03_restoration_training.py
"""

import json
import os
import tempfile

import numpy as np

from thztomo.metrics import psnr
from thztomo.phantom import AngleCfg, CorruptCfg, RenderCfg, build_dataset
from thztomo.sarnet import NetworkCfg
from thztomo.train import (
    TrainCfg,
    ViewStore,
    load_trained,
    normalized_arrays,
    restore_view,
    train_stage,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

root = tempfile.mkdtemp(prefix="thz_demo_")
objects = [
    {"id": "shell", "shape": {"op": "difference", "shapes": [
        {"primitive": "sphere", "radius": 6.5},
        {"primitive": "sphere", "radius": 4.5}]}},
    {"id": "bar", "shape": {"primitive": "box", "size": [10.0, 4.0, 4.0]}},
]
print("generating dataset (2 objects x 12 views, 48^2 views) ...")
build_dataset(objects, root, seed=9, angles=AngleCfg(count=12),
              render=RenderCfg(grid_size=48, voxel_mm=0.5),
              corrupt=CorruptCfg(k_blur=5.0, snr_db=25.0))

run_dir = os.path.join(root, "run")
cfg = TrainCfg(epochs=60, batch_size=4, crop=None, seed=5, val_views=6)
print("training the desk preset for 60 epochs ...")
summary = train_stage(root, run_dir, NetworkCfg.desk(), cfg)
print(f"best validation PSNR {summary['best_psnr']:.2f} dB "
      f"at epoch {summary['best_epoch']}")

with open(os.path.join(run_dir, "log.ndjson")) as fh:
    log = [json.loads(line) for line in fh]
print("epoch    loss      val PSNR")
for row in log[:: max(len(log) // 6, 1)]:
    print(f"  {row['epoch']:4d}  {row['train_loss']:.5f}   "
          f"{row['val_psnr']:6.2f}")

model, _, _ = load_trained(os.path.join(run_dir, "ckpt_best.bin"))
store = ViewStore(root, ["shell"])
rec, meta = store.get("shell", 0)
ex = normalized_arrays(rec, meta)
restored = restore_view(model, store, "shell", 0)
print(f"view shell/0: corrupted input PSNR "
      f"{psnr(ex['gt'][0], ex['timemax'][0]):.2f} dB, restored "
      f"{psnr(ex['gt'][0], restored):.2f} dB")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not installed; skipping the figure")
else:
    panels = [("corrupted Time-max", ex["timemax"][0]),
              ("restored", restored),
              ("ground truth", ex["gt"][0])]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    path = os.path.join(OUT, "restoration.png")
    fig.savefig(path, dpi=120)
    print(f"figure written to {path}")

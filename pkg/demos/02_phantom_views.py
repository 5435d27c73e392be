"""Phantom synthesis: voxel shapes, projected views, beam corruption.

Builds a composite test object, projects its thickness map at a few
angles, renders the measurement images (Time-max plus the 12-band
cube), and degrades them with the frequency-dependent beam footprint
and detector noise. The low bands blur hardest; the Time-max image
carries the widest footprint of all.

Run from the repository root:  python3 demos/02_phantom_views.py
"""

import os

import numpy as np

import thztomo.thz_signal as sig
from thztomo.phantom import (
    NoiseCfg,
    PsfCfg,
    corrupt_view,
    make_phantom,
    project_thickness,
    render_view,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# a hollow shell with a side bore, 0.5 mm voxels on a 64^3 grid
shape = {"op": "difference", "shapes": [
    {"primitive": "sphere", "radius": 10.0},
    {"primitive": "sphere", "radius": 7.0},
    {"primitive": "cylinder", "center": [0.0, 0.0, 0.0], "radius": 2.0,
     "height": 30.0, "axis": 2},
]}
ph = make_phantom(shape, grid_size=64, voxel_size=0.5)
print(f"phantom: {int(ph.grid.sum())} occupied voxels of {ph.grid.size}")

pulse = sig.ReferencePulse.default()
material = sig.default_material()
bands = sig.default_band_set()
psf = PsfCfg(beam_min_mm=1.25, k_blur=4.0, step_mm=0.5)
noise = NoiseCfg(snr_db=22.0)

print("beam FWHM by frequency (mm):")
for f in (bands.frequencies[0], bands.frequencies[-1]):
    print(f"  {f:.3f} THz -> {psf.fwhm_mm(f):.2f}")

views = {}
for theta in (0.0, 45.0, 90.0):
    thick = project_thickness(ph, theta)
    clean = render_view(thick, material, pulse, bands, theta=theta)
    dirty = corrupt_view(clean, psf, noise, seed=3)
    views[theta] = (clean, dirty)
    print(f"theta {theta:5.1f}: thickness max {thick.max():.1f} mm, "
          f"Time-max range clean [{clean.timemax.min():.3f}, "
          f"{clean.timemax.max():.3f}] corrupted "
          f"[{dirty.timemax.min():.3f}, {dirty.timemax.max():.3f}]")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not installed; skipping the figure")
else:
    clean, dirty = views[45.0]
    rows = [
        ("gt thickness (mm)", clean.gt_thickness),
        ("clean Time-max", clean.timemax),
        ("corrupted Time-max", dirty.timemax),
        ("corrupted band 12 amp", dirty.cube.amplitude[:, :, 11]),
    ]
    fig, axes = plt.subplots(1, len(rows), figsize=(3 * len(rows), 3.2))
    for ax, (title, img) in zip(axes, rows):
        im = ax.imshow(img, cmap="magma")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, shrink=0.75)
    fig.tight_layout()
    path = os.path.join(OUT, "phantom_views.png")
    fig.savefig(path, dpi=120)
    print(f"figure written to {path}")

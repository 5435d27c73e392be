"""Synthetic objects, projection rendering, corruption, and datasets.

A phantom is a D x H x W occupancy grid (height on axis 1, D == W so each
horizontal slice is square). Projection at angle theta integrates
occupancy along rays in the horizontal plane independently per height,
yielding an H x W thickness map in mm. Rendering pushes each thickness
through the wave-propagation model to produce the Time-max image and the
12 amplitude + 12 phase band images. Corruption applies a
frequency-dependent Gaussian beam footprint and additive noise at a
configured SNR; random streams derive from (seed, object, view) so
generation order never changes results.

On-disk layout per view: meta.json, gt.f32, timemax.f32, amp.f32 (B x H x W),
phase.f32 (B x H x W), plus *_clean.f32 twins of the corrupted images.
Each object directory also stores phantom.f32 (the occupancy grid) for
volume-level evaluation. A manifest.json at the root records geometry,
angles, seeds, and per-object normalization constants.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from . import tomo
from .errors import ConfigError, DataMismatchError, MissingInputError, ShapeError
from .thz_signal import (BandSet, C_MM_PS, MaterialProfile, ReferencePulse,
                         SpectralCube, default_band_set, default_material,
                         extract_bands, simulate_traces, wrap_phase)

FORMAT_VERSION = 1

_PRIMITIVES = ("sphere", "box", "cylinder", "torus", "helix")
_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class VoxelPhantom:
    """Occupancy grid in [0, 1] with metric voxel size."""

    grid: np.ndarray
    voxel_size: float
    material_id: str = "default"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 3 or min(g.shape) < 8:
            raise ShapeError("phantom grid must be 3-D with every side >= 8")
        if np.any(g < 0.0) or np.any(g > 1.0):
            raise ValueError("occupancy must lie in [0, 1]")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "grid", g)


@dataclass(frozen=True)
class ViewRecord:
    """One projection angle's images: ground truth, Time-max, band cube."""

    theta: float
    gt_thickness: np.ndarray
    timemax: np.ndarray
    cube: SpectralCube
    object_id: str = ""
    view_index: int = 0

    def __post_init__(self):
        gt = np.asarray(self.gt_thickness, dtype=np.float64)
        tm = np.asarray(self.timemax, dtype=np.float64)
        if gt.ndim != 2 or tm.shape != gt.shape:
            raise ShapeError("gt and timemax must share an H x W shape")
        if self.cube.amplitude.shape[:2] != gt.shape:
            raise ShapeError("cube images must share the view's H x W")
        if np.any(gt < 0.0):
            raise ValueError("gt thickness must be nonnegative")
        object.__setattr__(self, "gt_thickness", gt)
        object.__setattr__(self, "timemax", tm)

    @property
    def shape(self):
        return self.gt_thickness.shape


def _voxel_centers(shape, voxel_size):
    """Per-axis center coordinates in mm, origin at the grid center."""
    return [(np.arange(s, dtype=np.float64) - (s - 1) / 2.0) * voxel_size
            for s in shape]


def _field(spec: dict, key: str, kind: str):
    if key not in spec:
        raise ConfigError(f"{kind} spec missing field {key!r}")
    return spec[key]


def _occupancy(spec: dict, coords) -> np.ndarray:
    if "op" in spec:
        op = spec["op"]
        shapes = _field(spec, "shapes", op)
        if not isinstance(shapes, (list, tuple)) or len(shapes) == 0:
            raise ConfigError(f"{op!r} needs a nonempty shapes list")
        parts = [_occupancy(s, coords) for s in shapes]
        if op == "union":
            out = parts[0]
            for p in parts[1:]:
                out = out | p
            return out
        if op == "difference":
            out = parts[0]
            for p in parts[1:]:
                out = out & ~p
            return out
        raise ConfigError(f"unknown composition op {op!r}")

    prim = spec.get("primitive")
    if prim not in _PRIMITIVES:
        raise ConfigError(f"unknown primitive {prim!r}; supported: {_PRIMITIVES}")
    center = np.asarray(spec.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
    if center.shape != (3,):
        raise ConfigError(f"{prim} center must have 3 components")
    ax = [c - cc for c, cc in zip(coords, center)]
    x0, x1, x2 = np.ix_(ax[0], ax[1], ax[2])

    if prim == "sphere":
        r = float(_field(spec, "radius", prim))
        return x0 ** 2 + x1 ** 2 + x2 ** 2 <= r ** 2
    if prim == "box":
        size = np.asarray(_field(spec, "size", prim), dtype=np.float64)
        half = size / 2.0
        return ((np.abs(x0) <= half[0]) & (np.abs(x1) <= half[1])
                & (np.abs(x2) <= half[2]))

    axis = int(spec.get("axis", 1))
    if axis not in (0, 1, 2):
        raise ConfigError(f"{prim} axis must be 0, 1, or 2")
    along = (x0, x1, x2)[axis]
    perp = [v for i, v in enumerate((x0, x1, x2)) if i != axis]

    if prim == "cylinder":
        r = float(_field(spec, "radius", prim))
        h = float(_field(spec, "height", prim))
        return (perp[0] ** 2 + perp[1] ** 2 <= r ** 2) & (np.abs(along) <= h / 2.0)
    if prim == "torus":
        ring = float(_field(spec, "ring_radius", prim))
        tube = float(_field(spec, "tube_radius", prim))
        rho = np.sqrt(perp[0] ** 2 + perp[1] ** 2)
        return (rho - ring) ** 2 + along ** 2 <= tube ** 2

    # helix: tube of radius tube_radius around a helical centerline
    ring = float(_field(spec, "ring_radius", prim))
    tube = float(_field(spec, "tube_radius", prim))
    pitch = float(_field(spec, "pitch", prim))
    turns = float(_field(spec, "turns", prim))
    speed = np.sqrt(ring ** 2 + (pitch / (2.0 * np.pi)) ** 2)
    span = 2.0 * np.pi * turns
    n_pts = max(int(np.ceil(span * speed / (0.25 * tube))), 16)
    phi = np.linspace(-span / 2.0, span / 2.0, n_pts)
    perp_idx = [i for i in range(3) if i != axis]
    curve = np.empty((n_pts, 3), dtype=np.float64)
    curve[:, axis] = pitch * phi / (2.0 * np.pi)
    curve[:, perp_idx[0]] = ring * np.cos(phi)
    curve[:, perp_idx[1]] = ring * np.sin(phi)
    tree = cKDTree(curve)
    shape = (ax[0].size, ax[1].size, ax[2].size)
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    # prefilter: only voxels inside the helix bounding box can be occupied
    lo = curve.min(axis=0) - tube
    hi = curve.max(axis=0) + tube
    cand = np.all((pts >= lo) & (pts <= hi), axis=1)
    occ = np.zeros(pts.shape[0], dtype=bool)
    if np.any(cand):
        d, _ = tree.query(pts[cand], k=1)
        occ[cand] = d <= tube
    return occ.reshape(shape)


def make_phantom(spec, grid_size=144, voxel_size: float = 0.25,
                 material_id: str = "default") -> VoxelPhantom:
    """Build an occupancy grid from a composable shape description.

    spec is a dict: a primitive ({"primitive": "sphere", "center": [...],
    "radius": r}, similarly box/cylinder/torus/helix) or a composition
    ({"op": "union"|"difference", "shapes": [...]}). Lengths are mm
    relative to the grid center. A voxel is occupied when its center lies
    inside the shape. None or {} gives an empty grid.
    """
    if isinstance(grid_size, int):
        shape = (grid_size, grid_size, grid_size)
    else:
        shape = tuple(int(s) for s in grid_size)
    coords = _voxel_centers(shape, voxel_size)
    if spec is None or spec == {}:
        grid = np.zeros(shape, dtype=np.float64)
    else:
        grid = _occupancy(spec, coords).astype(np.float64)
    return VoxelPhantom(grid=grid, voxel_size=voxel_size, material_id=material_id)


def project_thickness(phantom: VoxelPhantom, theta: float) -> np.ndarray:
    """H x W thickness map (mm) at viewing angle theta in [0, 360).

    Row h is the Radon row of horizontal slice h. Angles of 180 and above
    reuse theta - 180 with the detector axis mirrored (parallel-beam
    symmetry).
    """
    if not (0.0 <= theta < 360.0):
        raise ValueError("theta must lie in [0, 360) degrees")
    d, h, w = phantom.grid.shape
    if d != w:
        raise ShapeError("projection requires square horizontal slices (D == W)")
    flip = theta >= 180.0
    th = theta - 180.0 if flip else theta
    out = np.empty((h, w), dtype=np.float64)
    for row in range(h):
        sino = tomo.forward_radon(phantom.grid[:, row, :], [th],
                                  pixel_size=phantom.voxel_size)
        out[row] = sino.data[0, ::-1] if flip else sino.data[0]
    return out


def render_view(thickness: np.ndarray, material: MaterialProfile,
                pulse: ReferencePulse, bands: BandSet | None = None,
                theta: float = 0.0, object_id: str = "",
                view_index: int = 0) -> ViewRecord:
    """Clean view images for a thickness map: Time-max plus the band cube.

    Equivalent to simulating every pixel's trace independently; the
    batched path reproduces the per-pixel loop bitwise.
    """
    thickness = np.asarray(thickness, dtype=np.float64)
    if thickness.ndim != 2:
        raise ShapeError("thickness map must be 2-D")
    if np.any(thickness < 0.0):
        raise ValueError("thickness must be nonnegative")
    bands = bands if bands is not None else default_band_set()
    traces = simulate_traces(pulse, material, thickness)
    timemax = np.abs(traces).max(axis=-1)
    amp, phase = extract_bands(traces, pulse.dt, bands)
    cube = SpectralCube(amplitude=amp, phase=phase, frequencies=bands.frequencies)
    return ViewRecord(theta=float(theta), gt_thickness=thickness, timemax=timemax,
                      cube=cube, object_id=object_id, view_index=view_index)


@dataclass(frozen=True)
class PsfCfg:
    """Beam footprint model: FWHM(f) = max(beam_min_mm, k_blur * c / f)."""

    beam_min_mm: float = 1.25
    k_blur: float = 1.0
    step_mm: float = 0.25

    def fwhm_mm(self, f_thz: float) -> float:
        if self.beam_min_mm < 0.0 or self.k_blur < 0.0:
            raise ConfigError("PSF parameters must be nonnegative")
        return max(self.beam_min_mm, self.k_blur * C_MM_PS / f_thz)

    def sigma_px(self, f_thz: float) -> float:
        return self.fwhm_mm(f_thz) * _FWHM_TO_SIGMA / self.step_mm


@dataclass(frozen=True)
class NoiseCfg:
    """Additive Gaussian noise; std = rms(image) / 10^(snr_db / 20)."""

    snr_db: float | None = 30.0


def _blur(img: np.ndarray, sigma_px: float) -> np.ndarray:
    if sigma_px < 1e-12:
        return img.copy()
    return gaussian_filter(img, sigma=sigma_px, mode="nearest")


def corrupt_view(view: ViewRecord, psf_cfg: PsfCfg, noise_cfg: NoiseCfg | None,
                 seed) -> ViewRecord:
    """Degraded copy of a clean view.

    Each band image is blurred with its frequency's beam footprint; the
    Time-max image uses the broadband (widest) footprint. Noise draws
    follow a fixed order (timemax, amplitude bands, phase bands) from a
    generator seeded by `seed`. Amplitudes are clamped at zero and phases
    re-wrapped so the record's invariants survive corruption.
    """
    freqs = view.cube.frequencies
    sigmas = [psf_cfg.sigma_px(f) for f in freqs]
    timemax = _blur(view.timemax, max(sigmas) if sigmas else 0.0)
    amp = np.stack([_blur(view.cube.amplitude[:, :, b], sigmas[b])
                    for b in range(len(freqs))], axis=-1)
    phase = np.stack([_blur(view.cube.phase[:, :, b], sigmas[b])
                      for b in range(len(freqs))], axis=-1)

    snr = None if noise_cfg is None else noise_cfg.snr_db
    if snr is not None and np.isfinite(snr):
        if snr <= 0.0:
            raise ConfigError("snr_db must be positive")
        rng = np.random.default_rng(seed)
        scale = 10.0 ** (-snr / 20.0)

        def add_noise(img):
            std = float(np.sqrt(np.mean(img ** 2))) * scale
            return img + rng.normal(0.0, std, size=img.shape)

        timemax = add_noise(timemax)
        for b in range(len(freqs)):
            amp[:, :, b] = add_noise(amp[:, :, b])
        for b in range(len(freqs)):
            phase[:, :, b] = add_noise(phase[:, :, b])

    cube = SpectralCube(amplitude=np.maximum(amp, 0.0),
                        phase=wrap_phase(phase), frequencies=freqs)
    return ViewRecord(theta=view.theta, gt_thickness=view.gt_thickness,
                      timemax=timemax, cube=cube, object_id=view.object_id,
                      view_index=view.view_index)


@dataclass(frozen=True)
class Transform:
    """One joint geometric augmentation: flips, quarter rotations, crop."""

    flip_h: bool = False
    flip_v: bool = False
    rot_k: int = 0
    top: int | None = None
    left: int | None = None
    crop: int | None = None

    @classmethod
    def identity(cls, shape_hw, crop: int | None = None) -> "Transform":
        """No flip/rotation; crop (if any) is the centered window."""
        if crop is None:
            return cls()
        h, w = shape_hw
        return cls(top=(h - crop) // 2, left=(w - crop) // 2, crop=crop)


def sample_transform(shape_hw, crop: int | None, rng) -> Transform:
    """Draw flips, a quarter rotation, and a crop offset."""
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    rot_k = int(rng.integers(0, 4))
    if crop is None:
        return Transform(flip_h=flip_h, flip_v=flip_v, rot_k=rot_k)
    h, w = shape_hw
    if rot_k % 2 == 1:
        h, w = w, h
    if h < crop or w < crop:
        raise ShapeError(f"image {h}x{w} smaller than crop {crop}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return Transform(flip_h=flip_h, flip_v=flip_v, rot_k=rot_k,
                     top=top, left=left, crop=crop)


def _apply_geom(img: np.ndarray, tf: Transform) -> np.ndarray:
    out = img
    if tf.flip_h:
        out = np.flip(out, axis=1)
    if tf.flip_v:
        out = np.flip(out, axis=0)
    if tf.rot_k % 4:
        out = np.rot90(out, k=tf.rot_k % 4, axes=(0, 1))
    if tf.crop is not None:
        c, top, left = tf.crop, tf.top, tf.left
        if top is None or left is None:
            raise ConfigError("crop transform needs top/left offsets")
        if top < 0 or left < 0 or top + c > out.shape[0] or left + c > out.shape[1]:
            raise ShapeError("crop window exceeds the image")
        out = out[top:top + c, left:left + c]
    return np.ascontiguousarray(out)


def apply_transform(record: ViewRecord, tf: Transform) -> ViewRecord:
    """Apply one Transform jointly to gt, timemax, and all band images."""
    cube = SpectralCube(amplitude=_apply_geom(record.cube.amplitude, tf),
                        phase=_apply_geom(record.cube.phase, tf),
                        frequencies=record.cube.frequencies)
    return ViewRecord(theta=record.theta,
                      gt_thickness=_apply_geom(record.gt_thickness, tf),
                      timemax=_apply_geom(record.timemax, tf),
                      cube=cube, object_id=record.object_id,
                      view_index=record.view_index)


def augment(record: ViewRecord, seed, crop: int | None = 128) -> ViewRecord:
    """Random flip / rotation / crop, one shared transform per record."""
    h, w = record.shape
    if crop is not None and (h < crop or w < crop):
        raise ShapeError(f"image {h}x{w} smaller than crop {crop}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_transform(record, sample_transform((h, w), crop, rng))


@dataclass(frozen=True)
class AngleCfg:
    count: int = 60
    span_deg: float = 180.0

    def angles(self) -> np.ndarray:
        if self.count < 1:
            raise ConfigError("angle count must be >= 1")
        if not (0.0 < self.span_deg <= 180.0):
            raise ConfigError("span_deg must lie in (0, 180]")
        return np.arange(self.count) * (self.span_deg / self.count)


@dataclass(frozen=True)
class RenderCfg:
    grid_size: int = 144
    voxel_mm: float = 0.25
    material: MaterialProfile | None = None
    pulse: ReferencePulse | None = None
    bands: BandSet | None = None


@dataclass(frozen=True)
class CorruptCfg:
    beam_min_mm: float = 1.25
    k_blur: float = 1.0
    snr_db: float | None = 30.0


@dataclass
class DatasetManifest:
    """Root description of a generated dataset tree."""

    format_version: int
    seed: int
    angles_deg: list
    geometry: dict
    bands_thz: list
    corruption: dict
    objects: list
    pulse: dict
    material: dict
    air: dict

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version, "seed": self.seed,
            "angles_deg": self.angles_deg, "geometry": self.geometry,
            "bands_thz": self.bands_thz, "corruption": self.corruption,
            "objects": self.objects, "pulse": self.pulse,
            "material": self.material, "air": self.air,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetManifest":
        try:
            return cls(**{k: raw[k] for k in (
                "format_version", "seed", "angles_deg", "geometry", "bands_thz",
                "corruption", "objects", "pulse", "material", "air")})
        except KeyError as exc:
            raise DataMismatchError(f"manifest missing key {exc}") from exc

    def object_ids(self) -> list:
        return [o["id"] for o in self.objects]


def _view_seed(seed: int, object_id: str, view_index: int):
    # strings cannot seed a Generator; crc32 keeps the stream id stable
    return (int(seed), zlib.crc32(object_id.encode("utf-8")), int(view_index))


def _write_f32(path, arr) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_f32(path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DataMismatchError(f"{path}: expected {expected} floats, found {arr.size}")
    return arr.reshape(shape).astype(np.float64)


def _dump_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_dataset(objects, out_dir, seed: int = 0,
                  angles: AngleCfg | None = None,
                  render: RenderCfg | None = None,
                  corrupt: CorruptCfg | None = None) -> DatasetManifest:
    """Generate, corrupt, and serialize views for a list of objects.

    objects is a list of {"id": str, "shape": spec} entries. Output is a
    pure function of (objects, configs, seed): two runs write
    byte-identical trees.
    """
    angles = angles if angles is not None else AngleCfg()
    render = render if render is not None else RenderCfg()
    corrupt = corrupt if corrupt is not None else CorruptCfg()
    material = render.material if render.material is not None else default_material()
    pulse = render.pulse if render.pulse is not None else ReferencePulse.default()
    bands = render.bands if render.bands is not None else default_band_set()
    theta_list = angles.angles()

    for obj in objects:
        if "id" not in obj or "shape" not in obj:
            raise ConfigError("each object entry needs 'id' and 'shape' keys")
    ids = [o["id"] for o in objects]
    if len(set(ids)) != len(ids):
        raise ConfigError("object ids must be unique")

    psf = PsfCfg(beam_min_mm=corrupt.beam_min_mm, k_blur=corrupt.k_blur,
                 step_mm=render.voxel_mm)
    noise = NoiseCfg(snr_db=corrupt.snr_db)

    # air-path constants shared by every object (d = 0 reference)
    air = simulate_traces(pulse, material, np.array([0.0]))[0]
    air_timemax = float(np.max(np.abs(air)))
    air_amp, _ = extract_bands(air, pulse.dt, bands)

    os.makedirs(out_dir, exist_ok=True)
    manifest_objects = []
    for obj in objects:
        oid = obj["id"]
        ph = make_phantom(obj["shape"], grid_size=render.grid_size,
                          voxel_size=render.voxel_mm)
        obj_dir = os.path.join(out_dir, oid)
        os.makedirs(obj_dir, exist_ok=True)
        _write_f32(os.path.join(obj_dir, "phantom.f32"), ph.grid)

        thicknesses = np.stack([project_thickness(ph, th) for th in theta_list])
        gt_max = float(thicknesses.max())

        for k, theta in enumerate(theta_list):
            clean = render_view(thicknesses[k], material, pulse, bands,
                                theta=float(theta), object_id=oid, view_index=k)
            dirty = corrupt_view(clean, psf, noise, seed=_view_seed(seed, oid, k))
            vdir = os.path.join(obj_dir, f"view_{k}")
            os.makedirs(vdir, exist_ok=True)
            h, w = clean.shape
            _write_f32(os.path.join(vdir, "gt.f32"), clean.gt_thickness)
            _write_f32(os.path.join(vdir, "timemax.f32"), dirty.timemax)
            _write_f32(os.path.join(vdir, "amp.f32"),
                       np.moveaxis(dirty.cube.amplitude, 2, 0))
            _write_f32(os.path.join(vdir, "phase.f32"),
                       np.moveaxis(dirty.cube.phase, 2, 0))
            _write_f32(os.path.join(vdir, "timemax_clean.f32"), clean.timemax)
            _write_f32(os.path.join(vdir, "amp_clean.f32"),
                       np.moveaxis(clean.cube.amplitude, 2, 0))
            _write_f32(os.path.join(vdir, "phase_clean.f32"),
                       np.moveaxis(clean.cube.phase, 2, 0))
            _dump_json(os.path.join(vdir, "meta.json"), {
                "theta_deg": float(theta), "height": h, "width": w,
                "bands_thz": list(bands.frequencies), "dtype": "<f4",
                "seed": int(seed), "object_id": oid, "view_index": k,
                "air_timemax": air_timemax, "air_amp": [float(a) for a in air_amp],
                "gt_max_mm": gt_max,
            })
        manifest_objects.append({
            "id": oid, "n_views": int(theta_list.size), "gt_max_mm": gt_max,
            "grid": list(ph.grid.shape),
        })

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION, seed=int(seed),
        angles_deg=[float(t) for t in theta_list],
        geometry={"grid_size": render.grid_size, "voxel_mm": render.voxel_mm,
                  "scan_step_mm": render.voxel_mm},
        bands_thz=list(bands.frequencies),
        corruption={"beam_min_mm": corrupt.beam_min_mm, "k_blur": corrupt.k_blur,
                    "snr_db": corrupt.snr_db},
        objects=manifest_objects,
        pulse={"n_samples": int(pulse.samples.size), "dt_ps": pulse.dt,
               "t0_ps": pulse.t0},
        material={"freq_thz": [float(f) for f in material.freq_thz],
                  "n": [float(v) for v in material.n],
                  "kappa": [float(v) for v in material.kappa]},
        air={"timemax": air_timemax, "amp": [float(a) for a in air_amp]},
    )
    _dump_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise MissingInputError(f"no manifest.json under {root}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataMismatchError(f"manifest.json is not valid JSON: {exc}") from exc
    return DatasetManifest.from_dict(raw)


def load_view(root, object_id: str, view_index: int,
              variant: str = "corrupt"):
    """Read one view back as (ViewRecord, meta dict).

    variant selects the corrupted images (training inputs) or their
    clean twins; gt is shared.
    """
    vdir = os.path.join(root, object_id, f"view_{view_index}")
    meta_path = os.path.join(vdir, "meta.json")
    if not os.path.exists(meta_path):
        raise MissingInputError(f"no view at {vdir}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    h, w = meta["height"], meta["width"]
    bands = meta["bands_thz"]
    suffix = "" if variant == "corrupt" else "_clean"
    gt = _read_f32(os.path.join(vdir, "gt.f32"), (h, w))
    tm = _read_f32(os.path.join(vdir, f"timemax{suffix}.f32"), (h, w))
    amp = np.moveaxis(_read_f32(os.path.join(vdir, f"amp{suffix}.f32"),
                                (len(bands), h, w)), 0, 2)
    phase = np.moveaxis(_read_f32(os.path.join(vdir, f"phase{suffix}.f32"),
                                  (len(bands), h, w)), 0, 2)
    # storage is f32; re-wrap so the cube invariant survives the round-trip
    cube = SpectralCube(amplitude=np.maximum(amp, 0.0), phase=wrap_phase(phase),
                        frequencies=tuple(bands))
    record = ViewRecord(theta=meta["theta_deg"], gt_thickness=gt, timemax=tm,
                        cube=cube, object_id=meta["object_id"],
                        view_index=meta["view_index"])
    return record, meta


def load_phantom_grid(root, object_id: str, manifest: DatasetManifest) -> np.ndarray:
    for obj in manifest.objects:
        if obj["id"] == object_id:
            shape = tuple(obj["grid"])
            return _read_f32(os.path.join(root, object_id, "phantom.f32"), shape)
    raise MissingInputError(f"object {object_id!r} not in manifest")

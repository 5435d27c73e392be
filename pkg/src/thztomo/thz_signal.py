"""Terahertz time-domain signal model and spectral band extraction.

Units are fixed package-wide: thickness in mm, frequency in THz, time in ps,
so with c in mm/ps every propagation exponent is dimensionless as written.

The detected spectrum through a thickness d of material follows

    S_d(f) = S_ref(f) * t(f) * exp(-kappa(f) * 2*pi*f*d / c)
                             * exp(-1j * n(f) * 2*pi*f*d / c)

with complex refractive index n - 1j*kappa and a per-interface Fresnel
factor t(f) that defaults to a real constant. The exponent signs give
attenuation and positive group delay for n >= 1, kappa >= 0.

Band extraction evaluates the discrete spectrum at exact frequencies
(Goertzel-style direct sums), because the selected water-absorption lines
do not all fall on the 10 GHz grid of a 100 ps window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

C_MM_PS = 0.299792458
"""Speed of light in mm/ps."""

WATER_BANDS_THZ = (
    0.380, 0.448, 0.557, 0.621, 0.916, 0.970,
    0.988, 1.097, 1.113, 1.163, 1.208, 1.229,
)
"""The 12 selected water-absorption line frequencies, ascending, in THz."""

_NYQUIST_THZ = 5.0  # 1 / (2 * 0.1 ps)
_CHUNK_ROWS = 4096  # cap on complex temporaries; chunking is bitwise neutral


def wrap_phase(x):
    """Wrap angles (radians) to the half-open interval (-pi, pi].

    Values already in range pass through bitwise, so wrapping is an exact
    identity on wrapped data.
    """
    x = np.asarray(x, dtype=np.float64)
    wrapped = np.pi - np.mod(np.pi - x, 2.0 * np.pi)
    wrapped = np.where((x > -np.pi) & (x <= np.pi), x, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


@dataclass(frozen=True)
class ReferencePulse:
    """Sampled reference electric field (the d = 0 instrument response).

    samples: real array of length T, arbitrary units.
    dt: sample spacing in ps. The default 1000 x 0.1 ps gives a 100 ps
    window and 10 GHz bin spacing.
    t0: nominal pulse-center time in ps (metadata; samples carry the shape).
    """

    samples: np.ndarray
    dt: float = 0.1
    t0: float = 20.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ShapeError("pulse samples must be a 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("pulse samples must be finite")
        if np.max(np.abs(s)) <= 0.0:
            raise ValueError("pulse must have a nonzero peak")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt

    @classmethod
    def default(cls, n_samples: int = 1000, dt: float = 0.1,
                t0: float = 20.0, fwhm_ps: float = 0.516) -> "ReferencePulse":
        """First derivative of a Gaussian, FWHM 0.516 ps, centered at t0.

        Peak amplitude is normalized to 1.
        """
        t = np.arange(n_samples) * dt
        sigma = fwhm_ps / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        u = (t - t0) / sigma
        s = -u * np.exp(-0.5 * u * u)
        s /= np.max(np.abs(s))
        return cls(samples=s, dt=dt, t0=t0)


@dataclass(frozen=True)
class TimeDomainTrace:
    """One pixel's detected time-domain signal."""

    samples: np.ndarray
    dt: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ShapeError("trace samples must be a 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("trace samples must be finite")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class BandSet:
    """Ordered set of extraction frequencies in THz."""

    frequencies: tuple

    def __post_init__(self):
        f = tuple(float(x) for x in self.frequencies)
        if len(f) == 0:
            raise ValueError("band set must be nonempty")
        if any(not (0.0 < x <= _NYQUIST_THZ) for x in f):
            raise ValueError(f"band frequencies must lie in (0, {_NYQUIST_THZ}] THz")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError("band frequencies must be strictly ascending")
        object.__setattr__(self, "frequencies", f)

    def __len__(self):
        return len(self.frequencies)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.frequencies, dtype=np.float64)


@dataclass(frozen=True)
class SpectralSample:
    """Amplitude and wrapped phase of one trace at one frequency."""

    frequency: float
    amplitude: float
    phase: float


@dataclass(frozen=True)
class SpectralCube:
    """Per-view amplitude and phase stacks, shape H x W x B."""

    amplitude: np.ndarray
    phase: np.ndarray
    frequencies: tuple

    def __post_init__(self):
        a = np.asarray(self.amplitude, dtype=np.float64)
        p = np.asarray(self.phase, dtype=np.float64)
        if a.ndim != 3 or a.shape != p.shape:
            raise ShapeError("amplitude and phase must share an H x W x B shape")
        if a.shape[2] != len(self.frequencies):
            raise ShapeError("band axis must match the frequency list")
        if np.any(a < 0.0):
            raise ValueError("amplitudes must be nonnegative")
        if np.any(p <= -np.pi) or np.any(p > np.pi):
            raise ValueError("phases must lie in (-pi, pi]")
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "phase", p)
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))


def default_band_set() -> BandSet:
    """The 12 selected water-absorption frequencies, ascending."""
    return BandSet(frequencies=WATER_BANDS_THZ)


@dataclass(frozen=True)
class MaterialProfile:
    """Piecewise-linear n(f) / kappa(f) tables plus an interface factor.

    freq_thz are the table knots (strictly ascending). Lookups between
    knots interpolate linearly; lookups outside the knots raise unless
    clamp=True, which extends the endpoint values (used when evaluating
    the full discrete spectrum, where out-of-band bins carry negligible
    pulse energy).

    fresnel_t is a single complex interface factor applied to every
    frequency, or a per-knot complex table interpolated like n and kappa.
    """

    freq_thz: np.ndarray
    n: np.ndarray
    kappa: np.ndarray
    fresnel_t: object = 0.5

    def __post_init__(self):
        f = np.asarray(self.freq_thz, dtype=np.float64)
        n = np.asarray(self.n, dtype=np.float64)
        k = np.asarray(self.kappa, dtype=np.float64)
        if f.ndim != 1 or f.size < 2 or n.shape != f.shape or k.shape != f.shape:
            raise ShapeError("freq_thz, n, kappa must be equal-length 1-D tables")
        if np.any(np.diff(f) <= 0.0):
            raise ValueError("table frequencies must be strictly ascending")
        if np.any(n < 1.0):
            raise ValueError("refractive index must be >= 1 everywhere")
        if np.any(k < 0.0):
            raise ValueError("extinction coefficient must be >= 0 everywhere")
        t = self.fresnel_t
        if isinstance(t, np.ndarray) or isinstance(t, (list, tuple)):
            t = np.asarray(t, dtype=np.complex128)
            if t.shape != f.shape:
                raise ShapeError("per-frequency fresnel_t must match the knot table")
        else:
            t = complex(t)
        object.__setattr__(self, "freq_thz", f)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "kappa", k)
        object.__setattr__(self, "fresnel_t", t)

    @property
    def support(self) -> tuple:
        return float(self.freq_thz[0]), float(self.freq_thz[-1])

    def lookup(self, f, clamp: bool = False):
        """Return (n, kappa, fresnel_t) at frequencies f.

        Raises ValueError outside the table unless clamp is set.
        """
        f = np.asarray(f, dtype=np.float64)
        lo, hi = self.support
        if not clamp and (np.any(f < lo) or np.any(f > hi)):
            raise ValueError(
                f"frequency outside material table support [{lo}, {hi}] THz")
        n = np.interp(f, self.freq_thz, self.n)
        k = np.interp(f, self.freq_thz, self.kappa)
        if isinstance(self.fresnel_t, np.ndarray):
            t = (np.interp(f, self.freq_thz, self.fresnel_t.real)
                 + 1j * np.interp(f, self.freq_thz, self.fresnel_t.imag))
        else:
            t = np.full_like(n, self.fresnel_t, dtype=np.complex128)
        return n, k, t

    @classmethod
    def constant(cls, n: float, kappa: float, fresnel_t=0.5,
                 f_lo: float = 0.1, f_hi: float = 4.0) -> "MaterialProfile":
        """Dispersion-free material over [f_lo, f_hi] THz."""
        return cls(freq_thz=np.array([f_lo, f_hi]),
                   n=np.array([n, n]), kappa=np.array([kappa, kappa]),
                   fresnel_t=fresnel_t)

    @classmethod
    def from_json(cls, path) -> "MaterialProfile":
        """Load {"freq_thz": [...], "n": [...], "kappa": [...]} tables.

        An optional "fresnel_t" entry may be a real number, a [re, im]
        pair, or per-knot [[re, im], ...] rows.
        """
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            freq, n, kappa = raw["freq_thz"], raw["n"], raw["kappa"]
        except KeyError as exc:
            raise ValueError(f"material table missing key {exc}") from exc
        t = raw.get("fresnel_t", 0.5)
        if isinstance(t, list):
            t = np.asarray(t, dtype=np.float64)
            if t.ndim == 1 and t.size == 2:
                t = complex(t[0], t[1])
            else:
                t = t[:, 0] + 1j * t[:, 1]
        return cls(freq_thz=np.asarray(freq), n=np.asarray(n),
                   kappa=np.asarray(kappa), fresnel_t=t)


def default_material() -> MaterialProfile:
    """Plastic-like surrogate: constant n, mildly rising absorption."""
    f = np.array([0.1, 4.0])
    return MaterialProfile(freq_thz=f, n=np.array([1.54, 1.54]),
                           kappa=np.array([0.004, 0.024]))


def _propagate(ref_row, n, kappa, t, d_col, f):
    """Transfer factor for a column of thicknesses over a frequency row."""
    w = 2.0 * np.pi * np.asarray(f, dtype=np.float64) / C_MM_PS
    alpha = -(kappa + 1j * n) * w
    return ref_row * t * np.exp(np.multiply.outer(d_col, alpha))


def detected_spectrum(ref_spectrum, material: MaterialProfile, d: float, f):
    """Detected complex spectrum through thickness d at frequencies f.

    ref_spectrum holds the reference values at the same frequencies.
    Frequencies must lie inside the material table (strict lookup).
    """
    if d < 0.0:
        raise ValueError("thickness must be nonnegative")
    n, kappa, t = material.lookup(f, clamp=False)
    w = 2.0 * np.pi * np.asarray(f, dtype=np.float64) / C_MM_PS
    out = (np.asarray(ref_spectrum, dtype=np.complex128) * t
           * np.exp(-(kappa + 1j * n) * w * float(d)))
    return complex(out) if out.ndim == 0 else out


def simulate_traces(pulse: ReferencePulse, material: MaterialProfile, d) -> np.ndarray:
    """Detected traces for an array of thicknesses; returns shape d.shape + (T,).

    The pulse spectrum is multiplied bin-wise by the transfer factor on the
    rfft grid (endpoint-clamped material lookup outside the table) and
    inverted; Hermitian symmetry is inherent to the rfft/irfft pair. Rows
    are bitwise identical to single-thickness calls.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0.0):
        raise ValueError("thickness must be nonnegative")
    shape = d.shape
    flat = d.reshape(-1)
    n_t = pulse.samples.size
    freqs = np.fft.rfftfreq(n_t, d=pulse.dt)  # THz, since dt is in ps
    ref = np.fft.rfft(pulse.samples)
    n, kappa, t = material.lookup(freqs, clamp=True)
    out = np.empty((flat.size, n_t), dtype=np.float64)
    for start in range(0, flat.size, _CHUNK_ROWS):
        block = flat[start:start + _CHUNK_ROWS]
        spec = _propagate(ref[None, :], n, kappa, t, block, freqs)
        out[start:start + _CHUNK_ROWS] = np.fft.irfft(spec, n=n_t, axis=1)
    return out.reshape(shape + (n_t,))


def simulate_trace(pulse: ReferencePulse, material: MaterialProfile,
                   d: float) -> TimeDomainTrace:
    """Detected trace through thickness d (mm) of the material."""
    samples = simulate_traces(pulse, material, np.array([float(d)]))[0]
    return TimeDomainTrace(samples=samples, dt=pulse.dt)


def time_max(trace) -> float:
    """Peak absolute amplitude of a trace (polarity-invariant)."""
    samples = trace.samples if isinstance(trace, TimeDomainTrace) else np.asarray(trace)
    if samples.size == 0:
        raise ShapeError("empty trace")
    return float(np.max(np.abs(samples)))


def _band_kernel(n_t: int, dt: float, freqs: np.ndarray) -> np.ndarray:
    k = np.arange(n_t, dtype=np.float64)
    return np.exp(-2j * np.pi * np.multiply.outer(k * dt, freqs))


def _band_sums(rows: np.ndarray, dt: float, freqs: np.ndarray) -> np.ndarray:
    """Exact-frequency discrete sums for rows of traces, shape (n, B).

    optimize=False keeps einsum on its row-independent kernel, so any
    slicing into row blocks reproduces the per-trace result bitwise.
    """
    kernel = _band_kernel(rows.shape[1], dt, freqs)
    out = np.empty((rows.shape[0], freqs.size), dtype=np.complex128)
    for start in range(0, rows.shape[0], _CHUNK_ROWS):
        block = rows[start:start + _CHUNK_ROWS]
        out[start:start + _CHUNK_ROWS] = np.einsum(
            "pt,tb->pb", block.astype(np.complex128), kernel, optimize=False)
    return out


def _amp_phase(coef: np.ndarray, n_t: int):
    amp = np.abs(coef) * (2.0 / n_t)
    phase = wrap_phase(np.angle(coef))
    return amp, phase


def extract_band(trace, f: float, dt: float | None = None) -> SpectralSample:
    """Amplitude and phase of a trace at the exact frequency f (THz).

    amplitude = |(2/T) sum_k s[k] exp(-2j pi f k dt)|, phase = arg of the
    sum wrapped to (-pi, pi]. f may fall between grid bins.
    """
    if isinstance(trace, TimeDomainTrace):
        samples, dt = trace.samples, trace.dt
    else:
        samples = np.asarray(trace, dtype=np.float64)
        if dt is None:
            raise ValueError("dt is required for raw sample arrays")
    nyq = 1.0 / (2.0 * dt)
    if not (0.0 < f <= nyq):
        raise ValueError(f"frequency must lie in (0, {nyq}] THz")
    coef = _band_sums(samples[None, :], dt, np.array([float(f)]))[0, 0]
    amp, phase = _amp_phase(np.array(coef), samples.size)
    return SpectralSample(frequency=float(f), amplitude=float(amp), phase=float(phase))


def extract_bands(samples: np.ndarray, dt: float, bands: BandSet):
    """Vectorized extract_band over trailing time axis.

    samples has shape (..., T); returns (amplitude, phase) arrays shaped
    (..., B). Each element equals the scalar extract_band result exactly.
    """
    samples = np.asarray(samples, dtype=np.float64)
    freqs = bands.as_array()
    nyq = 1.0 / (2.0 * dt)
    if np.any(freqs > nyq):
        raise ValueError(f"band frequencies must lie in (0, {nyq}] THz")
    lead = samples.shape[:-1]
    coef = _band_sums(samples.reshape(-1, samples.shape[-1]), dt, freqs)
    amp, phase = _amp_phase(coef, samples.shape[-1])
    return amp.reshape(lead + (freqs.size,)), phase.reshape(lead + (freqs.size,))


def pixelwise_cube(traces, bands: BandSet, dt: float | None = None) -> SpectralCube:
    """Band extraction over an H x W grid of traces.

    traces is either an (H, W, T) array with dt given, or a nested
    sequence of TimeDomainTrace sharing length and dt. Element (i, j, b)
    of the output equals extract_band(traces[i][j], bands[b]) exactly.
    """
    if isinstance(traces, np.ndarray):
        if traces.ndim != 3:
            raise ShapeError("trace grid must have shape (H, W, T)")
        if dt is None:
            raise ValueError("dt is required for raw sample arrays")
        grid = traces
    else:
        rows = [[t for t in row] for row in traces]
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ShapeError("ragged trace grid")
        lengths = {t.samples.size for r in rows for t in r}
        dts = {t.dt for r in rows for t in r}
        if len(lengths) != 1 or len(dts) != 1:
            raise ShapeError("all traces must share T and dt")
        dt = dts.pop()
        grid = np.stack([np.stack([t.samples for t in r]) for r in rows])
    amp, phase = extract_bands(grid, dt, bands)
    return SpectralCube(amplitude=amp, phase=phase, frequencies=bands.frequencies)

"""Subspace-attention restoration network for corrupted projection views.

The single-view network is a five-scale encoder/decoder. The finest scale
takes a feature tensor derived from the Time-max image by a 3x3 input
convolution; each coarser scale also receives three amplitude and three
phase band images (lowest frequencies at the finest of the four, highest
at the coarsest), fused into the feature path by shared-subspace
projection and self-attention. The decoder gates skip and upsampled
features with channel attention and ends in a single-channel head. The
multi-view variant restores three neighboring views with shared weights,
fuses their feature tensors, and runs the same network a second time on
the fused tensor.

Checkpoints are single files: an 8-byte little-endian header length, a
JSON header (format version, tensor index, config, extra metadata), then
the raw little-endian tensor payloads in index order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataMismatchError, MissingInputError, ShapeError

CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int64): "i64",
}
_TAG_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


@dataclass(frozen=True)
class NetworkCfg:
    """Architecture hyperparameters; serializable for checkpoints.

    channels are the per-scale widths, finest first. band_to_scale lists,
    for scales 2..5, the three band indices each scale consumes (both the
    amplitude and the phase image of every listed band).
    """

    channels: tuple = (32, 64, 128, 256, 512)
    subspace_rank: int = 16
    safm_channels: int = 32
    max_tokens: int = 4096
    cam_reduction: int = 4
    band_to_scale: tuple = ((0, 1, 2), (3, 4, 5), (6, 7, 8), (9, 10, 11))
    n_bands: int = 12

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "band_to_scale",
                           tuple(tuple(int(b) for b in g) for g in self.band_to_scale))
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ConfigError("channels must list 5 positive widths")
        if self.subspace_rank < 1:
            raise ConfigError("subspace_rank must be >= 1")
        if self.safm_channels < 1 or self.max_tokens < 1 or self.cam_reduction < 1:
            raise ConfigError("safm_channels, max_tokens, cam_reduction must be >= 1")
        if len(self.band_to_scale) != 4 or any(len(g) != 3 for g in self.band_to_scale):
            raise ConfigError("band_to_scale needs 4 groups of 3 band indices")
        used = sorted(b for g in self.band_to_scale for b in g)
        if used != list(range(self.n_bands)):
            raise ConfigError("band_to_scale must cover every band index exactly once")

    @classmethod
    def full(cls) -> "NetworkCfg":
        return cls()

    @classmethod
    def desk(cls) -> "NetworkCfg":
        """Small widths for CPU-only runs."""
        return cls(channels=(16, 32, 64, 128, 128), subspace_rank=4,
                   safm_channels=16)

    @classmethod
    def preset(cls, name: str) -> "NetworkCfg":
        if name == "full":
            return cls.full()
        if name == "desk":
            return cls.desk()
        raise ConfigError(f"unknown preset {name!r}; choose 'desk' or 'full'")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "subspace_rank": self.subspace_rank,
            "safm_channels": self.safm_channels,
            "max_tokens": self.max_tokens,
            "cam_reduction": self.cam_reduction,
            "band_to_scale": [list(g) for g in self.band_to_scale],
            "n_bands": self.n_bands,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkCfg":
        try:
            return cls(channels=tuple(raw["channels"]),
                       subspace_rank=raw["subspace_rank"],
                       safm_channels=raw["safm_channels"],
                       max_tokens=raw["max_tokens"],
                       cam_reduction=raw["cam_reduction"],
                       band_to_scale=tuple(tuple(g) for g in raw["band_to_scale"]),
                       n_bands=raw["n_bands"])
        except KeyError as exc:
            raise DataMismatchError(f"network config missing key {exc}") from exc


class ConvBlock(nn.Module):
    """Two (conv -> batch norm -> ReLU) stages; spatial size preserved."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1 or kernel < 1:
            raise ConfigError("kernel size must be odd and positive")
        pad = kernel // 2
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel, padding=pad)
        self.norm1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel, padding=pad)
        self.norm2 = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"expected B x {self.conv1.in_channels} x H x W, got {tuple(x.shape)}")
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


def orth_project(basis, x):
    """Project x onto the column space of basis without forming P = V(VtV)^-1 Vt.

    basis is (N, K) or (B, N, K); x is (N, C) or (B, N, C). Solves the
    regularized normal equations (VtV + eps I) y = Vt x and returns V y.
    eps scales with trace(VtV)/K plus a tiny absolute floor, so an
    all-zero basis maps everything to zero instead of failing.
    """
    squeeze = basis.dim() == 2
    if squeeze:
        basis = basis.unsqueeze(0)
        x = x.unsqueeze(0)
    if basis.dim() != 3 or x.dim() != 3 or basis.shape[:2] != x.shape[:2]:
        raise ShapeError("basis and x must share batch and row dimensions")
    k = basis.shape[-1]
    vt = basis.transpose(-2, -1)
    gram = vt @ basis
    trace = gram.diagonal(dim1=-2, dim2=-1).sum(-1)
    eps = trace * (1e-6 / k) + 1e-12
    eye = torch.eye(k, dtype=basis.dtype, device=basis.device)
    y = torch.linalg.solve(gram + eps.view(-1, 1, 1) * eye, vt @ x)
    out = basis @ y
    return out.squeeze(0) if squeeze else out


def safm_attention(basis, max_tokens: int = 4096, scale_name: str = ""):
    """Row-stochastic attention over spatial locations of the shared basis.

    scores[j, i] = <row_i, row_j>; each output row is a softmax over i, so
    rows sum to 1 (uniform 1/N for a zero basis).
    """
    n = basis.shape[-2]
    if n > max_tokens:
        where = f" at {scale_name}" if scale_name else ""
        raise ShapeError(f"attention over {n} tokens{where} exceeds "
                         f"max_tokens={max_tokens}")
    scores = basis @ basis.transpose(-2, -1)
    return torch.softmax(scores, dim=-1)


class SubspaceAttentionFusion(nn.Module):
    """Fuse a scale's amplitude/phase bands into its feature tensor.

    A shared K-column basis is learned from both band stacks; the raw
    bands are projected onto its column space, mixed by self-attention,
    mapped to the feature width by a bias-free-capable 1x1 conv, and
    added to the feature tensor. With all internal weights zero the
    module is exactly the identity on the feature tensor.
    """

    def __init__(self, feature_channels: int, subspace_rank: int,
                 hidden_channels: int, max_tokens: int = 4096,
                 scale_name: str = ""):
        super().__init__()
        self.amp_block = ConvBlock(3, hidden_channels, kernel=1)
        self.phase_block = ConvBlock(3, hidden_channels, kernel=1)
        self.basis_block = ConvBlock(2 * hidden_channels, subspace_rank, kernel=1)
        self.mix = nn.Conv2d(6, feature_channels, 1)
        self.max_tokens = max_tokens
        self.scale_name = scale_name

    def basis(self, amp, phase):
        """Shared basis V, shape (B, H*W, K)."""
        if amp.shape[-2:] != phase.shape[-2:] or amp.shape[0] != phase.shape[0]:
            raise ShapeError("amplitude and phase stacks must share shape")
        fused = self.basis_block(
            torch.cat([self.amp_block(amp), self.phase_block(phase)], dim=1))
        return fused.flatten(2).transpose(1, 2)

    def forward(self, amp, phase, feat):
        if feat.shape[-2:] != amp.shape[-2:]:
            raise ShapeError("feature tensor must share the bands' spatial size")
        v = self.basis(amp, phase)
        beta = safm_attention(v, self.max_tokens, self.scale_name)
        a_flat = amp.flatten(2).transpose(1, 2)
        p_flat = phase.flatten(2).transpose(1, 2)
        s = torch.cat([orth_project(v, a_flat), orth_project(v, p_flat)], dim=2)
        o = beta @ s
        h, w = amp.shape[-2:]
        o_img = o.transpose(1, 2).reshape(o.shape[0], 6, h, w)
        return self.mix(o_img) + feat


class ChannelAttention(nn.Module):
    """Global-pool channel gates over grouped inputs, summed after gating.

    All groups share a channel count; the gate vector is split into one
    slice per group and the gated groups are added, so the output keeps
    a single group's width.
    """

    def __init__(self, group_channels: int, groups: int = 2, reduction: int = 4):
        super().__init__()
        total = group_channels * groups
        mid = max(total // reduction, 1)
        self.squeeze = nn.Conv2d(total, mid, 1)
        self.excite = nn.Conv2d(mid, total, 1)
        self.group_channels = group_channels
        self.groups = groups

    def forward(self, *xs):
        if len(xs) != self.groups:
            raise ShapeError(f"expected {self.groups} feature groups, got {len(xs)}")
        for x in xs:
            if x.shape[1] != self.group_channels or x.shape[-2:] != xs[0].shape[-2:]:
                raise ShapeError("all groups must share channels and spatial size")
        stacked = torch.cat(xs, dim=1)
        pooled = stacked.mean(dim=(2, 3), keepdim=True)
        gates = torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))
        parts = gates.split(self.group_channels, dim=1)
        out = parts[0] * xs[0]
        for g, x in zip(parts[1:], xs[1:]):
            out = out + g * x
        return out


class SARNetCore(nn.Module):
    """Five-scale encoder/decoder operating on a prepared feature tensor.

    forward(x_in, amp, phase) -> (restored 1-channel image, finest-scale
    feature tensor). x_in must already have channels[0] channels (input
    convolutions live in the stage wrappers); amp and phase carry all
    n_bands images at the input resolution and are average-pooled
    internally to each scale.
    """

    def __init__(self, cfg: NetworkCfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.enc_first = ConvBlock(c[0], c[0])
        self.downs = nn.ModuleList(
            [nn.Conv2d(c[i], c[i + 1], 3, stride=2, padding=1) for i in range(4)])
        self.safms = nn.ModuleList(
            [SubspaceAttentionFusion(c[i + 1], cfg.subspace_rank, cfg.safm_channels,
                                     cfg.max_tokens, scale_name=f"scale {i + 2}")
             for i in range(4)])
        self.encs = nn.ModuleList([ConvBlock(c[i + 1], c[i + 1]) for i in range(4)])
        self.ups = nn.ModuleList(
            [nn.Conv2d(c[4 - j], c[3 - j], 1) for j in range(4)])
        self.cams = nn.ModuleList(
            [ChannelAttention(c[3 - j], groups=2, reduction=cfg.cam_reduction)
             for j in range(4)])
        self.decs = nn.ModuleList([ConvBlock(c[3 - j], c[3 - j]) for j in range(4)])
        self.head = nn.Conv2d(c[0], 1, 1)

    def _check_inputs(self, x_in, amp, phase):
        c0 = self.cfg.channels[0]
        nb = self.cfg.n_bands
        if x_in.dim() != 4 or x_in.shape[1] != c0:
            raise ShapeError(f"x_in must be B x {c0} x H x W")
        if amp.shape[1] != nb or phase.shape[1] != nb:
            raise ConfigError(f"band stacks must carry {nb} images each")
        if amp.shape[-2:] != x_in.shape[-2:] or phase.shape[-2:] != x_in.shape[-2:]:
            raise ShapeError("bands must share the input's spatial size")
        h, w = x_in.shape[-2:]
        if h % 16 or w % 16:
            raise ConfigError(f"input size {h}x{w} must be divisible by 16")

    def forward(self, x_in, amp, phase):
        self._check_inputs(x_in, amp, phase)
        amp_lv, phase_lv = amp, phase
        band_amp, band_phase = [], []
        for group in self.cfg.band_to_scale:
            amp_lv = F.avg_pool2d(amp_lv, 2)
            phase_lv = F.avg_pool2d(phase_lv, 2)
            idx = list(group)
            band_amp.append(amp_lv[:, idx])
            band_phase.append(phase_lv[:, idx])

        x = self.enc_first(x_in)
        skips = [x]
        for i in range(4):
            x = self.downs[i](x)
            x = self.safms[i](band_amp[i], band_phase[i], x)
            x = self.encs[i](x)
            skips.append(x)

        x = skips[4]
        for j in range(4):
            skip = skips[3 - j]
            up = F.interpolate(x, size=skip.shape[-2:], mode="bilinear",
                               align_corners=False)
            up = self.ups[j](up)
            x = self.cams[j](skip, up)
            x = self.decs[j](x)
        return self.head(x), x


class SARNet(nn.Module):
    """Single-view restoration: 3x3 input conv on the Time-max image + core."""

    def __init__(self, cfg: NetworkCfg):
        super().__init__()
        self.cfg = cfg
        self.input_conv = nn.Conv2d(1, cfg.channels[0], 3, padding=1)
        self.core = SARNetCore(cfg)

    def forward(self, timemax, amp, phase):
        if timemax.dim() != 4 or timemax.shape[1] != 1:
            raise ShapeError("timemax must be B x 1 x H x W")
        return self.core(self.input_conv(timemax), amp, phase)


class MultiViewFusion(nn.Module):
    """Blend three views' feature tensors: channel attention then 3x3 conv."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.cam = ChannelAttention(channels, groups=3, reduction=reduction)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f_prev, f_cur, f_next):
        return self.conv(self.cam(f_prev, f_cur, f_next))

    def reset_gates(self, blend=(1.0 / 3, 1.0 / 3, 1.0 / 3),
                    gate_scale: float = 0.01):
        """Bias the channel gates toward fixed per-view blend weights.

        Excite biases start at the blend weights' logits (0 and 1
        saturate at +/-27.6) and the squeeze/excite weights are shrunk
        (not zeroed) so the random data-dependent term cannot swamp the
        bias while every gate path keeps a live gradient.
        """
        if len(blend) != self.cam.groups:
            raise ShapeError(
                f"expected {self.cam.groups} blend weights, got {len(blend)}")
        c = self.conv.out_channels
        with torch.no_grad():
            self.cam.squeeze.weight.mul_(gate_scale)
            self.cam.excite.weight.mul_(gate_scale)
            bias = self.cam.excite.bias.view(self.cam.groups, c)
            for row, w in zip(bias, blend):
                row.fill_(math.log(max(w, 1e-12) / max(1.0 - w, 1e-12)))


class SARNetMV(nn.Module):
    """Two-pass multi-view restoration sharing one set of network weights.

    Pass 1 restores views t-1, t, t+1 individually (indices clamp at the
    sequence ends); their feature tensors are fused and pass 2 runs the
    same core on the fused tensor with view t's own bands.

    Training mode needs batch * (H/16) * (W/16) > 1 or batch norm cannot
    form statistics at the coarsest scale; inference mode has no such
    floor.
    """

    def __init__(self, cfg: NetworkCfg):
        super().__init__()
        self.cfg = cfg
        self.sarnet = SARNet(cfg)
        self.fusion = MultiViewFusion(cfg.channels[0], cfg.cam_reduction)

    def forward(self, views, t: int):
        """views: sequence of (timemax, amp, phase) tensor triples."""
        if len(views) < 1:
            raise ValueError("at least one view is required")
        if not 0 <= t < len(views):
            raise ValueError(f"view index {t} outside 0..{len(views) - 1}")
        prev, nxt = max(t - 1, 0), min(t + 1, len(views) - 1)
        # one batched pass over the triple keeps batch norm fed and is
        # three times cheaper than separate forwards
        batch = views[t][0].shape[0]
        tm = torch.cat([views[i][0] for i in (prev, t, nxt)], dim=0)
        amp = torch.cat([views[i][1] for i in (prev, t, nxt)], dim=0)
        phase = torch.cat([views[i][2] for i in (prev, t, nxt)], dim=0)
        _, f = self.sarnet(tm, amp, phase)
        feats = [f[k * batch:(k + 1) * batch] for k in range(3)]
        fused = self.fusion(*feats)
        _, amp_t, phase_t = views[t]
        restored, _ = self.sarnet.core(fused, amp_t, phase_t)
        return restored

    def init_fusion_passthrough(self, scale: float = 1.0, offset: float = 0.0,
                                blend=(1.0 / 3, 1.0 / 3, 1.0 / 3),
                                gate_scale: float = 0.01):
        """Start the fusion as `input_conv(scale * head(blend) + offset)`.

        A freshly attached fusion hands pass 2 a tensor from a different
        distribution than the input features the core was trained on,
        which wrecks an already-trained core. Composing the core's 1x1
        output head with the 3x3 input conv instead makes pass 2 open on
        a gate-weighted blend of the pass-1 restorations (the head is
        linear, so blending features blends restorations; the default
        averages the three views, blend=(0, 1, 0) reproduces the center
        view alone). scale and offset map the restorations back into the
        value range of the images the core was trained on (a restored
        thickness map has a dark background, the raw inputs a bright
        one). Call after the core weights are in place.
        """
        self.fusion.reset_gates(blend=blend, gate_scale=gate_scale)
        w_in = self.sarnet.input_conv.weight  # c0 x 1 x 3 x 3
        b_in = self.sarnet.input_conv.bias
        w_head = self.sarnet.core.head.weight  # 1 x c0 x 1 x 1
        b_head = self.sarnet.core.head.bias
        with torch.no_grad():
            self.fusion.conv.weight.copy_(
                scale * w_in * w_head[0, :, 0, 0].view(1, -1, 1, 1))
            self.fusion.conv.bias.copy_(
                b_in + (scale * b_head[0] + offset) * w_in.sum(dim=(1, 2, 3)))


def _to_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.int64)
    raise ConfigError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path, tensors, config: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a named-tensor container (header length, JSON header, payloads)."""
    index = {}
    payloads = []
    offset = 0
    for name, value in tensors.items():
        arr = _to_array(value)
        tag = _DTYPE_TAGS[arr.dtype]
        data = np.ascontiguousarray(arr).astype(_TAG_DTYPES[tag]).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": tag, "offset": offset}
        payloads.append(data)
        offset += len(data)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "index": index,
        "config": config if config is not None else {},
        "extra": extra if extra is not None else {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a container back: (tensors: name -> ndarray, config, extra)."""
    if not os.path.exists(path):
        raise MissingInputError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataMismatchError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise DataMismatchError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataMismatchError(f"{path}: invalid checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataMismatchError(
            f"{path}: unsupported format version {header.get('format_version')!r}")
    body = raw[8 + header_len:]
    tensors = {}
    for name, entry in header["index"].items():
        dtype = _TAG_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataMismatchError(f"{path}: unknown dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * np.dtype(dtype).itemsize
        if stop > len(body):
            raise DataMismatchError(f"{path}: payload for {name!r} out of bounds")
        tensors[name] = np.frombuffer(body[start:stop], dtype=dtype).reshape(shape).copy()
    return tensors, header["config"], header["extra"]


def model_state(model: nn.Module) -> dict:
    """Parameters and buffers as a name -> tensor mapping."""
    return dict(model.state_dict())


def load_model_state(model: nn.Module, tensors: dict) -> None:
    """Copy container arrays into a model, checking names and shapes."""
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    surplus = sorted(set(tensors) - set(state))
    if missing or surplus:
        raise DataMismatchError(
            f"state mismatch: missing {missing[:3]}, unexpected {surplus[:3]}")
    for name, target in state.items():
        arr = np.asarray(tensors[name])
        if tuple(arr.shape) != tuple(target.shape):
            raise DataMismatchError(
                f"{name}: shape {arr.shape} != expected {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(arr).to(target.dtype))

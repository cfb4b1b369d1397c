"""Toy-scale two-stream encoder, shared stream and three decoders joined by EMI."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .fusion import CdaParams, EmiParams, cda_fuse, emi_fuse, encoder_level_merge
from .gba import GbaParams, gba_forward
from .granularity import DEFAULT_T, depth_masks, resize_masks
from .layers import Conv, named_tensors, replace_tensors
from .ops import upsample_bilinear
from .tensor import ShapeError, Tensor, as_tensor, relu, sigmoid

CHECKPOINT_MAGIC = b"GRANATT1"
GBA_MODES = ("local", "global", "off")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: Tuple[int, int] = (352, 352)
    widths: Tuple[int, ...] = (16, 24, 32, 48, 64)
    common_width: int = 16
    thresholds: int = DEFAULT_T
    seed: int = 42
    gba_mode: str = "local"
    per_region_eca: bool = False
    pooling_variant: str = "III"
    cross_attention: bool = True

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError(f"five encoder stages required, got {len(self.widths)}")
        odd = [w for w in (*self.widths, self.common_width) if w % 2]
        if odd:
            raise ValueError(f"channel widths must be even, got odd widths {odd}")
        if self.gba_mode not in GBA_MODES:
            raise ValueError(f"gba_mode must be one of {GBA_MODES}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def level_sizes(self) -> List[Tuple[int, int]]:
        h, w = self.input_size
        out = []
        for _ in range(5):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            out.append((h, w))
        return out


@dataclass
class NetworkParams:
    enc_rgb: List[Conv]
    enc_depth: List[Conv]
    gba_rgb: List[GbaParams]
    gba_depth: List[GbaParams]
    cda_enc: List[CdaParams]
    merge: List[Conv]  # levels 2..5
    rfb_rgb: List[Conv]
    rfb_depth: List[Conv]
    rfb_shared: List[Conv]
    dec_rgb: List[Conv]  # levels 1..4, fed from the level above
    dec_depth: List[Conv]
    dec_shared: List[Conv]
    emi: List[EmiParams]
    cda_skip: List[CdaParams]
    head_rgb: List[Conv]
    head_depth: List[Conv]
    head_shared: List[Conv]


@dataclass
class ForwardOutputs:
    maps: Dict[Tuple[str, int], Tensor]
    features: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def final(self) -> Tensor:
        return self.maps[("S", 1)]


def build_params(cfg: NetworkConfig) -> NetworkParams:
    rng = np.random.default_rng(cfg.seed)
    w = cfg.widths
    c = cfg.common_width
    regions = cfg.thresholds + 1

    enc_rgb, enc_depth, gba_rgb, gba_depth = [], [], [], []
    cin_r, cin_d = 3, 1
    for wl in w:
        enc_rgb.append(Conv.init(rng, cin_r, wl, 3, stride=2))
        enc_depth.append(Conv.init(rng, cin_d, wl, 3, stride=2))
        gba_rgb.append(GbaParams.init(wl, rng, regions, cfg.per_region_eca, cfg.pooling_variant))
        gba_depth.append(GbaParams.init(wl, rng, regions, cfg.per_region_eca, cfg.pooling_variant))
        cin_r = cin_d = wl
    return NetworkParams(
        enc_rgb=enc_rgb,
        enc_depth=enc_depth,
        gba_rgb=gba_rgb,
        gba_depth=gba_depth,
        cda_enc=[CdaParams.init(rng, wl) for wl in w],
        merge=[Conv.init(rng, w[l] // 2 + w[l - 1] // 2, w[l] // 2, 3) for l in range(1, 5)],
        rfb_rgb=[Conv.init(rng, wl, c, 1) for wl in w],
        rfb_depth=[Conv.init(rng, wl, c, 1) for wl in w],
        rfb_shared=[Conv.init(rng, wl // 2, c, 1) for wl in w],
        dec_rgb=[Conv.init(rng, c, c, 3) for _ in range(4)],
        dec_depth=[Conv.init(rng, c, c, 3) for _ in range(4)],
        dec_shared=[Conv.init(rng, c // 2, c, 3) for _ in range(4)],
        emi=[EmiParams.init(rng, c) for _ in range(5)],
        cda_skip=[CdaParams.init(rng, c) for _ in range(5)],
        head_rgb=[Conv.init(rng, c, 1, 1) for _ in range(5)],
        head_depth=[Conv.init(rng, c, 1, 1) for _ in range(5)],
        head_shared=[Conv.init(rng, c // 2, 1, 1) for _ in range(5)],
    )


def _as_batch(x, channels: int, name: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None]) if not x.requires_grad else x.reshape((1, *x.shape))
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{name}: expected {channels} x H x W (or N x {channels} x H x W), got {x.shape}")
    return x


class Network:
    """Parameters plus a pure forward function; instances are not mutated by ``forward``."""

    def __init__(self, config: NetworkConfig, params: Optional[NetworkParams] = None):
        self.config = config
        self.params = params if params is not None else build_params(config)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        return named_tensors(self.params)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def with_parameters(self, mapping: Dict[str, Tensor]) -> "Network":
        unknown = set(mapping) - set(self.named_parameters())
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)[:5]}")
        return Network(self.config, replace_tensors(self.params, mapping))

    # -- forward --------------------------------------------------------------

    def masks_for(self, depth) -> np.ndarray:
        """Full-resolution granularity masks (N, R, H, W) for a depth batch, padded with empty regions."""
        d = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
        if d.ndim == 3:
            d = d[None]
        regions = self.config.thresholds + 1
        out = np.zeros((d.shape[0], regions) + d.shape[2:])
        for i, img in enumerate(d):
            m, _ = depth_masks(np.clip(img[0], 0.0, 1.0), self.config.thresholds)
            out[i, : len(m)] = m
        return out

    def forward(self, rgb, depth, masks=None, keep_features: bool = False) -> ForwardOutputs:
        cfg, p = self.config, self.params
        rgb = _as_batch(rgb, 3, "rgb")
        depth = _as_batch(depth, 1, "depth")
        h, w = cfg.input_size
        if rgb.shape[2:] != (h, w) or depth.shape[2:] != (h, w) or rgb.shape[0] != depth.shape[0]:
            raise ShapeError(f"inputs {rgb.shape} / {depth.shape} do not match configured resolution {(h, w)}")
        n = rgb.shape[0]
        if cfg.gba_mode == "global":
            masks = np.ones((1, h, w))
        elif masks is None:
            masks = self.masks_for(depth)
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape[-2:] != (h, w):
            raise ShapeError(f"masks spatial size {masks.shape[-2:]} != input {(h, w)}")
        if masks.ndim == 4 and masks.shape[0] not in (1, n):
            raise ShapeError(f"mask batch {masks.shape[0]} != input batch {n}")

        feats: Dict[str, Tensor] = {}
        xr, xd = rgb, depth
        r_rgb, r_depth, r_shared, sizes = [], [], [], []
        shared = None
        for lvl in range(5):
            xr = relu(p.enc_rgb[lvl](xr))
            xd = relu(p.enc_depth[lvl](xd))
            size = xr.shape[2:]
            sizes.append(size)
            if cfg.gba_mode != "off":
                m = resize_masks(masks, *size)
                xr = gba_forward(xr, m, p.gba_rgb[lvl])
                xd = gba_forward(xd, m, p.gba_depth[lvl])
            fused = cda_fuse(xr, xd, p.cda_enc[lvl], cross=cfg.cross_attention)
            shared = encoder_level_merge(fused, shared, p.merge[lvl - 1] if lvl else None)
            r_rgb.append(p.rfb_rgb[lvl](xr))
            r_depth.append(p.rfb_depth[lvl](xd))
            r_shared.append(p.rfb_shared[lvl](shared))
            if keep_features:
                feats[f"enc_rgb{lvl + 1}"] = xr
                feats[f"enc_depth{lvl + 1}"] = xd
                feats[f"enc_shared{lvl + 1}"] = shared

        maps: Dict[Tuple[str, int], Tensor] = {}
        d_r = d_d = o_s = None
        for lvl in range(4, -1, -1):
            size = sizes[lvl]
            if lvl == 4:
                d_r, d_d, f_h = r_rgb[4], r_depth[4], r_shared[4]
            else:
                d_r = relu(p.dec_rgb[lvl](upsample_bilinear(d_r, *size))) + r_rgb[lvl]
                d_d = relu(p.dec_depth[lvl](upsample_bilinear(d_d, *size))) + r_depth[lvl]
                f_h = relu(p.dec_shared[lvl](upsample_bilinear(o_s, *size)))
            f_shared = emi_fuse(d_r, d_d, f_h, p.emi[lvl])
            o_s = cda_fuse(f_shared, r_shared[lvl], p.cda_skip[lvl], cross=cfg.cross_attention)
            for branch, feat, head in (("R", d_r, p.head_rgb), ("D", d_d, p.head_depth), ("S", o_s, p.head_shared)):
                maps[(branch, lvl + 1)] = upsample_bilinear(sigmoid(head[lvl](feat)), h, w)
            if keep_features:
                feats[f"dec_rgb{lvl + 1}"] = d_r
                feats[f"dec_depth{lvl + 1}"] = d_d
                feats[f"dec_shared{lvl + 1}"] = o_s
        return ForwardOutputs(dict(sorted(maps.items())), feats)

    __call__ = forward

    # -- checkpoints ----------------------------------------------------------

    def save(self, path) -> None:
        named = self.named_parameters()
        header = {
            "format": "GRANATT1",
            "version": __version__,
            "config": self.config.to_json(),
            "parameters": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for t in named.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Network":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: missing GRANATT1 magic")
        try:
            (hlen,) = struct.unpack("<Q", raw[8:16])
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
            cfg = NetworkConfig.from_json(header["config"])
        except (struct.error, ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        net = cls(cfg)
        expected = net.named_parameters()
        offset = 16 + hlen
        mapping = {}
        for entry in header["parameters"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected or expected[name].shape != shape:
                raise CheckpointError(f"{path}: parameter {name} {shape} does not fit the configured network")
            count = int(np.prod(shape))
            chunk = raw[offset:offset + 8 * count]
            if len(chunk) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for {name}")
            mapping[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy(), requires_grad=True)
            offset += 8 * count
        if set(mapping) != set(expected) or offset != len(raw):
            raise CheckpointError(f"{path}: parameter set or payload size mismatch")
        return net.with_parameters(mapping)


class CheckpointError(ValueError):
    pass


def build_network(config: Optional[NetworkConfig] = None) -> Network:
    return Network(config or NetworkConfig())


def network_forward(net: Network, rgb, depth, masks=None) -> ForwardOutputs:
    return net.forward(rgb, depth, masks)

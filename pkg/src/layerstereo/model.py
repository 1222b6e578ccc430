"""Dual-branch stereo conversion network: implicit disparity, layered disparity
warping and context fusion."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import STBlock
from .warp import (
    blend_terms,
    build_shift_stack,
    compose_layers,
    compose_layers_alt,
    median_blur3,
    warp_layers,
)

# Appendix context encoder: (in, out, stride, groups); layers from the fifth
# convolution on see the fourth layer's output concatenated in per group.
CONTEXT_LAYERS = (
    (3, 64, 1, 1),
    (64, 64, 2, 1),
    (64, 128, 1, 1),
    (128, 256, 1, 1),
    (256, 384, 1, 1),
    (640, 512, 1, 2),
    (768, 384, 1, 4),
    (640, 256, 1, 8),
)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    shift_range: tuple = (-12, 12)
    d_lay: int = 7
    c_z: int = 64
    heads: int = 2
    patch: int = 3
    patch_stride: int = 2
    window: int = 4
    temporal_stride: int = 2
    max_frames: int = 8
    disp_widths: tuple = (32, 64)
    context_width: float = 1.0
    feat: int = 64
    tex: int = 32
    disp_scale: float = 1.0
    composition: str = "select"
    use_attention: bool = True
    use_layered: bool = True
    use_fusion: bool = True
    zero_init_heads: bool = True

    def __post_init__(self):
        self.shift_range = tuple(int(v) for v in self.shift_range)
        self.disp_widths = tuple(int(v) for v in self.disp_widths)
        if self.shift_range[0] > self.shift_range[1]:
            raise ModelError(f"invalid shift range {self.shift_range}")
        if self.d_lay < 1:
            raise ModelError("d_lay must be >= 1")
        if self.composition not in ("select", "signed"):
            raise ModelError(f"unknown composition {self.composition!r}")

    @property
    def shifts(self):
        return list(range(self.shift_range[0], self.shift_range[1] + 1))

    @property
    def d_impl(self):
        return len(self.shifts)

    def context_channels(self):
        """Per-layer output widths of the context encoder."""
        return [self._scale(out) for _, out, _, _ in CONTEXT_LAYERS]

    def _scale(self, c):
        return max(1, int(round(c * self.context_width)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self):
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class NetworkOutputs:
    aux_right: torch.Tensor        # (B, T, C, H, W), implicit-disparity reconstruction
    layered_right: torch.Tensor    # layered composition (holes are 0)
    final_right: torch.Tensor      # context-fused output
    implicit_probs: torch.Tensor   # (B, T, D_impl, H, W)
    layered_disp: Optional[torch.Tensor]  # (B, T, D_lay, H, W) in pixels
    warped: Optional[torch.Tensor] = None  # (B, D_lay, T, C, H, W)
    masks: Optional[torch.Tensor] = None   # (B, D_lay, T, 1, H, W)


def conv_relu(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class ConvDisparityEncoder(nn.Module):
    """Small strided encoder returning features at 1/2 and 1/4 resolution."""

    def __init__(self, widths=(32, 64)):
        super().__init__()
        w2, w4 = widths
        self.channels = (w2, w4)
        self.to_half = nn.Sequential(conv_relu(3, w2, 2), conv_relu(w2, w2))
        self.to_quarter = nn.Sequential(conv_relu(w2, w4, 2), conv_relu(w4, w4))

    def forward(self, x):
        f2 = self.to_half(x)
        return f2, self.to_quarter(f2)


class ContextEncoder(nn.Module):
    """Convolution stack producing 1/2-resolution semantic features."""

    def __init__(self, width=1.0):
        super().__init__()
        scale = lambda c: max(1, int(round(c * width)))
        self.layers = nn.ModuleList()
        self.groups = []
        prev = 3
        skip = None
        for i, (cin, cout, stride, groups) in enumerate(CONTEXT_LAYERS):
            cin = 3 if i == 0 else (prev if i < 5 else prev + skip)
            cout = scale(cout)
            self.layers.append(nn.Conv2d(cin, cout, 3, stride, 1, groups=groups))
            self.groups.append(groups)
            if i == 3:
                skip = cout
            prev = cout
        self.out_channels = prev

    def forward(self, x):
        n, _, h, w = x.shape
        out = x
        x0 = None
        for i, (conv, g) in enumerate(zip(self.layers, self.groups)):
            if i >= 5:
                hh, ww = out.shape[-2:]
                a = x0.reshape(n, g, -1, hh, ww)
                b = out.reshape(n, g, -1, hh, ww)
                out = torch.cat([a, b], dim=2).reshape(n, -1, hh, ww)
            out = F.leaky_relu(conv(out), 0.2)
            if i == 3:
                x0 = out
        return out


class Identity2(nn.Module):
    def forward(self, x, context=None):
        return x


def _per_frame(fn, x):
    b, t = x.shape[:2]
    y = fn(x.reshape(b * t, *x.shape[2:]))
    if isinstance(y, tuple):
        return tuple(v.reshape(b, t, *v.shape[1:]) for v in y)
    return y.reshape(b, t, *y.shape[1:])


class StereoNet(nn.Module):
    """Predicts a right-view clip from a left-view clip.

    Input and outputs are ``(B, T, 3, H, W)`` tensors in [0, 1].
    """

    def __init__(self, config=None, disparity_backbone=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        blk = dict(c_z=cfg.c_z, heads=cfg.heads, patch=cfg.patch, stride=cfg.patch_stride,
                   window=cfg.window, temporal_stride=cfg.temporal_stride, max_frames=cfg.max_frames)

        self.disparity_encoder = disparity_backbone or ConvDisparityEncoder(cfg.disp_widths)
        c2, c4 = self.disparity_encoder.channels
        self.context_encoder = ContextEncoder(cfg.context_width)
        cc = self.context_encoder.out_channels

        def block(ch, **kw):
            return STBlock(ch, **blk, **kw) if cfg.use_attention else Identity2()

        # implicit disparity
        self.attn_half = block(c2)
        self.attn_quarter = block(c4)
        self.fusion = nn.Sequential(conv_relu(c2 + c4, cfg.feat), conv_relu(cfg.feat, cfg.feat))
        self.prob_head = nn.Conv2d(cfg.feat, cfg.d_impl, 3, 1, 1)

        # layered disparity
        vin = cfg.d_impl * 3
        self.refine = nn.Sequential(conv_relu(vin, cfg.feat, 2), conv_relu(cfg.feat, cfg.feat),
                                    conv_relu(cfg.feat, cfg.feat))
        self.cross = block(cfg.feat, kv_channels=cc)
        self.layer_up = nn.Sequential(nn.ConvTranspose2d(cfg.feat, cfg.tex, 4, 2, 1), nn.ReLU(inplace=True),
                                      conv_relu(cfg.tex, cfg.tex), conv_relu(cfg.tex, cfg.tex))
        self.disp_head = nn.Conv2d(cfg.tex, cfg.d_lay, 3, 1, 1)

        # context fusion
        self.fuse_in = nn.Sequential(nn.Conv2d(cc + cfg.feat, cfg.feat, 1), nn.ReLU(inplace=True))
        self.fuse_attn = block(cfg.feat)
        self.texture = nn.Sequential(nn.ConvTranspose2d(cfg.feat, cfg.tex, 4, 2, 1), nn.ReLU(inplace=True),
                                     conv_relu(cfg.tex, cfg.tex), conv_relu(cfg.tex, cfg.tex),
                                     conv_relu(cfg.tex, cfg.tex))
        self.residual = nn.Sequential(conv_relu(cfg.tex + 3, cfg.tex), conv_relu(cfg.tex, cfg.tex))
        self.residual_head = nn.Conv2d(cfg.tex, 3, 3, 1, 1)

        if cfg.zero_init_heads:
            for head in (self.prob_head, self.disp_head, self.residual_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    # -- stages -------------------------------------------------------------------------

    def disparity_branch(self, x):
        """(B, T, 3, H, W) -> features at 1/2 and 1/4 scale."""
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ModelError(f"frame size {h}x{w} must be divisible by 4")
        return _per_frame(self.disparity_encoder, x)

    def context_branch(self, x):
        return _per_frame(self.context_encoder, x)

    def implicit_head(self, f2, f4, size):
        """Per-pixel distribution over shifts at full resolution, (B, T, D, H, W)."""
        f2 = self.attn_half(f2)
        f4 = self.attn_quarter(f4)
        up = _per_frame(lambda v: F.interpolate(v, size=f2.shape[-2:], mode="bilinear", align_corners=False), f4)
        fused = _per_frame(self.fusion, torch.cat([f2, up], dim=2))
        probs = torch.softmax(_per_frame(self.prob_head, fused), dim=2)
        return _per_frame(lambda v: F.interpolate(v, size=size, mode="bilinear", align_corners=False), probs)

    def layered_trunk(self, v_terms, context):
        b, t = v_terms.shape[:2]
        v = v_terms.reshape(b, t, -1, *v_terms.shape[-2:])
        feats = _per_frame(self.refine, v)
        return self.cross(feats, context)

    def layered_head(self, trunk):
        w = trunk.shape[-1] * 2
        up = _per_frame(self.layer_up, trunk)
        disp = _per_frame(self.disp_head, up) * self.config.disp_scale
        return disp.clamp(-w, w)

    def compose(self, images, masks):
        if self.config.composition == "signed":
            return compose_layers_alt(images, masks)
        return compose_layers(images, masks)

    def context_fusion(self, context, trunk, warped):
        fused = _per_frame(self.fuse_in, torch.cat([context, trunk], dim=2))
        fused = self.fuse_attn(fused)
        tex = _per_frame(self.texture, fused)
        blurred = median_blur3(warped)
        res = _per_frame(self.residual, torch.cat([blurred, tex], dim=2))
        return blurred + _per_frame(self.residual_head, res)

    def forward(self, left):
        cfg = self.config
        if left.dim() != 5 or left.shape[2] != 3:
            raise ModelError(f"expected (B, T, 3, H, W) input, got {tuple(left.shape)}")
        if left.shape[1] > cfg.max_frames:
            raise ModelError(f"clip of {left.shape[1]} frames exceeds max_frames={cfg.max_frames}")
        size = left.shape[-2:]
        x = left * 2 - 1
        f2, f4 = self.disparity_branch(x)
        context = self.context_branch(x)

        probs = self.implicit_head(f2, f4, size)
        stack = build_shift_stack(left, cfg.shifts)  # (B, T, D, C, H, W)
        v_terms = blend_terms(stack, probs)
        aux = v_terms.sum(dim=2)

        trunk = self.layered_trunk(v_terms, context)
        disp = warped = masks = None
        if cfg.use_layered:
            disp = self.layered_head(trunk)
            warped, masks = warp_layers(left, disp)
            layered = self.compose(warped, masks)
        else:
            layered = aux
        if cfg.use_fusion:
            final = self.context_fusion(context, trunk, layered)
        else:
            final = layered
        return NetworkOutputs(aux, layered, final, probs, disp, warped, masks)


# --------------------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, optimizer=None, step=0, extra=None):
    payload = {
        "config": model.config.to_dict(),
        "model": model.state_dict(),
        "step": int(step),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, config=None, map_location="cpu"):
    """Rebuild a model from a checkpoint; returns ``(model, payload)``.

    If ``config`` is given it must match the stored configuration.
    """
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if "config" not in payload or "model" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    stored = ModelConfig.from_dict(payload["config"])
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if stored.to_dict().get(k) != v)
        raise CheckpointError(f"checkpoint config differs in: {', '.join(diff)}")
    model = StereoNet(stored)
    model.load_state_dict(payload["model"])
    return model, payload

"""Differentiable horizontal warping, shifted-copy blending and layer composition.

Tensors follow ``(..., C, H, W)`` for images and ``(..., H, W)`` for per-pixel
maps. Positive disparity ``d`` means an output pixel ``(i, j)`` samples the
source at ``(i, j + d)``; a shifted copy with shift ``s`` holds ``I[i, j - s]``,
so shift ``s`` reproduces disparity ``-s``.
"""
from __future__ import annotations

import numpy as np
import torch

from . import kernels


class WarpError(ValueError):
    pass


def default_shifts(radius=12):
    return list(range(-radius, radius + 1))


def shifts_to_disparity(shifts):
    """Disparity (in the warp convention) represented by each shift channel."""
    return [-int(s) for s in shifts]


def _check_shifts(shifts, width):
    shifts = [int(s) for s in shifts]
    if not shifts:
        raise WarpError("shift list is empty")
    if any(b <= a for a, b in zip(shifts, shifts[1:])):
        raise WarpError("shifts must be strictly increasing")
    if any(abs(s) >= width for s in shifts):
        raise WarpError(f"|shift| must be smaller than the width {width}")
    return shifts


def build_shift_stack(x, shifts):
    """Stack of horizontally shifted copies ``I^s[i, j] = I[i, j - s]``.

    ``x`` is ``(..., C, H, W)``; the result is ``(..., D, C, H, W)``. Columns
    shifted in from outside the frame replicate the border.
    """
    w = x.shape[-1]
    shifts = _check_shifts(shifts, w)
    cols = torch.arange(w, device=x.device)
    copies = []
    for s in shifts:
        idx = (cols - s).clamp(0, w - 1)
        copies.append(x.index_select(-1, idx))
    return torch.stack(copies, dim=-4)


def check_probabilities(probs, dim=-3, atol=1e-5):
    if torch.any(probs < 0):
        raise WarpError("probabilities must be non-negative")
    err = (probs.sum(dim=dim) - 1).abs().max()
    if err > atol:
        raise WarpError(f"probabilities do not sum to one (max deviation {float(err):.2e})")


def blend_terms(stack, probs):
    """Per-shift weighted copies ``V^s = I^s * p^s`` with shape ``(..., D, C, H, W)``."""
    return stack * probs.unsqueeze(-3)


def implicit_blend(stack, probs, check=True):
    """Convex blend of shifted copies, ``sum_s p^s I^s``.

    ``stack`` is ``(..., D, C, H, W)`` and ``probs`` ``(..., D, H, W)``.
    """
    if stack.shape[:-3] != probs.shape[:-2] or stack.shape[-2:] != probs.shape[-2:]:
        raise WarpError(f"stack {tuple(stack.shape)} and probs {tuple(probs.shape)} disagree")
    if check:
        check_probabilities(probs)
    return blend_terms(stack, probs).sum(dim=-4)


def warp_horizontal(x, disparity):
    """Bilinear horizontal warp ``out[i, j] = x[i, j + disparity[i, j]]``.

    Returns ``(warped, valid)`` where ``valid`` is 1 exactly where the sample
    column lies in ``[0, W - 1]``; taps outside the row contribute zero.
    Gradients flow to both ``x`` and ``disparity`` (the disparity gradient is
    the bilinear sub-gradient, i.e. the difference of the two taps).

    numpy inputs ``(T, H, W, C)`` / ``(T, H, W)`` take the compiled kernel path
    and return numpy arrays.
    """
    if isinstance(x, np.ndarray):
        disparity = np.asarray(disparity, dtype=np.float64)
        if not np.all(np.isfinite(disparity)):
            raise WarpError("disparity contains non-finite values")
        if disparity.shape != x.shape[:-1]:
            raise WarpError(f"disparity {disparity.shape} does not match image {x.shape}")
        out, valid = kernels.hwarp(x, disparity)
        return out, valid
    if disparity.shape != x.shape[:-3] + x.shape[-2:]:
        raise WarpError(f"disparity {tuple(disparity.shape)} does not match image {tuple(x.shape)}")
    if not torch.isfinite(disparity).all():
        raise WarpError("disparity contains non-finite values")
    w = x.shape[-1]
    cols = torch.arange(w, device=x.device, dtype=disparity.dtype)
    sx = cols + disparity
    valid = ((sx >= 0) & (sx <= w - 1)).to(x.dtype)
    x0 = torch.floor(sx)
    frac = (sx - x0).unsqueeze(-3)
    x0 = x0.long()
    x1 = x0 + 1
    in0 = ((x0 >= 0) & (x0 < w)).unsqueeze(-3).to(x.dtype)
    in1 = ((x1 >= 0) & (x1 < w)).unsqueeze(-3).to(x.dtype)
    i0 = x0.clamp(0, w - 1).unsqueeze(-3).expand(*x.shape)
    i1 = x1.clamp(0, w - 1).unsqueeze(-3).expand(*x.shape)
    a = torch.gather(x, -1, i0) * in0
    b = torch.gather(x, -1, i1) * in1
    out = (1 - frac) * a + frac * b
    return out, valid


def warp_layers(x, disparities):
    """Warp one image by a stack of disparity maps.

    ``x`` is ``(B, T, C, H, W)``, ``disparities`` ``(B, T, D, H, W)``. Returns the
    Algorithm-1 layout: images ``(B, D, T, C, H, W)`` and masks ``(B, D, T, 1, H, W)``.
    """
    d = disparities.shape[2]
    src = x.unsqueeze(1).expand(-1, d, -1, -1, -1, -1)
    disp = disparities.permute(0, 2, 1, 3, 4)
    images, valid = warp_horizontal(src, disp)
    return images, valid.unsqueeze(-3)


def _check_masks(masks):
    if not torch.all((masks == 0) | (masks == 1)):
        raise WarpError("warp masks must be 0/1 valued")


def layer_selectors(masks):
    """Per-layer selector masks for layered composition.

    ``masks`` has the layer axis at dim 1. Layer 0 keeps its own mask; for
    each later layer ``i``::

        total[i]    = warped[i] OR selected[i-1]
        selected[i] = (NOT total[i]) AND warped[i-1]
    """
    _check_masks(masks)
    n = masks.shape[1]
    selected = torch.zeros_like(masks)
    total = torch.zeros_like(masks)
    for i in range(n):
        if i == 0:
            selected[:, i] = masks[:, i]
            total[:, i] = masks[:, i]
        else:
            total[:, i] = torch.maximum(masks[:, i], selected[:, i - 1])
            selected[:, i] = (1 - total[:, i]) * masks[:, i - 1]
    return selected


def compose_layers(images, masks):
    """Select pixels from layer-warped images by ``layer_selectors``; sums over layers."""
    if images.shape[1] < 1:
        raise WarpError("need at least one layer")
    sel = layer_selectors(masks)
    return (sel * images).sum(dim=1)


def layer_selectors_signed(masks):
    """Signed selectors in {-1, 0, 1} letting later layers cancel earlier picks.

    ``selected[i] = total[i] - warped[i-1]`` with ``total`` as in
    ``layer_selectors`` (a non-zero previous selector counts as set).
    """
    _check_masks(masks)
    n = masks.shape[1]
    selected = torch.zeros_like(masks)
    total = torch.zeros_like(masks)
    for i in range(n):
        if i == 0:
            selected[:, i] = masks[:, i]
            total[:, i] = masks[:, i]
        else:
            total[:, i] = ((masks[:, i] != 0) | (selected[:, i - 1] != 0)).to(masks.dtype)
            selected[:, i] = total[:, i] - masks[:, i - 1]
    return selected


def compose_layers_alt(images, masks):
    if images.shape[1] < 1:
        raise WarpError("need at least one layer")
    sel = layer_selectors_signed(masks)
    return (sel * images).sum(dim=1)


def median_blur3(x):
    """3x3 median over the last two axes with edge replication.

    Accepts torch tensors ``(..., H, W)`` or numpy arrays ``(T, H, W, C)``.
    """
    if isinstance(x, np.ndarray):
        t, h, w, c = x.shape
        planes = np.moveaxis(x, -1, 1).reshape(t * c, h, w)
        out = kernels.median3(planes).reshape(t, c, h, w)
        return np.moveaxis(out, 1, -1)
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise WarpError("median blur needs H, W >= 3")
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, h, w)
    padded = torch.nn.functional.pad(flat, (1, 1, 1, 1), mode="replicate")
    patches = torch.nn.functional.unfold(padded, kernel_size=3)  # (N, 9, H*W)
    med = patches.median(dim=1).values
    return med.reshape(*lead, h, w)

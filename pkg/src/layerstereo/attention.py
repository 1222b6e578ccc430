"""Windowed spatial-temporal attention over overlapping patch tokens."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class AttentionError(ValueError):
    pass


def split_padding(patch, stride):
    """Zero padding per side used by soft split: ``(patch - stride + 1) // 2``."""
    return tuple((k - s + 1) // 2 for k, s in zip(patch, stride))


def token_grid(size, patch, stride):
    """Token grid ``(M, N)`` produced by soft split on a ``size`` feature map."""
    pad = split_padding(patch, stride)
    return tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(size, pad, patch, stride))


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


class SoftSplit(nn.Module):
    """Overlapping patch extraction followed by a linear projection to ``c_z``."""

    def __init__(self, in_channels, c_z, patch=3, stride=2):
        super().__init__()
        self.patch = _pair(patch)
        self.stride = _pair(stride)
        if min(self.stride) <= 0:
            raise AttentionError("patch stride must be positive")
        if any(k < s for k, s in zip(self.patch, self.stride)):
            raise AttentionError("patch size must be at least the stride")
        self.padding = split_padding(self.patch, self.stride)
        self.in_channels = in_channels
        self.embedding = nn.Linear(in_channels * self.patch[0] * self.patch[1], c_z)

    def forward(self, x):
        """(N, C, H, W) -> (N, M, N_w, C_z) tokens."""
        m, n = token_grid(x.shape[-2:], self.patch, self.stride)
        cols = F.unfold(x, self.patch, padding=self.padding, stride=self.stride)
        tokens = self.embedding(cols.transpose(1, 2))
        return tokens.reshape(x.shape[0], m, n, -1)


class SoftComposition(nn.Module):
    """Inverse of ``SoftSplit``: project tokens back to patches, scatter-add, and
    divide by the per-pixel patch coverage."""

    def __init__(self, out_channels, c_z, patch=3, stride=2):
        super().__init__()
        self.patch = _pair(patch)
        self.stride = _pair(stride)
        if min(self.stride) <= 0:
            raise AttentionError("patch stride must be positive")
        self.padding = split_padding(self.patch, self.stride)
        self.out_channels = out_channels
        self.embedding = nn.Linear(c_z, out_channels * self.patch[0] * self.patch[1])

    def coverage(self, size, device=None, dtype=None):
        ones = torch.ones(1, 1, *size, device=device, dtype=dtype)
        cols = F.unfold(ones, self.patch, padding=self.padding, stride=self.stride)
        return F.fold(cols, size, self.patch, padding=self.padding, stride=self.stride)

    def forward(self, tokens, size):
        """(N, M, N_w, C_z) tokens -> (N, C, H, W) with ``size == (H, W)``."""
        size = tuple(size)
        if tuple(tokens.shape[1:3]) != token_grid(size, self.patch, self.stride):
            raise AttentionError(f"token grid {tuple(tokens.shape[1:3])} inconsistent with target {size}")
        count = self.coverage(size, tokens.device, tokens.dtype)
        if torch.any(count == 0):
            raise AttentionError(f"patch geometry leaves pixels of {size} uncovered")
        cols = self.embedding(tokens.flatten(1, 2)).transpose(1, 2)
        out = F.fold(cols, size, self.patch, padding=self.padding, stride=self.stride)
        return out / count


def window_partition(z, window):
    """(B, T, M, N, C) -> ((B, T, m, n, h, w, C), valid) padding the grid to a
    multiple of the window; ``valid`` (m, n, h, w) flags real tokens."""
    wh, ww = _pair(window)
    b, t, m_tok, n_tok, c = z.shape
    ph = (-m_tok) % wh
    pw = (-n_tok) % ww
    if ph or pw:
        z = F.pad(z, (0, 0, 0, pw, 0, ph))
    m, n = (m_tok + ph) // wh, (n_tok + pw) // ww
    windows = z.reshape(b, t, m, wh, n, ww, c).permute(0, 1, 2, 4, 3, 5, 6)
    valid = torch.zeros(m * wh, n * ww, dtype=torch.bool, device=z.device)
    valid[:m_tok, :n_tok] = True
    valid = valid.reshape(m, wh, n, ww).permute(0, 2, 1, 3)
    return windows.contiguous(), valid


def window_merge(windows, grid):
    """Inverse of ``window_partition``; crops padding back to ``grid = (M, N)``."""
    b, t, m, n, wh, ww, c = windows.shape
    z = windows.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, t, m * wh, n * ww, c)
    return z[:, :, : grid[0], : grid[1]]


class STAttention(nn.Module):
    """Multi-head attention inside each spatial window, across frames.

    Queries come from every frame of ``z_q``; keys and values from frames
    ``0, s, 2s, ...`` of ``z_kv`` (``z_q`` for self-attention). Learned position
    embeddings (token slot within a window plus frame index) are added to the
    query and key inputs.
    """

    def __init__(self, c_z, heads=2, temporal_stride=2, window=(4, 4), max_frames=8):
        super().__init__()
        if c_z % heads:
            raise AttentionError(f"head count {heads} does not divide token width {c_z}")
        if temporal_stride < 1:
            raise AttentionError("temporal stride must be >= 1")
        self.c_z = c_z
        self.heads = heads
        self.temporal_stride = temporal_stride
        self.window = _pair(window)
        self.max_frames = max_frames
        self.q = nn.Linear(c_z, c_z)
        self.k = nn.Linear(c_z, c_z)
        self.v = nn.Linear(c_z, c_z)
        self.proj = nn.Linear(c_z, c_z)
        self.pos_embed = nn.Parameter(torch.zeros(self.window[0] * self.window[1], c_z))
        self.frame_embed = nn.Parameter(torch.zeros(max_frames, c_z))

    def _positions(self, t, device, dtype):
        if t > self.max_frames:
            raise AttentionError(f"{t} frames exceed the configured maximum {self.max_frames}")
        wh, ww = self.window
        pos = self.pos_embed.reshape(1, wh, ww, self.c_z)
        frames = self.frame_embed[:t].reshape(t, 1, 1, self.c_z)
        return (pos + frames).reshape(1, t, 1, 1, wh, ww, self.c_z).to(device=device, dtype=dtype)

    def forward(self, z_q, z_kv=None, key_valid=None, frame_mask=None, return_weights=False):
        """``z_q``/``z_kv``: (B, T, m, n, h, w, C). ``key_valid`` (m, n, h, w) marks
        real (unpadded) tokens; ``frame_mask`` (T,) optionally removes key frames
        before striding. Returns a tensor shaped like ``z_q``."""
        if z_kv is None:
            z_kv = z_q
        if z_kv.shape != z_q.shape:
            raise AttentionError(f"query {tuple(z_q.shape)} and key/value {tuple(z_kv.shape)} shapes differ")
        b, t, m, n, wh, ww, c = z_q.shape
        if (wh, ww) != self.window or c != self.c_z:
            raise AttentionError("window grid does not match the attention geometry")
        pos = self._positions(t, z_q.device, z_q.dtype)
        frames = torch.arange(0, t, self.temporal_stride, device=z_q.device)
        q = self.q(z_q + pos)
        k = self.k((z_kv + pos)[:, frames])
        v = self.v(z_kv[:, frames])
        tk = frames.numel()

        dh = c // self.heads

        def heads(x, frames_):
            # (B, T', m, n, h, w, C) -> (B, m, n, heads, T'*h*w, dh)
            x = x.permute(0, 2, 3, 1, 4, 5, 6).reshape(b, m, n, frames_ * wh * ww, self.heads, dh)
            return x.transpose(3, 4)

        qh, kh, vh = heads(q, t), heads(k, tk), heads(v, tk)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
        keep = torch.ones(tk, m, n, wh, ww, dtype=torch.bool, device=z_q.device)
        if key_valid is not None:
            keep = keep & key_valid.unsqueeze(0)
        if frame_mask is not None:
            keep = keep & frame_mask[frames].reshape(tk, 1, 1, 1, 1)
        keep = keep.permute(1, 2, 0, 3, 4).reshape(1, m, n, 1, 1, tk * wh * ww)
        logits = logits.masked_fill(~keep, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ vh).transpose(3, 4).reshape(b, m, n, t, wh, ww, c)
        out = self.proj(out.permute(0, 3, 1, 2, 4, 5, 6))
        if return_weights:
            return out, weights
        return out


class STBlock(nn.Module):
    """Soft split -> windowed (self or cross) attention + MLP -> soft composition,
    wrapped in a residual connection on the feature map.

    With ``kv_channels`` set the block is cross-attention: queries come from the
    input features, keys/values from ``context``.
    """

    def __init__(self, channels, c_z=64, heads=2, patch=3, stride=2, window=4,
                 temporal_stride=2, max_frames=8, kv_channels=None, mlp_ratio=2):
        super().__init__()
        self.cross = kv_channels is not None
        self.window = _pair(window)
        self.split = SoftSplit(channels, c_z, patch, stride)
        self.split_kv = SoftSplit(kv_channels, c_z, patch, stride) if self.cross else None
        self.compose = SoftComposition(channels, c_z, patch, stride)
        self.norm_q = nn.LayerNorm(c_z)
        self.norm_kv = nn.LayerNorm(c_z) if self.cross else None
        self.attn = STAttention(c_z, heads, temporal_stride, self.window, max_frames)
        self.norm_mlp = nn.LayerNorm(c_z)
        self.mlp = nn.Sequential(nn.Linear(c_z, c_z * mlp_ratio), nn.GELU(), nn.Linear(c_z * mlp_ratio, c_z))

    def _tokens(self, split, x):
        b, t, c, h, w = x.shape
        z = split(x.reshape(b * t, c, h, w))
        return z.reshape(b, t, *z.shape[1:])

    def forward(self, x, context=None):
        b, t, c, h, w = x.shape
        zq = self._tokens(self.split, x)
        grid = zq.shape[2:4]
        wq, valid = window_partition(zq, self.window)
        if self.cross:
            if context is None:
                raise AttentionError("cross-attention block needs a context sequence")
            zc, _ = window_partition(self._tokens(self.split_kv, context), self.window)
            if zc.shape[:-1] != wq.shape[:-1]:
                raise AttentionError("context tokens do not align with query tokens")
            att = self.attn(self.norm_q(wq), self.norm_kv(zc), key_valid=valid)
        else:
            nq = self.norm_q(wq)
            att = self.attn(nq, nq, key_valid=valid)
        z = window_merge(wq + att, grid)
        z = z + self.mlp(self.norm_mlp(z))
        delta = z - zq
        out = self.compose(delta.reshape(b * t, *delta.shape[2:]), (h, w))
        return x + out.reshape(b, t, c, h, w)

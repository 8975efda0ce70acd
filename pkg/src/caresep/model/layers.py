"""Building blocks of the Swin-Unet separator.

Feature maps are channels-last tensors ``(B, H, W, C)`` where ``H`` runs over
time tokens and ``W`` over band tokens.
"""

from __future__ import annotations

from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def init_linear(m: nn.Linear) -> nn.Linear:
    trunc_normal_(m.weight)
    if m.bias is not None:
        nn.init.zeros_(m.bias)
    return m


def effective_window(h: int, w: int, window: int, shift: int):
    """Clamp the window to the grid per axis; no shift along an axis that fits in one window."""
    wh, ww = min(window, h), min(window, w)
    sh = shift if h > window else 0
    sw = shift if w > window else 0
    if h % wh or w % ww:
        raise ValueError(f"grid {h}x{w} not divisible by window {wh}x{ww}")
    return wh, ww, sh, sw


def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, wh * ww, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_reverse(windows: torch.Tensor, wh: int, ww: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // wh, w // ww, wh, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, wh: int, ww: int, sh: int, sw: int):
    """Additive mask ``(nW, N, N)`` blocking attention across the cyclic-shift seam."""
    region = torch.zeros(1, h, w, 1)
    cnt = 0
    hs = (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)) if sh else (slice(None),)
    ws = (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)) if sw else (slice(None),)
    for a in hs:
        for b in ws:
            region[:, a, b, :] = cnt
            cnt += 1
    mw = window_partition(region, wh, ww).squeeze(-1)
    diff = mw.unsqueeze(1) - mw.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


def relative_position_index(wh: int, ww: int, window: int) -> torch.Tensor:
    """Index into a ``(2*window-1)**2`` bias table for a ``wh x ww`` window."""
    coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


class PatchEmbed(nn.Module):
    """Non-overlapping ``patch x patch`` convolution over the (time, band) grid."""

    def __init__(self, in_ch: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        # x: (B, T, n_bands, C_in)
        t, nb = x.shape[1], x.shape[2]
        if t % self.patch or nb % self.patch:
            raise ValueError(f"grid {t}x{nb} not divisible by patch {self.patch}")
        x = self.proj(x.permute(0, 3, 1, 2))
        return self.norm(x.permute(0, 2, 3, 1))


class WindowAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, window: int):
        super().__init__()
        self.dim, self.n_heads, self.window = dim, n_heads, window
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = init_linear(nn.Linear(dim, 3 * dim))
        self.proj = init_linear(nn.Linear(dim, dim))
        self.rel_bias = nn.Parameter(trunc_normal_(torch.zeros((2 * window - 1) ** 2, n_heads)))

    def forward(self, x, wh: int, ww: int, mask=None, return_attn: bool = False):
        """x: (B*nW, N, C) tokens of each window; mask: (nW, N, N) additive or None."""
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.n_heads, c // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        idx = relative_position_index(wh, ww, self.window)
        attn = attn + self.rel_bias[idx].permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.n_heads, n, n) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(bw, self.n_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class QueryInjection(nn.Module):
    """Affine map of the query onto stage channels, added to every token."""

    def __init__(self, embed_dim: int, dim: int):
        super().__init__()
        self.proj = init_linear(nn.Linear(embed_dim, dim))

    def forward(self, x, query):
        return x + self.proj(query)[:, None, None, :]


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = init_linear(nn.Linear(dim, hidden))
        self.fc2 = init_linear(nn.Linear(hidden, dim))

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention + MLP, with optional query injection up front."""

    def __init__(self, dim, n_heads, window, shift, mlp_ratio, embed_dim=None):
        super().__init__()
        self.window, self.shift = window, shift
        self.inject = QueryInjection(embed_dim, dim) if embed_dim else None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, n_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, query=None):
        if query is not None:
            if self.inject is None:
                raise ValueError("block has no query injection layer")
            x = self.inject(x, query)
        return self._body(x)

    def _body(self, x):
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def _attend(self, x, return_attn=False):
        b, h, w, c = x.shape
        wh, ww, sh, sw = effective_window(h, w, self.window, self.shift)
        mask = None
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(1, 2))
            mask = _shift_mask(h, w, wh, ww, sh, sw)
        res = self.attn(window_partition(x, wh, ww), wh, ww, mask, return_attn=return_attn)
        out, attn = res if return_attn else (res, None)
        out = window_reverse(out, wh, ww, h, w)
        if sh or sw:
            out = torch.roll(out, shifts=(sh, sw), dims=(1, 2))
        return (out, attn) if return_attn else out


class ConvBlock(nn.Module):
    """Attention-free residual block (depthwise conv + pointwise MLP) for CNN-separator baselines."""

    def __init__(self, dim, mlp_ratio, embed_dim=None, kernel=3):
        super().__init__()
        self.inject = QueryInjection(embed_dim, dim) if embed_dim else None
        self.norm1 = nn.LayerNorm(dim)
        self.dw = nn.Conv2d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, query=None):
        if query is not None:
            if self.inject is None:
                raise ValueError("block has no query injection layer")
            x = self.inject(x, query)
        x = x + self.dw(self.norm1(x).permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = init_linear(nn.Linear(4 * dim, 2 * dim, bias=False))

    def forward(self, x):
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even grid sides, got {h}x{w}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


def _pixel_shuffle(x, factor):
    """(B, H, W, f*f*C) -> (B, f*H, f*W, C)."""
    b, h, w, c = x.shape
    c_out = c // (factor * factor)
    x = x.view(b, h, w, factor, factor, c_out).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * factor, w * factor, c_out)


class PatchExpand(nn.Module):
    """Linear C -> 2C, rearranged into a 2x larger grid with C/2 channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.expand = init_linear(nn.Linear(dim, 2 * dim, bias=False))
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x):
        return self.norm(_pixel_shuffle(self.expand(x), 2))


class PatchUp(nn.Module):
    """Final ``patch``-fold up-sampling followed by the per-cell output head."""

    def __init__(self, dim: int, patch: int, out_ch: int):
        super().__init__()
        self.patch = patch
        self.expand = init_linear(nn.Linear(dim, patch * patch * dim, bias=False))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, out_ch)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.norm(_pixel_shuffle(self.expand(x), self.patch)))


class TokenSemanticHead(nn.Module):
    """Conv spanning all band tokens -> per-time class map -> mean over time."""

    def __init__(self, dim: int, n_classes: int, band_tokens: int, kernel: int = 3):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.conv = nn.Conv2d(dim, n_classes, kernel_size=(kernel, band_tokens), padding=(kernel // 2, 0))

    def forward(self, x):
        if x.shape[2] != self.conv.kernel_size[1]:
            raise ValueError(f"expected {self.conv.kernel_size[1]} band tokens, got {x.shape[2]}")
        cmap = self.conv(self.norm(x).permute(0, 3, 1, 2))  # (B, K, H, 1)
        return cmap.squeeze(-1).mean(dim=-1)

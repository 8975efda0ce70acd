from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..dsp import AudioClip
from .config import ModelConfig
from .frontend import BandSplitFrontend
from .layers import ConvBlock, PatchEmbed, PatchExpand, PatchMerge, PatchUp, SwinBlock, TokenSemanticHead, init_linear


def _make_block(cfg: ModelConfig, dim: int, heads: int, index: int, inject: bool):
    embed_dim = cfg.embed_dim if inject else None
    if cfg.block == "conv":
        return ConvBlock(dim, cfg.mlp_ratio, embed_dim)
    # alternate plain / shifted windows over the whole network so depth-1 stages still shift
    shift = cfg.window_size // 2 if index % 2 else 0
    return SwinBlock(dim, heads, cfg.window_size, shift, cfg.mlp_ratio, embed_dim)


class Stage(nn.Module):
    """A run of blocks; only the first carries the stage's query injection."""

    def __init__(self, cfg, dim, heads, depth, first_index, inject):
        super().__init__()
        self.blocks = nn.ModuleList(
            _make_block(cfg, dim, heads, first_index + i, inject and i == 0) for i in range(depth)
        )

    @property
    def injection(self):
        return self.blocks[0].inject

    def forward(self, x, query=None):
        for i, blk in enumerate(self.blocks):
            x = blk(x, query if i == 0 else None)
        return x


class SharedEncoder(nn.Module):
    """Patch embed + three (stage, merge) groups + connector stage + token-semantic head.

    This is the part of the separator that also produces query embeddings, and
    the part a pretrained classifier checkpoint initialises.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.latent_dim
        self.patch_embed = PatchEmbed(3 * cfg.max_band_width, D, cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        idx = 0
        for s in range(3):
            dim = cfg.stage_dim(s)
            self.stages.append(Stage(cfg, dim, cfg.n_heads[s], cfg.depths[s], idx, cfg.inject_encoder))
            self.merges.append(PatchMerge(dim))
            idx += cfg.depths[s]
        self.connector = Stage(cfg, cfg.embed_dim, cfg.n_heads[3], cfg.connector_depth, idx, True)
        self.ts_head = TokenSemanticHead(cfg.embed_dim, cfg.n_classes, cfg.band_tokens_bottleneck, cfg.ts_kernel)
        self.n_blocks = idx + cfg.connector_depth

    def forward(self, feats, query=None):
        """Returns ``(skips, bottleneck)``; skips are the pre-merge stage outputs."""
        x = self.patch_embed(feats)
        skips = []
        for stage, merge in zip(self.stages, self.merges):
            x = stage(x, query if self.cfg.inject_encoder else None)
            skips.append(x)
            x = merge(x)
        return skips, x

    def connect(self, bottleneck, query=None):
        """Returns ``(latent, pooled, class_logits)``."""
        latent = self.connector(bottleneck, query)
        pooled = latent.mean(dim=(1, 2))
        return latent, pooled, self.ts_head(latent)

    def embed(self, feats):
        """Query-free pass: pooled connector output and class logits."""
        _, bottleneck = self.forward(feats)
        _, pooled, logits = self.connect(bottleneck)
        return pooled, logits


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, out_ch: int, first_index: int):
        super().__init__()
        self.expands = nn.ModuleList()
        self.fuses = nn.ModuleList()
        self.stages = nn.ModuleList()
        idx = first_index
        for j, s in enumerate((2, 1, 0)):
            dim = cfg.stage_dim(s)
            self.expands.append(PatchExpand(2 * dim))
            self.fuses.append(init_linear(nn.Linear(2 * dim, dim)))
            self.stages.append(Stage(cfg, dim, cfg.n_heads[s], cfg.decoder_depths[j], idx, True))
            idx += cfg.decoder_depths[j]
        self.patch_up = PatchUp(cfg.latent_dim, cfg.patch_size, out_ch)

    def forward(self, latent, skips, query):
        x = latent
        for expand, fuse, stage, skip in zip(self.expands, self.fuses, self.stages, reversed(skips)):
            x = expand(x)
            if x.shape != skip.shape:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match decoder feature {tuple(x.shape)}")
            x = stage(fuse(torch.cat([x, skip], dim=-1)), query)
        return self.patch_up(x)


def analyse(frontend: BandSplitFrontend, cfg: ModelConfig, wave: torch.Tensor):
    """Waveforms (B, L) -> (complex bands, per-clip normaliser, padded network input).

    The input carries normalised real/imaginary parts plus log magnitude of every
    member bin, so the network is invariant to the overall level of its input.
    """
    bands = frontend.split(frontend.stft(wave))
    mask = frontend.band_mask.to(wave.dtype)
    power = (bands.real ** 2 + bands.imag ** 2).sum(dim=(1, 2, 3)) / (mask.sum() * bands.shape[1])
    scale = torch.sqrt(power) + 1e-8
    norm = bands / scale[:, None, None, None]
    logmag = torch.log(norm.abs() + 1e-3) * mask
    feats = torch.cat([norm.real, norm.imag, logmag], dim=-1)
    t = feats.shape[1]
    pad = cfg.padded_frames(t) - t
    if pad:
        feats = nn.functional.pad(feats, (0, 0, 0, 0, 0, pad))
    return bands, scale, feats


@dataclass
class Encoded:
    """Query-independent analysis of a batch of mixtures."""

    bands: torch.Tensor  # (B, T, n_bands, max_width) complex, unpadded
    scale: torch.Tensor  # (B,) feature normaliser
    skips: list
    bottleneck: torch.Tensor
    length: int

    def repeat(self, n: int) -> "Encoded":
        r = lambda t: t.repeat_interleave(n, dim=0)  # noqa: E731
        return Encoded(r(self.bands), r(self.scale), [r(s) for s in self.skips], r(self.bottleneck), self.length)


class SeparatorModel(nn.Module):
    """Query-conditioned Swin-Unet separator ``S(mixture, query) -> source``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = BandSplitFrontend(cfg.stft_window, cfg.stft_hop, cfg.n_bands, cfg.sample_rate)
        self.encoder = SharedEncoder(cfg)
        w = self.frontend.max_width
        out_ch = w if cfg.output_mode == "mask" else 2 * w
        self.decoder = Decoder(cfg, out_ch, self.encoder.n_blocks)

    def analyse(self, wave: torch.Tensor):
        return analyse(self.frontend, self.cfg, wave)

    # -- network passes ----------------------------------------------------
    def encode(self, wave: torch.Tensor) -> Encoded:
        bands, scale, feats = self.analyse(wave)
        skips, bottleneck = self.encoder(feats)
        return Encoded(bands, scale, skips, bottleneck, wave.shape[-1])

    def decode(self, enc: Encoded, query: torch.Tensor):
        """Returns ``(estimate (B, L), latent, class_logits)``."""
        latent, _, logits = self.encoder.connect(enc.bottleneck, query)
        out = self.decoder(latent, enc.skips, query)[:, : enc.bands.shape[1]]
        if self.cfg.output_mode == "mask":
            est_bands = enc.bands * torch.sigmoid(out)
        else:
            est_bands = self.frontend.unpack(out) * enc.scale[:, None, None, None]
        spec = self.frontend.unsplit(est_bands)
        return self.frontend.istft(spec, enc.length), latent, logits

    def forward(self, wave: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(wave), query)[0]

    def embed(self, wave: torch.Tensor) -> torch.Tensor:
        """Pooled query-free connector output: the shared-encoder query embedding."""
        return self.encoder.embed(self.analyse(wave)[2])[0]

    # -- numpy convenience -------------------------------------------------
    def _dtype(self):
        return next(self.parameters()).dtype

    def separate(self, mixture: AudioClip, query) -> AudioClip:
        q = np.asarray(getattr(query, "values", query), dtype=np.float64).reshape(-1)
        if q.size != self.cfg.embed_dim:
            raise ValueError(f"query length {q.size} != embed_dim {self.cfg.embed_dim}")
        dt = self._dtype()
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(mixture.samples), dtype=dt)[None]
            est = self(x, torch.as_tensor(q, dtype=dt)[None])[0]
        return AudioClip(est.numpy().astype(np.float64), mixture.sample_rate, mixture.labels, mixture.clip_id)

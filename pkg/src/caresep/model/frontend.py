"""Differentiable STFT / band-split front end.

Same conventions as :mod:`caresep.dsp`: periodic Hann window, centered framing
with reflection padding, bands packed as ``[real parts | imaginary parts]``.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..dsp import band_gather_index, check_framing, mel_band_map


class BandSplitFrontend(nn.Module):
    def __init__(self, window_size: int, hop_size: int, n_bands: int, sample_rate: int):
        super().__init__()
        check_framing(window_size, hop_size)
        self.window_size = window_size
        self.hop_size = hop_size
        self.n_bands = n_bands
        self.freq_bins = window_size // 2 + 1
        band_map = mel_band_map(self.freq_bins, n_bands, sample_rate)
        index, mask = band_gather_index(band_map)
        self.max_width = index.shape[1]
        self.register_buffer("window", torch.hann_window(window_size, periodic=True, dtype=torch.float64), persistent=False)
        self.register_buffer("gather_index", torch.as_tensor(index.reshape(-1)), persistent=False)
        self.register_buffer("band_mask", torch.as_tensor(mask, dtype=torch.float64), persistent=False)
        self.register_buffer("valid_slots", torch.as_tensor(np.flatnonzero(mask)), persistent=False)
        self.band_map = band_map

    def stft(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, L) real -> (B, T, F) complex."""
        spec = torch.stft(
            wave, self.window_size, self.hop_size, window=self.window.to(wave.dtype),
            center=True, pad_mode="reflect", return_complex=True,
        )
        return spec.transpose(1, 2)

    def istft(self, spec: torch.Tensor, length: int) -> torch.Tensor:
        """(B, T, F) complex -> (B, L) real."""
        return torch.istft(
            spec.transpose(1, 2), self.window_size, self.hop_size,
            window=self.window.to(spec.real.dtype), center=True, length=length,
        )

    def split(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, T, F) complex -> (B, T, n_bands, max_width) complex, zero in unused slots."""
        b, t, _ = spec.shape
        g = spec[..., self.gather_index].reshape(b, t, self.n_bands, self.max_width)
        return g * self.band_mask.to(spec.real.dtype)

    def unsplit(self, bands: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`split` on its image."""
        b, t = bands.shape[:2]
        return bands.reshape(b, t, -1)[..., self.valid_slots]

    @staticmethod
    def pack(bands: torch.Tensor) -> torch.Tensor:
        """Complex bands -> real ``(..., 2 * max_width)`` features."""
        return torch.cat([bands.real, bands.imag], dim=-1)

    @staticmethod
    def unpack(features: torch.Tensor) -> torch.Tensor:
        w = features.shape[-1] // 2
        return torch.complex(features[..., :w], features[..., w:])

"""A walk through the signal path: STFT, mel band split, energy-normalised mixing.

    python demos/01_dsp_tour.py
"""

import numpy as np

from caresep.dsp import (
    AudioClip, band_unsplit, istft, mel_band_split, mel_band_widths, mix_with_energy_norm,
    spectral_energy, stft, windowed_energy,
)

sr = 16000
t = np.arange(sr) / sr
rng = np.random.default_rng(0)
tone = AudioClip(0.1 * np.sin(2 * np.pi * 440 * t), sr, np.array([1, 0]), "tone")
hiss = AudioClip(0.02 * rng.standard_normal(sr), sr, np.array([0, 1]), "hiss")

# STFT with a periodic Hann window; the inverse is a weighted overlap-add
spec = stft(tone, window_size=256, hop_size=64)
back = istft(spec, len(tone))
print(f"spectrogram {spec.values.shape} (frames, bins)")
print(f"round trip relative error {np.linalg.norm(back.samples - tone.samples) / np.linalg.norm(tone.samples):.2e}")
print(f"Parseval: frame energy {windowed_energy(tone, 256, 64):.6f} vs spectral {spectral_energy(spec):.6f}")

# Bins are grouped into mel-spaced bands. Low bands hold a single bin, high bands many.
widths = mel_band_widths(spec.freq_bins, 32, sr)
print(f"32 bands, widths {widths[:4]} ... {widths[-4:]}")
bands = mel_band_split(spec, 32)
print(f"band-split tensor {bands.values.shape} (frames, bands, 2 * max width)")
print("unsplit is exact:", np.array_equal(band_unsplit(bands).values, spec.values))

# Mixing rescales the second source to the energy of the first
mix, s1, s2 = mix_with_energy_norm(tone, hiss, seed=0)
print(f"source energies after mixing: {s1.samples @ s1.samples:.3f}, {s2.samples @ s2.samples:.3f}")
print(f"mixture labels {mix.labels}")

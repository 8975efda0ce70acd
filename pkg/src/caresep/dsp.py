"""Waveform, spectrogram and band-split conversions.

Everything here is plain numpy and side-effect free. The torch front end used
inside the network (``caresep.model.frontend``) follows the same framing and
band layout and is tested against these functions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

PEAK_GUARD = 0.999


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with an optional multi-hot label vector."""

    samples: np.ndarray
    sample_rate: int
    labels: np.ndarray | None = None
    clip_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D array")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be a multi-hot vector of 0/1 entries")
            object.__setattr__(self, "labels", labels.astype(np.int8))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def energy(self) -> float:
        return float(np.sum(np.asarray(self.samples, dtype=np.float64) ** 2))

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class ComplexSpec:
    """One-sided STFT, shape ``(time_frames, freq_bins)``."""

    values: np.ndarray
    window_size: int
    hop_size: int
    sample_rate: int = 16000

    @property
    def time_frames(self) -> int:
        return self.values.shape[0]

    @property
    def freq_bins(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BandSpec:
    """Band-split spectrogram.

    ``values`` has shape ``(time_frames, n_bands, 2 * max_width)``: the first
    ``max_width`` channels hold the real parts of the member bins of a band,
    the last ``max_width`` the imaginary parts. Unused slots are zero and
    flagged False in ``mask``.
    """

    values: np.ndarray
    band_map: np.ndarray | None
    mask: np.ndarray | None = None
    window_size: int = 0
    hop_size: int = 0
    sample_rate: int = 16000

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    @property
    def max_width(self) -> int:
        return self.values.shape[2] // 2


def hann_window(window_size: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(window_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)


def n_frames(length: int, hop_size: int) -> int:
    """Frame count for centered framing with ``window/2`` reflection padding."""
    return length // hop_size + 1


def check_framing(window_size: int, hop_size: int) -> None:
    """Raise ``ValueError("invalid framing")`` unless overlap-add can invert."""
    if window_size <= 0 or window_size & (window_size - 1):
        raise ValueError(f"invalid framing: window {window_size} is not a power of two")
    if hop_size <= 0 or window_size < 2 * hop_size:
        raise ValueError(f"invalid framing: hop {hop_size} exceeds window/2 for window {window_size}")
    # squared-window overlap-add must be bounded away from zero (NOLA)
    w2 = hann_window(window_size) ** 2
    ola = np.zeros(hop_size)
    for start in range(0, window_size, hop_size):
        seg = w2[start:start + hop_size]
        ola[: seg.size] += seg
    if ola.min() < 1e-8:
        raise ValueError(f"invalid framing: window {window_size} / hop {hop_size} violates overlap-add")


def _frame_starts(length: int, window_size: int, hop_size: int) -> np.ndarray:
    return np.arange(n_frames(length, hop_size)) * hop_size


def stft(clip: AudioClip, window_size: int = 256, hop_size: int = 64) -> ComplexSpec:
    check_framing(window_size, hop_size)
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < window_size:
        raise ValueError(f"input too short: {x.size} samples < window {window_size}")
    pad = window_size // 2
    xp = np.pad(x, pad, mode="reflect")
    starts = _frame_starts(x.size, window_size, hop_size)
    idx = starts[:, None] + np.arange(window_size)[None, :]
    frames = xp[idx] * hann_window(window_size)
    return ComplexSpec(np.fft.rfft(frames, axis=1), window_size, hop_size, int(clip.sample_rate))


def istft(spec: ComplexSpec, out_length: int) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`."""
    check_framing(spec.window_size, spec.hop_size)
    win, hop = spec.window_size, spec.hop_size
    if spec.freq_bins != win // 2 + 1:
        raise ValueError(f"expected {win // 2 + 1} bins, got {spec.freq_bins}")
    if n_frames(out_length, hop) != spec.time_frames:
        raise ValueError(
            f"out_length {out_length} implies {n_frames(out_length, hop)} frames, spectrogram has {spec.time_frames}"
        )
    w = hann_window(win)
    frames = np.fft.irfft(spec.values, n=win, axis=1) * w
    total = (spec.time_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(spec.time_frames):
        out[t * hop:t * hop + win] += frames[t]
        norm[t * hop:t * hop + win] += w ** 2
    pad = win // 2
    out, norm = out[pad:pad + out_length], norm[pad:pad + out_length]
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return AudioClip(out, spec.sample_rate)


def spectral_energy(spec: ComplexSpec) -> float:
    """Energy of the time-domain frames implied by a one-sided spectrogram (Parseval)."""
    mag2 = np.abs(spec.values) ** 2
    weights = np.full(spec.freq_bins, 2.0)
    weights[0] = 1.0
    if spec.window_size % 2 == 0:
        weights[-1] = 1.0
    return float(np.sum(mag2 * weights) / spec.window_size)


def windowed_energy(clip: AudioClip, window_size: int, hop_size: int) -> float:
    """Sum of squared windowed frame samples under the :func:`stft` framing."""
    x = np.asarray(clip.samples, dtype=np.float64)
    xp = np.pad(x, window_size // 2, mode="reflect")
    total = 0.0
    w = hann_window(window_size)
    for s in _frame_starts(x.size, window_size, hop_size):
        total += float(np.sum((xp[s:s + window_size] * w) ** 2))
    return total


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def ideal_band_edges(freq_bins: int, n_bands: int, sample_rate: int) -> np.ndarray:
    """Fractional bin positions of ``n_bands + 1`` edges equally spaced in mel."""
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_bands + 1))
    return edges_hz / nyquist * freq_bins


def mel_band_widths(freq_bins: int, n_bands: int, sample_rate: int) -> np.ndarray:
    """Integer band widths (in bins) approximating equal mel spacing.

    Widths are >= 1, non-decreasing and sum to ``freq_bins``. Starting from the
    floored ideal widths, single-bin corrections are made where they keep the
    sequence monotone, choosing the band furthest from its ideal width.
    """
    if n_bands < 1 or n_bands > freq_bins:
        raise ValueError(f"n_bands must be in [1, {freq_bins}], got {n_bands}")
    ideal = np.diff(ideal_band_edges(freq_bins, n_bands, sample_rate))
    w = np.maximum(1, np.floor(ideal + 1e-9)).astype(np.int64)
    while w.sum() < freq_bins:
        ok = np.append(w[:-1] < w[1:], True)
        gap = np.where(ok, ideal - w, -np.inf)
        w[int(np.argmax(gap))] += 1
    while w.sum() > freq_bins:
        ok = (w > 1) & np.insert(w[1:] > w[:-1], 0, True)
        gap = np.where(ok, w - ideal, -np.inf)
        w[int(np.argmax(gap))] -= 1
    return w


def mel_band_map(freq_bins: int, n_bands: int, sample_rate: int) -> np.ndarray:
    """Band index of every frequency bin."""
    return np.repeat(np.arange(n_bands), mel_band_widths(freq_bins, n_bands, sample_rate))


def band_gather_index(band_map: np.ndarray):
    """``(index, mask)`` arrays of shape ``(n_bands, max_width)`` listing member bins."""
    band_map = np.asarray(band_map)
    n_bands = int(band_map.max()) + 1
    widths = np.bincount(band_map, minlength=n_bands)
    if (widths == 0).any() or (np.diff(band_map) < 0).any():
        raise ValueError("band_map must assign contiguous non-empty bands in bin order")
    starts = np.concatenate([[0], np.cumsum(widths)[:-1]])
    max_w = int(widths.max())
    offs = np.arange(max_w)[None, :]
    mask = offs < widths[:, None]
    index = np.where(mask, starts[:, None] + offs, 0)
    return index, mask


def mel_band_split(spec: ComplexSpec, n_bands: int = 64) -> BandSpec:
    if n_bands > spec.freq_bins:
        raise ValueError(f"n_bands {n_bands} > freq_bins {spec.freq_bins}")
    band_map = mel_band_map(spec.freq_bins, n_bands, spec.sample_rate)
    index, mask = band_gather_index(band_map)
    gathered = spec.values[:, index] * mask  # (T, n_bands, max_w)
    values = np.concatenate([gathered.real, gathered.imag], axis=-1)
    return BandSpec(values, band_map, mask, spec.window_size, spec.hop_size, spec.sample_rate)


def band_unsplit(bands: BandSpec) -> ComplexSpec:
    if bands.band_map is None:
        raise ValueError("band_map missing: cannot invert band split")
    index, mask = band_gather_index(bands.band_map)
    w = bands.max_width
    re = bands.values[..., :w][:, mask]
    im = bands.values[..., w:][:, mask]
    # mask-selected slots come out in bin order since bands are contiguous
    values = re + 1j * im
    assert values.shape[1] == index[mask].size
    return ComplexSpec(values, bands.window_size, bands.hop_size, bands.sample_rate)


def _union_labels(a: np.ndarray | None, b: np.ndarray | None):
    if a is None or b is None:
        return None
    return np.maximum(a, b)


def mix_with_energy_norm(a1: AudioClip, a2: AudioClip, seed: int = 0):
    """Mix two sources after scaling ``a2`` to the energy of ``a1``.

    The longer source is cropped to the shorter length at a seeded offset. If
    the mixture would peak above ``PEAK_GUARD`` all three outputs are scaled by
    the same factor, so ``mixture == scaled_a1 + scaled_a2`` always holds.

    Returns:
        (mixture, scaled_a1, scaled_a2)
    """
    if a1.sample_rate != a2.sample_rate:
        raise ValueError(f"sample rate mismatch: {a1.sample_rate} vs {a2.sample_rate}")
    x1 = np.asarray(a1.samples, dtype=np.float64)
    x2 = np.asarray(a2.samples, dtype=np.float64)
    n = min(x1.size, x2.size)
    rng = np.random.default_rng(seed)
    if x1.size > n:
        off = int(rng.integers(0, x1.size - n + 1))
        x1 = x1[off:off + n]
    if x2.size > n:
        off = int(rng.integers(0, x2.size - n + 1))
        x2 = x2[off:off + n]
    e1, e2 = float(x1 @ x1), float(x2 @ x2)
    if e1 == 0.0 or e2 == 0.0:
        raise ValueError("silent source")
    s2 = x2 * np.sqrt(e1 / e2)
    s1 = x1
    mix = s1 + s2
    peak = float(np.max(np.abs(mix)))
    if peak > PEAK_GUARD:
        g = PEAK_GUARD / peak
        s1, s2 = s1 * g, s2 * g
        mix = s1 + s2
    sr = a1.sample_rate
    mixture = AudioClip(mix, sr, _union_labels(a1.labels, a2.labels), f"{a1.clip_id}+{a2.clip_id}")
    return (
        mixture,
        AudioClip(s1, sr, a1.labels, a1.clip_id),
        AudioClip(s2, sr, a2.labels, a2.clip_id),
    )


def read_wav(path, expected_sample_rate: int | None = None, labels=None, clip_id: str | None = None) -> AudioClip:
    """Load a mono 16-bit or 32-bit-float wav. No resampling is ever done."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_sample_rate is not None and sr != expected_sample_rate:
        raise ValueError(f"{path}: sample rate {sr} != expected {expected_sample_rate}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, sr, labels, clip_id if clip_id is not None else Path(path).stem)


def write_wav(path, clip: AudioClip, fmt: str = "float32") -> None:
    x = np.asarray(clip.samples)
    if fmt == "float32":
        data = x.astype(np.float32)
    elif fmt == "int16":
        data = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    wavfile.write(str(path), int(clip.sample_rate), data)


__all__ = [
    "AudioClip", "ComplexSpec", "BandSpec", "stft", "istft", "mel_band_split", "band_unsplit",
    "mix_with_energy_norm", "read_wav", "write_wav", "hann_window", "n_frames", "check_framing",
    "spectral_energy", "windowed_energy", "mel_band_map", "mel_band_widths", "band_gather_index",
    "hz_to_mel", "mel_to_hz", "ideal_band_edges",
]

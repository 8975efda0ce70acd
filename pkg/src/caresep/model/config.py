from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..dsp import mel_band_widths


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the separator network.

    Encoder stage ``s`` runs at ``latent_dim * 2**s`` channels; three merges
    bring the bottleneck to ``embed_dim == 8 * latent_dim``, which is also the
    query embedding width.
    """

    latent_dim: int = 8
    depths: tuple = (1, 1, 1)
    connector_depth: int = 1
    decoder_depths: tuple = (1, 1, 1)
    n_heads: tuple = (1, 2, 4, 8)
    window_size: int = 4
    patch_size: int = 4
    mlp_ratio: float = 2.0
    n_classes: int = 4
    n_bands: int = 64
    stft_window: int = 256
    stft_hop: int = 64
    sample_rate: int = 16000
    ts_kernel: int = 3
    output_mode: str = "mask"  # "mask" or "regression"
    block: str = "swin"  # "swin" or "conv"
    inject_encoder: bool = False

    def __post_init__(self):
        for name in ("depths", "decoder_depths", "n_heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        errors = self.validate()
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.latent_dim < 1:
            errors.append("latent_dim must be >= 1")
        if len(self.depths) != 3 or len(self.decoder_depths) != 3:
            errors.append("depths and decoder_depths need exactly 3 stages")
        if len(self.n_heads) != 4:
            errors.append("n_heads needs 4 entries (3 encoder stages + connector)")
        for s, h in enumerate(self.n_heads):
            if h < 1 or (self.latent_dim * 2 ** s) % h:
                errors.append(f"n_heads[{s}]={h} does not divide {self.latent_dim * 2 ** s} channels")
        if self.output_mode not in ("mask", "regression"):
            errors.append(f"output_mode must be 'mask' or 'regression', got {self.output_mode!r}")
        if self.block not in ("swin", "conv"):
            errors.append(f"block must be 'swin' or 'conv', got {self.block!r}")
        if self.n_bands % (self.patch_size * 8):
            errors.append(f"n_bands {self.n_bands} not divisible by patch_size*8 = {self.patch_size * 8}")
        if self.n_bands > self.freq_bins:
            errors.append(f"n_bands {self.n_bands} > freq_bins {self.freq_bins}")
        return errors

    @property
    def embed_dim(self) -> int:
        return 8 * self.latent_dim

    @property
    def freq_bins(self) -> int:
        return self.stft_window // 2 + 1

    @property
    def max_band_width(self) -> int:
        return int(mel_band_widths(self.freq_bins, self.n_bands, self.sample_rate).max())

    @property
    def band_tokens_bottleneck(self) -> int:
        return self.n_bands // (self.patch_size * 8)

    def stage_dim(self, stage: int) -> int:
        return self.latent_dim * 2 ** min(stage, 3)

    def padded_frames(self, frames: int) -> int:
        """Smallest frame count >= ``frames`` that every stage can window evenly."""
        n = frames
        while not self._valid_side(n):
            n += 1
        return n

    def _valid_side(self, n: int) -> bool:
        if n % (self.patch_size * 8):
            return False
        side = n // self.patch_size
        for _ in range(4):
            if side % min(self.window_size, side):
                return False
            side //= 2
        return True

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("depths", "decoder_depths", "n_heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_config(latent_dim: int = 96, **overrides) -> ModelConfig:
    """Full-size preset: 1024/320 framing, 64 bands, 527 classes. Never trained here."""
    heads = (4, 8, 16, 32) if latent_dim == 96 else (8, 16, 32, 64)
    kw = dict(
        latent_dim=latent_dim, depths=(2, 2, 6), connector_depth=2, decoder_depths=(2, 2, 2),
        n_heads=heads, window_size=8, patch_size=4, mlp_ratio=4.0, n_classes=527, n_bands=64,
        stft_window=1024, stft_hop=320, sample_rate=32000,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_config(**overrides) -> ModelConfig:
    """Gradient-check preset: D=4, 16x16 grid, one block per stage."""
    kw = dict(
        latent_dim=4, n_heads=(1, 1, 2, 2), window_size=2, patch_size=2, mlp_ratio=2.0,
        n_classes=3, n_bands=16, stft_window=64, stft_hop=16, sample_rate=8000,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


PRESETS = {"desk": desk_config, "paper": paper_config, "tiny": tiny_config}

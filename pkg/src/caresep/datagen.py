"""Synthetic labelled sound classes, manifests and cross-class mixture lists."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, read_wav, write_wav

log = logging.getLogger(__name__)

FAMILIES = ("harmonic-tone", "band-noise", "am-noise", "chirp", "click-train", "fm-tone")


@dataclass(frozen=True)
class SoundClassSpec:
    """One synthetic sound class: a generator family plus parameter ranges ``{name: (lo, hi)}``."""

    class_id: str
    family: str
    params: dict
    rms_range: tuple = (0.03, 0.15)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        for k, (lo, hi) in self.params.items():
            if lo > hi:
                raise ValueError(f"{self.class_id}: empty range for {k}")


def default_class_specs() -> list[SoundClassSpec]:
    return [
        SoundClassSpec("tone", "harmonic-tone", {"f0_hz": (200.0, 400.0), "n_harmonics": (3, 3)}),
        SoundClassSpec("bandnoise", "band-noise", {"low_hz": (2000.0, 2200.0), "high_hz": (3800.0, 4000.0)}),
        SoundClassSpec("amnoise", "am-noise", {"am_rate_hz": (7.0, 9.0), "low_hz": (5000.0, 5300.0), "high_hz": (6700.0, 7000.0)}),
        SoundClassSpec("clicks", "click-train", {"click_rate_hz": (18.0, 22.0), "decay_ms": (1.0, 2.0)}),
    ]


def check_disjoint(specs: list[SoundClassSpec]) -> None:
    """Every pair of classes must differ in family or in at least one parameter range."""
    if len({s.class_id for s in specs}) != len(specs):
        raise ValueError("duplicate class_id")
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if a.family != b.family:
                continue
            shared = set(a.params) & set(b.params)
            overlapping = all(
                a.params[k][0] <= b.params[k][1] and b.params[k][0] <= a.params[k][1] for k in shared
            )
            if overlapping:
                raise ValueError(f"classes {a.class_id!r} and {b.class_id!r} have overlapping parameter ranges")


def _band_limited_noise(rng, n, sr, low, high):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < low) | (f > high)] = 0.0
    return np.fft.irfft(spec, n)


def _draw(rng, rng_range):
    lo, hi = rng_range
    return lo if lo == hi else float(rng.uniform(lo, hi))


def render_clip(spec: SoundClassSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    p = {k: _draw(rng, v) for k, v in spec.params.items()}
    t = np.arange(n) / sr
    fam = spec.family
    if fam == "harmonic-tone":
        f0 = p["f0_hz"]
        x = sum(
            0.5 ** k * np.sin(2 * np.pi * (k + 1) * f0 * t + rng.uniform(0, 2 * np.pi))
            for k in range(int(p.get("n_harmonics", 3)))
        )
    elif fam == "band-noise":
        x = _band_limited_noise(rng, n, sr, p["low_hz"], p["high_hz"])
    elif fam == "am-noise":
        carrier = _band_limited_noise(rng, n, sr, p.get("low_hz", 0.0), p.get("high_hz", sr / 2))
        x = carrier * (0.5 + 0.5 * np.sin(2 * np.pi * p["am_rate_hz"] * t + rng.uniform(0, 2 * np.pi)))
    elif fam == "chirp":
        f_start = p["start_hz"]
        phase = 2 * np.pi * (f_start * t + 0.5 * p["slope_hz_per_s"] * t ** 2)
        x = np.sin(phase + rng.uniform(0, 2 * np.pi))
    elif fam == "fm-tone":
        mod = p["mod_depth_hz"] / p["mod_rate_hz"] * np.sin(2 * np.pi * p["mod_rate_hz"] * t)
        x = np.sin(2 * np.pi * p["carrier_hz"] * t + mod + rng.uniform(0, 2 * np.pi))
    elif fam == "click-train":
        x = np.zeros(n)
        period = sr / p["click_rate_hz"]
        burst_len = int(sr * 8 * p["decay_ms"] / 1000)
        env = np.exp(-np.arange(burst_len) / (sr * p["decay_ms"] / 1000))
        pos = rng.uniform(0, period)
        while pos < n:
            i = int(pos)
            seg = env[: n - i] * rng.standard_normal(min(burst_len, n - i))
            x[i:i + seg.size] += seg
            pos += period
    else:  # pragma: no cover - guarded in SoundClassSpec
        raise ValueError(fam)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms * _draw(rng, spec.rms_range)


@dataclass(frozen=True)
class ClipEntry:
    clip_id: str
    path: str
    labels: tuple  # class names
    split: str


@dataclass
class DatasetManifest:
    """Clip table with a train/eval split. Paths are relative to ``root``."""

    entries: list
    classes: list
    sample_rate: int
    clip_length: float
    root: Path = field(default_factory=Path)
    rejected: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def multi_hot(self, entry: ClipEntry) -> np.ndarray:
        y = np.zeros(len(self.classes), dtype=np.int8)
        for lab in entry.labels:
            y[self.class_index(lab)] = 1
        return y

    def load_clip(self, entry: ClipEntry) -> AudioClip:
        clip = read_wav(self.root / entry.path, self.sample_rate, self.multi_hot(entry), entry.clip_id)
        n = int(round(self.clip_length * self.sample_rate))
        if len(clip) < n:
            raise ValueError(f"{entry.path}: {len(clip)} samples, shorter than clip length {n}")
        return clip.with_samples(np.asarray(clip.samples[:n], dtype=np.float32))

    def load_split(self, name: str) -> list:
        return [self.load_clip(e) for e in self.split(name)]

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as f:
            f.write(f"# sample_rate={self.sample_rate}\n")
            f.write(f"# clip_length={self.clip_length!r}\n")
            f.write(f"# classes={','.join(self.classes)}\n")
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["clip_id", "path", "labels", "split"])
            for e in self.entries:
                w.writerow([e.clip_id, e.path, ";".join(e.labels), e.split])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        meta, rows = {}, []
        with open(path, newline="") as f:
            lines = f.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif line:
                body.append(line)
        reader = csv.DictReader(body, delimiter="\t")
        for r in reader:
            rows.append(ClipEntry(r["clip_id"], r["path"], tuple(r["labels"].split(";")), r["split"]))
        return cls(rows, meta["classes"].split(","), int(meta["sample_rate"]), float(meta["clip_length"]), path.parent)

    def check(self) -> None:
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clip ids in manifest")
        for split in ("train", "eval"):
            present = {lab for e in self.split(split) for lab in e.labels}
            missing = set(self.classes) - present
            if self.split(split) and missing:
                raise ValueError(f"classes {sorted(missing)} absent from {split} split")


def synth_dataset(specs=None, n_per_class=50, clip_seconds=1.0, sample_rate=16000, seed=0, out_dir="data") -> DatasetManifest:
    """Render a labelled synthetic dataset to ``out_dir`` and write ``manifest.tsv``.

    Each clip is drawn from its own generator seeded by ``(seed, class, index)``,
    so the whole tree is a pure function of the arguments.
    """
    specs = default_class_specs() if specs is None else list(specs)
    if len(specs) < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 4:
        raise ValueError("need at least 4 clips per class")
    check_disjoint(specs)
    for spec in specs:
        for k, (lo, hi) in spec.params.items():
            if k.endswith("_hz") and k not in ("am_rate_hz", "click_rate_hz", "mod_rate_hz") and hi >= sample_rate / 2:
                raise ValueError(f"{spec.class_id}: {k} up to {hi} Hz is above Nyquist at {sample_rate} Hz")
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    n = int(round(clip_seconds * sample_rate))
    n_train = int(round(0.8 * n_per_class))
    entries = []
    for ci, spec in enumerate(specs):
        order = np.random.default_rng([seed, ci, 1_000_003]).permutation(n_per_class)
        for k in range(n_per_class):
            x = render_clip(spec, n, sample_rate, np.random.default_rng([seed, ci, k]))
            cid = f"{spec.class_id}_{k:04d}"
            rel = f"wavs/{cid}.wav"
            write_wav(out / rel, AudioClip(x, sample_rate, clip_id=cid))
            split = "train" if order[k] < n_train else "eval"
            entries.append(ClipEntry(cid, rel, (spec.class_id,), split))
    manifest = DatasetManifest(entries, [s.class_id for s in specs], sample_rate, clip_seconds, out)
    manifest.check()
    manifest.save(out / "manifest.tsv")
    log.info("synthesised %d clips (%d classes) under %s, seed=%d", len(entries), len(specs), out, seed)
    return manifest


@dataclass(frozen=True)
class MixturePair:
    clip_a: str
    clip_b: str
    mix_seed: int


# pair counts of the named evaluation protocols; None means one pair per eval clip
EVAL_SET_PRESETS = {"desk": None, "esc50": 2000}


def make_mixture_eval_set(manifest: DatasetManifest, n_pairs=None, seed=0, preset=None) -> list:
    """Pair each sampled eval clip with a uniformly drawn clip of a disjoint class.

    With ``n_pairs`` equal to the eval-split size (the default) every eval clip
    leads exactly one pair.

    Args:
        manifest: dataset whose ``eval`` split is the pool.
        n_pairs: number of pairs; overrides ``preset``.
        seed: pairing and mix-offset seed.
        preset: ``"desk"`` or ``"esc50"`` (2,000 pairs).
    """
    if preset is not None:
        if preset not in EVAL_SET_PRESETS:
            raise ValueError(f"unknown eval-set preset {preset!r}")
        n_pairs = EVAL_SET_PRESETS[preset] if n_pairs is None else n_pairs
    pool = manifest.split("eval")
    if len({lab for e in pool for lab in e.labels}) < 2:
        raise ValueError("eval split needs at least 2 classes for cross-class mixing")
    n_pairs = len(pool) if n_pairs is None else n_pairs
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    leads = [pool[order[i % len(pool)]] for i in range(n_pairs)]
    pairs = []
    for i, a in enumerate(leads):
        cands = [e for e in pool if not set(e.labels) & set(a.labels)]
        if not cands:
            raise ValueError(f"no cross-class partner for {a.clip_id}")
        b = cands[int(rng.integers(len(cands)))]
        pairs.append(MixturePair(a.clip_id, b.clip_id, int(rng.integers(2 ** 31))))
    return pairs


def save_pairs(pairs, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["clip_a", "clip_b", "mix_seed"])
        for p in pairs:
            w.writerow([p.clip_a, p.clip_b, p.mix_seed])


def load_pairs(path) -> list:
    with open(path, newline="") as f:
        return [MixturePair(r["clip_a"], r["clip_b"], int(r["mix_seed"])) for r in csv.DictReader(f, delimiter="\t")]


def _wav_info(path):
    from scipy.io import wavfile

    sr, data = wavfile.read(str(path), mmap=True)
    return sr, data.shape[0]


def ingest_wav_folder(root, layout="folder-per-class", clip_length=None, csv_name="manifest.csv",
                      train_fraction=0.8, seed=0) -> DatasetManifest:
    """Build a manifest over existing wavs.

    ``folder-per-class``: ``root/<class>/*.wav``. ``csv-manifest``: ``root/<csv_name>``
    with a ``filename`` (or ``path``) column and a ``category`` (or ``label``/``labels``,
    ``;``-separated) column, plus an optional ``split`` column. Files are looked up
    relative to ``root`` and then ``root/audio``.

    Clips shorter than ``clip_length`` seconds are left out and listed in
    ``manifest.rejected``. A sample-rate mismatch across files is an error.
    """
    root = Path(root)
    items = []  # (rel_path, labels, split or None)
    if layout == "folder-per-class":
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            wavs = sorted(d.glob("*.wav"))
            if not wavs:
                raise ValueError(f"empty class folder: {d.name}")
            items += [(str(w.relative_to(root)), (d.name,), None) for w in wavs]
    elif layout == "csv-manifest":
        with open(root / csv_name, newline="") as f:
            for i, r in enumerate(csv.DictReader(f), start=2):
                name = r.get("filename") or r.get("path")
                labels = r.get("category") or r.get("label") or r.get("labels")
                if not name or not labels:
                    raise ValueError(f"{csv_name} row {i}: missing filename or label")
                rel = name if (root / name).exists() else f"audio/{name}"
                if not (root / rel).exists():
                    raise ValueError(f"{csv_name} row {i}: file not found: {name}")
                items.append((rel, tuple(labels.split(";")), r.get("split") or None))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if not items:
        raise ValueError(f"no wav files under {root}")

    rates, lengths = {}, {}
    for rel, _, _ in items:
        rates[rel], lengths[rel] = _wav_info(root / rel)
    if len(set(rates.values())) > 1:
        common = max(set(rates.values()), key=list(rates.values()).count)
        offenders = [f"{r} ({sr} Hz)" for r, sr in rates.items() if sr != common]
        raise ValueError(f"mixed sample rates (expected {common} Hz): " + ", ".join(offenders))
    sr = next(iter(rates.values()))
    if clip_length is None:
        clip_length = min(lengths.values()) / sr
    need = int(round(clip_length * sr))
    rejected = [f"{rel}: {lengths[rel]} samples < {need}" for rel, _, _ in items if lengths[rel] < need]
    kept = [it for it in items if lengths[it[0]] >= need]

    classes = sorted({lab for _, labs, _ in kept for lab in labs})
    rng = np.random.default_rng(seed)
    by_class = {}
    for it in kept:
        by_class.setdefault(it[1][0], []).append(it)
    split_of = {}
    for cls in sorted(by_class):
        group = by_class[cls]
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        for rank, j in enumerate(order):
            rel, _, given = group[j]
            split_of[rel] = given or ("train" if rank < n_train else "eval")
    entries = []
    for rel, labs, _ in kept:
        cid = Path(rel).with_suffix("").as_posix().replace("/", "__")
        entries.append(ClipEntry(cid, rel, labs, split_of[rel]))
    manifest = DatasetManifest(entries, classes, sr, clip_length, root, rejected)
    for r in rejected:
        log.warning("rejected %s", r)
    return manifest

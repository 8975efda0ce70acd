import csv
import hashlib

import numpy as np
import pytest

from caresep.datagen import (
    ClipEntry, DatasetManifest, SoundClassSpec, default_class_specs, ingest_wav_folder, load_pairs,
    make_mixture_eval_set, save_pairs, synth_dataset,
)
from caresep.dsp import AudioClip, stft, write_wav


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    return synth_dataset(n_per_class=50, clip_seconds=0.5, seed=3, out_dir=tmp_path_factory.mktemp("syn"))


def test_counts_and_splits(default_data):
    m = default_data
    assert len(m.entries) == 200
    assert len(m.split("train")) == 160 and len(m.split("eval")) == 40
    assert not {e.clip_id for e in m.split("train")} & {e.clip_id for e in m.split("eval")}
    for cls in m.classes:
        assert sum(cls in e.labels for e in m.split("eval")) == 10
    assert all(len(e.labels) == 1 for e in m.entries)


def test_manifest_roundtrip(default_data):
    m = DatasetManifest.load(default_data.root / "manifest.tsv")
    assert m.entries == default_data.entries and m.classes == default_data.classes
    clip = m.load_clip(m.entries[0])
    assert len(clip) == 8000 and clip.labels.sum() == 1


def test_same_seed_same_bytes(tmp_path):
    specs = default_class_specs()[:2]
    digests = []
    for d in ("a", "b"):
        synth_dataset(specs, n_per_class=4, clip_seconds=0.1, seed=11, out_dir=tmp_path / d)
        digests.append(sorted(hashlib.sha256(p.read_bytes()).hexdigest() for p in (tmp_path / d / "wavs").iterdir()))
    assert digests[0] == digests[1]
    synth_dataset(specs, n_per_class=4, clip_seconds=0.1, seed=12, out_dir=tmp_path / "c")
    assert digests[0] != sorted(hashlib.sha256(p.read_bytes()).hexdigest() for p in (tmp_path / "c" / "wavs").iterdir())


def test_synth_errors(tmp_path):
    a = SoundClassSpec("a", "band-noise", {"low_hz": (100.0, 300.0), "high_hz": (900.0, 1000.0)})
    b = SoundClassSpec("b", "band-noise", {"low_hz": (200.0, 400.0), "high_hz": (950.0, 1100.0)})
    with pytest.raises(ValueError, match="overlapping"):
        synth_dataset([a, b], out_dir=tmp_path)
    with pytest.raises(ValueError, match="2 classes"):
        synth_dataset([a], out_dir=tmp_path)
    with pytest.raises(ValueError, match="4 clips"):
        synth_dataset(default_class_specs(), n_per_class=3, out_dir=tmp_path)
    with pytest.raises(ValueError, match="Nyquist"):
        synth_dataset(default_class_specs(), sample_rate=8000, n_per_class=4, out_dir=tmp_path)
    with pytest.raises(ValueError, match="family"):
        SoundClassSpec("x", "whistle", {})


def test_classes_linearly_separable(default_data):
    """Ridge one-vs-rest on time-averaged log spectra, trained on train, scored on eval."""
    def features(split):
        clips = default_data.load_split(split)
        x = np.stack([np.log(np.abs(stft(c).values) ** 2 + 1e-8).mean(axis=0) for c in clips])
        return x, np.array([c.labels.argmax() for c in clips])

    xtr, ytr = features("train")
    xev, yev = features("eval")
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-6
    xtr, xev = (xtr - mu) / sd, (xev - mu) / sd
    xtr1 = np.hstack([xtr, np.ones((len(xtr), 1))])
    targets = np.eye(len(default_data.classes))[ytr]
    w = np.linalg.solve(xtr1.T @ xtr1 + 1.0 * np.eye(xtr1.shape[1]), xtr1.T @ targets)
    pred = (np.hstack([xev, np.ones((len(xev), 1))]) @ w).argmax(1)
    assert (pred == yev).mean() >= 0.95


# -- mixture pairs -------------------------------------------------------------

def mock_manifest(n_classes, per_class, eval_only=True):
    entries = [
        ClipEntry(f"c{c}_{k}", f"c{c}/{k}.wav", (f"c{c}",), "eval" if eval_only or k % 5 == 0 else "train")
        for c in range(n_classes) for k in range(per_class)
    ]
    return DatasetManifest(entries, [f"c{c}" for c in range(n_classes)], 44100, 5.0)


def test_esc50_preset_2000_pairs():
    m = mock_manifest(50, 40)
    pairs = make_mixture_eval_set(m, preset="esc50", seed=0)
    assert len(pairs) == 2000
    assert len({p.clip_a for p in pairs}) == 2000
    labels = {e.clip_id: set(e.labels) for e in m.entries}
    assert all(not labels[p.clip_a] & labels[p.clip_b] for p in pairs)


def test_desk_pairs(default_data, tmp_path):
    pairs = make_mixture_eval_set(default_data, seed=5, preset="desk")
    assert len(pairs) == 40
    assert sorted(p.clip_a for p in pairs) == sorted(e.clip_id for e in default_data.split("eval"))
    assert pairs == make_mixture_eval_set(default_data, seed=5)
    assert pairs != make_mixture_eval_set(default_data, seed=6)
    save_pairs(pairs, tmp_path / "p.tsv")
    assert load_pairs(tmp_path / "p.tsv") == pairs


def test_pairs_errors():
    with pytest.raises(ValueError, match="2 classes"):
        make_mixture_eval_set(mock_manifest(1, 5))
    with pytest.raises(ValueError, match="preset"):
        make_mixture_eval_set(mock_manifest(2, 5), preset="audioset")


# -- ingestion -----------------------------------------------------------------

def tone(n, sr=8000):
    return AudioClip(0.1 * np.sin(np.arange(n) * 0.3), sr)


def test_folder_per_class(tmp_path):
    for c in ("dog", "rain"):
        (tmp_path / c).mkdir()
        for k in range(3):
            write_wav(tmp_path / c / f"{k}.wav", tone(800))
    m = ingest_wav_folder(tmp_path)
    assert len(m.entries) == 6 and m.classes == ["dog", "rain"]
    assert m.clip_length == 0.1
    assert len(m.split("train")) + len(m.split("eval")) == 6


def test_short_clips_rejected(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_wav(tmp_path / "a" / "long.wav", tone(800))
    write_wav(tmp_path / "a" / "short.wav", tone(100))
    write_wav(tmp_path / "b" / "long.wav", tone(800))
    m = ingest_wav_folder(tmp_path, clip_length=0.1)
    assert len(m.entries) == 2
    assert len(m.rejected) == 1 and "short.wav" in m.rejected[0]


def test_csv_manifest(tmp_path):
    (tmp_path / "audio").mkdir()
    rows = [("1.wav", "dog"), ("2.wav", "rain")]
    for name, _ in rows:
        write_wav(tmp_path / "audio" / name, tone(800))
    with open(tmp_path / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "category"])
        w.writerows(rows + [("3.wav", "dog")])
    with pytest.raises(ValueError, match="row 4.*3.wav"):
        ingest_wav_folder(tmp_path, layout="csv-manifest")
    write_wav(tmp_path / "audio" / "3.wav", tone(800))
    m = ingest_wav_folder(tmp_path, layout="csv-manifest")
    assert len(m.entries) == 3 and m.classes == ["dog", "rain"]


def test_esc50_layout_fifty_classes(tmp_path):
    for c in range(50):
        d = tmp_path / f"class{c:02d}"
        d.mkdir()
        write_wav(d / "a.wav", tone(80))
    m = ingest_wav_folder(tmp_path, train_fraction=0.0)
    assert len(m.classes) == 50 and len(m.split("eval")) == 50

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from caresep.dsp import AudioClip
from caresep.model import tiny_config
from caresep.queries import ROWS, SeparationSystem
from caresep.training import (
    ClipBank, NonFiniteLoss, TrainConfig, Trainer, batches, epoch_triplets, load_system, lr_schedule,
    make_triplets, pretrain_classifier, run_ablation_grid, save_system, separation_loss, tagging_loss,
)

CFG = tiny_config(n_classes=4)


def clip(x, labels=None, cid=""):
    return AudioClip(np.asarray(x, dtype=np.float64), 8000, labels, cid)


# -- losses -------------------------------------------------------------------

def test_loss_perfect_estimate_hits_floor():
    ref = np.random.default_rng(0).standard_normal(1000)
    cfg = TrainConfig()
    assert separation_loss(ref, ref, cfg) == pytest.approx(-cfg.lambda_sdr * cfg.sdr_clamp)


def test_loss_zero_estimate():
    ref = np.random.default_rng(1).standard_normal(1000)
    ref /= np.linalg.norm(ref)
    assert separation_loss(np.zeros(1000), ref) == pytest.approx(np.mean(np.abs(ref)), rel=1e-12)


def test_loss_rejects_silent_reference():
    with pytest.raises(ValueError, match="all-zero"):
        separation_loss(np.ones(10), np.zeros(10))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), g=st.floats(0.0, 3.0))
def test_loss_floor_property(seed, g):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(256)
    est = ref + g * rng.standard_normal(256)
    cfg = TrainConfig()
    assert separation_loss(est, ref, cfg) >= -cfg.lambda_sdr * cfg.sdr_clamp - 1e-12


def test_tagging_loss_zero_logits():
    assert tagging_loss(np.zeros((2, 4)), np.array([[1, 0, 0, 1], [0, 1, 0, 0]])) == pytest.approx(math.log(2))


def test_tagging_loss_limit():
    y = np.array([[1, 0, 1, 0]])
    assert tagging_loss(60.0 * (2 * y - 1), y) < 1e-20


def test_tagging_loss_brute_force(rng):
    x = rng.standard_normal((5, 4)) * 3
    y = (rng.random((5, 4)) > 0.5).astype(int)
    p = 1 / (1 + np.exp(-x))
    ref = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
    assert abs(tagging_loss(x, y) - ref) < 1e-10


def test_tagging_loss_label_check():
    with pytest.raises(ValueError, match="0/1"):
        tagging_loss(np.zeros((1, 2)), np.array([[0.5, 1]]))


# -- schedule -------------------------------------------------------------------

@pytest.mark.parametrize("epoch,mult", [(0, 0.05), (1, 0.1), (2, 0.2), (3, 0.2), (12, 0.2), (13, 0.1), (23, 0.05), (33, 0.05), (100, 0.05)])
def test_lr_schedule(epoch, mult):
    assert lr_schedule(epoch) == pytest.approx(mult)


def test_lr_schedule_floor_and_errors():
    assert all(lr_schedule(e) >= 0.05 for e in range(3, 200))
    with pytest.raises(ValueError):
        lr_schedule(-1)


# -- triplets -------------------------------------------------------------------

def test_make_triplets():
    a = clip(np.sin(np.arange(500)), [1, 0, 0, 0], "a")
    b = clip(np.cos(np.arange(500) * 0.3), [0, 1, 0, 0], "b")
    t1, t2 = make_triplets(a, b, seed=0)
    assert t1.mixture is t2.mixture
    np.testing.assert_array_equal(t1.mixture.samples, t1.target.samples + t2.target.samples)
    assert t1.anchor is t1.target and t2.anchor is t2.target
    # joint-tagging target is the OR of the two source labels
    assert t1.mixture.labels.tolist() == [1, 1, 0, 0]
    with pytest.raises(ValueError, match="distinct"):
        make_triplets(a, a)


def test_epoch_triplets_cross_class_and_cropped(tiny_data):
    bank = ClipBank.from_clips(tiny_data.load_split("train"))
    cfg = TrainConfig(segment_frames=32)
    pairs = epoch_triplets(bank, 0, cfg, CFG.stft_hop)
    assert len(pairs) == len(bank.clips)
    for t1, t2 in pairs:
        assert len(t1.mixture) == 31 * CFG.stft_hop
        assert not (t1.target.labels & t2.target.labels).any()
    assert [p[0].mixture.clip_id for p in pairs] == [p[0].mixture.clip_id for p in epoch_triplets(bank, 0, cfg, CFG.stft_hop)]
    assert all(len(b) == 4 for b in batches(pairs, 4))


# -- steps -------------------------------------------------------------------

def _overfit_pair():
    rng = np.random.default_rng(3)
    t = np.arange(31 * 16) / 8000
    a = clip(0.3 * np.sin(2 * np.pi * 250 * t), [1, 0, 0, 0], "a")
    spec = np.fft.rfft(rng.standard_normal(t.size))
    spec[np.fft.rfftfreq(t.size, 1 / 8000) < 2000] = 0
    b = clip(np.fft.irfft(spec, t.size), [0, 1, 0, 0], "b")
    return list(make_triplets(a, b, 0))


def test_overfit_two_clips():
    # one mixture of two fixed clips, one target: the loss must fall fast
    from caresep.model import desk_config

    rng = np.random.default_rng(3)
    t = np.arange(63 * 64) / 16000
    a = AudioClip(0.3 * np.sin(2 * np.pi * 300 * t), 16000, np.array([1, 0]), "a")
    spec = np.fft.rfft(rng.standard_normal(t.size))
    spec[np.fft.rfftfreq(t.size, 1 / 16000) < 3000] = 0
    b = AudioClip(np.fft.irfft(spec, t.size), 16000, np.array([0, 1]), "b")
    batch = [make_triplets(a, b, 0)[0]]
    s = SeparationSystem(desk_config(n_classes=2), ROWS["E"], seed=0)
    tr = Trainer(s, TrainConfig(base_lr=2e-2, warmup=(1.0,), lr_floor=1.0, grad_clip=1.0))
    recs = [tr.train_step(batch) for _ in range(50)]
    # the total loss is negative from the start (SDR term), so compare its positive MAE part
    assert recs[-1]["mae"] < 0.5 * recs[0]["mae"]
    assert recs[-1]["loss"] < recs[0]["loss"]


def test_identical_seeds_identical_trajectories():
    def run():
        s = SeparationSystem(CFG, ROWS["E"], seed=4)
        tr = Trainer(s, TrainConfig(base_lr=1e-2))
        batch = _overfit_pair()
        recs = [tr.train_step(batch)["loss"] for _ in range(10)]
        return recs, [p.detach().clone() for p in s.parameters()]

    (l1, p1), (l2, p2) = run(), run()
    assert l1 == l2
    assert all(torch.equal(a, b) for a, b in zip(p1, p2))


def test_metrics_log(tmp_path):
    s = SeparationSystem(CFG, ROWS["F"], seed=0)
    tr = Trainer(s, TrainConfig(base_lr=2e-3), log_path=tmp_path / "m.tsv")
    rec = tr.train_step(_overfit_pair())
    assert rec["lr"] == pytest.approx(2e-3 * 0.05)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["step", "epoch", "lr", "loss", "mae", "sdr", "bce", "grad_norm"]
    assert len(lines) == 2


def test_joint_tagging_adds_bce():
    s = SeparationSystem(CFG, ROWS["E"], seed=0)
    on = Trainer(s, TrainConfig(joint_tagging=True)).compute_loss(_overfit_pair())
    off = Trainer(s, TrainConfig()).compute_loss(_overfit_pair())
    assert on[1]["bce"] > 0 and off[1]["bce"] == 0.0
    assert float(on[0].detach()) == pytest.approx(float(off[0].detach()) + 0.5 * on[1]["bce"], rel=1e-5)


def test_non_finite_loss_dumps(tmp_path):
    s = SeparationSystem(CFG, ROWS["E"], seed=0)
    tr = Trainer(s, TrainConfig(), dump_dir=tmp_path)
    with torch.no_grad():
        s.separator.decoder.patch_up.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        tr.train_step(_overfit_pair())
    assert list(tmp_path.glob("nonfinite_step0.*"))


# -- checkpoints and pretraining -------------------------------------------------------

def test_system_checkpoint_round_trip(tmp_path, tiny_classifier):
    s = SeparationSystem(CFG, ROWS["G"], tiny_classifier, seed=0)
    save_system(tmp_path / "a.st", s, seed=0, step=5)
    back = load_system(tmp_path / "a.st")
    assert back.ablation == s.ablation
    save_system(tmp_path / "b.st", back, seed=0, step=5)
    assert (tmp_path / "a.st").read_bytes() == (tmp_path / "b.st").read_bytes()
    assert not any(p.requires_grad for p in back.query_exclusive_parameters())


def test_pretrain_rejects_single_class(tiny_data):
    clips = [c for c in tiny_data.load_split("train") if c.labels[0]]
    with pytest.raises(ValueError, match="2 classes"):
        pretrain_classifier(ClipBank.from_clips(clips), clips, CFG, TrainConfig(pretrain_epochs=1))


def test_pretrain_reports_map(tiny_data, tmp_path):
    _, report = pretrain_classifier(ClipBank.from_clips(tiny_data.load_split("train")), tiny_data.load_split("eval"),
                                    CFG, TrainConfig(pretrain_epochs=1, segment_frames=32), out_path=tmp_path / "c.st")
    assert 0.0 <= report["mAP"] <= 1.0 and (tmp_path / "c.st").exists()


def test_ablation_grid_rows(tiny_data, tiny_classifier, tmp_path):
    from caresep.datagen import make_mixture_eval_set
    rows = {r: ROWS[r] for r in ("C", "F")}
    cfg = TrainConfig(max_epochs=1, segment_frames=32)
    res = run_ablation_grid(rows, cfg, ClipBank.from_clips(tiny_data.load_split("train")), tiny_data.load_split("eval"),
                            make_mixture_eval_set(tiny_data), CFG, tiny_classifier, out_dir=tmp_path)
    assert [r.row for r in res] == ["C", "F"]
    for r in res:
        row = r.as_row()
        assert all(np.isfinite(row[k]) for k in ("mixture_sdr", "clean_sdr", "silence_sdr"))
    assert (tmp_path / "row_C.safetensors").exists()

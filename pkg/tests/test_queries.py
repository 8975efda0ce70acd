import numpy as np
import pytest
import torch

from caresep.dsp import AudioClip
from caresep.model import tiny_config
from caresep.model.checkpoint import load_checkpoint
from caresep.queries import (
    ROWS, AblationConfig, AnchorPolicy, ClassMeanAnchor, EmbeddingSet, SeparationSystem, build_external_query_net,
    compute_query, read_embedding_dump, resolve_queries, select_anchor, write_embedding_dump,
)
from caresep.training import TrainConfig, Trainer, epoch_triplets, ClipBank, batches

CFG = tiny_config(n_classes=4)


def system(row, pretrained=None, seed=0):
    return SeparationSystem(CFG, ROWS[row], pretrained if ROWS[row].init else None, seed=seed)


def labelled(cls, k, n=400, sr=8000):
    y = np.zeros(4, np.int8)
    y[cls] = 1
    x = np.random.default_rng([cls, k]).standard_normal(n) * 0.1
    return AudioClip(x, sr, y, f"c{cls}_{k}")


# -- row table ----------------------------------------------------------------

def test_rows_match_ablation_table():
    flags = {r: (a.grad, a.init, a.shared_encoder) for r, a in ROWS.items()}
    assert flags == {
        "A": (False, True, False), "B": (True, True, False), "C": (True, True, True),
        "D": (False, True, True), "E": (True, False, True), "F": (False, False, True),
        "G": (False, True, False),
    }
    assert ROWS["A"].separator_block == ROWS["B"].separator_block == "conv"


def test_init_requires_checkpoint():
    with pytest.raises(ValueError, match="pretrained"):
        SeparationSystem(CFG, ROWS["C"], None)


def test_shared_requires_swin():
    with pytest.raises(ValueError, match="swin"):
        SeparationSystem(CFG, AblationConfig(shared_encoder=True, init=False, separator_block="conv"))


# -- shared toggle --------------------------------------------------------------

@pytest.mark.parametrize("row", ["C", "D", "E", "F"])
def test_shared_storage_identity(row, tiny_classifier):
    s = system(row, tiny_classifier)
    assert s.query_exclusive_parameters() == []
    q = dict(s.query_encoder().named_parameters())
    sep = dict(s.separator.encoder.named_parameters())
    assert q.keys() == sep.keys()
    assert all(q[k].data_ptr() == sep[k].data_ptr() for k in q)
    with torch.no_grad():
        next(iter(q.values())).add_(1.0)
    assert torch.equal(next(iter(q.values())), next(iter(sep.values())))


@pytest.mark.parametrize("row", ["A", "B", "G"])
def test_external_parameters_disjoint(row, tiny_classifier):
    s = system(row, tiny_classifier)
    qp = {p.data_ptr() for p in s.query_exclusive_parameters()}
    sp = {p.data_ptr() for p in s.separator.parameters()}
    assert qp and not qp & sp


# -- init toggle ----------------------------------------------------------------

@pytest.mark.parametrize("row", ["A", "B", "C", "D", "G"])
def test_init_bit_equal_at_step0(row, tiny_classifier):
    arrays, _ = load_checkpoint(tiny_classifier)
    s = system(row, tiny_classifier)
    for k, v in s.query_encoder().state_dict().items():
        assert np.array_equal(v.numpy(), arrays["encoder." + k]), k


@pytest.mark.parametrize("row", ["E", "F"])
def test_init_off_differs_from_checkpoint(row, tiny_classifier):
    arrays, _ = load_checkpoint(tiny_classifier)
    s = system(row)
    w = s.query_encoder().state_dict()["patch_embed.proj.weight"].numpy()
    assert not np.array_equal(w, arrays["encoder.patch_embed.proj.weight"])


def test_external_net_independent(tiny_classifier):
    s = system("G", tiny_classifier)
    fresh = build_external_query_net(CFG, None, seed=0)
    a = fresh.encoder.patch_embed.proj.weight
    b = s.separator.encoder.patch_embed.proj.weight
    assert not torch.equal(a, b)
    before = b.clone()
    with torch.no_grad():
        a.mul_(0.0)
    assert torch.equal(b, before)


def test_checkpoint_config_mismatch(tiny_classifier):
    with pytest.raises(ValueError, match="mismatch"):
        build_external_query_net(tiny_config(n_classes=5), tiny_classifier)


# -- grad toggle ----------------------------------------------------------------

def _train_steps(s, data, n=2):
    bank = ClipBank.from_clips(data.load_split("train"))
    tr = Trainer(s, TrainConfig(segment_frames=32, batch_size=4))
    tr.refresh_query_cache(bank)
    trips = epoch_triplets(bank, 0, tr.cfg, CFG.stft_hop)
    for b, _ in zip(batches(trips, 4), range(n)):
        tr.train_step(b)
    return tr


@pytest.mark.parametrize("row", ["A", "G"])
def test_grad_off_freezes_external_net(row, tiny_data, tiny_classifier):
    s = system(row, tiny_classifier)
    before = [p.detach().clone() for p in s.query_exclusive_parameters()]
    _train_steps(s, tiny_data, n=3)
    grads = [p.grad for p in s.query_exclusive_parameters()]
    total = sum(float((g.double() ** 2).sum()) for g in grads if g is not None)
    assert total == 0.0
    assert all(torch.equal(a, p) for a, p in zip(before, s.query_exclusive_parameters()))


def test_grad_on_updates_external_net(tiny_data, tiny_classifier):
    s = system("B", tiny_classifier)
    before = [p.detach().clone() for p in s.query_exclusive_parameters()]
    _train_steps(s, tiny_data, n=2)
    assert any(not torch.equal(a, p) for a, p in zip(before, s.query_exclusive_parameters()))


@pytest.mark.parametrize("row,expect", [("D", False), ("F", False), ("C", True), ("E", True)])
def test_query_branch_gradient_shared(row, expect, tiny_classifier):
    # separation branch zeroed: the loss depends on the encoder only through the query
    s = system(row, tiny_classifier)
    x = torch.as_tensor(np.random.default_rng(0).standard_normal((2, 400)), dtype=torch.float32)
    q = s.embed(x)
    assert q.requires_grad is expect
    if expect:
        q.sum().backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in s.separator.encoder.parameters())


def test_grad_off_uses_epoch_cache(tiny_data, tiny_classifier):
    s = system("D", tiny_classifier)
    tr = _train_steps(s, tiny_data, n=1)
    assert len(tr.query_cache) == len(tiny_data.split("train"))
    on = _train_steps(system("C", tiny_classifier), tiny_data, n=1)
    assert on.query_cache == {}


# -- queries and anchors ------------------------------------------------------------

def test_compute_query_deterministic_and_sized(tiny_classifier):
    s = system("C", tiny_classifier)
    a = labelled(0, 0)
    q1, q2 = compute_query(a, s), compute_query(a, s)
    assert q1.values.shape == (CFG.embed_dim,)
    assert np.array_equal(q1.values, q2.values)


def test_compute_query_rejects_silence_and_wrong_ablation(tiny_classifier):
    s = system("C", tiny_classifier)
    with pytest.raises(ValueError, match="silent"):
        compute_query(AudioClip(np.zeros(400), 8000), s)
    with pytest.raises(ValueError, match="ablation"):
        compute_query(labelled(0, 0), s, ROWS["D"])


def test_anchor_self():
    t = labelled(0, 0)
    assert select_anchor(t, [t], AnchorPolicy("self")).clip_id == t.clip_id


def test_anchor_same_class_other_forced():
    a, b, c = labelled(0, 0), labelled(0, 1), labelled(1, 0)
    for seed in range(5):
        assert select_anchor(a, [a, b, c], AnchorPolicy(), seed).clip_id == b.clip_id


def test_anchor_same_class_other_seeded():
    pool = [labelled(0, k) for k in range(10)]
    picks = [select_anchor(pool[0], pool, AnchorPolicy(), 3).clip_id for _ in range(3)]
    assert len(set(picks)) == 1 and picks[0] != pool[0].clip_id


def test_anchor_unsatisfiable():
    a = labelled(0, 0)
    with pytest.raises(ValueError):
        select_anchor(a, [a, labelled(1, 0)], AnchorPolicy())
    with pytest.raises(ValueError, match="class-mean"):
        select_anchor(a, [a, labelled(0, 1)], AnchorPolicy("class-mean", 3))
    with pytest.raises(ValueError):
        AnchorPolicy("nearest")


def test_class_mean_equals_mean_of_three(tiny_classifier):
    s = system("C", tiny_classifier)
    pool = [labelled(0, k) for k in range(6)]
    anchor = select_anchor(pool[0], pool, AnchorPolicy("class-mean", 3), seed=1)
    assert isinstance(anchor, ClassMeanAnchor) and len(anchor.clips) == 3
    separate = np.mean([compute_query(c, s).values for c in anchor.clips], axis=0)
    np.testing.assert_allclose(compute_query(anchor, s).values, separate, rtol=1e-12)
    batch = resolve_queries(s, [pool[0]], pool, AnchorPolicy("class-mean", 3), seed=1)
    np.testing.assert_allclose(batch[0], separate, rtol=1e-6, atol=1e-7)


def test_embedding_dump_round_trip(tmp_path):
    es = EmbeddingSet(["a", "b"], [("tone",), ("tone", "clicks")], np.arange(6.0).reshape(2, 3) / 7, "query")
    write_embedding_dump(es, tmp_path / "e.tsv")
    back = read_embedding_dump(tmp_path / "e.tsv")
    assert back.clip_ids == es.clip_ids and back.labels == es.labels and back.kind == "query"
    assert np.array_equal(back.vectors, es.vectors)
    assert len(back.of_class("tone")) == 2

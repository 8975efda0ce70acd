"""Query embeddings: shared or external query encoders, gradient routing, anchors, dumps."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dsp import AudioClip
from .model import ModelConfig, SeparatorModel, SharedEncoder
from .model.checkpoint import load_checkpoint, load_into
from .model.frontend import BandSplitFrontend
from .model.network import analyse


@dataclass(frozen=True)
class AblationConfig:
    """The three query-embedding toggles, plus the separator block type.

    ``grad``: the query path receives gradients. ``init``: the query encoder
    starts from a pretrained classifier. ``shared_encoder``: the separator's
    own encoder computes the queries.
    """

    grad: bool = True
    init: bool = True
    shared_encoder: bool = True
    separator_block: str = "swin"

    def to_dict(self):
        return asdict(self)


ROWS = {
    # rows A/B pair an external query encoder with an attention-free separator
    "A": AblationConfig(grad=False, init=True, shared_encoder=False, separator_block="conv"),
    "B": AblationConfig(grad=True, init=True, shared_encoder=False, separator_block="conv"),
    "C": AblationConfig(grad=True, init=True, shared_encoder=True),
    "D": AblationConfig(grad=False, init=True, shared_encoder=True),
    "E": AblationConfig(grad=True, init=False, shared_encoder=True),
    "F": AblationConfig(grad=False, init=False, shared_encoder=True),
    "G": AblationConfig(grad=False, init=True, shared_encoder=False),
}


@dataclass(frozen=True)
class QueryEmbedding:
    values: np.ndarray
    source: str = "anchor-derived"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValueError("query embedding has non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AnchorPolicy:
    mode: str = "same-class-other"  # "self" | "same-class-other" | "class-mean"
    pool_size: int = 3

    def __post_init__(self):
        if self.mode not in ("self", "same-class-other", "class-mean"):
            raise ValueError(f"unknown anchor mode {self.mode!r}")


@dataclass(frozen=True)
class ClassMeanAnchor:
    """Marker returned for ``class-mean``: the query is the mean embedding of ``clips``."""

    clips: tuple
    clip_id: str = ""


class QueryNet(nn.Module):
    """Stand-alone encoder + connector used as an external query network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = BandSplitFrontend(cfg.stft_window, cfg.stft_hop, cfg.n_bands, cfg.sample_rate)
        self.encoder = SharedEncoder(cfg)

    def embed(self, wave):
        return self.encoder.embed(analyse(self.frontend, self.cfg, wave)[2])[0]


def build_external_query_net(config: ModelConfig, init_from=None, seed: int = 0) -> QueryNet:
    """Independently parameterised encoder+connector, optionally loaded from a classifier checkpoint."""
    qcfg = replace(config, block="swin")
    with torch.random.fork_rng():
        torch.manual_seed(seed + 7919)
        net = QueryNet(qcfg)
    if init_from is not None:
        load_encoder_checkpoint(net.encoder, init_from)
    return net


def load_encoder_checkpoint(encoder: SharedEncoder, path) -> None:
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    mine = encoder.cfg
    for k in ("latent_dim", "n_bands", "patch_size", "n_classes", "stft_window", "stft_hop", "depths", "connector_depth"):
        if getattr(cfg, k) != getattr(mine, k):
            raise ValueError(f"checkpoint/config mismatch on {k}: {getattr(cfg, k)} vs {getattr(mine, k)}")
    load_into(encoder, arrays, prefix="encoder.")


class SeparationSystem(nn.Module):
    """Separator plus whatever computes its queries, wired per an :class:`AblationConfig`."""

    def __init__(self, cfg: ModelConfig, ablation: AblationConfig = AblationConfig(), pretrained=None, seed: int = 0):
        super().__init__()
        self.ablation = ablation
        sep_cfg = replace(cfg, block=ablation.separator_block)
        if ablation.shared_encoder and sep_cfg.block != "swin":
            raise ValueError("a shared query encoder requires the swin separator")
        if ablation.init and pretrained is None:
            raise ValueError("init=True needs a pretrained classifier checkpoint")
        torch.manual_seed(seed)
        self.separator = SeparatorModel(sep_cfg)
        self.query_net = None
        if ablation.shared_encoder:
            if ablation.init:
                load_encoder_checkpoint(self.separator.encoder, pretrained)
        else:
            self.query_net = build_external_query_net(cfg, pretrained if ablation.init else None, seed)
            if not ablation.grad:
                self.query_net.requires_grad_(False)

    @property
    def cfg(self) -> ModelConfig:
        return self.separator.cfg

    def query_encoder(self) -> SharedEncoder:
        return self.separator.encoder if self.query_net is None else self.query_net.encoder

    def query_exclusive_parameters(self) -> list:
        return [] if self.query_net is None else list(self.query_net.parameters())

    def trainable_parameters(self) -> list:
        params = list(self.separator.parameters())
        if self.query_net is not None and self.ablation.grad:
            params += list(self.query_net.parameters())
        return params

    def embed(self, wave: torch.Tensor) -> torch.Tensor:
        """Query embeddings for anchors (B, L), gradient-routed per ``ablation.grad``."""
        fn = self.separator.embed if self.query_net is None else self.query_net.embed
        if self.ablation.grad:
            return fn(wave)
        with torch.no_grad():
            return fn(wave).detach()

    # -- numpy-level batch API used by the evaluation protocols ---------------
    def _dtype(self):
        return next(self.separator.parameters()).dtype

    def embed_clips(self, clips, batch_size: int = 16) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(clips), batch_size):
                x = _stack([c.samples for c in clips[i:i + batch_size]], self._dtype())
                out.append(self.embed(x).double().numpy())
        return np.concatenate(out, axis=0)

    def separate_batch(self, mixtures, queries: np.ndarray, batch_size: int = 16) -> list:
        out = []
        with torch.no_grad():
            for i in range(0, len(mixtures), batch_size):
                x = _stack(mixtures[i:i + batch_size], self._dtype())
                q = torch.as_tensor(np.asarray(queries[i:i + batch_size]), dtype=self._dtype())
                out += list(self.separator(x, q).double().numpy())
        return out

    def separation_features(self, mixtures, queries: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Token-averaged connector output of the query-conditioned mixture pass."""
        out = []
        with torch.no_grad():
            for i in range(0, len(mixtures), batch_size):
                x = _stack(mixtures[i:i + batch_size], self._dtype())
                q = torch.as_tensor(np.asarray(queries[i:i + batch_size]), dtype=self._dtype())
                enc = self.separator.encode(x)
                _, pooled, _ = self.separator.encoder.connect(enc.bottleneck, q)
                out.append(pooled.double().numpy())
        return np.concatenate(out, axis=0)


def _stack(arrays, dtype) -> torch.Tensor:
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise ValueError(f"batch members differ in length: {sorted(n)}")
    return torch.as_tensor(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), dtype=dtype)


def compute_query(anchor, model: SeparationSystem, ablation: AblationConfig | None = None) -> QueryEmbedding:
    """Embed one anchor clip (or a :class:`ClassMeanAnchor`) with the system's query encoder."""
    if ablation is not None and ablation != model.ablation:
        raise ValueError("ablation does not match the system's wiring")
    if isinstance(anchor, ClassMeanAnchor):
        vecs = [compute_query(c, model).values for c in anchor.clips]
        return QueryEmbedding(np.mean(vecs, axis=0), "class-mean")
    if not np.any(np.asarray(anchor.samples)):
        raise ValueError("silent anchor")
    return QueryEmbedding(model.embed_clips([anchor])[0])


def _shares_label(a: AudioClip, b: AudioClip) -> bool:
    return bool(np.any((np.asarray(a.labels) > 0) & (np.asarray(b.labels) > 0)))


def select_anchor(target: AudioClip, dataset, policy: AnchorPolicy, seed: int = 0):
    """Pick the anchor clip that defines the query for ``target``."""
    if policy.mode == "self":
        return target
    if target.labels is None:
        raise ValueError("anchor selection by class needs labelled clips")
    same = [c for c in dataset if c.clip_id != target.clip_id and _shares_label(c, target)]
    rng = np.random.default_rng(seed)
    if policy.mode == "same-class-other":
        if not same:
            raise ValueError(f"no other clip shares a class with {target.clip_id}")
        return same[int(rng.integers(len(same)))]
    if len(same) < policy.pool_size:
        raise ValueError(f"class-mean needs {policy.pool_size} same-class clips, found {len(same)}")
    pick = rng.choice(len(same), size=policy.pool_size, replace=False)
    return ClassMeanAnchor(tuple(same[int(i)] for i in sorted(pick)), target.clip_id)


def resolve_queries(system, targets, pool, policy: AnchorPolicy, seed: int = 0) -> np.ndarray:
    """Query matrix for ``targets`` (rows aligned), anchors drawn per ``policy``."""
    anchors = [select_anchor(t, pool, policy, seed + 7 * i) for i, t in enumerate(targets)]
    flat, owners = [], []
    for i, a in enumerate(anchors):
        members = a.clips if isinstance(a, ClassMeanAnchor) else (a,)
        flat += list(members)
        owners += [i] * len(members)
    vecs = system.embed_clips(flat)
    owners = np.asarray(owners)
    return np.stack([vecs[owners == i].mean(axis=0) for i in range(len(targets))])


@dataclass
class EmbeddingSet:
    clip_ids: list
    labels: list  # tuple of class names per clip
    vectors: np.ndarray
    kind: str  # "query" or "separation-feature"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.clip_ids) != self.vectors.shape[0]:
            raise ValueError("vectors must be (n_clips, dim) aligned with clip_ids")

    def of_class(self, name) -> np.ndarray:
        rows = [i for i, labs in enumerate(self.labels) if name in labs]
        return self.vectors[rows]


def write_embedding_dump(es: EmbeddingSet, path) -> None:
    """Tab-separated rows: clip_id, ';'-joined labels, kind, then one column per dimension."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["clip_id", "labels", "kind"] + [f"e{i}" for i in range(es.vectors.shape[1])])
        for cid, labs, v in zip(es.clip_ids, es.labels, es.vectors):
            w.writerow([cid, ";".join(labs), es.kind] + [repr(float(x)) for x in v])


def read_embedding_dump(path) -> EmbeddingSet:
    ids, labels, rows, kind = [], [], [], None
    with open(Path(path), newline="") as f:
        r = csv.reader(f, delimiter="\t")
        next(r)
        for row in r:
            ids.append(row[0])
            labels.append(tuple(row[1].split(";")) if row[1] else ())
            kind = row[2]
            rows.append([float(x) for x in row[3:]])
    return EmbeddingSet(ids, labels, np.asarray(rows), kind)

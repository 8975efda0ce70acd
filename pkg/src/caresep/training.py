"""Triplets, losses, schedule, the training loop, classifier pretraining and the ablation grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dsp import AudioClip, mix_with_energy_norm
from .model import ModelConfig
from .model.checkpoint import load_checkpoint, load_into, save_checkpoint, state_arrays
from .model.network import Encoded, analyse
from .queries import AblationConfig, QueryNet, SeparationSystem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    batch_size: int = 8  # triplets; two per mixture
    warmup: tuple = (0.05, 0.1, 0.2)
    decay_every: int = 10
    lr_floor: float = 0.05
    lambda_mae: float = 1.0
    lambda_sdr: float = 0.05
    lambda_bce: float = 0.5
    sdr_clamp: float = 30.0
    max_epochs: int = 30
    seed: int = 0
    joint_tagging: bool = False
    segment_frames: int = 64
    pretrain_epochs: int = 30
    pretrain_lr: float = 5e-3
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "warmup", tuple(self.warmup))
        errors = self.validate()
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for k in ("lambda_mae", "lambda_sdr", "lambda_bce", "weight_decay"):
            if getattr(self, k) < 0:
                errors.append(f"{k} must be >= 0")
        if self.sdr_clamp <= 0:
            errors.append("sdr_clamp must be > 0")
        if self.batch_size < 2 or self.batch_size % 2:
            errors.append("batch_size must be an even number >= 2")
        if self.base_lr <= 0:
            errors.append("base_lr must be > 0")
        return errors

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["warmup"] = list(self.betas), list(self.warmup)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# -- triplets ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainingTriplet:
    mixture: AudioClip
    target: AudioClip
    anchor: AudioClip  # query source; see Trainer.query_cache for grad=off


def make_triplets(a1: AudioClip, a2: AudioClip, seed: int = 0):
    """Energy-normalised mixture of two distinct clips and the two (mixture, source, anchor) triplets.

    Anchors are the targets themselves: the query for ``a_j`` is embedded from ``a_j``.
    """
    if a1.clip_id and a1.clip_id == a2.clip_id:
        raise ValueError("make_triplets needs two distinct clips")
    mixture, s1, s2 = mix_with_energy_norm(a1, a2, seed)
    return TrainingTriplet(mixture, s1, s1), TrainingTriplet(mixture, s2, s2)


# -- losses -----------------------------------------------------------------

def sdr_db_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-row SDR in dB; the error energy is floored at 1e-12 of the reference energy."""
    ref_e = (ref ** 2).sum(-1)
    err_e = ((ref - est) ** 2).sum(-1)
    return 10.0 * torch.log10(ref_e / (err_e + 1e-12 * ref_e))


def separation_loss_torch(est, ref, cfg: TrainConfig):
    """Per-row ``(loss, mae, sdr)``; loss = l_mae * MAE - l_sdr * clamp(SDR)."""
    if (ref ** 2).sum(-1).min() == 0:
        raise ValueError("all-zero reference")
    mae = (est - ref).abs().mean(-1)
    sdr = sdr_db_torch(est, ref)
    loss = cfg.lambda_mae * mae - cfg.lambda_sdr * sdr.clamp(-cfg.sdr_clamp, cfg.sdr_clamp)
    return loss, mae, sdr


def separation_loss(est, ref, cfg: TrainConfig = TrainConfig()) -> float:
    e = torch.as_tensor(np.asarray(getattr(est, "samples", est), dtype=np.float64))
    r = torch.as_tensor(np.asarray(getattr(ref, "samples", ref), dtype=np.float64))
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {tuple(e.shape)} vs {tuple(r.shape)}")
    return float(separation_loss_torch(e[None], r[None], cfg)[0][0])


def tagging_loss(class_logits, labels):
    """Mean binary cross-entropy with logits. Accepts tensors or arrays."""
    is_tensor = torch.is_tensor(class_logits)
    x = class_logits if is_tensor else torch.as_tensor(np.asarray(class_logits, dtype=np.float64))
    y = torch.as_tensor(np.asarray(labels.detach() if torch.is_tensor(labels) else labels), dtype=x.dtype)
    if x.shape != y.shape:
        raise ValueError(f"logits {tuple(x.shape)} vs labels {tuple(y.shape)}")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("labels must be 0/1")
    loss = F.binary_cross_entropy_with_logits(x, y)
    return loss if is_tensor else float(loss)


def lr_schedule(epoch: int, step_in_epoch: float = 0.0, cfg: TrainConfig = TrainConfig()) -> float:
    """LR multiplier: warm-up values for the first epochs, then halving every ``decay_every`` epochs down to the floor."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < len(cfg.warmup):
        return cfg.warmup[epoch]
    k = (epoch - len(cfg.warmup)) // cfg.decay_every
    return max(cfg.warmup[-1] * 0.5 ** k, cfg.lr_floor)


# -- data -------------------------------------------------------------------

@dataclass
class ClipBank:
    """In-memory clips of one split with integer class ids (first label)."""

    clips: list
    class_ids: np.ndarray

    @classmethod
    def from_clips(cls, clips):
        return cls(list(clips), np.array([int(np.argmax(c.labels)) for c in clips]))

    @property
    def sample_rate(self):
        return self.clips[0].sample_rate


def segment_samples(frames: int, hop: int) -> int:
    """Crop length giving ``frames`` STFT frames; 0 (no cropping) for ``frames <= 0``."""
    return (frames - 1) * hop if frames > 0 else 0


def _crop(clip: AudioClip, seg: int, rng) -> AudioClip:
    """Random ``seg``-sample crop; a silent crop (e.g. between clicks) moves to the nearest audible offset."""
    o = int(rng.integers(0, len(clip) - seg + 1))
    x = np.asarray(clip.samples, dtype=np.float64)
    if not np.any(x[o:o + seg]):
        audible = np.flatnonzero(np.convolve(x != 0, np.ones(seg), mode="valid") > 0)
        if audible.size == 0:
            raise ValueError(f"clip {clip.clip_id!r} is silent")
        o = int(audible[np.argmin(np.abs(audible - o))])
    return clip.with_samples(clip.samples[o:o + seg])


def epoch_triplets(bank: ClipBank, epoch: int, cfg: TrainConfig, hop: int) -> list:
    """One epoch of triplet pairs: every clip leads one mixture with a clip of another class."""
    rng = np.random.default_rng([cfg.seed, epoch, 17])
    seg = segment_samples(cfg.segment_frames, hop)
    pairs = []
    for i in rng.permutation(len(bank.clips)):
        others = np.flatnonzero(bank.class_ids != bank.class_ids[i])
        j = int(others[rng.integers(len(others))])
        a, b = bank.clips[i], bank.clips[j]
        if seg and seg < len(a):
            a, b = _crop(a, seg, rng), _crop(b, seg, rng)
        pairs.append(make_triplets(a, b, int(rng.integers(2 ** 31))))
    return pairs


def batches(pairs: list, batch_size: int):
    per = batch_size // 2
    for i in range(0, len(pairs) - per + 1, per):
        yield [t for p in pairs[i:i + per] for t in p]


# -- training loop ------------------------------------------------------------

class NonFiniteLoss(FloatingPointError):
    pass


class Trainer:
    """Owns the optimiser for a :class:`SeparationSystem`; one instance per run."""

    def __init__(self, system: SeparationSystem, cfg: TrainConfig, log_path=None, dump_dir=None):
        self.system = system
        self.cfg = cfg
        self.opt = torch.optim.AdamW(
            system.trainable_parameters(), lr=cfg.base_lr * lr_schedule(0, 0, cfg),
            betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
        )
        self.step = 0
        self.epoch = 0
        # grad=off: anchor clip_id -> query, refreshed once per epoch from the full clips
        self.query_cache: dict = {}
        self.log_path = Path(log_path) if log_path else None
        self.dump_dir = Path(dump_dir) if dump_dir else None
        if self.log_path and not self.log_path.exists():
            self.log_path.write_text("step\tepoch\tlr\tloss\tmae\tsdr\tbce\tgrad_norm\n")

    def _tensor(self, arrays):
        dt = next(self.system.separator.parameters()).dtype
        return torch.as_tensor(np.stack([np.asarray(a, dtype=np.float64) for a in arrays]), dtype=dt)

    def compute_loss(self, batch: list):
        """Total loss of a triplet batch and its parts. Mixtures shared by triplets are encoded once."""
        sep = self.system.separator
        mixes, owner = [], []
        for t in batch:
            for k, m in enumerate(mixes):
                if m is t.mixture:
                    owner.append(k)
                    break
            else:
                mixes.append(t.mixture)
                owner.append(len(mixes) - 1)
        enc = sep.encode(self._tensor([m.samples for m in mixes]))
        idx = torch.as_tensor(owner)
        pick = lambda x: x[idx]  # noqa: E731
        enc_t = Encoded(pick(enc.bands), pick(enc.scale), [pick(s) for s in enc.skips], pick(enc.bottleneck), enc.length)
        queries = self._queries(batch)
        est, _, _ = sep.decode(enc_t, queries)
        ref = self._tensor([t.target.samples for t in batch])
        loss_i, mae, sdr = separation_loss_torch(est, ref, self.cfg)
        total = loss_i.mean()
        parts = {"mae": float(mae.detach().mean()), "sdr": float(sdr.detach().mean()), "bce": 0.0}
        if self.cfg.joint_tagging:
            _, _, logits = sep.encoder.connect(enc.bottleneck, None)
            labels = np.stack([m.labels for m in mixes])  # union of source labels
            bce = tagging_loss(logits, labels)
            total = total + self.cfg.lambda_bce * bce
            parts["bce"] = float(bce.detach())
        return total, parts

    def _queries(self, batch: list) -> torch.Tensor:
        if self.query_cache and all(t.anchor.clip_id in self.query_cache for t in batch):
            return torch.stack([self.query_cache[t.anchor.clip_id] for t in batch])
        return self.system.embed(self._tensor([t.anchor.samples for t in batch]))

    def refresh_query_cache(self, bank: ClipBank) -> None:
        """Recompute the stop-gradient queries of every clip in ``bank`` (grad=off only)."""
        self.query_cache = {}
        if self.system.ablation.grad:
            return
        self.system.eval()
        dt = next(self.system.separator.parameters()).dtype
        vecs = torch.as_tensor(self.system.embed_clips(bank.clips), dtype=dt)
        self.query_cache = {c.clip_id: v for c, v in zip(bank.clips, vecs)}

    def train_step(self, batch: list) -> dict:
        lr = self.cfg.base_lr * lr_schedule(self.epoch, 0.0, self.cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.system.train()
        total, parts = self.compute_loss(batch)
        if not torch.isfinite(total):
            self._dump(batch, parts)
            raise NonFiniteLoss(f"non-finite loss at step {self.step}: {parts}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        grads = [p.grad for p in self.system.parameters() if p.grad is not None]
        gnorm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads))) if grads else 0.0
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.system.trainable_parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.step += 1
        rec = {"step": self.step, "epoch": self.epoch, "lr": lr, "loss": float(total.detach()), **parts, "grad_norm": gnorm}
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write("\t".join(_fmt(rec[k]) for k in ("step", "epoch", "lr", "loss", "mae", "sdr", "bce", "grad_norm")) + "\n")
        return rec

    def _dump(self, batch, parts):
        if not self.dump_dir:
            return
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        np.savez(
            self.dump_dir / f"nonfinite_step{self.step}.npz",
            mixtures=np.stack([t.mixture.samples for t in batch]),
            targets=np.stack([t.target.samples for t in batch]),
        )
        (self.dump_dir / f"nonfinite_step{self.step}.json").write_text(json.dumps(parts, default=str))

    def train_epoch(self, bank: ClipBank) -> dict:
        self.refresh_query_cache(bank)
        recs = [self.train_step(b) for b in batches(epoch_triplets(bank, self.epoch, self.cfg, self.system.cfg.stft_hop), self.cfg.batch_size)]
        self.epoch += 1
        keys = ("loss", "mae", "sdr", "bce", "grad_norm")
        return {"epoch": self.epoch - 1, **{k: float(np.mean([r[k] for r in recs])) for k in keys}}

    def fit(self, bank: ClipBank, epochs=None) -> list:
        history = []
        for _ in range(self.cfg.max_epochs if epochs is None else epochs):
            history.append(self.train_epoch(bank))
            log.info("epoch %d: %s", history[-1]["epoch"], history[-1])
        return history


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


# -- checkpoints --------------------------------------------------------------

def save_system(path, system: SeparationSystem, seed: int, step: int, extra=None) -> None:
    arrays = state_arrays(system.separator, "separator.")
    if system.query_net is not None:
        arrays.update(state_arrays(system.query_net, "query_net."))
    cfg = replace(system.cfg, block="swin").to_dict()
    save_checkpoint(path, arrays, kind="separator", config=cfg, seed=seed, step=step,
                    extra={"ablation": system.ablation.to_dict(), **(extra or {})})


def load_system(path) -> SeparationSystem:
    arrays, meta = load_checkpoint(path)
    if meta["kind"] != "separator":
        raise ValueError(f"{path}: expected a separator checkpoint, got {meta['kind']!r}")
    cfg = ModelConfig.from_dict(meta["config"])
    ablation = AblationConfig(**meta["extra"]["ablation"])
    # build without init; weights come from the file
    system = SeparationSystem(cfg, replace(ablation, init=False), seed=meta["seed"])
    system.ablation = ablation
    if system.query_net is not None and not ablation.grad:
        system.query_net.requires_grad_(False)
    load_into(system.separator, arrays, "separator.")
    if system.query_net is not None:
        load_into(system.query_net, arrays, "query_net.")
    return system


# -- classifier pretraining -------------------------------------------------------

def pretrain_classifier(train: ClipBank, eval_clips: list, config: ModelConfig, cfg: TrainConfig,
                        out_path=None, log_path=None):
    """Train encoder + connector + token-semantic head with the tagging loss only.

    Returns ``(net, report)``; ``report["mAP"]`` is measured on ``eval_clips``.
    """
    from .evaluation import mean_average_precision

    if len(set(train.class_ids.tolist())) < 2:
        raise ValueError("classifier pretraining needs at least 2 classes")
    torch.manual_seed(cfg.seed)
    net = QueryNet(replace(config, block="swin"))
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.pretrain_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    seg = segment_samples(cfg.segment_frames, config.stft_hop)
    dt = next(net.parameters()).dtype
    history = []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        for g in opt.param_groups:
            g["lr"] = cfg.pretrain_lr * lr_schedule(epoch, 0.0, cfg)
        rng = np.random.default_rng([cfg.seed, epoch, 29])
        order = rng.permutation(len(train.clips))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train.clips[k] for k in order[i:i + cfg.batch_size]]
            xs = []
            for c in chunk:
                o = rng.integers(0, len(c) - seg + 1) if seg and seg < len(c) else 0
                xs.append(np.asarray(c.samples[o:o + seg] if seg else c.samples, dtype=np.float64))
            x = torch.as_tensor(np.stack(xs), dtype=dt)
            y = np.stack([c.labels for c in chunk])
            _, logits = net.encoder.embed(_features(net, x))
            loss = tagging_loss(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    scores = classify(net, eval_clips)
    labels = np.stack([c.labels for c in eval_clips])
    report = {"mAP": mean_average_precision(scores, labels), "epochs": cfg.pretrain_epochs, "final_loss": history[-1], "history": history}
    if log_path:
        Path(log_path).write_text("epoch\tloss\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(history)))
    if out_path:
        save_checkpoint(out_path, state_arrays(net.encoder, "encoder."), kind="classifier",
                        config=net.cfg.to_dict(), seed=cfg.seed, step=step, extra={"mAP": report["mAP"]})
    return net, report


def _features(net: QueryNet, x):
    return analyse(net.frontend, net.cfg, x)[2]


def classify(net: QueryNet, clips: list, batch_size: int = 16) -> np.ndarray:
    """Sigmoid class scores ``(n_clips, n_classes)``."""
    dt = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            x = torch.as_tensor(np.stack([np.asarray(c.samples, dtype=np.float64) for c in clips[i:i + batch_size]]), dtype=dt)
            out.append(torch.sigmoid(net.encoder.embed(_features(net, x))[1]).double().numpy())
    return np.concatenate(out)


def load_classifier(path) -> QueryNet:
    arrays, meta = load_checkpoint(path)
    if meta["kind"] != "classifier":
        raise ValueError(f"{path}: expected a classifier checkpoint, got {meta['kind']!r}")
    net = QueryNet(ModelConfig.from_dict(meta["config"]))
    load_into(net.encoder, arrays, "encoder.")
    return net


# -- ablation grid ------------------------------------------------------------

@dataclass
class GridResult:
    row: str
    ablation: AblationConfig
    report: object  # evaluation.SDRReport
    history: list = field(default_factory=list)

    def as_row(self) -> dict:
        a = self.ablation
        return {
            "row": self.row, "grad": a.grad, "init": a.init, "shared_encoder": a.shared_encoder,
            "separator": a.separator_block, **self.report.as_row(),
        }


def train_system(ablation: AblationConfig, train: ClipBank, config: ModelConfig, cfg: TrainConfig,
                 pretrained=None, log_path=None):
    system = SeparationSystem(config, ablation, pretrained if ablation.init else None, seed=cfg.seed)
    trainer = Trainer(system, cfg, log_path=log_path)
    history = trainer.fit(train)
    return system, trainer, history


def run_ablation_grid(rows: dict, cfg: TrainConfig, train: ClipBank, eval_clips: list, pairs: list,
                      config: ModelConfig, pretrained=None, anchors=None, out_dir=None) -> list:
    """Train and evaluate one system per row under identical seeds and data."""
    from .evaluation import evaluate_protocols
    from .queries import AnchorPolicy

    anchors = anchors or AnchorPolicy()
    results = []
    for name, ablation in rows.items():
        log_path = Path(out_dir) / f"row_{name}_metrics.tsv" if out_dir else None
        system, trainer, history = train_system(ablation, train, config, cfg, pretrained, log_path)
        system.eval()
        report = evaluate_protocols(system, eval_clips, pairs, anchors, seed=cfg.seed)
        if out_dir:
            save_system(Path(out_dir) / f"row_{name}.safetensors", system, cfg.seed, trainer.step)
        results.append(GridResult(name, ablation, report, history))
        log.info("row %s: %s", name, report.as_row())
    return results


__all__ = [
    "TrainConfig", "TrainingTriplet", "make_triplets", "separation_loss", "tagging_loss", "lr_schedule",
    "ClipBank", "Trainer", "pretrain_classifier", "run_ablation_grid", "save_system", "load_system",
    "load_classifier", "classify", "train_system",
]

"""Command-line driver: synth-data, pretrain-cls, train, eval, ablate, embed-dump.

Every command reads one YAML run config, writes a snapshot of the resolved
config into its own output directory before doing any work, and leaves only
files under ``out``. Rerunning a command from its snapshot reproduces every
report file byte for byte.

Typical order::

    caresep synth-data  --out runs/desk
    caresep pretrain-cls --out runs/desk
    caresep train       --out runs/desk --row C
    caresep eval        --out runs/desk --row C
    caresep embed-dump  --out runs/desk --row C
    caresep ablate      --out runs/desk --row C --row D --row F
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import yaml

from .datagen import DatasetManifest, load_pairs, make_mixture_eval_set, save_pairs, synth_dataset
from .evaluation import (
    IdentityModel, class_kl_divergence, dump_embeddings, evaluate_protocols, markdown_table, write_table,
)
from .model import PRESETS, ModelConfig
from .queries import ROWS, AnchorPolicy
from .training import (
    ClipBank, TrainConfig, load_system, pretrain_classifier, run_ablation_grid, save_system, train_system,
)

log = logging.getLogger("caresep")

SCHEMA_VERSION = 1
COMMANDS = ("synth-data", "pretrain-cls", "train", "eval", "ablate", "embed-dump")

# desk training defaults that differ from TrainConfig's own defaults
DESK_TRAIN = {"base_lr": 5e-3, "segment_frames": 128, "grad_clip": 1.0, "pretrain_epochs": 20}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid run config:\n" + "\n".join(f"  - {e}" for e in self.errors))


class MissingPrerequisite(RuntimeError):
    pass


@dataclass
class DataSection:
    n_per_class: int = 50
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    manifest: str | None = None  # existing manifest instead of the synthetic set


@dataclass
class EvalSection:
    anchor_mode: str = "same-class-other"
    pool_size: int = 3
    n_pairs: int | None = None
    pair_preset: str | None = None
    kl_classes: list = field(default_factory=lambda: ["tone", "bandnoise"])
    checkpoint: str | None = None  # evaluate this file instead of train_<row>/model.safetensors


@dataclass
class RunConfig:
    """Everything one command needs; serialised verbatim into its output directory."""

    schema_version: int = SCHEMA_VERSION
    preset: str = "desk"
    seed: int = 0
    out: str = "runs/desk"
    row: str = "C"
    rows: list = field(default_factory=lambda: list("ABCDEFG"))
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived views ------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return PRESETS[self.preset](**self.model)

    def train_config(self) -> TrainConfig:
        base = dict(DESK_TRAIN) if self.preset == "desk" else {}
        base.update(self.train)
        base["seed"] = self.seed
        return TrainConfig.from_dict(base)

    def anchors(self) -> AnchorPolicy:
        return AnchorPolicy(self.eval.anchor_mode, self.eval.pool_size)

    @property
    def root(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    # -- parsing ------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errors = []
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        for k in sorted(set(d) - known):
            errors.append(f"{k}: unknown field")
        ver = d.get("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {ver!r}")
        sections = {}
        for name, typ in (("data", DataSection), ("eval", EvalSection)):
            raw = d.get(name) or {}
            if not isinstance(raw, dict):
                errors.append(f"{name}: expected a mapping")
                continue
            sub_known = {f.name for f in fields(typ)}
            for k in sorted(set(raw) - sub_known):
                errors.append(f"{name}.{k}: unknown field")
            sections[name] = typ(**{k: v for k, v in raw.items() if k in sub_known})
        if errors:
            raise ConfigError(errors)
        kw = {k: v for k, v in d.items() if k in known and k not in ("data", "eval")}
        cfg = cls(**kw, **sections)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise MissingPrerequisite(f"config file {p} does not exist")
        return cls.from_dict(yaml.safe_load(p.read_text()))

    def check(self) -> None:
        """Raise :class:`ConfigError` listing every invalid field."""
        errors = []
        if self.preset not in ("desk", "paper", "tiny"):
            errors.append(f"preset: must be desk or paper, got {self.preset!r}")
        if not isinstance(self.seed, int):
            errors.append("seed: must be an integer")
        if self.row not in ROWS:
            errors.append(f"row: must be one of {sorted(ROWS)}, got {self.row!r}")
        for r in self.rows:
            if r not in ROWS:
                errors.append(f"rows: unknown row {r!r}")
        if self.preset in ("desk", "paper", "tiny"):
            try:
                mc = self.model_config()
                errors += [f"model.{e}" for e in mc.validate()]
            except (TypeError, ValueError) as e:
                errors.append(f"model: {e}")
        try:
            self.train_config()
        except (TypeError, ValueError) as e:
            errors.append(f"train: {e}")
        if self.data.n_per_class < 4:
            errors.append("data.n_per_class: must be >= 4")
        if self.data.clip_seconds <= 0:
            errors.append("data.clip_seconds: must be > 0")
        try:
            self.anchors()
        except ValueError as e:
            errors.append(f"eval.anchor_mode: {e}")
        if len(self.eval.kl_classes) != 2:
            errors.append("eval.kl_classes: must name exactly two classes")
        if errors:
            raise ConfigError(errors)


# -- artifact layout -------------------------------------------------------------

def _data_dir(cfg: RunConfig) -> Path:
    return cfg.root / "data"


def _manifest(cfg: RunConfig) -> DatasetManifest:
    path = Path(cfg.data.manifest) if cfg.data.manifest else _data_dir(cfg) / "manifest.tsv"
    if not path.exists():
        raise MissingPrerequisite(f"dataset manifest {path} not found; run `caresep synth-data --out {cfg.out}` first")
    return DatasetManifest.load(path)


def _pairs(cfg: RunConfig, manifest: DatasetManifest) -> list:
    path = _data_dir(cfg) / "pairs.tsv"
    if path.exists() and cfg.eval.n_pairs is None and cfg.eval.pair_preset is None:
        return load_pairs(path)
    return make_mixture_eval_set(manifest, cfg.eval.n_pairs, seed=cfg.data.seed, preset=cfg.eval.pair_preset)


def _classifier_path(cfg: RunConfig) -> Path:
    return cfg.root / "classifier" / "classifier.safetensors"


def _require_classifier(cfg: RunConfig) -> Path:
    p = _classifier_path(cfg)
    if not p.exists():
        raise MissingPrerequisite(
            f"classifier checkpoint {p} not found; rows with Init=on need `caresep pretrain-cls --out {cfg.out}` first")
    return p


def _model_path(cfg: RunConfig) -> Path:
    if cfg.eval.checkpoint:
        return Path(cfg.eval.checkpoint)
    return cfg.root / f"train_{cfg.row}" / "model.safetensors"


def _require_model(cfg: RunConfig) -> Path:
    p = _model_path(cfg)
    if not p.exists():
        raise MissingPrerequisite(f"separator checkpoint {p} not found; run `caresep train --out {cfg.out} --row {cfg.row}` first")
    return p


def _start(cfg: RunConfig, name: str) -> Path:
    d = cfg.root / name
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.yaml")
    return d


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_synth_data(cfg: RunConfig) -> Path:
    out = _start(cfg, "data")
    manifest = synth_dataset(n_per_class=cfg.data.n_per_class, clip_seconds=cfg.data.clip_seconds,
                             sample_rate=cfg.data.sample_rate, seed=cfg.data.seed, out_dir=out)
    pairs = make_mixture_eval_set(manifest, cfg.eval.n_pairs, seed=cfg.data.seed, preset=cfg.eval.pair_preset)
    save_pairs(pairs, out / "pairs.tsv")
    print(f"wrote {len(manifest.entries)} clips and {len(pairs)} eval pairs to {out}")
    return out


def cmd_pretrain_cls(cfg: RunConfig) -> Path:
    manifest = _manifest(cfg)
    out = _start(cfg, "classifier")
    train = ClipBank.from_clips(manifest.load_split("train"))
    _, report = pretrain_classifier(train, manifest.load_split("eval"), cfg.model_config(), cfg.train_config(),
                                    out_path=out / "classifier.safetensors", log_path=out / "loss.tsv")
    _write_json(out / "report.json", {k: report[k] for k in ("mAP", "epochs", "final_loss")})
    print(f"held-out mAP {report['mAP']:.4f}; checkpoint {out / 'classifier.safetensors'}")
    return out


def cmd_train(cfg: RunConfig) -> Path:
    manifest = _manifest(cfg)
    ablation = ROWS[cfg.row]
    pretrained = _require_classifier(cfg) if ablation.init else None
    out = _start(cfg, f"train_{cfg.row}")
    metrics = out / "metrics.tsv"
    metrics.unlink(missing_ok=True)
    train = ClipBank.from_clips(manifest.load_split("train"))
    system, trainer, history = train_system(ablation, train, cfg.model_config(), cfg.train_config(), pretrained, metrics)
    save_system(out / "model.safetensors", system, cfg.seed, trainer.step)
    write_table(history, out / "epochs.tsv")
    print(f"row {cfg.row}: {trainer.step} steps, final train SDR {history[-1]['sdr']:.2f} dB")
    return out


_T1_COLS = ["model", "mixture_sdr", "clean_sdr", "silence_sdr", "n_pairs", "anchor_mode"]


def cmd_eval(cfg: RunConfig) -> Path:
    manifest = _manifest(cfg)
    path = _require_model(cfg)
    out = _start(cfg, f"eval_{cfg.row}")
    clips = manifest.load_split("eval")
    pairs = _pairs(cfg, manifest)
    system = load_system(path)
    system.eval()
    rows = []
    for name, model in (("identity", IdentityModel()), (f"row {cfg.row}", system)):
        rep = evaluate_protocols(model, clips, pairs, cfg.anchors(), seed=cfg.seed)
        rows.append({"model": name, **rep.as_row()})
    write_table(rows, out / "table1.tsv")
    (out / "table1.md").write_text(markdown_table(rows, _T1_COLS))
    print(markdown_table(rows, _T1_COLS), end="")
    return out


_T2_COLS = ["row", "grad", "init", "shared_encoder", "separator", "mixture_sdr", "clean_sdr", "silence_sdr"]


def cmd_ablate(cfg: RunConfig) -> Path:
    manifest = _manifest(cfg)
    rows = {r: ROWS[r] for r in cfg.rows}
    pretrained = _require_classifier(cfg) if any(a.init for a in rows.values()) else None
    out = _start(cfg, "ablate")
    for f in out.glob("row_*_metrics.tsv"):
        f.unlink()
    train = ClipBank.from_clips(manifest.load_split("train"))
    results = run_ablation_grid(rows, cfg.train_config(), train, manifest.load_split("eval"), _pairs(cfg, manifest),
                                cfg.model_config(), pretrained, cfg.anchors(), out)
    table = [r.as_row() for r in results]
    write_table(table, out / "table2.tsv", _T2_COLS + ["mixture_sdr_std", "clean_sdr_std", "silence_sdr_std"])
    (out / "table2.md").write_text(markdown_table(table, _T2_COLS))
    print(markdown_table(table, _T2_COLS), end="")
    return out


def cmd_embed_dump(cfg: RunConfig) -> Path:
    manifest = _manifest(cfg)
    path = _require_model(cfg)
    out = _start(cfg, f"embed_{cfg.row}")
    clips = manifest.load_split("eval")
    system = load_system(path)
    system.eval()
    kl = {}
    a, b = cfg.eval.kl_classes
    for kind in ("query", "separation-feature"):
        es = dump_embeddings(system, clips, kind, manifest.classes, out / f"{kind}.tsv", cfg.anchors(), seed=cfg.seed)
        ab, sym = class_kl_divergence(es, a, b)
        kl[kind] = {"kl": ab, "kl_symmetric": sym}
    kl["abs_difference"] = abs(kl["query"]["kl"] - kl["separation-feature"]["kl"])
    kl["classes"] = [a, b]
    _write_json(out / "kl.json", kl)
    print(f"KL({a}||{b}) query {kl['query']['kl']:.3f}, separation feature {kl['separation-feature']['kl']:.3f}")
    return out


HANDLERS = {
    "synth-data": cmd_synth_data, "pretrain-cls": cmd_pretrain_cls, "train": cmd_train,
    "eval": cmd_eval, "ablate": cmd_ablate, "embed-dump": cmd_embed_dump,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caresep", description="Query-based sound separation with a shared encoder.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML run config (a snapshot from a previous run works too)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="artifact root directory")
    p.add_argument("--preset", choices=("desk", "paper"), help="model/training preset")
    p.add_argument("--row", action="append", choices=sorted(ROWS),
                   help="ablation row; repeat for ablate (default: all rows)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise MissingPrerequisite(f"config file {p} does not exist")
        raw = yaml.safe_load(p.read_text()) or {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.preset is not None:
        raw["preset"] = args.preset
    if args.row:
        raw["row"] = args.row[0]
        if args.command == "ablate":
            raw["rows"] = list(args.row)
    return RunConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"caresep {args.command}: {e}", file=sys.stderr)
        return 2
    except MissingPrerequisite as e:
        print(f"caresep {args.command}: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"caresep {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

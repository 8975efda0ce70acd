"""End-to-end desk run: synthetic data, classifier pretraining, row C training, evaluation.

Takes a few minutes on one core with the defaults. Pass --epochs to shorten it.

    python demos/03_desk_pipeline.py --out runs/demo --epochs 30
"""

import argparse
import logging
from pathlib import Path

import torch

from caresep.cli import RunConfig
from caresep.datagen import make_mixture_eval_set, synth_dataset
from caresep.evaluation import IdentityModel, class_kl_divergence, dump_embeddings, evaluate_protocols
from caresep.queries import ROWS
from caresep.training import ClipBank, TrainConfig, pretrain_classifier, train_system

p = argparse.ArgumentParser()
p.add_argument("--out", default="runs/demo")
p.add_argument("--epochs", type=int, default=30)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.use_deterministic_algorithms(True)
torch.set_num_threads(1)
out = Path(args.out)

# 4 classes x 50 one-second clips, 80/20 split
manifest = synth_dataset(n_per_class=50, seed=0, out_dir=out / "data")
train = ClipBank.from_clips(manifest.load_split("train"))
clips = manifest.load_split("eval")
pairs = make_mixture_eval_set(manifest, seed=0)
print(f"{len(train.clips)} training clips, {len(clips)} eval clips, {len(pairs)} eval mixtures")

run = RunConfig(preset="desk", seed=args.seed)
mc = run.model_config()
tc = TrainConfig.from_dict({**vars(run.train_config()), "max_epochs": args.epochs})

# the encoder is first trained as a tagger; row C starts from it
_, rep = pretrain_classifier(train, clips, mc, tc, out_path=out / "classifier.safetensors")
print(f"classifier held-out mAP {rep['mAP']:.3f}")

system, trainer, history = train_system(ROWS["C"], train, mc, tc, out / "classifier.safetensors")
system.eval()
print(f"trained {trainer.step} steps; last epoch train SDR {history[-1]['sdr']:.2f} dB")

for name, model in (("identity", IdentityModel()), ("row C", system)):
    r = evaluate_protocols(model, clips, pairs, run.anchors())
    print(f"{name:>8}: mixture {r.mixture_sdr:6.2f}  clean {r.clean_sdr:6.2f}  silence {r.silence_sdr:6.2f} dB")

# with a shared encoder the query and the separation feature should tell the classes apart similarly
a, b = run.eval.kl_classes
for kind in ("query", "separation-feature"):
    es = dump_embeddings(system, clips, kind, manifest.classes, out / f"{kind}.tsv", run.anchors())
    print(f"KL({a} || {b}) on {kind}: {class_kl_divergence(es, a, b)[0]:.3f}")

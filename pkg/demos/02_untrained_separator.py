"""What a freshly built separator does, and how a query enters it.

The output head is a sigmoid mask initialised at zero, so before training every
query yields exactly half the mixture. Any departure from x/2 later on is learned.

    python demos/02_untrained_separator.py
"""

import numpy as np
import torch

from caresep.evaluation import sdr
from caresep.model import desk_config
from caresep.queries import ROWS, SeparationSystem

torch.manual_seed(0)
cfg = desk_config(n_classes=4)
system = SeparationSystem(cfg, ROWS["E"], seed=0)  # shared encoder, no pretrained init
system.eval()
n_params = sum(p.numel() for p in system.parameters())
print(f"desk model: latent dim {cfg.latent_dim}, {cfg.n_bands} bands, {n_params / 1e6:.2f}M parameters")

rng = np.random.default_rng(0)
x = rng.standard_normal((1, cfg.sample_rate)).astype(np.float32) * 0.1
with torch.no_grad():
    q = system.embed(torch.as_tensor(x))
print(f"query embedding shape {tuple(q.shape)}")

for name, query in (("own query", q.numpy()), ("random query", rng.standard_normal(q.shape))):
    y = system.separate_batch([x[0]], query)[0]
    print(f"{name}: SDR of output against x/2 = {sdr(y, 0.5 * x[0]):.1f} dB")

# the shared row hands the separator's own encoder to the query path
print("query encoder is the separation encoder:", system.query_encoder() is system.separator.encoder)

"""Finite-difference check of analytic parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    names: list  # "param_name[flat_index]"
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max())

    def worst(self, k: int = 5) -> list:
        order = np.argsort(-self.rel_err)[:k]
        return [(self.names[i], float(self.analytic[i]), float(self.numeric[i]), float(self.rel_err[i])) for i in order]


def sample_entries(module: torch.nn.Module, n: int, seed: int = 0, must_cover=()) -> list:
    """Pick ``n`` (name, flat_index) pairs, at least one from every parameter tensor
    and from each name containing one of ``must_cover``."""
    rng = np.random.default_rng(seed)
    params = [(k, p) for k, p in module.named_parameters() if p.requires_grad]
    picks = [(k, int(rng.integers(p.numel()))) for k, p in params]
    for tag in must_cover:
        if not any(tag in k for k, _ in params):
            raise ValueError(f"no parameter matches {tag!r}")
    sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
    while len(picks) < n:
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        picks.append((params[i][0], int(rng.integers(params[i][1].numel()))))
    return picks


def check_gradients(loss_fn, module: torch.nn.Module, entries: list, h: float = 1e-6, floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd against central differences ``(L(p+h) - L(p-h)) / 2h``.

    ``loss_fn()`` must be deterministic and return a scalar tensor. The relative
    error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps round-off on
    near-zero gradients from dominating.
    """
    params = dict(module.named_parameters())
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = np.array([params[k].grad.reshape(-1)[i].item() for k, i in entries])
    numeric = np.empty(len(entries))
    with torch.no_grad():
        for j, (k, i) in enumerate(entries):
            flat = params[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    names = [f"{k}[{i}]" for k, i in entries]
    return GradCheckResult(names, analytic, numeric, np.abs(analytic - numeric) / denom)

"""Separation metrics, the mixture/clean/silence protocols, tagging mAP and embedding diagnostics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import mix_with_energy_norm
from .queries import AnchorPolicy, EmbeddingSet, resolve_queries, write_embedding_dump

SDR_CLAMP = 100.0


def _samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def sdr(est, ref) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)`` in dB, clamped to +-100."""
    e, r = _samples(est), _samples(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    num = float(r @ r)
    if num == 0.0:
        raise ValueError("sdr is undefined for an all-zero reference; use silence_sdr")
    den = float((r - e) @ (r - e))
    if den == 0.0:
        return SDR_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CLAMP, SDR_CLAMP))


def silence_sdr(input_clip, output_clip) -> float:
    """Suppression ratio ``10 log10(|input|^2 / |output|^2)``, clamped to +-100 dB (silent output gives +100)."""
    x, y = _samples(input_clip), _samples(output_clip)
    e_in, e_out = float(x @ x), float(y @ y)
    if e_in == 0.0:
        raise ValueError("silent input")
    if e_out == 0.0:
        return SDR_CLAMP
    return float(np.clip(10.0 * np.log10(e_in / e_out), -SDR_CLAMP, SDR_CLAMP))


@dataclass(frozen=True)
class SDRReport:
    mixture_sdr: float
    mixture_sdr_std: float
    clean_sdr: float
    clean_sdr_std: float
    silence_sdr: float
    silence_sdr_std: float
    n_pairs: int
    anchor_mode: str
    seed: int

    def as_row(self) -> dict:
        return asdict(self)


def _clip_map(clips):
    return {c.clip_id: c for c in clips}


def eval_mixture_sdr(model, pairs, clips, anchors: AnchorPolicy = AnchorPolicy(), seed: int = 0, return_all=False):
    """Mixture protocol: separate each source of every cross-class pair with its own query.

    ``clips`` is the eval pool; pair members are looked up by clip id and anchors
    are drawn from the same pool.
    """
    by_id = _clip_map(clips)
    mixes, targets, refs = [], [], []
    for p in pairs:
        a, b = by_id[p.clip_a], by_id[p.clip_b]
        mix, sa, sb = mix_with_energy_norm(a, b, p.mix_seed)
        mixes += [mix.samples, mix.samples]
        targets += [a, b]
        refs += [sa.samples, sb.samples]
    queries = resolve_queries(model, targets, clips, anchors, seed)
    outs = model.separate_batch(mixes, queries)
    vals = np.array([sdr(o, r) for o, r in zip(outs, refs)])
    return vals if return_all else float(vals.mean())


def eval_clean_sdr(model, clips, anchors: AnchorPolicy = AnchorPolicy(), seed: int = 0, pool=None, return_all=False):
    """Clean protocol: a clean clip with its own class query should come back unchanged."""
    pool = clips if pool is None else pool
    queries = resolve_queries(model, clips, pool, anchors, seed + 1)
    outs = model.separate_batch([c.samples for c in clips], queries)
    vals = np.array([sdr(o, c) for o, c in zip(outs, clips)])
    return vals if return_all else float(vals.mean())


def silence_partners(clips, seed: int = 0) -> list:
    """For every clip, a clip of a disjoint class to be used as the query-absent input."""
    rng = np.random.default_rng([seed, 31])
    out = []
    for c in clips:
        cands = [o for o in clips if not np.any((o.labels > 0) & (c.labels > 0))]
        if not cands:
            raise ValueError(f"no clip without the class of {c.clip_id}")
        out.append(cands[int(rng.integers(len(cands)))])
    return out


def eval_silence_sdr(model, clips, anchors: AnchorPolicy = AnchorPolicy(), seed: int = 0, pool=None, return_all=False):
    """Silence protocol: query a class that is absent from the input; the output should vanish."""
    pool = clips if pool is None else pool
    queries = resolve_queries(model, clips, pool, anchors, seed + 2)
    inputs = silence_partners(clips, seed)
    outs = model.separate_batch([c.samples for c in inputs], queries)
    vals = np.array([silence_sdr(i, o) for i, o in zip(inputs, outs)])
    return vals if return_all else float(vals.mean())


def evaluate_protocols(model, clips, pairs, anchors: AnchorPolicy = AnchorPolicy(), seed: int = 0) -> SDRReport:
    m = eval_mixture_sdr(model, pairs, clips, anchors, seed, return_all=True)
    c = eval_clean_sdr(model, clips, anchors, seed, return_all=True)
    s = eval_silence_sdr(model, clips, anchors, seed, return_all=True)
    return SDRReport(float(m.mean()), float(m.std()), float(c.mean()), float(c.std()),
                     float(s.mean()), float(s.std()), len(pairs), anchors.mode, seed)


class IdentityModel:
    """Baseline that returns its input unchanged, whatever the query."""

    def embed_clips(self, clips):
        return np.zeros((len(clips), 1))

    def separate_batch(self, mixtures, queries):
        return [np.asarray(m, dtype=np.float64) for m in mixtures]


def mean_average_precision(scores, labels) -> float:
    """Macro-averaged AP over classes with at least one positive.

    Ties in score keep the input clip order (stable sort).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    aps = []
    for k in range(s.shape[1]):
        pos = y[:, k] > 0
        if not pos.any():
            continue
        order = np.argsort(-s[:, k], kind="stable")
        hits = pos[order]
        ranks = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))


def _diag_gaussian(x: np.ndarray, floor: float = 1e-6):
    return x.mean(axis=0), np.maximum(x.var(axis=0), floor)


def gaussian_kl(mu_a, var_a, mu_b, var_b) -> float:
    """Closed-form KL(N(mu_a, diag var_a) || N(mu_b, diag var_b)) in nats."""
    return float(0.5 * np.sum(np.log(var_b / var_a) + (var_a + (mu_a - mu_b) ** 2) / var_b - 1.0))


def class_kl_divergence(es: EmbeddingSet, class_a, class_b, min_samples: int = 5):
    """Diagonal-Gaussian KL between two classes' embeddings.

    Returns ``(kl_ab, symmetrised)`` where ``symmetrised = (kl_ab + kl_ba) / 2``.
    """
    xa, xb = es.of_class(class_a), es.of_class(class_b)
    if len(xa) < min_samples or len(xb) < min_samples:
        raise ValueError(f"need >= {min_samples} samples per class, got {len(xa)} and {len(xb)}")
    ma, va = _diag_gaussian(xa)
    mb, vb = _diag_gaussian(xb)
    ab, ba = gaussian_kl(ma, va, mb, vb), gaussian_kl(mb, vb, ma, va)
    return ab, (ab + ba) / 2.0


def dump_embeddings(model, clips, kind: str, class_names, path=None, anchors: AnchorPolicy = AnchorPolicy(),
                    seed: int = 0, pool=None) -> EmbeddingSet:
    """Query embeddings or separation features for ``clips``, optionally written as a columnar dump.

    ``query``: the query-encoder output on each clip. ``separation-feature``: the
    token-averaged connector output when the clip is fed as the mixture together
    with its class query (anchor drawn per ``anchors`` from ``pool``).
    """
    if kind == "query":
        vecs = model.embed_clips(clips)
    elif kind == "separation-feature":
        q = resolve_queries(model, clips, clips if pool is None else pool, anchors, seed + 3)
        vecs = model.separation_features([c.samples for c in clips], q)
    else:
        raise ValueError(f"unknown embedding kind {kind!r}")
    labels = [tuple(class_names[k] for k in np.flatnonzero(c.labels)) for c in clips]
    es = EmbeddingSet([c.clip_id for c in clips], labels, vecs, kind)
    if path is not None:
        write_embedding_dump(es, path)
    return es


def write_table(rows: list, path, columns=None) -> None:
    """Tab-separated report; floats use repr so reruns compare bit-for-bit."""
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def markdown_table(rows: list, columns=None, floatfmt="{:.2f}") -> str:
    columns = columns or list(rows[0])
    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            if isinstance(v, bool):
                cells.append("✓" if v else "✗")
            elif isinstance(v, float):
                cells.append(floatfmt.format(v))
            else:
                cells.append(str(v))
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


__all__ = [
    "sdr", "silence_sdr", "SDRReport", "eval_mixture_sdr", "eval_clean_sdr", "eval_silence_sdr",
    "evaluate_protocols", "IdentityModel", "mean_average_precision", "class_kl_divergence", "gaussian_kl",
    "dump_embeddings", "write_table", "markdown_table",
]

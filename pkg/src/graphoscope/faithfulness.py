"""Deletion/insertion faithfulness scoring of saliency maps.

Ink pixels are ranked by the map, altered in near-equal batches, and the
embedding similarity to the original snippet is traced; the saliency AUCs
are compared per snippet against random-ordering baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DegenerateEmbeddingError
from .nets import embed, embed_batch


class ZeroInkError(ValueError):
    """Snippet contains no ink pixels; no curve can be built."""


@dataclass
class FaithfulnessCurve:
    fractions: np.ndarray  # altered-ink fraction, 0 .. 1
    similarities: np.ndarray  # clamped to [0, 1]
    auc: float
    mode: str  # deletion | insertion
    ordering: str  # saliency | random
    seed: int
    degenerate_points: int = 0  # zero-norm embeddings recorded as sim 0


@dataclass
class FaithfulnessReport:
    records: list  # per-snippet dicts
    auc_d: float
    auc_i: float
    config: dict = field(default_factory=dict)


def _pixels(snippet):
    px = getattr(snippet, "pixels", snippet)
    px = np.asarray(px, dtype=np.float32)
    if px.ndim == 2:
        px = px[None]
    return px


def _map_values(smap):
    return np.asarray(getattr(smap, "values", smap), dtype=np.float64)


def rank_ink_pixels(snippet, smap, seed):
    """Ink pixel coordinates in descending saliency order; ties broken by a
    seeded shuffle so a uniform map reproduces the random ordering."""
    px = _pixels(snippet)[0]
    values = _map_values(smap)
    if values.shape != px.shape:
        raise ValueError(f"map shape {values.shape} != snippet shape {px.shape}")
    ink = np.argwhere(px < 0.5)
    if len(ink) == 0:
        raise ZeroInkError("snippet has no ink pixels")
    rng = np.random.default_rng(int(seed))
    perm = rng.permutation(len(ink))
    sal = values[ink[perm, 0], ink[perm, 1]]
    order = perm[np.argsort(-sal, kind="stable")]
    return ink[order]


def _batch_sizes(n, steps):
    q, r = divmod(n, steps)
    return [q + 1] * r + [q] * (steps - r)


def alter_sequence(snippet, smap, mode, steps, seed):
    """Image sequence for one curve. Deletion starts at the original and
    whitens ranked ink batches; insertion starts all-white and blackens
    them. Only ink pixels are ever touched."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if mode not in ("deletion", "insertion"):
        raise ValueError(f"unknown mode {mode!r}")
    px = _pixels(snippet)
    ranked = rank_ink_pixels(snippet, smap, seed)
    steps = min(steps, len(ranked))
    sizes = _batch_sizes(len(ranked), steps)
    if mode == "deletion":
        img = px.copy()
        fill = 1.0
    else:
        img = np.ones_like(px)
        fill = 0.0
    images = [img.copy()]
    pos = 0
    for size in sizes:
        batch = ranked[pos:pos + size]
        pos += size
        img[0, batch[:, 0], batch[:, 1]] = fill
        images.append(img.copy())
    return images


def similarity_curve(net, original, images, mode, ordering="saliency", seed=0):
    """Trace max(0, cos) between the original snippet and each altered image
    and integrate over the altered-ink fraction with the trapezoid rule.

    Zero-norm embeddings (structurally possible at the all-white endpoint)
    are recorded as similarity 0 and counted in degenerate_points."""
    opx = _pixels(original)
    total_ink = int(np.count_nonzero(opx[0] < 0.5))
    if total_ink == 0:
        raise ZeroInkError("snippet has no ink pixels")
    ref = embed(net, opx).astype(np.float64)
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise DegenerateEmbeddingError("original snippet embeds to zero norm")
    fracs = []
    for img in images:
        ink_now = int(np.count_nonzero(img[0] < 0.5))
        altered = (total_ink - ink_now) if mode == "deletion" else ink_now
        fracs.append(altered / total_ink)
    embs = embed_batch(net, np.stack(images)).astype(np.float64)
    norms = np.linalg.norm(embs, axis=1)
    zero = norms == 0.0
    degen = int(zero.sum())
    norms[zero] = 1.0
    sims = (embs @ ref) / (norms * ref_norm)
    sims[zero] = 0.0
    sims = np.clip(sims, 0.0, 1.0)
    fracs = np.asarray(fracs, dtype=np.float64)
    auc = float(np.trapezoid(sims, fracs))
    return FaithfulnessCurve(fractions=fracs, similarities=sims, auc=auc,
                             mode=mode, ordering=ordering, seed=int(seed),
                             degenerate_points=degen)


def curve_for(net, snippet, smap, mode, steps, seed, ordering="saliency"):
    images = alter_sequence(snippet, smap, mode, steps, seed)
    return similarity_curve(net, snippet, images, mode, ordering, seed)


UNIFORM_MAP = 0  # sentinel: zero raster ranks purely by the tie shuffle


def _uniform_map(snippet):
    return np.zeros(_pixels(snippet).shape[-2:])


def score_snippet(net, snippet, smap, steps=50, seed=0, random_repeats=3,
                  keep_curves=False):
    """Saliency AUCs plus the mean of `random_repeats` random baselines.

    Returns a dict with s_del, r_del, s_ins, r_ins (and the curves when
    keep_curves is set)."""
    curves = {}
    out = {}
    for mode, key in (("deletion", "s_del"), ("insertion", "s_ins")):
        c = curve_for(net, snippet, smap, mode, steps, seed)
        out[key] = c.auc
        curves[key] = c
    for mode, key in (("deletion", "r_del"), ("insertion", "r_ins")):
        uni = _uniform_map(snippet)
        # baseline seeds are derived once, deterministically, from the base seed
        rep_seeds = np.random.default_rng([int(seed), 104729]).integers(
            2**31, size=random_repeats)
        clist = [curve_for(net, snippet, uni, mode, steps, int(s),
                           ordering="random") for s in rep_seeds]
        out[key] = float(np.mean([c.auc for c in clist]))
        curves[key] = clist
    if keep_curves:
        out["curves"] = curves
    return out


def aggregate_report(records, config=None) -> FaithfulnessReport:
    """Strict-inequality indicators: deletion counts wins where the random
    curve keeps more similarity (r_del > s_del), insertion where the
    saliency curve recovers it faster (s_ins > r_ins)."""
    if not records:
        raise ValueError("no scored snippets")
    rows = []
    for rec in records:
        d = 1 if rec["r_del"] > rec["s_del"] else 0
        i = 1 if rec["s_ins"] > rec["r_ins"] else 0
        row = dict(rec)
        row["d"] = d
        row["i"] = i
        rows.append(row)
    n = len(rows)
    auc_d = 100.0 * sum(r["d"] for r in rows) / n
    auc_i = 100.0 * sum(r["i"] for r in rows) / n
    return FaithfulnessReport(records=rows, auc_d=auc_d, auc_i=auc_i,
                              config=dict(config or {}))


def report_payload(report: FaithfulnessReport):
    """JSON-ready form of a report."""
    return {
        "auc_d": report.auc_d,
        "auc_i": report.auc_i,
        "n": len(report.records),
        "config": report.config,
        "snippets": report.records,
    }


def report_csv(report: FaithfulnessReport):
    lines = ["snippet_id,s_del,r_del,s_ins,r_ins,d,i"]
    for r in report.records:
        lines.append("%s,%.9g,%.9g,%.9g,%.9g,%d,%d" % (
            r["snippet_id"], r["s_del"], r["r_del"], r["s_ins"], r["r_ins"],
            r["d"], r["i"]))
    return "\n".join(lines) + "\n"

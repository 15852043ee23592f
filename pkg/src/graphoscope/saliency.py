"""Saliency maps for handwriting embedding networks.

Two techniques: smoothed input-gradient maps against a white base image,
and similarity-decomposition maps (overall and point-specific) built from
the head-folded feature fields of a snippet pair.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import jsonio
from .autodiff import Tensor, backward, cosine_similarity
from .nets import embed, feature_maps, fold_head, forward_embedding


@dataclass
class SaliencyMap:
    values: np.ndarray  # [S, S] in [0, 1]
    kind: str  # pixel_wise | overall | point_specific
    source_id: str = ""
    counterpart_id: str = ""
    point: tuple | None = None  # (row, col) in source pixels
    coarse_cell: tuple | None = None
    params: dict = field(default_factory=dict)
    degenerate: bool = False
    normalizer: float | None = None  # z for pair kinds
    similarity: float | None = None  # S for pair kinds


@dataclass
class DecompositionField:
    """Unnormalized coarse map plus the constants of the reconstruction
    identity sum(coarse) == z * S."""

    coarse: np.ndarray  # [H', W']
    normalizer: float
    similarity: float


def normalize_map(raw):
    """Min-max normalize to [0, 1]; constant rasters come back as zeros
    with the degenerate flag set."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("normalize_map: non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def upsample_field(coarse, target):
    """Bilinear upsampling with cell centers aligned: coarse cell (i, j)
    sits at input pixel ((i+0.5)*stride - 0.5, (j+0.5)*stride - 0.5)."""
    coarse = np.asarray(coarse, dtype=np.float64)
    h, w = coarse.shape
    th, tw = target

    def axis_coords(n_out, n_in):
        stride = n_out / n_in
        c = (np.arange(n_out) + 0.5) / stride - 0.5
        return np.clip(c, 0.0, n_in - 1.0)

    ys = axis_coords(th, h)
    xs = axis_coords(tw, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
    bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def smooth_variants(snippet, n, p, seed):
    """n copies of the snippet with each pixel whitened independently with
    probability p."""
    if n < 1:
        raise ValueError("smooth_variants: n must be >= 1")
    if not (0.0 <= p < 1.0):
        raise ValueError("smooth_variants: p must be in [0, 1)")
    px = _pixels(snippet)
    out = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        mask = rng.random(px.shape) < p
        v = px.copy()
        v[mask] = 1.0
        out.append(v)
    return out


# x_base (white-page embedding) cached per network identity.
_BASE_CACHE = {}


def _base_embedding(net, size):
    key = id(net)
    hit = _BASE_CACHE.get(key)
    if hit is not None and hit[0]() is net:
        return hit[1]
    white = np.ones((1, size, size), dtype=np.float32)
    xb = embed(net, white)
    _BASE_CACHE[key] = (weakref.ref(net), xb)
    return xb


def pixelwise_saliency(net, snippet, n=4, p=0.1, seed=0, signed=False):
    """Average the input gradients of d = 1 - cos(embed(variant), x_base)
    over n white-masked variants, take magnitudes (unless signed), then
    min-max normalize."""
    px = _pixels(snippet)
    size = px.shape[-1]
    xb = Tensor(_base_embedding(net, size))
    acc = np.zeros(px.shape[-2:], dtype=np.float64)
    for v in smooth_variants(px, n, p, seed):
        x = Tensor(v, requires_grad=True)
        emb = forward_embedding(net, x)
        sim = cosine_similarity(emb, xb)
        d = Tensor(1.0) + Tensor(-1.0) * sim
        g = backward(d, leaves=[x])[x]
        acc += g[0].astype(np.float64)
    acc /= n
    raw = acc if signed else np.abs(acc)
    values, degen = normalize_map(raw)
    return SaliencyMap(
        values=values, kind="pixel_wise",
        source_id=getattr(snippet, "snippet_id", ""),
        params={"n": n, "p": p, "seed": int(seed), "signed": bool(signed),
                "upsampling": "none"},
        degenerate=degen)


def _folded_field(net, snippet):
    return fold_head(net, feature_maps(net, snippet))


def decomposition_fields(net, q, r):
    """Coarse decomposition maps for both snippets of a pair, with the
    shared normalizer z = |x_q||x_r| * (H'q W'q)(H'r W'r) and similarity S."""
    fq = _folded_field(net, q).values.astype(np.float64)
    fr = _folded_field(net, r).values.astype(np.float64)
    xq = embed(net, q)
    xr = embed(net, r)
    s = float(cosine_similarity(Tensor(xq), Tensor(xr)).data)
    z = float(np.linalg.norm(xq) * np.linalg.norm(xr)
              * fq.shape[1] * fq.shape[2] * fr.shape[1] * fr.shape[2])
    # coarse map over r: sum_k (sum_ij fq[k]) * fr[k, x, y]; mirrored for q
    coarse_r = np.tensordot(fq.sum(axis=(1, 2)), fr, axes=([0], [0]))
    coarse_q = np.tensordot(fr.sum(axis=(1, 2)), fq, axes=([0], [0]))
    return (DecompositionField(coarse_q, z, s),
            DecompositionField(coarse_r, z, s))


def overall_saliency_pair(net, q, r):
    """Overall-map pair: each snippet's coarse map upsampled to its own
    resolution and normalized; returns (map_q, map_r, similarity)."""
    dq, dr = decomposition_fields(net, q, r)
    qid = getattr(q, "snippet_id", "")
    rid = getattr(r, "snippet_id", "")
    maps = []
    for dec, snip, own, other in ((dq, q, qid, rid), (dr, r, rid, qid)):
        size = _pixels(snip).shape[-2:]
        values, degen = normalize_map(upsample_field(dec.coarse, size))
        maps.append(SaliencyMap(
            values=values, kind="overall", source_id=own, counterpart_id=other,
            params={"upsampling": "bilinear"}, degenerate=degen,
            normalizer=dec.normalizer, similarity=dec.similarity))
    return maps[0], maps[1], dq.similarity


def point_specific_map(net, q, r, point):
    """Saliency over r for one selected pixel of q, via the coarse cell
    containing the pixel."""
    row, col = int(point[0]), int(point[1])
    qpx = _pixels(q)
    if not (0 <= row < qpx.shape[-2] and 0 <= col < qpx.shape[-1]):
        raise ValueError(f"point {point} outside snippet bounds {qpx.shape[-2:]}")
    fq = _folded_field(net, q)
    fr = _folded_field(net, r)
    stride = fq.stride_to_input
    cell = (row // stride, col // stride)
    coarse = np.tensordot(fq.values[:, cell[0], cell[1]].astype(np.float64),
                          fr.values.astype(np.float64), axes=([0], [0]))
    size = _pixels(r).shape[-2:]
    values, degen = normalize_map(upsample_field(coarse, size))
    return SaliencyMap(
        values=values, kind="point_specific",
        source_id=getattr(q, "snippet_id", ""),
        counterpart_id=getattr(r, "snippet_id", ""),
        point=(row, col), coarse_cell=cell,
        params={"upsampling": "bilinear"}, degenerate=degen)


def point_specific_coarse(net, q, r):
    """All coarse point-specific maps of the pair, indexed [i, j, x, y].
    Summing over (i, j) gives the overall coarse map of r."""
    fq = _folded_field(net, q).values.astype(np.float64)
    fr = _folded_field(net, r).values.astype(np.float64)
    return np.tensordot(fq, fr, axes=([0], [0]))


def _pixels(snippet):
    px = getattr(snippet, "pixels", snippet)
    px = np.asarray(px, dtype=np.float32)
    if px.ndim == 2:
        px = px[None]
    return px


# -- serialization: 16-bit PNG raster + canonical-JSON sidecar --------------


def save_map(smap: SaliencyMap, path):
    path = str(path)
    raster = np.round(smap.values * 65535.0).astype(np.uint16)
    Image.fromarray(raster).save(path)
    meta = {
        "kind": smap.kind,
        "source_id": smap.source_id,
        "counterpart_id": smap.counterpart_id,
        "point": list(smap.point) if smap.point is not None else None,
        "coarse_cell": list(smap.coarse_cell) if smap.coarse_cell is not None else None,
        "params": smap.params,
        "degenerate": smap.degenerate,
        "normalizer": smap.normalizer,
        "similarity": smap.similarity,
    }
    jsonio.dump(meta, path + ".json")


def load_map(path) -> SaliencyMap:
    path = str(path)
    raster = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    meta = jsonio.load(path + ".json")
    return SaliencyMap(
        values=raster, kind=meta["kind"], source_id=meta["source_id"],
        counterpart_id=meta["counterpart_id"],
        point=tuple(meta["point"]) if meta["point"] else None,
        coarse_cell=tuple(meta["coarse_cell"]) if meta["coarse_cell"] else None,
        params=meta["params"], degenerate=meta["degenerate"],
        normalizer=meta["normalizer"], similarity=meta["similarity"])

"""Binarized handwriting pages: ingestion, snippet extraction, writer splits,
and a seeded synthetic pseudo-handwriting generator for desk-scale runs.

Directory layout for real corpora: ``<corpus>/<writer_id>/<page_id>.png``
(8-bit grayscale). Bitmaps use 0 = ink, 1 = paper.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import jsonio


class IngestionError(ValueError):
    pass


@dataclass
class PageRecord:
    writer_id: str
    page_id: str
    bitmap: np.ndarray  # [H, W] float32, values in {0, 1}
    source_path: str = ""


@dataclass
class Snippet:
    pixels: np.ndarray  # [1, S, S] float32, values in {0, 1}
    writer_id: str
    page_id: str
    origin: tuple  # (row, col) offset in the page
    ink_fraction: float

    @property
    def size(self):
        return self.pixels.shape[-1]

    @property
    def snippet_id(self):
        return f"{self.page_id}:{self.origin[0]}:{self.origin[1]}:{self.size}"


@dataclass
class WriterSplit:
    train_writers: set
    test_writers: set
    seed: int


@dataclass
class ExtractResult:
    snippets: list
    shortfall: bool = False

    def __iter__(self):
        return iter(self.snippets)

    def __len__(self):
        return len(self.snippets)


def ink_fraction(pixels) -> float:
    """Fraction of ink (0-valued) pixels in a binary raster."""
    arr = np.asarray(pixels)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("ink_fraction: input is not binary")
    return float(np.count_nonzero(arr == 0.0) / arr.size)


def load_page(path, threshold=0.5) -> PageRecord:
    """Load and binarize one grayscale page; luminance < threshold becomes ink."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    try:
        img = Image.open(path).convert("L")
    except Exception as exc:
        raise IngestionError(f"unreadable page image {path}: {exc}") from exc
    lum = np.asarray(img, dtype=np.float32) / 255.0
    bitmap = np.where(lum < threshold, np.float32(0.0), np.float32(1.0))
    writer_id = os.path.basename(os.path.dirname(os.path.abspath(path)))
    if not writer_id:
        raise IngestionError(f"cannot infer writer id from path {path}")
    page_id = os.path.splitext(os.path.basename(path))[0]
    return PageRecord(writer_id=writer_id, page_id=page_id, bitmap=bitmap, source_path=str(path))


def save_page(page: PageRecord, path):
    arr = (page.bitmap * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_corpus(root, threshold=0.5) -> list:
    pages = []
    for writer in sorted(os.listdir(root)):
        wdir = os.path.join(root, writer)
        if not os.path.isdir(wdir):
            continue
        for name in sorted(os.listdir(wdir)):
            if name.lower().endswith(".png"):
                pages.append(load_page(os.path.join(wdir, name), threshold=threshold))
    if not pages:
        raise IngestionError(f"no pages found under {root}")
    return pages


def extract_snippets(page: PageRecord, size, mode="random", min_ink=0.02, count=8, seed=0) -> ExtractResult:
    """Cut qualifying ``size x size`` snippets out of a page.

    grid: top-left-aligned non-overlapping tiles, filtered by min_ink.
    random: seeded uniform offsets, rejection-sampled until ``count`` hits or
    the retry budget (1000 * count) runs out (partial result, shortfall set).
    """
    h, w = page.bitmap.shape
    if size > h or size > w:
        raise ValueError(f"snippet size {size} exceeds page {h}x{w}")
    snippets = []
    if mode == "grid":
        for r in range(0, h - size + 1, size):
            for c in range(0, w - size + 1, size):
                window = page.bitmap[r : r + size, c : c + size]
                frac = ink_fraction(window)
                if frac >= min_ink:
                    snippets.append(_make_snippet(page, window, (r, c), frac))
        return ExtractResult(snippets)
    if mode != "random":
        raise ValueError(f"unknown extraction mode {mode!r}")
    rng = np.random.default_rng(seed)
    budget = 1000 * count
    tries = 0
    while len(snippets) < count and tries < budget:
        tries += 1
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        window = page.bitmap[r : r + size, c : c + size]
        frac = ink_fraction(window)
        if frac >= min_ink:
            snippets.append(_make_snippet(page, window, (r, c), frac))
    return ExtractResult(snippets, shortfall=len(snippets) < count)


def _make_snippet(page, window, origin, frac):
    return Snippet(
        pixels=window.copy()[None],
        writer_id=page.writer_id,
        page_id=page.page_id,
        origin=origin,
        ink_fraction=frac,
    )


def snippet_from_id(pages_by_id, snippet_id) -> Snippet:
    """Resolve ``<page_id>:<row>:<col>:<size>`` against loaded pages."""
    try:
        page_id, row, col, size = snippet_id.rsplit(":", 3)
        row, col, size = int(row), int(col), int(size)
    except ValueError as exc:
        raise KeyError(f"malformed snippet id {snippet_id!r}") from exc
    if page_id not in pages_by_id:
        raise KeyError(f"unknown page {page_id!r}")
    page = pages_by_id[page_id]
    h, w = page.bitmap.shape
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise KeyError(f"snippet {snippet_id!r} out of page bounds {h}x{w}")
    window = page.bitmap[row : row + size, col : col + size]
    return _make_snippet(page, window, (row, col), ink_fraction(window))


def split_writers(writer_ids, ratio=0.5, seed=0) -> WriterSplit:
    """Open-set split: seeded shuffle, first ceil(ratio*n) writers train."""
    ids = sorted(set(writer_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 writers to split")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = math.ceil(ratio * len(ids))
    return WriterSplit(train_writers=set(order[:n_train]), test_writers=set(order[n_train:]), seed=seed)


# -- synthetic corpus -------------------------------------------------------

# Per-writer style bounds. Stroke width is kept deliberately narrow so that
# ink density alone does not separate writers; identity lives in the glyph
# prototypes, slant and curvature.
STYLE_BOUNDS = {
    "slant_deg": (-35.0, 35.0),
    "stroke_width": (1.15, 1.45),
    "curvature": (0.2, 1.2),
    "glyph_spacing": (1.06, 1.24),
    "baseline_jitter": (0.4, 1.8),
    "size_jitter": (0.02, 0.10),
    "aspect": (0.85, 1.15),
    "loop_prob": (0.1, 0.6),
}

GLYPHS_PER_WRITER = 10
CTRL_POINTS = 5


@dataclass
class StyleParams:
    slant_deg: float
    stroke_width: float
    curvature: float
    glyph_spacing: float
    baseline_jitter: float
    size_jitter: float
    aspect: float
    loop_prob: float
    glyph_protos: list = field(default_factory=list, repr=False)  # [glyph][stroke][point, xy]

    def to_dict(self):
        return {k: getattr(self, k) for k in STYLE_BOUNDS}


def style_params(writer_seed) -> StyleParams:
    """Seeded per-writer style; same seed gives the same parameters."""
    rng = np.random.default_rng(writer_seed)
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in STYLE_BOUNDS.items()}
    protos = []
    for _ in range(GLYPHS_PER_WRITER):
        strokes = []
        for _ in range(int(rng.integers(2, 4))):
            pts = rng.uniform(0.1, 0.9, size=(CTRL_POINTS, 2))
            if rng.random() < vals["loop_prob"]:
                pts = np.vstack([pts, pts[:1]])  # closed loop
            strokes.append(pts)
        protos.append(strokes)
    return StyleParams(glyph_protos=protos, **vals)


def _stroke_points(ctrl, curvature, samples=36):
    """Smooth path through control points with curvature-scaled waviness."""
    t = np.linspace(0.0, 1.0, samples)
    n = len(ctrl)
    seg = np.clip((t * (n - 1)).astype(int), 0, n - 2)
    local = t * (n - 1) - seg
    p0 = ctrl[seg]
    p1 = ctrl[seg + 1]
    smooth = local * local * (3 - 2 * local)  # cubic easing between points
    path = p0 + (p1 - p0) * smooth[:, None]
    d = p1 - p0
    norm = np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-6)
    perp = np.stack([-d[:, 1], d[:, 0]], axis=1) / norm
    path = path + perp * (0.08 * curvature * np.sin(2 * np.pi * t))[:, None]
    return path


TARGET_PAGE_INK = 0.08


def _probe_glyph_area(style, glyph_size):
    """Mean ink pixels per glyph for the writer's alphabet at this size."""
    canvas = np.ones((2 * glyph_size, 2 * glyph_size), dtype=np.float32)
    areas = []
    for proto in style.glyph_protos:
        canvas.fill(1.0)
        _render_glyph(canvas, style, proto, glyph_size // 2, glyph_size // 2, glyph_size)
        areas.append(np.count_nonzero(canvas == 0.0))
    return float(np.mean(areas))


def _calibrate_width(style, glyph_size, target_area):
    """Adjust stroke width so mean ink per glyph hits target_area.

    Equalizes page ink density across writers: without this, per-writer
    differences in stroke count, loops and curvature leak the writer label
    through raw ink density alone.
    """
    from dataclasses import replace

    width = style.stroke_width
    best = None
    for _ in range(4):
        trial = replace(style, stroke_width=width, glyph_protos=style.glyph_protos)
        area = _probe_glyph_area(trial, glyph_size)
        err = abs(area - target_area)
        if best is None or err < best[0]:
            best = (err, width)
        if area <= 0:
            break
        width = float(np.clip(width * target_area / area, 0.7, 2.6))
    return replace(style, stroke_width=best[1], glyph_protos=style.glyph_protos)


def _render_glyph(bitmap, style, proto, x0, y0, size):
    h, w = bitmap.shape
    shear = math.tan(math.radians(style.slant_deg))
    radius = style.stroke_width / 2.0
    r_int = max(1, int(math.ceil(radius)))
    for ctrl in proto:
        pts = _stroke_points(ctrl, style.curvature)
        xs = (pts[:, 0] * style.aspect + shear * (1.0 - pts[:, 1])) * size + x0
        ys = pts[:, 1] * size + y0
        for x, y in zip(xs, ys):
            cx, cy = int(round(x)), int(round(y))
            for dy in range(-r_int, r_int + 1):
                yy = cy + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-r_int, r_int + 1):
                    xx = cx + dx
                    if xx < 0 or xx >= w:
                        continue
                    if (x - xx) ** 2 + (y - yy) ** 2 <= radius * radius:
                        bitmap[yy, xx] = 0.0


def synth_generate(writers, pages_per_writer, page_size=256, global_seed=0) -> list:
    """Generate a binary pseudo-handwriting corpus.

    Pages of one writer share StyleParams (including the writer's private
    glyph prototypes) but differ in glyph sequence and jitter.
    """
    if writers < 2:
        raise ValueError("need at least 2 writers")
    pages = []
    for w_idx in range(writers):
        writer_id = f"w{w_idx:03d}"
        style = style_params([global_seed, w_idx])
        style = _calibrate_width(style, _glyph_size(page_size), _target_glyph_area(style, page_size))
        for p_idx in range(pages_per_writer):
            page_rng = np.random.default_rng([global_seed, w_idx, p_idx])
            bitmap = _render_page(style, page_rng, page_size)
            pages.append(
                PageRecord(
                    writer_id=writer_id,
                    page_id=f"{writer_id}-p{p_idx:02d}",
                    bitmap=bitmap,
                )
            )
    return pages


def _glyph_size(page_size):
    return max(14, page_size // 12)


def _layout_counts(style, page_size):
    margin = max(6, page_size // 32)
    glyph = _glyph_size(page_size)
    leading = glyph // 2
    per_row = max(1, int((page_size - glyph - 2 * margin) // (glyph * style.glyph_spacing)) + 1)
    rows = max(1, (page_size - glyph - 2 * margin) // (glyph + leading) + 1)
    return rows * per_row


def _target_glyph_area(style, page_size):
    return TARGET_PAGE_INK * page_size * page_size / _layout_counts(style, page_size)


def _render_page(style, rng, page_size):
    bitmap = np.ones((page_size, page_size), dtype=np.float32)
    margin = max(6, page_size // 32)
    glyph = max(14, page_size // 12)
    leading = glyph // 2
    y = margin
    while y + glyph + margin <= page_size:
        x = margin
        advance = glyph * style.glyph_spacing
        while x + glyph + margin <= page_size:
            gi = int(rng.integers(0, GLYPHS_PER_WRITER))
            size = glyph * (1.0 + float(rng.uniform(-style.size_jitter, style.size_jitter)))
            jitter = float(rng.uniform(-style.baseline_jitter, style.baseline_jitter))
            _render_glyph(bitmap, style, style.glyph_protos[gi], x, y + jitter, size)
            x += advance
        y += glyph + leading
    return bitmap


def build_manifest(pages):
    """Corpus manifest: writers, pages, shapes, ink fractions, checksums."""
    manifest = {"writers": {}, "pages": []}
    for page in pages:
        checksum = hashlib.sha256(page.bitmap.astype("<f4").tobytes()).hexdigest()
        manifest["writers"].setdefault(page.writer_id, []).append(page.page_id)
        manifest["pages"].append(
            {
                "writer_id": page.writer_id,
                "page_id": page.page_id,
                "shape": list(page.bitmap.shape),
                "ink_fraction": ink_fraction(page.bitmap),
                "sha256": checksum,
            }
        )
    return manifest


def write_corpus(pages, out_dir):
    """Write pages as PNGs in the canonical layout and return the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for page in pages:
        wdir = os.path.join(out_dir, page.writer_id)
        os.makedirs(wdir, exist_ok=True)
        save_page(page, os.path.join(wdir, f"{page.page_id}.png"))
    manifest = build_manifest(pages)
    jsonio.dump(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest

import numpy as np
import pytest

from graphoscope import corpus


def _page(seed=0, size=128, ink=0.1, writer="w000", page="w000-p00"):
    rng = np.random.default_rng(seed)
    bitmap = (rng.random((size, size)) > ink).astype(np.float32)
    return corpus.PageRecord(writer_id=writer, page_id=page, bitmap=bitmap)


def test_ink_fraction_counts_black():
    bm = np.ones((4, 4), dtype=np.float32)
    bm[0, :2] = 0.0
    assert corpus.ink_fraction(bm) == 2 / 16


def test_ink_fraction_rejects_gray():
    with pytest.raises(ValueError):
        corpus.ink_fraction(np.full((2, 2), 0.5, dtype=np.float32))


def test_save_load_page_roundtrip(tmp_path):
    page = _page(3)
    wdir = tmp_path / "w000"
    wdir.mkdir()
    corpus.save_page(page, wdir / "w000-p00.png")
    back = corpus.load_page(wdir / "w000-p00.png")
    assert back.writer_id == "w000"
    assert back.page_id == "w000-p00"
    assert np.array_equal(back.bitmap, page.bitmap)


def test_load_page_threshold_bounds(tmp_path):
    wdir = tmp_path / "w"
    wdir.mkdir()
    corpus.save_page(_page(), wdir / "p.png")
    with pytest.raises(ValueError):
        corpus.load_page(wdir / "p.png", threshold=1.5)


def test_load_page_unreadable(tmp_path):
    wdir = tmp_path / "w"
    wdir.mkdir()
    bad = wdir / "p.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(corpus.IngestionError):
        corpus.load_page(bad)


def test_load_corpus_empty_dir(tmp_path):
    with pytest.raises(corpus.IngestionError):
        corpus.load_corpus(tmp_path)


def test_grid_extraction_tiles_and_filter():
    page = _page(1, size=128, ink=0.2)
    got = list(corpus.extract_snippets(page, 32, mode="grid", min_ink=0.02))
    assert len(got) == 16  # dense random ink: every tile qualifies
    origins = {s.origin for s in got}
    assert (0, 0) in origins and (96, 96) in origins
    for s in got:
        assert s.pixels.shape == (1, 32, 32)
        assert s.ink_fraction >= 0.02


def test_grid_min_ink_filters_blank_page():
    blank = corpus.PageRecord("w", "p", np.ones((64, 64), dtype=np.float32))
    got = list(corpus.extract_snippets(blank, 32, mode="grid", min_ink=0.02))
    assert got == []


def test_random_extraction_deterministic_and_bounded():
    page = _page(2, size=128, ink=0.15)
    a = corpus.extract_snippets(page, 48, mode="random", count=6, seed=11)
    b = corpus.extract_snippets(page, 48, mode="random", count=6, seed=11)
    assert [s.origin for s in a] == [s.origin for s in b]
    assert len(list(a)) == 6 and not a.shortfall


def test_random_extraction_shortfall_on_blank():
    blank = corpus.PageRecord("w", "p", np.ones((64, 64), dtype=np.float32))
    got = corpus.extract_snippets(blank, 32, mode="random", count=3, seed=0)
    assert got.shortfall
    assert len(list(got)) == 0


def test_snippet_size_exceeds_page():
    with pytest.raises(ValueError):
        corpus.extract_snippets(_page(size=64), 128)


def test_snippet_id_roundtrip():
    page = _page(4, size=96)
    snips = list(corpus.extract_snippets(page, 32, mode="grid", min_ink=0.0))
    by_id = {page.page_id: page}
    for s in snips[:4]:
        back = corpus.snippet_from_id(by_id, s.snippet_id)
        assert np.array_equal(back.pixels, s.pixels)
        assert back.writer_id == s.writer_id


def test_snippet_id_errors():
    by_id = {"p": _page(page="p")}
    with pytest.raises(KeyError):
        corpus.snippet_from_id(by_id, "garbage")
    with pytest.raises(KeyError):
        corpus.snippet_from_id(by_id, "q:0:0:32")
    with pytest.raises(KeyError):
        corpus.snippet_from_id(by_id, "p:1000:0:32")


def test_split_writers_partition():
    ids = [f"w{i}" for i in range(10)]
    split = corpus.split_writers(ids, ratio=0.5, seed=3)
    assert set(split.train_writers) | set(split.test_writers) == set(ids)
    assert not set(split.train_writers) & set(split.test_writers)
    assert len(split.train_writers) == 5
    again = corpus.split_writers(list(reversed(ids)), ratio=0.5, seed=3)
    assert set(split.train_writers) == set(again.train_writers)


def test_synth_generate_counts_and_determinism():
    a = corpus.synth_generate(3, 2, page_size=256, global_seed=5)
    b = corpus.synth_generate(3, 2, page_size=256, global_seed=5)
    assert len(a) == 6
    assert {p.writer_id for p in a} == {"w000", "w001", "w002"}
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.bitmap, pb.bitmap)


def test_synth_pages_differ_within_writer():
    pages = corpus.synth_generate(2, 2, page_size=256, global_seed=1)
    w0 = [p for p in pages if p.writer_id == "w000"]
    assert not np.array_equal(w0[0].bitmap, w0[1].bitmap)


def test_synth_ink_fraction_band():
    for page in corpus.synth_generate(4, 2, page_size=256, global_seed=2):
        frac = corpus.ink_fraction(page.bitmap)
        assert 0.03 <= frac <= 0.25, (page.page_id, frac)


def test_synth_density_does_not_leak_writer():
    # leave-one-out nearest-centroid on page ink density must stay near chance
    pages = corpus.synth_generate(8, 4, page_size=256, global_seed=7)
    feats = {p.page_id: corpus.ink_fraction(p.bitmap) for p in pages}
    hits = total = 0
    for q in pages:
        centroids = {}
        for p in pages:
            if p.page_id == q.page_id:
                continue
            centroids.setdefault(p.writer_id, []).append(feats[p.page_id])
        pred = min(centroids,
                   key=lambda w: (abs(np.mean(centroids[w]) - feats[q.page_id]), w))
        hits += pred == q.writer_id
        total += 1
    assert hits / total <= 2 * (1 / 8)


def test_write_corpus_and_manifest(tmp_path):
    pages = corpus.synth_generate(2, 2, page_size=256, global_seed=0)
    manifest = corpus.write_corpus(pages, tmp_path)
    assert (tmp_path / "manifest.json").exists()
    assert len(manifest["pages"]) == 4
    back = corpus.load_corpus(tmp_path)
    assert [p.page_id for p in back] == sorted(p.page_id for p in pages)
    for orig in pages:
        match = next(p for p in back if p.page_id == orig.page_id)
        assert np.array_equal(match.bitmap, orig.bitmap)


def test_manifest_checksums_stable(tmp_path):
    pages = corpus.synth_generate(2, 1, page_size=256, global_seed=4)
    m1 = corpus.write_corpus(pages, tmp_path / "a")
    m2 = corpus.write_corpus(pages, tmp_path / "b")
    assert m1 == m2

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from graphoscope import corpus, nets, saliency
from graphoscope.service import create_app


@pytest.fixture(scope="module")
def ctx():
    pages = corpus.synth_generate(3, 2, page_size=256, global_seed=6)
    net = nets.build_network(nets.ModelConfig(
        depth_preset="tiny", base_channels=8, embedding_dim=16,
        input_size=64, seed=1))
    net.provenance["note"] = "untrained service fixture"
    client = TestClient(create_app({"m": net}, pages))
    sid = client.get("/api/snippets", params={"page": "w000-p00"}).json()
    snippet_id = sid["pages"][0]["snippets"][0]["id"]
    return {"client": client, "pages": pages, "net": net,
            "snippet_id": snippet_id}


def test_models_endpoint(ctx):
    r = ctx["client"].get("/api/models")
    assert r.status_code == 200
    models = r.json()["models"]
    assert models[0]["name"] == "m"
    assert models[0]["provenance"]["note"] == "untrained service fixture"


def test_snippet_index_unknown_page(ctx):
    assert ctx["client"].get("/api/snippets",
                             params={"page": "nope"}).status_code == 404


def test_snippet_png_roundtrip(ctx):
    r = ctx["client"].get(f"/api/snippet/{ctx['snippet_id']}.png")
    assert r.status_code == 200
    img = np.asarray(Image.open(io.BytesIO(r.content)), dtype=np.float32) / 255.0
    by_id = {p.page_id: p for p in ctx["pages"]}
    snip = corpus.snippet_from_id(by_id, ctx["snippet_id"])
    assert np.array_equal(img, snip.pixels[0])


def test_snippet_png_unknown(ctx):
    assert ctx["client"].get("/api/snippet/zz:0:0:64.png").status_code == 404


def test_embed_endpoint_matches_library(ctx):
    r = ctx["client"].post("/api/embed", json={"model": "m",
                                               "snippet": ctx["snippet_id"]})
    assert r.status_code == 200
    body = r.json()
    by_id = {p.page_id: p for p in ctx["pages"]}
    snip = corpus.snippet_from_id(by_id, ctx["snippet_id"])
    direct = nets.embed(ctx["net"], snip)
    assert np.allclose(body["embedding"], direct, atol=1e-6)
    assert body["norm"] == pytest.approx(float(np.linalg.norm(direct)), rel=1e-6)


def test_pixelwise_endpoint_roundtrips_serializer(ctx):
    body = {"model": "m", "snippet": ctx["snippet_id"], "n": 2, "p": 0.1,
            "seed": 7}
    r = ctx["client"].post("/api/saliency/pixelwise", json=body)
    assert r.status_code == 200
    png = base64.b64decode(r.json()["png_base64"])
    raster = np.asarray(Image.open(io.BytesIO(png)), dtype=np.float64) / 65535.0
    by_id = {p.page_id: p for p in ctx["pages"]}
    snip = corpus.snippet_from_id(by_id, ctx["snippet_id"])
    direct = saliency.pixelwise_saliency(ctx["net"], snip, n=2, p=0.1, seed=7)
    assert np.max(np.abs(raster - direct.values)) <= 0.5 / 65535 + 1e-9


def test_identical_posts_identical_bodies(ctx):
    body = {"model": "m", "snippet": ctx["snippet_id"], "seed": 3}
    a = ctx["client"].post("/api/saliency/pixelwise", json=body)
    b = ctx["client"].post("/api/saliency/pixelwise", json=body)
    assert a.content == b.content


def test_overall_endpoint(ctx):
    r = ctx["client"].post("/api/saliency/overall",
                           json={"model": "m", "q": ctx["snippet_id"],
                                 "r": ctx["snippet_id"]})
    assert r.status_code == 200
    body = r.json()
    assert set(body) == {"q", "r", "similarity"}
    assert body["similarity"] == pytest.approx(1.0, abs=1e-5)


def test_point_endpoint_echoes_cell(ctx):
    r = ctx["client"].post("/api/saliency/point",
                           json={"model": "m", "q": ctx["snippet_id"],
                                 "r": ctx["snippet_id"], "row": 17, "col": 42})
    assert r.status_code == 200
    assert r.json()["meta"]["coarse_cell"] == [17 // 8, 42 // 8]


def test_point_out_of_bounds_422(ctx):
    r = ctx["client"].post("/api/saliency/point",
                           json={"model": "m", "q": ctx["snippet_id"],
                                 "r": ctx["snippet_id"], "row": 0, "col": 64})
    assert r.status_code == 422


def test_score_endpoint_curve_shapes(ctx):
    r = ctx["client"].post("/api/score", json={"model": "m",
                                               "snippet": ctx["snippet_id"],
                                               "steps": 8})
    assert r.status_code == 200
    body = r.json()
    for key in ("s_del", "r_del", "s_ins", "r_ins"):
        assert 0.0 <= body[key] <= 1.0
    assert len(body["curves"]["s_del"]["fractions"]) == 9
    assert body["curves"]["s_del"]["similarities"][0] == pytest.approx(1.0, abs=1e-6)


def test_score_unknown_technique_422(ctx):
    r = ctx["client"].post("/api/score", json={"model": "m",
                                               "snippet": ctx["snippet_id"],
                                               "technique": "magic"})
    assert r.status_code == 422


def test_malformed_requests_400(ctx):
    c = ctx["client"]
    r = c.post("/api/embed", content=b"{oops",
               headers={"content-type": "application/json"})
    assert r.status_code == 400
    assert c.post("/api/embed", json={"model": "m"}).status_code == 400
    assert c.post("/api/embed", json=[1]).status_code == 400


def test_unknown_ids_404(ctx):
    c = ctx["client"]
    assert c.post("/api/embed", json={"model": "m",
                                      "snippet": "zz:0:0:64"}).status_code == 404
    assert c.post("/api/embed", json={"model": "zz",
                                      "snippet": ctx["snippet_id"]}).status_code == 404

"""HTTP API over loaded models and a page corpus.

Synchronous inference-scale endpoints only; training stays on the CLI.
Responses are canonical JSON (PNG payloads base64-embedded) so identical
requests yield byte-identical bodies.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from PIL import Image

from . import corpus, faithfulness, jsonio, saliency
from .autodiff import DegenerateEmbeddingError
from .nets import embed


class _Cache:
    """Bounded response cache; semantically invisible (keyed by endpoint +
    canonical request body)."""

    def __init__(self, limit=256):
        self.limit = limit
        self.store = {}
        self.lock = threading.Lock()

    def get(self, key):
        with self.lock:
            return self.store.get(key)

    def put(self, key, value):
        with self.lock:
            if len(self.store) >= self.limit:
                self.store.pop(next(iter(self.store)))
            self.store[key] = value


def _json_response(payload, status=200):
    return Response(content=jsonio.dumps(payload) + "\n",
                    media_type="application/json", status_code=status)


def _error(status, message):
    return _json_response({"error": message}, status=status)


def _png_bytes_8bit(pixels):
    arr = (np.asarray(pixels)[0] * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _png_bytes_16bit(values):
    raster = np.round(np.asarray(values) * 65535.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(raster).save(buf, format="PNG")
    return buf.getvalue()


def _map_payload(smap: saliency.SaliencyMap):
    return {
        "png_base64": base64.b64encode(_png_bytes_16bit(smap.values)).decode("ascii"),
        "meta": {
            "kind": smap.kind,
            "source_id": smap.source_id,
            "counterpart_id": smap.counterpart_id,
            "point": list(smap.point) if smap.point is not None else None,
            "coarse_cell": list(smap.coarse_cell) if smap.coarse_cell is not None else None,
            "params": smap.params,
            "degenerate": smap.degenerate,
            "normalizer": smap.normalizer,
            "similarity": smap.similarity,
        },
    }


class _Precondition(ValueError):
    pass


class _Malformed(ValueError):
    pass


async def _body_of(request: Request):
    try:
        body = await request.json()
    except Exception as exc:
        raise _Malformed(f"malformed JSON body: {exc}") from exc
    if not isinstance(body, dict):
        raise _Malformed("request body must be a JSON object")
    return body


def _require(body, *keys):
    missing = [k for k in keys if k not in body]
    if missing:
        raise _Malformed("missing fields: " + ", ".join(missing))


def create_app(models: dict, pages: list) -> FastAPI:
    """models: name -> EmbeddingNetwork; pages: list of PageRecord."""
    if not models:
        raise ValueError("at least one model required")
    app = FastAPI(title="graphoscope", docs_url=None, redoc_url=None)
    pages_by_id = {p.page_id: p for p in pages}
    cache = _Cache()

    @app.exception_handler(RequestValidationError)
    async def _malformed(request: Request, exc):  # noqa: ARG001
        return _error(400, "malformed request body")

    @app.exception_handler(_Malformed)
    async def _malformed_body(request: Request, exc):  # noqa: ARG001
        return _error(400, str(exc))

    def _model(body):
        name = body.get("model")
        if name not in models:
            raise KeyError(f"unknown model {name!r}")
        return models[name]

    def _snippet(sid):
        return corpus.snippet_from_id(pages_by_id, sid)

    @app.get("/api/models")
    def list_models():
        out = []
        for name in sorted(models):
            net = models[name]
            out.append({"name": name,
                        "descriptor": net.descriptor,
                        "provenance": net.provenance})
        return _json_response({"models": out})

    @app.get("/api/snippets")
    def snippet_index(page: str | None = None, size: int | None = None,
                      min_ink: float = 0.02):
        if size is None:
            first = models[sorted(models)[0]]
            size = first.config.input_size
        wanted = [p for p in pages if page is None or p.page_id == page]
        if page is not None and not wanted:
            return _error(404, f"unknown page {page!r}")
        index = []
        for p in sorted(wanted, key=lambda p: p.page_id):
            got = corpus.extract_snippets(p, size, mode="grid", min_ink=min_ink)
            index.append({
                "page_id": p.page_id,
                "writer_id": p.writer_id,
                "snippets": [{"id": s.snippet_id, "ink_fraction": s.ink_fraction}
                             for s in got],
            })
        return _json_response({"pages": index, "size": size, "min_ink": min_ink})

    @app.get("/api/snippet/{sid}.png")
    def snippet_png(sid: str):
        try:
            snip = _snippet(sid)
        except KeyError as exc:
            return _error(404, str(exc))
        return Response(content=_png_bytes_8bit(snip.pixels), media_type="image/png")

    def _cached_post(endpoint, body, fn):
        key = (endpoint, jsonio.dumps(body))
        hit = cache.get(key)
        if hit is not None:
            return _json_response(hit)
        try:
            payload = fn()
        except _Malformed as exc:
            return _error(400, str(exc))
        except KeyError as exc:
            return _error(404, str(exc))
        except (_Precondition, faithfulness.ZeroInkError) as exc:
            return _error(422, str(exc))
        except (DegenerateEmbeddingError, FloatingPointError) as exc:
            diag = hashlib.sha256(repr(exc).encode()).hexdigest()[:12]
            return _error(500, f"numeric failure [{diag}]: {exc}")
        cache.put(key, payload)
        return _json_response(payload)

    @app.post("/api/embed")
    async def api_embed(request: Request):
        body = await _body_of(request)
        def run():
            _require(body, "model", "snippet")
            net = _model(body)
            snip = _snippet(body["snippet"])
            vec = embed(net, snip)
            return {"embedding": vec.tolist(),
                    "norm": float(np.linalg.norm(vec)),
                    "snippet": snip.snippet_id}
        return _cached_post("embed", body, run)

    @app.post("/api/saliency/pixelwise")
    async def api_pixelwise(request: Request):
        body = await _body_of(request)
        def run():
            _require(body, "model", "snippet")
            net = _model(body)
            snip = _snippet(body["snippet"])
            smap = saliency.pixelwise_saliency(
                net, snip, n=int(body.get("n", 4)), p=float(body.get("p", 0.1)),
                seed=int(body.get("seed", 0)))
            return _map_payload(smap)
        return _cached_post("saliency/pixelwise", body, run)

    @app.post("/api/saliency/overall")
    async def api_overall(request: Request):
        body = await _body_of(request)
        def run():
            _require(body, "model", "q", "r")
            net = _model(body)
            q = _snippet(body["q"])
            r = _snippet(body["r"])
            mq, mr, s = saliency.overall_saliency_pair(net, q, r)
            return {"q": _map_payload(mq), "r": _map_payload(mr),
                    "similarity": float(s)}
        return _cached_post("saliency/overall", body, run)

    @app.post("/api/saliency/point")
    async def api_point(request: Request):
        body = await _body_of(request)
        def run():
            _require(body, "model", "q", "r", "row", "col")
            net = _model(body)
            q = _snippet(body["q"])
            r = _snippet(body["r"])
            try:
                smap = saliency.point_specific_map(
                    net, q, r, (int(body["row"]), int(body["col"])))
            except ValueError as exc:
                raise _Precondition(str(exc)) from exc
            return _map_payload(smap)
        return _cached_post("saliency/point", body, run)

    @app.post("/api/score")
    async def api_score(request: Request):
        body = await _body_of(request)
        def run():
            _require(body, "model", "snippet")
            net = _model(body)
            snip = _snippet(body["snippet"])
            technique = body.get("technique", "pixelwise")
            steps = int(body.get("steps", 50))
            seed = int(body.get("seed", 0))
            repeats = int(body.get("repeats", 3))
            if technique == "pixelwise":
                smap = saliency.pixelwise_saliency(
                    net, snip, n=int(body.get("n", 4)),
                    p=float(body.get("p", 0.1)), seed=seed)
            elif technique == "overall":
                _, smap, _ = saliency.overall_saliency_pair(net, snip, snip)
            else:
                raise _Precondition(f"unknown technique {technique!r}")
            rec = faithfulness.score_snippet(net, snip, smap, steps=steps,
                                             seed=seed, random_repeats=repeats,
                                             keep_curves=True)
            curves = rec.pop("curves")
            def cur(c):
                return {"fractions": c.fractions.tolist(),
                        "similarities": c.similarities.tolist(),
                        "auc": c.auc, "mode": c.mode, "ordering": c.ordering}
            rec["snippet_id"] = snip.snippet_id
            rec["curves"] = {
                "s_del": cur(curves["s_del"]),
                "s_ins": cur(curves["s_ins"]),
                "r_del": [cur(c) for c in curves["r_del"]],
                "r_ins": [cur(c) for c in curves["r_ins"]],
            }
            rec["technique"] = technique
            return rec
        return _cached_post("score", body, run)

    return app

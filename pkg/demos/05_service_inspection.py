"""
The inspection HTTP API, exercised in-process
=============================================

The same app that ``graphoscope serve`` runs on a port, driven here through
an in-process test client: list models, pick a snippet, request an
embedding, a point-specific heatmap, and a faithfulness score. The browser
frontend in ``frontend/`` consumes exactly these endpoints.
"""

import base64

from fastapi.testclient import TestClient

from graphoscope import corpus, nets
from graphoscope.service import create_app

pages = corpus.synth_generate(3, 2, page_size=256, global_seed=4)
net = nets.build_network(nets.ModelConfig(depth_preset="tiny", base_channels=8,
                                          embedding_dim=16, input_size=64,
                                          seed=0))
client = TestClient(create_app({"demo": net}, pages))

models = client.get("/api/models").json()["models"]
print("models:", [m["name"] for m in models])

index = client.get("/api/snippets", params={"page": "w000-p00"}).json()
ids = [s["id"] for s in index["pages"][0]["snippets"]]
print(f"page w000-p00 has {len(ids)} qualifying snippets; using {ids[0]} and {ids[1]}")

emb = client.post("/api/embed", json={"model": "demo", "snippet": ids[0]}).json()
print(f"embedding dim {len(emb['embedding'])}, norm {emb['norm']:.3f}")

point = client.post("/api/saliency/point",
                    json={"model": "demo", "q": ids[0], "r": ids[1],
                          "row": 10, "col": 50}).json()
png = base64.b64decode(point["png_base64"])
print(f"point heatmap: coarse cell {point['meta']['coarse_cell']}, "
      f"{len(png)} PNG bytes")

score = client.post("/api/score", json={"model": "demo", "snippet": ids[0],
                                        "steps": 20}).json()
print(f"faithfulness: s_del {score['s_del']:.3f} vs r_del {score['r_del']:.3f}; "
      f"s_ins {score['s_ins']:.3f} vs r_ins {score['r_ins']:.3f}")

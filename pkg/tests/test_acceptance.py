"""Acceptance suite: end-to-end checks on desk-scale synthetic data.

Each test emits a single ``[acceptance] <name>: PASS|FAIL`` line. The two
training runs dominate the runtime (a few minutes each); everything else is
property-level.
"""

import os
import sys
import time

import numpy as np
import pytest

from graphoscope import autodiff as ad
from graphoscope import cli, corpus, faithfulness, jsonio, nets, saliency, training


VERDICTS = []


def _verdict(name, ok, detail=""):
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    VERDICTS.append(line)
    print(line, file=sys.stderr, flush=True)
    assert ok, line


def _tiny_net(seed, size=32):
    return nets.build_network(nets.ModelConfig(
        depth_preset="tiny", base_channels=4, embedding_dim=8,
        input_size=size, seed=seed))


def _rand_snippet(seed, size=32):
    rng = np.random.default_rng(seed)
    return (rng.random((1, size, size)) > 0.15).astype(np.float32)


# -- shared desk-scale corpus and the trained WI model -----------------------


WI_CONFIG = dict(task="WI", learning_rate=0.01, batch_size=16, epochs=20,
                 folds=4, steps_per_epoch=30, snippet_size=64, seed=11,
                 snippets_per_page=8, val_snippets_per_page=12,
                 depth_preset="tiny", base_channels=12, embedding_dim=24)


@pytest.fixture(scope="module")
def synth_split():
    pages = corpus.synth_generate(8, 4, page_size=320, global_seed=7)
    test = [p for p in pages if p.page_id.endswith("p03")]
    train = [p for p in pages if not p.page_id.endswith("p03")]
    return training.CorpusSplit(train_pages=train, test_pages=test)


@pytest.fixture(scope="module")
def wi_run(synth_split):
    start = time.monotonic()
    results = training.run_training(synth_split, training.TrainConfig(**WI_CONFIG))
    return results, time.monotonic() - start


@pytest.fixture(scope="module")
def wi_scores(wi_run, synth_split):
    """Pixelwise, overall-map and random-control faithfulness records for
    >= 100 test snippets of the trained WI model, curves kept."""
    results, _ = wi_run
    net = max(results, key=lambda r: r.test_metric).network
    snippets = []
    for page in sorted(synth_split.test_pages, key=lambda p: p.page_id):
        snippets.extend(corpus.extract_snippets(page, 64, mode="grid", min_ink=0.02))
    snippets = sorted(snippets, key=lambda s: s.snippet_id)[:100]
    assert len(snippets) >= 100
    out = {"pixelwise": [], "overall": [], "random": [], "curves": []}
    for idx, snip in enumerate(snippets):
        pix = saliency.pixelwise_saliency(net, snip, n=4, p=0.1, seed=idx)
        _, ov, _ = saliency.overall_saliency_pair(net, snip, snip)
        rnd = np.random.default_rng([idx, 9001]).random(pix.values.shape)
        for key, values in (("pixelwise", pix.values), ("overall", ov.values),
                            ("random", rnd)):
            rec = faithfulness.score_snippet(net, snip, values, steps=50,
                                             seed=idx, random_repeats=3,
                                             keep_curves=(key == "pixelwise"))
            if key == "pixelwise":
                out["curves"].append((snip, values, idx, rec.pop("curves")))
            rec["snippet_id"] = snip.snippet_id
            out[key].append(rec)
    return out


# -- 1: gradient fidelity ----------------------------------------------------


def test_gradient_fidelity():
    start = time.monotonic()
    pooled = []
    worst = 0.0
    for seed in range(10):
        net = _tiny_net(seed)
        x0 = np.random.default_rng(100 + seed).random((1, 32, 32))

        def f(x, net=net):
            return ad.tsum(ad.square(nets.forward_embedding(net, x)))

        # h small enough that central differences rarely straddle a relu kink
        mx, checked, errs = ad.finite_difference_check(f, x0, h=1e-5, sample=20,
                                                       seed=seed, full=True)
        assert checked
        worst = max(worst, mx)
        pooled.extend(errs)
    elapsed = time.monotonic() - start
    pooled = np.asarray(pooled)
    frac_tight = float(np.mean(pooled <= 1e-4))
    ok = len(pooled) >= 200 and worst <= 1e-3 and frac_tight >= 0.95 and elapsed <= 60
    _verdict("gradient-fidelity", ok,
             f"(n={len(pooled)}, max={worst:.2e}, tight={frac_tight:.0%}, {elapsed:.1f}s)")


# -- 2: decomposition identity ----------------------------------------------


def test_decomposition_identity():
    start = time.monotonic()
    ok = True
    for seed in range(10):
        net = _tiny_net(seed)
        for pair in range(10):
            q = _rand_snippet(1000 + 17 * seed + pair)
            r = _rand_snippet(2000 + 17 * seed + pair)
            _, dr = saliency.decomposition_fields(net, q, r)
            recon = dr.coarse.sum() / dr.normalizer
            ok &= abs(recon - dr.similarity) <= 1e-4 * max(abs(dr.similarity), 1e-8)
            point = saliency.point_specific_coarse(net, q, r).sum(axis=(0, 1))
            scale = max(np.abs(dr.coarse).max(), 1e-8)
            ok &= float(np.abs(point - dr.coarse).max()) <= 1e-4 * scale
    elapsed = time.monotonic() - start
    ok = ok and elapsed <= 120
    _verdict("decomposition-identity", bool(ok), f"(100 cases, {elapsed:.1f}s)")


# -- 3: head folding ---------------------------------------------------------


def test_head_folding_commutes():
    ok = True
    for case in range(100):
        net = _tiny_net(case % 10)
        snip = _rand_snippet(3000 + case)
        folded = nets.fold_head(net, nets.feature_maps(net, snip))
        via_fold = folded.values.mean(axis=(1, 2))
        direct = nets.embed(net, snip)
        ok &= float(np.abs(via_fold - direct).max()) <= 1e-5
    _verdict("head-folding", bool(ok), "(100 cases)")


# -- 4: desk-scale WI training ----------------------------------------------


def test_wi_training(wi_run):
    results, elapsed = wi_run
    best = max(r.test_metric for r in results)
    ok = best >= 0.50 and elapsed <= 900
    _verdict("wi-training", ok, f"(best test mAP {best:.3f}, {elapsed:.0f}s)")


# -- 5: desk-scale WV training ----------------------------------------------


def test_wv_training(synth_split):
    config = dict(WI_CONFIG)
    config.update(task="WV", learning_rate=0.001)
    start = time.monotonic()
    results = training.run_training(synth_split, training.TrainConfig(**config))
    elapsed = time.monotonic() - start
    best = max(r.test_metric for r in results)
    ok = best >= 0.75 and elapsed <= 900
    _verdict("wv-training", ok, f"(best pair accuracy {best:.3f}, {elapsed:.0f}s)")


# -- 6: faithfulness sanity --------------------------------------------------


def test_faithfulness_sanity(wi_scores):
    pix = faithfulness.aggregate_report(wi_scores["pixelwise"])
    ovr = faithfulness.aggregate_report(wi_scores["overall"])
    rnd = faithfulness.aggregate_report(wi_scores["random"])
    ok = (pix.auc_i >= 70 and ovr.auc_i >= 60
          and 35 <= rnd.auc_d <= 65 and 35 <= rnd.auc_i <= 65)
    _verdict("faithfulness-sanity", ok,
             f"(pixelwise auc_i {pix.auc_i:.0f}, overall auc_i {ovr.auc_i:.0f}, "
             f"random d/i {rnd.auc_d:.0f}/{rnd.auc_i:.0f})")


# -- 7: metric oracles -------------------------------------------------------


def _brute_map(items):
    vecs = np.stack([np.asarray(v, dtype=np.float64) for v, _ in items])
    labels = [w for _, w in items]
    aps = []
    for q in range(len(items)):
        rel = [j for j in range(len(items)) if j != q and labels[j] == labels[q]]
        if not rel:
            continue
        sims = {}
        for j in range(len(items)):
            if j != q:
                a, b = vecs[q], vecs[j]
                sims[j] = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        order = sorted(sims, key=lambda j: (-sims[j], j))
        hits, precisions = 0, []
        for rank, j in enumerate(order, 1):
            if j in rel:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(rel))
    return float(np.mean(aps))


def test_metric_oracles():
    ok = True
    rng = np.random.default_rng(42)
    for _ in range(50):
        n = int(rng.integers(4, 16))
        items = [(rng.standard_normal(6), f"w{rng.integers(0, 4)}") for _ in range(n)]
        labels = {w for _, w in items}
        if all(sum(1 for _, w in items if w == l) < 2 for l in labels):
            items.append((rng.standard_normal(6), items[0][1]))
        ok &= training.evaluate_map(items).value == _brute_map(items)
    for case in range(10):
        k = int(rng.integers(3, 12))
        fr = np.sort(np.concatenate([[0.0, 1.0], rng.random(k)]))
        vals = rng.random(k + 2)
        edges = np.linspace(0, 1, 400001)
        mid = (edges[:-1] + edges[1:]) / 2
        riemann = float(np.mean(np.interp(mid, fr, vals)))
        ok &= abs(float(np.trapezoid(vals, fr)) - riemann) <= 1e-6
    records = [{"snippet_id": f"s{i}", "s_del": rng.random(), "r_del": rng.random(),
                "s_ins": rng.random(), "r_ins": rng.random()} for i in range(20)]
    rep = faithfulness.aggregate_report(records)
    ok &= rep.auc_d == 100.0 * sum(r["d"] for r in rep.records) / 20
    ok &= rep.auc_i == 100.0 * sum(r["i"] for r in rep.records) / 20
    ok &= rep.auc_d + 100.0 * sum(1 - r["d"] for r in rep.records) / 20 == 100.0
    _verdict("metric-oracles", bool(ok))


# -- 8: protocol endpoints ---------------------------------------------------


def test_protocol_endpoints(wi_scores):
    ok = True
    for _snip, _values, _idx, curves in wi_scores["curves"]:
        for dc in [curves["s_del"]] + list(curves["r_del"]):
            ok &= abs(dc.similarities[0] - 1.0) <= 1e-6
        for ic in [curves["s_ins"]] + list(curves["r_ins"]):
            ok &= abs(ic.similarities[-1] - 1.0) <= 1e-6
    for snip, values, idx, _curves in wi_scores["curves"][:10]:
        paper = snip.pixels[0] >= 0.5
        dels = faithfulness.alter_sequence(snip.pixels, values, "deletion", 50, idx)
        ok &= bool(np.all(dels[-1] == 1.0))
        for img in dels:
            ok &= bool(np.all(img[0][paper] == 1.0))
        inss = faithfulness.alter_sequence(snip.pixels, values, "insertion", 50, idx)
        ok &= bool(np.array_equal(inss[-1], snip.pixels))
        for img in inss:
            ok &= bool(np.all(img[0][paper] == 1.0))
    _verdict("protocol-endpoints", bool(ok),
             f"({len(wi_scores['curves'])} curve sets)")


# -- 9: pipeline determinism -------------------------------------------------


def test_pipeline_determinism(tmp_path):
    root = str(tmp_path)
    c1, c2 = os.path.join(root, "c1"), os.path.join(root, "c2")
    m1 = os.path.join(root, "m1")
    s1, s2 = os.path.join(root, "s1"), os.path.join(root, "s2")
    r1, r2 = os.path.join(root, "r1"), os.path.join(root, "r2")

    assert cli.main(["synth", "--writers", "4", "--pages", "2",
                     "--page-size", "256", "--seed", "3", "--out", c1]) == 0
    assert cli.main(["synth", "--manifest", os.path.join(c1, "run-manifest.json"),
                     "--out", c2]) == 0
    assert cli.main(["train", "--corpus", c1, "--out", m1, "--task", "WI",
                     "--split", "page", "--epochs", "1", "--steps-per-epoch", "3",
                     "--batch-size", "8", "--folds", "2",
                     "--snippets-per-page", "3",
                     "--val-snippets-per-page", "3"]) == 0
    model = os.path.join(m1, "best.gscm")
    pages = corpus.load_corpus(c1)
    sid = next(iter(corpus.extract_snippets(pages[0], 64, mode="grid"))).snippet_id
    assert cli.main(["saliency", "--model", model, "--corpus", c1,
                     "--technique", "pixelwise", "--snippet", sid,
                     "--out", s1]) == 0
    assert cli.main(["saliency", "--manifest", os.path.join(s1, "run-manifest.json"),
                     "--out", s2]) == 0
    assert cli.main(["score", "--model", model, "--corpus", c1,
                     "--max-snippets", "4", "--steps", "10", "--out", r1]) == 0
    assert cli.main(["score", "--manifest", os.path.join(r1, "run-manifest.json"),
                     "--out", r2]) == 0

    def same(a, b):
        return open(a, "rb").read() == open(b, "rb").read()

    ok = same(os.path.join(r1, "report.json"), os.path.join(r2, "report.json"))
    maps = sorted(f for f in os.listdir(s1) if f != "run-manifest.json")
    ok &= maps == sorted(f for f in os.listdir(s2) if f != "run-manifest.json")
    for name in maps:
        ok &= same(os.path.join(s1, name), os.path.join(s2, name))
    for writer in sorted(os.listdir(c1)):
        wdir = os.path.join(c1, writer)
        if os.path.isdir(wdir):
            for name in os.listdir(wdir):
                ok &= same(os.path.join(wdir, name), os.path.join(c2, writer, name))
    _verdict("pipeline-determinism", bool(ok))

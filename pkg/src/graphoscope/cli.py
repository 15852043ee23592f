"""Command-line pipeline: synth, ingest, train, saliency, score, serve.

Every run resolves its full config (defaults < --manifest file < explicit
flags) and writes it to run-manifest.json in the output directory, so any
run can be reproduced byte-for-byte from its manifest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import corpus, faithfulness, jsonio, saliency, training
from .autodiff import DegenerateEmbeddingError
from .nets import load_network, save_network

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(RuntimeError):
    pass


def worker_count():
    try:
        return max(1, int(os.environ.get("GRAPHOSCOPE_THREADS", "1")))
    except ValueError:
        return 1


# (flag, type, default, help); bool fields use explicit true/false values
_SPECS = {
    "synth": [
        ("writers", int, 8, "number of synthetic writers"),
        ("pages", int, 4, "pages per writer"),
        ("page_size", int, 256, "square page side in pixels"),
        ("seed", int, 0, "generator seed"),
        ("out", str, None, "output corpus directory"),
    ],
    "ingest": [
        ("corpus", str, None, "page directory (<corpus>/<writer>/<page>.png)"),
        ("threshold", float, 0.5, "binarization threshold in (0,1)"),
        ("out", str, None, "output directory for manifest.json (default: corpus dir)"),
    ],
    "train": [
        ("corpus", str, None, "corpus directory"),
        ("out", str, None, "output directory"),
        ("task", str, "WI", "WI (triplet) or WV (contrastive)"),
        ("split", str, "writer", "holdout strategy: writer (open set) or page"),
        ("split_ratio", float, 0.5, "train fraction for writer split"),
        ("split_seed", int, 0, "seed for writer split"),
        ("holdout_pages", int, 1, "test pages per writer for page split"),
        ("margin", float, 0.3, "triplet margin"),
        ("margin_c", float, 0.5, "contrastive margin"),
        ("learning_rate", float, None, "default 0.01 WI / 0.001 WV"),
        ("batch_size", int, 32, "training batch size"),
        ("epochs", int, 20, "training epochs per fold"),
        ("folds", int, 4, "cross-validation folds"),
        ("steps_per_epoch", int, 25, "optimizer steps per epoch"),
        ("snippet_size", int, 64, "square snippet side"),
        ("min_ink", float, 0.02, "minimum ink fraction per snippet"),
        ("snippets_per_page", int, 4, "training snippets sampled per page"),
        ("val_snippets_per_page", int, 4, "evaluation snippets per page"),
        ("seed", int, 0, "training seed"),
        ("selection", str, "validation", "epoch selection: validation or test"),
        ("depth_preset", str, "tiny", "tiny, small or medium"),
        ("base_channels", int, 8, "stem width"),
        ("embedding_dim", int, 16, "embedding dimensionality"),
    ],
    "saliency": [
        ("model", str, None, "model file"),
        ("corpus", str, None, "corpus directory"),
        ("technique", str, "pixelwise", "pixelwise, overall or point"),
        ("snippet", str, None, "snippet id <page>:<row>:<col>:<size>"),
        ("counterpart", str, None, "second snippet id (overall/point)"),
        ("row", int, 0, "selected row in the query snippet (point)"),
        ("col", int, 0, "selected column (point)"),
        ("n", int, 4, "smoothing variants"),
        ("p", float, 0.1, "white-mask probability"),
        ("seed", int, 0, "mask seed"),
        ("out", str, None, "output directory"),
    ],
    "score": [
        ("model", str, None, "model file"),
        ("corpus", str, None, "corpus directory"),
        ("technique", str, "pixelwise", "pixelwise or overall"),
        ("snippet_size", int, 64, "square snippet side"),
        ("min_ink", float, 0.02, "minimum ink fraction"),
        ("max_snippets", int, 128, "cap on scored snippets"),
        ("steps", int, 50, "alteration batches per curve"),
        ("seed", int, 0, "base seed"),
        ("repeats", int, 3, "random baselines per snippet"),
        ("n", int, 4, "smoothing variants (pixelwise)"),
        ("p", float, 0.1, "white-mask probability (pixelwise)"),
        ("out", str, None, "output directory"),
    ],
    "serve": [
        ("model", str, None, "model file(s), comma-separated"),
        ("corpus", str, None, "corpus directory"),
        ("host", str, "127.0.0.1", "bind address"),
        ("port", int, 8000, "bind port"),
        ("out", str, ".", "directory for run-manifest.json"),
    ],
}

_REQUIRED = {
    "synth": ["out"],
    "ingest": ["corpus"],
    "train": ["corpus", "out"],
    "saliency": ["model", "corpus", "snippet", "out"],
    "score": ["model", "corpus", "out"],
    "serve": ["model", "corpus"],
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="graphoscope")
    subs = parser.add_subparsers(dest="command")
    for name, spec in _SPECS.items():
        sp = subs.add_parser(name, argument_default=argparse.SUPPRESS)
        sp.add_argument("--manifest", help="run-manifest.json to reproduce")
        for flag, typ, _default, help_text in spec:
            sp.add_argument(f"--{flag.replace('_', '-')}", dest=flag,
                            type=typ, help=help_text)
    return parser


def _resolve_config(command, args):
    config = {flag: default for flag, _t, default, _h in _SPECS[command]}
    manifest_path = getattr(args, "manifest", None)
    if manifest_path:
        manifest = jsonio.load(manifest_path)
        if manifest.get("command") != command:
            raise DataError(f"manifest is for {manifest.get('command')!r}, not {command!r}")
        config.update(manifest.get("config", {}))
    for key, value in vars(args).items():
        if key not in ("command", "manifest"):
            config[key] = value
    missing = [k for k in _REQUIRED[command] if config.get(k) is None]
    if missing:
        raise _Usage(f"{command}: missing required flags: "
                     + ", ".join("--" + m.replace("_", "-") for m in missing))
    return config


class _Usage(RuntimeError):
    pass


def _write_run_manifest(command, config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    jsonio.dump({"command": command, "config": config, "format_version": 1},
                os.path.join(out_dir, "run-manifest.json"))


def _load_corpus(path, threshold=0.5):
    try:
        return corpus.load_corpus(path, threshold=threshold)
    except (corpus.IngestionError, FileNotFoundError, NotADirectoryError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path):
    try:
        return load_network(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def _safe_name(snippet_id):
    return snippet_id.replace(":", "_")


# -- subcommands -------------------------------------------------------------


def cmd_synth(config):
    pages = corpus.synth_generate(config["writers"], config["pages"],
                                  page_size=config["page_size"],
                                  global_seed=config["seed"])
    corpus.write_corpus(pages, config["out"])
    _write_run_manifest("synth", config, config["out"])
    print(f"wrote {len(pages)} pages to {config['out']}")
    return EXIT_OK


def cmd_ingest(config):
    pages = _load_corpus(config["corpus"], threshold=config["threshold"])
    out_dir = config["out"] or config["corpus"]
    os.makedirs(out_dir, exist_ok=True)
    manifest = corpus.build_manifest(pages)
    jsonio.dump(manifest, os.path.join(out_dir, "manifest.json"))
    _write_run_manifest("ingest", config, out_dir)
    print(f"manifested {len(pages)} pages from {len(manifest['writers'])} writers")
    return EXIT_OK


def _split_corpus(pages, config):
    if config["split"] == "page":
        by_writer = {}
        for p in pages:
            by_writer.setdefault(p.writer_id, []).append(p)
        train, test = [], []
        for writer in sorted(by_writer):
            ordered = sorted(by_writer[writer], key=lambda p: p.page_id)
            k = config["holdout_pages"]
            if k >= len(ordered):
                raise DataError(f"writer {writer} has only {len(ordered)} pages, "
                                f"cannot hold out {k}")
            train.extend(ordered[:-k])
            test.extend(ordered[-k:])
        return training.CorpusSplit(train, test)
    if config["split"] == "writer":
        writers = sorted({p.writer_id for p in pages})
        split = corpus.split_writers(writers, ratio=config["split_ratio"],
                                     seed=config["split_seed"])
        train = [p for p in pages if p.writer_id in set(split.train_writers)]
        test = [p for p in pages if p.writer_id in set(split.test_writers)]
        return training.CorpusSplit(train, test)
    raise _Usage(f"unknown split {config['split']!r}")


def cmd_train(config):
    pages = _load_corpus(config["corpus"])
    data = _split_corpus(pages, config)
    keys = training.TrainConfig.__dataclass_fields__
    try:
        tc = training.TrainConfig(**{k: config[k] for k in keys if k in config})
    except ValueError as exc:
        raise _Usage(str(exc)) from exc
    folds = training.run_training(data, tc)
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    metric_rows = []
    for r in folds:
        save_network(r.network, os.path.join(out, f"fold{r.fold}.gscm"))
        metric_rows.append({
            "fold": r.fold,
            "val_metric": r.val_metric,
            "test_metric": r.test_metric,
            "best_epoch": r.best_epoch,
            "loss_trace": r.loss_trace,
            "val_writers": sorted(r.val_writers),
            "excluded_queries": r.excluded_queries,
        })
    best = max(folds, key=lambda r: r.test_metric)
    save_network(best.network, os.path.join(out, "best.gscm"))
    jsonio.dump({"task": tc.task, "folds": metric_rows, "best_fold": best.fold,
                 "config": tc.to_dict()}, os.path.join(out, "metrics.json"))
    _write_run_manifest("train", config, out)
    for row in metric_rows:
        print("fold %d: val %.4f test %.4f (epoch %d)" % (
            row["fold"], row["val_metric"], row["test_metric"], row["best_epoch"]))
    print(f"best fold {best.fold}: test {best.test_metric:.4f}")
    return EXIT_OK


def cmd_saliency(config):
    net = _load_model(config["model"])
    pages = _load_corpus(config["corpus"])
    by_id = {p.page_id: p for p in pages}
    try:
        snip = corpus.snippet_from_id(by_id, config["snippet"])
    except KeyError as exc:
        raise DataError(str(exc)) from exc
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    technique = config["technique"]
    written = []
    try:
        if technique == "pixelwise":
            smap = saliency.pixelwise_saliency(net, snip, n=config["n"],
                                               p=config["p"], seed=config["seed"])
            path = os.path.join(out, _safe_name(snip.snippet_id) + "_pixelwise.png")
            saliency.save_map(smap, path)
            written.append(path)
        elif technique in ("overall", "point"):
            if not config.get("counterpart"):
                raise _Usage(f"--counterpart required for {technique}")
            try:
                other = corpus.snippet_from_id(by_id, config["counterpart"])
            except KeyError as exc:
                raise DataError(str(exc)) from exc
            if technique == "overall":
                mq, mr, _s = saliency.overall_saliency_pair(net, snip, other)
                for tag, smap in (("q", mq), ("r", mr)):
                    path = os.path.join(out, _safe_name(smap.source_id) + f"_overall_{tag}.png")
                    saliency.save_map(smap, path)
                    written.append(path)
            else:
                try:
                    smap = saliency.point_specific_map(
                        net, snip, other, (config["row"], config["col"]))
                except ValueError as exc:
                    raise DataError(str(exc)) from exc
                path = os.path.join(out, _safe_name(other.snippet_id) + "_point.png")
                saliency.save_map(smap, path)
                written.append(path)
        else:
            raise _Usage(f"unknown technique {technique!r}")
    except DegenerateEmbeddingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_run_manifest("saliency", config, out)
    for path in written:
        print(path)
    return EXIT_OK


def _collect_snippets(pages, config):
    snippets = []
    for page in sorted(pages, key=lambda p: p.page_id):
        got = corpus.extract_snippets(page, config["snippet_size"], mode="grid",
                                      min_ink=config["min_ink"])
        snippets.extend(got)
    snippets.sort(key=lambda s: s.snippet_id)
    return snippets[: config["max_snippets"]]


def cmd_score(config):
    net = _load_model(config["model"])
    pages = _load_corpus(config["corpus"])
    snippets = _collect_snippets(pages, config)
    if not snippets:
        raise DataError(f"no snippets >= min_ink {config['min_ink']}")
    technique = config["technique"]
    if technique not in ("pixelwise", "overall"):
        raise _Usage(f"unknown technique {technique!r}")

    def one(idx_snip):
        idx, snip = idx_snip
        seed = int(np.random.default_rng([config["seed"], idx]).integers(2**31))
        if technique == "pixelwise":
            smap = saliency.pixelwise_saliency(net, snip, n=config["n"],
                                               p=config["p"], seed=seed)
        else:
            _, smap, _ = saliency.overall_saliency_pair(net, snip, snip)
        rec = faithfulness.score_snippet(net, snip, smap, steps=config["steps"],
                                         seed=seed,
                                         random_repeats=config["repeats"])
        rec["snippet_id"] = snip.snippet_id
        return rec

    try:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            records = list(pool.map(one, enumerate(snippets)))
    except faithfulness.ZeroInkError as exc:
        raise DataError(str(exc)) from exc
    except DegenerateEmbeddingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    records.sort(key=lambda r: r["snippet_id"])
    report = faithfulness.aggregate_report(
        records, config={"technique": technique, "steps": config["steps"],
                         "seed": config["seed"], "repeats": config["repeats"],
                         "model": os.path.basename(config["model"])})
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    jsonio.dump(faithfulness.report_payload(report), os.path.join(out, "report.json"))
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(faithfulness.report_csv(report))
    _write_run_manifest("score", config, out)
    print("auc_d %.1f auc_i %.1f over %d snippets" % (
        report.auc_d, report.auc_i, len(report.records)))
    return EXIT_OK


def cmd_serve(config):
    from .service import create_app
    import uvicorn

    models = {}
    for path in config["model"].split(","):
        path = path.strip()
        name = os.path.splitext(os.path.basename(path))[0]
        models[name] = _load_model(path)
    pages = _load_corpus(config["corpus"])
    app = create_app(models, pages)
    _write_run_manifest("serve", config, config["out"])
    uvicorn.run(app, host=config["host"], port=config["port"], log_level="warning")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "saliency": cmd_saliency,
    "score": cmd_score,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        config = _resolve_config(args.command, args)
        return _COMMANDS[args.command](config)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.TrainingDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

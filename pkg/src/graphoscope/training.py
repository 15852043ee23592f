"""Training of WI (triplet) and WV (contrastive) embedding networks with
Adam and writer-level k-fold cross-validation, plus retrieval/verification
metrics used for model selection."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import nets
from .autodiff import Tensor, cosine_similarity, relu, select_row, square


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "WI"  # WI or WV
    margin: float = 0.3  # triplet margin on cosine distance
    margin_c: float = 0.5  # contrastive margin on cosine distance
    learning_rate: float | None = None  # default 0.01 WI, 0.001 WV
    batch_size: int = 32
    epochs: int = 20
    folds: int = 4
    steps_per_epoch: int = 25
    snippet_size: int = 64
    min_ink: float = 0.02
    snippets_per_page: int = 4
    val_snippets_per_page: int = 4
    seed: int = 0
    selection: str = "validation"  # "validation" (default) or "test" (leakage-prone)
    depth_preset: str = "tiny"
    base_channels: int = 8
    embedding_dim: int = 16

    def __post_init__(self):
        if self.task not in ("WI", "WV"):
            raise ValueError(f"task must be WI or WV, got {self.task!r}")
        if self.margin <= 0 or self.margin_c <= 0:
            raise ValueError("margins must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.learning_rate is None:
            self.learning_rate = 0.01 if self.task == "WI" else 0.001
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.selection not in ("validation", "test"):
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def model_config(self):
        return nets.ModelConfig(
            depth_preset=self.depth_preset,
            base_channels=self.base_channels,
            embedding_dim=self.embedding_dim,
            input_size=self.snippet_size,
            seed=self.seed,
        )

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class CorpusSplit:
    """Pages available for training/validation vs held-out test pages."""

    train_pages: list
    test_pages: list


@dataclass
class FoldResult:
    fold: int
    network: nets.EmbeddingNetwork
    val_metric: float
    test_metric: float
    loss_trace: list
    best_epoch: int
    val_writers: set = field(default_factory=set)
    batch_writers: set = field(default_factory=set)  # audit: writers seen in training batches
    excluded_queries: int = 0


# -- losses ------------------------------------------------------------------


def triplet_loss(d_ap, d_an, margin):
    """max(0, d_ap - d_an + margin) on cosine distances; Tensor-differentiable."""
    d_ap = d_ap if isinstance(d_ap, Tensor) else Tensor(float(d_ap))
    d_an = d_an if isinstance(d_an, Tensor) else Tensor(float(d_an))
    return relu(d_ap - d_an + margin)


def contrastive_loss(d, same_writer, margin_c):
    """d^2 for same-writer pairs, max(0, margin_c - d)^2 otherwise."""
    d = d if isinstance(d, Tensor) else Tensor(float(d))
    if same_writer:
        return square(d)
    return square(relu(margin_c - d))


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on the parameter tensors.

    ``params`` is a name->Tensor dict; ``grads`` maps names to arrays
    (missing names count as zero gradient).
    """
    state.step += 1
    t = state.step
    for name in params:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def grads_by_name(params, grad_map):
    named = {}
    by_id = {id(t): n for n, t in params.items()}
    for tensor, g in grad_map.items():
        name = by_id.get(id(tensor))
        if name is not None:
            named[name] = g
    return named


# -- retrieval / verification metrics ---------------------------------------


@dataclass
class MapResult:
    value: float
    n_queries: int
    n_excluded: int


def evaluate_map(items) -> MapResult:
    """Mean average precision over all queries.

    ``items`` is a list of (vector, writer_id). For each query the other
    items are ranked by descending cosine similarity, ties broken by item
    index ascending. Queries with no same-writer counterpart are excluded
    and counted.
    """
    if len(items) < 2:
        raise ValueError("evaluate_map needs at least 2 items")
    vecs = np.stack([np.asarray(v, dtype=np.float64) for v, _ in items])
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        raise ad.DegenerateEmbeddingError("evaluate_map: zero-norm embedding")
    unit = vecs / norms[:, None]
    sims = unit @ unit.T
    writers = [w for _, w in items]
    aps = []
    excluded = 0
    n = len(items)
    for q in range(n):
        others = [j for j in range(n) if j != q]
        relevant = {j for j in others if writers[j] == writers[q]}
        if not relevant:
            excluded += 1
            continue
        order = sorted(others, key=lambda j: (-sims[q, j], j))
        hits = 0
        precisions = []
        for rank, j in enumerate(order, start=1):
            if j in relevant:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(relevant))
    if not aps:
        raise ValueError("evaluate_map: every query was excluded (no relevant items)")
    return MapResult(value=float(np.mean(aps)), n_queries=len(aps), n_excluded=excluded)


def evaluate_verification(pairs, threshold) -> float:
    """Accuracy of 'same writer iff similarity >= threshold'."""
    if not pairs:
        raise ValueError("evaluate_verification: empty pair list")
    if not -1 <= threshold <= 1:
        raise ValueError(f"threshold must be in [-1,1], got {threshold}")
    correct = sum(1 for sim, same in pairs if (sim >= threshold) == bool(same))
    return correct / len(pairs)


def choose_threshold(pairs):
    """Validation-accuracy-maximizing threshold; ties go to the lowest.

    Candidates are the midpoints of adjacent sorted scores plus the extremes
    (accept-all / reject-all). Returns (threshold, accuracy).
    """
    sames = [s for _, s in pairs]
    if not pairs or len(set(bool(s) for s in sames)) < 2:
        raise ValueError("choose_threshold needs at least one pair of each class")
    scores = sorted(s for s, _ in pairs)
    candidates = [scores[0]]
    for a, b in zip(scores, scores[1:]):
        if b > a:
            candidates.append((a + b) / 2)
    candidates.append(np.nextafter(scores[-1], np.inf))
    best = None
    for th in candidates:
        acc = evaluate_verification(pairs, max(-1.0, min(1.0, th)))
        if best is None or acc > best[1]:
            best = (th, acc)
    return best


# -- training ----------------------------------------------------------------


def partition_folds(writers, folds, seed):
    """Near-equal writer groups in seeded shuffled order."""
    writers = sorted(writers)
    if len(writers) < folds:
        raise ValueError(f"need at least {folds} writers for {folds}-fold CV, got {len(writers)}")
    rng = np.random.default_rng([seed, 7919])
    order = [writers[i] for i in rng.permutation(len(writers))]
    groups = [[] for _ in range(folds)]
    for i, w in enumerate(order):
        groups[i % folds].append(w)
    return groups


def _sample_snippets(pages, size, min_ink, per_page, seed_parts):
    out = []
    for idx, page in enumerate(sorted(pages, key=lambda p: p.page_id)):
        res = corpus_mod.extract_snippets(
            page, size, mode="random", min_ink=min_ink, count=per_page, seed=seed_parts + [idx]
        )
        out.extend(res.snippets)
    return out


def _by_writer(snippets):
    byw = {}
    for s in snippets:
        byw.setdefault(s.writer_id, []).append(s)
    return byw


def make_pairs(snippets, count, seed):
    """Balanced (similarity-ready) snippet pairs: half same writer, half not."""
    byw = _by_writer(snippets)
    writers = sorted(w for w in byw if len(byw[w]) >= 2)
    all_writers = sorted(byw)
    if len(all_writers) < 2 or not writers:
        raise ValueError("make_pairs needs >= 2 writers and one writer with >= 2 snippets")
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(count):
        if k % 2 == 0:
            w = writers[rng.integers(0, len(writers))]
            i, j = rng.choice(len(byw[w]), size=2, replace=False)
            pairs.append((byw[w][i], byw[w][j], 1))
        else:
            wa, wb = rng.choice(len(all_writers), size=2, replace=False)
            sa = byw[all_writers[wa]]
            sb = byw[all_writers[wb]]
            pairs.append((sa[rng.integers(0, len(sa))], sb[rng.integers(0, len(sb))], 0))
    return pairs


def _verification_pairs_scored(net, snippets, count, seed):
    pairs = make_pairs(snippets, count, seed)
    stack = np.stack([p[0].pixels for p in pairs] + [p[1].pixels for p in pairs])
    embs = nets.embed_batch(net, stack)
    n = len(pairs)
    scored = []
    for i, (_, _, same) in enumerate(pairs):
        a, b = embs[i], embs[n + i]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ad.DegenerateEmbeddingError("verification pair with zero-norm embedding")
        scored.append((float(np.dot(a, b) / (na * nb)), same))
    return scored


def _snippet_metric(net, config, snippets):
    """(metric, excluded) on a snippet set: mAP for WI, tuned accuracy for WV."""
    if config.task == "WI":
        embs = nets.embed_batch(net, np.stack([s.pixels for s in snippets]))
        res = evaluate_map([(embs[i], snippets[i].writer_id) for i in range(len(snippets))])
        return res.value, res.n_excluded
    scored = _verification_pairs_scored(net, snippets, count=4 * len(snippets), seed=[config.seed, 5077])
    _, acc = choose_threshold(scored)
    return acc, 0


def train_fold(data: CorpusSplit, config: TrainConfig, fold: int) -> FoldResult:
    """Train one CV fold; returns the best-epoch network and its metrics."""
    groups = partition_folds({p.writer_id for p in data.train_pages}, config.folds, config.seed)
    if not 0 <= fold < config.folds:
        raise ValueError(f"fold {fold} out of range for {config.folds}-fold CV")
    val_writers = set(groups[fold])
    fit_pages = [p for p in data.train_pages if p.writer_id not in val_writers]
    val_pages = [p for p in data.train_pages if p.writer_id in val_writers]

    net = nets.build_network(config.model_config())
    bn = nets.BnState()
    state = AdamState()
    loss_trace = []
    batch_writers = set()

    val_snips = _sample_snippets(val_pages, config.snippet_size, config.min_ink,
                                 config.val_snippets_per_page, [config.seed, fold, 4001])
    test_snips = _sample_snippets(data.test_pages, config.snippet_size, config.min_ink,
                                  config.val_snippets_per_page, [config.seed, 4003])

    best = None  # (metric, epoch, params, val_metric, test_metric, excluded)

    def snapshot(epoch):
        folded = nets.with_params(net, nets.fold_bn_params(net, bn))
        val_metric, excl = _snippet_metric(folded, config, val_snips) if len(val_snips) >= 2 else (0.0, 0)
        test_metric, _ = _snippet_metric(folded, config, test_snips) if len(test_snips) >= 2 else (0.0, 0)
        select_by = test_metric if config.selection == "test" else val_metric
        nonlocal best
        # ties prefer the later epoch: among equal selection scores the
        # longer-trained model generalizes better
        if best is None or select_by >= best[0]:
            best = (select_by, epoch, {k: v.copy() for k, v in folded.param_arrays().items()},
                    val_metric, test_metric, excl)

    if config.epochs == 0:
        snapshot(0)

    for epoch in range(config.epochs):
        train_snips = _sample_snippets(fit_pages, config.snippet_size, config.min_ink,
                                       config.snippets_per_page, [config.seed, fold, epoch])
        byw = _by_writer(train_snips)
        rng = np.random.default_rng([config.seed, fold, epoch, 7757])
        for _ in range(config.steps_per_epoch):
            if config.task == "WI":
                loss, seen = _triplet_step(net, byw, config, rng, bn)
            else:
                loss, seen = _contrastive_step(net, byw, config, rng, bn)
            batch_writers |= seen
            if not np.isfinite(loss.item()):
                raise TrainingDivergence(f"non-finite loss at fold {fold} epoch {epoch}")
            grad_map = ad.backward(loss)
            adam_step(net.params, grads_by_name(net.params, grad_map), state, config.learning_rate)
            loss_trace.append(loss.item())
        snapshot(epoch + 1)

    assert best is not None, "no epochs evaluated"
    net = nets.with_params(net, best[2])
    net.provenance = {
        "loss": "triplet" if config.task == "WI" else "contrastive",
        "task": config.task,
        "fold": fold,
        "best_epoch": best[1],
        "seed": config.seed,
    }
    return FoldResult(
        fold=fold,
        network=net,
        val_metric=best[3],
        test_metric=best[4],
        loss_trace=loss_trace,
        best_epoch=best[1],
        val_writers=val_writers,
        batch_writers=batch_writers,
        excluded_queries=best[5],
    )


def _triplet_step(net, byw, config, rng, bn):
    anchors_ok = sorted(w for w in byw if len(byw[w]) >= 2)
    writers = sorted(byw)
    if not anchors_ok or len(writers) < 2:
        raise TrainingDivergence("not enough snippets to form triplets")
    b = config.batch_size
    triplets = []
    seen = set()
    for _ in range(b):
        w = anchors_ok[rng.integers(0, len(anchors_ok))]
        i, j = rng.choice(len(byw[w]), size=2, replace=False)
        wn = w
        while wn == w:
            wn = writers[rng.integers(0, len(writers))]
        neg = byw[wn][rng.integers(0, len(byw[wn]))]
        triplets.append((byw[w][i], byw[w][j], neg))
        seen.update((w, wn))
    stack = np.stack([t[0].pixels for t in triplets] + [t[1].pixels for t in triplets] + [t[2].pixels for t in triplets])
    emb = nets.forward_embedding_train(net, Tensor(stack), bn)
    total = None
    for i in range(b):
        a = select_row(emb, i)
        p = select_row(emb, b + i)
        ng = select_row(emb, 2 * b + i)
        d_ap = 1.0 - cosine_similarity(a, p)
        d_an = 1.0 - cosine_similarity(a, ng)
        l = triplet_loss(d_ap, d_an, config.margin)
        total = l if total is None else total + l
    return total * (1.0 / b), seen


def _contrastive_step(net, byw, config, rng, bn):
    writers = sorted(byw)
    pair_ok = sorted(w for w in byw if len(byw[w]) >= 2)
    if not pair_ok or len(writers) < 2:
        raise TrainingDivergence("not enough snippets to form pairs")
    b = config.batch_size
    pairs = []
    seen = set()
    for k in range(b):
        if k % 2 == 0:
            w = pair_ok[rng.integers(0, len(pair_ok))]
            i, j = rng.choice(len(byw[w]), size=2, replace=False)
            pairs.append((byw[w][i], byw[w][j], 1))
            seen.add(w)
        else:
            wa = writers[rng.integers(0, len(writers))]
            wb = wa
            while wb == wa:
                wb = writers[rng.integers(0, len(writers))]
            sa, sb = byw[wa], byw[wb]
            pairs.append((sa[rng.integers(0, len(sa))], sb[rng.integers(0, len(sb))], 0))
            seen.update((wa, wb))
    stack = np.stack([p[0].pixels for p in pairs] + [p[1].pixels for p in pairs])
    emb = nets.forward_embedding_train(net, Tensor(stack), bn)
    total = None
    for i in range(b):
        a = select_row(emb, i)
        c = select_row(emb, b + i)
        d = 1.0 - cosine_similarity(a, c)
        l = contrastive_loss(d, pairs[i][2], config.margin_c)
        total = l if total is None else total + l
    return total * (1.0 / b), seen


def run_training(data: CorpusSplit, config: TrainConfig):
    """All CV folds; returns FoldResults ordered by fold index."""
    return [train_fold(data, config, f) for f in range(config.folds)]

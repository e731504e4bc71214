"""Optimization loops, the synthetic graph task, and retrieval-quality metrics.

Two training phases:

* :func:`train_cooccurrence` fits the co-occurrence embedding with a triplet
  loss (same-image positives, other-image negatives).  It is frozen afterwards.
* :func:`train_retrieval` backpropagates the weighted selection and box losses
  through the relaxed iterative retrieval into the patch embedding, the graph
  encoder and the box head.

Every random draw comes from child streams of one seed, and batch gradients
are reduced in a fixed order, so a (seed, config, data) triple fixes every
reported number bitwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .bank import CandidateSet, PatchBank, PatchRecord, build_candidates, image_cluster, synth_bank
from .config import BankConfig, ExperimentConfig, OptimConfig
from .diffmath import GradTape, InvalidArgument, Tensor, as_tensor, value_of
from .losses import (
    CoocParams,
    LossWeights,
    TrainingDiverged,
    bbox_l1_loss,
    cooc_embed,
    cooccurrence_loss,
    selection_gt_loss,
    total_retrieval_loss,
    triplet_loss,
)
from .model import ModelParams, ModelViews, _affine_leaves, _affine_view, init_model
from .retrieval import RetrievalConfig, embed_patches, group_soft_features, hard_by_group, iterative_retrieve
from .scenegraph import BBox, SceneGraph, Vocabulary, encode_objects, make_scene_graph, predict_boxes

log = logging.getLogger(__name__)

TRAINABLE = ("embed", "gcn", "bbox")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Moment-based adaptive steps over a ``name -> array`` map."""

    def __init__(self, config: OptimConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        c = self.config
        self.t += 1
        out = dict(params)
        for name, g in grads.items():
            m = c.beta1 * self.m.get(name, 0.0) + (1.0 - c.beta1) * g
            v = c.beta2 * self.v.get(name, 0.0) + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - c.beta1**self.t)
            v_hat = v / (1.0 - c.beta2**self.t)
            out[name] = params[name] - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)
        return out


def _value_and_grad(loss_fn: Callable[[Mapping[str, Tensor]], Tensor], arrays: Mapping[str, np.ndarray]):
    with GradTape() as tape:
        leaves = {name: tape.watch(Tensor(a)) for name, a in arrays.items()}
        loss = as_tensor(loss_fn(leaves))
    names = list(leaves)
    grads = tape.gradient(loss, [leaves[n] for n in names])
    return loss, dict(zip(names, grads))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    gt_hit_rate: float
    cluster_purity: float
    mean_cooc_loss: float
    mean_box_error: float
    retrievals: int
    curves: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("gt_hit_rate", "cluster_purity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CoocReport:
    initial_loss: float
    final_loss: float
    epoch_losses: list[float]
    within_distance: float
    cross_distance: float


@dataclass
class TrainReport:
    steps: int
    curves: dict[str, list[float]]
    before: MetricsReport | None = None
    after: MetricsReport | None = None


# ---------------------------------------------------------------------------
# co-occurrence pre-training


def _sample_triplets(bank: PatchBank, rng: np.random.Generator, anchors: np.ndarray):
    """One (anchor, same-image positive, other-image negative) triplet per anchor index."""
    records = bank.records
    by_image: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_image.setdefault(r.source_image_id, []).append(i)
    n = len(records)
    pos, neg = [], []
    for a in anchors:
        mates = [j for j in by_image[records[a].source_image_id] if j != a]
        pos.append(mates[int(rng.integers(len(mates)))])
        own = records[a].source_image_id
        while True:
            j = int(rng.integers(n))
            if records[j].source_image_id != own:
                break
        neg.append(j)
    return np.asarray(anchors), np.asarray(pos), np.asarray(neg)


def _cooc_leaves(params: CoocParams) -> dict[str, np.ndarray]:
    return {k: value_of(v) for k, v in _affine_leaves("cooc", params.layers).items()}


def image_distances(params: CoocParams, bank: PatchBank) -> tuple[float, float]:
    """Mean embedding distance over same-image pairs and over different-image pairs."""
    feats = np.stack([r.base_feature for r in bank.records])
    emb = value_of(cooc_embed(params, feats))
    images = np.array([r.source_image_id for r in bank.records])
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    same = images[:, None] == images[None, :]
    off_diag = ~np.eye(len(images), dtype=bool)
    return float(dist[same & off_diag].mean()), float(dist[~same].mean())


def train_cooccurrence(
    bank: PatchBank, params: CoocParams, optim: OptimConfig, eval_triplets: int = 512
) -> tuple[CoocParams, CoocReport, PatchBank]:
    """Fit the co-occurrence embedding; returns it, a report, and the bank with cooc features."""
    counts: dict[int, int] = {}
    for r in bank.records:
        counts[r.source_image_id] = counts.get(r.source_image_id, 0) + 1
    if len(counts) < 2 or min(counts.values()) < 2:
        raise InvalidArgument("co-occurrence training needs >= 2 images with >= 2 patches each")
    seq = np.random.SeedSequence(optim.seed).spawn(2)
    eval_rng, rng = np.random.default_rng(seq[0]), np.random.default_rng(seq[1])
    feats = np.stack([r.base_feature for r in bank.records])
    n = len(feats)
    held = _sample_triplets(bank, eval_rng, eval_rng.integers(n, size=eval_triplets))

    def loss_at(leaves, trip) -> Tensor:
        a, p, q = trip
        view = CoocParams(_affine_view("cooc", leaves), params.margin)
        return triplet_loss(view, feats[a], feats[p], feats[q])

    arrays = _cooc_leaves(params)
    initial = float(loss_at(arrays, held).value)
    adam = Adam(optim)
    epoch_losses = []
    for epoch in range(optim.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, optim.batch_size):
            trip = _sample_triplets(bank, rng, order[start : start + optim.batch_size])
            loss, grads = _value_and_grad(lambda lv: loss_at(lv, trip), arrays)
            v = float(loss.value)
            if not math.isfinite(v):
                raise TrainingDiverged("triplet loss is not finite", step=adam.t)
            arrays = adam.step(arrays, grads)
            total += v
            batches += 1
        epoch_losses.append(total / batches)
        log.debug("cooc epoch %d loss %.6f", epoch, epoch_losses[-1])
    trained = CoocParams(_affine_view("cooc", arrays), params.margin)
    final = float(loss_at(arrays, held).value)
    within, cross = image_distances(trained, bank)
    emb = value_of(cooc_embed(trained, feats))
    new_bank = bank.with_cooc({r.patch_id: emb[i] for i, r in enumerate(bank.records)})
    return trained, CoocReport(initial, final, epoch_losses, within, cross), new_bank


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class TrainingExample:
    graph: SceneGraph
    gt_patches: tuple[PatchRecord, ...]
    gt_boxes: tuple[BBox, ...]
    candidates: CandidateSet

    @property
    def n(self) -> int:
        return len(self.gt_patches)


@dataclass
class SyntheticTask:
    bank: PatchBank  # retrieval bank, held-out images removed
    full_bank: PatchBank
    train: list[TrainingExample]
    test: list[TrainingExample]
    clusters: int

    def cluster_of(self, image_id: int) -> int:
        return image_cluster(image_id, self.clusters)


def category_box(index: int, num_categories: int) -> BBox:
    """Fixed layout box for the ``index``-th category (0-based)."""
    cols = math.ceil(math.sqrt(num_categories))
    row, col = divmod(index, cols)
    cell = 1.0 / cols
    w = cell * (0.45 + 0.4 * ((index * 5) % num_categories) / num_categories)
    h = cell * (0.45 + 0.4 * ((index * 3 + 1) % num_categories) / num_categories)
    x0 = col * cell + 0.5 * (cell - w)
    y0 = row * cell + 0.5 * (cell - h)
    return BBox(x0, y0, x0 + w, y0 + h)


def layout_relation(a: BBox, b: BBox) -> str:
    dx = (a.x0 + a.x1 - b.x0 - b.x1) / 2
    dy = (a.y0 + a.y1 - b.y0 - b.y1) / 2
    if abs(dx) >= abs(dy):
        return "left_of" if dx < 0 else "right_of"
    return "above" if dy < 0 else "below"


def _category_index(vocab: Vocabulary, category_id: int) -> int:
    return int(vocab.token(category_id)[3:]) - 1


def make_example(
    bank: PatchBank,
    vocab: Vocabulary,
    patches: Sequence[PatchRecord],
    num_categories: int,
    k: int,
    rng: np.random.Generator,
    prefilter_noise: float,
) -> TrainingExample:
    """Graph over ``patches`` (one held-out image) with boxes, relations and GT-injected candidates."""
    boxes = [category_box(_category_index(vocab, p.category_id), num_categories) for p in patches]
    objects = [(i, p.category_id) for i, p in enumerate(patches)]
    edges = [
        (i, vocab[layout_relation(boxes[i], boxes[j])], j)
        for i in range(len(patches))
        for j in range(i + 1, len(patches))
    ]
    graph = make_scene_graph(objects, edges, vocab)
    queries = [
        (p.base_feature + rng.normal(size=p.base_feature.shape) * prefilter_noise, p.category_id)
        for p in patches
    ]
    cands = build_candidates(bank, queries, k, gt_patches=list(patches))
    return TrainingExample(graph, tuple(patches), tuple(boxes), cands)


def build_synthetic_task(config: BankConfig, k: int, seed) -> SyntheticTask:
    """Clustered bank; the last ``train_graphs + eval_graphs`` images become graphs with GT."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    bank_rng, task_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    full = synth_bank(
        bank_rng,
        config.images,
        config.per_image,
        config.clusters,
        config.d_feat,
        sigma=config.sigma,
        image_spread=config.image_spread,
        cluster_scale=config.cluster_scale,
        category_spread=config.category_spread,
        num_categories=config.num_categories,
    )
    first_held = config.images - config.train_graphs - config.eval_graphs
    bank = full.subset(r for r in full.records if r.source_image_id < first_held)
    by_image: dict[int, list[PatchRecord]] = {}
    for r in full.records:
        by_image.setdefault(r.source_image_id, []).append(r)
    examples = []
    for image in range(first_held, config.images):
        recs = by_image[image]
        pick = np.sort(task_rng.choice(len(recs), size=config.objects_per_graph, replace=False))
        examples.append(
            make_example(
                bank, full.vocabulary, [recs[i] for i in pick], config.num_categories, k, task_rng,
                config.prefilter_noise,
            )
        )
    split = config.train_graphs
    return SyntheticTask(bank, full, examples[:split], examples[split:], config.clusters)


# ---------------------------------------------------------------------------
# retrieval training


def example_parts(
    views: ModelViews,
    example: TrainingExample,
    weights: LossWeights,
    config: RetrievalConfig,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    """Loss parts for one graph; terms with zero weight are not computed."""
    parts: dict[str, Tensor] = {}
    if weights.lambda_bbx:
        boxes = predict_boxes(views.bbox, encode_objects(views.gcn, example.graph))
        parts["bbx"] = bbox_l1_loss(boxes, example.gt_boxes)
    if weights.lambda_sel_gt or weights.lambda_sel_occur:
        cands = example.candidates
        base = cands.features()
        feats = embed_patches(views.embed, base)
        gt = cands.gt_flat
        anchor = int(rng.integers(cands.n_groups))
        sel = iterative_retrieve(cands, feats, config, rng=rng, query=feats[gt[anchor]])
        if weights.lambda_sel_gt:
            parts["sel_gt"] = selection_gt_loss(sel, gt, skip_groups=[anchor])
        if weights.lambda_sel_occur:
            parts["sel_occur"] = cooccurrence_loss(views.cooc, group_soft_features(cands, sel.scores, base))
    return parts


def train_retrieval(
    examples: Sequence[TrainingExample],
    params: ModelParams,
    weights: LossWeights,
    optim: OptimConfig,
    config: RetrievalConfig,
    *,
    evaluate_on: Sequence[TrainingExample] | None = None,
    eval_config: RetrievalConfig | None = None,
    clusters: int | None = None,
    trainable: Sequence[str] = TRAINABLE,
) -> tuple[ModelParams, TrainReport]:
    """Minibatch training of the weighted retrieval loss.

    Per epoch the examples are shuffled; each batch's gradient is the mean of
    per-example gradients summed in index order.  Curves hold per-epoch means
    of the total loss and of every computed part.
    """
    if not examples:
        raise InvalidArgument("no training examples")
    names = [n for g in trainable for n in params.names(g)]
    shuffle_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(optim.seed).spawn(2))
    probe = list(evaluate_on) if evaluate_on is not None else None
    before = (
        evaluate(probe, params, eval_config or config, clusters=clusters)
        if probe is not None and clusters is not None
        else None
    )

    adam = Adam(optim)
    curves: dict[str, list[float]] = {"total": []}
    step = 0
    for epoch in range(optim.epochs):
        sums: dict[str, float] = {}
        order = shuffle_rng.permutation(len(examples))
        for start in range(0, len(order), optim.batch_size):
            batch = order[start : start + optim.batch_size]
            grad_sum = {n: np.zeros_like(params.arrays[n]) for n in names}
            for idx in batch:
                values: dict[str, float] = {}

                def loss_fn(leaves, idx=idx, values=values):
                    parts = example_parts(params.views(leaves), examples[idx], weights, config, noise_rng)
                    for key, part in parts.items():
                        values[key] = float(part.value)
                    return total_retrieval_loss(weights, parts)

                try:
                    loss, grads = _value_and_grad(loss_fn, {n: params.arrays[n] for n in names})
                except TrainingDiverged as exc:
                    raise TrainingDiverged(str(exc), step=step) from None
                total = float(loss.value)
                if not math.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise TrainingDiverged("loss or gradient is not finite", step=step)
                values["total"] = total
                for key, v in values.items():
                    sums[key] = sums.get(key, 0.0) + v
                for n in names:
                    grad_sum[n] = grad_sum[n] + grads[n]
            scale = 1.0 / len(batch)
            params = params.replace(adam.step(params.arrays, {n: g * scale for n, g in grad_sum.items()}))
            step += 1
        for key, v in sums.items():
            curves.setdefault(key, []).append(v / len(examples))
        log.info("epoch %d loss %.6f", epoch, curves["total"][-1])

    after = (
        evaluate(probe, params, eval_config or config, clusters=clusters)
        if before is not None
        else None
    )
    return params, TrainReport(step, curves, before, after)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    examples: Sequence[TrainingExample],
    params: ModelParams,
    config: RetrievalConfig,
    *,
    clusters: int | None = None,
    cluster_of: Callable[[int], int] | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Hard retrieval per example, anchored on group 0's GT patch.

    ``gt_hit_rate`` counts groups 1..n-1 (group 0 seeds the query and is always
    a hit); ``cluster_purity`` is the share of retrievals whose picks all come
    from one cluster.  With ``config.noise == "gumbel"`` the draws come from
    ``seed``; with noise disabled the report is a function of the inputs only.
    """
    if not examples:
        raise InvalidArgument("nothing to evaluate")
    if cluster_of is None:
        if clusters is None:
            raise InvalidArgument("evaluate needs clusters or cluster_of")
        cluster_of = lambda image: image_cluster(image, clusters)  # noqa: E731
    views = params.views()
    rng = np.random.default_rng(seed)
    hits = scored = pure = 0
    cooc_total = 0.0
    box_err, box_count = 0.0, 0
    for ex in examples:
        cands = ex.candidates
        base = cands.features()
        feats = embed_patches(views.embed, base)
        gt = cands.gt_flat
        sel = iterative_retrieve(cands, feats, config, rng=rng, query=feats[gt[0]])
        picks = hard_by_group(cands, sel)
        flat = cands.flat
        hits += sum(picks[g] == gt[g] for g in range(1, cands.n_groups))
        scored += cands.n_groups - 1
        pure += len({cluster_of(flat[i].source_image_id) for i in picks}) == 1
        cooc_total += float(cooccurrence_loss(views.cooc, base[np.array(picks)]).value)
        pred = value_of(predict_boxes(views.bbox, encode_objects(views.gcn, ex.graph)))
        target = np.array([b.as_tuple() for b in ex.gt_boxes])
        box_err += float(np.abs(pred - target).sum())
        box_count += target.size
    return MetricsReport(
        gt_hit_rate=hits / scored if scored else 1.0,
        cluster_purity=pure / len(examples),
        mean_cooc_loss=cooc_total / len(examples),
        mean_box_error=box_err / box_count,
        retrievals=len(examples),
    )


# ---------------------------------------------------------------------------
# full experiment


@dataclass
class ExperimentResult:
    params: ModelParams
    initial: ModelParams
    vocabulary: Vocabulary
    cooc: CoocReport | None
    train: TrainReport
    untrained: MetricsReport
    trained: MetricsReport

    def report(self, config: ExperimentConfig) -> dict:
        return {
            "config_digest": config.digest(),
            "seed": config.optim.seed,
            "untrained": self.untrained.to_dict(),
            "trained": self.trained.to_dict(),
            "gt_hit_gain": self.trained.gt_hit_rate - self.untrained.gt_hit_rate,
            "gt_hit_rate": self.trained.gt_hit_rate,
            "cooccurrence": asdict(self.cooc) if self.cooc is not None else None,
            "curves": self.train.curves,
            "steps": self.train.steps,
        }


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Build the synthetic task, pre-train F_occur, train retrieval, evaluate before and after."""
    seq = np.random.SeedSequence(config.optim.seed)
    task_seq, init_seq = seq.spawn(2)
    task = build_synthetic_task(config.bank, config.retrieval.k, task_seq)
    vocab = task.full_bank.vocabulary
    initial = init_model(init_seq, config.model, config.bank.d_feat, len(vocab))
    params = initial
    cooc_report = None
    cooc_opt = config.optim.cooccurrence()
    if cooc_opt.epochs > 0:
        cooc, cooc_report, _ = train_cooccurrence(task.bank, params.views().cooc, cooc_opt)
        params = params.with_cooc(cooc)
    eval_cfg = config.retrieval.evaluation()
    untrained = evaluate(task.test, params, eval_cfg, clusters=task.clusters)
    params, report = train_retrieval(
        task.train, params, config.losses, config.optim.retrieval(), config.retrieval.training()
    )
    trained = evaluate(task.test, params, eval_cfg, clusters=task.clusters)
    return ExperimentResult(params, initial, vocab, cooc_report, report, untrained, trained)

import math

import numpy as np
import pytest

from diffretrieve import trainer
from diffretrieve.bank import CandidateSet, synth_bank
from diffretrieve.config import BankConfig, ExperimentConfig, OptimConfig
from diffretrieve.diffmath import InvalidArgument, Tensor
from diffretrieve.losses import LossWeights, TrainingDiverged, init_cooc
from diffretrieve.model import ModelConfig, init_model
from diffretrieve.retrieval import RetrievalConfig
from diffretrieve.scenegraph import make_scene_graph
from diffretrieve.trainer import (
    Adam,
    MetricsReport,
    TrainingExample,
    build_synthetic_task,
    category_box,
    evaluate,
    image_distances,
    layout_relation,
    make_example,
    run_experiment,
    train_cooccurrence,
    train_retrieval,
)

SMALL_MODEL = ModelConfig(embed_hidden=8, embed_dim=6, gcn_dim=8, gcn_layers=2, bbox_hidden=8, cooc_hidden=8, cooc_dim=4)
SMALL_BANK = BankConfig(
    clusters=4, d_feat=6, images=40, per_image=4, num_categories=4, train_graphs=8, eval_graphs=6
)
EVAL = RetrievalConfig(tau=0.01, k=3, query_init="given-feature", noise="disabled")
TRAIN = RetrievalConfig(tau=1.0, k=3, query_init="given-feature", noise="gumbel")


@pytest.fixture(scope="module")
def task():
    return build_synthetic_task(SMALL_BANK, 3, 0)


@pytest.fixture(scope="module")
def params(task):
    return init_model(0, SMALL_MODEL, SMALL_BANK.d_feat, len(task.full_bank.vocabulary))


class TestAdam:
    def test_zero_gradient_keeps_bits(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        adam = Adam(OptimConfig(learning_rate=0.1))
        adam.step(p, {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)})
        out = adam.step(p, {"w": np.zeros((3, 2)), "b": np.zeros(2)})
        assert all(out[k].tobytes() == p[k].tobytes() for k in p)

    def test_zero_learning_rate(self):
        rng = np.random.default_rng(1)
        p = {"w": rng.normal(size=4)}
        adam = Adam(OptimConfig(learning_rate=0.0))
        for _ in range(3):
            out = adam.step(p, {"w": rng.normal(size=4)})
            assert out["w"].tobytes() == p["w"].tobytes()

    def test_first_step_is_signed_lr(self):
        # with bias correction the first step has magnitude lr (up to eps)
        adam = Adam(OptimConfig(learning_rate=0.01, beta1=0.0, beta2=0.9, eps=1e-12))
        out = adam.step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 1e-3])})
        np.testing.assert_allclose(out["w"], [-0.01, 0.01, -0.01], rtol=1e-8)

    def test_hand_computed_second_step(self):
        c = OptimConfig(learning_rate=0.1, beta1=0.5, beta2=0.9, eps=1e-300)
        adam = Adam(c)
        p = adam.step({"w": np.array([1.0])}, {"w": np.array([1.0])})
        p = adam.step(p, {"w": np.array([3.0])})
        m = 0.5 * 0.5 * 1.0 + 0.5 * 3.0
        v = 0.9 * 0.1 * 1.0 + 0.1 * 9.0
        want = 0.9 - 0.1 * (m / (1 - 0.25)) / math.sqrt(v / (1 - 0.81))
        assert p["w"][0] == pytest.approx(want, rel=1e-12)

    def test_untouched_names_pass_through(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        out = Adam(OptimConfig(learning_rate=0.1)).step(p, {"a": np.ones(2)})
        assert out["b"] is p["b"]


class TestReports:
    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rates_checked(self, rate):
        with pytest.raises(InvalidArgument):
            MetricsReport(rate, 0.5, 0.0, 0.0, 1)


class TestCooccurrence:
    @pytest.fixture
    def bank(self):
        # images packed closely enough that the untrained embedding mixes them
        return synth_bank(np.random.default_rng(2), 24, 4, 4, 6, sigma=0.05, image_spread=0.05, cluster_scale=0.1)

    def test_loss_drops(self, bank):
        cooc = init_cooc(np.random.default_rng(3), [6, 12, 4])
        trained, report, new_bank = train_cooccurrence(
            bank, cooc, OptimConfig(learning_rate=0.005, epochs=15, batch_size=32)
        )
        assert report.final_loss < 0.5 * report.initial_loss
        assert len(report.epoch_losses) == 15
        assert report.within_distance < report.cross_distance
        assert (report.within_distance, report.cross_distance) == image_distances(trained, bank)
        assert all(r.cooc_feature is not None and r.cooc_feature.shape == (4,) for r in new_bank.records)

    def test_zero_learning_rate(self, bank):
        cooc = init_cooc(np.random.default_rng(3), [6, 12, 4])
        trained, report, _ = train_cooccurrence(bank, cooc, OptimConfig(learning_rate=0.0, epochs=2))
        for a, b in zip(cooc.layers, trained.layers):
            assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()
        assert report.initial_loss == report.final_loss

    def test_deterministic(self, bank):
        cooc = init_cooc(np.random.default_rng(3), [6, 12, 4])
        opt = OptimConfig(learning_rate=0.01, epochs=2, batch_size=16, seed=5)
        a = train_cooccurrence(bank, cooc, opt)[0]
        b = train_cooccurrence(bank, cooc, opt)[0]
        assert all(x.weight.tobytes() == y.weight.tobytes() for x, y in zip(a.layers, b.layers))

    def test_degenerate_bank(self):
        one_image = synth_bank(np.random.default_rng(4), 1, 5, 1, 3)
        with pytest.raises(InvalidArgument):
            train_cooccurrence(one_image, init_cooc(np.random.default_rng(0), [3, 2]), OptimConfig())
        singletons = synth_bank(np.random.default_rng(4), 5, 1, 1, 3)
        with pytest.raises(InvalidArgument):
            train_cooccurrence(singletons, init_cooc(np.random.default_rng(0), [3, 2]), OptimConfig())


class TestSyntheticTask:
    def test_layout(self, task):
        assert len(task.train) == 8 and len(task.test) == 6
        held = {p.source_image_id for ex in task.train + task.test for p in ex.gt_patches}
        assert held.isdisjoint({r.source_image_id for r in task.bank.records})
        for ex in task.train:
            assert ex.n == 3 and len({p.source_image_id for p in ex.gt_patches}) == 1
            flat = ex.candidates.flat
            assert [flat[i].patch_id for i in ex.candidates.gt_flat] == [p.patch_id for p in ex.gt_patches]

    def test_boxes_are_a_function_of_category(self, task):
        seen = {}
        for ex in task.train + task.test:
            for p, box in zip(ex.gt_patches, ex.gt_boxes):
                assert seen.setdefault(p.category_id, box) == box

    @pytest.mark.parametrize("c", [1, 4, 6, 9])
    def test_category_boxes_disjoint(self, c):
        boxes = [category_box(i, c) for i in range(c)]
        for i in range(c):
            for j in range(i + 1, c):
                a, b = boxes[i], boxes[j]
                assert a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0

    def test_relation_from_layout(self):
        left, right = category_box(0, 4), category_box(1, 4)
        below = category_box(2, 4)
        assert layout_relation(left, right) == "left_of"
        assert layout_relation(right, left) == "right_of"
        assert layout_relation(left, below) == "above"

    def test_seeded(self):
        a = build_synthetic_task(SMALL_BANK, 3, 7)
        b = build_synthetic_task(SMALL_BANK, 3, 7)
        assert [p.patch_id for ex in a.train for p in ex.candidates.flat] == [
            p.patch_id for ex in b.train for p in ex.candidates.flat
        ]


class TestTrainRetrieval:
    def test_zero_weights_leave_params(self, task, params):
        out, report = train_retrieval(
            task.train, params, LossWeights(0.0, 0.0, 0.0), OptimConfig(learning_rate=0.01, epochs=2, batch_size=4), TRAIN
        )
        assert out.equal_bits(params)
        assert report.steps == 4

    def test_deterministic(self, task, params):
        opt = OptimConfig(learning_rate=0.01, epochs=1, batch_size=4, seed=3)
        a, ra = train_retrieval(task.train, params, LossWeights(), opt, TRAIN)
        b, rb = train_retrieval(task.train, params, LossWeights(), opt, TRAIN)
        assert a.equal_bits(b) and ra.curves == rb.curves

    def test_curves_finite_and_cooc_frozen(self, task, params):
        opt = OptimConfig(learning_rate=0.01, epochs=2, batch_size=4)
        out, report = train_retrieval(task.train, params, LossWeights(), opt, TRAIN)
        assert set(report.curves) == {"total", "sel_gt", "sel_occur", "bbx"}
        assert all(len(c) == 2 and all(math.isfinite(v) for v in c) for c in report.curves.values())
        for name in params.names("cooc"):
            assert out.arrays[name].tobytes() == params.arrays[name].tobytes()
        assert not out.equal_bits(params)

    def test_divergence_reports_step(self, task, params, monkeypatch):
        real = trainer.example_parts
        calls = {"n": 0}

        def poisoned(*args):
            calls["n"] += 1
            parts = real(*args)
            if calls["n"] > 5:
                parts["bbx"] = parts["bbx"] * Tensor(float("nan"))
            return parts

        monkeypatch.setattr(trainer, "example_parts", poisoned)
        with pytest.raises(TrainingDiverged) as info:
            train_retrieval(task.train, params, LossWeights(), OptimConfig(epochs=1, batch_size=2), TRAIN)
        assert info.value.step == 2

    def test_before_and_after_reports(self, task, params):
        opt = OptimConfig(learning_rate=0.01, epochs=1, batch_size=4)
        _, report = train_retrieval(
            task.train, params, LossWeights(), opt, TRAIN, evaluate_on=task.test, eval_config=EVAL, clusters=4
        )
        assert report.before.retrievals == report.after.retrievals == 6

    def test_no_examples(self, params):
        with pytest.raises(InvalidArgument):
            train_retrieval([], params, LossWeights(), OptimConfig(), TRAIN)


def _one_per_category_task():
    rng = np.random.default_rng(5)
    full = synth_bank(rng, 2, 3, 1, 4)
    held = [r for r in full.records if r.source_image_id == 1]
    # the retrieval bank holds exactly one patch per category: the GT itself
    ex = make_example(full.subset(held), full.vocabulary, held, 3, 5, rng, 0.3)
    return full, ex


def _uniform_purity_oracle(labels, clusters, trials, rng):
    """P(every group's uniformly chosen candidate lies in one cluster)."""
    picks = np.stack([rng.integers(len(g), size=trials) for g in labels], axis=1)
    clus = np.stack([np.asarray(g)[picks[:, i]] for i, g in enumerate(labels)], axis=1)
    return float(np.mean((clus == clus[:, :1]).all(axis=1)))


class TestEvaluate:
    def test_one_patch_per_category(self):
        full, ex = _one_per_category_task()
        params = init_model(1, SMALL_MODEL, 4, len(full.vocabulary))
        report = evaluate([ex], params, EVAL, clusters=1)
        assert report.gt_hit_rate == 1.0
        assert all(len(g) == 1 for g in ex.candidates.groups)

    def test_repeatable(self, task, params):
        a = evaluate(task.test, params, EVAL, clusters=4)
        b = evaluate(task.test, params, EVAL, clusters=4)
        assert a.to_dict() == b.to_dict()
        assert 0 <= a.gt_hit_rate <= 1 and 0 <= a.cluster_purity <= 1

    def test_gumbel_evaluation_is_seeded(self, task, params):
        cfg = RetrievalConfig(tau=0.01, k=3, query_init="given-feature", noise="gumbel")
        a = evaluate(task.test, params, cfg, clusters=4, seed=3)
        b = evaluate(task.test, params, cfg, clusters=4, seed=3)
        assert a.to_dict() == b.to_dict()

    def test_purity_of_random_choice(self):
        # a zero embedding makes every candidate equidistant, so the hard picks
        # are uniform within each group; candidates are spread over clusters
        clusters, n, k = 3, 3, 3
        rng = np.random.default_rng(6)
        bank = synth_bank(rng, 12, n, clusters, 4, sigma=0.01, cluster_scale=10.0)
        vocab = bank.vocabulary
        examples, labels = [], []
        for _ in range(400):
            groups, lab = [], []
            for g in range(n):
                recs = bank.by_category(g + 1)
                chosen = [recs[int(i)] for i in rng.choice(len(recs), size=k, replace=False)]
                groups.append(chosen)
                lab.append([r.source_image_id % clusters for r in chosen])
            cands = CandidateSet(groups, [[0.0] * k] * n, gt_index=[0] * n)
            graph = make_scene_graph([(g, g + 1) for g in range(n)], [], vocab)
            boxes = tuple(category_box(g, n) for g in range(n))
            examples.append(TrainingExample(graph, tuple(grp[0] for grp in groups), boxes, cands))
            labels.append(lab)
        params = init_model(0, SMALL_MODEL, 4, len(vocab))
        params = params.replace({name: np.zeros_like(params.arrays[name]) for name in params.names("embed")})
        cfg = RetrievalConfig(tau=0.01, k=k, query_init="given-feature", noise="gumbel")
        report = evaluate(examples, params, cfg, clusters=clusters, seed=11)
        # group 0 is the query anchor, so its GT (index 0) is pinned in the oracle
        oracle_rng = np.random.default_rng(12)
        want = np.mean(
            [_uniform_purity_oracle([lab[0][:1]] + lab[1:], clusters, 2000, oracle_rng) for lab in labels]
        )
        assert abs(report.cluster_purity - want) < 0.05

    def test_needs_cluster_map(self, task, params):
        with pytest.raises(InvalidArgument):
            evaluate(task.test, params, EVAL)


class TestExperiment:
    def test_small_run_is_reproducible(self):
        cfg = ExperimentConfig(bank=SMALL_BANK, model=SMALL_MODEL).with_overrides(
            optim={"epochs": 1, "cooc_epochs": 1, "batch_size": 4, "seed": 2}, retrieval={"k": 3}
        )
        a = run_experiment(cfg).report(cfg)
        b = run_experiment(cfg).report(cfg)
        assert a == b
        assert a["config_digest"] == cfg.digest()
        assert 0 <= a["gt_hit_rate"] <= 1
        assert a["cooccurrence"]["epoch_losses"]

    def test_zero_epochs_keep_initialization(self):
        cfg = ExperimentConfig(bank=SMALL_BANK, model=SMALL_MODEL).with_overrides(
            optim={"epochs": 0, "cooc_epochs": 0}, retrieval={"k": 3}
        )
        result = run_experiment(cfg)
        assert result.params.equal_bits(result.initial)
        assert result.cooc is None and result.train.steps == 0

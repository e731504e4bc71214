"""Self-checks: gradient checks, sampling statistics, brute-force oracles, invariants.

The oracles here are written in plain Python (``math`` and lists) so they
share no code path with the numpy kernels they check.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bank import bank_to_text, parse_bank, prefilter, synth_bank
from .diffmath import Tensor, grad_check, gumbel_noise, softmax_tau, sum_
from .losses import cooccurrence_loss, init_cooc, selection_gt_loss, triplet_loss
from .retrieval import (
    RetrievalConfig,
    compute_pi,
    group_soft_features,
    iterative_retrieve,
    select_single,
    wrs_subset,
)
from .scenegraph import Vocabulary, encode_objects, init_bbox_head, init_gcn, parse_scene_graph, predict_boxes

SUITES = ("gradcheck", "sampling", "oracle", "properties")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.name}: {self.detail}"

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "name": self.name,
            "passed": bool(self.passed),
            "value": float(self.value),
            "tolerance": float(self.tolerance),
            "detail": self.detail,
        }


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    start = time.perf_counter()
    result = fn()
    result.seconds = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# pure-Python oracles


def py_l2(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def py_argmax(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def top_n_by_sort(values, n: int) -> list[int]:
    """Indices of the ``n`` largest values, largest first (ties by lower index)."""
    return sorted(range(len(values)), key=lambda i: (-values[i], i))[:n]


def plackett_luce_inclusion(weights, n: int) -> list[float]:
    """Exact P(item in sample) for sequential weighted sampling without replacement."""
    total = sum(weights)
    probs = [0.0] * len(weights)
    for order in itertools.permutations(range(len(weights)), n):
        p, left = 1.0, total
        for i in order:
            p *= weights[i] / left
            left -= weights[i]
        for i in order:
            probs[i] += p
    return probs


def greedy_retrieval(features, group_of, query, n: int) -> tuple[list[int], float]:
    """Greedy nearest neighbour with the two-term query average, one pick per group.

    Also returns the smallest gap between the best and second-best eligible
    distance over all rounds; small gaps make the relaxed reading ambiguous.
    """
    q = list(query)
    blocked: set[int] = set()
    picks, min_gap = [], math.inf
    for _ in range(n):
        cand = [(py_l2(f, q), i) for i, f in enumerate(features) if group_of[i] not in blocked]
        cand.sort()
        if len(cand) > 1:
            min_gap = min(min_gap, cand[1][0] - cand[0][0])
        pick = cand[0][1]
        picks.append(pick)
        blocked.add(group_of[pick])
        q = [(a + b) / 2 for a, b in zip(q, features[pick])]
    return picks, min_gap


# ---------------------------------------------------------------------------
# gradcheck


def check_select_single_grad(points: int = 5, seed: int = 0, tol: float = 1e-4, tau: float = 0.5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        k, d = int(rng.integers(2, 7)), 3
        feats = rng.normal(size=(k, d))
        noise = gumbel_noise(rng, k)
        w = rng.normal(size=k)
        cfg = RetrievalConfig(tau=tau)
        fn = lambda q: sum_(select_single(compute_pi(q, feats), cfg, noise=noise) * w)  # noqa: E731
        worst = max(worst, grad_check(fn, rng.normal(size=d)))
    return CheckResult("gradcheck", "select_single(compute_pi)", worst < tol, worst, tol,
                       f"max rel. error {worst:.2e} over {points} points (tol {tol:g})")


def check_retrieval_grad(points: int = 5, seed: int = 0, tol: float = 1e-4, tau: float = 0.5) -> CheckResult:
    rng = np.random.default_rng(seed)
    n, k, d = 3, 4, 3
    group_of = np.repeat(np.arange(n), k)
    cooc = init_cooc(np.random.default_rng(seed + 1), [d, 6, 4])
    cfg = RetrievalConfig(tau=tau, query_init="given-feature")
    worst = 0.0
    for _ in range(points):
        noise = gumbel_noise(rng, (n, n * k))
        query = rng.normal(size=d)
        gt = [int(g * k + rng.integers(k)) for g in range(n)]

        def fn(f):
            sel = iterative_retrieve(group_of, f, cfg, query=query, noise=noise)
            soft = group_soft_features(group_of, sel.scores, f)
            return selection_gt_loss(sel, gt) + cooccurrence_loss(cooc, soft)

        worst = max(worst, grad_check(fn, rng.normal(size=(n * k, d))))
    return CheckResult("gradcheck", "iterative_retrieve+losses", worst < tol, worst, tol,
                       f"max rel. error {worst:.2e} over {points} points (tol {tol:g})")


def check_encoder_grad(points: int = 2, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.build(["a", "b"], ["left_of"])
    graph = parse_scene_graph("obj 0 a\nobj 1 b\nrel 0 left_of 1\n", vocab)
    worst = 0.0
    for _ in range(points):
        gcn = init_gcn(rng, len(vocab), dim=4, n_layers=2)
        head = init_bbox_head(rng, 4, hidden=5)

        def fn(table):
            params = type(gcn)(table, gcn.rel_table, gcn.layers)
            return sum_(predict_boxes(head, encode_objects(params, graph)))

        worst = max(worst, grad_check(fn, gcn.obj_table))
    return CheckResult("gradcheck", "gcn+bbox head", worst < tol, worst, tol,
                       f"max rel. error {worst:.2e} over {points} points (tol {tol:g})")


def check_triplet_grad(points: int = 5, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, used = 0.0, 0
    params = init_cooc(rng, [4, 6, 3], margin=0.2)
    while used < points:
        a, p, n = rng.normal(size=(3, 4))
        fa = lambda x: triplet_loss(params, x, p, n)  # noqa: E731
        pre = float(fa(Tensor(a)).value)
        if abs(pre) < 1e-6:  # hinge kink or inactive: skip
            continue
        worst = max(worst, grad_check(fa, a))
        used += 1
    return CheckResult("gradcheck", "triplet_loss", worst < tol, worst, tol,
                       f"max rel. error {worst:.2e} over {points} points (tol {tol:g})")


# ---------------------------------------------------------------------------
# sampling


PI_GRID = (
    (0.7, 0.3),
    (1.0, 1.0, 1.0),
    (0.5, 0.3, 0.2),
    (0.1, 0.2, 0.3, 0.4),
    (5.0, 1.0, 1.0, 1.0, 2.0),
    (0.05, 0.15, 0.2, 0.25, 0.35, 1.0),
    (1, 2, 3, 4, 5, 6, 7),
    (0.01, 0.02, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0),
)


def check_gumbel_frequencies(trials: int = 100_000, seed: int = 7, tol: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = RetrievalConfig(tau=0.1)
    for pi in PI_GRID:
        k = len(pi)
        noise = gumbel_noise(rng, (trials, k))
        s = select_single(np.array(pi, dtype=float), cfg, noise=noise).value
        freq = np.bincount(s.argmax(axis=1), minlength=k) / trials
        total = math.fsum(pi)
        worst = max(worst, max(abs(freq[i] - pi[i] / total) for i in range(k)))
    return CheckResult("sampling", "gumbel-max frequencies", worst < tol, worst, tol,
                       f"max |freq - pi/sum| {worst:.4f} over {len(PI_GRID)} distributions x {trials} trials")


def check_wrs_inclusion(trials: int = 100_000, seed: int = 7, tol: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(seed)
    pi = [0.1, 0.2, 0.3, 0.4]
    exact = plackett_luce_inclusion(pi, 2)
    counts = np.zeros(4)
    cfg = RetrievalConfig(tau=0.1)
    noise = gumbel_noise(rng, (trials, 4))
    for t in range(trials):
        sel = wrs_subset(np.array(pi), 2, cfg, noise=noise[t])
        counts[sel.selected_hard] += 1
    worst = float(np.max(np.abs(counts / trials - exact)))
    return CheckResult("sampling", "wrs inclusion frequencies", worst < tol, worst, tol,
                       f"max |freq - exact| {worst:.4f}, n=2 of 4, {trials} trials")


# ---------------------------------------------------------------------------
# oracles


def check_relaxation_limit(instances: int = 1000, seed: int = 0, tau: float = 0.01, min_mass: float = 0.999):
    """Argmax agreement and argmax mass of select_single at small tau; two results."""
    rng = np.random.default_rng(seed)
    cfg = RetrievalConfig(tau=tau)
    agree, masses = 0, []
    for _ in range(instances):
        k = int(rng.integers(2, 9))
        pi = rng.uniform(0.05, 1.0, size=k)
        g = gumbel_noise(rng, k)
        s = select_single(pi, cfg, noise=g).value
        perturbed = [float(g[i]) + math.log(float(pi[i])) for i in range(k)]
        best = py_argmax(perturbed)
        agree += int(np.argmax(s)) == best
        masses.append(float(s[best]))
    low = sum(m < min_mass for m in masses)
    return (
        CheckResult("oracle", "relaxation argmax", agree == instances, agree / instances, 1.0,
                    f"{agree}/{instances} argmax agreement at tau={tau}"),
        CheckResult("oracle", "relaxation mass", low == 0, min(masses), min_mass,
                    f"{instances - low}/{instances} instances with argmax mass >= {min_mass} "
                    f"(min {min(masses):.4f}, mean {sum(masses) / len(masses):.6f})"),
    )


def check_wrs_sort(instances: int = 1000, seed: int = 0, tau: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = RetrievalConfig(tau=tau)
    agree = 0
    for _ in range(instances):
        m = int(rng.integers(1, 33))
        n = int(rng.integers(1, min(8, m) + 1))
        pi = rng.uniform(0.01, 1.0, size=m)
        g = gumbel_noise(rng, m)
        sel = wrs_subset(pi, n, cfg, noise=g)
        perturbed = [float(g[i]) + math.log(float(pi[i])) for i in range(m)]
        agree += sel.selected_hard == top_n_by_sort(perturbed, n)
    return CheckResult("oracle", "wrs top-n vs sort", agree == instances, agree / instances, 1.0,
                       f"{agree}/{instances} exact top-n agreement")


def random_greedy_instance(rng: np.random.Generator):
    n = int(rng.integers(1, 5))
    sizes = rng.integers(1, 5, size=n)
    group_of = [g for g in range(n) for _ in range(int(sizes[g]))]
    feats = rng.uniform(-1.0, 1.0, size=(len(group_of), 3))
    query = rng.uniform(-1.0, 1.0, size=3)
    return n, group_of, feats, query


def check_greedy_oracle(instances: int = 500, seed: int = 0, tau: float = 0.01, margin: float = 0.2) -> CheckResult:
    """Noise-free retrieval at small tau against greedy search.

    Instances whose greedy decisions are within ``margin`` of a tie are
    redrawn: there the relaxed and hard dynamics legitimately differ.
    """
    rng = np.random.default_rng(seed)
    cfg = RetrievalConfig(tau=tau, query_init="given-feature", noise="disabled")
    agree = drawn = 0
    for _ in range(instances):
        while True:
            drawn += 1
            n, group_of, feats, query = random_greedy_instance(rng)
            picks, gap = greedy_retrieval(feats.tolist(), group_of, query.tolist(), n)
            if gap > margin:
                break
        sel = iterative_retrieve(np.array(group_of), feats, cfg, query=query)
        agree += sel.selected_hard == picks
    return CheckResult("oracle", "greedy retrieval", agree == instances, agree / instances, 1.0,
                       f"{agree}/{instances} hard-pick agreement ({drawn} drawn, decision margin {margin})")


def check_prefilter(instances: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(instances):
        bank = synth_bank(rng, 12, 3, 3, 4)
        cat = int(rng.choice(bank.categories()))
        query = rng.normal(size=4)
        k = int(rng.integers(1, 8))
        got = [r.patch_id for r in prefilter(bank, query, cat, k).records]
        pool = [r for r in bank.records if r.category_id == cat]
        want = [r.patch_id for r in sorted(pool, key=lambda r: (py_l2(r.base_feature, query), r.patch_id))[:k]]
        agree += got == want
    return CheckResult("oracle", "prefilter brute force", agree == instances, agree / instances, 1.0,
                       f"{agree}/{instances} exact k-NN agreement")


# ---------------------------------------------------------------------------
# properties


def check_group_exclusivity(runs: int = 10_000, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad_groups = bad_sum = 0
    worst = 0.0
    for _ in range(runs):
        n = int(rng.integers(1, 7))
        sizes = rng.integers(1, 9, size=n)
        group_of = np.repeat(np.arange(n), sizes)
        tau = float(rng.choice([0.01, 0.1, 1.0]))
        feats = rng.normal(size=(len(group_of), 3))
        sel = iterative_retrieve(group_of, feats, RetrievalConfig(tau=tau), rng=rng)
        if sorted(group_of[sel.selected_hard].tolist()) != list(range(n)):
            bad_groups += 1
        err = abs(float(sel.scores.value.sum()) - n)
        worst = max(worst, err)
        bad_sum += err > tol
    ok = bad_groups == 0 and bad_sum == 0
    return CheckResult("properties", "group exclusivity", ok, worst, tol,
                       f"{runs} runs: {bad_groups} repeated groups, {bad_sum} score sums off by > {tol:g} (max {worst:.1e})")


def check_permutation_equivariance(runs: int = 200, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = RetrievalConfig(tau=0.5, query_init="given-feature")
    for _ in range(runs):
        n, k = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        group_of = np.repeat(np.arange(n), k)
        feats = rng.normal(size=(n * k, 3))
        noise = gumbel_noise(rng, (n, n * k))
        query = rng.normal(size=3)
        perm = np.concatenate([g * k + rng.permutation(k) for g in range(n)])
        a = iterative_retrieve(group_of, feats, cfg, query=query, noise=noise).scores.value
        b = iterative_retrieve(group_of, feats[perm], cfg, query=query, noise=noise[:, perm]).scores.value
        worst = max(worst, float(np.max(np.abs(a[perm] - b))))
    return CheckResult("properties", "permutation equivariance", worst < tol, worst, tol,
                       f"max score difference {worst:.1e} over {runs} within-group permutations")


def check_softmax_rows(runs: int = 200, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(runs):
        x = rng.normal(size=int(rng.integers(1, 20))) * 50
        worst = max(worst, abs(float(softmax_tau(x, float(rng.choice([0.01, 0.1, 1.0]))).value.sum()) - 1.0))
    return CheckResult("properties", "softmax normalization", worst < tol, worst, tol,
                       f"max |sum - 1| {worst:.1e} over {runs} vectors")


def check_bank_roundtrip(runs: int = 5, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(runs):
        bank = synth_bank(rng, 6, 3, 2, 5)
        text = bank_to_text(bank)
        back = parse_bank(text)
        ok += back == bank and bank_to_text(back) == text
    return CheckResult("properties", "bank round trip", ok == runs, ok / runs, 1.0,
                       f"{ok}/{runs} banks reproduced bit for bit")


# ---------------------------------------------------------------------------


def run_suite(name: str, trials: int | None = None, seed: int = 0) -> list[CheckResult]:
    """Run one suite (or ``all``); ``trials`` sets the Monte Carlo sample count."""
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, trials, seed)]
    if name not in SUITES:
        raise KeyError(name)
    t = trials if trials is not None else 100_000
    if name == "gradcheck":
        jobs = [
            lambda: check_select_single_grad(seed=seed),
            lambda: check_retrieval_grad(seed=seed),
            lambda: check_encoder_grad(seed=seed),
            lambda: check_triplet_grad(seed=seed),
        ]
    elif name == "sampling":
        jobs = [lambda: check_gumbel_frequencies(t, seed), lambda: check_wrs_inclusion(t, seed)]
    elif name == "oracle":
        relax = check_relaxation_limit(seed=seed)
        jobs = [
            lambda: relax[0],
            lambda: relax[1],
            lambda: check_wrs_sort(seed=seed),
            lambda: check_greedy_oracle(seed=seed),
            lambda: check_prefilter(seed=seed),
        ]
    else:
        jobs = [
            lambda: check_group_exclusivity(1000, seed),
            lambda: check_permutation_equivariance(seed=seed),
            lambda: check_softmax_rows(seed=seed),
            lambda: check_bank_roundtrip(seed=seed),
        ]
    return [_timed(j) for j in jobs]

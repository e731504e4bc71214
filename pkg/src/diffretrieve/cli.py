"""Command-line entry point.

Machine-readable JSON goes to stdout, logs to stderr.  Exit codes: 0 success,
1 failed verification checks, 2 usage error, 3 diverged training, 4 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bank import BankLoadError, NoCandidates, build_candidates, load_bank, save_bank, synth_bank
from .config import ConfigError, ExperimentConfig, load_config
from .diffmath import InvalidArgument, value_of
from .losses import TrainingDiverged, UnsupportedTerm, cooccurrence_loss
from .model import CheckpointError, init_model, load_checkpoint, save_checkpoint
from .retrieval import NOISE_MODES, RetrievalConfig, embed_patches, hard_by_group, iterative_retrieve
from .scenegraph import GraphValidationError, ParseError, encode_objects, parse_scene_graph, predict_boxes
from .trainer import run_experiment
from .verify import SUITES, run_suite

log = logging.getLogger("diffretrieve")

EXIT_OK, EXIT_CHECKS, EXIT_USAGE, EXIT_DIVERGED, EXIT_DATA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None


def write_manifest(path: Path, command: str, digest: str, seed: int, outputs: Sequence[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config_digest": digest,
        "seed": seed,
        "versions": {"diffretrieve": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "started_unix": started,
        "wall_clock_seconds": time.time() - started,
        "outputs": [str(p) for p in outputs],
    }
    _write(path, _dump(manifest))


# ---------------------------------------------------------------------------
# commands


def cmd_synth_bank(args) -> int:
    for name in ("images", "per_image", "clusters", "d_feat"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    started = time.time()
    rng = np.random.default_rng(args.seed)
    bank = synth_bank(
        rng, args.images, args.per_image, args.clusters, args.d_feat,
        sigma=args.sigma, category_spread=args.category_spread, num_categories=args.categories,
    )
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_bank(bank, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror or exc}") from None
    flags = {k: getattr(args, k) for k in ("images", "per_image", "clusters", "d_feat", "sigma", "categories", "category_spread", "seed")}
    digest = _digest(flags)
    write_manifest(out.with_name(out.name + ".manifest.json"), "synth-bank", digest, args.seed, [out], started)
    sys.stdout.write(_dump({"bank": str(out), "patches": len(bank), "d_feat": bank.d_feat, "config_digest": digest}))
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    retrieval = {k: v for k, v in (("tau", args.tau), ("k", args.k), ("noise", args.noise)) if v is not None}
    optim = {"seed": args.seed} if args.seed is not None else {}
    return config.with_overrides(retrieval=retrieval, optim=optim)


def cmd_train(args) -> int:
    started = time.time()
    config = _experiment_config(args)
    out = Path(args.out)
    log.info("training with config digest %s", config.digest())
    result = run_experiment(config)
    report = result.report(config)
    ckpt, report_path = out / "checkpoint.json", out / "report.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, ckpt, result.vocabulary)
    except OSError as exc:
        raise DataError(f"cannot write {ckpt}: {exc.strerror or exc}") from None
    text = _dump(report)
    _write(report_path, text)
    write_manifest(out / "manifest.json", "train", config.digest(), config.optim.seed, [ckpt, report_path], started)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    started = time.time()
    seed = args.seed if args.seed is not None else 0
    tau = args.tau if args.tau is not None else 0.01
    k = args.k if args.k is not None else 5
    noise = args.noise or "disabled"
    config = RetrievalConfig(tau=tau, k=k, query_init="random-candidate", noise=noise)

    bank = load_bank(args.bank)
    try:
        text = Path(args.graph).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {args.graph}: {exc.strerror or exc}") from None
    graph = parse_scene_graph(text, bank.vocabulary)
    if args.checkpoint:
        params, vocab = load_checkpoint(args.checkpoint)
        if vocab is not None and vocab != bank.vocabulary:
            raise DataError("checkpoint vocabulary does not match the bank")
        if params.d_feat != bank.d_feat:
            raise DataError(f"checkpoint expects d_feat {params.d_feat}, bank has {bank.d_feat}")
    else:
        params = init_model(seed, ExperimentConfig().model, bank.d_feat, len(bank.vocabulary))
    views = params.views()

    objects = graph.user_objects
    for oid, cat in objects:
        if not bank.by_category(cat):
            raise DataError(f"no patches of category {bank.vocabulary.token(cat)!r} (object {oid}) in the bank")
    # the graph features and the bank features live in different spaces, so
    # each object is pre-filtered around its category's centroid
    cands = build_candidates(bank, [(bank.category_centroid(cat), cat) for _, cat in objects], k)
    base = cands.features()
    feats = embed_patches(views.embed, base)
    rng = np.random.default_rng(seed)
    sel = iterative_retrieve(cands, feats, config, rng=rng)
    picks = hard_by_group(cands, sel)
    scores = sel.scores.value
    boxes = value_of(predict_boxes(views.bbox, encode_objects(views.gcn, graph)))
    offsets = cands.offsets()
    flat = cands.flat

    report_objects = []
    for g, (oid, cat) in enumerate(objects):
        lo = int(offsets[g])
        group = [
            {
                "patch_id": r.patch_id,
                "source_image_id": r.source_image_id,
                "distance": float(cands.distances[g][j]),
                "score": float(scores[lo + j]),
            }
            for j, r in enumerate(cands.groups[g])
        ]
        pick = flat[picks[g]]
        report_objects.append(
            {
                "object_id": oid,
                "category": bank.vocabulary.token(cat),
                "candidates": group,
                "score_sum": float(sum(c["score"] for c in group)),
                "hard_pick": {"patch_id": pick.patch_id, "source_image_id": pick.source_image_id},
                "box": [float(v) for v in boxes[g]],
            }
        )
    settings = {
        "tau": tau, "k": k, "noise": noise, "seed": seed,
        "bank": _file_digest(args.bank), "graph": _file_digest(args.graph),
        "checkpoint": _file_digest(args.checkpoint) if args.checkpoint else None,
    }
    digest = _digest(settings)
    report = {
        "config_digest": digest,
        "settings": {k_: v for k_, v in settings.items() if k_ not in ("bank", "graph", "checkpoint")},
        "query_index": sel.query_index,
        # peak of each relaxed round; per-object score sums are 1 only when every peak is near 1
        "round_peaks": [float(s.value.max()) for s in sel.per_iteration],
        "objects": report_objects,
        "cooccurrence_loss": float(cooccurrence_loss(views.cooc, base[np.array(picks)]).value),
    }
    text = _dump(report)
    outputs = []
    if args.out:
        out = Path(args.out)
        _write(out, text)
        outputs.append(out)
        write_manifest(out.with_name(out.name + ".manifest.json"), "retrieve", digest, seed, outputs, started)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_suite(args.suite, trials=args.trials, seed=seed)
    for r in results:
        print(r.line(), file=sys.stderr)
    ok = all(r.passed for r in results)
    sys.stdout.write(_dump({"suite": args.suite, "seed": seed, "passed": ok, "checks": [r.to_dict() for r in results]}))
    return EXIT_OK if ok else EXIT_CHECKS


# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, retrieval: bool = False) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (u64)")
    if retrieval:
        p.add_argument("--tau", type=float, default=None, help="softmax temperature")
        p.add_argument("--k", type=int, default=None, help="candidates per object")
        p.add_argument("--noise", choices=NOISE_MODES, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffretrieve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-bank", help="write a synthetic clustered patch bank")
    _common(p)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--per-image", type=int, default=5)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--d-feat", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--categories", type=int, default=None)
    p.add_argument("--category-spread", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_bank)

    p = sub.add_parser("train", help="pre-train the co-occurrence embedding, then the retrieval path")
    _common(p, retrieval=True)
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="retrieve one patch per object of a scene graph")
    _common(p, retrieval=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("verify", help="run a verification suite")
    _common(p)
    p.add_argument("suite", choices=(*SUITES, "all"))
    p.add_argument("--trials", type=int, default=None, help="Monte Carlo trials")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be an unsigned 64-bit integer")
    try:
        return args.func(args)
    except (UsageError, ConfigError, UnsupportedTerm, InvalidArgument) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"{parser.prog}: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, BankLoadError, NoCandidates, ParseError, GraphValidationError, CheckpointError) as exc:
        print(f"{parser.prog}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"{parser.prog}: data error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Trainable parameters: patch embedding, graph encoder, box head, co-occurrence embedding.

Parameters are kept as a flat ``name -> array`` map so the optimizer, the
checkpoint format and gradient bookkeeping share one representation.  The
structured views used by the forward passes are rebuilt from that map, with
either arrays or watched tensors as leaves.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np

from .diffmath import AffineParams, InvalidArgument, init_mlp
from .losses import CoocParams
from .scenegraph import GcnParams, Vocabulary, init_bbox_head, init_gcn

CHECKPOINT_FORMAT = "diffretrieve-checkpoint"
CHECKPOINT_VERSION = 1
GROUPS = ("embed", "gcn", "bbox", "cooc")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_hidden: int = 64
    embed_dim: int = 32
    gcn_dim: int = 64
    gcn_layers: int = 5
    bbox_hidden: int = 64
    cooc_hidden: int = 64
    cooc_dim: int = 32
    margin: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if f.name != "margin" and getattr(self, f.name) < 1:
                raise InvalidArgument(f"model.{f.name} must be a positive integer")
        if not self.margin > 0:
            raise InvalidArgument("model.margin must be positive")


class ModelViews(NamedTuple):
    embed: list[AffineParams]
    gcn: GcnParams
    bbox: list[AffineParams]
    cooc: CoocParams


def _affine_leaves(prefix: str, layers) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}.{i}.weight"] = layer.weight
        out[f"{prefix}.{i}.bias"] = layer.bias
    return out


def _affine_view(prefix: str, leaves: Mapping) -> list[AffineParams]:
    layers = []
    while f"{prefix}.{len(layers)}.weight" in leaves:
        i = len(layers)
        layers.append(AffineParams(leaves[f"{prefix}.{i}.weight"], leaves[f"{prefix}.{i}.bias"]))
    return layers


@dataclass
class ModelParams:
    config: ModelConfig
    d_feat: int
    vocab_size: int
    arrays: dict[str, np.ndarray]

    def views(self, leaves: Mapping | None = None) -> ModelViews:
        """Structured parameters; ``leaves`` may substitute tensors for some arrays."""
        src = dict(self.arrays)
        if leaves is not None:
            src.update(leaves)
        gcn = GcnParams(src["gcn.obj_table"], src["gcn.rel_table"], _affine_view("gcn.layer", src))
        cooc = CoocParams(_affine_view("cooc", src), self.config.margin)
        return ModelViews(_affine_view("embed", src), gcn, _affine_view("bbox", src), cooc)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.arrays)
        return [n for n in self.arrays if n.split(".", 1)[0] == group]

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        unknown = set(arrays) - set(self.arrays)
        if unknown:
            raise InvalidArgument(f"unknown parameter names: {sorted(unknown)}")
        merged = dict(self.arrays)
        merged.update({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
        return ModelParams(self.config, self.d_feat, self.vocab_size, merged)

    def with_cooc(self, cooc: CoocParams) -> "ModelParams":
        return self.replace(_affine_leaves("cooc", cooc.layers))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.d_feat, self.vocab_size, {k: v.copy() for k, v in self.arrays.items()})

    def equal_bits(self, other: "ModelParams") -> bool:
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def init_model(seed, config: ModelConfig, d_feat: int, vocab_size: int) -> ModelParams:
    """Fresh parameters; each group draws from its own child stream of ``seed``."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    r_embed, r_gcn, r_bbox, r_cooc = (np.random.default_rng(s) for s in seq.spawn(4))
    arrays: dict[str, np.ndarray] = {}
    arrays.update(_affine_leaves("embed", init_mlp(r_embed, [d_feat, config.embed_hidden, config.embed_dim])))
    gcn = init_gcn(r_gcn, vocab_size, config.gcn_dim, config.gcn_layers)
    arrays["gcn.obj_table"] = gcn.obj_table
    arrays["gcn.rel_table"] = gcn.rel_table
    arrays.update(_affine_leaves("gcn.layer", gcn.layers))
    arrays.update(_affine_leaves("bbox", init_bbox_head(r_bbox, config.gcn_dim, config.bbox_hidden)))
    arrays.update(_affine_leaves("cooc", init_mlp(r_cooc, [d_feat, config.cooc_hidden, config.cooc_dim])))
    return ModelParams(config, d_feat, vocab_size, arrays)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_to_dict(params: ModelParams, vocabulary: Vocabulary | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": asdict(params.config),
        "d_feat": params.d_feat,
        "vocab_size": params.vocab_size,
        "vocabulary": vocabulary.to_dict() if vocabulary is not None else None,
        "params": {
            name: {"shape": list(a.shape), "data": a.ravel().tolist()}
            for name, a in params.arrays.items()
        },
    }


def checkpoint_from_dict(doc: Mapping) -> tuple[ModelParams, Vocabulary | None]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = ModelConfig(**doc["model"])
        arrays = {
            name: np.array(block["data"], dtype=np.float64).reshape(block["shape"])
            for name, block in doc["params"].items()
        }
        params = ModelParams(config, int(doc["d_feat"]), int(doc["vocab_size"]), arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    expected = init_model(0, config, params.d_feat, params.vocab_size)
    for name, a in expected.arrays.items():
        if name not in arrays or arrays[name].shape != a.shape:
            raise CheckpointError(f"parameter {name} missing or mis-shaped")
    vocab = Vocabulary(doc["vocabulary"]) if doc.get("vocabulary") is not None else None
    return params, vocab


def save_checkpoint(params: ModelParams, path: str | os.PathLike, vocabulary: Vocabulary | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(params, vocabulary), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, Vocabulary | None]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not JSON ({exc})") from None
    return checkpoint_from_dict(doc)


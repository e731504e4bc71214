"""Scene graphs: text parsing, graph-convolution encoding, box prediction.

Graph file format, one statement per line (``#`` starts a comment)::

    obj <id> <category-token>
    rel <subject-id> <predicate-token> <object-id>

Tokens are resolved against a :class:`Vocabulary`.  After parsing, an
``__image__`` object is appended and every user object is linked to it with an
``in_image`` edge, so message passing reaches every node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffmath import (
    AffineParams,
    InvalidArgument,
    Tensor,
    affine_forward,
    as_tensor,
    concat,
    init_affine,
    init_mlp,
    matmul,
    maximum,
    mlp_forward,
    relu,
    sigmoid,
    stack,
    value_of,
)

IMAGE_TOKEN = "__image__"
IN_IMAGE = "in_image"
BOX_WIDTH_FLOOR = 1e-3


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GraphValidationError(ValueError):
    pass


class Vocabulary:
    """Token to id map shared by object categories and predicates.

    ``__image__`` always has id 0 and ``in_image`` is always present.
    """

    def __init__(self, mapping: Mapping[str, int]):
        mapping = dict(mapping)
        if mapping.get(IMAGE_TOKEN, 0) != 0:
            raise InvalidArgument(f"{IMAGE_TOKEN} must have id 0")
        ids = list(mapping.values())
        if len(set(ids)) != len(ids):
            raise InvalidArgument("vocabulary ids must be unique")
        if any(i < 0 for i in ids):
            raise InvalidArgument("vocabulary ids must be nonnegative")
        self.token_to_id = mapping
        self.id_to_token = {i: t for t, i in mapping.items()}

    @classmethod
    def build(cls, categories: Iterable[str], predicates: Iterable[str] = ()) -> "Vocabulary":
        tokens = [IMAGE_TOKEN]
        for t in [*categories, *predicates, IN_IMAGE]:
            if t not in tokens:
                tokens.append(t)
        return cls({t: i for i, t in enumerate(tokens)})

    def __len__(self):
        return max(self.token_to_id.values()) + 1

    def __contains__(self, token):
        return token in self.token_to_id

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def to_dict(self) -> dict[str, int]:
        return dict(self.token_to_id)


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[tuple[int, int], ...]  # (object_id, category_id), sorted by id
    edges: tuple[tuple[int, int, int], ...]  # (subject_id, relation_id, object_id), sorted
    image_object: int | None = None

    @property
    def user_objects(self) -> list[tuple[int, int]]:
        return [o for o in self.objects if o[0] != self.image_object]

    def index_of(self) -> dict[int, int]:
        return {oid: i for i, (oid, _) in enumerate(self.objects)}

    def to_text(self, vocab: Vocabulary) -> str:
        lines = [f"obj {oid} {vocab.token(cat)}" for oid, cat in self.user_objects]
        lines += [
            f"rel {s} {vocab.token(r)} {o}"
            for s, r, o in self.edges
            if o != self.image_object
        ]
        return "\n".join(lines) + "\n"


def make_scene_graph(
    objects: Sequence[tuple[int, int]],
    edges: Sequence[tuple[int, int, int]],
    vocab: Vocabulary,
) -> SceneGraph:
    """Validate user objects/edges and add the image anchor."""
    ids = [oid for oid, _ in objects]
    if len(set(ids)) != len(ids):
        raise GraphValidationError("object ids must be unique")
    if not objects:
        raise GraphValidationError("scene graph has no objects")
    vocab_size = len(vocab)
    for oid, cat in objects:
        if not 0 <= cat < vocab_size:
            raise GraphValidationError(f"category {cat} of object {oid} outside vocabulary")
    known = set(ids)
    for s, r, o in edges:
        for end in (s, o):
            if end not in known:
                raise GraphValidationError(f"edge references unknown object id {end}")
        if not 0 <= r < vocab_size:
            raise GraphValidationError(f"relation {r} outside vocabulary")
    if IN_IMAGE not in vocab:
        raise GraphValidationError(f"vocabulary lacks the {IN_IMAGE!r} predicate")
    image_id = max(ids) + 1
    in_image = vocab[IN_IMAGE]
    all_objects = sorted(objects) + [(image_id, vocab[IMAGE_TOKEN] if IMAGE_TOKEN in vocab else 0)]
    all_edges = sorted(list(edges) + [(oid, in_image, image_id) for oid in ids])
    return SceneGraph(tuple(all_objects), tuple(all_edges), image_id)


def parse_scene_graph(text: str, vocab: Vocabulary) -> SceneGraph:
    objects: list[tuple[int, int]] = []
    edges: list[tuple[int, int, int]] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "obj" and len(parts) == 3:
                oid = int(parts[1])
                if parts[2] not in vocab:
                    raise ParseError(f"unknown category token {parts[2]!r}", lineno)
                if oid in seen:
                    raise ParseError(f"duplicate object id {oid}", lineno)
                seen.add(oid)
                objects.append((oid, vocab[parts[2]]))
            elif kind == "rel" and len(parts) == 4:
                if parts[2] not in vocab:
                    raise ParseError(f"unknown predicate token {parts[2]!r}", lineno)
                edges.append((int(parts[1]), vocab[parts[2]], int(parts[3])))
            else:
                raise ParseError(f"cannot parse statement {line!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad integer in {line!r}", lineno) from None
    return make_scene_graph(objects, edges, vocab)


# ---------------------------------------------------------------------------
# graph convolution


@dataclass
class GcnParams:
    obj_table: np.ndarray | Tensor  # (vocab, dim)
    rel_table: np.ndarray | Tensor  # (vocab, dim)
    layers: list[AffineParams]  # each maps 3*dim -> 3*dim

    @property
    def dim(self) -> int:
        return value_of(self.obj_table).shape[1]


def init_gcn(rng: np.random.Generator, vocab_size: int, dim: int = 64, n_layers: int = 5) -> GcnParams:
    return GcnParams(
        obj_table=rng.normal(0.0, 1.0, size=(vocab_size, dim)),
        rel_table=rng.normal(0.0, 1.0, size=(vocab_size, dim)),
        layers=[init_affine(rng, 3 * dim, 3 * dim) for _ in range(n_layers)],
    )


def _pooling_matrices(graph: SceneGraph):
    index = graph.index_of()
    subj = np.array([index[s] for s, _, _ in graph.edges], dtype=int)
    obj = np.array([index[o] for _, _, o in graph.edges], dtype=int)
    n_obj, n_edge = len(graph.objects), len(graph.edges)
    counts = np.bincount(subj, minlength=n_obj) + np.bincount(obj, minlength=n_obj)
    if (counts == 0).any():
        orphan = graph.objects[int(np.argmin(counts))][0]
        raise RuntimeError(f"object {orphan} has no incident edge after augmentation")
    pool_s = np.zeros((n_obj, n_edge))
    pool_o = np.zeros((n_obj, n_edge))
    pool_s[subj, np.arange(n_edge)] = 1.0
    pool_o[obj, np.arange(n_edge)] = 1.0
    return subj, obj, pool_s / counts[:, None], pool_o / counts[:, None]


def gcn_layer(
    params: AffineParams,
    graph: SceneGraph,
    obj_vecs,
    rel_vecs,
    activation: str | None = None,
) -> tuple[Tensor, Tensor]:
    """One graph-convolution step.

    Each edge's triple ``concat(o_s, r, o_o)`` goes through the affine map; an
    object's new vector is the mean of the slices produced for it across all
    its incident edges, and each edge keeps its own new relation slice.
    """
    obj_vecs, rel_vecs = as_tensor(obj_vecs), as_tensor(rel_vecs)
    dim = obj_vecs.shape[1]
    if params.in_dim != 3 * dim or rel_vecs.shape[1] != dim:
        raise InvalidArgument("gcn layer dimensions do not match the features")
    subj, obj, pool_s, pool_o = _pooling_matrices(graph)
    triples = concat([obj_vecs[subj], rel_vecs, obj_vecs[obj]], axis=1)
    out = affine_forward(params, triples)
    if activation == "relu":
        out = relu(out)
    new_s, new_r, new_o = out[:, :dim], out[:, dim : 2 * dim], out[:, 2 * dim :]
    new_obj = matmul(pool_s, new_s) + matmul(pool_o, new_o)
    return new_obj, new_r


@dataclass
class ObjectFeature:
    object_id: int
    vector: Tensor


def encode_objects(params: GcnParams, graph: SceneGraph) -> Tensor:
    """Feature rows for the user objects of ``graph``, in ascending id order."""
    cats = np.array([c for _, c in graph.objects], dtype=int)
    rels = np.array([r for _, r, _ in graph.edges], dtype=int)
    obj_vecs = as_tensor(params.obj_table)[cats]
    rel_vecs = as_tensor(params.rel_table)[rels]
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        obj_vecs, rel_vecs = gcn_layer(
            layer, graph, obj_vecs, rel_vecs, activation="relu" if i < last else None
        )
    keep = np.array(
        [i for i, (oid, _) in enumerate(graph.objects) if oid != graph.image_object], dtype=int
    )
    return obj_vecs[keep]


def encode_graph(params: GcnParams, graph: SceneGraph) -> list[ObjectFeature]:
    feats = encode_objects(params, graph)
    return [
        ObjectFeature(oid, feats[i]) for i, (oid, _) in enumerate(graph.user_objects)
    ]


# ---------------------------------------------------------------------------
# bounding boxes


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise InvalidArgument(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


def init_bbox_head(rng: np.random.Generator, in_dim: int, hidden: int = 64) -> list[AffineParams]:
    return init_mlp(rng, [in_dim, hidden, 4])


def predict_boxes(head: Sequence[AffineParams], features) -> Tensor:
    """Boxes ``(x0, y0, x1, y1)`` along the last axis for a feature or a batch.

    The head emits (cx, cy, w, h) through a sigmoid, sizes are floored at
    ``BOX_WIDTH_FLOOR``, and ``x0 = cx * (1 - w)``, ``x1 = x0 + w`` keeps every
    box inside the unit square.
    """
    p = sigmoid(mlp_forward(head, features))
    cx, cy = p[..., 0], p[..., 1]
    w = maximum(p[..., 2], BOX_WIDTH_FLOOR)
    h = maximum(p[..., 3], BOX_WIDTH_FLOOR)
    x0 = cx * (1.0 - w)
    y0 = cy * (1.0 - h)
    return stack([x0, y0, x0 + w, y0 + h], axis=-1)


def predict_bbox(head: Sequence[AffineParams], feature) -> BBox:
    vec = as_tensor(feature.vector if isinstance(feature, ObjectFeature) else feature)
    if vec.ndim != 1:
        raise InvalidArgument("predict_bbox takes a single feature vector")
    return BBox(*(float(v) for v in predict_boxes(head, vec).value))

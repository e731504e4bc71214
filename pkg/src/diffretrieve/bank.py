"""Patch memory bank: records, JSON-lines persistence, k-NN pre-filtering.

Bank file layout (UTF-8, one JSON object per line)::

    {"version":1,"d_feat":16,"vocabulary":{"__image__":0,...}}
    {"id":0,"category":1,"image":0,"feature":[...],"cooc":null}
    ...
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .diffmath import InvalidArgument, l2_dist, value_of
from .scenegraph import Vocabulary

BANK_VERSION = 1
DEFAULT_PREDICATES = ("left_of", "right_of", "above", "below")


class BankLoadError(ValueError):
    pass


class NoCandidates(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class PatchRecord:
    patch_id: int
    category_id: int
    source_image_id: int
    base_feature: np.ndarray
    cooc_feature: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, PatchRecord):
            return NotImplemented
        same_cooc = (
            self.cooc_feature is None and other.cooc_feature is None
        ) or (
            self.cooc_feature is not None
            and other.cooc_feature is not None
            and _bits_equal(self.cooc_feature, other.cooc_feature)
        )
        return (
            self.patch_id == other.patch_id
            and self.category_id == other.category_id
            and self.source_image_id == other.source_image_id
            and _bits_equal(self.base_feature, other.base_feature)
            and same_cooc
        )

    __hash__ = None


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class PatchBank:
    vocabulary: Vocabulary
    d_feat: int
    records: tuple[PatchRecord, ...] = ()
    _by_category: dict = field(default_factory=dict, repr=False, compare=False)
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vocab_size = len(self.vocabulary)
        for rec in self.records:
            if rec.patch_id in self._by_id:
                raise InvalidArgument(f"duplicate patch id {rec.patch_id}")
            if len(rec.base_feature) != self.d_feat:
                raise InvalidArgument(
                    f"patch {rec.patch_id}: feature dimension {len(rec.base_feature)} != {self.d_feat}"
                )
            if not 0 <= rec.category_id < vocab_size:
                raise InvalidArgument(f"patch {rec.patch_id}: category {rec.category_id} not in vocabulary")
            self._by_id[rec.patch_id] = rec
            self._by_category.setdefault(rec.category_id, []).append(rec)
        for cat, recs in self._by_category.items():
            feats = np.array([r.base_feature for r in recs], dtype=np.float64)
            ids = np.array([r.patch_id for r in recs], dtype=np.int64)
            self._by_category[cat] = (recs, feats.reshape(len(recs), self.d_feat), ids)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, PatchBank):
            return NotImplemented
        return (
            self.vocabulary == other.vocabulary
            and self.d_feat == other.d_feat
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )

    def get(self, patch_id: int) -> PatchRecord:
        return self._by_id[patch_id]

    def by_category(self, category_id: int) -> list[PatchRecord]:
        entry = self._by_category.get(category_id)
        return list(entry[0]) if entry else []

    def categories(self) -> list[int]:
        return sorted(self._by_category)

    def category_centroid(self, category_id: int) -> np.ndarray:
        entry = self._by_category.get(category_id)
        if not entry:
            raise NoCandidates(f"no patches for category {self._name(category_id)}")
        return entry[1].mean(axis=0)

    def image_ids(self) -> list[int]:
        return sorted({r.source_image_id for r in self.records})

    def subset(self, keep: Iterable[PatchRecord]) -> "PatchBank":
        return PatchBank(self.vocabulary, self.d_feat, tuple(keep))

    def with_cooc(self, cooc: dict[int, np.ndarray]) -> "PatchBank":
        return self.subset(
            replace(r, cooc_feature=np.asarray(cooc[r.patch_id], dtype=np.float64))
            for r in self.records
        )

    def _name(self, category_id: int) -> str:
        try:
            return f"{self.vocabulary.token(category_id)!r} ({category_id})"
        except KeyError:
            return str(category_id)


# ---------------------------------------------------------------------------
# persistence


def _record_line(rec: PatchRecord) -> str:
    return json.dumps(
        {
            "id": rec.patch_id,
            "category": rec.category_id,
            "image": rec.source_image_id,
            "feature": [float(x) for x in rec.base_feature],
            "cooc": None if rec.cooc_feature is None else [float(x) for x in rec.cooc_feature],
        },
        separators=(",", ":"),
    )


def dump_bank(bank: PatchBank, stream: IO[str]) -> None:
    vocab = dict(sorted(bank.vocabulary.to_dict().items(), key=lambda kv: kv[1]))
    header = {"version": BANK_VERSION, "d_feat": bank.d_feat, "vocabulary": vocab}
    stream.write(json.dumps(header, separators=(",", ":")) + "\n")
    for rec in bank.records:
        stream.write(_record_line(rec) + "\n")


def save_bank(bank: PatchBank, destination: str | os.PathLike) -> None:
    with open(destination, "w", encoding="utf-8", newline="\n") as fh:
        dump_bank(bank, fh)


def parse_bank(text: str) -> PatchBank:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise BankLoadError(f"truncated file: line {len(lines)} has no line terminator")
    if not lines:
        raise BankLoadError("empty bank file: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise BankLoadError(f"line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or set(header) != {"version", "d_feat", "vocabulary"}:
        raise BankLoadError("line 1: header must have exactly version, d_feat, vocabulary")
    if header["version"] != BANK_VERSION:
        raise BankLoadError(f"unsupported bank version {header['version']!r}")
    d_feat = header["d_feat"]
    try:
        vocab = Vocabulary({str(k): int(v) for k, v in header["vocabulary"].items()})
    except (InvalidArgument, ValueError, AttributeError) as exc:
        raise BankLoadError(f"line 1: bad vocabulary ({exc})") from None
    vocab_size = len(vocab)

    records = []
    seen: set[int] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BankLoadError(f"line {lineno}: malformed record ({exc.msg})") from None
        if not isinstance(obj, dict) or set(obj) != {"id", "category", "image", "feature", "cooc"}:
            raise BankLoadError(f"line {lineno}: record has wrong fields")
        pid = obj["id"]
        if pid in seen:
            raise BankLoadError(f"line {lineno}: duplicate patch id {pid}")
        seen.add(pid)
        feature = np.array(obj["feature"], dtype=np.float64)
        if feature.shape != (d_feat,):
            raise BankLoadError(f"line {lineno}: patch {pid} feature has length {feature.size}, expected {d_feat}")
        if not 0 <= obj["category"] < vocab_size:
            raise BankLoadError(f"line {lineno}: patch {pid} category {obj['category']} not in vocabulary")
        cooc = None if obj["cooc"] is None else np.array(obj["cooc"], dtype=np.float64)
        records.append(PatchRecord(pid, obj["category"], obj["image"], feature, cooc))
    return PatchBank(vocab, d_feat, tuple(records))


def load_bank(source: str | os.PathLike) -> PatchBank:
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return parse_bank(fh.read())


def bank_to_text(bank: PatchBank) -> str:
    buf = io.StringIO()
    dump_bank(bank, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pre-filtering and candidate sets


class Neighbors(NamedTuple):
    records: list[PatchRecord]
    distances: list[float]
    shortfall: bool


def prefilter(bank: PatchBank, object_feature, category_id: int, k: int) -> Neighbors:
    """The ``k`` patches of a category nearest to ``object_feature`` (exhaustive scan).

    Ties in distance are broken by ascending patch id.  ``shortfall`` is set
    when the category holds fewer than ``k`` patches.
    """
    if k < 1:
        raise InvalidArgument("k must be positive")
    entry = bank._by_category.get(category_id)
    if not entry:
        raise NoCandidates(f"no patches for category {bank._name(category_id)}")
    recs, feats, ids = entry
    q = value_of(object_feature)
    if q.shape != (bank.d_feat,):
        raise InvalidArgument(f"query has shape {q.shape}, expected ({bank.d_feat},)")
    dist = l2_dist(feats, q).value
    order = np.lexsort((ids, dist))[:k]
    return Neighbors([recs[i] for i in order], [float(dist[i]) for i in order], len(recs) < k)


@dataclass
class CandidateSet:
    groups: list[list[PatchRecord]]
    distances: list[list[float]]
    gt_index: list[int] | None = None  # position of the GT patch inside each group

    def __post_init__(self):
        self.group_of = np.array(
            [g for g, group in enumerate(self.groups) for _ in group], dtype=np.int64
        )

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def flat(self) -> list[PatchRecord]:
        return [rec for group in self.groups for rec in group]

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(g) for g in self.groups])[:-1]]).astype(np.int64)

    @property
    def gt_flat(self) -> list[int] | None:
        if self.gt_index is None:
            return None
        return [int(o + i) for o, i in zip(self.offsets(), self.gt_index)]

    def features(self) -> np.ndarray:
        return np.array([rec.base_feature for rec in self.flat], dtype=np.float64)


def build_candidates(
    bank: PatchBank,
    objects: Sequence[tuple[np.ndarray, int]],
    k: int,
    gt_patches: Sequence[PatchRecord] | None = None,
) -> CandidateSet:
    """One pre-filtered group per object, optionally with its GT patch injected.

    A GT patch already among the neighbours is kept in place; otherwise it
    replaces the farthest neighbour (or is appended on a shortfall).
    """
    if gt_patches is not None and len(gt_patches) != len(objects):
        raise InvalidArgument("one ground-truth patch per object required")
    groups, dists, gt_index = [], [], []
    for i, (feature, category) in enumerate(objects):
        nb = prefilter(bank, feature, category, k)
        group, dist = list(nb.records), list(nb.distances)
        if gt_patches is not None:
            gt = gt_patches[i]
            if gt.category_id != category:
                raise InvalidArgument(
                    f"ground-truth patch {gt.patch_id} has category {gt.category_id}, object wants {category}"
                )
            ids = [r.patch_id for r in group]
            gt_dist = float(l2_dist(gt.base_feature, value_of(feature)).value)
            if gt.patch_id in ids:
                pos = ids.index(gt.patch_id)
            elif len(group) >= k:
                pos = len(group) - 1
                group[pos], dist[pos] = gt, gt_dist
            else:
                pos = len(group)
                group.append(gt)
                dist.append(gt_dist)
            gt_index.append(pos)
        groups.append(group)
        dists.append(dist)
    return CandidateSet(groups, dists, gt_index if gt_patches is not None else None)


# ---------------------------------------------------------------------------
# synthetic banks


def image_cluster(image_id: int, clusters: int) -> int:
    """Latent cluster of a synthetic image (images are dealt to clusters round-robin)."""
    return image_id % clusters


def synthetic_vocabulary(num_categories: int) -> Vocabulary:
    return Vocabulary.build([f"cat{j}" for j in range(1, num_categories + 1)], DEFAULT_PREDICATES)


def synth_bank(
    rng: np.random.Generator,
    num_images: int,
    patches_per_image: int,
    clusters: int,
    d_feat: int,
    sigma: float = 0.1,
    image_spread: float = 0.5,
    cluster_scale: float = 2.0,
    category_spread: float = 0.0,
    num_categories: int | None = None,
) -> PatchBank:
    """Clustered synthetic patch features.

    Image ``i`` belongs to cluster ``i % clusters``; its center is the cluster
    center plus N(0, image_spread^2) jitter.  Patch ``j`` of an image has
    category ``j % num_categories`` (1-based in the vocabulary) and feature
    ``image center + category offset + N(0, sigma^2)``.
    """
    if min(num_images, patches_per_image, clusters, d_feat) <= 0:
        raise InvalidArgument("synth_bank counts must be positive")
    num_categories = num_categories or patches_per_image
    vocab = synthetic_vocabulary(num_categories)
    cat_ids = [vocab[f"cat{j}"] for j in range(1, num_categories + 1)]
    centers = rng.normal(size=(clusters, d_feat)) * cluster_scale
    offsets = rng.normal(size=(num_categories, d_feat)) * category_spread
    records = []
    for image in range(num_images):
        center = centers[image_cluster(image, clusters)] + rng.normal(size=d_feat) * image_spread
        for j in range(patches_per_image):
            c = j % num_categories
            feature = center + offsets[c] + rng.normal(size=d_feat) * sigma
            records.append(PatchRecord(len(records), cat_ids[c], image, feature))
    return PatchBank(vocab, d_feat, tuple(records))

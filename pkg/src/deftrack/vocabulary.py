"""Hierarchical binary vocabulary, bag-of-words vectors and a keyframe database.

Descriptors are clustered by recursive k-medians on Hamming distance with
bitwise-majority centroids. Leaves are visual words weighted by inverse
document frequency; a BoW vector is the L1-normalized tf-idf histogram, and
two vectors score ``1 - 0.5 * |a - b|_1``.

File format (little-endian)::

    b"SDVOC1" | u16 k | u16 depth | u32 node count
    node table, one record per node in breadth-first order:
    i32 parent | i32 word id (-1 for inner nodes) | f64 weight | 32 x u8 descriptor
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TrainingError, VocabularyFormatError
from .features import DESCRIPTOR_BYTES, hamming_matrix

MAGIC = b"SDVOC1"
_HEADER = struct.Struct("<6sHHI")
_NODE = np.dtype([("parent", "<i4"), ("word", "<i4"), ("weight", "<f8"), ("desc", "u1", (DESCRIPTOR_BYTES,))])


def _majority(desc: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(desc, axis=1)
    return np.packbits((2 * bits.sum(axis=0) > len(desc)).astype(np.uint8)[None], axis=1)[0]


def _kmedians(desc: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 10):
    """Cluster binary descriptors; returns (centers, labels). Seeded k-medians++ start."""
    uniq = np.unique(desc, axis=0)
    if len(uniq) <= k:
        centers = uniq
        labels = np.argmin(hamming_matrix(desc, centers), axis=1)
        return centers, labels
    first = int(rng.integers(len(desc)))
    centers = [desc[first]]
    dmin = hamming_matrix(desc, desc[first][None])[:, 0].astype(np.float64)
    while len(centers) < k:
        w = dmin**2
        if w.sum() == 0:
            break
        nxt = int(rng.choice(len(desc), p=w / w.sum()))
        centers.append(desc[nxt])
        dmin = np.minimum(dmin, hamming_matrix(desc, desc[nxt][None])[:, 0])
    centers = np.array(centers)
    labels = np.argmin(hamming_matrix(desc, centers), axis=1)
    for _ in range(iterations):
        new = np.array([_majority(desc[labels == c]) if np.any(labels == c) else centers[c] for c in range(len(centers))])
        new_labels = np.argmin(hamming_matrix(desc, new), axis=1)
        centers = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


@dataclass(eq=False)
class Vocabulary:
    """Tree stored as flat arrays; node 0 is the root."""

    k: int
    depth: int
    parents: np.ndarray
    descriptors: np.ndarray
    words: np.ndarray  # word id per node, -1 for inner nodes
    weights: np.ndarray  # idf per node (0 for inner nodes)
    children: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.children = [[] for _ in range(len(self.parents))]
        for i, p in enumerate(self.parents):
            if p >= 0:
                self.children[int(p)].append(i)
        if np.any(self.weights < 0):
            raise VocabularyFormatError("negative word weight")

    @property
    def n_words(self) -> int:
        return int((self.words >= 0).sum())

    def word_nodes(self) -> np.ndarray:
        nodes = np.flatnonzero(self.words >= 0)
        return nodes[np.argsort(self.words[nodes])]

    def quantize(self, descriptors: np.ndarray) -> np.ndarray:
        """Word id of each descriptor (greedy descent, ties to the lower node)."""
        descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        node = np.zeros(len(descriptors), dtype=np.intp)
        active = np.ones(len(descriptors), dtype=bool)
        while active.any():
            for n in np.unique(node[active]):
                kids = self.children[n]
                sel = active & (node == n)
                if not kids:
                    active[sel] = False
                    continue
                D = hamming_matrix(descriptors[sel], self.descriptors[kids])
                node[sel] = np.asarray(kids)[np.argmin(D, axis=1)]
        return self.words[node]

    def transform(self, descriptors: np.ndarray) -> dict:
        """Sparse L1-normalized tf-idf vector {word: weight}; empty if nothing weighs."""
        descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        if len(descriptors) == 0:
            return {}
        words = self.quantize(descriptors)
        ids, counts = np.unique(words, return_counts=True)
        idf = self.weights[self.word_nodes()[ids]]
        vals = counts / len(words) * idf
        total = vals.sum()
        if total <= 0:
            return {}
        return {int(w): float(v / total) for w, v in zip(ids, vals) if v > 0}

    def save(self, path) -> None:
        nodes = np.zeros(len(self.parents), dtype=_NODE)
        nodes["parent"] = self.parents
        nodes["word"] = self.words
        nodes["weight"] = self.weights
        nodes["desc"] = self.descriptors
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, self.k, self.depth, len(nodes)))
            fh.write(nodes.tobytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise VocabularyFormatError("file too short")
        magic, k, depth, count = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise VocabularyFormatError(f"bad magic {magic!r}")
        body = raw[_HEADER.size :]
        if len(body) != count * _NODE.itemsize:
            raise VocabularyFormatError("node table size does not match header")
        nodes = np.frombuffer(body, dtype=_NODE)
        return cls(
            k,
            depth,
            nodes["parent"].astype(np.int64),
            nodes["desc"].copy(),
            nodes["word"].astype(np.int64),
            nodes["weight"].astype(np.float64),
        )


def train_vocabulary(corpus: Sequence[np.ndarray], k: int = 10, depth: int = 3, seed: int = 0) -> Vocabulary:
    """Build a vocabulary from per-image descriptor arrays.

    Every image is one document for the idf weights ``log(N / n_w)``.
    """
    if k < 2 or depth < 1:
        raise TrainingError("need k >= 2 and depth >= 1")
    docs = [np.asarray(d, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES) for d in corpus]
    if not docs:
        raise TrainingError("empty corpus")
    all_desc = np.concatenate(docs)
    if len(all_desc) < k**depth:
        raise TrainingError(f"corpus has {len(all_desc)} descriptors, need at least {k ** depth}")
    rng = np.random.default_rng(seed)
    parents, descs, levels = [-1], [np.zeros(DESCRIPTOR_BYTES, np.uint8)], [0]
    members = {0: np.arange(len(all_desc))}
    frontier = [0]
    while frontier:
        nxt = []
        for node in frontier:
            idx = members.pop(node)
            if levels[node] == depth or len(idx) == 0:
                continue
            centers, labels = _kmedians(all_desc[idx], k, rng)
            if len(centers) < 2 and levels[node] > 0:
                continue
            for c in range(len(centers)):
                child = len(parents)
                parents.append(node)
                descs.append(centers[c])
                levels.append(levels[node] + 1)
                members[child] = idx[labels == c]
                nxt.append(child)
        frontier = nxt
    parents = np.array(parents, dtype=np.int64)
    is_leaf = np.ones(len(parents), dtype=bool)
    is_leaf[parents[parents >= 0]] = False
    words = np.full(len(parents), -1, dtype=np.int64)
    words[is_leaf] = np.arange(is_leaf.sum())
    vocab = Vocabulary(k, depth, parents, np.array(descs, dtype=np.uint8), words, np.zeros(len(parents)))
    df = np.zeros(vocab.n_words)
    for d in docs:
        if len(d):
            df[np.unique(vocab.quantize(d))] += 1
    idf = np.log(len(docs) / np.maximum(df, 1.0))
    vocab.weights[vocab.word_nodes()] = idf
    return vocab


def bow_score(a: dict, b: dict) -> float:
    """1 - 0.5 |a - b|_1 for L1-normalized sparse vectors; 0 if either is empty."""
    if not a or not b:
        return 0.0
    diff = sum(abs(v - b.get(w, 0.0)) for w, v in a.items()) + sum(v for w, v in b.items() if w not in a)
    return float(min(1.0, max(0.0, 1.0 - 0.5 * diff)))


class KeyframeDatabase:
    """BoW vectors of keyframes with an inverted index. Not thread-safe."""

    def __init__(self):
        self.vectors: dict[int, dict] = {}
        self.records: dict = {}
        self.inverted: dict[int, set] = {}

    def __len__(self) -> int:
        return len(self.vectors)

    def add(self, keyframe_id: int, bow: dict, record=None) -> None:
        self.vectors[keyframe_id] = bow
        if record is not None:
            self.records[keyframe_id] = record
        for w in bow:
            self.inverted.setdefault(w, set()).add(keyframe_id)


def query_candidates(db: KeyframeDatabase, descriptors: np.ndarray, vocab: Vocabulary, max_candidates: int = 5) -> list[tuple[int, float]]:
    """Keyframes ranked by BoW score (descending, ties by id) as (id, score)."""
    if len(db) == 0:
        return []
    q = vocab.transform(descriptors)
    scored = [(kf, bow_score(q, v)) for kf, v in db.vectors.items()]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:max_candidates]


def descriptors_from_images(images: Iterable, budget: int = 500) -> list[np.ndarray]:
    """Per-image descriptor arrays for vocabulary training."""
    from .features import extract_features

    return [extract_features(img, None, budget).descriptors for img in images]

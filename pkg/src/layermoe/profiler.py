"""Hidden-state similarity profiling across layers.

The router of every layer sees the normalised post-attention state; this
module samples those states per language (a candidate set), measures mean
pairwise cosine similarity between languages per layer, folds the pair
matrix into one indicated-similarity value per layer, and picks the layers
that get a routing classifier.

Mean pairwise cosine over two sets factorises: it equals the dot product of
the two sets' mean unit-normalised vectors. That algebraic fast path is the
production implementation; the quadratic double loop is kept as the test
oracle (``pair_similarity_exhaustive``).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import TaggedCorpus
from .errors import (
    DegenerateVectorError,
    FormatError,
    InvalidInputError,
    SampleSizeError,
)
from .model import Model, forward
from .numerics import SeededRng, cosine, derive_seed

HSA_MAGIC = b"HSAD"
HSA_VERSION = 1


@dataclass(frozen=True)
class CandidateSet:
    """Sampled router-input vectors for one language at one layer.

    Vectors are stored as float32, the on-disk dump precision, so a
    write/read round trip is bit-exact; similarity arithmetic upcasts to
    float64.
    """

    language: str
    layer: int
    vectors: np.ndarray  # (Q, hidden) float32

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise InvalidInputError("candidate set needs a (Q, hidden) array with Q >= 1")
        if not np.isfinite(vectors).all():
            raise InvalidInputError("candidate vectors must be finite")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if (norms == 0.0).any():
            raise DegenerateVectorError("candidate set contains a zero-norm vector")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def size(self) -> int:
        return len(self.vectors)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def collect_candidates(
    model: Model, corpus: TaggedCorpus, language: str, q: int, seed: int
) -> list[CandidateSet]:
    """Uniformly sample ``q`` token positions of one language (BOS and padding
    excluded) and return their router inputs at every layer."""
    if q < 2:
        raise InvalidInputError("q must be >= 2")
    part = corpus.subset_language(language)
    if len(part) == 0:
        raise SampleSizeError(f"corpus has no sequences for language {language!r}")
    valid = part.token_mask()
    valid[:, 0] = False  # BOS position carries no language token
    positions = np.argwhere(valid)
    if len(positions) < q:
        raise SampleSizeError(
            f"language {language!r} has {len(positions)} usable tokens, need {q}"
        )
    gen = SeededRng(derive_seed(seed, "candidates", language)).generator()
    chosen = positions[gen.choice(len(positions), size=q, replace=False)]

    needed = np.unique(chosen[:, 0])
    row_of = {int(s): i for i, s in enumerate(needed)}
    layer_vectors: list[np.ndarray] | None = None
    chunk = 32
    taps_rows = []
    for start in range(0, len(needed), chunk):
        batch = part.sequences[needed[start : start + chunk]]
        taps_rows.append(forward(model, batch).taps)
    taps = np.concatenate(taps_rows, axis=1)  # (layers, seqs, length, hidden)

    rows = np.fromiter((row_of[int(s)] for s in chosen[:, 0]), dtype=np.int64, count=q)
    cols = chosen[:, 1]
    layer_vectors = [taps[layer, rows, cols].astype(np.float32) for layer in range(taps.shape[0])]
    return [CandidateSet(language, layer, vecs) for layer, vecs in enumerate(layer_vectors)]


def _check_comparable(a: CandidateSet, b: CandidateSet) -> None:
    if a.layer != b.layer:
        raise InvalidInputError(f"layer mismatch: {a.layer} vs {b.layer}")
    if a.width != b.width:
        raise InvalidInputError(f"width mismatch: {a.width} vs {b.width}")


def pair_similarity(a: CandidateSet, b: CandidateSet) -> float:
    """Mean cosine over all ordered vector pairs, via the centroid identity."""
    _check_comparable(a, b)

    def centroid(s: CandidateSet) -> np.ndarray:
        rows = s.vectors.astype(np.float64)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if (norms == 0.0).any():
            raise DegenerateVectorError("zero-norm vector in candidate set")
        return (rows / norms).mean(axis=0)

    return float(np.clip(np.dot(centroid(a), centroid(b)), -1.0, 1.0))


def pair_similarity_exhaustive(a: CandidateSet, b: CandidateSet) -> float:
    """Quadratic reference: average cosine over every pair, one at a time."""
    _check_comparable(a, b)
    total = 0.0
    for u in a.vectors.astype(np.float64):
        for v in b.vectors.astype(np.float64):
            total += cosine(u, v)
    return total / (a.size * b.size)


@dataclass(frozen=True)
class SimilarityProfile:
    """Per-layer similarity components and the indicated similarity vector."""

    new_old: np.ndarray  # (layers,)
    new_new: np.ndarray | None  # (layers,) or None when only one new language
    indicated: np.ndarray  # (layers,)
    pair_sims: dict[tuple[str, str], np.ndarray]
    old_languages: tuple[str, ...]
    new_languages: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    @property
    def layer_count(self) -> int:
        return len(self.indicated)


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def indicated_similarity(
    pair_sims: Mapping[tuple[str, str], np.ndarray],
    old_languages: Sequence[str],
    new_languages: Sequence[str],
    *,
    literal_new_new: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Fold a language-pair similarity matrix into per-layer values.

    new_old averages over all (new, old) pairs; new_new averages over
    distinct new-language pairs. The published formula divides the new_new
    sum by twice the ordered-pair count, which halves its scale relative to
    new_old; the default here divides by the ordered-pair count so both
    components live on the same scale. ``literal_new_new`` restores the
    published denominator. With a single new language the new_new term is
    undefined and the indicated similarity is new_old alone.
    """
    old_languages = tuple(old_languages)
    new_languages = tuple(new_languages)
    if not new_languages:
        raise InvalidInputError("no new languages to profile")
    if not old_languages:
        raise InvalidInputError("no old languages to profile")

    def lookup(a: str, b: str) -> np.ndarray:
        try:
            return np.asarray(pair_sims[_pair_key(a, b)], dtype=np.float64)
        except KeyError:
            raise InvalidInputError(f"pair matrix is missing ({a}, {b})") from None

    new_old = np.mean(
        [lookup(n, o) for n in new_languages for o in old_languages], axis=0
    )
    if len(new_languages) < 2:
        return new_old, None, new_old.copy()
    total = None
    for j, a in enumerate(new_languages):
        for k, b in enumerate(new_languages):
            if j == k:
                continue
            term = lookup(a, b)
            total = term if total is None else total + term
    ordered_pairs = len(new_languages) * (len(new_languages) - 1)
    denominator = 2 * ordered_pairs if literal_new_new else ordered_pairs
    new_new = total / denominator
    return new_old, new_new, (new_old + new_new) / 2.0


def profile_similarity(
    model: Model,
    corpus: TaggedCorpus,
    old_languages: Sequence[str],
    new_languages: Sequence[str],
    *,
    q: int = 512,
    seed: int = 0,
    literal_new_new: bool = False,
) -> SimilarityProfile:
    """Collect candidate sets on ``model`` and compute the per-layer profile."""
    old_languages = tuple(old_languages)
    new_languages = tuple(new_languages)
    if set(old_languages) & set(new_languages):
        raise InvalidInputError("a language cannot be both old and new")
    candidates = {
        lang: collect_candidates(model, corpus, lang, q, seed)
        for lang in dict.fromkeys(old_languages + new_languages)
    }
    layers = len(next(iter(candidates.values())))

    wanted: set[tuple[str, str]] = set()
    for n in new_languages:
        for o in old_languages:
            wanted.add(_pair_key(n, o))
        for n2 in new_languages:
            if n2 != n:
                wanted.add(_pair_key(n, n2))
    pair_sims = {
        key: np.array(
            [pair_similarity(candidates[key[0]][i], candidates[key[1]][i]) for i in range(layers)]
        )
        for key in sorted(wanted)
    }
    new_old, new_new, indicated = indicated_similarity(
        pair_sims, old_languages, new_languages, literal_new_new=literal_new_new
    )
    meta = {
        "model": model.fingerprint(),
        "q": q,
        "seed": seed,
        "literal_new_new": literal_new_new,
    }
    return SimilarityProfile(
        new_old, new_new, indicated, pair_sims, old_languages, new_languages, meta
    )


def select_classifier_layers(new_old: Sequence[float], count: int) -> tuple[int, ...]:
    """Indices of the ``count`` layers with the highest new-vs-old similarity,
    ties broken toward the lower layer index."""
    values = np.asarray(new_old, dtype=np.float64)
    if not 1 <= count <= len(values):
        raise InvalidInputError(f"count {count} outside 1..{len(values)}")
    order = np.argsort(-values, kind="stable")[:count]
    return tuple(sorted(int(i) for i in order))


# ---------------------------------------------------------------------------
# file formats


def write_hsa_dump(sets: Sequence[CandidateSet], path: str | Path) -> None:
    """Binary dump of one language's candidate sets, layers 0..L-1 in order."""
    if not sets:
        raise InvalidInputError("nothing to write")
    ordered = sorted(sets, key=lambda s: s.layer)
    language = ordered[0].language
    q, width = ordered[0].size, ordered[0].width
    for i, s in enumerate(ordered):
        if s.language != language or s.size != q or s.width != width:
            raise InvalidInputError("candidate sets disagree on language, Q, or width")
        if s.layer != i:
            raise InvalidInputError("candidate sets must cover layers 0..L-1 exactly")
    lang_bytes = language.encode("utf-8")
    if len(lang_bytes) > 255:
        raise InvalidInputError("language id longer than 255 bytes")
    with open(path, "wb") as fh:
        fh.write(HSA_MAGIC)
        fh.write(struct.pack("<IIIQB", HSA_VERSION, len(ordered), width, q, len(lang_bytes)))
        fh.write(lang_bytes)
        for s in ordered:
            fh.write(np.ascontiguousarray(s.vectors, dtype="<f4").tobytes())


def read_hsa_dump(path: str | Path) -> list[CandidateSet]:
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IIIQB")
    if len(raw) < head or raw[:4] != HSA_MAGIC:
        raise FormatError(f"{path}: not an HSA dump (bad magic)")
    version, layers, width, q, lang_len = struct.unpack("<IIIQB", raw[4:head])
    if version != HSA_VERSION:
        raise FormatError(f"{path}: unsupported HSA dump version {version}")
    if len(raw) < head + lang_len:
        raise FormatError(f"{path}: truncated language id")
    language = raw[head : head + lang_len].decode("utf-8")
    payload = raw[head + lang_len :]
    expected = layers * q * width * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    out = []
    block = q * width * 4
    for layer in range(layers):
        vecs = np.frombuffer(payload, dtype="<f4", count=q * width, offset=layer * block)
        out.append(CandidateSet(language, layer, vecs.reshape(q, width).astype(np.float32)))
    return out


def hsa_dump_roundtrip(sets: Sequence[CandidateSet], path: str | Path) -> list[CandidateSet]:
    write_hsa_dump(sets, path)
    return read_hsa_dump(path)


def save_profile(profile: SimilarityProfile, path: str | Path, *, csv_path: str | Path | None = None) -> None:
    """JSON profile plus a CSV mirror shaped for per-layer similarity plots."""
    path = Path(path)
    record = {
        "layers": [
            {
                "index": i,
                "s_new_old": float(profile.new_old[i]),
                "s_new_new": (None if profile.new_new is None else float(profile.new_new[i])),
                "s": float(profile.indicated[i]),
            }
            for i in range(profile.layer_count)
        ],
        "pairs": {
            f"{a}|{b}": [float(v) for v in values]
            for (a, b), values in sorted(profile.pair_sims.items())
        },
        "old_languages": list(profile.old_languages),
        "new_languages": list(profile.new_languages),
        "meta": profile.meta,
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = Path(csv_path) if csv_path is not None else path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "s_new_old", "s_new_new", "s"])
        for i in range(profile.layer_count):
            writer.writerow(
                [
                    i,
                    repr(float(profile.new_old[i])),
                    "" if profile.new_new is None else repr(float(profile.new_new[i])),
                    repr(float(profile.indicated[i])),
                ]
            )


def load_profile(path: str | Path) -> SimilarityProfile:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    layers = record["layers"]
    new_old = np.array([row["s_new_old"] for row in layers], dtype=np.float64)
    has_new_new = layers and layers[0]["s_new_new"] is not None
    new_new = (
        np.array([row["s_new_new"] for row in layers], dtype=np.float64) if has_new_new else None
    )
    indicated = np.array([row["s"] for row in layers], dtype=np.float64)
    pair_sims = {
        tuple(key.split("|")): np.asarray(values, dtype=np.float64)
        for key, values in record.get("pairs", {}).items()
    }
    return SimilarityProfile(
        new_old,
        new_new,
        indicated,
        pair_sims,
        tuple(record.get("old_languages", ())),
        tuple(record.get("new_languages", ())),
        record.get("meta", {}),
    )

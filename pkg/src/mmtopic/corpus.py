"""Multi-modal bag-of-words corpora: loading, validation, splitting, statistics.

A corpus bundles one sparse count vector per named modality for every
document, together with the per-modality vocabularies and the modality
layout (names, truncation levels, offsets into the concatenated topic
axis). Corpora are immutable after load and safe to share between
workers.

On-disk format (all integers exact, no floating point):

* manifest: JSON object with a ``modalities`` list and a ``documents``
  path. Each modality entry is ``{"name": ..., "vocabulary": <path>,
  "topics": <int, optional>}``; paths are relative to the manifest.
* vocabulary file: UTF-8 text, one term per line; the 0-based line
  number is the token index.
* documents file: JSON lines, one document per line:
  ``{"id": ..., "counts": {modality: {"<token_index>": count}}}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

#: Truncation level assumed for manifests that do not state one.
DEFAULT_TOPIC_COUNT = 8


class CorpusParseError(ValueError):
    """A corpus file could not be parsed (reported with file and line)."""


class CorpusValidationError(ValueError):
    """Parsed corpus data violates a structural invariant."""


@dataclass(frozen=True)
class ModalityLayout:
    """Ordered modality names plus per-modality truncation levels.

    The layout owns the mapping from a modality to its slice of the
    concatenated topic axis: ``offsets[m]`` is where modality ``m``'s
    topics start and ``total_topics`` is the length of the whole axis.
    """

    names: tuple[str, ...]
    topic_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "topic_counts", tuple(int(t) for t in self.topic_counts))
        if not self.names:
            raise CorpusValidationError("layout needs at least one modality")
        if len(self.names) != len(self.topic_counts):
            raise CorpusValidationError("names and topic_counts must have equal length")
        if len(set(self.names)) != len(self.names):
            raise CorpusValidationError(f"duplicate modality names in {self.names}")
        if any(not n for n in self.names):
            raise CorpusValidationError("modality names must be nonempty")
        if any(t < 1 for t in self.topic_counts):
            raise CorpusValidationError("topic counts must be positive")

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for t in self.topic_counts:
            out.append(acc)
            acc += t
        return tuple(out)

    @property
    def total_topics(self) -> int:
        return sum(self.topic_counts)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown modality {name!r}; have {self.names}") from None

    def topics(self, name: str) -> int:
        return self.topic_counts[self.index(name)]

    def block(self, name: str) -> slice:
        """Slice of the concatenated topic axis belonging to ``name``."""
        m = self.index(name)
        return slice(self.offsets[m], self.offsets[m] + self.topic_counts[m])


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token strings for one modality; index = position."""

    modality: str
    terms: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(self.terms) < 2:
            raise CorpusValidationError(
                f"vocabulary for {self.modality!r} needs at least 2 terms"
            )
        if len(set(self.terms)) != len(self.terms):
            raise CorpusValidationError(f"duplicate terms in vocabulary {self.modality!r}")

    @property
    def size(self) -> int:
        return len(self.terms)


@dataclass
class Document:
    """One document: an id plus per-modality sparse token counts."""

    id: str
    counts: dict[str, dict[int, int]]

    def length(self, modality: str) -> int:
        return sum(self.counts.get(modality, {}).values())

    def token_arrays(self, modality: str) -> tuple[np.ndarray, np.ndarray]:
        """Sorted (token_index, count) arrays for one modality."""
        cm = self.counts.get(modality, {})
        if not cm:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
        idx = np.array(sorted(cm), dtype=np.int64)
        cnt = np.array([cm[i] for i in idx], dtype=np.float64)
        return idx, cnt


@dataclass
class MultiModalCorpus:
    """A validated collection of multi-modal documents."""

    layout: ModalityLayout
    vocabularies: dict[str, Vocabulary]
    documents: list[Document] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.documents]

    def validate(self) -> None:
        for name in self.layout.names:
            if name not in self.vocabularies:
                raise CorpusValidationError(f"missing vocabulary for modality {name!r}")
        seen: set[str] = set()
        for doc in self.documents:
            if doc.id in seen:
                raise CorpusValidationError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
            for m in doc.counts:
                if m not in self.layout.names:
                    raise CorpusValidationError(
                        f"document {doc.id!r} references unknown modality {m!r}"
                    )
            for m in self.layout.names:
                doc.counts.setdefault(m, {})
                size = self.vocabularies[m].size
                for tok, cnt in doc.counts[m].items():
                    if not isinstance(tok, int) or tok < 0 or tok >= size:
                        raise CorpusValidationError(
                            f"document {doc.id!r}, modality {m!r}: token index "
                            f"{tok} outside vocabulary of size {size}"
                        )
                    if not isinstance(cnt, int) or cnt <= 0:
                        raise CorpusValidationError(
                            f"document {doc.id!r}, modality {m!r}: count for token "
                            f"{tok} must be a positive integer, got {cnt!r}"
                        )

    def content_hash(self) -> str:
        """Deterministic hash of layout, vocabulary sizes and all counts."""
        h = hashlib.sha256()
        h.update(json.dumps(
            {
                "names": list(self.layout.names),
                "topics": list(self.layout.topic_counts),
                "vocab_sizes": [self.vocabularies[n].size for n in self.layout.names],
            },
            sort_keys=True,
        ).encode())
        for doc in self.documents:
            payload = {m: {str(k): doc.counts[m][k] for k in sorted(doc.counts[m])}
                       for m in self.layout.names}
            h.update(json.dumps({"id": doc.id, "counts": payload}, sort_keys=True).encode())
        return h.hexdigest()


def _read_vocabulary(path: Path, modality: str) -> Vocabulary:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusParseError(f"{path}: cannot read vocabulary: {exc}") from exc
    terms = [line.rstrip("\n") for line in lines]
    return Vocabulary(modality=modality, terms=tuple(terms))


def _parse_document_line(raw: str, path: Path, lineno: int,
                         modalities: Iterable[str]) -> Document:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or "id" not in obj or "counts" not in obj:
        raise CorpusParseError(f"{path}:{lineno}: expected object with 'id' and 'counts'")
    counts: dict[str, dict[int, int]] = {}
    raw_counts = obj["counts"]
    if not isinstance(raw_counts, dict):
        raise CorpusParseError(f"{path}:{lineno}: 'counts' must be an object")
    for m, cm in raw_counts.items():
        if not isinstance(cm, dict):
            raise CorpusParseError(f"{path}:{lineno}: counts for {m!r} must be an object")
        parsed: dict[int, int] = {}
        for k, v in cm.items():
            try:
                tok = int(k)
            except (TypeError, ValueError):
                raise CorpusParseError(
                    f"{path}:{lineno}: token index {k!r} is not an integer"
                ) from None
            if not isinstance(v, int) or isinstance(v, bool):
                raise CorpusParseError(
                    f"{path}:{lineno}: count for token {k!r} must be an integer"
                )
            parsed[tok] = v
        counts[m] = parsed
    for m in modalities:
        counts.setdefault(m, {})
    return Document(id=str(obj["id"]), counts=counts)


def load_corpus(manifest_path: str | Path) -> MultiModalCorpus:
    """Load and validate a corpus from its manifest file.

    Raises :class:`CorpusParseError` for malformed files (with line
    numbers) and :class:`CorpusValidationError` for out-of-range token
    indices, duplicate ids and similar structural problems.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{manifest_path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    except OSError as exc:
        raise CorpusParseError(f"{manifest_path}: cannot read manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "modalities" not in manifest or "documents" not in manifest:
        raise CorpusParseError(
            f"{manifest_path}: manifest must contain 'modalities' and 'documents'"
        )

    base = manifest_path.parent
    names, topic_counts, vocabularies = [], [], {}
    for entry in manifest["modalities"]:
        if isinstance(entry, str):
            entry = {"name": entry, "vocabulary": f"{entry}.vocab.txt"}
        if "name" not in entry or "vocabulary" not in entry:
            raise CorpusParseError(
                f"{manifest_path}: modality entries need 'name' and 'vocabulary'"
            )
        name = entry["name"]
        names.append(name)
        topic_counts.append(int(entry.get("topics", DEFAULT_TOPIC_COUNT)))
        vocabularies[name] = _read_vocabulary(base / entry["vocabulary"], name)

    layout = ModalityLayout(names=tuple(names), topic_counts=tuple(topic_counts))
    docs_path = base / manifest["documents"]
    documents = []
    try:
        raw_lines = docs_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusParseError(f"{docs_path}: cannot read documents: {exc}") from exc
    for lineno, raw in enumerate(raw_lines, start=1):
        if not raw.strip():
            continue
        documents.append(_parse_document_line(raw, docs_path, lineno, layout.names))

    return MultiModalCorpus(layout=layout, vocabularies=vocabularies, documents=documents)


def write_corpus(corpus: MultiModalCorpus, out_dir: str | Path,
                 stem: str = "corpus") -> Path:
    """Write a corpus to ``out_dir`` and return the manifest path.

    Output is deterministic: token indices are emitted in sorted order so
    repeated writes of an equal corpus are byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in corpus.layout.names:
        vocab_file = f"{stem}.{name}.vocab.txt"
        (out_dir / vocab_file).write_text(
            "\n".join(corpus.vocabularies[name].terms) + "\n", encoding="utf-8"
        )
        entries.append({
            "name": name,
            "vocabulary": vocab_file,
            "topics": corpus.layout.topics(name),
        })
    docs_file = f"{stem}.documents.jsonl"
    with (out_dir / docs_file).open("w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            payload = {
                "id": doc.id,
                "counts": {m: {str(k): doc.counts[m][k] for k in sorted(doc.counts[m])}
                           for m in corpus.layout.names if doc.counts[m]},
            }
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    manifest_path = out_dir / f"{stem}.manifest.json"
    manifest_path.write_text(
        json.dumps({"modalities": entries, "documents": docs_file}, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest_path


def split_corpus(corpus: MultiModalCorpus, train_fraction: float,
                 seed: int) -> tuple[MultiModalCorpus, MultiModalCorpus]:
    """Randomly partition documents into disjoint train/test corpora.

    The train size is ``floor(train_fraction * D + 0.5)`` (round half
    up), and the partition is deterministic for a fixed seed. Document
    order within each side follows the original corpus order.
    """
    if len(corpus) < 2:
        raise CorpusValidationError("need at least 2 documents to split")
    if not 0.0 < train_fraction < 1.0:
        raise CorpusValidationError("train_fraction must lie in (0, 1)")
    d = len(corpus)
    n_train = int(np.floor(train_fraction * d + 0.5))
    perm = np.random.default_rng(seed).permutation(d)
    train_idx = sorted(perm[:n_train].tolist())
    test_idx = sorted(perm[n_train:].tolist())
    make = lambda idxs: MultiModalCorpus(
        layout=corpus.layout,
        vocabularies=corpus.vocabularies,
        documents=[corpus.documents[i] for i in idxs],
    )
    return make(train_idx), make(test_idx)


def corpus_stats(corpus: MultiModalCorpus) -> dict:
    """Per-modality totals: documents with tokens, token counts, mean length."""
    out: dict = {"documents": len(corpus), "modalities": {}}
    d = len(corpus)
    for name in corpus.layout.names:
        totals = [doc.length(name) for doc in corpus.documents]
        total_tokens = int(sum(totals))
        out["modalities"][name] = {
            "documents_with_tokens": int(sum(1 for t in totals if t > 0)),
            "total_tokens": total_tokens,
            "vocabulary_size": corpus.vocabularies[name].size,
            "mean_length": (total_tokens / d) if d else 0.0,
        }
    return out

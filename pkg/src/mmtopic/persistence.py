"""Versioned model archives: JSON metadata plus raw float64 arrays.

Archive layout (documented byte-exactly; all multi-byte integers little
endian):

* bytes 0..8: magic ``b"MMTOPIC\\0"``
* bytes 8..16: unsigned 64-bit header length ``H``
* bytes 16..16+H: UTF-8 JSON header
* remainder: the concatenation of the arrays declared in the header's
  ``arrays`` list, each raw little-endian float64 in C order.

The header carries ``format_version`` (checked before anything else is
read), the layout, per-modality scalars and optional vocabularies, the
array manifest, and training provenance. Numeric fields round-trip
bit-exactly: arrays are stored raw and scalars as JSON numbers, which
Python serializes via ``repr`` and therefore reproduces exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .corpus import ModalityLayout, Vocabulary
from .generative import GaussianPrior, ModelParams, StickWeights, TopicDictionary

MAGIC = b"MMTOPIC\x00"
FORMAT_VERSION = 1


class ArchiveVersionError(ValueError):
    """The file is not an archive of a readable version."""


class ArchiveValidationError(ValueError):
    """The archive decoded but its contents violate a model invariant."""


def hash_json(data) -> str:
    """Stable hash of any JSON-serializable object."""
    return hashlib.sha256(
        json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _array_entries(model: ModelParams) -> list[tuple[str, np.ndarray]]:
    entries = [("mu", model.prior.mu), ("sigma", model.prior.sigma)]
    for m in model.layout.names:
        entries.append((f"v:{m}", model.sticks[m].v))
        entries.append((f"p:{m}", model.sticks[m].p))
        entries.append((f"topics:{m}", model.dictionaries[m].topics))
        if model.dictionaries[m].concentration is not None:
            entries.append((f"concentration:{m}", model.dictionaries[m].concentration))
    return entries


def save_model(model: ModelParams, provenance: dict, path: str | Path) -> Path:
    """Write an archive atomically (temp file in place, then rename)."""
    path = Path(path)
    entries = _array_entries(model)
    header = {
        "format_version": FORMAT_VERSION,
        "layout": {
            "names": list(model.layout.names),
            "topic_counts": list(model.layout.topic_counts),
        },
        "tied_xi": bool(model.tied_xi),
        "modalities": {
            m: {
                "alpha": float(model.sticks[m].alpha),
                "beta": float(model.sticks[m].beta),
                "gamma": float(model.dictionaries[m].gamma),
                "vocabulary": (list(model.vocabularies[m].terms)
                               if model.vocabularies and m in model.vocabularies
                               else None),
            }
            for m in model.layout.names
        },
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
        "provenance": provenance,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint64(len(header_bytes)).tobytes())
            fh.write(header_bytes)
            for _, arr in entries:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def load_model(path: str | Path) -> tuple[ModelParams, dict]:
    """Read and fully re-validate an archive; returns (model, provenance).

    The format version is checked before any model field is decoded.
    Corrupted numerics (non-finite values, broken simplex rows, stick
    weights that disagree with their recomputation) raise
    :class:`ArchiveValidationError` naming the offending field.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ArchiveVersionError(f"{path}: not a model archive")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveValidationError(f"{path}: corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(
            f"{path}: format version {version!r} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )

    arrays: dict[str, np.ndarray] = {}
    offset = 16 + header_len
    for spec in header["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ArchiveValidationError(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(
            blob[offset:end], dtype="<f8"
        ).reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ArchiveValidationError(f"{path}: {len(blob) - offset} trailing bytes")

    try:
        layout = ModalityLayout(
            names=tuple(header["layout"]["names"]),
            topic_counts=tuple(header["layout"]["topic_counts"]),
        )
        sticks, dictionaries, vocabularies = {}, {}, {}
        for m in layout.names:
            meta = header["modalities"][m]
            sticks[m] = StickWeights(
                v=arrays[f"v:{m}"], alpha=meta["alpha"], beta=meta["beta"],
                p=arrays[f"p:{m}"],
            )
            dictionaries[m] = TopicDictionary(
                modality=m, topics=arrays[f"topics:{m}"], gamma=meta["gamma"],
                concentration=arrays.get(f"concentration:{m}"),
            )
            if meta.get("vocabulary") is not None:
                vocabularies[m] = Vocabulary(modality=m, terms=tuple(meta["vocabulary"]))
        model = ModelParams(
            layout=layout,
            sticks=sticks,
            dictionaries=dictionaries,
            prior=GaussianPrior(mu=arrays["mu"], sigma=arrays["sigma"]),
            tied_xi=bool(header.get("tied_xi", False)),
            vocabularies=vocabularies or None,
        )
    except (KeyError, ValueError) as exc:
        raise ArchiveValidationError(f"{path}: {exc}") from exc
    return model, header.get("provenance", {})

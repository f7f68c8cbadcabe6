"""Shared/private topic identification from the learned covariance.

The covariance over concatenated topic weights is converted to a
correlation matrix, the cross-modality block is thresholded, and each
source topic gets a relevance score (row mean of absolute surviving
correlations). Topics whose entire thresholded row vanishes are private
to the source modality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import ModalityLayout
from .generative import ModelParams

#: Threshold below which cross-modal correlations are zeroed.
DEFAULT_THRESHOLD = 0.2

#: Stick weights above this count as effectively used topics.
EFFECTIVE_STICK = 1e-3


@dataclass
class TopicAnalysis:
    """Correlation structure and topic ranking for one modality pair."""

    omega: np.ndarray
    cross_block: np.ndarray
    rho: np.ndarray
    ranking: np.ndarray
    threshold: float
    source: str
    target: str

    def private_topics(self) -> np.ndarray:
        """Indices whose thresholded cross-correlation row is all zero."""
        return np.nonzero(self.rho == 0.0)[0]


def correlation_matrix(sigma: np.ndarray) -> np.ndarray:
    """Normalize a covariance to unit diagonal."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be square")
    if np.max(np.abs(sigma - sigma.T)) > 1e-8:
        raise ValueError("covariance must be symmetric")
    diag = np.diag(sigma)
    if np.any(diag <= 0):
        raise ValueError("covariance has a nonpositive diagonal entry")
    scale = np.sqrt(diag)
    return sigma / np.outer(scale, scale)


def cross_block(omega: np.ndarray, layout: ModalityLayout, source: str,
                target: str, tau: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Thresholded source-rows-by-target-columns slice of the correlation.

    Entries with absolute value below ``tau`` are zeroed; the boundary
    ``|x| == tau`` survives.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    rows = layout.block(source)
    cols = layout.block(target)
    block = np.array(omega[rows, cols], dtype=np.float64)
    block[np.abs(block) < tau] = 0.0
    return block


def visual_relevance(cross: np.ndarray) -> np.ndarray:
    """Row mean of absolute thresholded cross-correlations.

    The normalizer is the number of target-modality topics (columns),
    so negative correlations count and all-zero rows score exactly 0.
    """
    cross = np.asarray(cross, dtype=np.float64)
    if cross.ndim != 2 or cross.size == 0:
        raise ValueError("cross block must be a nonempty matrix")
    return np.abs(cross).mean(axis=1)


def alt_relevance_max(cross: np.ndarray) -> np.ndarray:
    """Row maximum of absolute thresholded cross-correlations."""
    cross = np.asarray(cross, dtype=np.float64)
    if cross.ndim != 2 or cross.size == 0:
        raise ValueError("cross block must be a nonempty matrix")
    return np.abs(cross).max(axis=1)


def rank_topics(rho: np.ndarray) -> np.ndarray:
    """Topic indices by descending relevance; ties keep index order."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.lexsort((np.arange(rho.shape[0]), -rho))


def analyze_topics(model: ModelParams, source: str, target: str,
                   tau: float = DEFAULT_THRESHOLD,
                   relevance: str = "mean") -> TopicAnalysis:
    """End-to-end analysis of one ordered modality pair."""
    if relevance not in ("mean", "max"):
        raise ValueError("relevance must be 'mean' or 'max'")
    if model.tied_xi:
        raise ValueError(
            "a tied weight vector has a single block; cross-modality "
            "correlation analysis does not apply"
        )
    omega = correlation_matrix(model.prior.sigma)
    cross = cross_block(omega, model.layout, source, target, tau)
    score = visual_relevance(cross) if relevance == "mean" else alt_relevance_max(cross)
    return TopicAnalysis(
        omega=omega,
        cross_block=cross,
        rho=score,
        ranking=rank_topics(score),
        threshold=tau,
        source=source,
        target=target,
    )


def stick_report(model: ModelParams) -> dict[str, dict]:
    """Per-modality stick weights plus the count of effectively used topics."""
    report = {}
    for m in model.layout.names:
        p = model.sticks[m].p
        report[m] = {
            "p": p.copy(),
            "effective_topics": int(np.sum(p > EFFECTIVE_STICK)),
            "trailing_mass": float(p[np.argmax(np.cumsum(p) > 1 - EFFECTIVE_STICK):].sum()),
        }
    return report


def top_words(model: ModelParams, modality: str, topic: int,
              n: int) -> list[tuple[str, float]]:
    """The ``n`` highest-probability terms of one topic, ties by index."""
    dct = model.dictionaries[modality]
    if not 0 <= topic < dct.num_topics:
        raise ValueError(f"topic {topic} outside truncation {dct.num_topics}")
    if n > dct.vocab_size:
        raise ValueError("cannot request more terms than the vocabulary holds")
    row = dct.topics[topic]
    order = np.lexsort((np.arange(row.shape[0]), -row))[:n]
    if model.vocabularies is not None and modality in model.vocabularies:
        terms = model.vocabularies[modality].terms
    else:
        terms = [f"w{i}" for i in range(dct.vocab_size)]
    return [(terms[i], float(row[i])) for i in order]

"""Model parameters and the forward generative process.

The model couples per-modality topic dictionaries through a single
Gaussian over the concatenated per-document weight vector. For each
document, a weight vector ``xi`` is drawn from ``N(mu, sigma)`` and cut
into per-modality blocks; within a modality, unnormalized topic weights
``Y_k ~ Gamma(beta * p_k, rate=exp(-xi_k))`` are normalized into topic
proportions, and words are drawn from the selected topics. The
truncated stick-breaking weights ``p`` switch topics on and off per
modality, which is what makes private topics possible.

Gamma convention: the second parameter ``exp(-xi_k)`` is a rate, which
is the same distribution as scale ``exp(+xi_k)``; the mean is
``beta * p_k * exp(xi_k)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    Document,
    ModalityLayout,
    MultiModalCorpus,
    Vocabulary,
)

#: Stick weights at or below this value are treated as switched off.
MASK_EPS = 1e-10


def stick_product(v: np.ndarray) -> np.ndarray:
    """Weights ``p_k = v_k * prod_{i<k}(1 - v_i)`` from stick fractions."""
    v = np.asarray(v, dtype=np.float64)
    prefix = np.concatenate(([1.0], np.cumprod(1.0 - v[:-1])))
    return v * prefix


def fractions_from_weights(p: np.ndarray) -> np.ndarray:
    """Invert :func:`stick_product`: fractions whose product weights are ``p``.

    The input must sum to at most 1; the final fraction is forced to 1 so
    the truncated weights sum to exactly 1 (any remainder goes to the
    last topic).
    """
    p = np.asarray(p, dtype=np.float64)
    t = p.shape[0]
    v = np.zeros(t)
    remaining = 1.0
    for k in range(t):
        v[k] = 0.0 if remaining <= 0.0 else min(p[k] / remaining, 1.0)
        remaining *= 1.0 - v[k]
    v[-1] = 1.0
    return v


@dataclass
class StickWeights:
    """Truncated stick-breaking weights for one modality.

    ``v`` holds the stick fractions with the last entry forced to 1, so
    the derived weights ``p`` sum to exactly 1. ``alpha`` and ``beta``
    are the first- and second-level concentration parameters.
    """

    v: np.ndarray
    alpha: float
    beta: float
    p: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.p is None:
            self.p = stick_product(self.v)
        else:
            self.p = np.asarray(self.p, dtype=np.float64)
        self.validate()

    @property
    def truncation(self) -> int:
        return self.v.shape[0]

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("stick concentrations alpha, beta must be positive")
        if self.v.ndim != 1 or self.v.shape[0] < 1:
            raise ValueError("stick fractions must be a nonempty vector")
        if not np.all(np.isfinite(self.v)) or not np.all(np.isfinite(self.p)):
            raise ValueError("stick weights contain non-finite values")
        if np.any(self.v < 0) or np.any(self.v > 1):
            raise ValueError("stick fractions must lie in [0, 1]")
        if self.v[-1] != 1.0:
            raise ValueError("last stick fraction must be 1 (truncation)")
        recomputed = stick_product(self.v)
        if np.max(np.abs(recomputed - self.p)) > 1e-12:
            raise ValueError("stored stick weights disagree with recomputation")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError("truncated stick weights must sum to 1")

    def active(self) -> np.ndarray:
        """Boolean mask of topics that are switched on."""
        return self.p > MASK_EPS


def sample_sticks(alpha: float, t: int, rng: np.random.Generator,
                  beta: float = 1.0) -> StickWeights:
    """Draw truncated stick fractions ``V_k ~ Beta(1, alpha)``.

    The final fraction is forced to 1 so that the weights sum to 1.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if t < 1:
        raise ValueError("truncation level must be at least 1")
    v = rng.beta(1.0, alpha, size=t)
    v[-1] = 1.0
    return StickWeights(v=v, alpha=alpha, beta=beta)


@dataclass
class TopicDictionary:
    """Per-modality topics: rows are distributions over the vocabulary.

    ``concentration`` optionally carries the Dirichlet parameters the
    point topics are the means of (present on trained models, absent on
    ground-truth ones).
    """

    modality: str
    topics: np.ndarray
    gamma: float
    concentration: np.ndarray | None = None

    def __post_init__(self):
        self.topics = np.asarray(self.topics, dtype=np.float64)
        if self.concentration is not None:
            self.concentration = np.asarray(self.concentration, dtype=np.float64)
        self.validate()

    @property
    def num_topics(self) -> int:
        return self.topics.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.topics.shape[1]

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.topics.ndim != 2:
            raise ValueError("topics must be a (T, W) matrix")
        if np.any(self.topics < 0) or not np.all(np.isfinite(self.topics)):
            raise ValueError(f"topic rows for {self.modality!r} must be finite and nonnegative")
        sums = self.topics.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > 1e-10)[0]
        if bad.size:
            raise ValueError(
                f"modality {self.modality!r}: topic {int(bad[0])} sums to "
                f"{sums[bad[0]]!r}, expected 1"
            )
        if self.concentration is not None:
            if self.concentration.shape != self.topics.shape:
                raise ValueError("concentration shape must match topics")
            if np.any(self.concentration <= 0):
                raise ValueError("concentration entries must be positive")

    def expected_log_topics(self) -> np.ndarray:
        """E[log eta] under the Dirichlet factor, or log of the point topics."""
        if self.concentration is not None:
            from scipy.special import digamma
            lam = self.concentration
            return digamma(lam) - digamma(lam.sum(axis=1, keepdims=True))
        with np.errstate(divide="ignore"):
            return np.log(self.topics)


@dataclass
class GaussianPrior:
    """Mean and covariance of the document weight vector."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.validate()

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def validate(self) -> None:
        if self.mu.ndim != 1 or self.sigma.shape != (self.dim, self.dim):
            raise ValueError("prior must have a vector mean and square covariance")
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("prior contains non-finite values")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-8:
            raise ValueError("covariance must be symmetric")


@dataclass
class ModelParams:
    """Everything that defines a model: layout, sticks, topics, prior.

    ``tied_xi`` selects the baseline variant where all modalities share a
    single weight vector of length T (one block) while keeping separate
    stick-breaking weights; the prior is then T x T.

    ``vocabularies`` is optional metadata so term strings survive
    persistence; the numerical core never touches it.
    """

    layout: ModalityLayout
    sticks: dict[str, StickWeights]
    dictionaries: dict[str, TopicDictionary]
    prior: GaussianPrior
    tied_xi: bool = False
    vocabularies: dict[str, Vocabulary] | None = None

    def __post_init__(self):
        self.validate()

    @property
    def xi_dim(self) -> int:
        if self.tied_xi:
            return self.layout.topic_counts[0]
        return self.layout.total_topics

    def xi_block(self, modality: str) -> slice:
        """Slice of the weight vector belonging to ``modality``."""
        if self.tied_xi:
            return slice(0, self.layout.topic_counts[0])
        return self.layout.block(modality)

    def validate(self) -> None:
        for m, t in zip(self.layout.names, self.layout.topic_counts):
            if m not in self.sticks or m not in self.dictionaries:
                raise ValueError(f"missing sticks or dictionary for modality {m!r}")
            if self.sticks[m].truncation != t:
                raise ValueError(
                    f"modality {m!r}: stick length {self.sticks[m].truncation} "
                    f"!= layout truncation {t}"
                )
            if self.dictionaries[m].num_topics != t:
                raise ValueError(
                    f"modality {m!r}: dictionary has {self.dictionaries[m].num_topics} "
                    f"topics, layout says {t}"
                )
        if self.tied_xi and len(set(self.layout.topic_counts)) != 1:
            raise ValueError("tied weight vector requires equal truncation levels")
        if self.prior.dim != self.xi_dim:
            raise ValueError(
                f"prior dimension {self.prior.dim} != weight dimension {self.xi_dim}"
            )
        if self.vocabularies is not None:
            for m in self.layout.names:
                if m in self.vocabularies and (
                    self.vocabularies[m].size != self.dictionaries[m].vocab_size
                ):
                    raise ValueError(f"vocabulary size mismatch for modality {m!r}")


def expected_theta(xi: np.ndarray, sticks: StickWeights) -> np.ndarray:
    """Topic proportions proportional to ``beta * p * exp(xi)``.

    Switched-off topics (p at or below the mask threshold) receive
    exactly zero mass. The computation is shift invariant in ``xi``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != sticks.p.shape:
        raise ValueError("xi length must equal the stick length")
    active = sticks.active()
    if not np.any(active):
        raise ValueError("all topics are switched off; proportions undefined")
    out = np.zeros_like(sticks.p)
    shift = np.max(xi[active])
    weights = sticks.beta * sticks.p[active] * np.exp(xi[active] - shift)
    total = weights.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("degenerate topic weights; cannot normalize")
    out[active] = weights / total
    return out


@dataclass
class LatentRecord:
    """Ground truth kept alongside a sampled document, for oracle tests."""

    doc_id: str
    xi: np.ndarray
    theta: dict[str, np.ndarray]
    topic_counts: dict[str, np.ndarray]

    def to_json(self) -> str:
        return json.dumps({
            "id": self.doc_id,
            "xi": self.xi.tolist(),
            "theta": {m: v.tolist() for m, v in self.theta.items()},
            "topic_counts": {m: v.astype(int).tolist() for m, v in self.topic_counts.items()},
        }, sort_keys=True)


def sample_document(params: ModelParams, lengths: dict[str, int],
                    rng: np.random.Generator, doc_id: str = "doc") -> tuple[Document, LatentRecord]:
    """Run the generative process forward for one document.

    Returns the observed counts plus the latent record (weight vector,
    per-modality proportions and per-topic assignment counts). Sampling
    is bit-reproducible for a fixed generator state.
    """
    prior = params.prior
    xi = rng.multivariate_normal(prior.mu, prior.sigma, method="cholesky")
    counts: dict[str, dict[int, int]] = {}
    thetas: dict[str, np.ndarray] = {}
    z_counts: dict[str, np.ndarray] = {}
    for m in params.layout.names:
        sticks = params.sticks[m]
        topics = params.dictionaries[m].topics
        t = sticks.truncation
        xi_m = xi[params.xi_block(m)]
        shapes = sticks.beta * sticks.p
        active = sticks.active()
        y = np.zeros(t)
        if np.any(active):
            y[active] = rng.gamma(shape=shapes[active], scale=np.exp(xi_m[active]))
        total = y.sum()
        if total <= 0:
            raise ValueError(
                f"modality {m!r}: degenerate topic weights (all gamma draws zero)"
            )
        theta = y / total
        thetas[m] = theta
        n_m = int(lengths.get(m, 0))
        if n_m < 0:
            raise ValueError("token counts must be nonnegative")
        per_topic = rng.multinomial(n_m, theta)
        z_counts[m] = per_topic
        word_counts = np.zeros(topics.shape[1], dtype=np.int64)
        for k in np.nonzero(per_topic)[0]:
            word_counts += rng.multinomial(int(per_topic[k]), topics[k])
        counts[m] = {int(w): int(c) for w, c in enumerate(word_counts) if c > 0}
    doc = Document(id=doc_id, counts=counts)
    record = LatentRecord(doc_id=doc_id, xi=xi, theta=thetas, topic_counts=z_counts)
    return doc, record


@dataclass
class ScenarioConfig:
    """Configuration of a synthetic two-modality corpus with known truth.

    ``shared_pairs`` lists ``(topic_in_first, topic_in_second,
    correlation)`` triples; ``private_topics`` gives how many topics per
    modality are active only there (their indices are switched off in
    the other modality).
    """

    modalities: tuple[str, ...] = ("text", "image")
    topic_counts: tuple[int, ...] = (8, 8)
    shared_pairs: tuple[tuple[int, int, float], ...] = ((0, 0, 0.9), (1, 1, 0.9), (2, 2, 0.9))
    private_topics: tuple[int, ...] = (2, 2)
    vocab_sizes: tuple[int, ...] = (200, 200)
    num_docs: int = 500
    doc_lengths: tuple[int, ...] = (100, 100)
    seed: int = 0
    alpha: float = 1.0
    beta: float = 20.0
    gamma: float = 0.1

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.topic_counts = tuple(int(t) for t in self.topic_counts)
        self.shared_pairs = tuple((int(a), int(b), float(c)) for a, b, c in self.shared_pairs)
        self.private_topics = tuple(int(x) for x in self.private_topics)
        self.vocab_sizes = tuple(int(w) for w in self.vocab_sizes)
        self.doc_lengths = tuple(int(n) for n in self.doc_lengths)
        if len(self.modalities) != 2:
            raise ValueError("synthetic scenarios support exactly two modalities")
        for seq in (self.topic_counts, self.private_topics, self.vocab_sizes, self.doc_lengths):
            if len(seq) != 2:
                raise ValueError("per-modality settings must have one entry per modality")
        for a, b, c in self.shared_pairs:
            if not (0 <= a < self.topic_counts[0] and 0 <= b < self.topic_counts[1]):
                raise ValueError(f"shared pair ({a}, {b}) outside truncation levels")
            if not -1.0 < c < 1.0 + 1e-12:
                raise ValueError("pair correlations must lie in (-1, 1]")
        if self.num_docs < 0:
            raise ValueError("num_docs must be nonnegative")

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "topic_counts": list(self.topic_counts),
            "shared_pairs": [list(p) for p in self.shared_pairs],
            "private_topics": list(self.private_topics),
            "vocab_sizes": list(self.vocab_sizes),
            "num_docs": self.num_docs,
            "doc_lengths": list(self.doc_lengths),
            "seed": self.seed,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
        }


def nearest_correlation(corr: np.ndarray, clip: float = 1e-6) -> np.ndarray:
    """Clip eigenvalues at ``clip`` and rescale back to unit diagonal.

    Matrices that are already sufficiently positive definite are
    returned unchanged, so feasible requests survive exactly.
    """
    corr = np.asarray(corr, dtype=np.float64)
    eigvals, eigvecs = np.linalg.eigh(corr)
    if eigvals.min() >= clip:
        return corr
    fixed = (eigvecs * np.maximum(eigvals, clip)) @ eigvecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    return (fixed + fixed.T) / 2.0


def _allocate_topics(cfg: ScenarioConfig) -> tuple[list[list[int]], list[list[int]]]:
    """Pick active topic indices: shared ones from the pairs, private ones
    from indices unused by either modality (so they are off elsewhere)."""
    shared = [[a for a, _, _ in cfg.shared_pairs], [b for _, b, _ in cfg.shared_pairs]]
    for side in shared:
        if len(set(side)) != len(side):
            raise ValueError("a topic may appear in at most one shared pair")
    used = set(shared[0]) | set(shared[1])
    private: list[list[int]] = [[], []]
    cursor = 0
    for m in range(2):
        picked = []
        while len(picked) < cfg.private_topics[m]:
            if cursor >= cfg.topic_counts[m]:
                raise ValueError(
                    "truncation too small for the requested shared and private topics"
                )
            if cursor not in used:
                picked.append(cursor)
                used.add(cursor)
            cursor += 1
        private[m] = picked
    return shared, private


def make_synthetic_scenario(cfg: ScenarioConfig, rng: np.random.Generator
                            ) -> tuple[ModelParams, MultiModalCorpus, list[LatentRecord]]:
    """Build ground-truth parameters and sample a corpus from them.

    The covariance is a correlation matrix whose cross-block carries the
    requested pair correlations; infeasible combinations (destroyed by
    the positive-definite projection) raise instead of silently drifting.
    """
    shared, private = _allocate_topics(cfg)
    layout = ModalityLayout(names=cfg.modalities, topic_counts=cfg.topic_counts)
    total = layout.total_topics

    corr = np.eye(total)
    off = layout.offsets
    for a, b, c in cfg.shared_pairs:
        corr[off[0] + a, off[1] + b] = c
        corr[off[1] + b, off[0] + a] = c
    sigma = nearest_correlation(corr)
    for a, b, c in cfg.shared_pairs:
        if abs(sigma[off[0] + a, off[1] + b] - c) > 0.05:
            raise ValueError(
                "requested correlations are not jointly positive definite; "
                "reduce the correlation strengths"
            )

    sticks: dict[str, StickWeights] = {}
    dictionaries: dict[str, TopicDictionary] = {}
    vocabularies: dict[str, Vocabulary] = {}
    for m_idx, name in enumerate(cfg.modalities):
        t = cfg.topic_counts[m_idx]
        actives = sorted(shared[m_idx] + private[m_idx])
        weights = np.zeros(t)
        raw = 0.75 ** np.arange(len(actives))
        weights[actives] = raw / raw.sum()
        v = fractions_from_weights(weights)
        sticks[name] = StickWeights(v=v, alpha=cfg.alpha, beta=cfg.beta,
                                    p=stick_product(v))
        w = cfg.vocab_sizes[m_idx]
        topics = rng.dirichlet(np.full(w, cfg.gamma), size=t)
        dictionaries[name] = TopicDictionary(modality=name, topics=topics, gamma=cfg.gamma)
        vocabularies[name] = Vocabulary(
            modality=name, terms=tuple(f"{name}-term-{i:04d}" for i in range(w))
        )

    params = ModelParams(
        layout=layout,
        sticks=sticks,
        dictionaries=dictionaries,
        prior=GaussianPrior(mu=np.zeros(total), sigma=sigma),
        vocabularies=vocabularies,
    )

    lengths = {name: cfg.doc_lengths[i] for i, name in enumerate(cfg.modalities)}
    documents, records = [], []
    for d in range(cfg.num_docs):
        doc, record = sample_document(params, lengths, rng, doc_id=f"doc-{d:05d}")
        documents.append(doc)
        records.append(record)
    corpus = MultiModalCorpus(layout=layout, vocabularies=vocabularies, documents=documents)
    return params, corpus, records

"""Perplexity evaluation: training fit and cross-modal document completion.

All likelihoods are plug-in mixture likelihoods with point proportions
and posterior-mean topics, applied identically to every compared model
so orderings are fair. Perplexity denominators are total token counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document, MultiModalCorpus
from .generative import ModelParams, expected_theta
from .inference import TrainConfig, TrainState
from .prediction import predict_document, predict_theta


@dataclass
class EvalReport:
    """Per-modality training perplexity and per-direction conditional
    test perplexity for one model."""

    model_id: str
    config_hash: str
    corpus_hash: str
    train_perplexity: dict[str, float] = field(default_factory=dict)
    conditional_perplexity: dict[str, float] = field(default_factory=dict)
    token_totals: dict[str, int] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {f"train_perplexity.{m}": v for m, v in sorted(self.train_perplexity.items())}
        out.update({f"conditional_perplexity.{d}": v
                    for d, v in sorted(self.conditional_perplexity.items())})
        return out

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "config_hash": self.config_hash,
            "corpus_hash": self.corpus_hash,
            "train_perplexity": dict(sorted(self.train_perplexity.items())),
            "conditional_perplexity": dict(sorted(self.conditional_perplexity.items())),
            "token_totals": dict(sorted(self.token_totals.items())),
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            model_id=data["model_id"],
            config_hash=data["config_hash"],
            corpus_hash=data["corpus_hash"],
            train_perplexity=dict(data.get("train_perplexity", {})),
            conditional_perplexity=dict(data.get("conditional_perplexity", {})),
            token_totals=dict(data.get("token_totals", {})),
        )


def doc_log_likelihood(doc: Document, theta: np.ndarray, model: ModelParams,
                       modality: str) -> float:
    """Sum over tokens of the log mixture probability; nonpositive."""
    idx, cnt = doc.token_arrays(modality)
    if not idx.size:
        return 0.0
    topics = model.dictionaries[modality].topics
    theta = np.asarray(theta, dtype=np.float64)
    mix = theta @ topics[:, idx]
    if np.any(mix <= 0):
        bad = int(idx[np.argmax(mix <= 0)])
        raise ValueError(
            f"document {doc.id!r}: token {bad} has zero mixture probability "
            f"in modality {modality!r}"
        )
    return float(cnt @ np.log(mix))


def train_perplexity(model: ModelParams, state: TrainState,
                     corpus: MultiModalCorpus, modality: str) -> float:
    """Exponentiated negative mean per-token log likelihood on the
    training documents, with each document's fitted plug-in proportions."""
    if len(state.docs) != len(corpus):
        raise ValueError("state and corpus hold different document counts")
    loglik = 0.0
    tokens = 0
    for doc, var in zip(corpus.documents, state.docs):
        n = doc.length(modality)
        if n == 0:
            continue
        loglik += doc_log_likelihood(doc, var.theta_hat(modality), model, modality)
        tokens += n
    if tokens == 0:
        raise ValueError(f"no tokens in modality {modality!r}")
    return float(np.exp(-loglik / tokens))


def conditional_perplexity(model: ModelParams, corpus: MultiModalCorpus,
                           target: str, observed: str,
                           config: TrainConfig | None = None) -> float:
    """Document-completion perplexity of the target modality given the
    observed one.

    Documents with an empty target modality are skipped (excluded from
    numerator and denominator); an empty observed modality is an error.
    """
    loglik = 0.0
    tokens = 0
    used = 0
    for doc in corpus.documents:
        n = doc.length(target)
        if n == 0:
            continue
        result = predict_document(doc, model, observed, target, config)
        loglik += doc_log_likelihood(doc, result.theta_predicted, model, target)
        tokens += n
        used += 1
    if used == 0:
        raise ValueError("every document was skipped; nothing to evaluate")
    return float(np.exp(-loglik / tokens))


def prior_mean_perplexity(model: ModelParams, corpus: MultiModalCorpus,
                          target: str) -> float:
    """Perplexity of the predictor that ignores the observed modality and
    uses the prior-mean weights for the target block."""
    mu_t = model.prior.mu[model.xi_block(target)]
    theta = predict_theta(mu_t, model, target)
    loglik = 0.0
    tokens = 0
    used = 0
    for doc in corpus.documents:
        n = doc.length(target)
        if n == 0:
            continue
        loglik += doc_log_likelihood(doc, theta, model, target)
        tokens += n
        used += 1
    if used == 0:
        raise ValueError("every document was skipped; nothing to evaluate")
    return float(np.exp(-loglik / tokens))


def evaluate_model(model: ModelParams, corpus: MultiModalCorpus,
                   model_id: str, config_hash: str,
                   train_perplexities: dict[str, float] | None = None,
                   config: TrainConfig | None = None) -> EvalReport:
    """Assemble an evaluation report for one model on a test corpus.

    Training perplexities come from the training run (they need fitted
    per-document proportions) and are passed through; conditional
    perplexities are computed here for every ordered modality pair.
    """
    report = EvalReport(
        model_id=model_id,
        config_hash=config_hash,
        corpus_hash=corpus.content_hash(),
        train_perplexity=dict(train_perplexities or {}),
    )
    names = model.layout.names
    for m in names:
        report.token_totals[m] = sum(doc.length(m) for doc in corpus.documents)
    for target in names:
        for observed in names:
            if target == observed:
                continue
            key = f"{target}|{observed}"
            report.conditional_perplexity[key] = conditional_perplexity(
                model, corpus, target, observed, config
            )
    return report


@dataclass
class ComparisonTable:
    """Per-model metric values with the strict best per column marked."""

    model_ids: list[str]
    metric_names: list[str]
    values: np.ndarray
    best: list[int | None]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        lines = ["model," + ",".join(self.metric_names)]
        for i, mid in enumerate(self.model_ids):
            cells = []
            for j in range(len(self.metric_names)):
                mark = "*" if self.best[j] == i else ""
                cells.append(f"{self.values[i, j]!r}{mark}")
            lines.append(mid + "," + ",".join(cells))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def compare_models(reports: list[EvalReport]) -> ComparisonTable:
    """Tabulate reports computed on one corpus; lower is better.

    A column's best marker goes to the strict minimum; ties leave the
    column without a winner. Reports from different corpora refuse to
    compare.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    hashes = {r.corpus_hash for r in reports}
    if len(hashes) != 1:
        raise ValueError("reports were computed on different corpora")
    metric_sets = [set(r.metrics()) for r in reports]
    if any(s != metric_sets[0] for s in metric_sets[1:]):
        raise ValueError("reports carry different metric sets")
    names = sorted(metric_sets[0])
    values = np.array([[r.metrics()[n] for n in names] for r in reports])
    best: list[int | None] = []
    for j in range(values.shape[1]):
        col = values[:, j]
        winner = int(np.argmin(col))
        best.append(winner if np.sum(col == col[winner]) == 1 else None)
    return ComparisonTable(
        model_ids=[r.model_id for r in reports],
        metric_names=names,
        values=values,
        best=best,
    )

"""Cross-modal prediction: infer weights from one modality, transfer to another.

Given a document observed in one modality, the local variational updates
are run on that modality alone (globals frozen, using only that block of
the covariance) to obtain its weight estimate. The weight estimate for a
missing modality is the standard Gaussian conditional mean through the
cross-covariance block, and the predicted topic proportions and word
distribution follow from the target modality's sticks and dictionary.
Only means are transferred; predictive variance is not modeled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .corpus import Document, ModalityLayout
from .generative import GaussianPrior, ModelParams, expected_theta
from .inference import (
    TrainConfig,
    elbo_xi,
    make_doc_variational,
    update_local,
    update_xi,
    _sigma_ops,
)


@dataclass
class PredictionResult:
    """Everything produced for one document and one target modality."""

    xi_observed: np.ndarray
    xi_predicted: np.ndarray
    theta_predicted: np.ndarray
    word_dist: np.ndarray

    def validate(self) -> None:
        for name, vec in (("theta_predicted", self.theta_predicted),
                          ("word_dist", self.word_dist)):
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-10:
                raise ValueError(f"{name} is not a probability vector")


def _restricted_model(model: ModelParams, observed: str) -> ModelParams:
    """Single-modality view of the model: the observed block of the prior
    plus that modality's sticks and dictionary."""
    blk = model.xi_block(observed)
    layout = ModalityLayout(names=(observed,),
                            topic_counts=(model.layout.topics(observed),))
    return ModelParams(
        layout=layout,
        sticks={observed: model.sticks[observed]},
        dictionaries={observed: model.dictionaries[observed]},
        prior=GaussianPrior(mu=model.prior.mu[blk].copy(),
                            sigma=model.prior.sigma[blk, blk].copy()),
    )


def infer_observed_xi(doc: Document, model: ModelParams, observed: str,
                      config: TrainConfig | None = None,
                      max_rounds: int = 200, tol: float = 1e-10
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Fit the observed modality's weight vector with globals frozen.

    Runs the training local updates (responsibilities, Gamma factors,
    weight ascent) restricted to the observed modality until the weight
    objective stops moving. Deterministic: the weight mean starts at the
    prior mean. Returns the converged weight mean and the plug-in topic
    proportions.
    """
    model.layout.index(observed)
    if doc.length(observed) == 0:
        raise ValueError(
            f"document {doc.id!r} has no tokens in observed modality {observed!r}"
        )
    config = config or TrainConfig()
    sub = _restricted_model(model, observed)
    var = make_doc_variational(doc, sub, rng=None)
    sigma_inv = _sigma_ops(sub.prior)[0]
    elog = {observed: sub.dictionaries[observed].expected_log_topics()}
    prev = -np.inf
    for _ in range(max_rounds):
        update_local(doc, var, sub, elog)
        update_xi(var, sub, config, sigma_inv)
        current = elbo_xi(var, sub, sigma_inv)
        if abs(current - prev) <= tol * (1.0 + abs(current)):
            break
        prev = current
    return var.xi_mean.copy(), var.theta_hat(observed)


def _block_indices(model: ModelParams, names: Sequence[str]) -> np.ndarray:
    idx: list[np.ndarray] = []
    for name in names:
        blk = model.xi_block(name)
        idx.append(np.arange(blk.start, blk.stop))
    return np.concatenate(idx)


def conditional_xi(xi_observed: np.ndarray, model: ModelParams,
                   target: str, observed: str | Sequence[str]) -> np.ndarray:
    """Conditional mean of the target block given observed block values.

    Computes ``mu_t + S_to S_oo^{-1} (xi_o - mu_o)`` from the stored
    covariance blocks. Several observed modalities may be passed; their
    blocks are concatenated. When the target is among the observed
    modalities the map is the identity. With a tied weight vector all
    modalities share one block, so the transfer is the identity as well.
    """
    observed_names = [observed] if isinstance(observed, str) else list(observed)
    model.layout.index(target)
    for name in observed_names:
        model.layout.index(name)
    xi_observed = np.asarray(xi_observed, dtype=np.float64)
    if model.tied_xi or target in observed_names:
        if xi_observed.shape[0] != model.xi_block(target).stop - model.xi_block(target).start:
            if not model.tied_xi:
                raise ValueError("observed vector length does not match the target block")
        return xi_observed.copy()
    obs_idx = _block_indices(model, observed_names)
    if xi_observed.shape[0] != obs_idx.size:
        raise ValueError(
            f"observed vector has length {xi_observed.shape[0]}, "
            f"expected {obs_idx.size}"
        )
    tgt = model.xi_block(target)
    sigma = model.prior.sigma
    mu = model.prior.mu
    sigma_oo = sigma[np.ix_(obs_idx, obs_idx)]
    sigma_ot = sigma[np.ix_(obs_idx, np.arange(tgt.start, tgt.stop))]
    factor = cho_factor(sigma_oo, lower=True)
    w = cho_solve(factor, sigma_ot).T
    return mu[tgt] + w @ (xi_observed - mu[obs_idx])


def predict_theta(xi_predicted: np.ndarray, model: ModelParams,
                  target: str) -> np.ndarray:
    """Topic proportions for the target modality from a weight estimate."""
    return expected_theta(xi_predicted, model.sticks[target])


def predict_word_dist(theta: np.ndarray, model: ModelParams,
                      target: str) -> np.ndarray:
    """Mixture word distribution ``sum_k theta_k eta_k`` over the target
    vocabulary."""
    topics = model.dictionaries[target].topics
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[0] != topics.shape[0]:
        raise ValueError("proportions length does not match the dictionary")
    return theta @ topics


def predict_document(doc: Document, model: ModelParams, observed: str,
                     target: str, config: TrainConfig | None = None
                     ) -> PredictionResult:
    """Full pipeline: infer observed weights, transfer, reconstruct."""
    xi_obs, _ = infer_observed_xi(doc, model, observed, config)
    xi_pred = conditional_xi(xi_obs, model, target, observed)
    theta = predict_theta(xi_pred, model, target)
    word_dist = predict_word_dist(theta, model, target)
    result = PredictionResult(
        xi_observed=xi_obs,
        xi_predicted=xi_pred,
        theta_predicted=theta,
        word_dist=word_dist,
    )
    result.validate()
    return result

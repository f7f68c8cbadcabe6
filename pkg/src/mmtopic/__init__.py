"""Correlated multi-modal topic modeling with shared/private factorization.

Subpackages by concern: :mod:`mmtopic.corpus` (data), :mod:`mmtopic.generative`
(parameters and forward sampling), :mod:`mmtopic.inference` (variational
training), :mod:`mmtopic.prediction` (cross-modal transfer),
:mod:`mmtopic.analysis` (shared/private identification),
:mod:`mmtopic.evaluation` (perplexity), :mod:`mmtopic.persistence`
(archives), :mod:`mmtopic.cli` (batch commands).
"""

from .corpus import (
    Document,
    ModalityLayout,
    MultiModalCorpus,
    Vocabulary,
    corpus_stats,
    load_corpus,
    split_corpus,
    write_corpus,
)
from .generative import (
    GaussianPrior,
    ModelParams,
    ScenarioConfig,
    StickWeights,
    TopicDictionary,
    expected_theta,
    make_synthetic_scenario,
    sample_document,
    sample_sticks,
)
from .inference import (
    DocVariational,
    ElboDecreaseError,
    TrainConfig,
    TrainState,
    elbo_total,
    elbo_xi,
    fit,
    grad_xi,
    init_state,
    update_local,
    update_mu_sigma,
    update_sticks,
    update_topics,
    update_xi,
)
from .prediction import (
    PredictionResult,
    conditional_xi,
    infer_observed_xi,
    predict_document,
    predict_theta,
    predict_word_dist,
)
from .analysis import (
    TopicAnalysis,
    alt_relevance_max,
    analyze_topics,
    correlation_matrix,
    cross_block,
    rank_topics,
    stick_report,
    top_words,
    visual_relevance,
)
from .evaluation import (
    EvalReport,
    compare_models,
    conditional_perplexity,
    doc_log_likelihood,
    evaluate_model,
    prior_mean_perplexity,
    train_perplexity,
)
from .persistence import load_model, save_model

__version__ = "0.1.0"

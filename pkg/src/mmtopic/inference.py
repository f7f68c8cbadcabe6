"""Truncated variational inference: local and global updates, ELBO, training.

The variational family uses, per document, a diagonal Gaussian over the
concatenated weight vector (mean ``xi_mean``, variance ``xi_var``),
independent Gamma factors over the unnormalized topic weights, and
multinomial responsibilities per distinct token. Topic dictionaries get
Dirichlet factors; stick fractions and the concentrations alpha/beta are
point estimates; the Gaussian (mu, sigma) is re-estimated from moments.

Two structural conventions keep the whole sweep monotone on a single
objective:

* Gamma factors are gauge-fixed so the expected weights of each modality
  sum to exactly 1 (the model is invariant to trading a common weight
  scale against a constant shift of the Gaussian block, so this costs no
  expressiveness). The rate of each factor is the expected exponentiated
  negative weight plus a per-document normalization constant solved by a
  monotone root find. Under this gauge the normalized expected weights
  that enter the bound equal the raw expected weights.
* Stick fractions are updated by bounded 1-D ascent on the bound with
  the Gamma factors profiled out (their conjugate response to a
  candidate is recomputed and, on acceptance, written back), with every
  candidate gated on actually improving the objective.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize_scalar
from scipy.special import digamma, gammaln, xlogy

from .corpus import Document, MultiModalCorpus
from .generative import (
    MASK_EPS,
    GaussianPrior,
    ModelParams,
    StickWeights,
    TopicDictionary,
    stick_product,
)

logger = logging.getLogger(__name__)

_V_LO = 1e-6
_V_HI = 1.0 - 1e-6
_EXP_CLIP = 700.0


class ElboDecreaseError(RuntimeError):
    """The bound decreased beyond slack during a sweep (an invariant breach)."""

    def __init__(self, sweep: int, previous: float, current: float):
        super().__init__(
            f"bound decreased at sweep {sweep}: {previous!r} -> {current!r}"
        )
        self.sweep = sweep
        self.previous = previous
        self.current = current


@dataclass
class TrainConfig:
    """Training settings; every field has a usable default.

    ``tolerance`` is the relative bound change that counts as converged.
    The line-search settings implement backtracking with an Armijo
    acceptance test; ``jitter_scale`` scales the floor added to keep the
    covariance invertible.
    """

    max_sweeps: int = 100
    tolerance: float = 1e-4
    max_inner_steps: int = 50
    max_backtracks: int = 30
    backtrack_shrink: float = 0.5
    armijo_c: float = 1e-4
    jitter_scale: float = 1e-8
    seed: int = 0
    tied_xi: bool = False
    gamma: float = 0.1
    init_alpha: float = 1.0
    init_beta: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positives = {
            "max_sweeps": self.max_sweeps,
            "tolerance": self.tolerance,
            "max_inner_steps": self.max_inner_steps,
            "max_backtracks": self.max_backtracks,
            "backtrack_shrink": self.backtrack_shrink,
            "armijo_c": self.armijo_c,
            "jitter_scale": self.jitter_scale,
            "gamma": self.gamma,
            "init_alpha": self.init_alpha,
            "init_beta": self.init_beta,
            "workers": self.workers,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"config field {name} must be positive, got {value!r}")
        if self.tolerance >= 1:
            raise ValueError("tolerance must be below 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class DocVariational:
    """Per-document variational factors plus cached token views."""

    doc_id: str
    xi_mean: np.ndarray
    xi_var: np.ndarray
    y_shape: dict[str, np.ndarray]
    y_rate: dict[str, np.ndarray]
    resp: dict[str, np.ndarray]
    tokens: dict[str, np.ndarray]
    counts: dict[str, np.ndarray]
    line_search_failed: bool = False

    def expected_y(self, modality: str) -> np.ndarray:
        shape, rate = self.y_shape[modality], self.y_rate[modality]
        return np.where(shape > 0, shape / rate, 0.0)

    def theta_hat(self, modality: str) -> np.ndarray:
        """Normalized expected topic weights (the plug-in proportions)."""
        y = self.expected_y(modality)
        total = y.sum()
        if total <= 0:
            raise ValueError(f"document {self.doc_id!r}: all topic weights are zero")
        return y / total

    def validate(self) -> None:
        if np.any(self.xi_var <= 0) or not np.all(np.isfinite(self.xi_var)):
            raise ValueError(f"document {self.doc_id!r}: variances must be positive")
        if not np.all(np.isfinite(self.xi_mean)):
            raise ValueError(f"document {self.doc_id!r}: non-finite mean")
        for m, r in self.resp.items():
            if r.size and np.max(np.abs(r.sum(axis=1) - 1.0)) > 1e-10:
                raise ValueError(
                    f"document {self.doc_id!r}, modality {m!r}: responsibilities "
                    "must sum to 1"
                )
        for m in self.y_shape:
            shape, rate = self.y_shape[m], self.y_rate[m]
            on = shape > 0
            if np.any(rate[on] <= 0):
                raise ValueError(
                    f"document {self.doc_id!r}, modality {m!r}: nonpositive rate"
                )


@dataclass
class TrainState:
    """Model point estimates plus all per-document factors and the trace."""

    params: ModelParams
    docs: list[DocVariational]
    elbo_trace: list[float]
    perplexity_trace: dict[str, list[float]]
    config: TrainConfig
    corpus_hash: str
    sweep_seconds: list[float] = field(default_factory=list)

    def validate(self) -> None:
        self.params.validate()
        for m in self.params.layout.names:
            self.params.sticks[m].validate()
            self.params.dictionaries[m].validate()
        eigmin = float(np.linalg.eigvalsh(self.params.prior.sigma).min())
        if eigmin <= 0:
            raise ValueError(f"covariance not positive definite (eigmin={eigmin!r})")
        for var in self.docs:
            var.validate()


# ---------------------------------------------------------------------------
# gauge-fixed Gamma factors

def _solve_unit_mean(shapes: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Per-row offsets ``k`` with ``sum_j shapes[i,j] / (rates[i,j] + k_i) = 1``.

    The left side is convex and decreasing in ``k`` on the domain where
    all denominators stay positive, so Newton from a point left of the
    root converges monotonically without overshoot.
    """
    shapes = np.atleast_2d(np.asarray(shapes, dtype=np.float64))
    rates = np.atleast_2d(np.asarray(rates, dtype=np.float64))
    totals = shapes.sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError("each row needs positive total shape")
    start = totals - rates.max(axis=1)
    pole = -rates.min(axis=1)
    start = np.maximum(start, pole + 1e-12 * (1.0 + np.abs(pole)))
    kappa = start
    for _ in range(200):
        denom = rates + kappa[:, None]
        quot = shapes / denom
        g = quot.sum(axis=1) - 1.0
        if np.all(np.abs(g) < 1e-13):
            break
        gprime = -(quot / denom).sum(axis=1)
        kappa = kappa - g / gprime
    else:
        raise FloatingPointError("unit-mean normalization did not converge")
    return kappa


def _solve_unit_mean_scalar(shapes: np.ndarray, rates: np.ndarray) -> float:
    """Single-row fast path of :func:`_solve_unit_mean` (same iteration)."""
    total = shapes.sum()
    if total <= 0:
        raise ValueError("each row needs positive total shape")
    pole = -rates.min()
    kappa = max(total - rates.max(), pole + 1e-12 * (1.0 + abs(pole)))
    for _ in range(200):
        denom = rates + kappa
        quot = shapes / denom
        g = quot.sum() - 1.0
        if abs(g) < 1e-13:
            return kappa
        kappa -= g / -(quot / denom).sum()
    raise FloatingPointError("unit-mean normalization did not converge")


def _gamma_update(sticks: StickWeights, n: np.ndarray,
                  e_neg_xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate Gamma update under the unit-mean gauge.

    Shapes are prior shape plus expected assigned counts; rates are the
    expected exponentiated negative weights plus the per-document
    normalization constant. Switched-off topics keep a point mass at 0.
    """
    active = sticks.active()
    t = sticks.truncation
    shape = np.zeros(t)
    rate = np.ones(t)
    a = sticks.beta * sticks.p[active] + n[active]
    r = e_neg_xi[active]
    kappa = _solve_unit_mean_scalar(a, r)
    shape[active] = a
    rate[active] = r + kappa
    return shape, rate


def _expected_exp_neg(xi_mean: np.ndarray, xi_var: np.ndarray) -> np.ndarray:
    """Log-normal moment E[exp(-x)] = exp(-mean + var / 2), overflow-clipped."""
    return np.exp(np.minimum(-xi_mean + 0.5 * xi_var, _EXP_CLIP))


# ---------------------------------------------------------------------------
# document factors

def make_doc_variational(doc: Document, params: ModelParams,
                         rng: np.random.Generator | None = None) -> DocVariational:
    """Fresh per-document factors: uniform responsibilities over active
    topics, unit variances, and gauge-consistent Gamma factors.

    With a generator the mean starts at N(0, 0.1 I); without one it
    starts at the prior mean (the deterministic choice used when
    inferring weights for held-out documents).
    """
    k = params.xi_dim
    if rng is not None:
        xi_mean = rng.normal(0.0, np.sqrt(0.1), size=k)
    else:
        xi_mean = params.prior.mu.copy()
    xi_var = np.ones(k)
    y_shape: dict[str, np.ndarray] = {}
    y_rate: dict[str, np.ndarray] = {}
    resp: dict[str, np.ndarray] = {}
    tokens: dict[str, np.ndarray] = {}
    counts: dict[str, np.ndarray] = {}
    for m in params.layout.names:
        sticks = params.sticks[m]
        active = sticks.active()
        t = sticks.truncation
        idx, cnt = doc.token_arrays(m)
        tokens[m], counts[m] = idx, cnt
        r = np.zeros((idx.size, t))
        if idx.size:
            r[:, active] = 1.0 / active.sum()
        resp[m] = r
        n = r.T @ cnt if idx.size else np.zeros(t)
        blk = params.xi_block(m)
        shape, rate = _gamma_update(sticks, n, _expected_exp_neg(xi_mean[blk], xi_var[blk]))
        y_shape[m], y_rate[m] = shape, rate
    return DocVariational(
        doc_id=doc.id, xi_mean=xi_mean, xi_var=xi_var,
        y_shape=y_shape, y_rate=y_rate, resp=resp, tokens=tokens, counts=counts,
    )


def update_local(doc: Document, var: DocVariational, params: ModelParams,
                 elog_topics: dict[str, np.ndarray] | None = None) -> DocVariational:
    """One pass of responsibility and Gamma-factor updates for a document.

    Responsibilities are proportional to the exponentiated expected log
    word probability plus expected log topic weight; Gamma shapes become
    prior shape plus expected assigned counts, with rates re-solved on
    the unit-mean gauge. Both steps are exact coordinate updates, so the
    full bound cannot decrease. The input object is updated in place and
    returned.
    """
    if doc.id != var.doc_id:
        raise ValueError("document and variational state ids disagree")
    for m in params.layout.names:
        sticks = params.sticks[m]
        active = sticks.active()
        t = sticks.truncation
        idx, cnt = var.tokens[m], var.counts[m]
        if idx.size:
            elog = (elog_topics[m] if elog_topics is not None
                    else params.dictionaries[m].expected_log_topics())
            shape, rate = var.y_shape[m], var.y_rate[m]
            elog_y = np.full(t, -np.inf)
            on = np.nonzero(active)[0]
            elog_y[on] = digamma(shape[on]) - np.log(rate[on])
            logw = elog[:, idx].T + elog_y[None, :]
            logw -= logw.max(axis=1, keepdims=True)
            w = np.exp(logw)
            w[:, ~active] = 0.0
            var.resp[m] = w / w.sum(axis=1, keepdims=True)
            n = var.resp[m].T @ cnt
        else:
            n = np.zeros(t)
        blk = params.xi_block(m)
        e_neg = _expected_exp_neg(var.xi_mean[blk], var.xi_var[blk])
        var.y_shape[m], var.y_rate[m] = _gamma_update(sticks, n, e_neg)
    return var


# ---------------------------------------------------------------------------
# the weight-vector objective and its gradient

def _sigma_ops(prior: GaussianPrior) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse, its diagonal and the log determinant of the covariance."""
    try:
        factor = cho_factor(prior.sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"covariance is not positive definite: {exc}") from exc
    sigma_inv = cho_solve(factor, np.eye(prior.dim))
    sigma_inv = (sigma_inv + sigma_inv.T) / 2.0
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return sigma_inv, np.diag(sigma_inv).copy(), logdet


def elbo_xi_terms(xi_mean: np.ndarray, xi_var: np.ndarray, mu: np.ndarray,
                  sigma_inv: np.ndarray, blocks: list[slice],
                  beta_ps: list[np.ndarray], thetas: list[np.ndarray]) -> float:
    """The weight-dependent part of the bound, given raw ingredients.

    Terms: minus the stick-weighted mean, minus expected weights times
    the log-normal moment of the negative weight, the Gaussian quadratic
    and diagonal penalties, and the variance entropy.
    """
    if np.any(xi_var <= 0):
        raise ValueError("variances must be positive")
    e_neg = _expected_exp_neg(xi_mean, xi_var)
    val = 0.0
    for blk, bp, th in zip(blocks, beta_ps, thetas):
        val -= float(bp @ xi_mean[blk])
        val -= float(th @ e_neg[blk])
    d = xi_mean - mu
    val -= 0.5 * float(d @ sigma_inv @ d)
    val -= 0.5 * float(np.diag(sigma_inv) @ xi_var)
    val += 0.5 * float(np.log(xi_var).sum())
    return val


def grad_xi_terms(xi_mean: np.ndarray, xi_var: np.ndarray, mu: np.ndarray,
                  sigma_inv: np.ndarray, blocks: list[slice],
                  beta_ps: list[np.ndarray], thetas: list[np.ndarray]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`elbo_xi_terms` in the mean and variance.

    The log-normal moment couples the variance into the weight term, so
    that term appears (negatively) in the variance gradient as well.
    """
    if np.any(xi_var <= 0):
        raise ValueError("variances must be positive")
    e_neg = _expected_exp_neg(xi_mean, xi_var)
    g_mean = np.zeros_like(xi_mean)
    g_var = np.zeros_like(xi_var)
    for blk, bp, th in zip(blocks, beta_ps, thetas):
        coupled = th * e_neg[blk]
        g_mean[blk] += -bp + coupled
        g_var[blk] += -0.5 * coupled
    g_mean -= sigma_inv @ (xi_mean - mu)
    g_var += -0.5 * np.diag(sigma_inv) + 0.5 / xi_var
    return g_mean, g_var


def _xi_context(var: DocVariational, params: ModelParams
                ) -> tuple[list[slice], list[np.ndarray], list[np.ndarray]]:
    blocks, beta_ps, thetas = [], [], []
    for m in params.layout.names:
        sticks = params.sticks[m]
        blocks.append(params.xi_block(m))
        beta_ps.append(sticks.beta * sticks.p)
        thetas.append(var.theta_hat(m))
    return blocks, beta_ps, thetas


def elbo_xi(var: DocVariational, params: ModelParams,
            sigma_inv: np.ndarray | None = None) -> float:
    """Weight-dependent bound terms for one document's current factors."""
    if sigma_inv is None:
        sigma_inv = _sigma_ops(params.prior)[0]
    blocks, beta_ps, thetas = _xi_context(var, params)
    return elbo_xi_terms(var.xi_mean, var.xi_var, params.prior.mu, sigma_inv,
                         blocks, beta_ps, thetas)


def grad_xi(var: DocVariational, params: ModelParams,
            sigma_inv: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`elbo_xi` in the mean and the variance vector.

    The covariance inverse is computed once per call (or passed in); it
    stays fixed during a whole ascent.
    """
    if sigma_inv is None:
        sigma_inv = _sigma_ops(params.prior)[0]
    blocks, beta_ps, thetas = _xi_context(var, params)
    return grad_xi_terms(var.xi_mean, var.xi_var, params.prior.mu, sigma_inv,
                         blocks, beta_ps, thetas)


def update_xi(var: DocVariational, params: ModelParams,
              config: TrainConfig | None = None,
              sigma_inv: np.ndarray | None = None) -> DocVariational:
    """Backtracking gradient ascent on the weight objective.

    The variance is optimized in the log domain, which keeps it positive
    structurally. Steps are accepted only under an Armijo test, so the
    objective never decreases; if no step length is acceptable the input
    point is kept and ``line_search_failed`` is set.
    """
    config = config or TrainConfig()
    if sigma_inv is None:
        sigma_inv = _sigma_ops(params.prior)[0]
    blocks, beta_ps, thetas = _xi_context(var, params)
    mu = params.prior.mu

    def value(mean: np.ndarray, logv: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.exp(logv)
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                return -np.inf
            out = elbo_xi_terms(mean, v, mu, sigma_inv, blocks, beta_ps, thetas)
        return out if np.isfinite(out) else -np.inf

    x_mean = var.xi_mean.copy()
    x_logv = np.log(var.xi_var)
    f_cur = value(x_mean, x_logv)
    if not np.isfinite(f_cur):
        raise ValueError(f"document {var.doc_id!r}: objective not finite at start")

    failed = False
    for _ in range(config.max_inner_steps):
        g_mean, g_var = grad_xi_terms(x_mean, np.exp(x_logv), mu, sigma_inv,
                                      blocks, beta_ps, thetas)
        g_logv = g_var * np.exp(x_logv)
        if max(np.max(np.abs(g_mean)), np.max(np.abs(g_logv))) < 1e-12:
            break
        gnorm_sq = float(g_mean @ g_mean + g_logv @ g_logv)
        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            cand_mean = x_mean + step * g_mean
            cand_logv = x_logv + step * g_logv
            f_new = value(cand_mean, cand_logv)
            if f_new >= f_cur + config.armijo_c * step * gnorm_sq:
                accepted = True
                break
            step *= config.backtrack_shrink
        if not accepted:
            failed = True
            break
        progress = f_new - f_cur
        x_mean, x_logv, f_cur = cand_mean, cand_logv, f_new
        if progress <= 1e-12 * (1.0 + abs(f_cur)):
            break

    var.xi_mean = x_mean
    var.xi_var = np.exp(x_logv)
    var.line_search_failed = failed
    if failed:
        logger.warning("document %s: line search found no ascent step", var.doc_id)
    return var


def _batch_update_xi(chunk: list[DocVariational], params: ModelParams,
                     config: TrainConfig, sigma_inv: np.ndarray,
                     diag_inv: np.ndarray) -> None:
    """The ascent of :func:`update_xi` run in lockstep over many documents.

    Per-document trajectories are independent, so this computes the same
    backtracking line search as the scalar path, just on stacked arrays
    with per-document step sizes and freeze masks.
    """
    d = len(chunk)
    mu = params.prior.mu
    names = list(params.layout.names)
    blocks = [params.xi_block(m) for m in names]
    beta_ps = [params.sticks[m].beta * params.sticks[m].p for m in names]
    thetas = [np.stack([v.theta_hat(m) for v in chunk]) for m in names]

    x_mean = np.stack([v.xi_mean for v in chunk])
    x_logv = np.log(np.stack([v.xi_var for v in chunk]))

    def value(mean: np.ndarray, logv: np.ndarray,
              rows: np.ndarray | None = None) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.exp(logv)
            e_neg = np.exp(np.minimum(-mean + 0.5 * v, _EXP_CLIP))
            f = np.zeros(mean.shape[0])
            for blk, bp, th in zip(blocks, beta_ps, thetas):
                if rows is not None:
                    th = th[rows]
                f -= mean[:, blk] @ bp
                f -= (th * e_neg[:, blk]).sum(axis=1)
            dev = mean - mu
            f -= 0.5 * ((dev @ sigma_inv) * dev).sum(axis=1)
            f -= 0.5 * v @ diag_inv
            f += 0.5 * np.log(v).sum(axis=1)
        f[~np.isfinite(f)] = -np.inf
        return f

    def gradient(mean: np.ndarray, logv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.exp(logv)
        e_neg = np.exp(np.minimum(-mean + 0.5 * v, _EXP_CLIP))
        g_mean = np.zeros_like(mean)
        g_var = np.zeros_like(mean)
        for blk, bp, th in zip(blocks, beta_ps, thetas):
            coupled = th * e_neg[:, blk]
            g_mean[:, blk] += -bp + coupled
            g_var[:, blk] += -0.5 * coupled
        g_mean -= (mean - mu) @ sigma_inv
        g_var += -0.5 * diag_inv + 0.5 / v
        return g_mean, g_var * v

    f_cur = value(x_mean, x_logv)
    if np.any(~np.isfinite(f_cur)):
        bad = chunk[int(np.argmax(~np.isfinite(f_cur)))].doc_id
        raise ValueError(f"document {bad!r}: objective not finite at start")
    live = np.ones(d, dtype=bool)
    failed = np.zeros(d, dtype=bool)

    for _ in range(config.max_inner_steps):
        if not live.any():
            break
        g_mean, g_logv = gradient(x_mean, x_logv)
        gmax = np.maximum(np.max(np.abs(g_mean), axis=1), np.max(np.abs(g_logv), axis=1))
        live &= gmax >= 1e-12
        if not live.any():
            break
        gnorm_sq = (g_mean * g_mean).sum(axis=1) + (g_logv * g_logv).sum(axis=1)
        step = np.ones(d)
        pending = live.copy()
        f_new = f_cur.copy()
        cand_mean, cand_logv = x_mean.copy(), x_logv.copy()
        for _ in range(config.max_backtracks):
            if not pending.any():
                break
            idx_pending = np.nonzero(pending)[0]
            trial_mean = x_mean[pending] + step[pending, None] * g_mean[pending]
            trial_logv = x_logv[pending] + step[pending, None] * g_logv[pending]
            f_trial = value(trial_mean, trial_logv, rows=idx_pending)
            ok = f_trial >= f_cur[pending] + config.armijo_c * step[pending] * gnorm_sq[pending]
            idx = np.nonzero(pending)[0]
            good = idx[ok]
            cand_mean[good] = trial_mean[ok]
            cand_logv[good] = trial_logv[ok]
            f_new[good] = f_trial[ok]
            pending[good] = False
            step[idx[~ok]] *= config.backtrack_shrink
        failed |= pending
        live &= ~pending
        moved = live.copy()
        progress = f_new - f_cur
        x_mean[moved] = cand_mean[moved]
        x_logv[moved] = cand_logv[moved]
        f_cur[moved] = f_new[moved]
        live &= progress > 1e-12 * (1.0 + np.abs(f_cur))

    for i, var in enumerate(chunk):
        var.xi_mean = x_mean[i].copy()
        var.xi_var = np.exp(x_logv[i])
        var.line_search_failed = bool(failed[i])


# ---------------------------------------------------------------------------
# global updates

def update_mu_sigma(docs: list[DocVariational],
                    jitter_scale: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Moment re-estimation of the Gaussian over document weight vectors.

    Mean of the per-document means; covariance of the means plus the
    average diagonal variance. A jitter multiple of the identity is added
    when the smallest eigenvalue falls below ``jitter_scale`` times the
    mean diagonal, which keeps the inverse well defined.
    """
    if not docs:
        raise ValueError("need at least one document")
    means = np.stack([v.xi_mean for v in docs])
    variances = np.stack([v.xi_var for v in docs])
    mu = means.mean(axis=0)
    dev = means - mu
    sigma = dev.T @ dev / len(docs) + np.diag(variances.mean(axis=0))
    sigma = (sigma + sigma.T) / 2.0
    k = sigma.shape[0]
    floor = jitter_scale * float(np.trace(sigma)) / k
    eigmin = float(np.linalg.eigvalsh(sigma).min())
    if eigmin < floor:
        sigma = sigma + (floor - eigmin) * np.eye(k)
    return mu, sigma


def update_topics(corpus: MultiModalCorpus, docs: list[DocVariational],
                  params: ModelParams) -> dict[str, TopicDictionary]:
    """Dirichlet re-estimation of every modality's topics.

    Concentrations are the symmetric prior plus expected word-topic
    counts; point topics are the Dirichlet means.
    """
    out: dict[str, TopicDictionary] = {}
    for m in params.layout.names:
        current = params.dictionaries[m]
        t, w = current.num_topics, current.vocab_size
        lam = np.full((t, w), current.gamma)
        for var in docs:
            idx = var.tokens[m]
            if idx.size:
                lam[:, idx] += (var.resp[m] * var.counts[m][:, None]).T
        topics = lam / lam.sum(axis=1, keepdims=True)
        out[m] = TopicDictionary(modality=m, topics=topics, gamma=current.gamma,
                                 concentration=lam)
    return out


def _stick_objective_stats(docs: list[DocVariational], params: ModelParams,
                           modality: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed per-document ingredients for the stick objective: assigned
    counts, expected exponentiated negative weights, and weight means."""
    blk = params.xi_block(modality)
    t = params.sticks[modality].truncation
    n_mat = np.zeros((len(docs), t))
    r_mat = np.zeros((len(docs), t))
    xi_mat = np.zeros((len(docs), t))
    for i, var in enumerate(docs):
        if var.tokens[modality].size:
            n_mat[i] = var.resp[modality].T @ var.counts[modality]
        r_mat[i] = _expected_exp_neg(var.xi_mean[blk], var.xi_var[blk])
        xi_mat[i] = var.xi_mean[blk]
    return n_mat, r_mat, xi_mat


def update_sticks(docs: list[DocVariational], params: ModelParams,
                  modality: str) -> StickWeights:
    """Point re-estimation of one modality's stick fractions and
    concentrations by bounded 1-D ascent, with the documents' Gamma
    factors profiled out.

    Every candidate is evaluated with the Gamma factors' conjugate
    response already applied; candidates are accepted only when the
    objective improves, and the winning response is written back into
    ``docs``, so the full bound cannot decrease. Switched-off topics are
    left untouched.
    """
    sticks = params.sticks[modality]
    t = sticks.truncation
    d = len(docs)
    if d == 0:
        raise ValueError("need at least one document")
    active = sticks.active()
    on = np.nonzero(active)[0]
    n_mat, r_mat, xi_mat = _stick_objective_stats(docs, params, modality)
    n_on, r_on = n_mat[:, on], r_mat[:, on]
    xi_col_sums = xi_mat.sum(axis=0)

    def profiled(v: np.ndarray, alpha: float, beta: float) -> float:
        p = stick_product(v)
        shapes = beta * p[on][None, :] + n_on
        kappa = _solve_unit_mean(shapes, r_on)
        rates = r_on + kappa[:, None]
        val = float(kappa.sum())
        val += float(np.sum(gammaln(shapes) - shapes * np.log(rates)))
        val -= d * float(gammaln(beta * p[on]).sum())
        val -= beta * float(p @ xi_col_sums)
        val += (t - 1) * np.log(alpha) + (alpha - 1) * float(np.log1p(-v[:-1]).sum())
        return val

    v = sticks.v.copy()
    alpha, beta = sticks.alpha, sticks.beta
    current = profiled(v, alpha, beta)

    for k in range(t - 1):
        if not active[k]:
            continue

        def negated(x: float, k: int = k) -> float:
            trial = v.copy()
            trial[k] = x
            return -profiled(trial, alpha, beta)

        res = minimize_scalar(negated, bounds=(_V_LO, _V_HI), method="bounded",
                              options={"xatol": 1e-8})
        if res.success and -res.fun > current:
            v[k] = float(res.x)
            current = -res.fun

    log_rest = float(np.log1p(-v[:-1]).sum())
    if log_rest < 0:
        cand_alpha = min(max((t - 1) / (-log_rest), 1e-3), 1e3)
        cand_val = profiled(v, cand_alpha, beta)
        if cand_val > current:
            alpha, current = cand_alpha, cand_val

    res = minimize_scalar(lambda b: -profiled(v, alpha, b), bounds=(1e-3, 1e4),
                          method="bounded", options={"xatol": 1e-8})
    if res.success and -res.fun > current:
        beta = float(res.x)
        current = -res.fun

    # write the profiled Gamma response back so the accepted objective is
    # the bound the documents actually carry
    p = stick_product(v)
    shapes = beta * p[on][None, :] + n_on
    kappa = _solve_unit_mean(shapes, r_on)
    rates = r_on + kappa[:, None]
    for i, var in enumerate(docs):
        shape_full = np.zeros(t)
        rate_full = np.ones(t)
        shape_full[on] = shapes[i]
        rate_full[on] = rates[i]
        var.y_shape[modality] = shape_full
        var.y_rate[modality] = rate_full
    return StickWeights(v=v, alpha=alpha, beta=beta)


# ---------------------------------------------------------------------------
# the full bound

def _gamma_entropy(shape: np.ndarray, rate: np.ndarray) -> np.ndarray:
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def elbo_terms(corpus: MultiModalCorpus, state: TrainState) -> dict[str, float]:
    """The full bound, split into named term groups.

    Keys: ``words`` (expected word log likelihood including the
    normalizer bound), ``resp_entropy``, ``y`` (Gamma prior plus
    entropy), ``xi`` (Gaussian prior plus entropy), ``topics`` (Dirichlet
    prior minus factor), ``sticks`` (truncated stick prior).
    """
    params = state.params
    if len(corpus) != len(state.docs):
        raise ValueError("corpus and state hold different document counts")
    k_dim = params.xi_dim
    sigma_inv, diag_inv, logdet = _sigma_ops(params.prior)
    mu = params.prior.mu
    elogs = {m: params.dictionaries[m].expected_log_topics()
             for m in params.layout.names}

    words = resp_entropy = y_terms = xi_terms_total = 0.0
    for var in state.docs:
        dvec = var.xi_mean - mu
        xi_terms_total += (
            -0.5 * logdet
            - 0.5 * float(dvec @ sigma_inv @ dvec)
            - 0.5 * float(diag_inv @ var.xi_var)
            + 0.5 * float(np.log(var.xi_var).sum())
            + 0.5 * k_dim
        )
        for m in params.layout.names:
            sticks = params.sticks[m]
            active = sticks.active()
            on = np.nonzero(active)[0]
            shape, rate = var.y_shape[m][on], var.y_rate[m][on]
            blk = params.xi_block(m)
            e_neg = _expected_exp_neg(var.xi_mean[blk], var.xi_var[blk])[on]
            e_y = shape / rate
            elog_y = digamma(shape) - np.log(rate)
            s = sticks.beta * sticks.p[on]
            y_terms += float(np.sum(
                -s * var.xi_mean[blk][on] + (s - 1.0) * elog_y
                - e_neg * e_y - gammaln(s)
            ))
            y_terms += float(np.sum(_gamma_entropy(shape, rate)))
            idx, cnt = var.tokens[m], var.counts[m]
            if idx.size:
                resp = var.resp[m]
                n_on = (resp.T @ cnt)[on]
                words += float(n_on @ elog_y)
                elog_slice = elogs[m][:, idx].T
                safe = np.where(resp > 0, elog_slice, 0.0)
                words += float(np.sum(cnt[:, None] * resp * safe))
                words -= float(cnt.sum()) * float(np.log(e_y.sum()))
                resp_entropy -= float(np.sum(cnt[:, None] * xlogy(resp, resp)))

    topics_total = 0.0
    for m in params.layout.names:
        dct = params.dictionaries[m]
        if dct.concentration is None:
            raise ValueError(
                f"modality {m!r}: dictionary carries no Dirichlet factor; "
                "the bound is only defined for trained states"
            )
        lam = dct.concentration
        w = dct.vocab_size
        elog = elogs[m]
        gamma = dct.gamma
        prior = (gammaln(w * gamma) - w * gammaln(gamma)
                 + (gamma - 1.0) * elog.sum(axis=1))
        factor = (gammaln(lam.sum(axis=1)) - gammaln(lam).sum(axis=1)
                  + np.sum((lam - 1.0) * elog, axis=1))
        topics_total += float(np.sum(prior - factor))

    sticks_total = 0.0
    for m in params.layout.names:
        st = params.sticks[m]
        frac = np.minimum(st.v[:-1], 1.0 - 1e-15)
        sticks_total += (st.truncation - 1) * np.log(st.alpha)
        sticks_total += (st.alpha - 1.0) * float(np.log1p(-frac).sum())

    return {
        "words": words,
        "resp_entropy": resp_entropy,
        "y": y_terms,
        "xi": xi_terms_total,
        "topics": topics_total,
        "sticks": sticks_total,
    }


def elbo_total(corpus: MultiModalCorpus, state: TrainState) -> float:
    """The full variational lower bound; raises if it is not finite."""
    total = float(sum(elbo_terms(corpus, state).values()))
    if not np.isfinite(total):
        raise FloatingPointError("bound is not finite; a factor has degenerated")
    return total


# ---------------------------------------------------------------------------
# initialization and the training loop

def init_state(corpus: MultiModalCorpus, config: TrainConfig,
               rng: np.random.Generator) -> TrainState:
    """Deterministic-in-seed initial state.

    Dictionaries start at smoothed empirical frequencies with a little
    Dirichlet noise, weight means at N(0, 0.1 I), variances at 1, stick
    fractions at the prior mean 1/(1 + alpha) with the last forced to 1,
    and the Gaussian at (0, I).
    """
    if len(corpus) == 0:
        raise ValueError("cannot initialize from an empty corpus")
    layout = corpus.layout
    if any(t < 2 for t in layout.topic_counts):
        raise ValueError("truncation levels must be at least 2")
    if config.tied_xi and len(set(layout.topic_counts)) != 1:
        raise ValueError("tied weight vector requires equal truncation levels")

    dictionaries: dict[str, TopicDictionary] = {}
    sticks: dict[str, StickWeights] = {}
    for m in layout.names:
        w = corpus.vocabularies[m].size
        t = layout.topics(m)
        totals = np.zeros(w)
        for doc in corpus.documents:
            idx, cnt = doc.token_arrays(m)
            totals[idx] += cnt
        n_total = totals.sum()
        freq = (totals + 1.0) / (n_total + w)
        rows = np.empty((t, w))
        for k in range(t):
            rows[k] = 0.9 * freq + 0.1 * rng.dirichlet(np.ones(w))
        lam = config.gamma + (max(n_total, float(w)) / t) * rows
        topics = lam / lam.sum(axis=1, keepdims=True)
        dictionaries[m] = TopicDictionary(modality=m, topics=topics,
                                          gamma=config.gamma, concentration=lam)
        v = np.full(t, 1.0 / (1.0 + config.init_alpha))
        v[-1] = 1.0
        sticks[m] = StickWeights(v=v, alpha=config.init_alpha, beta=config.init_beta)

    k_dim = layout.topic_counts[0] if config.tied_xi else layout.total_topics
    params = ModelParams(
        layout=layout,
        sticks=sticks,
        dictionaries=dictionaries,
        prior=GaussianPrior(mu=np.zeros(k_dim), sigma=np.eye(k_dim)),
        tied_xi=config.tied_xi,
        vocabularies=corpus.vocabularies,
    )
    docs = [make_doc_variational(doc, params, rng) for doc in corpus.documents]
    return TrainState(
        params=params,
        docs=docs,
        elbo_trace=[],
        perplexity_trace={m: [] for m in layout.names},
        config=config,
        corpus_hash=corpus.content_hash(),
    )


def _plugin_perplexity(state: TrainState, modality: str) -> float:
    """Training perplexity of the current point model with plug-in
    proportions, tracked per sweep."""
    topics = state.params.dictionaries[modality].topics
    loglik = 0.0
    tokens = 0.0
    for var in state.docs:
        idx, cnt = var.tokens[modality], var.counts[modality]
        if not idx.size:
            continue
        mix = var.theta_hat(modality) @ topics[:, idx]
        loglik += float(cnt @ np.log(mix))
        tokens += float(cnt.sum())
    if tokens == 0:
        return float("nan")
    return float(np.exp(-loglik / tokens))


def fit(corpus: MultiModalCorpus, config: TrainConfig | None = None,
        rng: np.random.Generator | None = None,
        sweep_callback=None) -> TrainState:
    """Run full variational sweeps until the bound plateaus.

    Each sweep performs all documents' local updates (responsibilities,
    Gamma factors, weight ascent), then the Gaussian moments, topics and
    sticks. The bound is checked every sweep and an
    :class:`ElboDecreaseError` is raised if it drops beyond slack;
    training stops when the relative change falls below the tolerance.
    """
    config = config or TrainConfig()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    state = init_state(corpus, config, rng)
    docs = state.docs
    prev = None

    for sweep in range(1, config.max_sweeps + 1):
        tick = time.perf_counter()
        sigma_inv, diag_inv, _ = _sigma_ops(state.params.prior)
        elogs = {m: state.params.dictionaries[m].expected_log_topics()
                 for m in state.params.layout.names}

        def one_chunk(chunk_docs: list[int]) -> None:
            for i in chunk_docs:
                update_local(corpus.documents[i], docs[i], state.params, elogs)
            _batch_update_xi([docs[i] for i in chunk_docs], state.params,
                             config, sigma_inv, diag_inv)

        if config.workers > 1:
            chunks = [list(part) for part in
                      np.array_split(np.arange(len(docs)), config.workers)
                      if part.size]
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                list(pool.map(one_chunk, chunks))
        else:
            one_chunk(list(range(len(docs))))

        mu, sigma = update_mu_sigma(docs, config.jitter_scale)
        state.params.prior = GaussianPrior(mu=mu, sigma=sigma)
        state.params.dictionaries = update_topics(corpus, docs, state.params)
        for m in state.params.layout.names:
            state.params.sticks[m] = update_sticks(docs, state.params, m)

        elbo = elbo_total(corpus, state)
        if prev is not None and elbo < prev - (1e-9 + 1e-6 * abs(prev)):
            raise ElboDecreaseError(sweep, prev, elbo)
        state.elbo_trace.append(elbo)
        for m in state.params.layout.names:
            state.perplexity_trace[m].append(_plugin_perplexity(state, m))
        state.sweep_seconds.append(time.perf_counter() - tick)
        if sweep_callback is not None:
            sweep_callback(state, sweep, elbo)
        logger.info("sweep %d: bound %.6f (%.2fs)", sweep, elbo,
                    state.sweep_seconds[-1])
        if prev is not None:
            rel = abs(elbo - prev) / max(abs(prev), 1e-12)
            if rel < config.tolerance:
                break
        prev = elbo
    return state


def write_trace_csv(state: TrainState, path: str | Path) -> Path:
    """Bound and perplexity trace as CSV: one row per sweep."""
    path = Path(path)
    names = list(state.params.layout.names)
    header = ["sweep", "elbo", "relative_change", "wall_seconds"]
    header += [f"perplexity_{m}" for m in names]
    lines = [",".join(header)]
    for i, elbo in enumerate(state.elbo_trace):
        if i == 0:
            rel = ""
        else:
            prev = state.elbo_trace[i - 1]
            rel = repr(abs(elbo - prev) / max(abs(prev), 1e-12))
        row = [str(i + 1), repr(elbo), rel, f"{state.sweep_seconds[i]:.6f}"]
        row += [repr(state.perplexity_trace[m][i]) for m in names]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

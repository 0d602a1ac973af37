"""Likelihood-based evaluation: quantiles, quantile drop, forgotten test,
bits per dimension, Gaussian fitting, and a KS normality check."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateStatsError,
    InsufficientDataError,
    InvalidCountError,
)
from .flow import FlowModel
from .tame import SIGMA_FLOOR, NllStats

LN2 = math.log(2.0)
_SQRT2 = math.sqrt(2.0)


def nll_values(model: FlowModel, points) -> np.ndarray:
    """Per-point NLL in nats, evaluated without building a tape."""
    with ad.no_grad():
        return -model.log_prob(np.asarray(points, dtype=np.float64)).value.ravel()


def _mu_sigma(stats) -> tuple[float, float]:
    if isinstance(stats, NllStats):
        mu, sigma = stats.mu_R, stats.sigma_R
    else:
        mu, sigma = stats
    if sigma <= 0.0:
        raise DegenerateStatsError(f"sigma must be positive, got {sigma}")
    return float(mu), float(sigma)


def normal_cdf(x, mu: float = 0.0, sigma: float = 1.0):
    """Gaussian CDF via erfc; accurate far into the tails."""
    if sigma <= 0.0:
        raise DegenerateStatsError(f"sigma must be positive, got {sigma}")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    out = 0.5 * np.vectorize(math.erfc)(-z / _SQRT2)
    return float(out) if out.ndim == 0 else out


def likelihood_quantile(model: FlowModel, x_or_set, stats) -> float:
    """Fraction of the remember fit with worse NLL: 1 - F(mu,sigma)(nll).

    A set is scored by the mean of its members' quantiles.
    """
    mu, sigma = _mu_sigma(stats)
    nll = nll_values(model, np.atleast_2d(x_or_set))
    return float(np.mean(1.0 - normal_cdf(nll, mu, sigma)))


def is_forgotten(model: FlowModel, x, stats, delta: float) -> bool:
    """NLL at or beyond the threshold mu + delta * sigma (boundary counts)."""
    mu, sigma = _mu_sigma(stats)
    nll = float(nll_values(model, np.atleast_2d(x))[0])
    return nll >= mu + delta * sigma


def fit_gaussian(nlls) -> tuple[float, float]:
    """Sample mean and population standard deviation."""
    values = np.asarray(nlls, dtype=np.float64).ravel()
    if values.size < 2:
        raise InsufficientDataError("need at least 2 values for a Gaussian fit")
    mu = float(values.mean())
    sigma = float(np.sqrt(np.mean((values - mu) ** 2)))
    if sigma <= SIGMA_FLOOR:
        raise DegenerateStatsError(f"fit sigma {sigma} at or below floor")
    return mu, sigma


def quantile_drop(base_model: FlowModel, tamed_model: FlowModel, eval_set,
                  remember_points) -> float:
    """Base-model quantile minus tamed-model quantile on the set.

    Each model's quantile is computed against a Gaussian fit of its own
    NLLs on the remember points (symmetric per-model stats).
    """
    base_stats = fit_gaussian(nll_values(base_model, remember_points))
    tamed_stats = fit_gaussian(nll_values(tamed_model, remember_points))
    return (likelihood_quantile(base_model, eval_set, base_stats)
            - likelihood_quantile(tamed_model, eval_set, tamed_stats))


def bpd(nll_nats, dim: int):
    """Bits per dimension: nll / (dim * ln 2)."""
    return nll_nats / (dim * LN2)


def _kolmogorov_sf(t: float) -> float:
    """Asymptotic Kolmogorov survival function 2*sum (-1)^(k-1) exp(-2 k^2 t^2)."""
    if t <= 0.0:
        return 1.0
    total = 0.0
    sign = 1.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * t * t)
        total += sign * term
        if term < 1e-16:
            break
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def ks_normality_test(nlls) -> tuple[float, float]:
    """One-sample KS test against a normal fit of the same sample.

    Parameters are estimated from the data and the p-value comes from the
    plain asymptotic Kolmogorov distribution (no small-sample or
    estimated-parameter correction), so it is approximate.
    """
    values = np.sort(np.asarray(nlls, dtype=np.float64).ravel())
    n = values.size
    if n < 20:
        raise InsufficientDataError("KS test needs at least 20 values")
    mu, sigma = fit_gaussian(values)
    cdf = normal_cdf(values, mu, sigma)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    d_plus = np.max(ranks / n - cdf)
    d_minus = np.max(cdf - (ranks - 1.0) / n)
    statistic = float(max(d_plus, d_minus))
    p_value = _kolmogorov_sf(math.sqrt(n) * statistic)
    return statistic, p_value


def nearest_component_classifier(means):
    """Desk-scale stand-in for an attribute classifier: nearest mixture mean."""
    means = np.asarray(means, dtype=np.float64)

    def classify(point) -> int:
        deltas = means - np.asarray(point, dtype=np.float64)
        return int(np.argmin(np.einsum("ij,ij->i", deltas, deltas)))

    return classify


def attribute_fraction(model: FlowModel, classifier, n_samples: int,
                       rng: np.random.Generator) -> dict[int, float]:
    """Fraction of model samples assigned to each label by the classifier."""
    if n_samples <= 0:
        raise InvalidCountError(f"n_samples must be positive, got {n_samples}")
    samples = model.sample(n_samples, rng)
    counts: dict[int, int] = {}
    for point in samples:
        label = classifier(point)
        counts[label] = counts.get(label, 0) + 1
    return {label: count / n_samples for label, count in sorted(counts.items())}


@dataclass
class QuantileEntry:
    set_name: str
    q_base: float
    q_tamed: float
    quantile_drop: float


@dataclass
class QuantileReport:
    """Per-set likelihood quantiles under base and tamed models."""

    entries: list[QuantileEntry]
    threshold_met: bool
    delta: float
    epsilon: float
    forgotten_quantile_threshold: float  # 1 - Phi(delta)
    ks: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "QuantileReport":
        raw = json.loads(text)
        entries = [QuantileEntry(**e) for e in raw.pop("entries")]
        return QuantileReport(entries=entries, **raw)


def build_quantile_report(base_model: FlowModel, tamed_model: FlowModel,
                          named_sets: dict[str, np.ndarray],
                          remember_points, forget_points,
                          delta: float, epsilon: float) -> QuantileReport:
    """Score every named set under both models and check the forget band.

    ``threshold_met`` applies the strict stopping band to the full forget
    set using stats fit on the remember points under the tamed model.
    """
    base_stats = fit_gaussian(nll_values(base_model, remember_points))
    tamed_stats = fit_gaussian(nll_values(tamed_model, remember_points))
    entries = []
    for name, points in named_sets.items():
        q_base = likelihood_quantile(base_model, points, base_stats)
        q_tamed = likelihood_quantile(tamed_model, points, tamed_stats)
        entries.append(QuantileEntry(set_name=name, q_base=q_base,
                                     q_tamed=q_tamed,
                                     quantile_drop=q_base - q_tamed))
    forget_nll = nll_values(tamed_model, forget_points)
    mu_t, sigma_t = tamed_stats
    dists = (forget_nll - (mu_t + delta * sigma_t)) / sigma_t
    return QuantileReport(
        entries=entries,
        threshold_met=bool(np.all(np.abs(dists) < epsilon)),
        delta=delta,
        epsilon=epsilon,
        forgotten_quantile_threshold=1.0 - normal_cdf(delta),
    )

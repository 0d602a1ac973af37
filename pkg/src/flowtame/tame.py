"""Fine-tune a trained flow so a forget set's NLL lands in a band around a
threshold defined relative to the remember set's NLL distribution.

The threshold sits ``delta`` remember-set standard deviations above the
remember-set NLL mean (below, for negative ``delta``, which raises the forget
set's likelihood instead). The loop alternates a forgetting loss that pulls
every forget-batch NLL toward the threshold with a remembering loss that
anchors the remember batch's average NLL and penalizes both KL directions
between Gaussian fits of the base and current NLL distributions. The run
stops once every point of the full forget set is within ``epsilon`` standard
deviations of the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import (
    ConfigError,
    DegenerateStatsError,
    EmptyInputError,
    InsufficientDataError,
    MaxIterationsExceeded,
    OverlapError,
)
from .flow import FlowModel
from .train import OptimizerState, step

SIGMA_FLOOR = 1e-6


@dataclass
class NllStats:
    """Mean and population SD of a batch's NLLs.

    When built differentiably, ``mu_node``/``sigma_node`` are live graph
    nodes and gradients flow through them; otherwise the floats act as
    frozen constants.
    """

    mu_R: float
    sigma_R: float
    mu_node: Node | None = None
    sigma_node: Node | None = None

    def as_operands(self) -> tuple:
        mu = self.mu_node if self.mu_node is not None else self.mu_R
        sigma = self.sigma_node if self.sigma_node is not None else self.sigma_R
        return mu, sigma


@dataclass
class BaseStats:
    """Gaussian fit of the base model's remember NLLs; frozen during taming."""

    mu_B: float
    sigma_B: float


@dataclass
class TamingConfig:
    delta: float = 4.0
    epsilon: float = 0.6
    alpha: float = 0.6
    gamma: float = 0.6
    eta: float = 5e-4
    forget_batch: int = 32
    remember_batch: int = 256
    stats_refresh: int = 10
    max_iterations: int = 5000
    use_remember_loss: bool = True
    use_forward_kl: bool = True
    use_reverse_kl: bool = True
    use_nll_anchor: bool = True
    seed: int = 0
    optimizer: str = "adam"
    snapshot_every: int | None = None

    def __post_init__(self):
        if self.delta == 0.0:
            raise ConfigError("delta must be nonzero (sign selects direction)")
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be positive")
        if self.epsilon >= abs(self.delta):
            raise ConfigError("epsilon must be smaller than |delta|")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must be in (0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.eta <= 0.0:
            raise ConfigError("eta must be positive")
        for name in ("forget_batch", "remember_batch", "stats_refresh",
                     "max_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TraceRow:
    iteration: int
    loss_forget: float
    loss_remember: float
    max_abs_dist: float
    mu_R: float
    sigma_R: float


@dataclass
class TamingResult:
    model: FlowModel
    trace: list[TraceRow]
    stopped: bool
    iterations: int
    snapshots: list[tuple[int, FlowModel]] = field(default_factory=list)


def _nll_node(model: FlowModel, batch: np.ndarray) -> Node:
    return ad.neg(model.log_prob(batch))


def _stats_from_node(nll: Node, differentiable: bool) -> NllStats:
    n = nll.value.size
    if n < 2:
        raise InsufficientDataError("need at least 2 points for NLL stats")
    mu = ad.mean(nll)
    var = ad.mean(ad.square(nll - mu))
    sigma_value = math.sqrt(float(var.value))
    if sigma_value <= SIGMA_FLOOR:
        raise DegenerateStatsError(
            f"remember NLL spread {sigma_value} at or below floor {SIGMA_FLOOR}")
    if not differentiable:
        return NllStats(mu_R=float(mu.value), sigma_R=sigma_value)
    sigma = ad.exp(ad.log(var) * 0.5)
    return NllStats(mu_R=float(mu.value), sigma_R=sigma_value,
                    mu_node=mu, sigma_node=sigma)


def estimate_nll_stats(model: FlowModel, batch, differentiable: bool = False) -> NllStats:
    """Mean and population SD of per-point NLLs on the batch.

    With ``differentiable=True`` the returned stats carry graph nodes so
    losses built on them backpropagate into the model through the batch's
    NLLs.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise InsufficientDataError("need at least 2 points for NLL stats")
    if differentiable:
        return _stats_from_node(_nll_node(model, batch), True)
    with ad.no_grad():
        return _stats_from_node(_nll_node(model, batch), False)


def signed_distance(x_nll: float, stats: NllStats, delta: float) -> float:
    """Offset of an NLL from the threshold, in remember-SD units."""
    return (x_nll - (stats.mu_R + delta * stats.sigma_R)) / stats.sigma_R


def forget_loss(model: FlowModel, forget_batch, stats: NllStats,
                delta: float) -> Node:
    """Mean sigmoid of the squared nat-distance to the threshold.

    The sigmoid argument is ``sigma_R^2 * dist^2``, i.e. the squared raw
    offset in nats; the loss floor is 0.5, attained when every forget NLL
    sits exactly on the threshold. Gradients flow through the batch NLLs
    and, when the stats carry nodes, through the stats as well.
    """
    forget_batch = np.asarray(forget_batch, dtype=np.float64)
    if forget_batch.size == 0:
        raise EmptyInputError("forget_loss on empty batch")
    mu, sigma = stats.as_operands()
    nll = _nll_node(model, forget_batch)
    dist = (nll - (mu + delta * sigma)) / sigma
    return ad.mean(ad.sigmoid(ad.square(sigma) * ad.square(dist)))


def gaussian_kl(p: tuple[float, float], q: tuple[float, float]) -> float:
    """Closed-form KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2))."""
    mu_p, sigma_p = p
    mu_q, sigma_q = q
    if sigma_p <= 0.0 or sigma_q <= 0.0:
        raise DegenerateStatsError("gaussian_kl needs positive sigmas")
    return (math.log(sigma_q / sigma_p)
            + (sigma_p ** 2 + (mu_p - mu_q) ** 2) / (2.0 * sigma_q ** 2)
            - 0.5)


def _gaussian_kl_expr(mu_p, sigma_p, mu_q, sigma_q) -> Node:
    """Same closed form over graph nodes and/or constants."""
    term_log = ad.log(sigma_q) - ad.log(sigma_p)
    term_ratio = (ad.square(sigma_p) + ad.square(mu_p - mu_q)) \
        / (ad.square(sigma_q) * 2.0)
    return term_log + term_ratio - 0.5


def _remember_loss_from_node(nll: Node, base_stats: BaseStats, gamma: float,
                             use_forward_kl: bool, use_reverse_kl: bool,
                             use_nll_anchor: bool,
                             stats: NllStats | None) -> Node:
    loss = ad.constant(0.0)
    if use_nll_anchor:
        loss = loss + ad.mean(nll) * (1.0 - gamma)
    if use_forward_kl or use_reverse_kl:
        if stats is None:
            stats = _stats_from_node(nll, differentiable=True)
        mu_t, sigma_t = stats.as_operands()
        mu_b = ad.constant(base_stats.mu_B)
        sigma_b = ad.constant(base_stats.sigma_B)
        kl = ad.constant(0.0)
        if use_forward_kl:
            kl = kl + _gaussian_kl_expr(mu_b, sigma_b, mu_t, sigma_t)
        if use_reverse_kl:
            kl = kl + _gaussian_kl_expr(mu_t, sigma_t, mu_b, sigma_b)
        loss = loss + kl * gamma
    return loss


def remember_loss(model: FlowModel, remember_batch, base_stats: BaseStats,
                  gamma: float, use_forward_kl: bool = True,
                  use_reverse_kl: bool = True, use_nll_anchor: bool = True,
                  stats: NllStats | None = None) -> Node:
    """Anchored distribution-preservation loss on the remember batch.

    ``(1 - gamma)`` weights the batch's average NLL; ``gamma`` weights the
    sum of forward KL (base fit against current fit) and reverse KL (current
    against base) between the Gaussian NLL fits. When ``stats`` is omitted
    the current-side fit is estimated differentiably from this very batch;
    during taming the loop passes in the stats of the last refresh instead.
    """
    remember_batch = np.asarray(remember_batch, dtype=np.float64)
    if remember_batch.size == 0:
        raise EmptyInputError("remember_loss on empty batch")
    return _remember_loss_from_node(
        _nll_node(model, remember_batch), base_stats, gamma,
        use_forward_kl, use_reverse_kl, use_nll_anchor, stats)


def stopping_met(model: FlowModel, forget_points, stats: NllStats,
                 delta: float, epsilon: float) -> tuple[bool, np.ndarray]:
    """Check |dist| < epsilon for every point of the full forget set."""
    forget_points = np.asarray(forget_points, dtype=np.float64)
    if forget_points.size == 0:
        raise EmptyInputError("stopping check on empty forget set")
    with ad.no_grad():
        nll = _nll_node(model, forget_points).value.ravel()
    dists = (nll - (stats.mu_R + delta * stats.sigma_R)) / stats.sigma_R
    return bool(np.all(np.abs(dists) < epsilon)), dists


def compute_base_stats(model: FlowModel, remember_points) -> BaseStats:
    """Gaussian fit of the base model's NLLs over the full remember set."""
    stats = estimate_nll_stats(model, remember_points, differentiable=False)
    return BaseStats(mu_B=stats.mu_R, sigma_B=stats.sigma_R)


def _check_disjoint(forget: np.ndarray, remember: np.ndarray) -> None:
    forget_rows = {tuple(row) for row in forget}
    for row in remember:
        if tuple(row) in forget_rows:
            raise OverlapError("forget and remember sets share a point")


def tame(base_model: FlowModel, forget_points, remember_points,
         config: TamingConfig) -> TamingResult:
    """Run the taming loop from a frozen base model.

    Each iteration samples forget and remember batches, refreshes the
    remember-NLL stats every ``stats_refresh`` iterations (differentiably;
    between refreshes they are frozen constants), evaluates the stopping
    criterion on the full forget set before updating, and otherwise steps on
    ``alpha * forget + (1 - alpha) * remember``. The criterion is evaluated
    once more after the final step; if it never holds,
    ``MaxIterationsExceeded`` is raised with the partial result attached.
    """
    forget_points = np.asarray(forget_points, dtype=np.float64)
    remember_points = np.asarray(remember_points, dtype=np.float64)
    if forget_points.size == 0 or remember_points.size == 0:
        raise EmptyInputError("forget and remember sets must be nonempty")
    _check_disjoint(forget_points, remember_points)

    model = base_model.clone()
    base_stats = compute_base_stats(base_model, remember_points)
    params = model.params
    optimizer = OptimizerState(config.optimizer, config.eta, params)
    rng = np.random.default_rng(config.seed)
    trace: list[TraceRow] = []
    snapshots: list[tuple[int, FlowModel]] = []
    stats: NllStats | None = None

    def build_losses(iteration: int) -> tuple[Node, Node | None]:
        nonlocal stats
        f_idx = rng.integers(0, forget_points.shape[0], size=config.forget_batch)
        r_idx = rng.integers(0, remember_points.shape[0], size=config.remember_batch)
        refresh = (iteration - 1) % config.stats_refresh == 0
        remember_nll = None
        if refresh:
            # Stats are differentiable on the iteration that rebuilds them;
            # only the float values persist to later iterations (reusing the
            # nodes would backpropagate a stale tape into updated parameters).
            remember_nll = _nll_node(model, remember_points[r_idx])
            current_stats = _stats_from_node(remember_nll, differentiable=True)
            stats = NllStats(mu_R=current_stats.mu_R, sigma_R=current_stats.sigma_R)
        else:
            current_stats = stats
        loss_f = forget_loss(model, forget_points[f_idx], current_stats,
                             config.delta)
        loss_r = None
        if config.use_remember_loss:
            if remember_nll is None:
                remember_nll = _nll_node(model, remember_points[r_idx])
            loss_r = _remember_loss_from_node(
                remember_nll, base_stats, config.gamma,
                config.use_forward_kl, config.use_reverse_kl,
                config.use_nll_anchor, current_stats)
        return loss_f, loss_r

    def record(iteration: int, loss_f: Node, loss_r: Node | None,
               dists: np.ndarray) -> None:
        trace.append(TraceRow(
            iteration=iteration,
            loss_forget=float(loss_f.value),
            loss_remember=float(loss_r.value) if loss_r is not None else float("nan"),
            max_abs_dist=float(np.max(np.abs(dists))),
            mu_R=stats.mu_R,
            sigma_R=stats.sigma_R,
        ))

    for iteration in range(1, config.max_iterations + 1):
        loss_f, loss_r = build_losses(iteration)
        met, dists = stopping_met(model, forget_points, stats,
                                  config.delta, config.epsilon)
        record(iteration, loss_f, loss_r, dists)
        if met:
            return TamingResult(model=model, trace=trace, stopped=True,
                                iterations=iteration, snapshots=snapshots)
        total = loss_f * config.alpha
        if loss_r is not None:
            total = total + loss_r * (1.0 - config.alpha)
        ad.zero_grad(params)
        ad.backward(total)
        step(optimizer, params, [p.grad for p in params])
        if config.snapshot_every and iteration % config.snapshot_every == 0:
            snapshots.append((iteration, model.clone()))

    # One more check so a run that lands in the band on its last step is
    # reported as stopped rather than exceeded.
    final_iteration = config.max_iterations + 1
    loss_f, loss_r = build_losses(final_iteration)
    met, dists = stopping_met(model, forget_points, stats,
                              config.delta, config.epsilon)
    record(final_iteration, loss_f, loss_r, dists)
    if met:
        return TamingResult(model=model, trace=trace, stopped=True,
                            iterations=final_iteration, snapshots=snapshots)
    raise MaxIterationsExceeded(
        f"stopping criterion not met within {config.max_iterations} iterations",
        result=TamingResult(model=model, trace=trace, stopped=False,
                            iterations=config.max_iterations,
                            snapshots=snapshots))

"""Strictly proper scoring rules, Monte-Carlo estimators, and propriety probes.

Sign convention: scores are rewards (larger is better). The energy score of a
model p against an observation y is E|x1 - x2|^a - 2 E|x - y|^a with x, x1, x2
drawn from p, so the true distribution maximizes the expected score when
a in (0, 2). At a = 2 only the mean is identified, so the rule stays proper
but loses strictness. Distances are Euclidean throughout.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from enar import diffcore as dc
from enar import kernels
from enar.errors import ConfigError, ShapeError

_RULE_KINDS = ("energy", "logarithmic", "hyvarinen")


@dataclass(frozen=True)
class ScoringRuleSpec:
    kind: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in _RULE_KINDS:
            raise ConfigError(f"kind must be one of {_RULE_KINDS}, got {self.kind!r}")
        if self.kind == "energy":
            if not 0.0 < self.alpha <= 2.0:
                raise ConfigError(f"alpha must lie in (0, 2], got {self.alpha}")
            if self.alpha <= 0.99:
                warnings.warn(
                    f"alpha={self.alpha} <= 0.99: the pairwise term's gradient is "
                    "unbounded as samples coincide and can destabilize optimization",
                    RuntimeWarning,
                    stacklevel=2,
                )

    @property
    def strictly_proper(self):
        if self.kind == "energy":
            return self.alpha < 2.0
        return True


@dataclass(frozen=True)
class ScoreEstimate:
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.std_error < 0:
            raise ConfigError("std_error must be >= 0")


def _pair_dist(a, b, alpha):
    """Rowwise |a_i - b_i|^alpha for (n, d) float arrays."""
    d = a - b
    return ((d * d).sum(axis=-1)) ** (0.5 * alpha)


def _as_rows(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a point or a set of points, got shape {arr.shape}")
    return arr


def _check_alpha_tau(alpha, tau_train):
    if not 0.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (0, 2], got {alpha}")
    if tau_train > 1.0:
        raise ConfigError(
            f"tau_train must be <= 1 (got {tau_train}): above 1 the loss is "
            "unbounded below and rewards spreading samples without limit"
        )
    if tau_train <= 0.0:
        raise ConfigError(f"tau_train must lie in (0, 1], got {tau_train}")


def energy_loss(x1, x2, y, alpha, tau_train):
    """|x1-y|^a + |x2-y|^a - tau_train * |x1-x2|^a.

    Tensor inputs build a differentiable graph (gradients flow to x1, x2);
    numpy inputs return a float for single points or a per-row array for
    (n, d) batches.
    """
    _check_alpha_tau(alpha, tau_train)
    if isinstance(x1, dc.Tensor) or isinstance(x2, dc.Tensor) or isinstance(y, dc.Tensor):
        x1 = x1 if isinstance(x1, dc.Tensor) else dc.Tensor(x1)
        x2 = x2 if isinstance(x2, dc.Tensor) else dc.Tensor(x2)
        y = y if isinstance(y, dc.Tensor) else dc.Tensor(y)
        fidelity = dc.add(dc.alpha_norm_pow(x1 - y, alpha), dc.alpha_norm_pow(x2 - y, alpha))
        interaction = dc.alpha_norm_pow(x1 - x2, alpha)
        return dc.add(fidelity, dc.mul_scalar(interaction, -tau_train))
    x1, x2, y = np.asarray(x1, np.float64), np.asarray(x2, np.float64), np.asarray(y, np.float64)
    single = x1.ndim <= 1
    x1, x2, y = np.atleast_2d(x1), np.atleast_2d(x2), np.atleast_2d(y)
    out = _pair_dist(x1, y, alpha) + _pair_dist(x2, y, alpha) - tau_train * _pair_dist(x1, x2, alpha)
    return float(out[0]) if single else out


def energy_loss_multi(samples, y, alpha, tau_train):
    """Opt-in n-sample estimator: 2 mean|x_i-y|^a - tau * mean over i!=j of |x_i-x_j|^a.

    Reduces exactly to energy_loss at n=2. Numpy only.
    """
    _check_alpha_tau(alpha, tau_train)
    xs = _as_rows(samples, "samples")
    n = xs.shape[0]
    if n < 2:
        raise ConfigError("need at least 2 samples")
    y = np.broadcast_to(np.asarray(y, np.float64), (n, xs.shape[1]))
    fidelity = _pair_dist(xs, y, alpha).mean()
    within = kernels.within_alpha_sums(xs, alpha).sum() / (n * (n - 1))
    return float(2.0 * fidelity - tau_train * within)


def energy_score_mc(p, y, alpha, n, rng):
    """Monte-Carlo energy score from n paired draws of p."""
    if n < 2:
        raise ConfigError(f"need n >= 2 paired draws, got {n}")
    if not 0.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (0, 2], got {alpha}")
    y = np.asarray(y, dtype=np.float64)
    x1 = _as_rows(p.sample(rng, n), "samples")
    x2 = _as_rows(p.sample(rng, n), "samples")
    yb = np.broadcast_to(np.atleast_1d(y), x1.shape)
    contrib = (
        _pair_dist(x1, x2, alpha)
        - _pair_dist(x1, yb, alpha)
        - _pair_dist(x2, yb, alpha)
    )
    return ScoreEstimate(
        value=float(contrib.mean()),
        std_error=float(contrib.std(ddof=1) / np.sqrt(n)),
        n_samples=n,
    )


def energy_distance(samples_p, samples_q, alpha):
    """U-statistic estimate of 2E|x-y|^a - E|x1-x2|^a - E|y1-y2|^a.

    Within-set terms exclude self-pairs. The standard error comes from the
    variance of the per-point projections of the statistic.
    """
    if not 0.0 < alpha <= 2.0:
        raise ConfigError(f"alpha must lie in (0, 2], got {alpha}")
    X = _as_rows(samples_p, "samples_p")
    Y = _as_rows(samples_q, "samples_q")
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ConfigError("both sample sets must be nonempty")
    n, m = X.shape[0], Y.shape[0]
    cross_row, cross_col = kernels.cross_alpha_sums(X, Y, alpha)
    a = cross_row / m                                     # mean over y per x-point
    c = cross_col / n                                     # mean over x per y-point
    if n > 1:
        b = kernels.within_alpha_sums(X, alpha) / (n - 1)
        within_p = b.mean()
        var_u = np.var(2.0 * (a - b), ddof=1) / n
    else:
        within_p, var_u = 0.0, 0.0
    if m > 1:
        d = kernels.within_alpha_sums(Y, alpha) / (m - 1)
        within_q = d.mean()
        var_v = np.var(2.0 * (c - d), ddof=1) / m
    else:
        within_q, var_v = 0.0, 0.0
    value = 2.0 * a.mean() - within_p - within_q
    return ScoreEstimate(
        value=float(value),
        std_error=float(np.sqrt(var_u + var_v)),
        n_samples=n + m,
    )


def log_score(p, x):
    """log p(x); raises UnsupportedOracleError when p has no density."""
    return p.log_density(x)


def hyvarinen_score(p, x):
    """-(2 tr(H log p(x)) + |grad log p(x)|^2); larger is better."""
    trace = p.hessian_trace(x)
    grad = p.score_fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    sq = (grad * grad).sum(axis=-1)
    out = -(2.0 * np.asarray(trace) + sq)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ProbeRow:
    candidate_id: str
    estimate: ScoreEstimate
    is_truth: bool
    is_max: bool


@dataclass(frozen=True)
class ProprietyResult:
    rows: tuple
    truth_is_max: bool


def propriety_probe(rule, q, candidates, n, rng, candidate_ids=None):
    """Estimate the expected score S(p, q) for each candidate p.

    The truth q must be one of the candidates (by identity). For the energy
    rule all candidates are scored against one shared batch of draws from q,
    which tightens the comparison between candidates.
    """
    if not any(c is q for c in candidates):
        raise ConfigError("the true distribution q must appear among the candidates")
    if candidate_ids is None:
        candidate_ids = [f"cand{i:02d}" for i in range(len(candidates))]
    if len(candidate_ids) != len(candidates):
        raise ConfigError("candidate_ids must match candidates in length")

    ys = _as_rows(q.sample(rng, n), "draws")
    estimates = []
    for p in candidates:
        if rule.kind == "energy":
            x1 = _as_rows(p.sample(rng, n), "samples")
            x2 = _as_rows(p.sample(rng, n), "samples")
            contrib = (
                _pair_dist(x1, x2, rule.alpha)
                - _pair_dist(x1, ys, rule.alpha)
                - _pair_dist(x2, ys, rule.alpha)
            )
        elif rule.kind == "logarithmic":
            contrib = np.asarray(p.log_density(ys), dtype=np.float64)
        else:
            contrib = np.asarray(hyvarinen_score(p, ys), dtype=np.float64)
        estimates.append(ScoreEstimate(
            value=float(contrib.mean()),
            std_error=float(contrib.std(ddof=1) / np.sqrt(n)),
            n_samples=n,
        ))

    best = max(range(len(candidates)), key=lambda i: estimates[i].value)
    rows = tuple(
        ProbeRow(
            candidate_id=candidate_ids[i],
            estimate=estimates[i],
            is_truth=candidates[i] is q,
            is_max=i == best,
        )
        for i in range(len(candidates))
    )
    truth_is_max = any(r.is_truth and r.is_max for r in rows)
    return ProprietyResult(rows=rows, truth_is_max=truth_is_max)

"""Iterative masked generation with cosine unmasking and guidance.

A sequence starts fully masked. A single random permutation of the positions
is cut into K groups sized by the cosine plan; step k reveals group k by
running the backbone on the current partial sequence (twice when guidance
needs the dummy-label stream), blending hidden states at the scheduled
guidance scale, and sampling each group position once through the generator.
Emitted tokens are frozen and condition all later steps.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from enar import diffcore as dc
from enar.errors import ConfigError, InputError, ShapeError
from enar.model import (
    HiddenState,
    backbone_forward,
    draw_noise,
    embed_sequence,
    generator_forward,
)

_CFG_SCHEDULES = ("constant", "linear")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = None                 # None resolves to min(T, 16) at generate time
    cfg_scale: float = 1.0
    cfg_schedule: str = "linear"
    tau_infer: float = 0.7
    seed: int = 0
    order_seed: int = 1

    def __post_init__(self):
        if self.steps is not None and (not isinstance(self.steps, (int, np.integer))
                                       or self.steps < 1):
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.cfg_schedule not in _CFG_SCHEDULES:
            raise ConfigError(
                f"cfg_schedule must be one of {_CFG_SCHEDULES}, got {self.cfg_schedule!r}")
        if self.tau_infer <= 0:
            raise ConfigError(f"tau_infer must be > 0, got {self.tau_infer}")


@dataclass(frozen=True)
class StepTrace:
    positions: np.ndarray             # body positions revealed this step
    cfg_scale: float
    tokens: np.ndarray                # [len(positions), d_token]


@dataclass
class GenerationTrace:
    steps: list = field(default_factory=list)
    backbone_passes: int = 0
    generator_rows: int = 0

    def validate_partition(self, T):
        seen = np.concatenate([s.positions for s in self.steps]) if self.steps else np.array([], int)
        if len(seen) != T or len(np.unique(seen)) != T:
            raise ShapeError("trace steps do not partition the positions")


def cosine_plan(T, K):
    """Per-step reveal counts following ceil(T cos(pi/2 * k/K)), repaired so
    every step reveals at least one position and the counts sum to T."""
    if K < 1:
        raise ConfigError(f"need K >= 1, got {K}")
    if K > T:
        raise ConfigError(f"steps K={K} cannot exceed sequence length T={T}")
    m = [T]
    for k in range(1, K):
        m.append(math.ceil(T * math.cos(math.pi / 2 * k / K)))
    m.append(0)                                   # cos(pi/2) exactly, not ~6e-17
    counts = [m[k - 1] - m[k] for k in range(1, K + 1)]
    # repair: move reveals from the largest step into empty steps
    while True:
        zeros = [i for i, c in enumerate(counts) if c == 0]
        if not zeros:
            break
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[zeros[0]] += 1
    assert sum(counts) == T
    return counts


def cfg_schedule_scale(base, k, K, kind):
    """Guidance scale at step k: constant, or linear from 1+(base-1)/K up to base."""
    if not 0 <= k < K:
        raise ConfigError(f"step index k={k} out of range for K={K}")
    if kind == "constant":
        return float(base)
    if kind == "linear":
        return 1.0 + (base - 1.0) * (k + 1) / K
    raise ConfigError(f"unknown cfg schedule {kind!r}")


def cfg_combine(h_c, h_u, scale):
    """scale * h_c + (1 - scale) * h_u on hidden states; scale 1/0 short-circuit
    to the exact input."""
    if h_c.values.shape != h_u.values.shape:
        raise ShapeError(f"hidden shapes differ: {h_c.values.shape} vs {h_u.values.shape}")
    if scale == 1.0:
        return h_c
    if scale == 0.0:
        return h_u
    s = float(scale)
    mixed = s * h_c.values.data + (1.0 - s) * h_u.values.data
    return HiddenState(values=dc.Tensor(mixed))


def _resolve_steps(config, T):
    K = config.steps if config.steps is not None else min(T, 16)
    if K > T:
        raise ConfigError(f"steps K={K} cannot exceed sequence length T={T}")
    return K


def _partition(perm, counts):
    groups, start = [], 0
    for c in counts:
        groups.append(perm[start:start + c])
        start += c
    return groups


def generate(params, model_config, label, config, force_dual_pass=False):
    """Sample one sequence for a class label; returns (tokens [T, d_token], trace).

    Deterministic given (seed, order_seed). When cfg_scale is 1 the dummy
    stream cannot change the blend, so it is skipped; force_dual_pass runs it
    anyway (the result is bit-identical because the extra pass draws no
    randomness).
    """
    mc = model_config
    if not 0 <= label < mc.n_classes:
        raise InputError(f"label must lie in [0, {mc.n_classes}), got {label}")
    T = params.tensors["pos_embed"].shape[0] - mc.n_class_tokens
    K = _resolve_steps(config, T)
    dtype = params.tensors["gen.head.w"].dtype

    rng_noise = np.random.default_rng(config.seed)
    rng_order = np.random.default_rng(config.order_seed)
    groups = _partition(rng_order.permutation(T), cosine_plan(T, K))
    dual = force_dual_pass or config.cfg_scale != 1.0

    tokens = np.zeros((T, mc.d_token), dtype=dtype)
    masked = np.ones(T, dtype=bool)
    labels_c = np.array([label])
    labels_u = np.array([mc.dummy_class])
    trace = GenerationTrace()

    with dc.no_grad():
        for k in range(K):
            scale = cfg_schedule_scale(config.cfg_scale, k, K, config.cfg_schedule)
            h_c = backbone_forward(
                embed_sequence(tokens[None], masked[None], labels_c, params, mc),
                params, mc, train_mode=False)
            trace.backbone_passes += 1
            if dual:
                h_u = backbone_forward(
                    embed_sequence(tokens[None], masked[None], labels_u, params, mc),
                    params, mc, train_mode=False)
                trace.backbone_passes += 1
                h = cfg_combine(h_c, h_u, scale)
            else:
                h = h_c
            pos = groups[k]
            rows = h.values.data[0, mc.n_class_tokens + pos, :]
            eps = draw_noise(len(pos), mc, rng_noise, dtype)
            out = generator_forward(dc.Tensor(rows), eps, params, mc,
                                    tau_infer=config.tau_infer)
            trace.generator_rows += len(pos)
            tokens[pos] = out.data
            masked[pos] = False
            trace.steps.append(StepTrace(positions=pos.copy(), cfg_scale=scale,
                                         tokens=out.data.copy()))
    trace.validate_partition(T)
    return tokens, trace


def generate_batch(params, model_config, labels, config):
    """Sample one sequence per label in parallel; returns tokens [B, T, d_token].

    Each row gets its own reveal order; all rows share the step plan, so the
    rows stay in lockstep and each step runs one (or two, under guidance)
    backbone pass over the whole batch.
    """
    mc = model_config
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= mc.n_classes):
        raise InputError(f"labels must lie in [0, {mc.n_classes})")
    B = labels.shape[0]
    T = params.tensors["pos_embed"].shape[0] - mc.n_class_tokens
    K = _resolve_steps(config, T)
    dtype = params.tensors["gen.head.w"].dtype

    rng_noise = np.random.default_rng(config.seed)
    rng_order = np.random.default_rng(config.order_seed)
    perms = rng_order.permuted(np.tile(np.arange(T), (B, 1)), axis=1)
    counts = cosine_plan(T, K)
    starts = np.concatenate([[0], np.cumsum(counts)])
    dual = config.cfg_scale != 1.0

    tokens = np.zeros((B, T, mc.d_token), dtype=dtype)
    masked = np.ones((B, T), dtype=bool)
    dummy = np.full(B, mc.dummy_class)

    with dc.no_grad():
        for k in range(K):
            scale = cfg_schedule_scale(config.cfg_scale, k, K, config.cfg_schedule)
            h_c = backbone_forward(
                embed_sequence(tokens, masked, labels, params, mc),
                params, mc, train_mode=False)
            if dual:
                h_u = backbone_forward(
                    embed_sequence(tokens, masked, dummy, params, mc),
                    params, mc, train_mode=False)
                h = cfg_combine(h_c, h_u, scale)
            else:
                h = h_c
            pos = perms[:, starts[k]:starts[k + 1]]           # [B, counts[k]]
            rows_idx = (np.repeat(np.arange(B), counts[k]),
                        (mc.n_class_tokens + pos).ravel())
            rows = h.values.data[rows_idx[0], rows_idx[1], :]
            eps = draw_noise(rows.shape[0], mc, rng_noise, dtype)
            out = generator_forward(dc.Tensor(rows), eps, params, mc,
                                    tau_infer=config.tau_infer)
            tokens[rows_idx[0], pos.ravel()] = out.data
            masked[rows_idx[0], pos.ravel()] = False
    return tokens

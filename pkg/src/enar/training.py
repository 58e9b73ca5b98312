"""Masked-sequence training with the paired energy loss.

Each step masks a random subset of every sequence, runs the backbone on the
masked input, and asks the generator for two independent tokens per masked
position. The loss rewards closeness to the ground truth and penalizes the
two samples for agreeing with each other, down-weighted by tau_train.

The run is split into a main phase at tau_train = 1 and a short final phase
at the configured tau_train < 1. Learning rate ramps linearly over the warmup
epochs, then stays constant. All randomness flows through one seeded
generator, so a seed pins the entire run bitwise.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from enar import diffcore as dc
from enar.errors import ConfigError, InputError, NumericalAbort, ShapeError
from enar.model import backbone_forward, embed_sequence, init_params, predict_pair
from enar.scoring import ScoringRuleSpec, energy_loss


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    tau_train: float = 0.99          # final-phase temperature; main phase runs at 1.0
    mask_ratio_range: tuple = (0.7, 1.0)
    cfg_dropout_p: float = 0.1
    lr: float = 3e-4
    lambda_gen: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    grad_clip: float = 3.0
    ema_momentum: float = 0.9999
    batch_size: int = 128
    epochs: int = 30
    warmup_epochs: int = 3
    final_epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask_ratio_range", tuple(self.mask_ratio_range))
        ScoringRuleSpec("energy", self.alpha)      # validates alpha, warns if <= 0.99
        if not 0.0 < self.tau_train <= 1.0:
            raise ConfigError(f"tau_train must lie in (0, 1], got {self.tau_train}")
        lo, hi = self.mask_ratio_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"mask_ratio_range must satisfy 0 <= lo <= hi <= 1, got {self.mask_ratio_range}")
        if not 0.0 <= self.cfg_dropout_p <= 1.0:
            raise ConfigError(f"cfg_dropout_p must lie in [0, 1], got {self.cfg_dropout_p}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.lambda_gen <= 1.0:
            raise ConfigError(f"lambda_gen must lie in [0, 1], got {self.lambda_gen}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        for name, v in (("batch_size", self.batch_size), ("epochs", self.epochs),
                        ("warmup_epochs", self.warmup_epochs),
                        ("final_epochs", self.final_epochs), ("seed", self.seed)):
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.final_epochs > self.epochs:
            raise ConfigError("final_epochs cannot exceed epochs")


@dataclass
class SequenceBatch:
    tokens: np.ndarray                # [B, T, d_token] float
    labels: np.ndarray                # [B] int class ids
    mask: np.ndarray                  # [B, T] bool, True = position to predict


@dataclass(frozen=True)
class TrainReport:
    step: int
    epoch: int
    phase: str
    loss: float
    fidelity_term: float              # mean |x_i - y|^alpha over both samples
    diversity_term: float             # mean |x1 - x2|^alpha
    grad_norm: float
    lr_effective: float


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


@dataclass
class TrainResult:
    params: object
    ema: object
    reports: list = field(default_factory=list)


def sample_mask(T, ratio_range, rng):
    """Mask exactly round(r * T) uniformly chosen positions, r ~ U[lo, hi], >= 1."""
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"mask ratio range must satisfy 0 <= lo <= hi <= 1, got {ratio_range}")
    r = rng.uniform(lo, hi)
    count = max(1, int(round(r * T)))
    mask = np.zeros(T, dtype=bool)
    mask[rng.choice(T, size=count, replace=False)] = True
    return mask


def cfg_dropout(labels, p, rng, dummy_id):
    """Independently replace each label with the dummy id with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
    labels = np.asarray(labels)
    drop = rng.random(labels.shape[0]) < p
    return np.where(drop, dummy_id, labels)


def _rowwise_alpha(a, b, alpha):
    d = a.astype(np.float64) - b.astype(np.float64)
    return ((d * d).sum(axis=-1)) ** (0.5 * alpha)


def masked_energy_loss(batch, params, model_config, train_config, rng,
                       targets=None, train_mode=True):
    """Mean paired energy loss over the masked positions of a batch.

    Ground truth is read only at masked positions: `targets` (defaulting to
    batch.tokens) feeds the loss, while batch.tokens feeds the conditioning
    path, so editing targets at unmasked positions cannot change anything.
    Returns the loss tensor and a TrainReport with the loss decomposition
    (step/epoch/grad fields are filled by the caller).
    """
    mask = np.asarray(batch.mask, dtype=bool)
    if not mask.any():
        raise InputError("batch has no masked positions; nothing to predict")
    if targets is None:
        targets = batch.tokens
    targets = np.asarray(targets)
    if targets.shape != np.asarray(batch.tokens).shape:
        raise ShapeError(f"targets shape {targets.shape} != tokens shape {np.asarray(batch.tokens).shape}")

    emb = embed_sequence(batch.tokens, mask, batch.labels, params, model_config)
    hidden = backbone_forward(emb, params, model_config, train_mode=train_mode, rng=rng)
    body = hidden.values[:, model_config.n_class_tokens:, :]
    rows = dc.gather_rows(body, mask)
    x1, x2 = predict_pair(rows, params, model_config, rng)
    dtype = params.tensors["gen.head.w"].dtype
    y = dc.Tensor(targets[mask].astype(dtype))
    per_position = energy_loss(x1, x2, y, train_config.alpha, train_config.tau_train)
    loss = dc.mean(per_position)

    alpha = train_config.alpha
    fidelity = 0.5 * float(_rowwise_alpha(x1.data, y.data, alpha).mean()
                           + _rowwise_alpha(x2.data, y.data, alpha).mean())
    diversity = float(_rowwise_alpha(x1.data, x2.data, alpha).mean())
    report = TrainReport(
        step=-1, epoch=-1, phase="", loss=float(loss.item()),
        fidelity_term=fidelity, diversity_term=diversity,
        grad_norm=float("nan"), lr_effective=float("nan"),
    )
    return loss, report


def init_optimizer(params):
    zeros = {n: np.zeros_like(params.tensors[n].data) for n in params.names()}
    return OptimizerState(
        m={n: z.copy() for n, z in zeros.items()},
        v=zeros,
        step=0,
    )


def optimizer_step(params, grads, state, config, lr_scale=1.0):
    """One AdamW step with pre-moment global-norm clipping.

    Generator-group tensors use lr * lambda_gen; their decoupled weight decay
    scales with the same effective rate, so lambda_gen = 0 freezes the group
    exactly. Returns the pre-clip global gradient norm.
    """
    names = params.names()
    sq = 0.0
    for n in names:
        g = grads.get(n)
        if g is None:
            continue
        s = float(np.sum(g.astype(np.float64) ** 2))
        if not math.isfinite(s):
            raise NumericalAbort(f"non-finite gradient in {n}", step=state.step)
        sq += s
    total_norm = math.sqrt(sq)
    clip_scale = 1.0 if total_norm <= config.grad_clip else config.grad_clip / total_norm

    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for n in names:
        p = params.tensors[n]
        g = grads.get(n)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {n}")
        else:
            g = g * clip_scale
        m = state.m[n]
        v = state.v[n]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        lr_eff = config.lr * lr_scale * (config.lambda_gen if params.groups[n] == "generator" else 1.0)
        if config.weight_decay:
            p.data -= lr_eff * config.weight_decay * p.data
        p.data -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
    return total_norm


def ema_update(ema, params, momentum):
    """ema <- momentum * ema + (1 - momentum) * params, elementwise."""
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if ema.names() != params.names():
        raise ShapeError("ema and params disagree on tensor names")
    for n in params.names():
        a, b = ema.tensors[n].data, params.tensors[n].data
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch for {n}: {a.shape} vs {b.shape}")
        a *= momentum
        a += (1.0 - momentum) * b
    return ema


def clone_params(params):
    from enar.model import ModelParams
    return ModelParams(
        tensors={n: dc.Tensor(params.tensors[n].data.copy(), requires_grad=True)
                 for n in params.names()},
        groups=dict(params.groups),
    )


def train(dataset, model_config, train_config, metrics_path=None, on_report=None,
          checkpoint_path=None, checkpoint_every=0, eval_fn=None):
    """Full training run; returns TrainResult(params, ema, reports).

    A non-finite loss or gradient raises NumericalAbort naming the step,
    epoch, and batch. When checkpoint_path is set, raw and EMA parameters are
    saved there at the end and every checkpoint_every epochs (0 = end only).
    """
    tc, mc = train_config, model_config
    tokens_all = np.asarray(dataset.tokens)
    labels_all = np.asarray(dataset.labels)
    n_seq, T, _ = tokens_all.shape
    rng = np.random.default_rng(tc.seed)
    params = init_params(mc, T, rng, dtype=np.float32)
    ema = clone_params(params)
    opt = init_optimizer(params)
    steps_per_epoch = max(1, math.ceil(n_seq / tc.batch_size))
    warmup_steps = tc.warmup_epochs * steps_per_epoch
    reports = []

    def save_checkpoint():
        if checkpoint_path is not None:
            from enar import serialization
            serialization.save_checkpoint(checkpoint_path, params, ema, mc, tc)

    writer = None
    csv_file = None
    if metrics_path is not None:
        csv_file = open(metrics_path, "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["step", "epoch", "phase", "loss", "fidelity_term",
                         "diversity_term", "grad_norm", "lr_effective"])
    step = 0
    try:
        for epoch in range(tc.epochs):
            phase = "final" if epoch >= tc.epochs - tc.final_epochs else "main"
            phase_tc = tc if phase == "final" else replace(tc, tau_train=1.0)
            perm = rng.permutation(n_seq)
            for bi in range(steps_per_epoch):
                idx = perm[bi * tc.batch_size:(bi + 1) * tc.batch_size]
                if idx.size == 0:
                    continue
                mask = np.stack([sample_mask(T, tc.mask_ratio_range, rng) for _ in idx])
                labels = cfg_dropout(labels_all[idx], tc.cfg_dropout_p, rng, mc.dummy_class)
                batch = SequenceBatch(tokens=tokens_all[idx], labels=labels, mask=mask)
                try:
                    loss, report = masked_energy_loss(batch, params, mc, phase_tc, rng)
                except FloatingPointError as e:
                    raise NumericalAbort(
                        f"{e} at step {step} (epoch {epoch}, batch {bi})",
                        step=step, epoch=epoch, batch_index=bi) from e
                if not math.isfinite(report.loss):
                    raise NumericalAbort(
                        f"non-finite loss {report.loss} at step {step} "
                        f"(epoch {epoch}, batch {bi})",
                        step=step, epoch=epoch, batch_index=bi)
                params.zero_grads()
                dc.backward(loss)
                grads = {n: params.tensors[n].grad for n in params.names()
                         if params.tensors[n].grad is not None}
                lr_scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
                try:
                    grad_norm = optimizer_step(params, grads, opt, tc, lr_scale)
                except NumericalAbort as e:
                    raise NumericalAbort(
                        f"{e} at step {step} (epoch {epoch}, batch {bi})",
                        step=step, epoch=epoch, batch_index=bi) from e
                ema_update(ema, params, tc.ema_momentum)
                report = replace(report, step=step, epoch=epoch, phase=phase,
                                 grad_norm=grad_norm, lr_effective=tc.lr * lr_scale)
                reports.append(report)
                if writer is not None:
                    writer.writerow([report.step, report.epoch, report.phase,
                                     f"{report.loss:.6f}", f"{report.fidelity_term:.6f}",
                                     f"{report.diversity_term:.6f}",
                                     f"{report.grad_norm:.6f}",
                                     f"{report.lr_effective:.8f}"])
                if on_report is not None:
                    on_report(report)
                step += 1
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint()
            if eval_fn is not None:
                eval_fn(epoch, params, ema)
    finally:
        if csv_file is not None:
            csv_file.close()
    save_checkpoint()
    return TrainResult(params=params, ema=ema, reports=reports)

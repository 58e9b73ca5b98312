"""Baseline likelihood heads for the head bakeoff.

Both heads replace the noise-driven generator with a density model read off
the same backbone hidden rows:

- Gaussian-MSE: the head predicts a mean; training minimizes the Gaussian NLL
  at a fixed sigma (which is MSE/(2 sigma^2) plus a constant), and sampling
  draws N(mu, sigma_infer^2 I) with a separately chosen inference sigma.
- GMM: the head predicts mixture weights, per-component means and variances
  (channel-independent within a component, variances floored at 1e-4);
  training minimizes the exact mixture NLL and sampling draws from the
  predicted mixture.

Head tensors live under "head." names, which keeps them in the backbone
optimizer group: the generator learning-rate multiplier is specific to the
noise-driven generator and is not applied to these single-layer heads.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from enar import diffcore as dc
from enar.errors import ConfigError, NumericalAbort, ShapeError
from enar.model import ModelParams, backbone_forward, embed_sequence, init_params
from enar.sampling import cosine_plan
from enar.training import (
    TrainReport,
    cfg_dropout,
    clone_params,
    ema_update,
    init_optimizer,
    optimizer_step,
    sample_mask,
)

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-4

HEAD_KINDS = ("gaussian", "gmm")


def _as_tensor(x):
    return x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x))


def gaussian_head_mean(h, w, b):
    """Predicted mean mu(h) = h @ w + b."""
    return dc.linear(_as_tensor(h), w, b)


def gaussian_head_loss(h, target, w, b, sigma):
    """Mean Gaussian NLL at fixed sigma: |y - mu(h)|^2 / (2 sigma^2) + (d/2) log(2 pi sigma^2).

    At sigma = 1 the gradient equals the gradient of half the summed squared
    error, so this is the MSE baseline with its constant made explicit.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    target = np.asarray(target)
    mu = gaussian_head_mean(h, w, b)
    if target.shape != mu.shape:
        raise ShapeError(f"target shape {target.shape} != predicted {mu.shape}")
    d = target.shape[-1]
    diff = dc.add(mu, dc.Tensor(-target.astype(mu.dtype)))
    sq = dc.reshape(dc.alpha_norm_pow(diff, 2.0), (-1,))
    const = 0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
    return dc.add_scalar(dc.mul_scalar(dc.mean(sq), 1.0 / (2.0 * sigma * sigma)), const)


def _sum_lastaxis(x):
    # per-row sum as a matmul against ones, shape [..., d] -> [...]
    ones = dc.Tensor(np.ones((x.shape[-1], 1), dtype=x.dtype))
    return dc.reshape(dc.linear(x, ones), x.shape[:-1])


def gmm_head_params(h, w, b, k):
    """Split the head projection into (logits [n,k], means [n,k,d], log_vars [n,k,d])."""
    h = _as_tensor(h)
    width = w.shape[1]
    if width % k != 0 or (width // k - 1) % 2 != 0:
        raise ShapeError(f"head width {width} does not factor as k*(1+2d) with k={k}")
    d = (width // k - 1) // 2
    raw = dc.linear(h, w, b)
    n = raw.shape[0]
    logits = raw[:, :k]
    means = dc.reshape(raw[:, k:k + k * d], (n, k, d))
    log_vars = dc.reshape(raw[:, k + k * d:], (n, k, d))
    return logits, means, log_vars


def gmm_head_loss(h, target, w, b, k):
    """Mean NLL of a k-component mixture of axis-aligned Gaussians.

    Weights are softmax(logits); each component factorizes over channels with
    variance exp(log_var) + 1e-4, so predicted variances never fall below the
    floor. With k = 1 this is the Gaussian NLL with learned per-channel sigma.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"k must be a positive integer, got {k!r}")
    target = np.asarray(target)
    logits, means, log_vars = gmm_head_params(h, w, b, k)
    n, _, d = means.shape
    if target.shape != (n, d):
        raise ShapeError(f"target shape {target.shape} != ({n}, {d})")

    var = dc.add_scalar(dc.exp(log_vars), VAR_FLOOR)
    y = dc.Tensor(target.astype(means.dtype).reshape(n, 1, d))
    diff = dc.add(y, dc.mul_scalar(means, -1.0))
    quad = dc.mul(dc.mul(diff, diff), dc.pow_scalar(var, -1.0))
    per_channel = dc.add(quad, dc.add_scalar(dc.log(var), LOG_2PI))
    comp_logdens = dc.mul_scalar(_sum_lastaxis(per_channel), -0.5)          # [n, k]

    lse = dc.logsumexp_lastaxis(logits)
    log_w = dc.add(logits, dc.mul_scalar(dc.reshape(lse, (n, 1)), -1.0))
    mixture = dc.logsumexp_lastaxis(dc.add(log_w, comp_logdens))            # [n]
    return dc.mul_scalar(dc.mean(mixture), -1.0)


def head_output_width(head, d_token, k):
    if head == "gaussian":
        return d_token
    if head == "gmm":
        return k * (1 + 2 * d_token)
    raise ConfigError(f"unknown head {head!r}, expected one of {HEAD_KINDS}")


def init_head_params(model_config, seq_len, rng, head, k=3, dtype=np.float32):
    """Backbone parameters plus a single linear head, no noise generator."""
    dtype = np.dtype(dtype)
    base = init_params(model_config, seq_len, rng, dtype=dtype)
    tensors = {n: t for n, t in base.tensors.items() if not n.startswith("gen.")}
    out = head_output_width(head, model_config.d_token, k)
    w = rng.standard_normal((model_config.d_model, out)).astype(dtype) \
        * dtype.type(model_config.d_model ** -0.5)
    tensors["head.w"] = dc.Tensor(w, requires_grad=True)
    tensors["head.b"] = dc.Tensor(np.zeros(out, dtype=dtype), requires_grad=True)
    return ModelParams(tensors=tensors)


def masked_head_loss(batch, params, model_config, head, rng,
                     sigma_train=1.0, k=3, train_mode=True):
    """Head NLL averaged over the masked rows of a batch."""
    mask = np.asarray(batch.mask, dtype=bool)
    emb = embed_sequence(batch.tokens, mask, batch.labels, params, model_config)
    hidden = backbone_forward(emb, params, model_config, train_mode=train_mode, rng=rng)
    rows = dc.gather_rows(hidden.values[:, model_config.n_class_tokens:, :], mask)
    targets = np.asarray(batch.tokens)[mask]
    w, b = params.tensors["head.w"], params.tensors["head.b"]
    if head == "gaussian":
        return gaussian_head_loss(rows, targets, w, b, sigma_train)
    if head == "gmm":
        return gmm_head_loss(rows, targets, w, b, k)
    raise ConfigError(f"unknown head {head!r}, expected one of {HEAD_KINDS}")


@dataclass
class HeadTrainResult:
    params: object
    ema: object
    reports: list


def train_head(dataset, model_config, train_config, head="gaussian",
               sigma_train=1.0, k=3, on_report=None):
    """Train a baseline head with the same masking, label dropout, optimizer,
    warmup, and EMA treatment as the energy model. tau has no role here, so
    there is no final phase."""
    from enar.training import SequenceBatch
    tc, mc = train_config, model_config
    tokens_all = np.asarray(dataset.tokens)
    labels_all = np.asarray(dataset.labels)
    n_seq, T, _ = tokens_all.shape
    rng = np.random.default_rng(tc.seed)
    params = init_head_params(mc, T, rng, head, k=k)
    ema = clone_params(params)
    opt = init_optimizer(params)
    steps_per_epoch = max(1, math.ceil(n_seq / tc.batch_size))
    warmup_steps = tc.warmup_epochs * steps_per_epoch
    reports = []
    step = 0
    for epoch in range(tc.epochs):
        perm = rng.permutation(n_seq)
        for bi in range(steps_per_epoch):
            idx = perm[bi * tc.batch_size:(bi + 1) * tc.batch_size]
            if idx.size == 0:
                continue
            mask = np.stack([sample_mask(T, tc.mask_ratio_range, rng) for _ in idx])
            labels = cfg_dropout(labels_all[idx], tc.cfg_dropout_p, rng, mc.dummy_class)
            batch = SequenceBatch(tokens=tokens_all[idx], labels=labels, mask=mask)
            try:
                loss = masked_head_loss(batch, params, mc, head, rng,
                                        sigma_train=sigma_train, k=k)
            except FloatingPointError as e:
                raise NumericalAbort(f"{e} at step {step}",
                                     step=step, epoch=epoch, batch_index=bi) from e
            if not math.isfinite(float(loss.item())):
                raise NumericalAbort(f"non-finite head loss at step {step}",
                                     step=step, epoch=epoch, batch_index=bi)
            params.zero_grads()
            dc.backward(loss)
            grads = {n: params.tensors[n].grad for n in params.names()
                     if params.tensors[n].grad is not None}
            lr_scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
            grad_norm = optimizer_step(params, grads, opt, tc, lr_scale)
            ema_update(ema, params, tc.ema_momentum)
            reports.append(TrainReport(
                step=step, epoch=epoch, phase="head", loss=float(loss.item()),
                fidelity_term=float(loss.item()), diversity_term=0.0,
                grad_norm=grad_norm, lr_effective=tc.lr * lr_scale))
            if on_report is not None:
                on_report(reports[-1])
            step += 1
    return HeadTrainResult(params=params, ema=ema, reports=reports)


def _draw_head_tokens(rows, params, model_config, head, rng, sigma_infer, k):
    w, b = params.tensors["head.w"], params.tensors["head.b"]
    if head == "gaussian":
        mu = gaussian_head_mean(rows, w, b).data
        return mu + sigma_infer * rng.standard_normal(mu.shape).astype(mu.dtype)
    logits, means, log_vars = gmm_head_params(rows, w, b, k)
    probs = dc.softmax_lastaxis(logits).data.astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    n = probs.shape[0]
    comp = np.array([rng.choice(k, p=probs[i]) for i in range(n)])
    mu = means.data[np.arange(n), comp]
    sd = np.sqrt(np.exp(log_vars.data[np.arange(n), comp]) + VAR_FLOOR)
    return (mu + sd * rng.standard_normal(mu.shape)).astype(np.float32)


def sample_head(params, model_config, labels, sample_config, head,
                sigma_infer=1.0, k=3):
    """Iterative masked decoding with a baseline head instead of the generator.

    Follows the same cosine reveal plan as the energy sampler; guidance and
    temperature do not apply, so each step is one conditional backbone pass.
    Returns [n, T, d_token] float32.
    """
    labels = np.asarray(labels)
    mc = model_config
    T = params.tensors["pos_embed"].shape[0] - mc.n_class_tokens
    steps = sample_config.steps if sample_config.steps is not None else min(T, 16)
    plan = cosine_plan(T, steps)
    rng = np.random.default_rng(sample_config.seed)
    rng_order = np.random.default_rng(sample_config.order_seed)
    n = labels.shape[0]
    order = np.stack([rng_order.permutation(T) for _ in range(n)])
    tokens = np.zeros((n, T, mc.d_token), dtype=np.float32)
    mask = np.ones((n, T), dtype=bool)
    start = 0
    with dc.no_grad():
        for size in plan:
            reveal = order[:, start:start + size]
            emb = embed_sequence(tokens, mask, labels, params, mc)
            hidden = backbone_forward(emb, params, mc, train_mode=False)
            body = hidden.values.data[:, mc.n_class_tokens:, :]
            rows = np.take_along_axis(body, reveal[:, :, None], axis=1).reshape(
                n * size, mc.d_model)
            drawn = _draw_head_tokens(rows, params, mc, head, rng, sigma_infer, k)
            drawn = drawn.reshape(n, size, mc.d_token)
            np.put_along_axis(tokens, reveal[:, :, None], drawn.astype(np.float32), axis=1)
            np.put_along_axis(mask, reveal, False, axis=1)
            start += size
    return tokens

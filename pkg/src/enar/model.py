"""Masked autoregressive transformer over continuous tokens.

The backbone embeds a partially masked token sequence behind a block of class
tokens and runs pre-norm attention/FFN layers. A separate MLP generator turns
each hidden state plus a fresh noise draw into one continuous token; its
adaptive-norm modulation layers are zero-initialized, so at init every
generator block is the identity and the output ignores the noise entirely.
"""

from dataclasses import dataclass, field

import numpy as np

from enar import diffcore as dc
from enar.errors import ConfigError, InputError, ShapeError

_NOISE_KINDS = ("uniform", "gaussian")
_ATTENTION_MODES = ("causal", "bidirectional")


@dataclass(frozen=True)
class ModelConfig:
    d_token: int = 4
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 96
    n_gen_blocks: int = 3
    d_noise: int = 16
    noise_kind: str = "uniform"
    attention_mode: str = "bidirectional"
    n_class_tokens: int = 4
    n_classes: int = 8
    dropout: float = 0.0

    def __post_init__(self):
        dims = {
            "d_token": self.d_token, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_mlp": self.d_mlp, "n_gen_blocks": self.n_gen_blocks,
            "d_noise": self.d_noise, "n_class_tokens": self.n_class_tokens,
            "n_classes": self.n_classes,
        }
        for name, v in dims.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.noise_kind not in _NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {_NOISE_KINDS}, got {self.noise_kind!r}")
        if self.attention_mode not in _ATTENTION_MODES:
            raise ConfigError(
                f"attention_mode must be one of {_ATTENTION_MODES}, got {self.attention_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dummy_class(self):
        # last row of the class table, used when conditioning is dropped
        return self.n_classes


@dataclass
class ModelParams:
    """Named parameter tensors, each tagged backbone or generator."""

    tensors: dict
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            if name not in self.groups:
                self.groups[name] = "generator" if name.startswith("gen.") else "backbone"
        extra = set(self.groups) - set(self.tensors)
        if extra:
            raise ConfigError(f"group tags without tensors: {sorted(extra)}")

    def names(self, group=None):
        out = sorted(self.tensors)
        if group is None:
            return out
        return [n for n in out if self.groups[n] == group]

    def count(self, group=None):
        return sum(self.tensors[n].data.size for n in self.names(group))

    def generator_fraction(self):
        return self.count("generator") / self.count()

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None


@dataclass(frozen=True)
class HiddenState:
    """Backbone output, shape [batch, n_class_tokens + T, d_model]."""

    values: dc.Tensor

    def __post_init__(self):
        if not np.all(np.isfinite(self.values.data)):
            raise FloatingPointError("hidden state contains non-finite values")


def _normal(rng, shape, dtype, std):
    return dc.Tensor(rng.standard_normal(shape).astype(dtype) * dtype.type(std),
                     requires_grad=True)


def _fan_in(rng, shape, dtype):
    # variance-preserving: keeps layer gains O(1) at any width, which the
    # pair-escape dynamics of the noise generator depend on
    return _normal(rng, shape, dtype, shape[0] ** -0.5)


def _zeros(shape, dtype):
    return dc.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return dc.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_params(config, seq_len, rng, dtype=np.float32):
    """Build and initialize all parameters for sequences of length seq_len.

    Modulation (shift/scale/gate) projections start at zero, which makes every
    generator block the identity. Other weight matrices use fan-in scaled
    normals, embedding tables N(0, 1/d_model); biases are zero, norm gains one.
    """
    dtype = np.dtype(dtype)
    c = config
    S = c.n_class_tokens + seq_len
    emb_std = c.d_model ** -0.5
    p = {}
    p["token_proj.w"] = _fan_in(rng, (c.d_token, c.d_model), dtype)
    p["token_proj.b"] = _zeros((c.d_model,), dtype)
    p["pos_embed"] = _normal(rng, (S, c.d_model), dtype, emb_std)
    p["class_table"] = _normal(rng, (c.n_classes + 1, c.d_model), dtype, emb_std)
    p["mask_token"] = _normal(rng, (c.d_model,), dtype, emb_std)
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = _ones((c.d_model,), dtype)
        p[pre + "ln1.b"] = _zeros((c.d_model,), dtype)
        for proj in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + proj] = _fan_in(rng, (c.d_model, c.d_model), dtype)
        for b in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + b] = _zeros((c.d_model,), dtype)
        p[pre + "ln2.g"] = _ones((c.d_model,), dtype)
        p[pre + "ln2.b"] = _zeros((c.d_model,), dtype)
        p[pre + "ffn.w1"] = _fan_in(rng, (c.d_model, 4 * c.d_model), dtype)
        p[pre + "ffn.b1"] = _zeros((4 * c.d_model,), dtype)
        p[pre + "ffn.w2"] = _fan_in(rng, (4 * c.d_model, c.d_model), dtype)
        p[pre + "ffn.b2"] = _zeros((c.d_model,), dtype)
    p["final_ln.g"] = _ones((c.d_model,), dtype)
    p["final_ln.b"] = _zeros((c.d_model,), dtype)

    p["gen.hidden_proj.w"] = _fan_in(rng, (c.d_model, c.d_mlp), dtype)
    p["gen.hidden_proj.b"] = _zeros((c.d_mlp,), dtype)
    p["gen.noise_embed.w"] = _fan_in(rng, (c.d_noise, c.d_mlp), dtype)
    p["gen.noise_embed.b"] = _zeros((c.d_mlp,), dtype)
    for i in range(c.n_gen_blocks):
        pre = f"gen.blocks.{i}."
        for mod in ("shift", "scale", "gate"):
            p[pre + mod + ".w"] = _zeros((c.d_mlp, c.d_mlp), dtype)
            p[pre + mod + ".b"] = _zeros((c.d_mlp,), dtype)
        p[pre + "ffn.w1"] = _fan_in(rng, (c.d_mlp, c.d_mlp), dtype)
        p[pre + "ffn.b1"] = _zeros((c.d_mlp,), dtype)
        p[pre + "ffn.w2"] = _fan_in(rng, (c.d_mlp, c.d_mlp), dtype)
        p[pre + "ffn.b2"] = _zeros((c.d_mlp,), dtype)
    p["gen.head.w"] = _fan_in(rng, (c.d_mlp, c.d_token), dtype)
    p["gen.head.b"] = _zeros((c.d_token,), dtype)
    return ModelParams(tensors=p)


def embed_sequence(tokens, mask, labels, params, config):
    """Project tokens, swap masked positions for the mask token, prepend class
    tokens, and add positional embeddings.

    tokens: Tensor or array [B, T, d_token]; mask: bool [B, T] (True = hidden);
    labels: int [B], values in [0, n_classes] where n_classes is the dummy.
    """
    t = params.tensors
    c = config
    if not isinstance(tokens, dc.Tensor):
        tokens = dc.Tensor(tokens)
    B, T, d = tokens.shape
    if d != c.d_token:
        raise ShapeError(f"tokens have d_token={d}, config says {c.d_token}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, T):
        raise ShapeError(f"mask shape {mask.shape} does not match tokens {(B, T)}")
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({B},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() > c.n_classes:
        raise InputError(
            f"labels must lie in [0, {c.n_classes}] (last id is the dummy), "
            f"got range [{labels.min()}, {labels.max()}]")

    projected = dc.linear(tokens, t["token_proj.w"], t["token_proj.b"])
    keep = dc.Tensor((~mask)[:, :, None].astype(projected.dtype))
    hide = dc.Tensor(mask[:, :, None].astype(projected.dtype))
    body = dc.add(dc.mul(projected, keep), dc.mul(t["mask_token"], hide))

    class_row = dc.reshape(dc.embedding(t["class_table"], labels), (B, 1, c.d_model))
    head = dc.concat([class_row] * c.n_class_tokens, axis=1)
    seq = dc.concat([head, body], axis=1)
    pos = t["pos_embed"]
    if pos.shape[0] != c.n_class_tokens + T:
        raise ShapeError(
            f"positional table covers {pos.shape[0]} positions, "
            f"sequence needs {c.n_class_tokens + T}")
    return dc.add(seq, pos)


def _dropout(x, p, train_mode, rng):
    if not train_mode or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.array(1.0 - p, dtype=x.dtype)
    return dc.mul(x, dc.Tensor(keep))


def backbone_forward(embedded, params, config, train_mode=False, rng=None):
    """Run the pre-norm transformer stack; returns a HiddenState."""
    t = params.tensors
    c = config
    if train_mode and c.dropout > 0.0 and rng is None:
        raise ConfigError("train_mode with dropout needs an rng")
    x = embedded
    for i in range(c.n_layers):
        pre = f"layers.{i}."
        h = dc.layer_norm(x, t[pre + "ln1.g"], t[pre + "ln1.b"])
        q = dc.linear(h, t[pre + "attn.wq"], t[pre + "attn.bq"])
        k = dc.linear(h, t[pre + "attn.wk"], t[pre + "attn.bk"])
        v = dc.linear(h, t[pre + "attn.wv"], t[pre + "attn.bv"])
        a = dc.attention(q, k, v, c.n_heads, mode=c.attention_mode)
        a = dc.linear(a, t[pre + "attn.wo"], t[pre + "attn.bo"])
        x = dc.add(x, _dropout(a, c.dropout, train_mode, rng))
        h = dc.layer_norm(x, t[pre + "ln2.g"], t[pre + "ln2.b"])
        f = dc.linear(dc.silu(dc.linear(h, t[pre + "ffn.w1"], t[pre + "ffn.b1"])),
                      t[pre + "ffn.w2"], t[pre + "ffn.b2"])
        x = dc.add(x, _dropout(f, c.dropout, train_mode, rng))
    x = dc.layer_norm(x, t["final_ln.g"], t["final_ln.b"])
    return HiddenState(values=x)


def draw_noise(batch, config, rng, dtype=np.float32):
    """One noise row per generator call, i.i.d. per entry."""
    if config.noise_kind == "uniform":
        raw = rng.random((batch, config.d_noise)) - 0.5
    else:
        raw = rng.standard_normal((batch, config.d_noise))
    return dc.Tensor(raw.astype(np.dtype(dtype)))


def generator_forward(h, eps, params, config, tau_infer=1.0):
    """Map hidden rows [n, d_model] plus noise [n, d_noise] to tokens [n, d_token].

    Per block: h_mod = (1 + scale(e)) * LN(h) + tau_infer * shift(e), then
    h = h + gate(e) * FFN(h_mod). The norms inside are parameter-free; only
    the shift branch feels tau_infer.
    """
    if tau_infer <= 0:
        raise ConfigError(f"tau_infer must be > 0, got {tau_infer}")
    t = params.tensors
    if not isinstance(h, dc.Tensor):
        h = dc.Tensor(h)
    if not isinstance(eps, dc.Tensor):
        eps = dc.Tensor(eps)
    x = dc.linear(h, t["gen.hidden_proj.w"], t["gen.hidden_proj.b"])
    e = dc.linear(eps, t["gen.noise_embed.w"], t["gen.noise_embed.b"])
    for i in range(config.n_gen_blocks):
        pre = f"gen.blocks.{i}."
        scale = dc.linear(e, t[pre + "scale.w"], t[pre + "scale.b"])
        shift = dc.linear(e, t[pre + "shift.w"], t[pre + "shift.b"])
        gate = dc.linear(e, t[pre + "gate.w"], t[pre + "gate.b"])
        ln = dc.layer_norm(x)
        modulated = dc.add(dc.mul(dc.add_scalar(scale, 1.0), ln),
                           dc.mul_scalar(shift, float(tau_infer)))
        f = dc.linear(dc.silu(dc.linear(modulated, t[pre + "ffn.w1"], t[pre + "ffn.b1"])),
                      t[pre + "ffn.w2"], t[pre + "ffn.b2"])
        x = dc.add(x, dc.mul(gate, f))
    return dc.linear(x, t["gen.head.w"], t["gen.head.b"])


def predict_pair(h, params, config, rng):
    """Two independent tokens per hidden row, for the paired energy loss."""
    n = h.shape[0]
    dtype = params.tensors["gen.head.w"].dtype
    eps1 = draw_noise(n, config, rng, dtype)
    eps2 = draw_noise(n, config, rng, dtype)
    x1 = generator_forward(h, eps1, params, config, tau_infer=1.0)
    x2 = generator_forward(h, eps2, params, config, tau_infer=1.0)
    return x1, x2

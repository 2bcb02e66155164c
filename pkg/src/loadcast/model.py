"""The three forecasting networks and their composition.

Stage 1 (initial prediction): a 7-layer residual conv stack turns the
1x9x24 feature matrix into a C x 5 x 12 grid, two-direction sinusoidal
position signals are added, the 60 grid cells become tokens of width
``d_model``, an attention encoder/decoder stack transforms them, and a
two-layer head regresses the 24 hourly loads.

Stage 2 (refinement): a GRU walks the 24 hour columns (each column plus
the stage-1 prediction for that hour), and a small head maps the full
hidden sequence to a 24-point correction added to the initial forecast.

Token sequences are row-major ``(n, d)`` / ``(B, n, d)``.  The standalone
:func:`self_attention` and :func:`multi_head_attention` operate in the
column-token convention (``X`` is ``(d, n)``, ``Q = W^q X``); both
orientations compute the same attention and are cross-checked in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import HOURS, FEATURE_ROWS, FeatureMatrix, NormStats
from .errors import ConfigError, NumericError, ShapeError
from .nn import (BatchNormState, GRUWeights, batchnorm2d, conv2d, gru_sequence,
                 layer_norm, linear, pointwise_conv)
from .tensor import Tensor

N_CONV_LAYERS = 7
CONV_STRIDES = (1, 2, 1, 1, 1, 1, 1)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``conv_channels`` has one width per conv layer; the last width is the
    token feature length and must equal ``d_model``.  Only the second conv
    layer uses stride 2.
    """

    conv_channels: tuple[int, ...] = (16, 32, 32, 64, 64, 64, 64)
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_hidden: int = 128
    head_hidden: int = 128
    gru_hidden: int = 32
    refine_hidden: int = 64
    n_queries: int = HOURS
    dropout: float = 0.0
    residual_skips: bool = True
    input_rows: int = FEATURE_ROWS

    def __post_init__(self) -> None:
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    def validate(self) -> None:
        if len(self.conv_channels) != N_CONV_LAYERS:
            raise ConfigError(f"need exactly {N_CONV_LAYERS} conv widths, "
                              f"got {len(self.conv_channels)}")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv widths must be positive")
        if self.d_model != self.conv_channels[-1]:
            raise ConfigError(f"d_model ({self.d_model}) must equal the last conv "
                              f"width ({self.conv_channels[-1]})")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the position encoding")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must divide evenly into "
                              f"{self.n_heads} heads")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("ffn_hidden", "head_hidden", "gru_hidden", "refine_hidden", "n_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def token_grid(self) -> tuple[int, int]:
        return (math.ceil(self.input_rows / 2), math.ceil(HOURS / 2))

    @property
    def n_tokens(self) -> int:
        h, w = self.token_grid
        return h * w

    @property
    def head_tokens(self) -> int:
        return self.n_queries if self.n_decoder_layers > 0 else self.n_tokens

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels), "d_model": self.d_model,
            "n_heads": self.n_heads, "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers, "ffn_hidden": self.ffn_hidden,
            "head_hidden": self.head_hidden, "gru_hidden": self.gru_hidden,
            "refine_hidden": self.refine_hidden, "n_queries": self.n_queries,
            "dropout": self.dropout, "residual_skips": self.residual_skips,
            "input_rows": self.input_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{k: (tuple(v) if k == "conv_channels" else v) for k, v in d.items()})
        cfg.validate()
        return cfg


def tiny_config() -> ModelConfig:
    """A 4-channel configuration small enough for finite-difference checks."""
    return ModelConfig(conv_channels=(4, 4, 4, 4, 4, 4, 8), d_model=8, n_heads=2,
                       n_encoder_layers=1, n_decoder_layers=1, ffn_hidden=16,
                       head_hidden=32, gru_hidden=8, refine_hidden=16)


class ModelParams:
    """All learnable weights, keyed by canonical dotted names.

    Stage-1 names start with ``s1.`` and stage-2 names with ``s2.``; the
    two sets are disjoint, so refinement training can never touch the
    frozen initial-prediction network.  Batchnorm running statistics live
    beside the tensors in ``bn``.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.stage2_trained = False

    def stage_params(self, stage: int) -> dict[str, Tensor]:
        prefix = f"s{stage}."
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def gru_weights(self) -> GRUWeights:
        t = self.tensors
        return GRUWeights(**{k: t[f"s2.gru.{k}"] for k in
                             ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                              "w_c", "u_c", "b_c")})

    def snapshot_stage1(self) -> bytes:
        """Byte image of every stage-1 tensor and running stat (freeze checks)."""
        chunks = []
        for name in sorted(self.tensors):
            if name.startswith("s1."):
                chunks.append(self.tensors[name].data.tobytes())
        for name in sorted(self.bn):
            chunks.append(self.bn[name].running_mean.tobytes())
            chunks.append(self.bn[name].running_var.tobytes())
        return b"".join(chunks)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                     fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded parameter initialization for both stages.

    Conv and linear weights are Kaiming-uniform over fan-in, recurrent
    weights uniform within 1/sqrt(hidden), biases zero.  The refinement
    head's output layer starts at exactly zero so an untrained stage 2 is
    the identity refinement.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams(config)
    t = p.tensors

    def param(name: str, values: np.ndarray) -> None:
        t[name] = Tensor(values, requires_grad=True)

    chans = (1,) + config.conv_channels
    for i in range(1, N_CONV_LAYERS + 1):
        c_in, c_out = chans[i - 1], chans[i]
        param(f"s1.conv{i}.kernel", _kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        param(f"s1.bn{i}.gamma", np.ones(c_out))
        param(f"s1.bn{i}.beta", np.zeros(c_out))
        p.bn[f"s1.bn{i}"] = BatchNormState.zeros(c_out)
    # projection shortcuts; identity skips need no weights
    param("s1.skip1.weight", _kaiming_uniform(rng, (chans[2], chans[0]), chans[0]))
    if chans[2] != chans[4]:
        param("s1.skip2.weight", _kaiming_uniform(rng, (chans[4], chans[2]), chans[2]))
    if chans[4] != chans[6]:
        param("s1.skip3.weight", _kaiming_uniform(rng, (chans[6], chans[4]), chans[4]))

    d = config.d_model
    d_head = d // config.n_heads
    for kind, n_layers in (("enc", config.n_encoder_layers),
                           ("dec", config.n_decoder_layers)):
        for l in range(1, n_layers + 1):
            pre = f"s1.{kind}{l}"
            for h in range(1, config.n_heads + 1):
                for w in ("wq", "wk", "wv"):
                    param(f"{pre}.head{h}.{w}", _kaiming_uniform(rng, (d, d_head), d))
            param(f"{pre}.attn.wo", _kaiming_uniform(rng, (d, d), d))
            param(f"{pre}.attn.bo", np.zeros(d))
            param(f"{pre}.ln1.gamma", np.ones(d))
            param(f"{pre}.ln1.beta", np.zeros(d))
            param(f"{pre}.ffn.w1", _kaiming_uniform(rng, (d, config.ffn_hidden), d))
            param(f"{pre}.ffn.b1", np.zeros(config.ffn_hidden))
            param(f"{pre}.ffn.w2", _kaiming_uniform(rng, (config.ffn_hidden, d),
                                                    config.ffn_hidden))
            param(f"{pre}.ffn.b2", np.zeros(d))
            param(f"{pre}.ln2.gamma", np.ones(d))
            param(f"{pre}.ln2.beta", np.zeros(d))
    if config.n_decoder_layers > 0:
        param("s1.queries", rng.uniform(-1.0, 1.0, (config.n_queries, d)) / math.sqrt(d))

    head_in = config.head_tokens * d
    param("s1.head.w1", _kaiming_uniform(rng, (head_in, config.head_hidden), head_in))
    param("s1.head.b1", np.zeros(config.head_hidden))
    param("s1.head.w2", _kaiming_uniform(rng, (config.head_hidden, HOURS),
                                         config.head_hidden))
    param("s1.head.b2", np.zeros(HOURS))

    g = config.gru_hidden
    d_in = FEATURE_ROWS + 1
    bound = 1.0 / math.sqrt(g)
    for gate in ("z", "r", "c"):
        param(f"s2.gru.w_{gate}", rng.uniform(-bound, bound, (d_in, g)))
        param(f"s2.gru.u_{gate}", rng.uniform(-bound, bound, (g, g)))
        param(f"s2.gru.b_{gate}", np.zeros(g))
    param("s2.ffn.w1", _kaiming_uniform(rng, (HOURS * g, config.refine_hidden), HOURS * g))
    param("s2.ffn.b1", np.zeros(config.refine_hidden))
    param("s2.ffn.w2", np.zeros((config.refine_hidden, HOURS)))
    param("s2.ffn.b2", np.zeros(HOURS))
    return p


# -- stage 1: feature extraction ------------------------------------------------


def feature_extract(x: Tensor, params: ModelParams, training: bool = False) -> Tensor:
    """Residual conv stack: ``(B, 1, 9, 24)`` (or unbatched) to ``(B, C7, 5, 12)``.

    Seven conv->batchnorm->relu layers, stride 2 on layer 2 only.  Shortcut
    connections wrap layer pairs (1,2), (3,4), (5,6): identity when the
    pair preserves channel count, a 1x1 projection otherwise.
    """
    cfg = params.config
    t = params.tensors

    def conv_bn_relu(i: int, inp: Tensor) -> Tensor:
        y = conv2d(inp, t[f"s1.conv{i}.kernel"], CONV_STRIDES[i - 1])
        y = batchnorm2d(y, t[f"s1.bn{i}.gamma"], t[f"s1.bn{i}.beta"],
                        params.bn[f"s1.bn{i}"], training)
        return y.relu()

    def skip(name: str, source: Tensor, stride: int = 1) -> Tensor:
        if name in t:
            return pointwise_conv(source, t[name], stride)
        return source

    a = conv_bn_relu(2, conv_bn_relu(1, x))
    if cfg.residual_skips:
        a = a + skip("s1.skip1.weight", x, stride=2)
    b = conv_bn_relu(4, conv_bn_relu(3, a))
    if cfg.residual_skips:
        b = b + skip("s1.skip2.weight", a)
    c = conv_bn_relu(6, conv_bn_relu(5, b))
    if cfg.residual_skips:
        c = c + skip("s1.skip3.weight", b)
    return conv_bn_relu(7, c)


# -- stage 1: position encoding and attention --------------------------------------


def sinusoid_table(n_positions: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table of shape ``(n_positions, d_model)``.

    Entry ``(p, 2r)`` is ``sin(p / 10000^(2r/d_model))`` and entry
    ``(p, 2r+1)`` is the matching cosine.
    """
    if d_model % 2:
        raise ShapeError(f"d_model must be even, got {d_model}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    angles = pos / np.power(10000.0, np.arange(0, d_model, 2) / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def positional_encode_2d(f: Tensor) -> Tensor:
    """Add row-wise and column-wise sinusoidal position signals to a feature grid.

    ``f`` is ``(C, H, W)`` or ``(B, C, H, W)`` with even ``C``; one table is
    indexed by the row position, one by the column position, and both are
    summed into the features.
    """
    c, h, w = f.shape[-3], f.shape[-2], f.shape[-1]
    if c % 2:
        raise ShapeError(f"positional_encode_2d needs an even channel count, got {c}")
    rows = sinusoid_table(h, c)
    cols = sinusoid_table(w, c)
    pe = rows.T[:, :, None] + cols.T[:, None, :]
    return f + Tensor(pe)


def self_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Single-head attention in the column-token convention.

    ``x`` is ``(d, n)`` with one token per column.  Projections are
    ``Q = W^q x``, ``K = W^k x``, ``V = W^v x``; the weights
    ``softmax(K^T Q / sqrt(d_k))`` are normalized per column (``d_k`` is
    the row count of ``K``), and the output is ``V @ weights``.
    """
    q = w_q.matmul(x)
    k = w_k.matmul(x)
    v = w_v.matmul(x)
    d_k = k.shape[0]
    if d_k == 0:
        raise ShapeError("self_attention: K has zero rows")
    scores = k.T.matmul(q) * (1.0 / math.sqrt(d_k))
    alpha = scores.softmax(axis=0)
    return v.matmul(alpha)


def multi_head_attention(x: Tensor, head_weights: Sequence[tuple[Tensor, Tensor, Tensor]],
                         w_out: Tensor, b_out: Tensor | None = None) -> Tensor:
    """Concatenated per-head :func:`self_attention` plus an output projection.

    Same column-token convention as :func:`self_attention`; each head's
    ``(w_q, w_k, w_v)`` projects to ``d/n_heads`` rows.
    """
    if not head_weights:
        raise ShapeError("multi_head_attention needs at least one head")
    heads = [self_attention(x, wq, wk, wv) for wq, wk, wv in head_weights]
    cat = heads[0] if len(heads) == 1 else Tensor.concat(heads, axis=0)
    out = w_out.matmul(cat)
    if b_out is not None:
        out = out + b_out.reshape(-1, 1)
    return out


def _dropout(x: Tensor, rate: float, training: bool,
             rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or not training or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def _mha_rows(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    # batched multi-head self-attention on (B, n, d) row tokens
    cfg = params.config
    t = params.tensors
    d_head = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(d_head)
    outs = []
    for h in range(1, cfg.n_heads + 1):
        q = x.matmul(t[f"{prefix}.head{h}.wq"])
        k = x.matmul(t[f"{prefix}.head{h}.wk"])
        v = x.matmul(t[f"{prefix}.head{h}.wv"])
        alpha = (q.matmul(k.swapaxes(-1, -2)) * scale).softmax(axis=-1)
        outs.append(alpha.matmul(v))
    cat = outs[0] if len(outs) == 1 else Tensor.concat(outs, axis=-1)
    return linear(cat, t[f"{prefix}.attn.wo"], t[f"{prefix}.attn.bo"])


def _attention_block(x: Tensor, params: ModelParams, prefix: str, training: bool,
                     rng: np.random.Generator | None) -> Tensor:
    cfg = params.config
    t = params.tensors
    a = _dropout(_mha_rows(x, params, prefix), cfg.dropout, training, rng)
    x = layer_norm(x + a, t[f"{prefix}.ln1.gamma"], t[f"{prefix}.ln1.beta"])
    f = linear(linear(x, t[f"{prefix}.ffn.w1"], t[f"{prefix}.ffn.b1"]).relu(),
               t[f"{prefix}.ffn.w2"], t[f"{prefix}.ffn.b2"])
    f = _dropout(f, cfg.dropout, training, rng)
    return layer_norm(x + f, t[f"{prefix}.ln2.gamma"], t[f"{prefix}.ln2.beta"])


def encoder_decoder_forward(tokens: Tensor, params: ModelParams, training: bool = False,
                            rng: np.random.Generator | None = None) -> Tensor:
    """Attention encoder/decoder over row tokens ``(n, d)`` or ``(B, n, d)``.

    Encoder blocks self-attend over the input tokens.  When decoder layers
    are configured, 24 learned query tokens are appended to the encoded
    sequence, the decoder blocks self-attend over the joint sequence, and
    the query positions are returned; with zero decoder layers the encoded
    sequence itself is returned.  Zero layers on both sides is the
    identity.
    """
    cfg = params.config
    squeeze = tokens.ndim == 2
    x = tokens.reshape((1,) + tokens.shape) if squeeze else tokens
    for l in range(1, cfg.n_encoder_layers + 1):
        x = _attention_block(x, params, f"s1.enc{l}", training, rng)
    if cfg.n_decoder_layers > 0:
        b, n = x.shape[0], x.shape[1]
        queries = params.tensors["s1.queries"]
        q = queries.reshape((1,) + queries.shape).expand((b,) + queries.shape)
        y = Tensor.concat([x, q], axis=1)
        for l in range(1, cfg.n_decoder_layers + 1):
            y = _attention_block(y, params, f"s1.dec{l}", training, rng)
        x = y[:, n:, :]
    return x.reshape(x.shape[1:]) if squeeze else x


def ffn_regress_head(z: Tensor, params: ModelParams) -> Tensor:
    """Two affine layers with a ReLU between, mapping flattened decoder
    output to the 24 hourly values (linear output)."""
    t = params.tensors
    squeeze = z.ndim == 2
    zb = z.reshape((1,) + z.shape) if squeeze else z
    flat = zb.reshape((zb.shape[0], zb.shape[1] * zb.shape[2]))
    out = linear(linear(flat, t["s1.head.w1"], t["s1.head.b1"]).relu(),
                 t["s1.head.w2"], t["s1.head.b2"])
    return out.reshape((HOURS,)) if squeeze else out


def forward_initial(x: Tensor, params: ModelParams, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Full stage-1 forward: feature matrices ``(B, 1, 9, 24)`` to ``(B, 24)``."""
    cfg = params.config
    f = feature_extract(x, params, training)
    f = positional_encode_2d(f)
    squeeze = f.ndim == 3
    fb = f.reshape((1,) + f.shape) if squeeze else f
    b, c = fb.shape[0], fb.shape[1]
    tokens = fb.reshape((b, c, cfg.n_tokens)).swapaxes(1, 2)
    z = encoder_decoder_forward(tokens, params, training, rng)
    y = ffn_regress_head(z, params)
    return y.reshape((HOURS,)) if squeeze else y


# -- stage 2: residual refinement ---------------------------------------------------


def refine_load(feature_values: Tensor, y_init: Tensor, params: ModelParams) -> Tensor:
    """Predict the 24-point correction for an initial forecast.

    ``feature_values`` is the normalized 9x24 matrix (``(B, 9, 24)`` or
    unbatched) and ``y_init`` the matching normalized stage-1 output.  Hour
    ``t`` of the GRU input is the feature column ``t`` plus ``y_init[t]``;
    the head maps the concatenation of all 24 hidden states to the
    correction.
    """
    t = params.tensors
    cfg = params.config
    squeeze = feature_values.ndim == 2
    fb = feature_values.reshape((1,) + feature_values.shape) if squeeze else feature_values
    yb = y_init.reshape((1,) + y_init.shape) if y_init.ndim == 1 else y_init
    steps = fb.swapaxes(1, 2)                      # (B, 24, 9)
    seq = Tensor.concat([steps, yb.reshape(yb.shape + (1,))], axis=2)
    h0 = Tensor(np.zeros(cfg.gru_hidden))
    hs = gru_sequence(seq, h0, params.gru_weights())  # (B, 24, H)
    flat = hs.reshape((hs.shape[0], HOURS * cfg.gru_hidden))
    e = linear(linear(flat, t["s2.ffn.w1"], t["s2.ffn.b1"]).relu(),
               t["s2.ffn.w2"], t["s2.ffn.b2"])
    return e.reshape((HOURS,)) if squeeze else e


# -- whole-pipeline prediction ------------------------------------------------------


@dataclass
class DayPrediction:
    """One day-ahead forecast in normalized and load units.

    ``y_refine_norm`` is exactly ``y_init_norm + e_star_norm``.
    """

    target_date: object
    y_init_norm: np.ndarray
    e_star_norm: np.ndarray
    y_refine_norm: np.ndarray
    y_init: np.ndarray
    e_star: np.ndarray
    y_refine: np.ndarray


def predict_day(fm: FeatureMatrix, params: ModelParams, stats: NormStats) -> DayPrediction:
    """Run both stages on one feature matrix (batchnorm in eval mode)."""
    x = Tensor(fm.values[None, None, :, :])
    y_init_t = forward_initial(x, params, training=False)
    if not np.isfinite(y_init_t.data).all():
        raise NumericError(f"{fm.target_date}: initial prediction stage produced "
                           f"non-finite values")
    y_init = y_init_t.data[0]
    e_star = refine_load(Tensor(fm.values[None, :, :]), Tensor(y_init[None, :]),
                         params).data[0]
    if not np.isfinite(e_star).all():
        raise NumericError(f"{fm.target_date}: refinement stage produced non-finite values")
    y_refine = y_init + e_star
    lo, hi = stats.ranges["target"]
    return DayPrediction(
        target_date=fm.target_date,
        y_init_norm=y_init, e_star_norm=e_star, y_refine_norm=y_refine,
        y_init=stats.denormalize("target", y_init),
        e_star=e_star * (hi - lo),
        y_refine=stats.denormalize("target", y_refine),
    )

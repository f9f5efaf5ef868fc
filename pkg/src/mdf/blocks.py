"""Learnable building blocks: stochastic MLPs, embeddings, attention, codecs.

Stochastic networks (SNNs) keep dropout active at inference; one forward pass
with a fresh RNG stream is one posterior sample, and an ensemble is E passes
with per-member streams. Masks are plain 0/1 keep-masks without inverse
rescaling, so the expected output of a dropped layer is (1-p) times its
noiseless value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import ParameterStore, RngStream

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class SnnSpec:
    """Layer widths (input first, output last), hidden activation, dropout.

    ``final_linear`` keeps the last layer free of activation and dropout,
    which is what output-producing networks want; mid-network stacks set it
    to False so every layer is activated and dropped.
    """

    widths: tuple
    activation: str = "relu"
    p: float = 0.1
    final_linear: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("SnnSpec needs at least input and output widths")
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"dropout rate must be inside (0, 1), got {self.p}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation}")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ModelConfig:
    """Shared dimensions and sub-network widths.

    Defaults follow the full-scale setup (latent width 256, 8 heads); tests
    and the smoke pipeline use ``ModelConfig.small()``.
    """

    d_x: int = 256
    E: int = 32
    N: int = 8
    heads: int = 8
    attn_layers: int = 3
    pre_layers: int = 3
    action_dim: int = 40
    state_dim: int = 7
    proprio_dim: int = 30
    image_hw: int = 32
    max_seq: int = 64
    dropout: float = 0.1
    activation: str = "relu"
    conv_channels: tuple = (8, 16)
    image_tail: tuple = (512,)
    proprio_widths: tuple = (128, 256, 512)
    decoder_widths: tuple = (256, 128, 32)
    lift_widths: tuple = (128, 256, 512, 1024)
    post_widths: tuple = (256, 256)
    modalities: tuple = ("rgb", "depth", "proprio")

    def __post_init__(self):
        if self.d_x % 2:
            raise ValueError("d_x must be even (sin/cos pairing)")
        if self.d_x % self.heads:
            raise ValueError("d_x must be divisible by head count")
        if not (0.0 < self.dropout < 1.0):
            raise ValueError("dropout must be inside (0, 1)")
        if self.E < 2:
            raise ValueError("ensemble size must be at least 2")

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Desk-scale config used throughout the test suite."""
        base = dict(d_x=32, E=16, N=8, heads=2, attn_layers=1, pre_layers=1,
                    conv_channels=(4, 8), image_tail=(64,),
                    proprio_widths=(64,), decoder_widths=(64, 32),
                    lift_widths=(64,), post_widths=(32,))
        base.update(overrides)
        return cls(**base)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.d_x, self.heads)


def member_generators(stream: RngStream, E: int) -> list:
    """One persistent generator per ensemble member; member i's draws do not
    depend on E, so prefixes of larger ensembles reproduce smaller ones."""
    return [stream.child("member", i).generator() for i in range(E)]


# ---------------------------------------------------------------------------
# stochastic MLPs


def build_snn(store: ParameterStore, prefix: str, spec: SnnSpec,
              gen: np.random.Generator) -> None:
    for l in range(len(spec.widths) - 1):
        store.add_glorot(f"{prefix}/w{l}", gen, spec.widths[l + 1], spec.widths[l])
        store.add_zeros(f"{prefix}/b{l}", (spec.widths[l + 1], 1))


def snn_apply(store: ParameterStore, prefix: str, spec: SnnSpec, x: Tensor,
              gens: list | None) -> Tensor:
    """Batched forward pass; columns of ``x`` are independent samples.

    ``gens`` holds one generator per column (dropout masks are drawn from
    them layer by layer, in order). Pass ``None`` to run the same stack as a
    deterministic MLP with no dropout.
    """
    if x.data.ndim != 2 or x.shape[0] != spec.widths[0]:
        raise ShapeError(f"{prefix}: input {x.shape}, expected ({spec.widths[0]}, n)")
    cols = x.shape[1]
    if gens is not None and len(gens) != cols:
        raise ShapeError(f"{prefix}: {len(gens)} streams for {cols} columns")
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.widths) - 1
    h = x
    for l in range(n_layers):
        w = store.get(f"{prefix}/w{l}")
        b = store.get(f"{prefix}/b{l}")
        h = ad.add(ad.matmul(w, h), b)
        if l < n_layers - 1 or not spec.final_linear:
            h = act(h)
            if gens is not None:
                width = spec.widths[l + 1]
                mask = np.empty((width, cols))
                for i, g in enumerate(gens):
                    mask[:, i] = g.random(width) >= spec.p
                h = ad.dropout_mask(h, mask)
    return h


def snn_sample(store: ParameterStore, prefix: str, spec: SnnSpec, x: Tensor,
               stream: RngStream) -> Tensor:
    """One stochastic forward pass of a single column vector."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise ShapeError(f"snn_sample wants a column vector, got {x.shape}")
    return snn_apply(store, prefix, spec, x, [stream.generator()])


# ---------------------------------------------------------------------------
# embeddings


def positional_embed(indices, d: int, max_seq: int = 64) -> np.ndarray:
    """Sinusoidal position code, one column per index, shape (d, len).

    Even rows carry sin, odd rows cos, frequency decaying by row pair.
    Parameter-free and deterministic.
    """
    if d % 2:
        raise ShapeError(f"positional_embed: dimension {d} must be even")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("positional_embed: empty index list")
    if idx.min() < 0 or idx.max() >= max_seq:
        raise ShapeError(f"positional_embed: index outside [0, {max_seq})")
    half = d // 2
    freqs = np.power(10000.0, -np.arange(half) / half)  # (half,)
    angles = freqs[:, None] * idx[None, :]              # (half, len)
    out = np.empty((d, idx.size))
    out[0::2, :] = np.sin(angles)
    out[1::2, :] = np.cos(angles)
    return out


_TOKEN_KINDS = {"state": 0, "action": 1}


def build_type_table(store: ParameterStore, prefix: str, d: int,
                     gen: np.random.Generator) -> None:
    store.add(f"{prefix}/types", 0.01 * gen.standard_normal((d, len(_TOKEN_KINDS))))


def type_embed(store: ParameterStore, prefix: str, kinds) -> Tensor:
    """Learned per-kind columns for kinds drawn from {state, action}."""
    if not kinds:
        raise ShapeError("type_embed: empty kind list")
    try:
        idx = [_TOKEN_KINDS[k] for k in kinds]
    except KeyError as e:
        raise ValueError(f"type_embed: unknown token kind {e.args[0]!r}") from None
    return ad.take_columns(store.get(f"{prefix}/types"), idx)


# ---------------------------------------------------------------------------
# self attention


def build_attention(store: ParameterStore, prefix: str, cfg: AttentionConfig,
                    gen: np.random.Generator) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add_glorot(f"{prefix}/{name}", gen, cfg.dim, cfg.dim)


def self_attention(store: ParameterStore, prefix: str, tokens: Tensor,
                   cfg: AttentionConfig, groups: int = 1) -> Tensor:
    """Multi-head self-attention + residual + per-token layer norm (post-LN).

    ``tokens`` is (dim, T*groups) with group-contiguous columns; attention is
    computed within each group only (used to batch ensemble members through
    one projection). Carries no positional information of its own.
    """
    d, total = tokens.shape
    if d != cfg.dim:
        raise ShapeError(f"{prefix}: token dim {d} != configured {cfg.dim}")
    if total % groups:
        raise ShapeError(f"{prefix}: {total} columns not divisible into {groups} groups")
    T = total // groups
    dh = cfg.dim // cfg.heads
    scale = 1.0 / np.sqrt(dh)
    q = ad.matmul(store.get(f"{prefix}/wq"), tokens)
    k = ad.matmul(store.get(f"{prefix}/wk"), tokens)
    v = ad.matmul(store.get(f"{prefix}/wv"), tokens)
    group_outs = []
    for g in range(groups):
        c0, c1 = g * T, (g + 1) * T
        qg = ad.slice_cols(q, c0, c1)
        kg = ad.slice_cols(k, c0, c1)
        vg = ad.slice_cols(v, c0, c1)
        heads = []
        for h in range(cfg.heads):
            r0, r1 = h * dh, (h + 1) * dh
            qh = ad.slice_rows(qg, r0, r1)
            kh = ad.slice_rows(kg, r0, r1)
            vh = ad.slice_rows(vg, r0, r1)
            scores = ad.scale(ad.matmul(ad.transpose(qh), kh), scale)  # (T, T)
            attn = ad.softmax(scores, axis=1)
            heads.append(ad.matmul(vh, ad.transpose(attn)))
        group_outs.append(ad.concat(heads, axis=0))
    mixed = group_outs[0] if groups == 1 else ad.concat(group_outs, axis=1)
    proj = ad.matmul(store.get(f"{prefix}/wo"), mixed)
    return ad.layer_norm(ad.add(tokens, proj), axis=0)


# ---------------------------------------------------------------------------
# sensor encoders


def _conv_flat_width(cfg: ModelConfig) -> int:
    # two stride-1 convs each followed by 2x2 average pooling
    hw = cfg.image_hw // 4
    return hw * hw * cfg.conv_channels[1]


def build_image_encoder(store: ParameterStore, prefix: str, cfg: ModelConfig,
                        gen: np.random.Generator, channels_in: int) -> SnnSpec:
    c1, c2 = cfg.conv_channels
    store.add_glorot(f"{prefix}/k1", gen, 3 * 3 * channels_in, c1)
    store.add_zeros(f"{prefix}/kb1", (c1, 1))
    store.add_glorot(f"{prefix}/k2", gen, 3 * 3 * c1, c2)
    store.add_zeros(f"{prefix}/kb2", (c2, 1))
    tail = SnnSpec((_conv_flat_width(cfg),) + cfg.image_tail + (cfg.d_x,),
                   cfg.activation, cfg.dropout)
    build_snn(store, f"{prefix}/tail", tail, gen)
    return tail


def image_encode(store: ParameterStore, prefix: str, tail: SnnSpec, img: Tensor,
                 E: int, gens: list) -> Tensor:
    """(H, W, C) image -> (d_x, E) latent observation samples.

    The conv trunk runs once (deterministic); stochasticity enters through
    the SNN tail, one dropout stream per ensemble member.
    """
    act = _ACTIVATIONS["relu"]
    h = act(ad.conv2d(img, store.get(f"{prefix}/k1"), store.get(f"{prefix}/kb1")))
    h = ad.avg_pool2d(h, 2)
    h = act(ad.conv2d(h, store.get(f"{prefix}/k2"), store.get(f"{prefix}/kb2")))
    h = ad.avg_pool2d(h, 2)
    flat = ad.reshape(h, (1, h.data.size))
    feat = ad.tile(ad.transpose(flat), E, axis=1)
    return snn_apply(store, f"{prefix}/tail", tail, feat, gens)


def vector_encode(store: ParameterStore, prefix: str, spec: SnnSpec, vec: Tensor,
                  E: int, gens: list) -> Tensor:
    """(n, 1) vector -> (d_x, E) latent observation samples."""
    if vec.data.ndim != 2 or vec.shape[1] != 1:
        raise ShapeError(f"vector_encode wants a column vector, got {vec.shape}")
    return snn_apply(store, prefix, spec, ad.tile(vec, E, axis=1), gens)


# ---------------------------------------------------------------------------
# decoder and auxiliary lifter


class QuaternionError(ValueError):
    """Decoded quaternion had zero norm before renormalization."""


def build_decoder(store: ParameterStore, prefix: str, cfg: ModelConfig,
                  gen: np.random.Generator) -> SnnSpec:
    spec = SnnSpec((cfg.d_x,) + cfg.decoder_widths + (cfg.state_dim,),
                   cfg.activation, cfg.dropout)
    build_snn(store, prefix, spec, gen)
    return spec


def decode(store: ParameterStore, prefix: str, spec: SnnSpec, latent: Tensor) -> Tensor:
    """Latent column vector -> 7-d pose [x, y, z, qx, qy, qz, qw].

    Runs the decoder deterministically (no dropout); the quaternion block is
    renormalized to unit length, which is exact and differentiable.
    """
    raw = snn_apply(store, prefix, spec, latent, gens=None)
    if raw.shape != (7, 1):
        raise ShapeError(f"decode: head produced {raw.shape}, want (7, 1)")
    pos = ad.slice_rows(raw, 0, 3)
    quat = ad.slice_rows(raw, 3, 7)
    sq = ad.reduce_sum(ad.mul(quat, quat))
    if float(sq.data) < 1e-24:
        raise QuaternionError("decoded quaternion has zero norm")
    inv_norm = ad.powf(ad.reshape(sq, (1, 1)), -0.5)
    unit = ad.mul(quat, ad.tile(inv_norm, 4, axis=0))
    return ad.concat([pos, unit], axis=0)


def build_lifter(store: ParameterStore, prefix: str, cfg: ModelConfig,
                 gen: np.random.Generator) -> SnnSpec:
    spec = SnnSpec((cfg.state_dim,) + cfg.lift_widths + (cfg.d_x,),
                   cfg.activation, cfg.dropout)
    build_snn(store, prefix, spec, gen)
    return spec


def auxiliary_lift(store: ParameterStore, prefix: str, spec: SnnSpec,
                   states: Tensor, E: int, stream: RngStream) -> list:
    """Ground-truth states (7, N) -> list of N latent ensembles (d_x, E).

    Used to start the filter from a known history during training; each
    (timestep, member) pair gets its own dropout stream.
    """
    n = states.shape[1]
    if n < 1:
        raise ShapeError("auxiliary_lift: empty state history")
    cols = ad.concat([ad.tile(ad.slice_cols(states, t, t + 1), E, axis=1)
                      for t in range(n)], axis=1)
    gens = [stream.child("lift", t, i).generator()
            for t in range(n) for i in range(E)]
    lifted = snn_apply(store, prefix, spec, cols, gens)
    return ad.split(lifted, [E] * n, axis=1)

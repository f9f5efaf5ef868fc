"""Classical fusion baselines over diagonal Gaussian beliefs.

Three strategies, all operating on per-modality state beliefs that come out
of the sensor encoders (ensemble mean plus member variance):

  * feature fusion: concatenate modality features, mix with an MLP, and hand
    the result to a single filter head downstream;
  * unimodal fusion: treat each modality's belief as an independent Gaussian
    and combine them precision-weighted, elementwise;
  * crossmodal fusion: combine two beliefs with learned per-dimension
    coefficients so that one modality can inflate or shrink the other's
    uncertainty.

Covariances are diagonal throughout and stored as positive column vectors,
so every formula here is elementwise.  All outputs stay differentiable
through the autodiff tape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .blocks import ModelConfig, SnnSpec, build_snn, snn_apply
from .params import ParameterStore, RngStream

__all__ = [
    "GaussianBelief",
    "CrossmodalWeights",
    "FusionDenkf",
    "belief_from_ensemble",
    "unimodal_fuse",
    "crossmodal_fuse",
    "build_beta_net",
    "beta_coefficients",
    "feature_fuse",
    "reparam_sample",
]


class GaussianBelief:
    """Diagonal Gaussian over the latent state: mean and variance columns.

    Both are (d, 1) tensors; the variance must be strictly positive."""

    __slots__ = ("mean", "cov")

    def __init__(self, mean: Tensor, cov: Tensor):
        if mean.data.ndim != 2 or mean.shape[1] != 1:
            raise ShapeError(f"GaussianBelief: mean must be (d, 1), got {mean.shape}")
        if cov.shape != mean.shape:
            raise ShapeError(
                f"GaussianBelief: cov shape {cov.shape} != mean shape {mean.shape}")
        if np.any(cov.data <= 0.0):
            raise ValueError("GaussianBelief: covariance must be positive elementwise")
        self.mean = mean
        self.cov = cov

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def belief_from_ensemble(members: Tensor, floor: float = 1e-6) -> GaussianBelief:
    """Summarize a (d, E) ensemble as mean + unbiased member variance.

    The floor keeps the variance positive even for a degenerate ensemble
    whose members coincide."""
    if members.data.ndim != 2 or members.shape[1] < 2:
        raise ShapeError(f"belief_from_ensemble: need (d, E>=2), got {members.shape}")
    e = members.shape[1]
    mean = ad.reduce_mean(members, axis=1)
    anom = ad.sub(members, ad.tile(mean, e, axis=1))
    var = ad.scale(ad.reduce_sum(ad.mul(anom, anom), axis=1), 1.0 / (e - 1))
    return GaussianBelief(mean, ad.shift(var, float(floor)))


def _fuse_pair(a: GaussianBelief, b: GaussianBelief) -> GaussianBelief:
    if a.dim != b.dim:
        raise ShapeError(f"unimodal_fuse: dims {a.dim} and {b.dim} differ")
    pa = ad.powf(a.cov, -1.0)
    pb = ad.powf(b.cov, -1.0)
    cov = ad.powf(ad.add(pa, pb), -1.0)
    mean = ad.mul(cov, ad.add(ad.mul(pa, a.mean), ad.mul(pb, b.mean)))
    return GaussianBelief(mean, cov)


def unimodal_fuse(beliefs: list[GaussianBelief]) -> GaussianBelief:
    """Precision-weighted combination of independent diagonal Gaussians.

    More than two beliefs fold left to right; the operation is associative
    so the order only moves bits in the last ulp."""
    if len(beliefs) < 2:
        raise ValueError(f"unimodal_fuse: need >= 2 beliefs, got {len(beliefs)}")
    out = beliefs[0]
    for b in beliefs[1:]:
        out = _fuse_pair(out, b)
    return out


class CrossmodalWeights:
    """Per-dimension coefficients (beta1, beta2) weighting two beliefs.

    Nonnegative columns; every index must have at least one strictly
    positive coefficient so the weighted average is defined."""

    __slots__ = ("beta1", "beta2")

    def __init__(self, beta1: Tensor, beta2: Tensor):
        if beta1.data.ndim != 2 or beta1.shape[1] != 1:
            raise ShapeError(f"CrossmodalWeights: beta must be (d, 1), got {beta1.shape}")
        if beta2.shape != beta1.shape:
            raise ShapeError(
                f"CrossmodalWeights: shapes {beta1.shape} and {beta2.shape} differ")
        if np.any(beta1.data < 0.0) or np.any(beta2.data < 0.0):
            raise ValueError("CrossmodalWeights: coefficients must be nonnegative")
        if np.any(beta1.data + beta2.data == 0.0):
            raise ValueError("CrossmodalWeights: beta1 + beta2 is zero at some index")
        self.beta1 = beta1
        self.beta2 = beta2

    @property
    def dim(self) -> int:
        return self.beta1.shape[0]


def crossmodal_fuse(b1: GaussianBelief, b2: GaussianBelief,
                    w: CrossmodalWeights) -> GaussianBelief:
    """Coefficient-weighted combination of two diagonal Gaussians.

    The mean is the beta-weighted average; the variance is weighted by the
    squared coefficients.  Scaling both betas by the same positive constant
    cancels, so only their ratio matters."""
    if b1.dim != b2.dim or b1.dim != w.dim:
        raise ShapeError(
            f"crossmodal_fuse: dims {b1.dim}, {b2.dim}, {w.dim} disagree")
    bsum = ad.add(w.beta1, w.beta2)
    if np.any(bsum.data == 0.0):
        raise ValueError("crossmodal_fuse: beta1 + beta2 is zero at some index")
    inv = ad.powf(bsum, -1.0)
    mean = ad.mul(inv, ad.add(ad.mul(w.beta1, b1.mean), ad.mul(w.beta2, b2.mean)))
    big1 = ad.mul(w.beta1, w.beta1)
    big2 = ad.mul(w.beta2, w.beta2)
    num = ad.add(ad.mul(big1, b1.cov), ad.mul(big2, b2.cov))
    cov = ad.mul(num, ad.powf(ad.add(big1, big2), -1.0))
    return GaussianBelief(mean, cov)


def _softplus(t: Tensor) -> Tensor:
    # max(x, 0) + log(1 + exp(-|x|)): same curve as log(1 + exp(x)) but the
    # exponential argument is always <= 0, so no overflow for large inputs.
    mag = ad.add(ad.relu(t), ad.relu(ad.scale(t, -1.0)))
    return ad.add(ad.relu(t), ad.log(ad.shift(ad.exp(ad.scale(mag, -1.0)), 1.0)))


def build_beta_net(store: ParameterStore, prefix: str, d: int,
                   stream: RngStream, hidden: int = 64) -> SnnSpec:
    """Two-layer coefficient net: (mean1, log var1, mean2, log var2) -> betas.

    The softplus in beta_coefficients keeps the outputs nonnegative.  The
    net runs without dropout (gens=None at apply time), so the spec's p is
    unused."""
    spec = SnnSpec((4 * d, hidden, 2 * d), activation="relu")
    build_snn(store, prefix, spec, stream.generator())
    return spec


BETA_FLOOR = 1e-6


def beta_coefficients(store: ParameterStore, prefix: str, spec: SnnSpec,
                      b1: GaussianBelief, b2: GaussianBelief) -> CrossmodalWeights:
    """Run the coefficient net on both beliefs and split the output.

    A small floor keeps both coefficients strictly positive even when the
    softplus underflows to zero for a saturated net, so the fused mean is
    always defined (same trick as the observation-noise floor)."""
    if b1.dim != b2.dim:
        raise ShapeError(f"beta_coefficients: dims {b1.dim} and {b2.dim} differ")
    feats = ad.concat([b1.mean, ad.log(b1.cov), b2.mean, ad.log(b2.cov)], axis=0)
    raw = snn_apply(store, prefix, spec, feats, gens=None)
    betas = ad.shift(_softplus(raw), BETA_FLOOR)
    beta1, beta2 = ad.split(betas, [b1.dim, b1.dim], axis=0)
    return CrossmodalWeights(beta1, beta2)


def feature_fuse(store: ParameterStore, prefix: str, spec: SnnSpec,
                 features: list[Tensor | None]) -> Tensor:
    """Concatenate modality features along rows and mix with an MLP.

    Every modality must be present; this baseline has no masking path."""
    if not features:
        raise ValueError("feature_fuse: empty feature list")
    for i, f in enumerate(features):
        if f is None:
            raise ValueError(f"feature_fuse: modality {i} missing; all are required")
    cols = features[0].shape[1]
    for f in features[1:]:
        if f.shape[1] != cols:
            raise ShapeError(
                f"feature_fuse: column counts differ ({f.shape[1]} vs {cols})")
    stacked = ad.concat(list(features), axis=0)
    return snn_apply(store, prefix, spec, stacked, gens=None)


def reparam_sample(b: GaussianBelief, e: int, stream: RngStream) -> Tensor:
    """Draw E members from the belief as mean + sqrt(var) * eps.

    The noise comes from the stream, so draws are reproducible; gradients
    flow to the mean (identity) and the variance (through the square root)."""
    if e < 1:
        raise ShapeError(f"reparam_sample: E {e} < 1")
    eps = stream.generator().standard_normal((b.dim, e))
    spread = ad.tile(ad.powf(b.cov, 0.5), e, axis=1)
    return ad.add(ad.tile(b.mean, e, axis=1), ad.mul(spread, Tensor(eps)))


# ---------------------------------------------------------------------------
# fusion strategies mounted on an ensemble Kalman backbone


class FusionDenkf:
    """Ensemble Kalman estimator whose correction runs one fusion strategy.

    Shares the DEnKF transition, encoders and decoder; the difference is how
    enabled modalities collapse into a single latent observation before the
    one ensemble correction:

      feature:   concatenate all encoder latents, mix with an MLP, read the
                 noise diagonal off a dedicated net (all modalities required);
      unimodal:  precision-weighted fusion of per-modality beliefs, members
                 resampled from the fused Gaussian, fused variance doubles
                 as the noise diagonal;
      crossmodal: beliefs folded pairwise through the coefficient net, then
                 the same resampling path as unimodal (needs >= 2 enabled).
    """

    def __init__(self, kind: str, cfg: ModelConfig, seed: int = 0,
                 store: ParameterStore | None = None):
        from .filters import Denkf
        if kind not in ("feature", "unimodal", "crossmodal"):
            raise ValueError(f"unknown fusion strategy {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.store = ParameterStore() if store is None else store
        self.backbone = Denkf(cfg, seed=seed, store=self.store)
        gen = RngStream(seed).child("init", kind).generator()
        d = cfg.d_x
        if kind == "feature":
            m = len(cfg.modalities)
            self.fuse_spec = SnnSpec((m * d, 2 * d, d), cfg.activation,
                                     cfg.dropout)
            build_snn(self.store, "fuse", self.fuse_spec, gen)
            self.rnet_fused_spec = SnnSpec((d, d, d), cfg.activation,
                                           cfg.dropout)
            build_snn(self.store, "rnet/fused", self.rnet_fused_spec, gen)
        elif kind == "crossmodal":
            self.beta_spec = build_beta_net(self.store, "beta", d,
                                            RngStream(seed).child("beta", kind))

    def lift(self, states: Tensor, stream: RngStream) -> list:
        return self.backbone.lift(states, stream)

    def decode_mean(self, X: Tensor) -> Tensor:
        return self.backbone.decode_mean(X)

    def step(self, ens, raw: dict, enabled, stream: RngStream, t: int = 0):
        from .filters import LatentEnsemble, ensemble_correct, ensemble_mean
        cfg = self.cfg
        X = self.backbone.predict(ens, stream)
        latents = []
        for j, name in enumerate(cfg.modalities):
            if not enabled[j]:
                latents.append(None)
                continue
            if raw.get(name) is None:
                raise ValueError(f"modality {name} enabled but absent from input")
            latents.append(self.backbone.encode_modality(name, raw[name], stream))
        live = [l for l in latents if l is not None]
        if not live:
            raise ValueError("cannot correct with every modality disabled")
        if self.kind == "feature":
            if any(l is None for l in latents):
                raise ValueError("feature fusion requires all modalities enabled")
            Ytilde = feature_fuse(self.store, "fuse", self.fuse_spec, latents)
            raw_r = snn_apply(self.store, "rnet/fused", self.rnet_fused_spec,
                              ensemble_mean(Ytilde), gens=None)
            r = ad.shift(ad.exp(ad.scale(raw_r, 0.5)), self.backbone.R_FLOOR)
        else:
            beliefs = [belief_from_ensemble(l) for l in live]
            if self.kind == "unimodal":
                fused = beliefs[0] if len(beliefs) == 1 else unimodal_fuse(beliefs)
            else:
                if len(beliefs) < 2:
                    raise ValueError(
                        "crossmodal fusion needs at least two enabled modalities")
                fused = beliefs[0]
                for b in beliefs[1:]:
                    w = beta_coefficients(self.store, "beta", self.beta_spec,
                                          fused, b)
                    fused = crossmodal_fuse(fused, b, w)
            Ytilde = reparam_sample(fused, cfg.E, stream.child("fuse"))
            r = fused.cov
        return LatentEnsemble(ensemble_correct(X, Ytilde, X, r), t)

"""Recursive estimators over latent ensembles.

Three update families live here: the attention-gain filter (AlphaMdf), an
ensemble Kalman filter whose transition/observation/noise pieces are
pluggable callables (so oracle tests and the neural baseline share the exact
same update arithmetic), and a plain extended Kalman baseline over the
actual 7-d state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import ShapeError, Tape, Tensor
from .blocks import ModelConfig, SnnSpec, member_generators
from .params import ParameterStore, RngStream, glorot

MASK_FILL = -1e9


class FilterDivergence(RuntimeError):
    """A filter's covariance or ensemble left its valid set."""


@dataclass
class LatentEnsemble:
    """d_x x E matrix of members plus the step index it belongs to."""

    members: Tensor
    t: int = 0

    def __post_init__(self):
        if self.members.data.ndim != 2:
            raise ShapeError(f"ensemble must be 2-d, got {self.members.shape}")
        if self.members.shape[1] < 2:
            raise ShapeError("ensemble needs at least two members")

    @property
    def d_x(self) -> int:
        return self.members.shape[0]

    @property
    def E(self) -> int:
        return self.members.shape[1]


def ensemble_mean(X: Tensor) -> Tensor:
    """Row means, differentiable, shape (d, 1)."""
    if X.shape[1] < 1:
        raise ShapeError("empty ensemble")
    return ad.reduce_mean(X, axis=1)


class FilterHistory:
    """Ring buffer of the last N ensembles with the actions that led to them."""

    def __init__(self, N: int):
        if N < 1:
            raise ValueError("history window must be at least 1")
        self.N = N
        self._ens: list[LatentEnsemble] = []
        self._act: list = []

    def push(self, ens: LatentEnsemble, action=None) -> None:
        self._ens.append(ens)
        self._act.append(None if action is None else np.asarray(action, dtype=np.float64))
        if len(self._ens) > self.N:
            self._ens.pop(0)
            self._act.pop(0)

    def states(self) -> list:
        """Member matrices, oldest first."""
        return [e.members for e in self._ens]

    def last(self) -> LatentEnsemble:
        if not self._ens:
            raise ValueError("empty history")
        return self._ens[-1]

    def __len__(self) -> int:
        return len(self._ens)


class AttentionGainMask:
    """Diagonal-block attention mask over (state index) x (source, state index).

    The key/value axis is laid out as M+1 blocks of d_x rows: the prediction
    first, then one block per modality in declared order. Within a block only
    the diagonal may be enabled, so each state index can attend to itself
    across sources and nothing else. The prediction block is always on.
    """

    def __init__(self, d_x: int, enabled):
        self.d_x = d_x
        self.enabled = tuple(bool(e) for e in enabled)
        m = np.zeros((d_x, (len(self.enabled) + 1) * d_x), dtype=bool)
        diag = np.arange(d_x)
        m[diag, diag] = True
        for j, on in enumerate(self.enabled):
            if on:
                m[diag, (j + 1) * d_x + diag] = True
        self.matrix = m

    @property
    def n_modalities(self) -> int:
        return len(self.enabled)

    def additive(self) -> np.ndarray:
        """0 where enabled, a large negative fill where excluded; adding this
        to logits drives masked softmax weights to exactly zero."""
        return np.where(self.matrix, 0.0, MASK_FILL)

    def multiplicative(self) -> np.ndarray:
        return self.matrix.astype(np.float64)

    @staticmethod
    def check(matrix: np.ndarray) -> None:
        """Validate a raw boolean mask against the block-diagonal invariants."""
        d_x, cols = matrix.shape
        if cols % d_x:
            raise ShapeError(f"mask columns {cols} not a multiple of d_x {d_x}")
        for j in range(cols // d_x):
            block = matrix[:, j * d_x:(j + 1) * d_x]
            if np.any(block & ~np.eye(d_x, dtype=bool)):
                raise ValueError(f"mask block {j} has off-diagonal entries")
            if not (block.diagonal().all() or not block.any()):
                raise ValueError(f"mask block {j} partially enabled")
        if not matrix.any(axis=1).all():
            raise ValueError("some state index has every source masked")


@dataclass
class FilterDiagnostics:
    """Per-step view of where the update looked and how far it moved."""

    t: int
    masses: dict
    innovation_norm: float
    decoded: list | None = None

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "attention": self.masses,
                           "innovation_norm": self.innovation_norm,
                           "decoded": self.decoded})


def _encode_modality(model, name: str, raw, stream: RngStream) -> Tensor:
    """Shared encoder dispatch for any model carrying the standard encoder
    parameter groups (enc/rgb, enc/depth, enc/proprio)."""
    cfg = model.cfg
    gens = member_generators(stream.child("enc", name), cfg.E)
    hw = cfg.image_hw
    if name == "rgb":
        img = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64))
        if img.shape != (hw, hw, 3):
            raise ShapeError(f"rgb is {img.shape}, expected ({hw}, {hw}, 3)")
        return blocks.image_encode(model.store, "enc/rgb", model.rgb_tail, img, cfg.E, gens)
    if name == "depth":
        arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
        if arr.shape == (hw, hw):
            arr = arr.reshape(hw, hw, 1)
        if arr.shape != (hw, hw, 1):
            raise ShapeError(f"depth is {arr.shape}, expected ({hw}, {hw})")
        return blocks.image_encode(model.store, "enc/depth", model.depth_tail,
                                   Tensor(arr), cfg.E, gens)
    if name == "proprio":
        vec = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64).reshape(-1, 1))
        if vec.shape != (cfg.proprio_dim, 1):
            raise ShapeError(f"proprio is {vec.shape}, expected ({cfg.proprio_dim}, 1)")
        return blocks.vector_encode(model.store, "enc/proprio", model.proprio_spec,
                                    vec, cfg.E, gens)
    raise ValueError(f"unknown modality: {name}")


def attention_gain_update(X: Tensor, obs: list, mask: AttentionGainMask,
                          query: Tensor, mode: str = "exclusive"):
    """Correct a predicted ensemble by attending over prediction and latents.

    Keys are the zero-centered concatenation of prediction and modality
    latents, values the raw concatenation, and each row of the learned query
    (one per state index) is softmaxed over its unmasked positions with a
    1/sqrt(E) score scale.

    ``mode`` selects how the mask meets the scores: "exclusive" adds a large
    negative fill so masked weights underflow to exactly 0; "hadamard"
    multiplies the scores elementwise instead, which leaves masked positions
    at logit 0 and lets them leak weight (kept for comparison runs). In
    exclusive mode the mixing W V is applied in innovation form,
    X + W (V - [X; ...; X]), algebraically identical (zero off-diagonals,
    unit row sums) but bitwise exact in the all-sources-identical and
    all-modalities-masked cases.

    Returns the corrected ensemble and an info dict with the weight matrix,
    the innovation, and per-source mean diagonal masses.
    """
    d_x, E = X.shape
    M = mask.n_modalities
    if len(obs) != M:
        raise ShapeError(f"{len(obs)} observation slots for {M} modalities")
    AttentionGainMask.check(mask.matrix)
    if query.shape != (d_x, E):
        raise ShapeError(f"query {query.shape}, expected ({d_x}, {E})")
    sources = [X]
    for j, (o, on) in enumerate(zip(obs, mask.enabled)):
        if o is None:
            if on:
                raise ValueError(f"modality {j} is enabled but has no latent observation")
            o = Tensor(np.zeros((d_x, E)))
        if o.shape != (d_x, E):
            raise ShapeError(f"latent observation {j} is {o.shape}, expected ({d_x}, {E})")
        sources.append(o)

    V = ad.concat(sources, axis=0)                       # ((M+1) d_x, E)
    K = ad.sub(V, ad.reduce_mean(V, axis=1))             # zero-centered keys
    scores = ad.scale(ad.matmul(query, ad.transpose(K)), 1.0 / np.sqrt(E))
    if mode == "exclusive":
        logits = ad.add(scores, Tensor(mask.additive()))
    elif mode == "hadamard":
        logits = ad.mul(scores, Tensor(mask.multiplicative()))
    else:
        raise ValueError(f"unknown mask mode: {mode}")
    weights = ad.softmax(logits, axis=1)                 # (d_x, (M+1) d_x)

    if mode == "exclusive":
        # algebraically W V: off-diagonal weights are exactly zero and rows
        # sum to one, so W [X; ...; X] is X itself; this form makes the
        # identity cases above hold bitwise
        innovation = ad.matmul(weights, ad.sub(V, ad.tile(X, M + 1, axis=0)))
        corrected = ad.add(X, innovation)
    else:
        # leaked weights break that equality, so run the literal mixing
        corrected = ad.matmul(weights, V)
        innovation = ad.sub(corrected, X)

    diag = np.arange(d_x)
    masses = {}
    for j in range(M + 1):
        masses[j] = float(weights.data[diag, j * d_x + diag].mean())
    return corrected, {"weights": weights, "innovation": innovation,
                       "masses": masses}


class AlphaMdf:
    """Latent-ensemble filter whose gain is a learned masked attention map.

    Prediction runs each member's state history plus the current action
    through a small transformer (stochastic MLP stack, positional and type
    embeddings, self-attention, readout at the action token with a residual
    from the newest state). The update is attention_gain_update. Callers
    scope the RNG stream per step; identical streams reproduce identical
    stochastic passes.
    """

    kind = "amdf"

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = ParameterStore() if store is None else store
        gen = RngStream(seed).child("init").generator()
        d = cfg.d_x
        self.action_spec = SnnSpec((cfg.action_dim, d), cfg.activation, cfg.dropout)
        blocks.build_snn(self.store, "proc/action", self.action_spec, gen)
        self.pre_spec = SnnSpec((d,) * (cfg.pre_layers + 1), cfg.activation,
                                cfg.dropout, final_linear=False)
        blocks.build_snn(self.store, "proc/pre", self.pre_spec, gen)
        blocks.build_type_table(self.store, "proc", d, gen)
        self.attn_cfg = cfg.attention_config()
        for l in range(cfg.attn_layers):
            blocks.build_attention(self.store, f"proc/attn{l}", self.attn_cfg, gen)
        self.post_spec = SnnSpec((d,) + cfg.post_widths + (d,), cfg.activation, cfg.dropout)
        blocks.build_snn(self.store, "proc/post", self.post_spec, gen)
        self.store.add("ag/query", glorot(gen, d, cfg.E))
        self.rgb_tail = blocks.build_image_encoder(self.store, "enc/rgb", cfg, gen, 3)
        self.depth_tail = blocks.build_image_encoder(self.store, "enc/depth", cfg, gen, 1)
        self.proprio_spec = SnnSpec((cfg.proprio_dim,) + cfg.proprio_widths + (d,),
                                    cfg.activation, cfg.dropout)
        blocks.build_snn(self.store, "enc/proprio", self.proprio_spec, gen)
        self.decoder_spec = blocks.build_decoder(self.store, "dec", cfg, gen)
        self.lift_spec = blocks.build_lifter(self.store, "lift", cfg, gen)

    # -- prediction ---------------------------------------------------------

    def predict(self, hist: FilterHistory, action, stream: RngStream) -> Tensor:
        cfg = self.cfg
        if len(hist) == 0:
            raise ValueError("prediction requires at least one past state")
        states = hist.states()
        N = len(states)
        E = cfg.E
        T = N + 1
        a = action if isinstance(action, Tensor) else Tensor(np.asarray(action, dtype=np.float64).reshape(-1, 1))
        if a.shape != (cfg.action_dim, 1):
            raise ShapeError(f"action {a.shape}, expected ({cfg.action_dim}, 1)")
        a_tok = blocks.snn_apply(self.store, "proc/action", self.action_spec, a, None)

        # columns arrive time-major; regroup so each member's window is
        # contiguous: [x_{t-N} .. x_{t-1}, action] per member
        full = ad.concat(states + [ad.tile(a_tok, E, axis=1)], axis=1)
        toks = ad.take_columns(full, [t * E + i for i in range(E) for t in range(T)])

        gens = member_generators(stream.child("proc"), E)
        col_gens = [gens[i] for i in range(E) for _ in range(T)]
        h = blocks.snn_apply(self.store, "proc/pre", self.pre_spec, toks, col_gens)
        pe = blocks.positional_embed(list(range(T)), cfg.d_x, cfg.max_seq)
        h = ad.add(h, Tensor(np.tile(pe, (1, E))))
        ty = blocks.type_embed(self.store, "proc", ["state"] * N + ["action"])
        h = ad.add(h, ad.tile(ty, E, axis=1))
        for l in range(cfg.attn_layers):
            h = blocks.self_attention(self.store, f"proc/attn{l}", h, self.attn_cfg, groups=E)
        h = blocks.snn_apply(self.store, "proc/post", self.post_spec, h, col_gens)

        read = ad.take_columns(h, [i * T + (T - 1) for i in range(E)])
        return ad.add(read, states[-1])

    # -- observation path ---------------------------------------------------

    def encode_modality(self, name: str, raw, stream: RngStream) -> Tensor:
        """Raw sensor reading -> (d_x, E) latent observation samples."""
        return _encode_modality(self, name, raw, stream)

    def decode_mean(self, X: Tensor) -> Tensor:
        return blocks.decode(self.store, "dec", self.decoder_spec, ensemble_mean(X))

    def lift(self, states: Tensor, stream: RngStream) -> list:
        return blocks.auxiliary_lift(self.store, "lift", self.lift_spec,
                                     states, self.cfg.E, stream)

    def init_ensemble(self, raw: dict, enabled, stream: RngStream) -> LatentEnsemble:
        """Inference-time start: average the available modality latents."""
        latents = [self.encode_modality(name, raw[name], stream)
                   for name, on in zip(self.cfg.modalities, enabled) if on]
        if not latents:
            raise ValueError("cannot initialize with every modality disabled")
        acc = latents[0]
        for more in latents[1:]:
            acc = ad.add(acc, more)
        return LatentEnsemble(ad.scale(acc, 1.0 / len(latents)), t=0)

    # -- update -------------------------------------------------------------

    def update(self, X: Tensor, obs: list, mask: AttentionGainMask,
               mode: str = "exclusive"):
        return attention_gain_update(X, obs, mask, self.store.get("ag/query"), mode)

    def step(self, hist: FilterHistory, action, raw: dict, mask: AttentionGainMask,
             stream: RngStream, t: int = 0, mode: str = "exclusive",
             decode: bool = True):
        """One predict/encode/correct cycle; appends the result to history."""
        X = self.predict(hist, action, stream)
        obs = []
        for j, name in enumerate(self.cfg.modalities):
            if mask.enabled[j]:
                if raw.get(name) is None:
                    raise ValueError(f"modality {name} enabled but absent from input")
                obs.append(self.encode_modality(name, raw[name], stream))
            else:
                obs.append(None)
        corrected, info = self.update(X, obs, mask, mode)
        ens = LatentEnsemble(corrected, t)
        hist.push(ens, action)
        names = ("prediction",) + self.cfg.modalities
        masses = {names[j]: m for j, m in info["masses"].items()}
        decoded = None
        if decode:
            decoded = self.decode_mean(corrected).data[:, 0].tolist()
        diag = FilterDiagnostics(t=t, masses=masses,
                                 innovation_norm=float(np.linalg.norm(info["innovation"].data)),
                                 decoded=decoded)
        return ens, diag


# ---------------------------------------------------------------------------
# ensemble Kalman filter


def denkf_predict(X: Tensor, transition, stream: RngStream) -> Tensor:
    """Propagate members through a stochastic transition callable.

    ``transition(members, stream) -> members`` owns the member-wise mapping
    and its noise; distinct streams give distinct process noise draws.
    """
    if X.shape[1] < 2:
        raise ShapeError("ensemble needs at least two members")
    out = transition(X, stream)
    if out.shape != X.shape:
        raise ShapeError(f"transition changed ensemble shape {X.shape} -> {out.shape}")
    return out


def ensemble_correct(X: Tensor, Ytilde: Tensor, HX: Tensor, r_diag: Tensor) -> Tensor:
    """Kalman correction from ensemble anomalies.

    X the predicted members (d_x, E), HX their predicted observations
    (d_y, E), Ytilde the sampled latent observations (d_y, E), r_diag the
    positive measurement-noise diagonal (d_y, 1). The gain is built from the
    anomaly covariances scaled by 1/(E-1); the innovation covariance is
    solved with a tiny jitter retry.
    """
    d_x, E = X.shape
    if E < 2:
        raise ShapeError("ensemble needs at least two members")
    if Ytilde.shape != HX.shape:
        raise ShapeError(f"observation shapes differ: {Ytilde.shape} vs {HX.shape}")
    d_y = HX.shape[0]
    if r_diag.shape != (d_y, 1):
        raise ShapeError(f"noise diagonal {r_diag.shape}, expected ({d_y}, 1)")
    c = 1.0 / (E - 1)
    A = ad.sub(X, ad.reduce_mean(X, axis=1))
    HA = ad.sub(HX, ad.reduce_mean(HX, axis=1))
    R = ad.mul(ad.tile(r_diag, d_y, axis=1), Tensor(np.eye(d_y)))
    S = ad.add(ad.scale(ad.matmul(HA, ad.transpose(HA)), c), R)
    gain = ad.matmul(ad.scale(ad.matmul(A, ad.transpose(HA)), c), ad.inverse(S))
    return ad.add(X, ad.matmul(gain, ad.sub(Ytilde, HX)))


def denkf_update(X: Tensor, y, obs_model, encoder, noise_model,
                 stream: RngStream) -> Tensor:
    """Full update: sample latent observations, predict observations, correct.

    ``encoder(y, E, stream) -> (d_y, E)`` supplies the observation samples
    (and with them the measurement perturbation), ``obs_model(X) -> (d_y, E)``
    maps members to observation space, ``noise_model(Ytilde) -> (d_y, 1)``
    the positive noise diagonal.
    """
    Ytilde = encoder(y, X.shape[1], stream)
    HX = obs_model(X)
    r = noise_model(Ytilde)
    return ensemble_correct(X, Ytilde, HX, r)


class Denkf:
    """Ensemble Kalman baseline with neural pieces, filtering in latent space.

    The transition is a residual stochastic MLP on each member; the
    observation model is the identity (latent observations live in the same
    space as the state); per-modality noise nets read the mean latent
    observation and emit a positive diagonal. Multiple enabled modalities
    are absorbed by sequential corrections in declared order.
    """

    kind = "denkf"
    R_FLOOR = 1e-6

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = ParameterStore() if store is None else store
        gen = RngStream(seed).child("init").generator()
        d = cfg.d_x
        self.trans_spec = SnnSpec((d,) + cfg.post_widths + (d,), cfg.activation, cfg.dropout)
        blocks.build_snn(self.store, "trans", self.trans_spec, gen)
        self.rgb_tail = blocks.build_image_encoder(self.store, "enc/rgb", cfg, gen, 3)
        self.depth_tail = blocks.build_image_encoder(self.store, "enc/depth", cfg, gen, 1)
        self.proprio_spec = SnnSpec((cfg.proprio_dim,) + cfg.proprio_widths + (d,),
                                    cfg.activation, cfg.dropout)
        blocks.build_snn(self.store, "enc/proprio", self.proprio_spec, gen)
        self.rnet_spec = SnnSpec((d, d, d), cfg.activation, cfg.dropout)
        for name in cfg.modalities:
            blocks.build_snn(self.store, f"rnet/{name}", self.rnet_spec, gen)
        self.decoder_spec = blocks.build_decoder(self.store, "dec", cfg, gen)
        self.lift_spec = blocks.build_lifter(self.store, "lift", cfg, gen)

    def encode_modality(self, name: str, raw, stream: RngStream) -> Tensor:
        return _encode_modality(self, name, raw, stream)

    def decode_mean(self, X: Tensor) -> Tensor:
        return blocks.decode(self.store, "dec", self.decoder_spec, ensemble_mean(X))

    def lift(self, states: Tensor, stream: RngStream) -> list:
        return blocks.auxiliary_lift(self.store, "lift", self.lift_spec,
                                     states, self.cfg.E, stream)

    def noise_diag(self, name: str, Ytilde: Tensor) -> Tensor:
        raw = blocks.snn_apply(self.store, f"rnet/{name}", self.rnet_spec,
                               ensemble_mean(Ytilde), gens=None)
        return ad.shift(ad.exp(ad.scale(raw, 0.5)), self.R_FLOOR)

    def predict(self, ens: LatentEnsemble, stream: RngStream) -> Tensor:
        X = ens.members

        def transition(members, s):
            gens = member_generators(s.child("trans"), members.shape[1])
            return ad.add(members, blocks.snn_apply(self.store, "trans",
                                                    self.trans_spec, members, gens))

        return denkf_predict(X, transition, stream)

    def step(self, ens: LatentEnsemble, raw: dict, enabled, stream: RngStream,
             t: int = 0) -> LatentEnsemble:
        X = self.predict(ens, stream)
        for j, name in enumerate(self.cfg.modalities):
            if not enabled[j]:
                continue
            if raw.get(name) is None:
                raise ValueError(f"modality {name} enabled but absent from input")
            Ytilde = self.encode_modality(name, raw[name], stream)
            X = ensemble_correct(X, Ytilde, X, self.noise_diag(name, Ytilde))
        return LatentEnsemble(X, t)


# ---------------------------------------------------------------------------
# extended Kalman baseline


def jacobian(fn, x: Tensor) -> np.ndarray:
    """Dense Jacobian of a column-vector function at x, via one taped forward
    and one backward sweep per output row. Gradient state of every tensor
    touched by ``fn`` is restored afterwards."""
    with Tape() as tape:
        y = fn(x)
    if y.data.ndim != 2 or y.shape[1] != 1:
        raise ShapeError(f"jacobian expects a column-vector output, got {y.shape}")
    if not tape.nodes:
        # fn used no ops: it returned its input (identity) or a constant
        if y is x:
            return np.eye(x.shape[0])
        return np.zeros((y.shape[0], x.shape[0]))
    touched = {id(x): x}
    for node in tape.nodes:
        for inp in node.inputs:
            touched.setdefault(id(inp), inp)
    saved = {k: t.grad for k, t in touched.items()}
    J = np.empty((y.shape[0], x.shape[0]))
    for j in range(y.shape[0]):
        for t in touched.values():
            t.grad = None
        seed = np.zeros_like(y.data)
        seed[j, 0] = 1.0
        tape.backward(y, seed)
        J[j, :] = 0.0 if x.grad is None else x.grad[:, 0]
    for k, t in touched.items():
        t.grad = saved[k]
    return J


class Dekf:
    """Extended Kalman filter over the actual low-dimensional state.

    ``transition(x, a) -> x'`` and ``observation(x) -> y`` are built from
    autodiff ops; their Jacobians come from the tape, so a learned
    transition needs no hand-derived linearization. The covariance update
    uses the Joseph form, which keeps symmetry at machine precision.
    """

    def __init__(self, transition, observation, Q: np.ndarray, R: np.ndarray):
        self.transition = transition
        self.observation = observation
        self.Q = np.asarray(Q, dtype=np.float64)
        self.R = np.asarray(R, dtype=np.float64)
        self._step = 0

    def step(self, x: np.ndarray, P: np.ndarray, action, y: np.ndarray):
        self._step += 1
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        if not np.allclose(P, P.T, atol=1e-9):
            raise FilterDivergence(f"covariance not symmetric at step {self._step}")

        xt = Tensor(x.copy())
        F = jacobian(lambda s: self.transition(s, action), xt)
        x_pred = self.transition(Tensor(x.copy()), action).data
        P_pred = F @ P @ F.T + self.Q

        xp = Tensor(x_pred.copy())
        H = jacobian(self.observation, xp)
        y_pred = self.observation(Tensor(x_pred.copy())).data
        S = H @ P_pred @ H.T + self.R
        K = np.linalg.solve(S.T, (P_pred @ H.T).T).T
        x_new = x_pred + K @ (y - y_pred)
        IKH = np.eye(P.shape[0]) - K @ H
        P_new = IKH @ P_pred @ IKH.T + K @ self.R @ K.T
        P_new = 0.5 * (P_new + P_new.T)
        try:
            np.linalg.cholesky(P_new)
        except np.linalg.LinAlgError:
            raise FilterDivergence(
                f"covariance lost positive definiteness at step {self._step}") from None
        return x_new, P_new

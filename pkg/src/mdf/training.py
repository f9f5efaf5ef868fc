"""End-to-end training: three-part loss, curriculum over (t, t+1), AdamW.

One optimizer step samples a batch of history windows at random timesteps,
lifts the ground-truth history into latent ensembles, runs the filter at t
and t+1 (the corrected ensemble at t feeds the prediction at t+1), and sums
three decoded-ensemble-mean losses per timestep:

  * transition loss: decoded prediction vs the true state;
  * end-to-end loss: decoded corrected ensemble vs the true state;
  * sensor loss: decoded per-modality latent observations vs the true state.

Modalities drop out with a per-batch probability so the filter learns to
run with missing sensors; a dropped modality contributes no sensor term and
its encoder receives no gradient that step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .blocks import ModelConfig
from .filters import AlphaMdf, AttentionGainMask, FilterHistory, LatentEnsemble
from .params import ParameterStore, RngStream
from .simworld import TrajectoryDataset

__all__ = [
    "AdamW",
    "Batch",
    "BatchItem",
    "LossBreakdown",
    "TrainConfig",
    "clip_gradients",
    "compute_losses",
    "load_model",
    "model_config_from_dict",
    "pretrain_encoders",
    "sample_batch",
    "save_model",
    "sensor_losses",
    "split_trials",
    "train",
    "train_config_from_toml",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    steps: int = 2000
    mask_prob: float = 0.2
    seed: int = 0
    weight_decay: float = 1e-4
    clip: float = 5.0
    val_fraction: float = 0.1
    folds: int = 1                  # > 1 switches to k-fold validation splits
    fold: int = 0
    checkpoint_every: int = 500
    attention_mode: str = "exclusive"
    model: ModelConfig = field(default_factory=ModelConfig.small)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"TrainConfig: lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError("TrainConfig: batch must be at least 1")
        if self.steps < 0:
            raise ValueError("TrainConfig: steps must be nonnegative")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("TrainConfig: mask_prob must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("TrainConfig: val_fraction must lie in [0, 1)")
        if self.folds < 1 or not 0 <= self.fold < self.folds:
            raise ValueError(f"TrainConfig: fold {self.fold} of {self.folds}")
        if self.attention_mode not in ("exclusive", "hadamard"):
            raise ValueError(f"TrainConfig: unknown attention mode "
                             f"{self.attention_mode!r}")


def model_config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a ModelConfig from JSON/TOML data (lists become tuples)."""
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ModelConfig(**clean)


def train_config_from_toml(path) -> TrainConfig:
    """[train] section holds TrainConfig fields, [model] holds ModelConfig
    overrides applied to the small CPU profile."""
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    known = {f.name for f in fields(TrainConfig)} - {"model"}
    section = doc.get("train", {})
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"{path}: unknown [train] keys {sorted(unknown)}")
    overrides = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in doc.get("model", {}).items()}
    return TrainConfig(**section, model=ModelConfig.small(**overrides))


# ---------------------------------------------------------------------------
# batches


@dataclass
class BatchItem:
    trial: int
    t: int
    states: np.ndarray              # (state_dim, N + 2): history, x_t, x_{t+1}
    obs_t: dict
    obs_t1: dict
    a_prev: np.ndarray              # applied at t-1, drives the step into t
    a_t: np.ndarray
    a_next: np.ndarray


@dataclass
class Batch:
    items: list
    N: int

    def __post_init__(self):
        if not self.items:
            raise ValueError("Batch: empty")
        for it in self.items:
            if it.states.ndim != 2 or it.states.shape[1] != self.N + 2:
                raise ValueError(f"Batch: window of trial {it.trial} has shape "
                                 f"{it.states.shape}, want (d, {self.N + 2})")


def split_trials(n_trials: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation trial indices: a tail split by default, k-fold when
    cfg.folds > 1."""
    idx = np.arange(n_trials)
    if cfg.folds > 1:
        bounds = np.linspace(0, n_trials, cfg.folds + 1).astype(int)
        val = idx[bounds[cfg.fold]:bounds[cfg.fold + 1]]
    else:
        n_val = int(round(n_trials * cfg.val_fraction))
        val = idx[n_trials - n_val:]
    train = np.setdiff1d(idx, val)
    if train.size == 0:
        raise ValueError("split_trials: no training trials left")
    return train, val


def _window(dataset: TrajectoryDataset, trial: int, t: int,
            mcfg: ModelConfig) -> BatchItem:
    n = mcfg.N
    states = np.stack([dataset.state_at(trial, k)
                       for k in range(t - n, t + 2)], axis=1)

    def bundle(step):
        out = {}
        for name in mcfg.modalities:
            if name == "rgb":
                out[name] = dataset.rgb_at(trial, step)
            elif name == "depth":
                out[name] = dataset.depth_at(trial, step)
            elif name == "proprio":
                out[name] = dataset.proprio_at(trial, step).reshape(-1, 1)
            else:
                raise ValueError(f"no dataset stream for modality {name!r}")
        return out

    return BatchItem(trial=trial, t=t, states=states,
                     obs_t=bundle(t), obs_t1=bundle(t + 1),
                     a_prev=dataset.action_at(trial, t - 1),
                     a_t=dataset.action_at(trial, t),
                     a_next=dataset.action_at(trial, t + 1))


def sample_batch(dataset: TrajectoryDataset, mcfg: ModelConfig, batch: int,
                 trial_pool: np.ndarray, stream: RngStream) -> Batch:
    """Uniform (trial, t) windows; t leaves room for the history and t+1."""
    if dataset.steps < mcfg.N + 2:
        raise ValueError(f"dataset trials have {dataset.steps} steps, "
                         f"need at least N + 2 = {mcfg.N + 2}")
    gen = stream.generator()
    items = []
    for _ in range(batch):
        trial = int(trial_pool[int(gen.integers(0, trial_pool.size))])
        t = int(gen.integers(mcfg.N, dataset.steps - 1))
        items.append(_window(dataset, trial, t, mcfg))
    return Batch(items, mcfg.N)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    l_f: Tensor
    l_e2e: Tensor
    l_s: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {"L_f": self.l_f.item(), "L_e2e": self.l_e2e.item(),
                "L_s": self.l_s.item(), "total": self.total.item()}


def _sq_err(decoded: Tensor, target: Tensor) -> Tensor:
    diff = ad.sub(decoded, target)
    return ad.reduce_sum(ad.mul(diff, diff))


def _mean_terms(terms: list, n_items: int) -> Tensor:
    if not terms:
        return Tensor(np.zeros(()))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / n_items)


def _assemble(lf, le2e, ls, n_items) -> LossBreakdown:
    l_f = _mean_terms(lf, n_items)
    l_e2e = _mean_terms(le2e, n_items)
    l_s = _mean_terms(ls, n_items)
    total = ad.add(ad.add(l_f, l_e2e), l_s)
    return LossBreakdown(l_f, l_e2e, l_s, total)


def compute_losses(batch: Batch, model: AlphaMdf, stream: RngStream,
                   enabled=None, mode: str = "exclusive") -> LossBreakdown:
    """Both filter timesteps of the curriculum, averaged over the batch.

    ``enabled`` flags the modalities for this batch; a disabled modality is
    skipped entirely (no encoder pass, no sensor term)."""
    cfg = model.cfg
    if enabled is None:
        enabled = (True,) * len(cfg.modalities)
    mask = AttentionGainMask(cfg.d_x, enabled)
    lf, le2e, ls = [], [], []
    for b, item in enumerate(batch.items):
        ist = stream.child("item", b)
        hist = FilterHistory(cfg.N)
        lifted = model.lift(Tensor(item.states[:, :cfg.N]), ist.child("hist"))
        for k, members in enumerate(lifted):
            hist.push(LatentEnsemble(members, t=k))
        x_t = Tensor(item.states[:, cfg.N:cfg.N + 1])
        x_t1 = Tensor(item.states[:, cfg.N + 1:cfg.N + 2])
        for k, (action, obs_raw, target) in enumerate([
                (item.a_prev, item.obs_t, x_t),
                (item.a_t, item.obs_t1, x_t1)]):
            fst = ist.child("flt", k)
            pred = model.predict(hist, action, fst)
            lf.append(_sq_err(model.decode_mean(pred), target))
            obs = []
            for j, name in enumerate(cfg.modalities):
                if enabled[j]:
                    latent = model.encode_modality(name, obs_raw[name], fst)
                    ls.append(_sq_err(model.decode_mean(latent), target))
                    obs.append(latent)
                else:
                    obs.append(None)
            corrected, _ = model.update(pred, obs, mask, mode)
            le2e.append(_sq_err(model.decode_mean(corrected), target))
            hist.push(LatentEnsemble(corrected, t=cfg.N + k))
    return _assemble(lf, le2e, ls, len(batch.items))


def sensor_losses(batch: Batch, model, stream: RngStream) -> LossBreakdown:
    """Sensor terms only (both timesteps, every modality); the filter never
    runs, so only encoder and decoder parameters see gradients."""
    cfg = model.cfg
    ls = []
    for b, item in enumerate(batch.items):
        ist = stream.child("item", b)
        x_t = Tensor(item.states[:, cfg.N:cfg.N + 1])
        x_t1 = Tensor(item.states[:, cfg.N + 1:cfg.N + 2])
        for k, (obs_raw, target) in enumerate([(item.obs_t, x_t),
                                               (item.obs_t1, x_t1)]):
            fst = ist.child("flt", k)
            for name in cfg.modalities:
                latent = model.encode_modality(name, obs_raw[name], fst)
                ls.append(_sq_err(model.decode_mean(latent), target))
    return _assemble([], [], ls, len(batch.items))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay over a ParameterStore.

    Parameters without a gradient this step are left untouched, moments
    included; each parameter keeps its own bias-correction count so a late
    first touch still warms up correctly."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr < 0 or weight_decay < 0:
            raise ValueError("AdamW: lr and weight_decay must be nonnegative")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"AdamW: betas {betas} outside [0, 1)")
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict = {}
        self._v: dict = {}
        self._n: dict = {}

    def step(self) -> None:
        b1, b2 = self.betas
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            self._n[name] = self._n.get(name, 0) + 1
            t = self._n[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns
    the pre-clip norm."""
    norm = store.global_grad_norm()
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, directory, extra: dict | None = None) -> Path:
    """Parameter payload plus the model kind and shape, enough to rebuild
    for eval; extra entries (say the attention mode used in training) are
    merged into model.json."""
    directory = Path(directory)
    model.store.save(directory)
    payload = {"kind": model.kind, "config": asdict(model.cfg)}
    if extra:
        payload.update(extra)
    (directory / "model.json").write_text(json.dumps(payload, indent=1) + "\n")
    return directory


def build_model(kind: str, cfg: ModelConfig, seed: int = 0):
    """Fresh model of the requested kind around a shared config."""
    if kind == "amdf":
        return AlphaMdf(cfg, seed=seed)
    if kind == "denkf":
        from .filters import Denkf
        return Denkf(cfg, seed=seed)
    if kind in ("feature", "unimodal", "crossmodal"):
        from .fusion import FusionDenkf
        return FusionDenkf(kind, cfg, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(directory, kind: str | None = None, seed: int = 0):
    """Rebuild a saved model; kind defaults to what the checkpoint says."""
    directory = Path(directory)
    spec = json.loads((directory / "model.json").read_text())
    if kind is None:
        kind = spec["kind"]
    cfg = model_config_from_dict(spec["config"])
    model = build_model(kind, cfg, seed=seed)
    model.store.load(directory)
    return model


# ---------------------------------------------------------------------------
# loops


def _check_compat(mcfg: ModelConfig, manifest: dict) -> None:
    pairs = [("state_dim", mcfg.state_dim), ("action_dim", mcfg.action_dim),
             ("proprio_dim", mcfg.proprio_dim), ("image_hw", mcfg.image_hw)]
    for key, want in pairs:
        if manifest.get(key) != want:
            raise ValueError(f"dataset {key} = {manifest.get(key)}, "
                             f"model wants {want}")


def _run(cfg: TrainConfig, dataset: TrajectoryDataset, out_dir, model,
         sensors_only: bool) -> Path:
    _check_compat(cfg.model, dataset.manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = AlphaMdf(cfg.model, seed=cfg.seed)
    opt = AdamW(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = RngStream(cfg.seed).child("pretrain" if sensors_only else "train")
    train_pool, _ = split_trials(dataset.trials, cfg)
    ckpt = out / "checkpoint"
    meta = {"attention_mode": cfg.attention_mode}
    log_path = out / ("pretrain_log.jsonl" if sensors_only else "loss_log.jsonl")
    n_mod = len(cfg.model.modalities)
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            st = root.child("step", step)
            batch = sample_batch(dataset, cfg.model, cfg.batch, train_pool,
                                 st.child("data"))
            if sensors_only:
                enabled = (True,) * n_mod
            else:
                gen = st.child("mask").generator()
                enabled = tuple(bool(gen.random() >= cfg.mask_prob)
                                for _ in range(n_mod))
            try:
                with Tape() as tape:
                    if sensors_only:
                        br = sensor_losses(batch, model, st.child("loss"))
                    else:
                        br = compute_losses(batch, model, st.child("loss"),
                                            enabled, cfg.attention_mode)
                    tape.backward([br.total], [np.ones(())])
            except NonFiniteError as exc:
                save_model(model, ckpt, meta)   # parameters are still pre-step
                raise RuntimeError(
                    f"non-finite loss at step {step}; last-good checkpoint "
                    f"written to {ckpt}") from exc
            gnorm = clip_gradients(model.store, cfg.clip)
            if not np.isfinite(gnorm):
                save_model(model, ckpt, meta)
                raise RuntimeError(
                    f"non-finite gradient at step {step}; last-good "
                    f"checkpoint written to {ckpt}")
            opt.step()
            model.store.zero_grads()
            rec = {"step": step, **br.floats(),
                   "grad_norm": gnorm,
                   "masked": [cfg.model.modalities[j] for j in range(n_mod)
                              if not enabled[j]]}
            log.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model(model, ckpt, meta)
    save_model(model, ckpt, meta)
    return ckpt


def train(cfg: TrainConfig, dataset: TrajectoryDataset, out_dir,
          model=None) -> Path:
    """Full curriculum; returns the checkpoint directory (written even for
    steps = 0, so the checkpoint then equals the initialization)."""
    return _run(cfg, dataset, out_dir, model, sensors_only=False)


def pretrain_encoders(cfg: TrainConfig, dataset: TrajectoryDataset, out_dir,
                      model=None) -> Path:
    """Sensor-loss-only warmup; the resulting checkpoint seeds train()."""
    return _run(cfg, dataset, out_dir, model, sensors_only=True)

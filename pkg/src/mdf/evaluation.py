"""Rollout evaluation: MAE tables, ablations, attention traces, drift
curves, and latency benchmarks.

Every estimator is rolled over the held-out tail of a recorded dataset.  A
rollout is seeded from the ground-truth states of the first ``start`` frames
(lifted into latent space, or inverted to joint angles for the classical
filter) and then runs blind on actions and sensor streams alone.  Position
error is the mean absolute error of the decoded end-effector coordinates;
orientation error is the mean absolute componentwise quaternion error after
sign alignment, since q and -q describe the same rotation.

Reports are plain dataclasses with JSON and markdown emitters so the CLI can
write both side by side.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import ModelConfig
from .filters import AttentionGainMask, FilterHistory, LatentEnsemble
from .params import RngStream
from .simworld import (
    DAMPING,
    DT,
    LINKS,
    TrajectoryDataset,
    apply_drift,
    drift_background,
    forward_kinematics,
    inverse_kinematics,
    load_dataset,
    mixing_matrix,
)
from .training import build_model, load_model

METHODS = ("amdf", "denkf", "dekf", "feature", "unimodal", "crossmodal")

__all__ = [
    "METHODS",
    "MaeReport",
    "DriftCurve",
    "evaluate",
    "ablate",
    "attention_report",
    "drift",
    "bench",
    "spearman_rho",
]


# ---------------------------------------------------------------------------
# metrics and small helpers


def pose_errors(decoded: np.ndarray, truth: np.ndarray):
    """Absolute position and sign-aligned quaternion errors, per step.

    decoded and truth are (n, 7) pose rows [x y z qx qy qz qw]; returns
    ((n, 3), (n, 4)) absolute errors."""
    decoded = np.asarray(decoded, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if decoded.shape != truth.shape or decoded.ndim != 2 or decoded.shape[1] != 7:
        raise ValueError(f"pose_errors: shapes {decoded.shape} vs {truth.shape}")
    pos = np.abs(decoded[:, :3] - truth[:, :3])
    q, qt = decoded[:, 3:], truth[:, 3:]
    sign = np.where(np.sum(q * qt, axis=1, keepdims=True) < 0.0, -1.0, 1.0)
    return pos, np.abs(sign * q - qt)


def spearman_rho(x, y) -> float:
    """Spearman rank correlation with average ranks on ties."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(v.size, dtype=float)
        for val in np.unique(v):
            m = v == val
            if m.sum() > 1:
                r[m] = r[m].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0.0 else 0.0


def _stderr(values) -> float | None:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return None
    return float(v.std(ddof=1) / np.sqrt(v.size))


def _fmt(mean: float, err: float | None) -> str:
    return f"{mean:.4f} ± " + (f"{err:.4f}" if err is not None else "n/a")


def _as_dataset(dataset) -> TrajectoryDataset:
    if isinstance(dataset, TrajectoryDataset):
        return dataset
    return load_dataset(dataset)


def validation_trials(dataset: TrajectoryDataset, val_fraction: float = 0.1,
                      max_trials: int | None = None) -> list[int]:
    """Held-out tail of the trial range, matching the training split."""
    n = dataset.trials
    n_val = int(round(n * val_fraction))
    if n_val < 1:
        raise ValueError(f"no validation trials from {n} trials "
                         f"at fraction {val_fraction}")
    pool = list(range(n - n_val, n))
    return pool[:max_trials] if max_trials is not None else pool


def _canonical_subset(subset, modalities) -> tuple:
    names = [subset] if isinstance(subset, str) else list(subset)
    if not names:
        raise ValueError("modality subset must be non-empty")
    unknown = set(names) - set(modalities)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}; "
                         f"dataset offers {list(modalities)}")
    return tuple(m for m in modalities if m in names)


def _check_method_subset(method: str, subset: tuple, modalities: tuple) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "feature" and subset != tuple(modalities):
        raise ValueError("feature fusion requires all modalities enabled")
    if method == "crossmodal" and len(subset) < 2:
        raise ValueError("crossmodal fusion needs at least two modalities")
    if method == "dekf" and "proprio" not in subset:
        raise ValueError("the extended Kalman baseline observes proprio only; "
                         "include it in the subset")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MaeReport:
    """End-effector and quaternion MAE for one (method, subset) cell.

    Means are over evaluated steps, trials and seeds; the spread over the
    per-seed means gives the standard error (None below two seeds).
    """

    method: str
    subset: tuple
    seeds: tuple
    trials: int
    start: int
    steps: int
    ee_mae: float
    ee_stderr: float | None
    quat_mae: float
    quat_stderr: float | None
    per_seed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ee_mae < 0.0 or self.quat_mae < 0.0:
            raise ValueError("MAE cannot be negative")

    def to_dict(self) -> dict:
        return {"method": self.method, "subset": list(self.subset),
                "seeds": list(self.seeds), "trials": self.trials,
                "start": self.start, "steps": self.steps,
                "ee_mae": self.ee_mae, "ee_stderr": self.ee_stderr,
                "quat_mae": self.quat_mae, "quat_stderr": self.quat_stderr,
                "per_seed": self.per_seed}

    def markdown_row(self) -> str:
        return (f"| {self.method} | {'+'.join(self.subset)} | "
                f"{_fmt(self.ee_mae, self.ee_stderr)} | "
                f"{_fmt(self.quat_mae, self.quat_stderr)} |")


MD_HEADER = ("| method | modalities | EE MAE | quaternion MAE |\n"
             "| --- | --- | --- | --- |")


@dataclass
class DriftCurve:
    """EE MAE as a function of the background blend level."""

    lams: tuple
    ee_mae: tuple
    quat_mae: tuple
    reports: list = field(default_factory=list)

    def __post_init__(self):
        lams = tuple(float(l) for l in self.lams)
        if any(not 0.0 <= l <= 1.0 for l in lams):
            raise ValueError("blend levels must lie in [0, 1]")
        if list(lams) != sorted(lams):
            raise ValueError("blend levels must be sorted ascending")
        if len(lams) != len(self.ee_mae):
            raise ValueError("one MAE per blend level required")
        self.lams = lams

    def spearman(self) -> float:
        return spearman_rho(self.lams, self.ee_mae)

    def to_dict(self) -> dict:
        return {"lams": list(self.lams), "ee_mae": list(self.ee_mae),
                "quat_mae": list(self.quat_mae),
                "spearman": self.spearman(),
                "reports": [r.to_dict() for r in self.reports]}

    def markdown(self) -> str:
        lines = ["| blend | EE MAE | quaternion MAE |", "| --- | --- | --- |"]
        for l, e, q in zip(self.lams, self.ee_mae, self.quat_mae):
            lines.append(f"| {l:.2f} | {e:.4f} | {q:.4f} |")
        lines.append("")
        lines.append(f"Spearman rho (blend vs EE MAE): {self.spearman():.3f}")
        return "\n".join(lines)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


# ---------------------------------------------------------------------------
# rollouts


def _lift_history(model, dataset, trial: int, start: int,
                  stream: RngStream) -> FilterHistory:
    hist = FilterHistory(model.cfg.N)
    states = np.stack([dataset.state_at(trial, k) for k in range(start)],
                      axis=1)
    for k, members in enumerate(model.lift(Tensor(states), stream)):
        hist.push(LatentEnsemble(members, k - start), None)
    return hist


def _bundle(dataset, trial: int, t: int, subset: tuple, rgb_transform):
    raw = {}
    if "rgb" in subset:
        rgb = dataset.rgb_at(trial, t)
        raw["rgb"] = rgb if rgb_transform is None else rgb_transform(rgb)
    if "depth" in subset:
        raw["depth"] = dataset.depth_at(trial, t)
    if "proprio" in subset:
        raw["proprio"] = dataset.proprio_at(trial, t).reshape(-1, 1)
    return raw


def _roll_amdf(model, dataset, trial: int, subset: tuple, stream: RngStream,
               start: int, mode: str, rgb_transform=None,
               enabled_at=None, collect_masses: bool = False):
    """Attention filter over one trial; returns decoded poses, truths and
    (optionally) the per-step attention masses."""
    cfg = model.cfg
    hist = _lift_history(model, dataset, trial, start, stream.child("hist"))
    decoded, truth, masses = [], [], []
    enabled_default = tuple(m in subset for m in cfg.modalities)
    for t in range(start, dataset.steps):
        enabled = enabled_default if enabled_at is None else enabled_at(t)
        mask = AttentionGainMask(cfg.d_x, enabled)
        sub_t = tuple(m for m, on in zip(cfg.modalities, enabled) if on)
        raw = _bundle(dataset, trial, t, sub_t, rgb_transform)
        action = dataset.action_at(trial, t - 1)
        _, diag = model.step(hist, action, raw, mask, stream.child("flt", t),
                             t=t, mode=mode, decode=True)
        decoded.append(diag.decoded)
        truth.append(dataset.state_at(trial, t))
        if collect_masses:
            masses.append(diag.masses)
    return np.asarray(decoded), np.asarray(truth), masses


def _roll_ensemble(model, dataset, trial: int, subset: tuple,
                   stream: RngStream, start: int, rgb_transform=None):
    """Ensemble Kalman variants (plain and fusion) over one trial."""
    cfg = model.cfg
    state0 = dataset.state_at(trial, start - 1).reshape(-1, 1)
    members = model.lift(Tensor(state0), stream.child("hist"))[0]
    ens = LatentEnsemble(members, start - 1)
    enabled = tuple(m in subset for m in cfg.modalities)
    decoded, truth = [], []
    for t in range(start, dataset.steps):
        raw = _bundle(dataset, trial, t, subset, rgb_transform)
        ens = model.step(ens, raw, enabled, stream.child("flt", t), t)
        decoded.append(model.decode_mean(ens.members).data[:, 0])
        truth.append(dataset.state_at(trial, t))
    return np.asarray(decoded), np.asarray(truth)


def _analytic_ekf(manifest: dict):
    """Extended Kalman pieces for the recorded world: exact joint dynamics
    and the noiseless proprio map, both on the autodiff tape."""
    from .filters import Dekf
    w = mixing_matrix(manifest["action_dim"])
    decay = float(np.exp(-DAMPING * DT))
    tri = np.tril(np.ones((3, 3)))
    a_end = np.tril(np.tile(LINKS, (3, 1)))
    a_mid = np.tril(np.tile(LINKS, (3, 1)), -1) + 0.5 * np.diag(LINKS)
    # grouped feature blocks -> per-link interleaving used by the simulator
    perm = np.zeros((30, 30))
    for k in range(3):
        for typ in range(10):
            perm[k * 10 + typ, typ * 3 + k] = 1.0
    t_tri, t_end = Tensor(tri), Tensor(a_end)
    t_mid, t_perm = Tensor(a_mid), Tensor(perm)

    def transition(x, action):
        eq = (w @ np.asarray(action, dtype=float) / DAMPING).reshape(3, 1)
        return ad.add(ad.scale(x, decay), Tensor((1.0 - decay) * eq))

    def observation(x):
        alpha = ad.matmul(t_tri, x)
        ca, sa = ad.cos(alpha), ad.sin(alpha)
        grouped = ad.concat([
            ca, sa, ad.cos(x), ad.sin(x),
            ad.matmul(t_end, ca), ad.matmul(t_end, sa),
            ad.matmul(t_mid, ca), ad.matmul(t_mid, sa),
            ad.scale(x, -DAMPING), ad.scale(alpha, -DAMPING),
        ], axis=0)
        return ad.matmul(t_perm, grouped)

    sigma = max(float(manifest.get("proprio_sigma", 0.15)), 1e-3)
    return Dekf(transition, observation, Q=1e-8 * np.eye(3),
                R=sigma * sigma * np.eye(30))


def _roll_dekf(dataset, trial: int, start: int):
    ekf = _analytic_ekf(dataset.manifest)
    x = inverse_kinematics(dataset.state_at(trial, start - 1)).reshape(3, 1)
    P = 0.05 * np.eye(3)
    decoded, truth = [], []
    for t in range(start, dataset.steps):
        x, P = ekf.step(x, P, dataset.action_at(trial, t - 1),
                        dataset.proprio_at(trial, t))
        decoded.append(forward_kinematics(x[:, 0])[1])
        truth.append(dataset.state_at(trial, t))
    return np.asarray(decoded), np.asarray(truth)


# ---------------------------------------------------------------------------
# evaluate


def _load_for_method(checkpoint, method: str, dataset: TrajectoryDataset,
                     model_config: ModelConfig | None, seed: int):
    """Model instance for one eval seed, plus the recorded attention mode."""
    if checkpoint is not None:
        spec = json.loads((Path(checkpoint) / "model.json").read_text())
        if spec["kind"] != method:
            raise ValueError(f"checkpoint holds a {spec['kind']} model, "
                             f"method is {method}")
        return load_model(checkpoint), spec.get("attention_mode", "exclusive")
    if method == "amdf":
        raise ValueError("the attention filter needs a trained checkpoint")
    if model_config is None:
        m = dataset.manifest
        model_config = ModelConfig.small(image_hw=m["image_hw"],
                                         action_dim=m["action_dim"],
                                         proprio_dim=m["proprio_dim"])
    return build_model(method, model_config, seed=seed), "exclusive"


def evaluate(checkpoint, dataset, method: str = "amdf",
             subset=("rgb", "depth", "proprio"), seeds=(0, 1, 2),
             max_trials: int | None = None, val_fraction: float = 0.1,
             start: int | None = None, attention_mode: str | None = None,
             model_config: ModelConfig | None = None,
             rgb_transform=None) -> MaeReport:
    """Roll one estimator over the held-out trials and aggregate MAEs.

    Deterministic in (checkpoint, dataset, seeds): all stochasticity flows
    from per-seed streams.  Baselines without a checkpoint are built fresh
    per seed, so their spread reflects initialization variance.
    """
    dataset = _as_dataset(dataset)
    subset = _canonical_subset(subset, dataset_modalities(dataset))
    _check_method_subset(method, subset, dataset_modalities(dataset))
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("at least one evaluation seed required")
    pool = validation_trials(dataset, val_fraction, max_trials)

    shared = None
    if method != "dekf" and checkpoint is not None:
        shared, recorded_mode = _load_for_method(checkpoint, method, dataset,
                                                 model_config, seeds[0])

    per_seed, ee_means, quat_means = {}, [], []
    resolved_start = start
    for seed in seeds:
        if method == "dekf":
            model, mode = None, None
            # default window matches the full-scale history length, shrunk
            # for short recordings
            s0 = min(8, dataset.steps - 1) if start is None else start
        else:
            if shared is not None:
                model, mode = shared, recorded_mode
            else:
                model, mode = _load_for_method(None, method, dataset,
                                               model_config, seed)
            if attention_mode is not None:
                mode = attention_mode
            s0 = model.cfg.N if start is None else start
        if not 1 <= s0 < dataset.steps:
            raise ValueError(f"start {s0} outside [1, {dataset.steps - 1}]")
        resolved_start = s0
        root = RngStream(seed).child("eval", method)
        pos_all, quat_all = [], []
        for trial in pool:
            ts = root.child("trial", trial)
            if method == "amdf":
                dec, tru, _ = _roll_amdf(model, dataset, trial, subset, ts,
                                         s0, mode, rgb_transform)
            elif method == "dekf":
                dec, tru = _roll_dekf(dataset, trial, s0)
            else:
                dec, tru = _roll_ensemble(model, dataset, trial, subset, ts,
                                          s0, rgb_transform)
            pos, quat = pose_errors(dec, tru)
            pos_all.append(pos)
            quat_all.append(quat)
        ee = float(np.concatenate(pos_all).mean())
        qm = float(np.concatenate(quat_all).mean())
        per_seed[str(seed)] = {"ee_mae": ee, "quat_mae": qm}
        ee_means.append(ee)
        quat_means.append(qm)

    return MaeReport(
        method=method, subset=subset, seeds=seeds, trials=len(pool),
        start=resolved_start, steps=dataset.steps,
        ee_mae=float(np.mean(ee_means)), ee_stderr=_stderr(ee_means),
        quat_mae=float(np.mean(quat_means)), quat_stderr=_stderr(quat_means),
        per_seed=per_seed)


def dataset_modalities(dataset: TrajectoryDataset) -> tuple:
    return ("rgb", "depth", "proprio")


# ---------------------------------------------------------------------------
# ablation


def all_subsets(modalities=("rgb", "depth", "proprio")) -> list[tuple]:
    """The 7 non-empty subsets, singletons first, canonical order."""
    out = []
    for size in (1, 2, 3):
        for bits in range(1, 8):
            sub = tuple(m for j, m in enumerate(modalities) if bits >> j & 1)
            if len(sub) == size and sub not in out:
                out.append(sub)
    return out


def ablate(checkpoint, dataset, seeds=(0, 1, 2), out_dir=None,
           **eval_kwargs) -> dict:
    """One evaluate() per non-empty modality subset of the attention filter."""
    dataset = _as_dataset(dataset)
    reports = {}
    for sub in all_subsets(dataset_modalities(dataset)):
        rep = evaluate(checkpoint, dataset, method="amdf", subset=sub,
                       seeds=seeds, **eval_kwargs)
        reports["+".join(sub)] = rep
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "ablation.json",
                    {k: r.to_dict() for k, r in reports.items()})
        lines = [MD_HEADER] + [r.markdown_row() for r in reports.values()]
        (out / "ablation.md").write_text("\n".join(lines) + "\n")
    return reports


# ---------------------------------------------------------------------------
# attention traces


def attention_report(checkpoint, dataset, schedule=None, seeds=(0,),
                     max_trials: int = 1, val_fraction: float = 0.1,
                     out_path=None, plot: bool = False,
                     attention_mode: str | None = None) -> list[dict]:
    """Per-step attention masses of the attention filter, averaged over
    trials and seeds.

    schedule is a sorted list of (step, subset) switch points; from each
    step on, only that subset is enabled.  Masses of disabled modalities are
    exactly zero and the remaining masses renormalize through the softmax.
    Returns one record per step and optionally writes JSON-lines (plus an
    SVG when plot is set).
    """
    dataset = _as_dataset(dataset)
    spec = json.loads((Path(checkpoint) / "model.json").read_text())
    if spec["kind"] != "amdf":
        raise ValueError("attention traces only exist for the attention "
                         f"filter, checkpoint holds {spec['kind']}")
    model = load_model(checkpoint)
    mode = spec.get("attention_mode", "exclusive")
    if attention_mode is not None:
        mode = attention_mode
    modalities = model.cfg.modalities
    if schedule is None:
        schedule = [(0, modalities)]
    sched = sorted((int(t), _canonical_subset(s, modalities))
                   for t, s in schedule)

    def enabled_at(t):
        current = sched[0][1]
        for t0, sub in sched:
            if t0 <= t:
                current = sub
        return tuple(m in current for m in modalities)

    pool = validation_trials(dataset, val_fraction, max_trials)
    start = model.cfg.N
    acc: dict[int, list] = {}
    for seed in seeds:
        root = RngStream(int(seed)).child("eval", "amdf")
        for trial in pool:
            dec, tru, masses = _roll_amdf(
                model, dataset, trial, modalities, root.child("trial", trial),
                start, mode, enabled_at=enabled_at, collect_masses=True)
            pos, _ = pose_errors(dec, tru)
            for i, m in enumerate(masses):
                acc.setdefault(start + i, []).append(
                    (m, float(pos[i].mean())))
    records = []
    for t in sorted(acc):
        entries = acc[t]
        names = entries[0][0].keys()
        mean_masses = {n: float(np.mean([e[0][n] for e in entries]))
                       for n in names}
        on = enabled_at(t)
        records.append({"t": t,
                        "enabled": [m for m, o in zip(modalities, on) if o],
                        "attention": mean_masses,
                        "ee_mae": float(np.mean([e[1] for e in entries]))})
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
        if plot:
            series = {name: [r["attention"].get(name, 0.0) for r in records]
                      for name in ("prediction",) + tuple(modalities)}
            _svg_lines(out_path.with_suffix(".svg"), series,
                       title="attention mass per source")
    return records


# ---------------------------------------------------------------------------
# visual drift


def drift(checkpoint, dataset, lams=(0.0, 0.25, 0.5, 0.75, 1.0),
          background_seed: int = 0, seeds=(0, 1, 2),
          subset=("rgb", "depth", "proprio"), out_dir=None,
          plot: bool = False, **eval_kwargs) -> DriftCurve:
    """Evaluate the attention filter with the RGB stream blended toward a
    random static background; lam = 0 reproduces the clean numbers bit for
    bit because the blend is an exact copy there."""
    dataset = _as_dataset(dataset)
    lams = tuple(sorted(float(l) for l in lams))
    subset = _canonical_subset(subset, dataset_modalities(dataset))
    if "rgb" not in subset:
        raise ValueError("drift perturbs rgb; enable it in the subset")
    hw = dataset.manifest["image_hw"]
    background = drift_background(
        hw, RngStream(int(background_seed)).child("background"))
    reports = []
    for lam in lams:
        rep = evaluate(checkpoint, dataset, method="amdf", subset=subset,
                       seeds=seeds,
                       rgb_transform=lambda rgb, lam=lam: apply_drift(
                           rgb, background, lam),
                       **eval_kwargs)
        reports.append(rep)
    curve = DriftCurve(lams=lams,
                       ee_mae=tuple(r.ee_mae for r in reports),
                       quat_mae=tuple(r.quat_mae for r in reports),
                       reports=reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "drift.json", curve.to_dict())
        (out / "drift.md").write_text(curve.markdown() + "\n")
        if plot:
            _svg_lines(out / "drift.svg",
                       {"ee_mae": list(curve.ee_mae)}, title="EE MAE vs blend")
    return curve


# ---------------------------------------------------------------------------
# latency


def bench(checkpoint, dataset, subsets=(("proprio",),
                                        ("rgb", "depth", "proprio")),
          steps: int = 100, reps: int = 3, seed: int = 0,
          val_fraction: float = 0.1, out_dir=None) -> list[dict]:
    """Median per-step wall-clock latency of the attention filter.

    Each rep replays ``steps`` filter steps over a validation trial's
    observations (cycled); the first two steps of every rep warm caches and
    are not timed.  The rep statistic is the median per-step latency; the
    spread over reps gives the standard error, n/a for a single rep.
    """
    dataset = _as_dataset(dataset)
    if steps < 1 or reps < 1:
        raise ValueError("steps and reps must be positive")
    model, mode = _load_for_method(checkpoint, "amdf", dataset, None, seed)
    trial = validation_trials(dataset, val_fraction, 1)[0]
    cfg = model.cfg
    start = cfg.N
    span = dataset.steps - start
    rows = []
    for sub in subsets:
        subset = _canonical_subset(sub, cfg.modalities)
        enabled = tuple(m in subset for m in cfg.modalities)
        mask = AttentionGainMask(cfg.d_x, enabled)
        rep_stats = []
        for rep in range(reps):
            stream = RngStream(seed).child("bench", rep)
            hist = _lift_history(model, dataset, trial, start,
                                 stream.child("hist"))
            samples = []
            for i in range(steps + 2):
                t = start + i % span
                raw = _bundle(dataset, trial, t, subset, None)
                action = dataset.action_at(trial, t - 1)
                t0 = time.perf_counter()
                model.step(hist, action, raw, mask, stream.child("flt", i),
                           t=t, mode=mode, decode=True)
                if i >= 2:
                    samples.append(time.perf_counter() - t0)
            rep_stats.append(float(np.median(samples)))
        rows.append({"method": "amdf", "subset": "+".join(subset),
                     "median_s": float(np.median(rep_stats)),
                     "stderr_s": _stderr(rep_stats),
                     "steps": steps, "reps": reps})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bench.json", rows)
        lines = ["| method | modalities | median step (s) | stderr |",
                 "| --- | --- | --- | --- |"]
        for r in rows:
            err = "n/a" if r["stderr_s"] is None else f"{r['stderr_s']:.2e}"
            lines.append(f"| {r['method']} | {r['subset']} | "
                         f"{r['median_s']:.4f} | {err} |")
        (out / "bench.md").write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# plotting (optional, plain SVG polylines)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_lines(path: Path, series: dict, title: str = "") -> None:
    """Write a minimal polyline chart; no plotting dependency needed."""
    width, height, pad = 640, 360, 40
    values = [v for vs in series.values() for v in vs]
    if not values:
        raise ValueError("nothing to plot")
    lo, hi = min(values), max(values)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max(len(vs) for vs in series.values())
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="13">{title}</text>']
    for i, (name, vs) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = []
        for j, v in enumerate(vs):
            x = pad + (width - 2 * pad) * (j / max(n - 1, 1))
            y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
            pts.append(f"{x:.1f},{y:.1f}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 110}" y="{20 + 14 * i}" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")

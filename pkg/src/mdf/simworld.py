"""Synthetic multimodal world: a planar tendon-driven 3-link arm.

The arm lives in a first-order tendon model: a 40-wide pressure vector is
mixed down to per-joint drive through a fixed matrix W, and the joints relax
toward the drive against linear damping,

    theta_dot = W a - damping * theta .

The ODE is linear, so a frame step is integrated exactly (exponential decay
toward the action's equilibrium).  Each state renders to three streams: an
anti-aliased RGB stick figure (one link per channel), a quantized
distance-to-arm depth map, and a noisy 30-wide proprioceptive vector.  The
end-effector position is never drawn explicitly; estimators must infer it.

Datasets are a manifest plus a flat little-endian f32 record file, written
deterministically from (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import RngStream

LINKS = np.array([0.5, 0.4, 0.3])
DAMPING = 2.0
DT = 1.0 / 30.0

# Fixed world seed: every dataset shares the same mixing matrix, only the
# trajectories and sensor noise vary with the dataset seed.
_MIX_SEED = 70
_MIX_SCALE = 2.0

VIEW_HALF = 1.3          # world half-extent of the camera box
HALF_WIDTH = 0.10        # link half-thickness in world units
FEATHER = 0.06           # anti-aliasing falloff width
DEPTH_SCALE = 0.3        # sensing range: distances beyond this saturate to 1.0
DEPTH_LEVELS = 5

STATE_DIM = 7
PROPRIO_DIM = 30

__all__ = [
    "ArmState",
    "ModalityBundle",
    "SimConfig",
    "TrajectoryDataset",
    "apply_drift",
    "equilibrium_pressure",
    "equilibrium_range",
    "forward_kinematics",
    "generate_dataset",
    "load_dataset",
    "mixing_matrix",
    "render_bundle",
    "drift_background",
    "inverse_kinematics",
    "simulate_trial",
    "step_dynamics",
    "wrap_angle",
]


def wrap_angle(a: np.ndarray) -> np.ndarray:
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


_MIX_CACHE: dict = {}


def mixing_matrix(action_dim: int = 40) -> np.ndarray:
    """Fixed 3 x action_dim tendon mixing matrix.

    Rows are zero-sum (a uniform pressure produces no drive) and mutually
    orthogonal with norm _MIX_SCALE, so W W^T = _MIX_SCALE^2 I and the
    pseudo-inverse used by equilibrium_pressure is well conditioned."""
    if action_dim < 8:
        raise ValueError(f"mixing_matrix: action_dim {action_dim} < 8")
    if action_dim not in _MIX_CACHE:
        gen = RngStream(_MIX_SEED).child("mix", action_dim).generator()
        raw = gen.standard_normal((3, action_dim))
        raw -= raw.mean(axis=1, keepdims=True)
        basis: list = []
        for row in raw:
            for b in basis:
                row = row - (row @ b) * b
            norm = np.linalg.norm(row)
            if norm < 1e-8:
                raise ArithmeticError("mixing_matrix: degenerate random rows")
            basis.append(row / norm)
        _MIX_CACHE[action_dim] = _MIX_SCALE * np.stack(basis)
    return _MIX_CACHE[action_dim]


def equilibrium_range(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint interval of angles reachable as equilibria over [0,1]^A."""
    lo = w.clip(max=0.0).sum(axis=1) / DAMPING
    hi = w.clip(min=0.0).sum(axis=1) / DAMPING
    return lo, hi


class ArmState:
    """Joint angles of the arm, wrapped to [-pi, pi).

    The 7-d pose [x, y, z, qx, qy, qz, qw] is derived through forward
    kinematics; z and the out-of-plane quaternion parts are zero for this
    planar arm but kept for shape parity with the estimators."""

    __slots__ = ("angles",)

    def __init__(self, angles):
        a = np.asarray(angles, dtype=float)
        if a.shape != (3,):
            raise ValueError(f"ArmState: angles must be shape (3,), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("ArmState: non-finite angles")
        self.angles = wrap_angle(a)

    @property
    def pose(self) -> np.ndarray:
        return forward_kinematics(self.angles)[1]

    def __repr__(self):
        return f"ArmState({np.array2string(self.angles, precision=4)})"


def forward_kinematics(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions (4 x 2, base first) and the 7-d end-effector pose.

    The quaternion rotates about the view axis by the summed joint angle."""
    alpha = np.cumsum(angles)
    steps = np.stack([LINKS * np.cos(alpha), LINKS * np.sin(alpha)], axis=1)
    joints = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    half = 0.5 * alpha[2]
    pose = np.array([joints[3, 0], joints[3, 1], 0.0,
                     0.0, 0.0, np.sin(half), np.cos(half)])
    return joints, pose


def inverse_kinematics(pose: np.ndarray, elbow: float = 1.0) -> np.ndarray:
    """Joint angles reproducing a reachable end-effector pose.

    Planar closed form: the heading comes out of the quaternion, the wrist
    sits one link length behind the end effector, and the first two joints
    follow from the two-link triangle.  elbow (+1 or -1) picks the branch;
    poses generated by forward_kinematics with theta_2 >= 0 match +1.
    Unreachable wrist distances are clamped to the nearest reachable pose.
    """
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (7,):
        raise ValueError(f"inverse_kinematics: pose shape {pose.shape}, want (7,)")
    phi = 2.0 * np.arctan2(pose[5], pose[6])
    wx = pose[0] - LINKS[2] * np.cos(phi)
    wy = pose[1] - LINKS[2] * np.sin(phi)
    l1, l2 = LINKS[0], LINKS[1]
    c2 = np.clip((wx * wx + wy * wy - l1 * l1 - l2 * l2) / (2.0 * l1 * l2),
                 -1.0, 1.0)
    t2 = np.sign(elbow) * np.arccos(c2)
    t1 = np.arctan2(wy, wx) - np.arctan2(l2 * np.sin(t2), l1 + l2 * np.cos(t2))
    return wrap_angle(np.array([t1, t2, phi - t1 - t2]))


def equilibrium_pressure(angles: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Pressure vector whose equilibrium is exactly the given angles.

    Minimum-norm solution around the 0.5 center pressure; entries can leave
    [0, 1] for extreme angles, in which case the caller has to clip (and
    accept a nearby equilibrium instead)."""
    if w is None:
        w = mixing_matrix()
    theta = np.asarray(angles, dtype=float).reshape(3)
    return 0.5 + w.T @ np.linalg.solve(w @ w.T, DAMPING * theta)


def step_dynamics(state: ArmState, action: np.ndarray,
                  w: np.ndarray | None = None) -> ArmState:
    """One 30 Hz frame of theta_dot = W a - damping * theta.

    The step is the exact solution of the linear ODE: exponential decay from
    the current angles toward the action's equilibrium."""
    if w is None:
        w = mixing_matrix()
    a = np.asarray(action, dtype=float)
    if a.shape != (w.shape[1],):
        raise ValueError(f"step_dynamics: action shape {a.shape}, want ({w.shape[1]},)")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError("step_dynamics: action entries must lie in [0, 1]")
    eq = (w @ a) / DAMPING
    decay = np.exp(-DAMPING * DT)
    return ArmState(eq + (state.angles - eq) * decay)


@dataclass
class ModalityBundle:
    rgb: np.ndarray                     # (hw, hw, 3) in [0, 1]
    depth: np.ndarray                   # (hw, hw) in [0, 1]
    proprio: np.ndarray                 # (30,)
    available: dict = field(default_factory=lambda: {
        "rgb": True, "depth": True, "proprio": True})


def _segment_distance(px: np.ndarray, py: np.ndarray,
                      p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    dx, dy = px - p0[0], py - p0[1]
    denom = vx * vx + vy * vy
    t = np.clip((dx * vx + dy * vy) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return np.hypot(dx - t * vx, dy - t * vy)


def _proprio_features(angles: np.ndarray) -> np.ndarray:
    """Per-link synthetic IMU-ish features, 10 per link.

    Orientation sines/cosines (absolute and relative), joint and midpoint
    positions, plus the damping component of the angular rate."""
    alpha = np.cumsum(angles)
    joints, _ = forward_kinematics(angles)
    feats = []
    for k in range(3):
        mid = 0.5 * (joints[k] + joints[k + 1])
        feats.extend([
            np.cos(alpha[k]), np.sin(alpha[k]),
            np.cos(angles[k]), np.sin(angles[k]),
            joints[k + 1, 0], joints[k + 1, 1],
            mid[0], mid[1],
            -DAMPING * angles[k], -DAMPING * alpha[k],
        ])
    return np.array(feats)


def render_bundle(state: ArmState, stream: RngStream, hw: int = 32,
                  sigma: float = 0.15) -> ModalityBundle:
    """Render the three sensor streams for one state.

    RGB and depth are deterministic in the state; only the proprio noise
    draws from the stream."""
    joints, _ = forward_kinematics(state.angles)
    centers = -VIEW_HALF + (np.arange(hw) + 0.5) * (2.0 * VIEW_HALF / hw)
    px = centers[None, :]
    py = -centers[:, None]          # row 0 is the top of the image
    dists = np.stack([_segment_distance(px, py, joints[k], joints[k + 1])
                      for k in range(3)], axis=-1)
    rgb = np.clip((HALF_WIDTH + FEATHER - dists) / FEATHER, 0.0, 1.0)
    nearest = dists.min(axis=-1)
    levels = np.minimum(np.floor(np.clip(nearest / DEPTH_SCALE, 0.0, 1.0)
                                 * DEPTH_LEVELS), DEPTH_LEVELS - 1)
    depth = levels / (DEPTH_LEVELS - 1)
    noise = stream.generator().normal(0.0, sigma, size=PROPRIO_DIM)
    return ModalityBundle(rgb=rgb, depth=depth,
                          proprio=_proprio_features(state.angles) + noise)


@dataclass(frozen=True)
class SimConfig:
    trials: int = 2000
    steps: int = 30
    seed: int = 0
    image_hw: int = 32
    proprio_sigma: float = 0.15
    action_dim: int = 40
    resample_every: int = 10

    def __post_init__(self):
        if self.trials < 1 or self.steps < 1:
            raise ValueError("SimConfig: trials and steps must be positive")
        if self.image_hw < 8:
            raise ValueError(f"SimConfig: image_hw {self.image_hw} < 8")
        if self.proprio_sigma <= 0:
            raise ValueError("SimConfig: proprio_sigma must be positive")
        if self.resample_every < 1:
            raise ValueError("SimConfig: resample_every must be positive")

    @property
    def record_floats(self) -> int:
        return (STATE_DIM + self.action_dim + PROPRIO_DIM
                + self.image_hw * self.image_hw * 4)


def simulate_trial(cfg: SimConfig, stream: RngStream, w: np.ndarray):
    """Yield (state, action) pairs for one trial, no rendering.

    The initial posture and the per-segment action targets are drawn from
    the stream; targets are equilibrium postures inside the reachable box so
    trajectories sweep the angle range instead of huddling near zero."""
    lo, hi = equilibrium_range(w)
    gen = stream.generator()
    state = ArmState(gen.uniform(0.9 * lo, 0.9 * hi))
    action = None
    for t in range(cfg.steps):
        if t % cfg.resample_every == 0:
            target = gen.uniform(0.95 * lo, 0.95 * hi)
            action = np.clip(equilibrium_pressure(target, w), 0.0, 1.0)
        yield state, action
        state = step_dynamics(state, action, w)


def _manifest(cfg: SimConfig) -> dict:
    return {
        "format": "mdf-dataset-v1",
        "trials": cfg.trials,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "state_dim": STATE_DIM,
        "action_dim": cfg.action_dim,
        "proprio_dim": PROPRIO_DIM,
        "image_hw": cfg.image_hw,
        "proprio_sigma": cfg.proprio_sigma,
        "dt": DT,
        "record_floats": cfg.record_floats,
        "dtype": "<f4",
    }


def generate_dataset(cfg: SimConfig, out_dir) -> Path:
    """Write manifest.json and trials.bin under out_dir, deterministically.

    Record layout, all little-endian f32: pose 7 | action A | proprio 30 |
    depth hw^2 | rgb 3 hw^2.  The manifest goes first so a partial run is
    detectable by a size mismatch."""
    w = mixing_matrix(cfg.action_dim)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(
            json.dumps(_manifest(cfg), indent=2) + "\n")
        root = RngStream(cfg.seed)
        with open(out / "trials.bin", "wb") as fh:
            for i in range(cfg.trials):
                st = root.child("trial", i)
                rows = []
                for t, (state, action) in enumerate(
                        simulate_trial(cfg, st.child("path"), w)):
                    bundle = render_bundle(state, st.child("sense", t),
                                           hw=cfg.image_hw, sigma=cfg.proprio_sigma)
                    rows.append(np.concatenate([
                        state.pose, action, bundle.proprio,
                        bundle.depth.ravel(), bundle.rgb.ravel(),
                    ]).astype("<f4"))
                fh.write(np.stack(rows).tobytes())
    except OSError as exc:
        raise OSError(f"dataset write failed under {out}: {exc}") from exc
    return out


class TrajectoryDataset:
    """Read-only view over a generated dataset (records stay memory-mapped)."""

    def __init__(self, manifest: dict, records: np.ndarray, path: Path):
        self.manifest = manifest
        self.records = records
        self.path = path
        a, hw = manifest["action_dim"], manifest["image_hw"]
        self._ofs_action = STATE_DIM
        self._ofs_proprio = self._ofs_action + a
        self._ofs_depth = self._ofs_proprio + PROPRIO_DIM
        self._ofs_rgb = self._ofs_depth + hw * hw
        self.hw = hw

    @property
    def trials(self) -> int:
        return self.manifest["trials"]

    @property
    def steps(self) -> int:
        return self.manifest["steps"]

    def _row(self, trial: int, step: int) -> np.ndarray:
        if not (0 <= trial < self.trials and 0 <= step < self.steps):
            raise IndexError(f"record ({trial}, {step}) outside "
                             f"{self.trials} x {self.steps}")
        return self.records[trial * self.steps + step]

    def state_at(self, trial: int, step: int) -> np.ndarray:
        return self._row(trial, step)[:STATE_DIM].astype(np.float64)

    def action_at(self, trial: int, step: int) -> np.ndarray:
        r = self._row(trial, step)
        return r[self._ofs_action:self._ofs_proprio].astype(np.float64)

    def proprio_at(self, trial: int, step: int) -> np.ndarray:
        r = self._row(trial, step)
        return r[self._ofs_proprio:self._ofs_depth].astype(np.float64)

    def depth_at(self, trial: int, step: int) -> np.ndarray:
        r = self._row(trial, step)
        return r[self._ofs_depth:self._ofs_rgb].astype(np.float64).reshape(
            self.hw, self.hw)

    def rgb_at(self, trial: int, step: int) -> np.ndarray:
        r = self._row(trial, step)
        return r[self._ofs_rgb:].astype(np.float64).reshape(self.hw, self.hw, 3)


def load_dataset(path) -> TrajectoryDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "mdf-dataset-v1":
        raise ValueError(f"{mpath}: unknown dataset format {manifest.get('format')!r}")
    n = manifest["trials"] * manifest["steps"]
    rf = manifest["record_floats"]
    bpath = root / "trials.bin"
    size = bpath.stat().st_size
    if size != n * rf * 4:
        raise ValueError(f"{bpath}: {size} bytes, manifest implies {n * rf * 4}")
    records = np.memmap(bpath, dtype="<f4", mode="r", shape=(n, rf))
    return TrajectoryDataset(manifest, records, root)


def apply_drift(rgb: np.ndarray, background: np.ndarray, lam: float) -> np.ndarray:
    """Blend a background into an RGB frame: (1 - lam) rgb + lam bg.

    lam = 0 and lam = 1 return exact copies of the respective input so the
    clean-evaluation path is bit-identical."""
    rgb = np.asarray(rgb, dtype=float)
    background = np.asarray(background, dtype=float)
    if rgb.shape != background.shape:
        raise ValueError(f"apply_drift: shapes {rgb.shape} and "
                         f"{background.shape} differ")
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"apply_drift: blend {lam} outside [0, 1]")
    if lam == 0.0:
        return rgb.copy()
    if lam == 1.0:
        return background.copy()
    return np.clip((1.0 - lam) * rgb + lam * background, 0.0, 1.0)


def drift_background(hw: int, stream: RngStream) -> np.ndarray:
    """Smooth random color field standing in for a changed scene backdrop.

    A 4 x 4 coarse grid of mid-range colors, bilinearly upsampled, so the
    field has structure at the scale of the arm without resembling it."""
    if hw < 2:
        raise ValueError(f"drift_background: image size {hw} too small")
    coarse = stream.generator().uniform(0.15, 0.85, size=(4, 4, 3))
    src = np.linspace(0.0, 3.0, hw)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, 3)
    f = src - i0
    rows = coarse[i0] * (1.0 - f)[:, None, None] + coarse[i1] * f[:, None, None]
    return (rows[:, i0] * (1.0 - f)[None, :, None]
            + rows[:, i1] * f[None, :, None])

import json
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mdf.autodiff import Tensor
from mdf.blocks import ModelConfig
from mdf.filters import AlphaMdf, LatentEnsemble
from mdf.fusion import FusionDenkf
from mdf import evaluation as ev
from mdf.params import RngStream
from mdf.simworld import SimConfig, generate_dataset, load_dataset
from mdf.training import save_model


def tiny_model_config(**overrides):
    base = dict(d_x=8, E=4, N=2, heads=2, image_hw=8, conv_channels=(2, 3),
                image_tail=(8,), proprio_widths=(8,), decoder_widths=(8,),
                lift_widths=(8,), post_widths=(8,), pre_layers=1,
                attn_layers=1, activation="tanh")
    base.update(overrides)
    return ModelConfig.small(**base)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("evds")
    generate_dataset(SimConfig(trials=16, steps=8, seed=2, image_hw=8), root)
    return load_dataset(root)


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("evckpt")
    model = AlphaMdf(tiny_model_config(), seed=0)
    save_model(model, root, {"attention_mode": "exclusive"})
    return root


# ------------------------------------------------------------------ metrics


def test_pose_errors_zero_on_identical():
    truth = np.random.default_rng(0).standard_normal((5, 7))
    pos, quat = ev.pose_errors(truth, truth)
    assert pos.shape == (5, 3) and quat.shape == (5, 4)
    assert pos.max() == 0.0 and quat.max() == 0.0


def test_pose_errors_sign_aligns_quaternion():
    truth = np.zeros((1, 7))
    truth[0, 3:] = [0.1, 0.2, 0.3, 0.9]
    flipped = truth.copy()
    flipped[0, 3:] *= -1.0
    _, quat = ev.pose_errors(flipped, truth)
    assert quat.max() == 0.0


def test_pose_errors_known_values():
    truth = np.zeros((1, 7))
    truth[0, 6] = 1.0
    est = truth.copy()
    est[0, 0] = 0.3
    est[0, 1] = -0.1
    pos, quat = ev.pose_errors(est, truth)
    assert_allclose(pos[0], [0.3, 0.1, 0.0], atol=1e-15)
    assert quat.max() == 0.0


def test_spearman_rho_extremes_and_ties():
    assert ev.spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert ev.spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert ev.spearman_rho([1, 2, 3], [5, 5, 5]) == 0.0
    # one tie pair: hand-checked against the rank formula
    rho = ev.spearman_rho([1, 2, 3, 4], [1, 1, 2, 3])
    assert 0.9 < rho < 1.0


def test_validation_trials_tail_and_cap(tiny_dataset):
    pool = ev.validation_trials(tiny_dataset, 0.25)
    assert pool == [12, 13, 14, 15]
    assert ev.validation_trials(tiny_dataset, 0.25, max_trials=2) == [12, 13]
    with pytest.raises(ValueError, match="no validation trials"):
        ev.validation_trials(tiny_dataset, 0.001)


# --------------------------------------------------------------- validation


def test_subset_validation_errors(tiny_dataset, tiny_checkpoint):
    with pytest.raises(ValueError, match="non-empty"):
        ev.evaluate(tiny_checkpoint, tiny_dataset, subset=())
    with pytest.raises(ValueError, match="unknown modalities"):
        ev.evaluate(tiny_checkpoint, tiny_dataset, subset=("lidar",))
    with pytest.raises(ValueError, match="requires all modalities"):
        ev.evaluate(None, tiny_dataset, method="feature", subset=("rgb",),
                    model_config=tiny_model_config())
    with pytest.raises(ValueError, match="at least two"):
        ev.evaluate(None, tiny_dataset, method="crossmodal",
                    subset=("depth",), model_config=tiny_model_config())
    with pytest.raises(ValueError, match="proprio"):
        ev.evaluate(None, tiny_dataset, method="dekf", subset=("rgb",))
    with pytest.raises(ValueError, match="unknown method"):
        ev.evaluate(tiny_checkpoint, tiny_dataset, method="ukf")


def test_method_checkpoint_mismatch(tiny_dataset, tiny_checkpoint, tmp_path):
    save_model(FusionDenkf("unimodal", tiny_model_config(), seed=0), tmp_path)
    with pytest.raises(ValueError, match="holds a unimodal"):
        ev.evaluate(tmp_path, tiny_dataset, method="amdf")
    with pytest.raises(ValueError, match="holds a amdf"):
        ev.evaluate(tiny_checkpoint, tiny_dataset, method="denkf")
    with pytest.raises(ValueError, match="needs a trained checkpoint"):
        ev.evaluate(None, tiny_dataset, method="amdf")


def test_all_subsets_seven_canonical():
    subs = ev.all_subsets()
    assert len(subs) == 7
    assert subs[0] == ("rgb",)
    assert subs[-1] == ("rgb", "depth", "proprio")
    assert len(set(subs)) == 7


# ------------------------------------------------------------ oracle checks


class _OracleEnsemble:
    """Fake latent model whose decode returns the recorded truth, so the
    harness metric must come out exactly zero."""

    def __init__(self, dataset, trial):
        self.cfg = SimpleNamespace(N=2, d_x=8, E=3,
                                   modalities=("rgb", "depth", "proprio"))
        self.dataset, self.trial = dataset, trial

    def _lift_one(self, state):
        col = np.concatenate([state, [0.0]]).reshape(-1, 1)
        return Tensor(np.tile(col, (1, self.cfg.E)))

    def lift(self, states, stream):
        return [self._lift_one(states.data[:, k])
                for k in range(states.shape[1])]

    def step(self, ens, raw, enabled, stream, t=0):
        truth = self.dataset.state_at(self.trial, t)
        return LatentEnsemble(self._lift_one(truth), t)

    def decode_mean(self, X):
        return Tensor(X.data.mean(axis=1, keepdims=True)[:7])


def test_oracle_decoder_gives_zero_mae(tiny_dataset):
    model = _OracleEnsemble(tiny_dataset, trial=12)
    dec, tru = ev._roll_ensemble(model, tiny_dataset, 12,
                                 ("rgb", "depth", "proprio"),
                                 RngStream(0).child("t"), start=2)
    pos, quat = ev.pose_errors(dec, tru)
    assert pos.max() == 0.0 and quat.max() == 0.0


def test_dekf_tracks_recorded_world(tiny_dataset):
    # exact dynamics + exact observation model: the classical filter must
    # land close to the truth despite the noisy proprio stream
    rep = ev.evaluate(None, tiny_dataset, method="dekf", seeds=(0, 1),
                      max_trials=2, start=2)
    assert rep.ee_mae < 0.05
    assert rep.quat_mae < 0.05
    # no sampling inside: identical across seeds
    assert rep.ee_stderr == 0.0


# ------------------------------------------------------------- evaluate API


def test_evaluate_amdf_runs_and_is_deterministic(tiny_dataset, tiny_checkpoint):
    a = ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(0, 1), max_trials=2)
    b = ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(0, 1), max_trials=2)
    assert a.to_dict() == b.to_dict()
    assert a.method == "amdf" and a.trials == 2 and a.start == 2
    assert np.isfinite(a.ee_mae) and a.ee_mae >= 0.0
    assert a.ee_stderr is not None and a.ee_stderr >= 0.0
    assert set(a.per_seed) == {"0", "1"}
    c = ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(2, 3), max_trials=2)
    assert c.ee_mae != a.ee_mae


def test_evaluate_single_seed_stderr_is_none(tiny_dataset, tiny_checkpoint):
    rep = ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(0,), max_trials=1)
    assert rep.ee_stderr is None and rep.quat_stderr is None
    assert "n/a" in rep.markdown_row()


def test_evaluate_baselines_run_fresh(tiny_dataset):
    cfg = tiny_model_config()
    for method in ("denkf", "unimodal", "crossmodal", "feature"):
        rep = ev.evaluate(None, tiny_dataset, method=method, seeds=(0,),
                          max_trials=1, model_config=cfg)
        assert np.isfinite(rep.ee_mae)
        assert rep.method == method


def test_evaluate_start_validation(tiny_dataset, tiny_checkpoint):
    with pytest.raises(ValueError, match="outside"):
        ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(0,), max_trials=1,
                    start=8)


# ----------------------------------------------------------------- ablation


def test_ablate_writes_seven_rows(tiny_dataset, tiny_checkpoint, tmp_path):
    reports = ev.ablate(tiny_checkpoint, tiny_dataset, seeds=(0,),
                        max_trials=1, out_dir=tmp_path)
    assert len(reports) == 7
    payload = json.loads((tmp_path / "ablation.json").read_text())
    assert set(payload) == set(reports)
    md = (tmp_path / "ablation.md").read_text()
    assert md.count("| amdf |") == 7
    assert "rgb+depth+proprio" in md


# ------------------------------------------------------------- attention


def test_attention_masses_sum_to_one(tiny_dataset, tiny_checkpoint):
    recs = ev.attention_report(tiny_checkpoint, tiny_dataset, seeds=(0,),
                               max_trials=2)
    assert [r["t"] for r in recs] == list(range(2, 8))
    for r in recs:
        assert abs(sum(r["attention"].values()) - 1.0) < 1e-9
        assert set(r["attention"]) == {"prediction", "rgb", "depth", "proprio"}


def test_attention_schedule_zeroes_disabled_mass(tiny_dataset, tiny_checkpoint,
                                                 tmp_path):
    out = tmp_path / "attention.jsonl"
    recs = ev.attention_report(
        tiny_checkpoint, tiny_dataset,
        schedule=[(0, ("rgb", "depth", "proprio")), (5, ("rgb", "proprio"))],
        seeds=(0,), max_trials=2, out_path=out, plot=True)
    for r in recs:
        if r["t"] >= 5:
            assert r["attention"]["depth"] == 0.0
            assert r["enabled"] == ["rgb", "proprio"]
            assert abs(sum(r["attention"].values()) - 1.0) < 1e-9
        else:
            assert r["attention"]["depth"] > 0.0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == len(recs)
    assert json.loads(lines[0])["t"] == 2
    svg = out.with_suffix(".svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_attention_report_rejects_non_amdf(tiny_dataset, tmp_path):
    save_model(FusionDenkf("unimodal", tiny_model_config(), seed=0), tmp_path)
    with pytest.raises(ValueError, match="attention traces"):
        ev.attention_report(tmp_path, tiny_dataset)


# ----------------------------------------------------------------- drift


def test_drift_lambda_zero_bitwise_equals_clean(tiny_dataset, tiny_checkpoint):
    clean = ev.evaluate(tiny_checkpoint, tiny_dataset, seeds=(0,),
                        max_trials=2)
    curve = ev.drift(tiny_checkpoint, tiny_dataset, lams=(0.0, 1.0),
                     seeds=(0,), max_trials=2)
    assert curve.reports[0].ee_mae == clean.ee_mae
    assert curve.reports[0].to_dict() == clean.to_dict()
    assert curve.lams == (0.0, 1.0)


def test_drift_requires_rgb(tiny_dataset, tiny_checkpoint):
    with pytest.raises(ValueError, match="rgb"):
        ev.drift(tiny_checkpoint, tiny_dataset, subset=("depth", "proprio"),
                 seeds=(0,), max_trials=1)


def test_drift_curve_validation():
    with pytest.raises(ValueError, match="sorted"):
        ev.DriftCurve(lams=(0.5, 0.0), ee_mae=(1.0, 2.0), quat_mae=(0.1, 0.2))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ev.DriftCurve(lams=(0.0, 1.5), ee_mae=(1.0, 2.0), quat_mae=(0.1, 0.2))
    with pytest.raises(ValueError, match="one MAE per"):
        ev.DriftCurve(lams=(0.0, 1.0), ee_mae=(1.0,), quat_mae=(0.1,))
    curve = ev.DriftCurve(lams=(0.0, 0.5, 1.0), ee_mae=(1.0, 2.0, 3.0),
                          quat_mae=(0.1, 0.2, 0.3))
    assert curve.spearman() == 1.0
    assert "Spearman" in curve.markdown()


def test_drift_writes_reports(tiny_dataset, tiny_checkpoint, tmp_path):
    ev.drift(tiny_checkpoint, tiny_dataset, lams=(0.0, 1.0), seeds=(0,),
             max_trials=1, out_dir=tmp_path)
    payload = json.loads((tmp_path / "drift.json").read_text())
    assert payload["lams"] == [0.0, 1.0]
    assert "spearman" in payload
    assert (tmp_path / "drift.md").read_text().startswith("| blend |")


# ----------------------------------------------------------------- bench


def test_bench_rows_and_stderr(tiny_dataset, tiny_checkpoint, tmp_path):
    rows = ev.bench(tiny_checkpoint, tiny_dataset, steps=4, reps=2,
                    out_dir=tmp_path)
    assert [r["subset"] for r in rows] == ["proprio", "rgb+depth+proprio"]
    for r in rows:
        assert r["median_s"] > 0.0
        assert r["stderr_s"] is not None
    single = ev.bench(tiny_checkpoint, tiny_dataset, steps=2, reps=1)
    assert single[0]["stderr_s"] is None
    md = (tmp_path / "bench.md").read_text()
    assert "median step" in md
    payload = json.loads((tmp_path / "bench.json").read_text())
    assert len(payload) == 2


def test_bench_validation(tiny_dataset, tiny_checkpoint):
    with pytest.raises(ValueError, match="positive"):
        ev.bench(tiny_checkpoint, tiny_dataset, steps=0)

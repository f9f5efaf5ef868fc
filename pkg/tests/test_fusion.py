import numpy as np
import pytest
from numpy.testing import assert_allclose

from mdf import autodiff as ad
from mdf.autodiff import ShapeError, Tensor, Tape, grad_check
from mdf.blocks import SnnSpec, build_snn
from mdf.fusion import (
    CrossmodalWeights,
    FusionDenkf,
    GaussianBelief,
    belief_from_ensemble,
    beta_coefficients,
    build_beta_net,
    crossmodal_fuse,
    feature_fuse,
    reparam_sample,
    unimodal_fuse,
)
from mdf.params import ParameterStore, RngStream


def belief(mu, cov):
    mu = np.asarray(mu, dtype=float).reshape(-1, 1)
    cov = np.asarray(cov, dtype=float).reshape(-1, 1)
    return GaussianBelief(Tensor(mu), Tensor(cov))


def random_belief(rng, d):
    return belief(rng.standard_normal(d), rng.uniform(0.2, 5.0, size=d))


# ---------------------------------------------------------------- unimodal


def test_unimodal_equal_covariances_average():
    out = unimodal_fuse([belief([0.0], [1.0]), belief([2.0], [1.0])])
    assert out.mean.data[0, 0] == 1.0
    assert out.cov.data[0, 0] == 0.5


def test_unimodal_self_fusion_halves_covariance():
    b = belief([0.3, -1.2], [0.7, 2.0])
    out = unimodal_fuse([b, b])
    assert_allclose(out.mean.data, b.mean.data, rtol=0, atol=1e-15)
    assert_allclose(out.cov.data, b.cov.data / 2.0, rtol=0, atol=1e-15)


def test_unimodal_unequal_covariances():
    out = unimodal_fuse([belief([0.0], [1.0]), belief([3.0], [2.0])])
    assert_allclose(out.mean.data[0, 0], 1.0, atol=1e-14)
    assert_allclose(out.cov.data[0, 0], 2.0 / 3.0, atol=1e-15)


def test_unimodal_commutative():
    rng = np.random.default_rng(7)
    a, b = random_belief(rng, 5), random_belief(rng, 5)
    ab = unimodal_fuse([a, b])
    ba = unimodal_fuse([b, a])
    assert_allclose(ab.mean.data, ba.mean.data, atol=1e-10)
    assert_allclose(ab.cov.data, ba.cov.data, atol=1e-10)


def test_unimodal_associative():
    rng = np.random.default_rng(8)
    a, b, c = (random_belief(rng, 4) for _ in range(3))
    left = unimodal_fuse([a, b, c])
    right = unimodal_fuse([a, unimodal_fuse([b, c])])
    assert_allclose(left.mean.data, right.mean.data, atol=1e-10)
    assert_allclose(left.cov.data, right.cov.data, atol=1e-10)


def test_unimodal_precision_sum():
    # Output covariance is bit-identical to the precision-sum formula
    # evaluated with the same elementwise ops.
    rng = np.random.default_rng(9)
    c1 = rng.uniform(0.1, 10.0, size=(6, 1))
    c2 = rng.uniform(0.1, 10.0, size=(6, 1))
    out = unimodal_fuse([belief(np.zeros(6), c1), belief(np.ones(6), c2)])
    expect = np.power(np.power(c1, -1.0) + np.power(c2, -1.0), -1.0)
    assert np.array_equal(out.cov.data, expect)
    # On covariances whose reciprocals round-trip exactly in f64, the
    # measured output precision equals the sum of input precisions bit for
    # bit.  (Random covariances fail the round-trip for ~13% of values, so
    # the general case is covered by the formula identity above.)
    c1 = np.array([[1.0], [0.5], [1.0 / 3.0]])
    c2 = np.array([[1.0], [0.25], [0.5]])
    out = unimodal_fuse([belief(np.zeros(3), c1), belief(np.zeros(3), c2)])
    assert np.array_equal(np.power(out.cov.data, -1.0),
                          np.power(c1, -1.0) + np.power(c2, -1.0))


def test_unimodal_needs_two():
    with pytest.raises(ValueError):
        unimodal_fuse([belief([0.0], [1.0])])


def test_unimodal_dim_mismatch():
    with pytest.raises(ShapeError):
        unimodal_fuse([belief([0.0], [1.0]), belief([0.0, 1.0], [1.0, 1.0])])


def test_belief_rejects_nonpositive_cov():
    with pytest.raises(ValueError):
        belief([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        belief([0.0], [-0.5])


def test_unimodal_grad_check():
    rng = np.random.default_rng(10)
    m1 = Tensor(rng.standard_normal((3, 1)))
    m2 = Tensor(rng.standard_normal((3, 1)))
    c1 = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))
    c2 = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))

    def fn(pt):
        out = unimodal_fuse([GaussianBelief(pt["m1"], pt["c1"]),
                             GaussianBelief(pt["m2"], pt["c2"])])
        return ad.reduce_sum(ad.add(out.mean, out.cov))

    err = grad_check(fn, {"m1": m1, "m2": m2, "c1": c1, "c2": c2})
    assert err < 1e-6


# -------------------------------------------------------------- crossmodal


def weights(b1, b2):
    b1 = np.asarray(b1, dtype=float).reshape(-1, 1)
    b2 = np.asarray(b2, dtype=float).reshape(-1, 1)
    return CrossmodalWeights(Tensor(b1), Tensor(b2))


def test_crossmodal_equal_weights_midpoint():
    b1 = belief([0.0, 4.0], [1.0, 2.0])
    b2 = belief([2.0, 0.0], [3.0, 2.0])
    out = crossmodal_fuse(b1, b2, weights([0.7, 0.7], [0.7, 0.7]))
    assert_allclose(out.mean.data, np.array([[1.0], [2.0]]), atol=1e-14)
    assert_allclose(out.cov.data, np.array([[2.0], [2.0]]), atol=1e-14)


def test_crossmodal_zero_beta2_returns_first():
    b1 = belief([0.3, -1.1, 2.2], [0.5, 1.5, 2.5])
    b2 = belief([9.0, 9.0, 9.0], [9.0, 9.0, 9.0])
    # beta1 entries are powers of two so beta1 * x / beta1 is exact.
    out = crossmodal_fuse(b1, b2, weights([1.0, 2.0, 0.5], [0.0, 0.0, 0.0]))
    assert np.array_equal(out.mean.data, b1.mean.data)
    assert np.array_equal(out.cov.data, b1.cov.data)


def test_crossmodal_scalar_case():
    out = crossmodal_fuse(belief([0.0], [1.0]), belief([3.0], [1.0]),
                          weights([2.0], [1.0]))
    assert_allclose(out.mean.data[0, 0], 1.0, atol=1e-15)
    # squared weights: (4 * 1 + 1 * 1) / 5 = 1
    assert_allclose(out.cov.data[0, 0], 1.0, atol=1e-15)


def test_crossmodal_scale_invariant():
    rng = np.random.default_rng(11)
    b1, b2 = random_belief(rng, 6), random_belief(rng, 6)
    w1 = rng.uniform(0.1, 3.0, size=6)
    w2 = rng.uniform(0.1, 3.0, size=6)
    base = crossmodal_fuse(b1, b2, weights(w1, w2))
    scaled = crossmodal_fuse(b1, b2, weights(3.7 * w1, 3.7 * w2))
    assert_allclose(base.mean.data, scaled.mean.data, atol=1e-10)
    assert_allclose(base.cov.data, scaled.cov.data, atol=1e-10)


def test_crossmodal_weights_reject_zero_index():
    with pytest.raises(ValueError):
        weights([1.0, 0.0], [1.0, 0.0])


def test_crossmodal_weights_reject_negative():
    with pytest.raises(ValueError):
        weights([1.0, -0.1], [1.0, 1.0])


def test_crossmodal_dim_mismatch():
    with pytest.raises(ShapeError):
        crossmodal_fuse(belief([0.0], [1.0]), belief([0.0], [1.0]),
                        weights([1.0, 1.0], [1.0, 1.0]))


def test_crossmodal_grad_check():
    rng = np.random.default_rng(12)
    pt = {
        "m1": Tensor(rng.standard_normal((3, 1))),
        "m2": Tensor(rng.standard_normal((3, 1))),
        "w1": Tensor(rng.uniform(0.5, 2.0, size=(3, 1))),
        "w2": Tensor(rng.uniform(0.5, 2.0, size=(3, 1))),
    }
    c1 = belief(np.zeros(3), [0.5, 1.0, 2.0]).cov
    c2 = belief(np.zeros(3), [1.5, 0.7, 0.9]).cov

    def fn(p):
        out = crossmodal_fuse(GaussianBelief(p["m1"], c1),
                              GaussianBelief(p["m2"], c2),
                              CrossmodalWeights(p["w1"], p["w2"]))
        return ad.reduce_sum(ad.add(out.mean, out.cov))

    assert grad_check(fn, pt) < 1e-6


# ---------------------------------------------------------------- beta net


def test_beta_coefficients_positive_and_deterministic():
    store = ParameterStore()
    stream = RngStream(3)
    spec = build_beta_net(store, "beta", 4, stream.child("init"), hidden=16)
    rng = np.random.default_rng(13)
    b1, b2 = random_belief(rng, 4), random_belief(rng, 4)
    w = beta_coefficients(store, "beta", spec, b1, b2)
    assert w.beta1.shape == (4, 1) and w.beta2.shape == (4, 1)
    assert np.all(w.beta1.data >= 0.0) and np.all(w.beta2.data >= 0.0)
    again = beta_coefficients(store, "beta", spec, b1, b2)
    assert np.array_equal(w.beta1.data, again.beta1.data)
    assert np.array_equal(w.beta2.data, again.beta2.data)


def test_beta_softplus_handles_large_inputs():
    # Saturated coefficient-net outputs must not overflow the softplus.
    from mdf.fusion import _softplus

    x = np.array([[-1000.0], [-5.0], [0.0], [5.0], [1000.0]])
    out = _softplus(Tensor(x))
    assert np.all(np.isfinite(out.data))
    expect = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    assert_allclose(out.data, expect, atol=1e-15)
    # Moderately large beliefs still give finite nonnegative coefficients.
    store = ParameterStore()
    stream = RngStream(4)
    spec = build_beta_net(store, "beta", 2, stream, hidden=8)
    big = belief([1e2, -1e2], [1e4, 1e-4])
    w = beta_coefficients(store, "beta", spec, big, big)
    assert np.all(np.isfinite(w.beta1.data)) and np.all(w.beta1.data >= 0.0)


def test_beta_net_grad_check():
    store = ParameterStore()
    stream = RngStream(5)
    spec = build_beta_net(store, "beta", 3, stream.child("init"), hidden=8)
    rng = np.random.default_rng(14)
    b1, b2 = random_belief(rng, 3), random_belief(rng, 3)
    names = [n for n in store.names() if n.startswith("beta/")]
    pt = {n: store.get(n) for n in names}

    def fn(p):
        w = beta_coefficients(store, "beta", spec, b1, b2)
        out = crossmodal_fuse(b1, b2, w)
        return ad.reduce_sum(ad.add(out.mean, out.cov))

    assert grad_check(fn, pt) < 1e-4


# ------------------------------------------------------------ feature fuse


def test_feature_fuse_zero_weights():
    store = ParameterStore()
    spec = SnnSpec((6, 4), activation="tanh")
    for name, shape in [("fuse/w0", (4, 6)), ("fuse/b0", (4, 1))]:
        store.add_zeros(name, shape)
    out = feature_fuse(store, "fuse", spec,
                       [Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3)))])
    assert out.shape == (4, 3)
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_feature_fuse_output_width():
    store = ParameterStore()
    stream = RngStream(6)
    spec = SnnSpec((9, 8, 5), activation="tanh")
    build_snn(store, "fuse", spec, stream.generator())
    feats = [Tensor(np.random.default_rng(1).standard_normal((3, 4)))
             for _ in range(3)]
    out = feature_fuse(store, "fuse", spec, feats)
    assert out.shape == (5, 4)


def test_feature_fuse_missing_modality():
    store = ParameterStore()
    spec = SnnSpec((6, 4))
    with pytest.raises(ValueError, match="missing"):
        feature_fuse(store, "fuse", spec, [Tensor(np.ones((3, 2))), None])


def test_feature_fuse_grad_check():
    store = ParameterStore()
    stream = RngStream(7)
    spec = SnnSpec((6, 5, 4), activation="tanh")
    build_snn(store, "fuse", spec, stream.generator())
    rng = np.random.default_rng(15)
    feats = [Tensor(rng.standard_normal((3, 2))) for _ in range(2)]
    pt = {n: store.get(n) for n in store.names()}
    pt["f0"] = feats[0]

    def fn(p):
        return ad.reduce_sum(feature_fuse(store, "fuse", spec, [p["f0"], feats[1]]))

    assert grad_check(fn, pt) < 1e-4


# -------------------------------------------------------- reparam sampling


def test_reparam_tiny_cov_collapses_to_mean():
    b = belief([1.0, -2.0], [1e-18, 1e-18])
    x = reparam_sample(b, 16, RngStream(8))
    assert_allclose(x.data, np.tile(b.mean.data, (1, 16)), atol=1e-7)


def test_reparam_sample_mean_clt():
    b = belief([0.5, -1.5, 3.0], [0.8, 1.2, 2.0])
    e = 10000
    x = reparam_sample(b, e, RngStream(9))
    bound = 4.0 * np.sqrt(b.cov.data / e)
    assert np.all(np.abs(x.data.mean(axis=1, keepdims=True) - b.mean.data) < bound)


def test_reparam_reproducible():
    b = belief([0.0, 1.0], [1.0, 2.0])
    a = reparam_sample(b, 8, RngStream(10, (1,)))
    c = reparam_sample(b, 8, RngStream(10, (1,)))
    d = reparam_sample(b, 8, RngStream(10, (2,)))
    assert np.array_equal(a.data, c.data)
    assert not np.array_equal(a.data, d.data)


def test_reparam_grad_identity_in_mean():
    # d(sample)/d(mean) is the identity: backward with unit seeds puts the
    # column count into every mean entry and the eps-weighted chain into cov.
    b = belief([0.2, -0.4], [1.0, 4.0])
    stream = RngStream(11)
    with Tape() as tape:
        x = reparam_sample(b, 5, stream)
        tape.backward([x], [np.ones_like(x.data)])
    assert np.array_equal(b.mean.grad, np.full((2, 1), 5.0))
    # cov grad: sum_j eps_ij * 0.5 / sqrt(cov_i)
    eps = (x.data - b.mean.data) / np.sqrt(b.cov.data)
    expect = (eps * 0.5 / np.sqrt(b.cov.data)).sum(axis=1, keepdims=True)
    assert_allclose(b.cov.grad, expect, atol=1e-12)

    def fn(p):
        return ad.reduce_sum(reparam_sample(
            GaussianBelief(p["m"], p["c"]), 5, RngStream(11)))

    pt = {"m": Tensor(b.mean.data.copy()), "c": Tensor(b.cov.data.copy())}
    assert grad_check(fn, pt) < 1e-6


# --------------------------------------------------- ensemble summarization


def test_belief_from_ensemble_matches_numpy():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((4, 30))
    b = belief_from_ensemble(Tensor(x), floor=1e-6)
    assert_allclose(b.mean.data[:, 0], x.mean(axis=1), atol=1e-14)
    assert_allclose(b.cov.data[:, 0], x.var(axis=1, ddof=1) + 1e-6, atol=1e-12)


def test_belief_from_ensemble_degenerate_members():
    x = np.tile(np.array([[1.0], [2.0]]), (1, 6))
    b = belief_from_ensemble(Tensor(x), floor=1e-6)
    assert np.all(b.cov.data > 0.0)
    with pytest.raises(ShapeError):
        belief_from_ensemble(Tensor(np.ones((3, 1))))


# ------------------------------------------------------ estimator wrapper


def _tiny_cfg():
    from mdf.blocks import ModelConfig
    return ModelConfig.small(d_x=8, E=4, N=2, heads=2, image_hw=8,
                             conv_channels=(2, 3), image_tail=(8,),
                             proprio_widths=(8,), decoder_widths=(8,),
                             lift_widths=(8,), post_widths=(8,),
                             pre_layers=1, attn_layers=1, activation="tanh")


def _tiny_raw(hw=8, seed=5):
    g = np.random.default_rng(seed)
    return {"rgb": g.uniform(0, 1, (hw, hw, 3)),
            "depth": g.uniform(0, 1, (hw, hw)),
            "proprio": g.standard_normal((30, 1))}


def _init_ens(model, seed=3):
    from mdf.filters import LatentEnsemble
    states = Tensor(np.linspace(0.1, 0.7, 7).reshape(7, 1))
    members = model.lift(states, RngStream(seed).child("lift"))[0]
    return LatentEnsemble(members, 0)


@pytest.mark.parametrize("kind", ["feature", "unimodal", "crossmodal"])
def test_fusion_denkf_step_shape_and_determinism(kind):
    cfg = _tiny_cfg()
    model = FusionDenkf(kind, cfg, seed=0)
    ens, raw = _init_ens(model), _tiny_raw()
    out1 = model.step(ens, raw, (True, True, True), RngStream(9).child("s"))
    out2 = model.step(ens, raw, (True, True, True), RngStream(9).child("s"))
    assert out1.members.shape == (cfg.d_x, cfg.E)
    assert np.array_equal(out1.members.data, out2.members.data)


def test_fusion_denkf_feature_requires_all_modalities():
    model = FusionDenkf("feature", _tiny_cfg(), seed=0)
    with pytest.raises(ValueError, match="requires all modalities"):
        model.step(_init_ens(model), _tiny_raw(), (True, True, False),
                   RngStream(9).child("s"))


def test_fusion_denkf_crossmodal_needs_two():
    model = FusionDenkf("crossmodal", _tiny_cfg(), seed=0)
    with pytest.raises(ValueError, match="at least two"):
        model.step(_init_ens(model), _tiny_raw(), (False, False, True),
                   RngStream(9).child("s"))


def test_fusion_denkf_unimodal_single_modality():
    model = FusionDenkf("unimodal", _tiny_cfg(), seed=0)
    ens, raw = _init_ens(model), _tiny_raw()
    only = model.step(ens, raw, (False, False, True), RngStream(9).child("s"))
    both = model.step(ens, raw, (True, True, True), RngStream(9).child("s"))
    assert only.members.shape == both.members.shape
    assert not np.array_equal(only.members.data, both.members.data)


def test_fusion_denkf_save_load_roundtrip(tmp_path):
    import json
    from mdf.training import load_model, save_model
    model = FusionDenkf("crossmodal", _tiny_cfg(), seed=1)
    save_model(model, tmp_path)
    assert json.loads((tmp_path / "model.json").read_text())["kind"] == "crossmodal"
    back = load_model(tmp_path)
    assert back.kind == "crossmodal"
    ens, raw = _init_ens(model), _tiny_raw()
    a = model.step(ens, raw, (True, True, True), RngStream(2).child("s"))
    b = back.step(_init_ens(back), raw, (True, True, True), RngStream(2).child("s"))
    assert np.array_equal(a.members.data, b.members.data)


def test_fusion_denkf_unknown_kind():
    with pytest.raises(ValueError, match="unknown fusion strategy"):
        FusionDenkf("late", _tiny_cfg())

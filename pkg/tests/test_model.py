import numpy as np
import pytest

from dsnlab import data as D
from dsnlab import losses as L
from dsnlab import tensor as T
from dsnlab.model import (DsnModel, build_desk_topology, compute_losses, decode_partial, forward,
                          predict, without_reversal)
from dsnlab.tensor import ShapeError

WEIGHTS = L.LossWeights(alpha=0.3, beta=0.2, gamma=0.5, xi=0.125, warmup_steps=0)


def _batch(scenario, n=4, seed=0):
    rng = np.random.default_rng(seed)
    if scenario == "blobs2d":
        shape, c = (2,), 3
    else:
        shape, c = (16, 16, 3), (5 if scenario == "pose_glyph" else 10)
    pose = None
    if scenario == "pose_glyph":
        pose = D.pose_quaternion(rng.uniform(-180, 180, n))
    return D.DomainBatch(rng.uniform(-1, 1, (n,) + shape), np.eye(c)[rng.integers(0, c, n)],
                         rng.uniform(-1, 1, (n,) + shape), pose)


def _zero_private(model):
    for t in model.params.tensors(["private_source", "private_target"]):
        t.data[...] = 0.0


def test_glyph16_shapes():
    m = DsnModel("glyph16")
    b = _batch("glyph16")
    out = forward(m, b)
    assert out.xhat_s.shape == (4, 16, 16, 3) and out.xhat_t.shape == (4, 16, 16, 3)
    assert out.hc_s.shape == out.hp_s.shape == out.hp_t.shape == (4, 64)
    assert out.yhat_s.shape == (4, 10)
    assert out.dhat.shape == (8, 1)


@pytest.mark.parametrize("scenario", ["glyph16", "pose_glyph", "blobs2d"])
@pytest.mark.parametrize("variant", ["dsn", "source_only", "dann_only"])
def test_parameter_count_closed_form(scenario, variant):
    m = DsnModel(scenario, variant)
    assert m.n_parameters() == m.closed_form_count()


def test_baseline_variants_have_no_private_parts():
    for v in ("source_only", "target_only"):
        m = DsnModel("glyph16", v)
        assert set(m.params.groups) == {"shared", "task"}
        out = forward(m, _batch("glyph16"))
        assert out.hp_s is None and out.xhat_s is None and out.dhat is None
    assert set(DsnModel("glyph16", "dann_only").params.groups) == {"shared", "task", "domain"}


@pytest.mark.parametrize("sim", ["mmd", "correg"])
def test_non_adversarial_similarity_has_no_domain_classifier(sim):
    m = DsnModel("glyph16", "dsn", sim)
    assert "domain" not in m.params.groups
    assert forward(m, _batch("glyph16")).dhat is None


def test_zero_private_weights_reconstruct_from_shared_only():
    m = DsnModel("glyph16", seed=2)
    _zero_private(m)
    b = _batch("glyph16")
    out = forward(m, b)
    direct = m.decoder(m.shared(b.source_x)).data
    assert out.xhat_s.data.tobytes() == direct.tobytes()
    for mode_pair in (("combined", "shared_only"),):
        a = decode_partial(m, b.target_x, 1, mode_pair[0]).data
        c = decode_partial(m, b.target_x, 1, mode_pair[1]).data
        assert a.tobytes() == c.tobytes()


def test_decode_modes_keep_image_shape():
    m = DsnModel("glyph16")
    x = _batch("glyph16").source_x
    for mode in ("combined", "shared_only", "private_only"):
        assert decode_partial(m, x, 0, mode).shape == x.shape
    with pytest.raises(ValueError):
        decode_partial(m, x, 0, "both")
    with pytest.raises(ValueError):
        decode_partial(DsnModel("glyph16", "source_only"), x, 0)


def test_predictions_ignore_private_encoders():
    m = DsnModel("glyph16", seed=1)
    x = _batch("glyph16").source_x
    before = predict(m, x)[0]
    rng = np.random.default_rng(0)
    for t in m.params.tensors(["private_source", "private_target", "decoder"]):
        t.data += rng.normal(size=t.shape)
    assert predict(m, x)[0].tobytes() == before.tobytes()


def test_forward_rejects_wrong_image_shape():
    m = DsnModel("glyph16")
    b = _batch("glyph16")
    b.source_x = b.source_x[:, :8]
    with pytest.raises(ShapeError):
        forward(m, b)


def test_unknown_names():
    with pytest.raises(ValueError):
        DsnModel("mnist")
    with pytest.raises(ValueError):
        DsnModel("glyph16", "dsn_plus")
    with pytest.raises(ValueError):
        DsnModel("glyph16", "dsn", "wasserstein")


def _total(model, batch):
    out = forward(model, batch)
    return L.total_loss(compute_losses(model, out, batch, WEIGHTS), WEIGHTS, 10)


@pytest.mark.parametrize("scenario,sim", [("glyph16", "dann"), ("pose_glyph", "dann"),
                                          ("blobs2d", "mmd"), ("glyph16", "correg")])
def test_end_to_end_probe_gradients(scenario, sim):
    m = DsnModel(scenario, "dsn", sim, seed=7, topology=without_reversal(build_desk_topology(scenario)))
    b = _batch(scenario, seed=3)
    rep = T.finite_difference_check(lambda: _total(m, b), m.params.tensors(), 1e-5,
                                    probe=5, rng=np.random.default_rng(0))
    assert rep.max_rel_error < 1e-3, rep


def test_domain_classifier_sees_only_the_similarity_loss():
    m = DsnModel("glyph16", seed=4)
    b = _batch("glyph16", seed=1)
    z = m.params.group("domain")
    g_total = T.backward(_total(m, b), z)
    out = forward(m, b)
    g_sim = T.backward(T.scale(L.dann_domain_loss(out.dhat, b.domain_labels), WEIGHTS.gamma), z)
    for t in z:
        assert g_total[t].tobytes() == g_sim[t].tobytes()


def test_reversal_flips_only_the_similarity_path_into_the_encoder():
    b = _batch("glyph16", seed=2)
    plain = DsnModel("glyph16", seed=5, topology=without_reversal(build_desk_topology("glyph16")))
    adv = DsnModel("glyph16", seed=5)
    enc = adv.params.group("shared")
    g_adv = T.backward(_total(adv, b), enc)
    g_plain = T.backward(_total(plain, b), plain.params.group("shared"))
    out = forward(plain, b)
    sim = T.scale(L.dann_domain_loss(out.dhat, b.domain_labels), WEIGHTS.gamma)
    g_sim = T.backward(sim, plain.params.group("shared"))
    for ta, tp in zip(enc, plain.params.group("shared")):
        # with reversal: rest - sim; without: rest + sim
        np.testing.assert_allclose(g_adv[ta], g_plain[tp] - 2 * g_sim[tp], rtol=1e-9, atol=1e-12)


def test_pose_model_returns_unit_quaternions():
    m = DsnModel("pose_glyph")
    probs, q = predict(m, _batch("pose_glyph").source_x)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    assert np.all(q[:, 0] >= 0)


def test_same_seed_same_parameters():
    a, b = DsnModel("glyph16", seed=9), DsnModel("glyph16", seed=9)
    for x, y in zip(a.params.tensors(), b.params.tensors()):
        assert x.name == y.name and x.data.tobytes() == y.data.tobytes()

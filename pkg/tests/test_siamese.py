import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ieces import tensor as T
from ieces.encoder import EncodeTrace, build_encoder, encode
from ieces.selfcheck import REDUCED
from ieces.siamese import (SiameseConfig, TemplateCodebook, combined_loss, contrastive_loss,
                           contrastive_loss_batch, distance, encode_templates, pair_batch, pair_indices,
                           squared_distances, update_prototypes_ema)
from ieces.tensor import Tensor


@given(st.floats(0, 10), st.integers(0, 1), st.floats(0.01, 20))
@settings(max_examples=200, deadline=None)
def test_contrastive_matches_direct_formula(d, gamma, m):
    direct = (1 - gamma) * d ** 2 + gamma * max(0.0, m - d ** 2)
    assert abs(contrastive_loss(d, gamma, m) - direct) <= 1e-12


def test_contrastive_known_values():
    assert contrastive_loss(0.0, 0, 6.25) == 0.0
    assert contrastive_loss(2.0, 0, 6.25) == 4.0
    assert contrastive_loss(2.0, 1, 6.25) == pytest.approx(2.25)
    assert contrastive_loss(2.5, 1, 6.25) == 0.0
    assert contrastive_loss(3.0, 1, 6.25) == 0.0


def test_contrastive_rejects_bad_inputs():
    with pytest.raises(ValueError):
        contrastive_loss(1.0, 2, 1.0)
    with pytest.raises(ValueError):
        contrastive_loss(-1.0, 0, 1.0)
    with pytest.raises(ValueError):
        contrastive_loss(1.0, 0, 0.0)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_combined_loss_exact(sim, cls, alpha):
    assert combined_loss(sim, cls, alpha) == alpha * sim + cls


def test_distance_symmetry_and_value():
    a, b = np.array([0.0, 3.0]), np.array([4.0, 0.0])
    assert distance(a, b) == distance(b, a) == 5.0
    assert distance(a, a) == 0.0
    with pytest.raises(ValueError):
        distance(a, np.zeros(3))


def test_batch_loss_matches_scalar_loss():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    g = np.array([0, 1, 0, 1, 1, 0])
    with T.precision(np.float64):
        batch = contrastive_loss_batch(Tensor(s), t, g, 6.25).item()
    scalar = np.mean([contrastive_loss(distance(a, b), int(gi), 6.25) for a, b, gi in zip(s, t, g)])
    assert batch == pytest.approx(scalar, abs=1e-12)
    with pytest.raises(ValueError):
        contrastive_loss_batch(Tensor(s), t, np.full(6, 2), 6.25)


def test_squared_distances_rowwise():
    a = Tensor(np.array([[1.0, 2.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(squared_distances(a, np.array([[1.0, 0.0], [3.0, 4.0]])).data, [4.0, 25.0])


def test_pairing_one_positive_k_distinct_negatives():
    rows, classes, gammas = pair_indices([0, 3, 3, 1], num_classes=5, k=3, rng=0)
    assert len(rows) == 4 * 4
    for i, y in enumerate([0, 3, 3, 1]):
        sel = rows == i
        assert classes[sel][0] == y and gammas[sel][0] == 0
        negs = classes[sel][1:]
        assert len(set(negs.tolist())) == 3 and y not in negs and np.all(gammas[sel][1:] == 1)


def test_pairing_deterministic_per_seed():
    a = pair_indices([0, 1, 2], 6, 2, 7)
    b = pair_indices([0, 1, 2], 6, 2, 7)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_pairing_rejects_missing_templates_and_too_many_negatives():
    with pytest.raises(ValueError):
        pair_indices([0, 4], 4, 1, 0)
    with pytest.raises(ValueError):
        pair_indices([0], 2, 2, 0)
    book = TemplateCodebook(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="no template"):
        pair_batch([(np.zeros(3), 5)], book, 1, 0)


def test_pair_batch_carries_template_codes():
    book = TemplateCodebook(np.arange(12.0).reshape(4, 3))
    pairs = pair_batch([(np.ones(3), 2)], book, 2, 0)
    assert pairs[0].gamma == 0 and np.array_equal(pairs[0].template_code, book[2])
    assert {p.template_class for p in pairs[1:]} <= {0, 1, 3}


def test_weight_sharing_same_image_same_code():
    params = build_encoder(REDUCED, seed=0)
    img = np.random.default_rng(0).uniform(size=REDUCED.input_shape)
    with T.no_grad():
        sample = encode(params, img[None]).data[0]
        pair = encode(params, np.stack([img, img * 0.5])).data
    assert np.array_equal(encode_templates(params, [img])[0], sample)
    # across batch sizes only the BLAS reduction order differs
    np.testing.assert_allclose(encode_templates(params, [img, img * 0.5]).codes, pair, rtol=0, atol=0)
    np.testing.assert_allclose(pair[0], sample, atol=1e-5)


def test_template_encoding_records_no_graph():
    params = build_encoder(REDUCED, seed=0)
    trace = EncodeTrace()
    book = encode_templates(params, {0: np.zeros(REDUCED.input_shape), 1: np.ones(REDUCED.input_shape)}, trace)
    assert isinstance(book.codes, np.ndarray) and book.codes.shape == (2, 6)
    assert trace.template_passes == 2 and trace.sample_passes == 0
    with pytest.raises(ValueError, match="missing"):
        encode_templates(params, {0: np.zeros(REDUCED.input_shape), 2: np.zeros(REDUCED.input_shape)})
    with pytest.raises(ValueError):
        encode_templates(params, [])


def test_stop_gradient_equals_constant_substitution():
    """Gradients through the template branch must match a run where template codes are literal constants."""
    rng = np.random.default_rng(4)
    with T.precision(np.float64):
        params = build_encoder(REDUCED, seed=4, dtype=np.float64)
        templates = rng.uniform(size=(3,) + REDUCED.input_shape)
        samples = rng.uniform(size=(4,) + REDUCED.input_shape)
        rows, classes, gammas = pair_indices([0, 1, 2, 1], 3, 1, 0)
        plist = list(params.tensors.values())

        book = encode_templates(params, templates)
        loss = contrastive_loss_batch(T.take(encode(params, samples), rows), book.codes[classes], gammas, 6.25)
        T.backward(loss, plist)
        via_branch = [p.grad.copy() for p in plist]

        for p in plist:
            p.grad = None
        constants = np.array(book.codes.tolist())  # fresh literal array, no shared history
        loss = contrastive_loss_batch(T.take(encode(params, samples), rows), constants[classes], gammas, 6.25)
        T.backward(loss, plist)
        for g, p in zip(via_branch, plist):
            assert np.max(np.abs(g - p.grad)) <= 1e-12


def test_codebook_refresh_changes_after_param_update():
    params = build_encoder(REDUCED, seed=0)
    tpl = np.random.default_rng(0).uniform(size=(2,) + REDUCED.input_shape)
    before = encode_templates(params, tpl)
    params["head.fc.bias"].data += 0.1
    after = encode_templates(params, tpl)
    assert not np.array_equal(before.codes, after.codes)


def test_ema_prototype_update():
    book = TemplateCodebook(np.zeros((2, 2)))
    new = update_prototypes_ema(book, 1, np.array([1.0, 2.0]), 0.9)
    np.testing.assert_allclose(new.codes[1], [0.1, 0.2])
    assert not book.codes.any()
    with pytest.raises(ValueError):
        update_prototypes_ema(book, 0, np.zeros(2), 1.0)
    with pytest.raises(KeyError):
        update_prototypes_ema(book, 2, np.zeros(2), 0.5)


def test_codebook_validation():
    with pytest.raises(ValueError):
        TemplateCodebook(np.zeros(3))
    with pytest.raises(KeyError):
        TemplateCodebook(np.zeros((2, 3)))[2]


def test_config_defaults_and_validation():
    cfg = SiameseConfig()
    assert (cfg.margin, cfg.alpha, cfg.negatives, cfg.mode) == (6.25, 0.1, 1, "template")
    for bad in (dict(margin=0), dict(alpha=-1), dict(negatives=0), dict(mode="x"), dict(ema_decay=1.0),
                dict(refresh="never")):
        with pytest.raises(ValueError):
            SiameseConfig(**bad)

import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import central_difference, naive_matmul_conv1x1
from ssfl.errors import (
    EmptyDataset,
    LengthMismatch,
    NonFiniteActivation,
    ParseError,
    ShapeMismatch,
    UnlabeledVolume,
)
from ssfl.net import (
    PARAM_NAMES,
    NetConfig,
    adam_step,
    backward,
    batch_loss,
    bce_loss,
    checkpoint_bytes,
    classifier_forward,
    classifier_logit,
    coarse_dropout,
    conv1x1_forward,
    dropout_mask,
    forward_batch,
    init_state,
    interp_matrix,
    load_checkpoint,
    predict,
    save_checkpoint,
    stack3,
    train,
)

TINY = dict(in_dim=12, proj_dim=8, slices=8, dtype="float64", dropout_p=0.5, batch_size=4)


def tiny_state(variant="E", seed=0, **kw):
    return init_state(NetConfig(variant=variant, seed=seed, **{**TINY, **kw}))


def zero_state(cfg):
    st = init_state(cfg)
    for a in st.params.values():
        a[...] = 0
    return st


# --------------------------------------------------------------------------
# conv1x1 / stack3 / dropout

def test_conv1x1_identity():
    cfg = NetConfig(in_dim=6, proj_dim=6, slices=6, dtype="float64")
    st = zero_state(cfg)
    st.params["proj_w"][...] = np.eye(6)
    x = np.arange(36, dtype=float).reshape(6, 6)
    assert np.array_equal(conv1x1_forward(x, st), x.T)


def test_conv1x1_bias_only(rng):
    cfg = NetConfig(in_dim=5, proj_dim=4, slices=4, dtype="float64")
    st = zero_state(cfg)
    st.params["proj_b"][...] = [1, 2, 3, 4]
    out = conv1x1_forward(rng.random((4, 5)), st)
    assert np.all(out == np.array([1, 2, 3, 4])[:, None])


def test_conv1x1_vs_naive(rng):
    st = init_state(NetConfig(dtype="float64"))
    st.params["proj_b"][...] = rng.standard_normal(100)
    x = rng.standard_normal((100, 224))
    np.testing.assert_allclose(conv1x1_forward(x, st),
                               naive_matmul_conv1x1(x, st.params["proj_w"], st.params["proj_b"]),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("variant", ["E", "S"])
def test_conv1x1_linear(variant, rng):
    st = tiny_state(variant)
    x, y = rng.standard_normal((2, 8, 12))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(conv1x1_forward(a * x + b * y, st),
                               a * conv1x1_forward(x, st) + b * conv1x1_forward(y, st), atol=1e-12)


def test_conv1x1_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        conv1x1_forward(np.zeros((8, 11)), tiny_state())


def test_variant_s_output_geometry(rng):
    st = tiny_state("S", proj_dim=6)
    out = conv1x1_forward(rng.random((8, 12)), st)
    assert out.shape == (6, 8)
    assert st.params["proj_w"].shape == (6, 8)


def test_interp_matrix_columns():
    r = interp_matrix(224, 100)
    np.testing.assert_allclose(r.sum(axis=0), 1.0)
    x = np.linspace(0, 1, 224)
    np.testing.assert_allclose(x @ r, np.linspace(0, 1, 100), atol=1e-12)


def test_stack3_default_shape(rng):
    t = stack3(rng.random((100, 100)))
    assert t.shape == (3, 100, 100)
    assert np.array_equal(t[0], t[1]) and np.array_equal(t[1], t[2])


def test_stack3_small():
    t = stack3(np.array([[1, 2], [3, 4]]))
    assert t.tolist() == [[[1, 2], [3, 4]]] * 3
    t[1, 0, 0] = 9
    assert not np.array_equal(t[0], t[1])


def test_dropout_p0_identity(rng):
    x = rng.random((3, 20, 20))
    assert np.array_equal(coarse_dropout(x, 0.0, rng), x)


def test_dropout_p1_one_box_per_channel(rng):
    x = np.ones((3, 100, 100))
    for _ in range(50):
        out = coarse_dropout(x, 1.0, rng)
        for ch in range(3):
            zeros = np.argwhere(out[ch] == 0)
            r0, c0 = zeros.min(axis=0)
            r1, c1 = zeros.max(axis=0)
            box = (r1 - r0 + 1) * (c1 - c0 + 1)
            assert box == len(zeros)          # a single filled rectangle
            assert 1000 <= box <= 2500        # 10-25% of the area


def test_dropout_deterministic(rng):
    x = rng.random((3, 30, 30))
    a = coarse_dropout(x, 0.5, np.random.default_rng(7))
    b = coarse_dropout(x, 0.5, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_dropout_rate(rng):
    fired = sum((dropout_mask((3, 10, 10), 0.2, rng) == 0).any() for _ in range(2000))
    assert 330 <= fired <= 470


# --------------------------------------------------------------------------
# classifier and loss

def test_classifier_zero_is_half():
    st = zero_state(NetConfig(dtype="float64"))
    assert classifier_forward(np.zeros((3, 100, 100)), st) == 0.5


def test_classifier_range(rng):
    for seed in range(1000):
        st = tiny_state(seed=seed)
        st.params["fc_b"][...] = rng.normal()
        p = classifier_forward(rng.standard_normal((3, 8, 8)) * rng.uniform(0.1, 3), st)
        assert 0.0 < p < 1.0


def test_classifier_bias_shifts_logit(rng):
    st = tiny_state()
    x = rng.standard_normal((3, 8, 8))
    base = classifier_logit(x, st)
    st.params["fc_b"] += 0.75
    assert classifier_logit(x, st) == pytest.approx(base + 0.75, abs=1e-12)


def test_classifier_nonfinite():
    st = tiny_state()
    with pytest.raises(NonFiniteActivation):
        classifier_forward(np.full((3, 8, 8), np.inf), st)
    st.params["fc_w"][...] = np.inf
    st.params["conv_b_b"][...] = 1.0
    with pytest.raises(NonFiniteActivation):
        classifier_forward(np.zeros((3, 8, 8)), st)


def test_bce_examples():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2))
    assert bce_loss([1 - 1e-7], [1]) == pytest.approx(1e-7, rel=1e-3)
    assert bce_loss([1.0], [1]) == pytest.approx(1e-7, rel=1e-3)
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(0.1643, abs=1e-4)


def test_bce_nonnegative(rng):
    for _ in range(100):
        n = int(rng.integers(1, 10))
        assert bce_loss(rng.random(n), rng.integers(0, 2, n)) >= 0


def test_bce_length_mismatch():
    with pytest.raises(LengthMismatch):
        bce_loss([0.5, 0.5], [1])
    with pytest.raises(LengthMismatch):
        bce_loss([], [])


# --------------------------------------------------------------------------
# gradients

def _batch(rng, n=4, zero=False):
    x = np.zeros((n, 8, 12)) if zero else rng.standard_normal((n, 8, 12))
    y = np.array([1, 0, 1, 0][:n], dtype=float)
    return x, y


def _masks(cfg, n, seed=3):
    r = np.random.default_rng(seed)
    return np.stack([dropout_mask((3, cfg.proj_dim, cfg.slices), 1.0, r) for _ in range(n)])


def guarded_fd(x, y, st, masks, h=1e-3):
    """Central differences for every parameter, or None if any +-h step flips a ReLU.

    Finite differences across a kink measure a one-sided slope, so an
    instance is only usable when every perturbed forward pass keeps the
    base activation pattern.
    """
    _, base = forward_batch(x, st, masks)
    pattern = (base["za"] > 0, base["zb"] > 0)
    flipped = False

    def loss():
        nonlocal flipped
        probs, cache = forward_batch(x, st, masks)
        if not (np.array_equal(cache["za"] > 0, pattern[0])
                and np.array_equal(cache["zb"] > 0, pattern[1])):
            flipped = True
        return bce_loss(probs, y)

    fd = {name: central_difference(loss, st.params[name], h=h) for name in PARAM_NAMES}
    return None if flipped else fd


def fixed_instance(variant, use_masks):
    """First seed whose finite differences cross no ReLU kink."""
    for seed in range(200):
        r = np.random.default_rng(seed)
        st = tiny_state(variant, seed=seed)
        for name in ("proj_b", "conv_a_b", "conv_b_b", "fc_b"):
            st.params[name][...] = r.uniform(-0.1, 0.1, st.params[name].shape)
        x, y = _batch(r)
        masks = _masks(st.config, 4, seed) if use_masks else None
        fd = guarded_fd(x, y, st, masks)
        if fd is not None:
            return st, x, y, masks, fd
    raise AssertionError("no kink-free instance found")


@pytest.mark.parametrize("variant", ["E", "S"])
@pytest.mark.parametrize("use_masks", [False, True])
def test_gradients_vs_finite_differences(variant, use_masks):
    st, x, y, masks, fd = fixed_instance(variant, use_masks)
    probs, cache = forward_batch(x, st, masks)
    grads = backward(probs, y, cache, st)
    for name in PARAM_NAMES:
        err = np.abs(grads[name] - fd[name]) / np.maximum(1.0, np.abs(grads[name]))
        assert err.max() < 1e-3, (name, err.max())


def test_stack3_gradient_sums_channels():
    st, x, y, masks, _ = fixed_instance("E", True)
    probs, cache = forward_batch(x, st, masks)
    backward(probs, y, cache, st)
    feat = conv1x1_forward(x, st)

    def loss():
        p = classifier_forward(stack3(feat) * masks, st)
        return bce_loss(p, y)

    fd = central_difference(loss, feat, h=1e-3)
    np.testing.assert_allclose(cache["d_feature"], fd, atol=1e-6)
    # channel gradients are summed, so each channel alone is not the answer
    assert not np.allclose(cache["d_feature"] / 3, fd, atol=1e-6)


def test_zero_input_zero_projection_gradient(rng):
    st = tiny_state()
    x, y = _batch(rng, zero=True)
    probs, cache = forward_batch(x, st)
    assert not backward(probs, y, cache, st)["proj_w"].any()


def test_final_bias_gradient_is_mean_residual(rng):
    st = tiny_state()
    x, y = _batch(rng)
    probs, cache = forward_batch(x, st)
    g = backward(probs, y, cache, st)
    assert g["fc_b"][0] == pytest.approx(np.mean(probs - y), abs=1e-14)


# --------------------------------------------------------------------------
# Adam

def _unit_state(value=0.0, wd=0.0):
    st = tiny_state(weight_decay=wd, lr=1e-4)
    for a in st.params.values():
        a[...] = value
    return st


def test_adam_first_step():
    st = _unit_state(0.5)
    grads = {k: np.ones_like(a) for k, a in st.params.items()}
    new = adam_step(st, grads)
    for k in PARAM_NAMES:
        np.testing.assert_allclose(new.params[k] - st.params[k], -1e-4, rtol=1e-6)
    assert new.step == 1
    assert st.step == 0


def test_adam_zero_gradient_no_decay():
    st = _unit_state(0.3)
    new = adam_step(st, {k: np.zeros_like(a) for k, a in st.params.items()})
    for k in PARAM_NAMES:
        assert np.array_equal(new.params[k], st.params[k])


def test_adam_weight_decay_shrinks():
    st = _unit_state(0.3, wd=5e-4)
    new = adam_step(st, {k: np.zeros_like(a) for k, a in st.params.items()})
    for k in PARAM_NAMES:
        assert np.all(new.params[k] < st.params[k])


def test_adam_matches_hand_two_steps():
    st = _unit_state(1.0, wd=0.1)
    g1, g2 = 0.2, -0.4
    s1 = adam_step(st, {k: np.full_like(a, g1) for k, a in st.params.items()})
    s2 = adam_step(s1, {k: np.full_like(a, g2) for k, a in s1.params.items()})
    theta = 1.0
    m = v = 0.0
    for t, g in ((1, g1), (2, g2)):
        g = g + 0.1 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 1e-4 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(s2.params["fc_w"], theta, rtol=1e-12)


def test_adam_shape_mismatch():
    st = tiny_state()
    grads = {k: np.zeros_like(a) for k, a in st.params.items()}
    grads["fc_w"] = np.zeros(3)
    with pytest.raises(ShapeMismatch):
        adam_step(st, grads)


# --------------------------------------------------------------------------
# training

def clusters(rng, n=24, dim=12, rows=10):
    data = []
    for i in range(n):
        lbl = i % 2
        centre = 0.6 if lbl else -0.6
        data.append((centre + 0.3 * rng.standard_normal((rows, dim)), lbl))
    return data


def fast_cfg(**kw):
    base = dict(in_dim=12, proj_dim=8, slices=8, lr=1e-2, epochs=15, batch_size=6, seed=4)
    return NetConfig(**{**base, **kw})


def test_train_loss_decreases(rng):
    _, hist = train(clusters(rng), fast_cfg())
    assert len(hist) == 15
    assert hist.loss[-1] < hist.loss[0]


def test_train_deterministic(rng):
    data = clusters(rng)
    a, ha = train(data, fast_cfg(epochs=4))
    b, hb = train(data, fast_cfg(epochs=4))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ha.loss == hb.loss


def test_train_zero_epochs(rng):
    cfg = fast_cfg(epochs=0)
    st, hist = train(clusters(rng), cfg)
    assert len(hist) == 0
    init = init_state(cfg, np.random.default_rng(cfg.seed))
    for k in PARAM_NAMES:
        assert np.array_equal(st.params[k], init.params[k])


def test_train_validation_history(rng):
    data = clusters(rng)
    _, hist = train(data, fast_cfg(epochs=3), validation=data[:6])
    assert len(hist.val) == 3
    assert set(hist.val[0]) >= {"sensitivity", "specificity", "macro_f1"}


def test_train_errors(rng):
    with pytest.raises(EmptyDataset):
        train([], fast_cfg())
    with pytest.raises(UnlabeledVolume):
        train([(np.zeros((4, 12)), None)], fast_cfg())


def test_predict_threshold():
    cfg = NetConfig(in_dim=12, proj_dim=8, slices=8, dtype="float64")
    st = zero_state(cfg)
    st.params["fc_b"][0] = math.log(0.6 / 0.4)
    prob, cls = predict(st, np.zeros((5, 12)))
    assert prob == pytest.approx(0.6)
    assert cls == 1
    st.params["fc_b"][0] = 0.0
    assert predict(st, np.zeros((5, 12))) == (0.5, 1)
    st.params["fc_b"][0] = -1e-3
    assert predict(st, np.zeros((5, 12)))[1] == 0


def test_predict_deterministic(rng):
    st = tiny_state()
    m = rng.random((13, 12))
    assert predict(st, m) == predict(st, m)


def test_predict_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        predict(tiny_state(), np.zeros((5, 7)))


def test_config_invariants():
    with pytest.raises(ValueError):
        NetConfig(proj_dim=50)
    NetConfig(variant="S", proj_dim=50)
    for bad in ({"lr": 0}, {"dropout_p": 1.5}, {"threshold": 1.0}, {"variant": "X"}):
        with pytest.raises(ValueError):
            NetConfig(**bad)


def test_default_config_matches_reported_settings():
    cfg = NetConfig()
    assert (cfg.in_dim, cfg.proj_dim, cfg.slices) == (224, 100, 100)
    assert (cfg.lr, cfg.weight_decay, cfg.dropout_p, cfg.threshold) == (1e-4, 5e-4, 0.2, 0.5)
    assert cfg.epochs <= 200


# --------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path, rng):
    st, _ = train(clusters(rng), fast_cfg(epochs=2, dtype="float32"))
    save_checkpoint(st, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == st.config
    assert back.step == st.step
    for k in PARAM_NAMES:
        assert np.array_equal(back.params[k], st.params[k])
        assert np.array_equal(back.m[k], st.m[k])
    assert checkpoint_bytes(back) == checkpoint_bytes(st)
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"SSFLNET1"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" + bytes(20))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_truncated(tmp_path):
    blob = checkpoint_bytes(tiny_state(dtype="float32"))
    (tmp_path / "t.ckpt").write_bytes(blob[:-10])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "t.ckpt")

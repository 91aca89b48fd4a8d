"""The miniature residual classifier and its training math."""

import math

import numpy as np
import pytest

from atconv.errors import ArgumentError, DimensionError
from atconv.micro import (
    AdamHyper,
    GluParams,
    MicroConfig,
    MicroModel,
    _patchify,
    _unpatchify,
    adam_init,
    adam_step,
    block_forward,
    BlockParams,
    cross_entropy,
    glu_forward,
    patch_embed_forward,
)
from atconv.op import ATConvConfig
from atconv.rng import Rng
from oracles import adam_ref


# ----------------------------------------------------------------------
# gated channel MLP
# ----------------------------------------------------------------------

def _identity_glu(c):
    eye = np.eye(c)
    zero = np.zeros(c)
    return GluParams(w_a=eye.copy(), b_a=zero.copy(), w_b=eye.copy(),
                     b_b=zero.copy(), w_c=eye.copy(), b_c=zero.copy())


def test_glu_identity_weights_give_gated_input():
    p = _identity_glu(1)
    x = np.ones((1, 1, 1, 1))
    y, _ = glu_forward(x, p)
    assert abs(y[0, 0, 0, 0] - 0.8413447460685429) < 1e-12


def test_glu_zero_input_is_zero():
    p = GluParams.init(Rng(140), 3, expansion=4)
    y, _ = glu_forward(np.zeros((2, 3, 4, 4)), p)
    assert np.abs(y).max() == 0.0


def test_glu_rejects_narrow_expansion():
    with pytest.raises(ArgumentError):
        GluParams.init(Rng(141), 4, expansion=0)


# ----------------------------------------------------------------------
# patch embedding
# ----------------------------------------------------------------------

def test_patchify_roundtrip():
    x = Rng(142).normal(0, 1, (2, 3, 8, 12))
    cols = _patchify(x, 4)
    assert cols.shape == (2, 3 * 16, 2, 3)
    assert np.array_equal(_unpatchify(cols, x.shape, 4), x)


def test_patchify_layout():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    cols = _patchify(x, 2)
    # first output pixel stacks the top-left 2x2 patch row-major
    assert cols[0, :, 0, 0].tolist() == [0.0, 1.0, 4.0, 5.0]


def test_patch_embed_rejects_indivisible_input():
    w = np.zeros((4, 9))
    with pytest.raises(DimensionError):
        patch_embed_forward(np.ones((1, 1, 7, 7)), w, np.zeros(4), 3)


# ----------------------------------------------------------------------
# model structure
# ----------------------------------------------------------------------

def test_block_preserves_shape():
    rng = Rng(143)
    p = BlockParams.init(rng, 4, kernel=3, expansion=2)
    x = rng.normal(0, 1, (2, 4, 6, 6))
    y, _ = block_forward(x, p)
    assert y.shape == x.shape


def test_initial_loss_is_log_num_classes():
    rng = Rng(144)
    model = MicroModel.init(rng, MicroConfig(channels=16, blocks=2, patch=4))
    x = rng.uniform(0, 1, (8, 1, 28, 28))
    logits = model.forward(x)
    assert np.abs(logits).max() == 0.0  # zero head
    labels = Rng(145).integers(10, (8,))
    loss, _ = cross_entropy(logits, labels)
    assert loss == math.log(10.0)


def test_named_parameters_flat_keys():
    model = MicroModel.init(Rng(146), MicroConfig(channels=8, blocks=2, patch=2))
    names = model.named_parameters()
    for key in ("embed_w", "embed_b", "blocks.0.mixer.w_f", "blocks.0.mixer.gamma",
                "blocks.1.glu.w_c", "blocks.1.norm2_gain", "head_w", "head_b"):
        assert key in names, key
    assert all(isinstance(v, np.ndarray) for v in names.values())


def test_param_count_formula():
    c, k, e, nc = 32, 3, 4, 10
    cfg = MicroConfig(in_channels=1, channels=c, blocks=2, patch=4,
                      kernel=k, expansion=e, num_classes=nc)
    model = MicroModel.init(Rng(147), cfg)
    ee = e * c
    mixer = 3 * c * c + 4 * c + k**4
    glu = 3 * ee * c + 2 * ee + c
    block = 2 * c + mixer + 2 * c + glu
    embed = c * (1 * 4 * 4) + c
    head = nc * c + nc
    assert model.param_count() == embed + 2 * block + head


def test_set_parameter_reaches_nested_fields():
    model = MicroModel.init(Rng(148), MicroConfig(channels=4, blocks=1, patch=2))
    new = np.full((4, 4), 0.5)
    model.set_parameter("blocks.0.mixer.w_value", new)
    assert model.blocks[0].mixer.w_value is new
    model.set_parameter("head_b", np.ones(10))
    assert np.array_equal(model.head_b, np.ones(10))


def test_op_config_changes_forward_not_parameters():
    cfg = MicroConfig(channels=8, blocks=1, patch=2)
    m_dkm = MicroModel.init(Rng(149), cfg)
    m_soft = MicroModel.init(Rng(149), cfg, op_config=ATConvConfig(kernel_mod="softmax"))
    p1, p2 = m_dkm.named_parameters(), m_soft.named_parameters()
    assert list(p1.keys()) == list(p2.keys())
    for k in p1:
        assert np.array_equal(p1[k], p2[k]), k
    # the head starts at zero, so give both models the same nonzero one
    head = Rng(152).normal(0, 1, (10, 8))
    m_dkm.set_parameter("head_w", head.copy())
    m_soft.set_parameter("head_w", head.copy())
    x = Rng(150).normal(0, 1, (2, 1, 8, 8))
    assert np.abs(m_dkm.forward(x) - m_soft.forward(x)).max() > 1e-8


def test_config_validation():
    with pytest.raises(ArgumentError):
        MicroConfig(blocks=0).validate()
    with pytest.raises(ArgumentError):
        MicroConfig(expansion=0).validate()


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 3]))
    assert abs(loss - math.log(7.0)) < 1e-15
    assert np.abs(grad.sum(axis=1)).max() < 1e-15


def test_cross_entropy_confident_correct_prediction():
    logits = np.zeros((1, 3))
    logits[0, 1] = 50.0
    loss, _ = cross_entropy(logits, np.array([1]))
    assert loss < 1e-12


def test_cross_entropy_gradient_matches_softmax_minus_onehot():
    rng = Rng(151)
    logits = rng.normal(0, 2, (3, 5))
    labels = np.array([4, 0, 2])
    _, grad = cross_entropy(logits, labels)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros((3, 5))
    onehot[np.arange(3), labels] = 1.0
    assert np.abs(grad - (soft - onehot) / 3.0).max() < 1e-14


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ArgumentError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    params = {"a": np.array([1.0, -2.0])}
    state = adam_init(params)
    out = adam_step(params, {"a": np.zeros(2)}, state, AdamHyper(lr=0.1))
    assert np.array_equal(out["a"], params["a"])


def test_adam_first_step_is_lr_sized():
    params = {"a": np.array([3.0])}
    state = adam_init(params)
    out = adam_step(params, {"a": np.ones(1)}, state, AdamHyper(lr=0.1))
    assert abs(out["a"][0] - (3.0 - 0.1)) < 1e-8


def test_adam_missing_gradient_skips_parameter():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = adam_init(params)
    out = adam_step(params, {"a": np.ones(1)}, state, AdamHyper(lr=0.1))
    assert out["b"] is params["b"]


def test_adam_two_step_trace_matches_reference():
    hyper = AdamHyper(lr=0.05, weight_decay=0.1)
    params = {"w": np.array([0.7])}
    state = adam_init(params)
    grads = [np.array([0.3]), np.array([-1.2])]

    p_ref, m_ref, v_ref = 0.7, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        params = adam_step(params, {"w": g}, state, hyper)
        p_ref, m_ref, v_ref = adam_ref(p_ref, float(g[0]), m_ref, v_ref, t,
                                       lr=hyper.lr, wd=hyper.weight_decay)
        assert abs(params["w"][0] - p_ref) < 1e-12

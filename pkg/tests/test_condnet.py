import numpy as np
import pytest
from conftest import make_model

from csrnvc import numcore as nc
from csrnvc.condnet import (
    PER_GRADIENT_STEP,
    PER_UTTERANCE,
    CondNet,
    ConditioningState,
    repetition_factor,
    reset_backward_state,
    upsample_repeat,
)
from csrnvc.config import MICRO_MODEL, ModelConfig
from csrnvc.errors import ConfigError
from csrnvc.featurizer import ConditioningSequence


def test_zero_network_outputs_projection_bias():
    store = nc.ParameterStore(np.float64)
    net = CondNet(store, MICRO_MODEL)
    store["condnet.proj.b"].data = np.arange(MICRO_MODEL.cond_dim, dtype=float)
    feats = np.random.default_rng(0).normal(size=(2, 5, MICRO_MODEL.feature_dim))
    ctx, _ = net.forward(feats, [0, 1])
    assert np.array_equal(ctx.frames.data, np.broadcast_to(np.arange(MICRO_MODEL.cond_dim), (2, 5, 8)))


def test_time_reversal_symmetry():
    """Reversed input with swapped directions gives the time-reversed output."""
    model = make_model()
    net, store = model.condnet, model.store
    feats = np.random.default_rng(2).normal(size=(1, 7, MICRO_MODEL.feature_dim))
    out = net.forward(feats, [1])[0].frames.data
    swapped = {}
    for name in store.names():
        if ".fwd." in name:
            swapped[name.replace(".fwd.", ".bwd.")] = store[name].data.copy()
        elif ".bwd." in name:
            swapped[name.replace(".bwd.", ".fwd.")] = store[name].data.copy()
    for name, data in swapped.items():
        store[name].data = data
    H = MICRO_MODEL.cond_hidden
    w = store["condnet.proj.w"].data
    store["condnet.proj.w"].data = np.concatenate([w[H:], w[:H]])
    rev = net.forward(feats[:, ::-1], [1])[0].frames.data
    assert np.allclose(rev[:, ::-1], out, atol=1e-12)


def test_speaker_changes_values_not_shape():
    model = make_model()
    feats = np.random.default_rng(3).normal(size=(1, 6, MICRO_MODEL.feature_dim))
    a = model.condnet.forward(feats, [0])[0].frames.data
    b = model.condnet.forward(feats, [1])[0].frames.data
    assert a.shape == b.shape == (1, 6, MICRO_MODEL.cond_dim)
    assert not np.allclose(a, b)


def test_input_dimension_for_44_phonemes():
    cfg = ModelConfig(n_phonemes=44)
    assert cfg.feature_dim == 222
    assert CondNet(nc.ParameterStore(), cfg).input_dim == 238


def test_invalid_speaker():
    model = make_model()
    seq = ConditioningSequence(np.zeros((3, MICRO_MODEL.feature_dim)), np.zeros((3, 5), int))
    with pytest.raises(IndexError):
        model.condnet.context(seq, 5)


def test_condnet_gradients():
    model = make_model()
    feats = np.random.default_rng(4).normal(size=(2, 4, MICRO_MODEL.feature_dim))
    w = nc.Tensor(np.random.default_rng(5).normal(size=(2, 4, MICRO_MODEL.cond_dim)))
    params = {n: p for n, p in model.store.items() if n.startswith("condnet.")}

    def f():
        ctx, _ = model.condnet.forward(feats, [0, 1], ConditioningState.zeros(2, MICRO_MODEL.cond_hidden, np.float64))
        return nc.total(nc.mul(ctx.frames, w))

    rep = nc.finite_diff_check(f, params, tolerance=1e-4)
    assert rep.ok, list(rep.lines())


def test_upsample_repeat():
    a = np.array([[[1.0], [2.0]]])
    assert upsample_repeat(a, 3)[0, :, 0].tolist() == [1, 1, 1, 2, 2, 2]
    assert np.array_equal(upsample_repeat(a, 1), a)
    assert upsample_repeat(np.zeros((1, 200, 4)), repetition_factor(80, 8)).shape == (1, 2000, 4)
    with pytest.raises(ConfigError):
        repetition_factor(80, 7)
    with pytest.raises(ConfigError):
        upsample_repeat(a, 1.5)


def test_reset_policies():
    st = ConditioningState(np.ones((1, 3)), np.ones((1, 3)))
    reset_backward_state(st, PER_GRADIENT_STEP)
    assert not st.backward.any() and st.forward.all()
    reset_backward_state(st, PER_UTTERANCE)
    assert not st.forward.any() and st.utterance_resets == 1
    with pytest.raises(ValueError):
        reset_backward_state(st, "sometimes")


def test_training_chunks_reset_backward_and_carry_forward():
    model = make_model()
    feats = np.random.default_rng(6).normal(size=(1, 8, MICRO_MODEL.feature_dim))
    codes = np.random.default_rng(7).integers(0, 256, size=(1, 32))
    state = model.initial_state(1)
    _, s1 = model.chunk_loss(feats[:, :4], [0], codes[:, :16], state)
    assert s1.cond.forward.any()
    s1.cond.backward[:] = 9.0  # anything left here must be discarded
    _, s2 = model.chunk_loss(feats[:, 4:], [0], codes[:, 16:], s1)
    assert s2.cond.backward_resets == 2
    assert not s2.cond.backward.any()
    # forward continuity: chunk 2 forward output equals the unchunked pass
    st = ConditioningState.zeros(1, MICRO_MODEL.cond_hidden, np.float64)
    hf_full = model.condnet.fwd.run(
        nc.concat([nc.Tensor(feats), nc.embedding_lookup(model.condnet.speaker_table, np.zeros((1, 8), int))], 2),
        nc.Tensor(st.forward),
    )
    assert np.allclose(s2.cond.forward, hf_full.data[:, -1], atol=1e-12)

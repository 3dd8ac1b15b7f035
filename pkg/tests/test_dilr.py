import logging

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrl import dilr
from edrl.dilr import RealignedFeatures, SplitSpec
from edrl.eprl import GuidingTokens, M1, M2
from edrl.nn import Mlp
from edrl.tensor import DimensionError, RngState, Tensor


# ---- SplitSpec / split_channels ----------------------------------------------

def test_split_spec_invariants():
    s = SplitSpec(32, 13)
    assert s.common + s.unique == 32 and s.ratio == 13 / 32
    with pytest.raises(ValueError):
        SplitSpec(4, 0)
    with pytest.raises(ValueError):
        SplitSpec(4, 4)


@pytest.mark.parametrize("p, dc", [(0.3, 10), (0.4, 13), (0.5, 16), (0.6, 19), (0.7, 22)])
def test_from_ratio_rounds_half_up(p, dc):
    assert SplitSpec.from_ratio(32, p).common == dc


def test_split_example():
    com, uni = dilr.split_channels(Tensor([[[1.0, 2.0, 3.0, 4.0]]]), SplitSpec(4, 2))
    assert com.data.tolist() == [[[1.0, 2.0]]] and uni.data.tolist() == [[[3.0, 4.0]]]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_split_round_trip_and_coverage(d, seed):
    rng = np.random.default_rng(seed)
    dc = int(rng.integers(1, d))
    x = rng.normal(size=(2, 3, d))
    com, uni = dilr.split_channels(Tensor(x), SplitSpec(d, dc))
    assert com.shape[-1] + uni.shape[-1] == d
    assert np.concatenate([com.data, uni.data], axis=-1).tobytes() == x.tobytes()


def test_split_mismatch():
    with pytest.raises(DimensionError):
        dilr.split_channels(Tensor(np.ones((1, 2, 5))), SplitSpec(4, 2))


# ---- realign ----------------------------------------------------------------

def _guiding(b, d, rng):
    return GuidingTokens(*(Tensor(rng.normal(size=(b, d))) for _ in range(3)), classes=np.zeros(b, dtype=int))


def _setup(d=6, dc=2, seed=0):
    spec = SplitSpec(d, dc)
    r = RngState(seed)
    return spec, dilr.Realigner(spec, r, heads=2), dilr.GuidingProjection(spec, r)


def test_realign_single_token_common_is_value_path():
    spec, re_, proj = _setup()
    rng = np.random.default_rng(0)
    com = Tensor(rng.normal(size=(3, 1, spec.common)))
    uni = Tensor(rng.normal(size=(3, 1, spec.unique)))
    out = dilr.realign(re_, com, uni, _guiding(3, spec.width, rng), M1, proj)
    expected = re_.cross.o(re_.cross.v(com)).data[:, 0]
    np.testing.assert_allclose(out.common.data, expected, atol=1e-13)


def test_realign_constant_unique_tokens():
    spec, re_, proj = _setup()
    rng = np.random.default_rng(1)
    g = _guiding(2, spec.width, rng)
    tok = rng.normal(size=(2, 1, spec.unique))
    uni = Tensor(np.repeat(tok, 5, axis=1))
    out = dilr.realign(re_, Tensor(rng.normal(size=(2, 5, spec.common))), uni, g, M2, proj)
    biased = Tensor(tok + proj.to_unique(g.g_uni_m2).data[:, None, :])
    expected = re_.self_attn.o(re_.self_attn.v(biased)).data[:, 0]
    np.testing.assert_allclose(out.unique.data, expected, atol=1e-13)


def _mp_linear(x, lin):
    return [mpmath.fsum(mpmath.mpf(x[i]) * mpmath.mpf(lin.weight.data[i, j]) for i in range(len(x))) + mpmath.mpf(lin.bias.data[j])
            for j in range(lin.weight.shape[1])]


def _mp_attention(att, q, ks):
    """One query over several keys, in 40-digit arithmetic, projections included."""
    qh = _mp_linear(q, att.q)
    kh = [_mp_linear(k, att.k) for k in ks]
    vh = [_mp_linear(k, att.v) for k in ks]
    dh = att.d_inner // att.heads
    ctx = [mpmath.mpf(0)] * att.d_inner
    for h in range(att.heads):
        sl = range(h * dh, (h + 1) * dh)
        s = [mpmath.fsum(qh[c] * k[c] for c in sl) / mpmath.sqrt(dh) for k in kh]
        m = max(s)
        e = [mpmath.exp(v - m) for v in s]
        z = mpmath.fsum(e)
        for c in sl:
            ctx[c] = mpmath.fsum(w / z * v[c] for w, v in zip(e, vh))
    return [float(v) for v in _mp_linear(ctx, att.o)]


def test_realign_two_tokens_vs_extended_precision():
    mpmath.mp.dps = 40
    spec, re_, proj = _setup(d=6, dc=2, seed=3)
    rng = np.random.default_rng(3)
    g = _guiding(1, spec.width, rng)
    com = rng.normal(size=(1, 2, spec.common))
    uni = rng.normal(size=(1, 2, spec.unique))
    out = dilr.realign(re_, Tensor(com), Tensor(uni), g, M1, proj)

    q = _mp_linear(g.g_com.data[0], proj.to_common)
    np.testing.assert_allclose(out.common.data[0], _mp_attention(re_.cross, [float(v) for v in q], list(com[0])),
                               rtol=0, atol=1e-10)

    bias = [float(v) for v in _mp_linear(g.g_uni_m1.data[0], proj.to_unique)]
    toks = [uni[0, t] + np.array(bias) for t in range(2)]
    pooled = np.mean([_mp_attention(re_.self_attn, toks[t], toks) for t in range(2)], axis=0)
    np.testing.assert_allclose(out.unique.data[0], pooled, rtol=0, atol=1e-10)


def test_realign_without_guiding_uses_learned_query():
    spec, re_, _ = _setup()
    rng = np.random.default_rng(0)
    out = dilr.realign(re_, Tensor(rng.normal(size=(4, 3, 2))), Tensor(rng.normal(size=(4, 3, 4))), None, M1)
    assert out.common.shape == (4, 2) and out.unique.shape == (4, 4)


def test_realign_shape_errors():
    spec, re_, proj = _setup()
    with pytest.raises(DimensionError):
        re_(Tensor(np.ones((2, 3, 2))), Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        dilr.realign(re_, Tensor(np.ones((2, 3, 2))), Tensor(np.ones((2, 3, 4))), _guiding(2, 6, np.random.default_rng(0)), M1)


# ---- correlation ------------------------------------------------------------

def _corr_oracle(f1, f2):
    b, d = f1.shape
    c = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            num = sum(f1[k, i] * f2[k, j] for k in range(b))
            n1 = max(np.sqrt(sum(f1[k, i] ** 2 for k in range(b))), 1e-8)
            n2 = max(np.sqrt(sum(f2[k, j] ** 2 for k in range(b))), 1e-8)
            c[i, j] = num / (n1 * n2)
    return c


def test_correlation_orthonormal_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_allclose(dilr.correlation_matrix(Tensor(q), Tensor(q)).data, np.eye(3), atol=1e-12)


def test_correlation_sign_flip():
    f = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_allclose(np.diag(dilr.correlation_matrix(Tensor(f), Tensor(-f)).data), -1.0, atol=1e-12)


def test_correlation_explicit_b3_d2():
    f1 = np.array([[1.0, 2.0], [0.5, -1.0], [-2.0, 0.25]])
    f2 = np.array([[0.3, -0.7], [1.5, 2.0], [-0.4, 1.1]])
    np.testing.assert_allclose(dilr.correlation_matrix(Tensor(f1), Tensor(f2)).data, _corr_oracle(f1, f2), rtol=0, atol=1e-12)


def test_correlation_is_uncentered_unless_asked():
    f = np.random.default_rng(2).normal(size=(6, 2)) + 5.0
    g = np.random.default_rng(3).normal(size=(6, 2)) + 5.0
    raw = dilr.correlation_matrix(Tensor(f), Tensor(g)).data
    centered = dilr.correlation_matrix(Tensor(f), Tensor(g), center=True).data
    assert raw.min() > 0.9
    np.testing.assert_allclose(centered, _corr_oracle(f - f.mean(0), g - g.mean(0)), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 1_000_000), st.floats(1e-3, 1e3))
def test_correlation_bounds_and_unit_diagonal(b, d, seed, scale):
    rng = np.random.default_rng(seed)
    f1, f2 = scale * rng.normal(size=(b, d)), rng.normal(size=(b, d))
    c = dilr.correlation_matrix(Tensor(f1), Tensor(f2)).data
    assert (np.abs(c) <= 1 + 1e-9).all()
    np.testing.assert_allclose(np.diag(dilr.correlation_matrix(Tensor(f1), Tensor(f1)).data), 1.0, atol=1e-9)


def test_correlation_shape_error():
    with pytest.raises(DimensionError):
        dilr.correlation_matrix(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 3))))


# ---- losses -----------------------------------------------------------------

def test_common_loss_examples():
    assert dilr.common_loss(Tensor(np.eye(3)), 0.005).item() == 0.0
    assert dilr.common_loss(Tensor(np.zeros((3, 3))), 0.005).item() == 3.0


def test_unique_loss_examples():
    assert dilr.unique_loss(Tensor(np.zeros((4, 4))), 0.005).item() == 0.0
    assert dilr.unique_loss(Tensor(np.eye(4)), 0.005).item() == 4.0


@pytest.mark.parametrize("seed", range(5))
def test_losses_vs_direct_summation(seed):
    c = np.random.default_rng(seed).uniform(-1, 1, (3, 3))
    lam = 0.005
    com = sum((1 - c[i, i]) ** 2 for i in range(3)) + lam * sum(c[i, j] ** 2 for i in range(3) for j in range(3) if i != j)
    uni = sum(c[i, i] ** 2 for i in range(3)) + lam * sum(c[i, j] ** 2 for i in range(3) for j in range(3) if i != j)
    assert dilr.common_loss(Tensor(c), lam).item() == pytest.approx(com, abs=1e-14)
    assert dilr.unique_loss(Tensor(c), lam).item() == pytest.approx(uni, abs=1e-14)


def test_losses_reject_non_square():
    with pytest.raises(DimensionError):
        dilr.common_loss(Tensor(np.ones((2, 3))), 0.0)
    with pytest.raises(DimensionError):
        dilr.unique_loss(Tensor(np.ones((2, 3))), 0.0)


def test_disentangle_loss_blocks_and_batch_of_one(caplog):
    rng = np.random.default_rng(0)
    spec = SplitSpec(5, 2)
    r1 = RealignedFeatures(Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=(6, 3))))
    r2 = RealignedFeatures(Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=(6, 3))))
    loss, cm = dilr.disentangle_loss(r1, r2, spec, 0.005, 0.005)
    c = _corr_oracle(r1.joined().data, r2.joined().data)
    assert loss.item() == pytest.approx(
        dilr.common_loss(Tensor(c[:2, :2]), 0.005).item() + dilr.unique_loss(Tensor(c[2:, 2:]), 0.005).item(), abs=1e-12
    )
    assert cm.c_com.shape == (2, 2) and cm.c_uni.shape == (3, 3)
    one = RealignedFeatures(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))))
    with caplog.at_level(logging.WARNING):
        assert dilr.disentangle_loss(one, one, spec, 0.005, 0.005) is None
    assert "skipped" in caplog.text


# ---- fuse / classify --------------------------------------------------------

def test_fuse_example():
    r1 = RealignedFeatures(Tensor([[1.0]]), Tensor([[2.0]]))
    r2 = RealignedFeatures(Tensor([[4.0]]), Tensor([[3.0]]))
    assert dilr.fuse(r1, r2).data.tolist() == [[2.0, 3.0, 5.0]]


def test_fuse_zero_commons_and_width():
    rng = np.random.default_rng(0)
    r1 = RealignedFeatures(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(3, 5))))
    r2 = RealignedFeatures(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(3, 5))))
    out = dilr.fuse(r1, r2).data
    assert out.shape == (3, 2 * 5 + 4)
    assert (out[:, 10:] == 0).all()
    with pytest.raises(DimensionError):
        dilr.fuse(r1, RealignedFeatures(Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 5)))))


def test_classify_zero_head_and_shape():
    head = Mlp([7, 4], RngState(0))
    head.layers[0].weight.data[:] = 0
    logits = dilr.classify(Tensor(np.random.default_rng(0).normal(size=(5, 7))), head)
    assert logits.shape == (5, 4) and (logits.data == 0).all()
    with pytest.raises(DimensionError):
        dilr.classify(Tensor(np.ones((5, 6))), head)


def test_classify_hand_oracle():
    head = Mlp([3, 2, 2], RngState(0))
    head.layers[0].weight.data = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
    head.layers[0].bias.data = np.array([0.0, 0.5])
    head.layers[1].weight.data = np.array([[1.0, 2.0], [-1.0, 0.0]])
    head.layers[1].bias.data = np.array([0.1, 0.2])
    # x=[1,2,3]: hidden = relu([4, -0.5]) = [4, 0]; logits = [4.1, 8.2]
    assert dilr.classify(Tensor([[1.0, 2.0, 3.0]]), head).data.tolist() == [[4.1, 8.2]]

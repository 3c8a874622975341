import numpy as np
import pytest
from numpy.testing import assert_allclose

from corrlab.autodiff import ParameterStore, Tensor
from corrlab.blocks import zero_parameters
from corrlab.cga import ContextPositionAttention, MultiBranchFFN
from corrlab.gradsuite import check_block

D = 8


def make_cpa(**kw):
    st_ = ParameterStore(np.float64, seed=8)
    return st_, ContextPositionAttention(st_, "cpa", D, **kw)


def inputs(rng, n=16):
    return rng.standard_normal((n, D)), rng.uniform(-1, 1, (n, 2)), rng.uniform(-1, 1, (n, 2))


def test_attention_rows_are_stochastic(rng):
    _, cpa = make_cpa()
    f, p1, p2 = inputs(rng)
    maps = cpa.attention(Tensor(f), p1, p2)
    for a in (maps.a_f.value, maps.a_g.value):
        assert a.shape == (16, 16)
        assert np.all(a >= 0) and np.all(a <= 1)
        assert_allclose(a.sum(axis=1), 1.0, atol=1e-10)
    assert_allclose((maps.a_f.value + maps.a_g.value).sum(axis=1), 2.0, atol=1e-10)


def test_zero_query_gives_twice_mean_value(rng):
    st_, cpa = make_cpa()
    zero_parameters(st_, "cpa.q")
    f, p1, p2 = inputs(rng)
    out = cpa(Tensor(f), p1, p2).value
    v = cpa.attention(Tensor(f), p1, p2).v.value
    assert_allclose(out, np.tile(2 * v.mean(axis=0), (16, 1)), atol=1e-12)


def test_cpa_shape_and_min_rows(rng):
    _, cpa = make_cpa()
    f, p1, p2 = inputs(rng, 5)
    assert cpa(Tensor(f), p1, p2).shape == (5, D)
    with pytest.raises(ValueError):
        cpa(Tensor(f[:1]), p1[:1], p2[:1])


@pytest.mark.parametrize("kw", [{}, {"share_encoder": True}, {"scale_geometric": True}])
def test_cpa_joint_permutation(kw, rng):
    _, cpa = make_cpa(**kw)
    f, p1, p2 = inputs(rng, 20)
    perm = rng.permutation(20)
    out = cpa(Tensor(f), p1, p2).value
    assert_allclose(cpa(Tensor(f[perm]), p1[perm], p2[perm]).value, out[perm], atol=1e-10)


def test_shared_encoder_has_fewer_parameters():
    a, _ = make_cpa()
    b, _ = make_cpa(share_encoder=True)
    assert len(b) < len(a)


def test_geometric_scaling_flag_changes_only_geometric_map(rng):
    f, p1, p2 = inputs(rng)
    _, plain = make_cpa()
    _, scaled = make_cpa(scale_geometric=True)
    m1, m2 = plain.attention(Tensor(f), p1, p2), scaled.attention(Tensor(f), p1, p2)
    assert_allclose(m1.a_f.value, m2.a_f.value, atol=0)
    assert not np.allclose(m1.a_g.value, m2.a_g.value)


def test_mbffn_equal_rows_average_branch_is_the_row(rng):
    ffn = MultiBranchFFN(ParameterStore(np.float64, seed=1), "ffn", D)
    row = rng.standard_normal((1, D))
    gap, gmp, x = ffn.branches(Tensor(np.tile(row, (6, 1))))
    assert_allclose(gap.value, x.value[:1], atol=1e-14)
    assert_allclose(gmp.value, x.value[:1], atol=1e-14)


def test_mbffn_shape_and_permutation(rng):
    ffn = MultiBranchFFN(ParameterStore(np.float64, seed=1), "ffn", D)
    f = rng.standard_normal((17, D))
    perm = rng.permutation(17)
    out = ffn(Tensor(f)).value
    assert out.shape == (17, D)
    assert_allclose(ffn(Tensor(f[perm])).value, out[perm], atol=1e-10)


def test_cpa_then_ffn_joint_permutation(rng):
    st_ = ParameterStore(np.float64, seed=2)
    cpa = ContextPositionAttention(st_, "c", D)
    ffn = MultiBranchFFN(st_, "f", D)
    f, p1, p2 = inputs(rng, 24)
    perm = rng.permutation(24)
    out = ffn(cpa(Tensor(f), p1, p2)).value
    out_p = ffn(cpa(Tensor(f[perm]), p1[perm], p2[perm])).value
    assert_allclose(out_p, out[perm], atol=1e-10)


@pytest.mark.parametrize("name", ["cpa_forward", "mbffn_forward"])
def test_cga_gradients(name):
    res = check_block(name, seeds=range(3), coords=40)
    assert res.passed, res.line()

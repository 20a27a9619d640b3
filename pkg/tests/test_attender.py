from __future__ import annotations

import numpy as np
import pytest

from dstrack import attender as att
from dstrack import autodiff as ad
from dstrack.autodiff import ParamSet, Tensor


def make_attender(hidden, attn_dim, seed=0, token_level=False, dtype=np.float64):
    ps = ParamSet(seed=seed, dtype=dtype)
    return ps, att.Attender(ps, "att", hidden, attn_dim, token_level=token_level)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_zero_projection_gives_zero_scores():
    ps, a = make_attender(4, 4)
    a.r.data[:] = 0.0
    sim = a.similarity_overall(rand((4, 5), 1), rand((4, 3), 2))
    np.testing.assert_array_equal(sim.data, np.zeros((5, 3)))


def test_overall_matches_direct_formula_scalar():
    # h = h' = 2, N = M = 1, hand-picked weights
    ps, a = make_attender(2, 2)
    a.r.data = np.array([[0.5], [-1.0]])
    a.w1.data = np.array([[1.0, 2.0], [0.0, 1.0]])
    a.w2.data = np.array([[-1.0, 0.0], [0.5, 0.5]])
    d = np.array([[0.3], [-0.2]])
    e = np.array([[0.1], [0.4]])
    want = float((a.r.data.T @ np.tanh(a.w1.data @ d + a.w2.data @ e))[0, 0])
    got = a.similarity_overall(Tensor(d), Tensor(e)).item()
    assert abs(got - want) < 1e-12


def test_overall_batched_equals_entry_by_entry_loop():
    ps, a = make_attender(6, 5, seed=3)
    d = rand((6, 7), 10).data
    e = rand((6, 4), 11).data
    got = a.similarity_overall(Tensor(d), Tensor(e)).data
    r, w1, w2 = a.r.data.reshape(-1), a.w1.data, a.w2.data
    for i in range(7):
        for j in range(4):
            want = float(r @ np.tanh(w1 @ d[:, i] + w2 @ e[:, j]))
            assert abs(got[i, j] - want) < 1e-10


# ---------------------------------------------------------------------------
# token-level similarity


def test_token_singleton_attention_is_identity():
    ps, a = make_attender(4, 4, token_level=True)
    d = rand((4, 3), 5)
    single = rand((4, 1), 6)
    ctx = a.token_attn.batched(d, single, single)
    for i in range(3):
        np.testing.assert_allclose(ctx.data[:, i], single.data[:, 0], atol=1e-12)
    sim = a.similarity_token(d, [single])
    assert sim.data.shape == (3, 1)


def test_token_identical_tokens_equal_singleton_case():
    ps, a = make_attender(4, 4, token_level=True, seed=2)
    d = rand((4, 3), 5)
    col = np.random.default_rng(6).normal(size=(4, 1))
    repeated = Tensor(np.repeat(col, 4, axis=1))
    single = Tensor(col)
    np.testing.assert_allclose(
        a.similarity_token(d, [repeated]).data, a.similarity_token(d, [single]).data, atol=1e-12
    )


def test_token_two_token_matches_scripted_oracle():
    ps, a = make_attender(3, 3, token_level=True, seed=4)
    rng = np.random.default_rng(9)
    d = rng.normal(size=(3, 2))
    tj = rng.normal(size=(3, 2))
    got = a.similarity_token(Tensor(d), [Tensor(tj)]).data

    v = a.token_attn.v.data.reshape(-1)
    wq, wk = a.token_attn.wq.data, a.token_attn.wk.data
    r, w1, w2 = a.r.data.reshape(-1), a.w1.data, a.w2.data
    for i in range(2):
        scores = np.array([v @ np.tanh(wq @ d[:, i] + wk @ tj[:, k]) for k in range(2)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        e_ij = tj @ weights  # attended element embedding for token i
        want = float(r @ np.tanh(w1 @ d[:, i] + w2 @ e_ij))
        assert abs(got[i, 0] - want) < 1e-10


def test_token_empty_element_rejected():
    ps, a = make_attender(4, 4, token_level=True)
    with pytest.raises(ad.ShapeError):
        a.similarity_token(rand((4, 2), 0), [Tensor(np.zeros((4, 0)))])


# ---------------------------------------------------------------------------
# fuse


def test_fuse_constant_similarity_gives_mean_schema_embedding():
    d = rand((4, 5), 0)
    e = rand((4, 3), 1)
    sim = Tensor(np.full((5, 3), 2.5))
    fused = att.fuse(sim, d, e)
    mean_schema = e.data.mean(axis=1)
    for i in range(5):
        np.testing.assert_allclose(fused.utt.data[:, i], mean_schema, atol=1e-12)


def test_fuse_dominant_entry_saturates():
    rng = np.random.default_rng(2)
    d = Tensor(rng.normal(size=(4, 5)))
    e = Tensor(rng.normal(size=(4, 3)))
    sim_data = rng.normal(size=(5, 3))
    sim_data[2, 1] += 1e6
    fused = att.fuse(Tensor(sim_data), d, e)
    np.testing.assert_allclose(fused.utt.data[:, 2], e.data[:, 1], atol=1e-6)


def test_fuse_normalization_sums():
    rng = np.random.default_rng(8)
    sim = Tensor(rng.normal(size=(7, 13)) * 3)
    row = ad.softmax(sim, axis=1).data
    col = ad.softmax(sim, axis=0).data
    np.testing.assert_allclose(row.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(col.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(row >= 0) and np.all(row <= 1)
    assert np.all(col >= 0) and np.all(col <= 1)


def test_fuse_outputs_are_convex_combinations():
    # reconstruct outputs from the normalized weights: non-negative, sum to 1
    rng = np.random.default_rng(4)
    d = Tensor(rng.normal(size=(3, 6)))
    e = Tensor(rng.normal(size=(3, 4)))
    sim = Tensor(rng.normal(size=(6, 4)))
    fused = att.fuse(sim, d, e)
    row = ad.softmax(sim, axis=1).data
    col = ad.softmax(sim, axis=0).data
    np.testing.assert_allclose(fused.utt.data, e.data @ row.T, atol=1e-12)
    np.testing.assert_allclose(fused.schema.data, d.data @ col, atol=1e-12)


def test_fuse_empty_sides_rejected():
    with pytest.raises(ad.ShapeError):
        att.fuse(Tensor(np.zeros((0, 3))), Tensor(np.zeros((4, 0))), Tensor(np.zeros((4, 3))))


def test_fuse_grad_check():
    ps = ParamSet(seed=1, dtype=np.float64)
    a = att.Attender(ps, "att", 4, 4)
    rng = np.random.default_rng(3)
    d = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    e = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    target = Tensor(rng.normal(size=(4, 5)))

    def loss_fn():
        fused = att.fuse(a.similarity_overall(d, e), d, e)
        diff = ad.add(fused.utt, ad.neg(target))
        return ad.tsum(ad.mul(diff, diff))

    err = ad.grad_check(loss_fn, [d, e, a.r, a.w1, a.w2], eps=1e-5, max_coords=150)
    assert err < 1e-4

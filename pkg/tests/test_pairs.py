"""Pair curation: full pairwise and sparse Top-K selection."""

import numpy as np
import pytest

from fluid import pairs, tensor as T
from fluid.tensor import Tensor


def _qk(q_rows, k_rows):
    q = np.asarray(q_rows, dtype=float)[None, None]
    k = np.asarray(k_rows, dtype=float)[None, None]
    return Tensor(q), Tensor(k)


def test_single_pair_concat():
    q, k = _qk([[1.0, 2.0]], [[3.0, 4.0]])
    pb = pairs.full_pairwise_concat(q, k)
    assert pb.u.shape == (1, 1, 1, 1, 4)
    assert np.array_equal(pb.u.data[0, 0, 0, 0], [1, 2, 3, 4])


def test_causal_first_position_sees_itself_only():
    q, k = _qk(np.zeros((3, 2)), np.zeros((3, 2)))
    pb = pairs.full_pairwise_concat(q, k, causal=True)
    assert pb.valid_mask[0, 0, 0].tolist() == [True, False, False]
    assert pb.valid_mask[0, 0, 2].tolist() == [True, True, True]


def test_full_pairwise_matches_nested_loop_oracle():
    rng = np.random.default_rng(3)
    qa = rng.standard_normal((2, 3))
    ka = rng.standard_normal((3, 3))
    pb = pairs.full_pairwise_concat(Tensor(qa[None, None]), Tensor(ka[None, None]))
    for i in range(2):
        for j in range(3):
            expected = np.concatenate([qa[i], ka[j]])
            assert np.array_equal(pb.u.data[0, 0, i, j], expected)


def test_feature_dim_mismatch():
    q, _ = _qk([[1.0, 2.0]], [[0.0, 0.0]])
    k = Tensor(np.zeros((1, 1, 1, 3)))
    with pytest.raises(T.ShapeError):
        pairs.full_pairwise_concat(q, k)
    with pytest.raises(T.ShapeError):
        pairs.topk_concat(q, k, K=1)


def test_topk_rejects_k_below_one():
    q, k = _qk([[1.0, 0.0]], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        pairs.topk_concat(q, k, K=0)


def test_topk_scores_rank_keys():
    # q=[1,0]; keys score 2, 1, 0 -> K=2 selects indices {0,1}
    q, k = _qk([[1.0, 0.0]], [[2.0, 0.0], [1.0, 0.0], [0.0, 5.0]])
    pb = pairs.topk_concat(q, k, K=2)
    assert sorted(pb.selected_indices[0, 0, 0].tolist()) == [0, 1]
    assert pb.valid_mask.all()


def test_topk_tie_break_lowest_index():
    q, k = _qk([[1.0, 1.0]], [[0.5, 0.5]] * 4)
    pb = pairs.topk_concat(q, k, K=2)
    assert pb.selected_indices[0, 0, 0].tolist() == [0, 1]


def test_topk_k_ge_tk_equals_full_pairwise_exactly():
    rng = np.random.default_rng(5)
    q = Tensor(rng.standard_normal((2, 2, 3, 4)))
    k = Tensor(rng.standard_normal((2, 2, 5, 4)))
    full = pairs.full_pairwise_concat(q, k)
    top = pairs.topk_concat(q, k, K=7)
    assert np.array_equal(top.selected_indices, full.selected_indices)
    assert np.array_equal(top.valid_mask, full.valid_mask)
    assert np.array_equal(top.u.data, full.u.data)


def test_topk_causal_never_selects_future():
    rng = np.random.default_rng(7)
    q = Tensor(rng.standard_normal((2, 2, 6, 3)))
    k = Tensor(rng.standard_normal((2, 2, 6, 3)))
    pb = pairs.topk_concat(q, k, K=3, causal=True)
    pos = np.arange(6)[None, None, :, None]
    assert (pb.selected_indices[pb.valid_mask]
            <= np.broadcast_to(pos, pb.selected_indices.shape)[pb.valid_mask]).all()
    # early rows have fewer candidates than K; padding is masked and zeroed
    assert pb.valid_mask[0, 0, 0].tolist() == [True, False, False]
    assert np.array_equal(pb.u.data[0, 0, 0, 1], np.zeros(6))
    # valid indices stay distinct per row
    for b in range(2):
        for h in range(2):
            for i in range(6):
                sel = pb.selected_indices[b, h, i][pb.valid_mask[b, h, i]]
                assert len(set(sel.tolist())) == len(sel)


def test_topk_key_padding_mask_excludes_keys():
    rng = np.random.default_rng(9)
    q = Tensor(rng.standard_normal((1, 1, 2, 3)))
    k = Tensor(rng.standard_normal((1, 1, 4, 3)))
    key_mask = np.array([[True, True, False, True]])
    pb = pairs.topk_concat(q, k, K=4, key_mask=key_mask)
    assert not pb.valid_mask[..., 2].any() or (pb.selected_indices[..., 2] != 2).all()
    valid_idx = pb.selected_indices[pb.valid_mask]
    assert (valid_idx != 2).all()


def test_pair_payload_scales_with_k_eff():
    rng = np.random.default_rng(11)
    T_k, K, D = 1024, 8, 4
    q = Tensor(rng.standard_normal((1, 1, 4, D)))
    k = Tensor(rng.standard_normal((1, 1, T_k, D)))
    full = pairs.full_pairwise_concat(q, k)
    top = pairs.topk_concat(q, k, K=K)
    assert top.u.data.nbytes * T_k == full.u.data.nbytes * K


def test_topk_gradient_flows_to_selected_pairs_only():
    rng = np.random.default_rng(13)
    qa = rng.standard_normal((1, 1, 1, 2))
    ka = rng.standard_normal((1, 1, 3, 2))
    q = Tensor(qa.copy(), requires_grad=True)
    k = Tensor(ka.copy(), requires_grad=True)
    pb = pairs.topk_concat(q, k, K=1)
    T.tsum(pb.u).backward()
    j = pb.selected_indices[0, 0, 0, 0]
    for idx in range(3):
        if idx == j:
            assert np.allclose(k.grad[0, 0, idx], np.ones(2))
        else:
            assert np.allclose(k.grad[0, 0, idx], np.zeros(2))

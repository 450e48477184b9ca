"""Query-key pair curation for the gate inputs u = [q; k].

Two strategies: full pairwise concatenation, and sparse Top-K selection
by raw dot-product score (no 1/sqrt(d) scaling on the selection scores).
Masking is applied to the scores before selection, so future keys can
never enter the pair set under causal masking; rows left with fewer than
K_eff candidates are padded with zero vectors and marked invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fluid import tensor as T
from fluid.tensor import ShapeError, Tensor


@dataclass
class PairBatch:
    """Concatenated pair inputs plus the selection bookkeeping.

    u: [B,H,T_q,K_eff,2D]; selected_indices, valid_mask: [B,H,T_q,K_eff].
    Invalid rows hold zero vectors and index 0; downstream softmax must
    exclude them via valid_mask.
    """

    u: Tensor
    selected_indices: np.ndarray
    valid_mask: np.ndarray

    @property
    def k_eff(self) -> int:
        return self.u.shape[3]


def _candidate_mask(B, H, T_q, T_k, causal: bool,
                    key_mask: np.ndarray | None) -> np.ndarray:
    valid = np.ones((B, H, T_q, T_k), dtype=bool)
    if causal:
        valid &= (np.arange(T_k)[None, :] <= np.arange(T_q)[:, None])[None, None]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        valid &= key_mask[:, None, None, :]
    return valid


def _concat_pairs(q: Tensor, k: Tensor, indices: np.ndarray,
                  valid: np.ndarray) -> Tensor:
    B, H, T_q, D = q.shape
    K_eff = indices.shape[3]
    k_sel = T.gather_keys(k, indices)
    q_tiled = T.broadcast_to(T.reshape(q, (B, H, T_q, 1, D)),
                             (B, H, T_q, K_eff, D))
    u = T.concat([q_tiled, k_sel], axis=-1)
    if not valid.all():
        u = T.mul(u, Tensor(valid[..., None].astype(np.float64)))
    return u


def full_pairwise_concat(q: Tensor, k: Tensor, causal: bool = False,
                         key_mask: np.ndarray | None = None) -> PairBatch:
    """Every query paired with every key; K_eff == T_k."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"pair features disagree: q has {q.shape}, k has {k.shape}")
    B, H, T_q, D = q.shape
    T_k = k.shape[2]
    valid = _candidate_mask(B, H, T_q, T_k, causal, key_mask)
    indices = np.broadcast_to(np.arange(T_k), (B, H, T_q, T_k)).copy()
    u = _concat_pairs(q, k, indices, valid)
    return PairBatch(u=u, selected_indices=indices, valid_mask=valid)


def topk_concat(q: Tensor, k: Tensor, K: int, causal: bool = False,
                key_mask: np.ndarray | None = None) -> PairBatch:
    """Keep the K highest-scoring keys per query, scores S = q . k^T.

    Ties break toward the lower key index; the surviving indices are then
    ordered ascending per row so that K >= T_k reproduces the full
    pairwise batch exactly. Selection is hard: scores are ranked outside
    the gradient tape and gradients flow only through selected pairs.
    """
    if K < 1:
        raise ValueError(f"top-k needs K >= 1, got {K}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"pair features disagree: q has {q.shape}, k has {k.shape}")
    B, H, T_q, D = q.shape
    T_k = k.shape[2]
    K_eff = min(K, T_k)

    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    valid = _candidate_mask(B, H, T_q, T_k, causal, key_mask)
    scores = np.where(valid, scores, -np.inf)

    # stable sort on -score: equal scores keep ascending index order
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :K_eff]
    sel_scores = np.take_along_axis(scores, order, axis=-1)
    sel_valid = np.isfinite(sel_scores)

    # reorder each row ascending by index, invalid entries to the tail as 0
    sort_key = np.where(sel_valid, order, T_k)
    asc = np.argsort(sort_key, axis=-1, kind="stable")
    indices = np.take_along_axis(order, asc, axis=-1)
    sel_valid = np.take_along_axis(sel_valid, asc, axis=-1)
    indices = np.where(sel_valid, indices, 0)

    u = _concat_pairs(q, k, indices, sel_valid)
    return PairBatch(u=u, selected_indices=indices, valid_mask=sel_valid)

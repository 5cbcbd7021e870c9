"""Training losses: classification BCE with online hard example mining,
smooth-L1 start-point regression, 91-way angle cross-entropy, and vertex
link BCE, each normalized by its own selected/positive count and summed
with unit weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

P_CLAMP = 1e-7


# -- scalar reference forms -------------------------------------------------------


def bce(y: float, p: float) -> float:
    """Binary cross-entropy with probability clamping."""
    pc = min(max(p, P_CLAMP), 1.0 - P_CLAMP)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def smooth_l1(pred: float, target: float) -> float:
    d = pred - target
    return float(0.5 * d * d if abs(d) < 1.0 else abs(d) - 0.5)


def angle_ce(logits: np.ndarray, target_class: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= target_class < logits.shape[-1]):
        raise ValueError(f"angle class {target_class} outside [0, {logits.shape[-1] - 1}]")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[target_class])


def ohem_select(per_sample_loss: np.ndarray, labels: np.ndarray, neg_ratio: float) -> np.ndarray:
    """All positives plus the hardest negatives at floor(ratio * #pos).

    With no positives, exactly one hardest negative is kept. Ties between
    equal losses break toward the lower index.
    """
    losses = np.asarray(per_sample_loss, dtype=np.float64)
    labels = np.asarray(labels)
    k = losses.shape[0]
    if k < 1:
        raise ValueError("ohem_select needs at least one sample")
    mask = (labels == 1).astype(np.int8)
    n_pos = int(mask.sum())
    n_neg_keep = int(np.floor(neg_ratio * n_pos)) if n_pos > 0 else 1
    neg_idx = np.nonzero(labels == 0)[0]
    if neg_idx.size and n_neg_keep > 0:
        # stable sort on negated loss keeps lower indices first among ties
        order = neg_idx[np.argsort(-losses[neg_idx], kind="stable")]
        mask[order[:n_neg_keep]] = 1
    return mask


# -- graph pieces --------------------------------------------------------------------


def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype))


def bce_vector(p: Tensor, y: np.ndarray) -> Tensor:
    """Elementwise BCE of probabilities against 0/1 targets (graph op)."""
    yd = np.asarray(y, dtype=p.dtype)
    pc = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    pos = T.mul(_const(yd, p), T.log(pc))
    neg = T.mul(_const(1.0 - yd, p), T.log(T.sub(_const(np.ones_like(yd), p), pc)))
    return T.mul(T.add(pos, neg), _const(-1.0, p))


def smooth_l1_vector(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise smooth-L1 against constant targets, with exact gradient."""
    td = np.asarray(target, dtype=pred.dtype)
    d = pred.data - td
    quad = np.abs(d) < 1.0
    out_data = np.where(quad, 0.5 * d * d, np.abs(d) - 0.5).astype(pred.dtype)

    def bwd():
        if pred.requires_grad:
            pred._ensure_grad()
            pred.grad += out.grad * np.where(quad, d, np.sign(d)).astype(pred.dtype)

    out = T._wrap(out_data, (pred,), bwd, "smooth_l1")
    return out


def masked_mean(vec: Tensor, mask: np.ndarray, count: int) -> Tensor:
    sel = T.mul(vec, _const(mask.astype(vec.dtype), vec))
    return T.mul(T.reduce_sum(sel), _const(1.0 / max(count, 1), vec))


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


@dataclass
class LossBreakdown:
    l_row_cls: Tensor
    l_col_cls: Tensor
    l_angle: Tensor
    l_offset: Tensor
    l_link: Tensor
    total: Tensor
    n_row: int
    n_col: int
    n_pos: int
    n_vtx: int

    def values(self) -> dict:
        return {
            "l_row_cls": float(self.l_row_cls.data),
            "l_col_cls": float(self.l_col_cls.data),
            "l_angle": float(self.l_angle.data),
            "l_offset": float(self.l_offset.data),
            "l_link": float(self.l_link.data),
            "total": float(self.total.data),
            "n_row": self.n_row, "n_col": self.n_col,
            "n_pos": self.n_pos, "n_vtx": self.n_vtx,
        }


def _cls_term(scores: Tensor, labels: np.ndarray, neg_ratio: float):
    probs = scores.data.astype(np.float64)
    per_sample = -(labels * np.log(np.clip(probs, P_CLAMP, 1 - P_CLAMP))
                   + (1 - labels) * np.log(np.clip(1 - probs, P_CLAMP, 1 - P_CLAMP)))
    mask = ohem_select(per_sample, labels, neg_ratio)
    count = int(mask.sum())
    return masked_mean(bce_vector(scores, labels), mask, count), count


def _angle_term(logits: Tensor, classes: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    sel = T.gather(logits, pos_idx)
    ls = T.log_softmax(sel, axis=-1)
    onehot = np.zeros(sel.shape, dtype=ls.dtype)
    onehot[np.arange(pos_idx.size), classes[pos_idx]] = 1.0
    return T.mul(T.reduce_sum(T.mul(ls, _const(onehot, ls))), _const(-1.0, ls))


def total_loss(outputs, q, v, neg_ratio: float = 3.0) -> LossBreakdown:
    """Unit-weighted sum of the five supervision terms for one image.

    ``outputs`` carries the head tensors (row/col scores as sigmoid
    probabilities, offsets, angle logits, vertex link logits); ``q`` and
    ``v`` are the query and vertex targets. OHEM selection is computed on
    detached values, so masked-out samples receive exactly zero gradient.
    """
    dtype = outputs.row_scores.dtype

    row_labels = q.row_class.astype(np.float64)
    col_labels = q.col_class.astype(np.float64)
    if outputs.row_scores.shape[0] != row_labels.shape[0]:
        raise T.ShapeError(
            f"row head size {outputs.row_scores.shape[0]} != targets {row_labels.shape[0]}")
    if outputs.col_scores.shape[0] != col_labels.shape[0]:
        raise T.ShapeError(
            f"col head size {outputs.col_scores.shape[0]} != targets {col_labels.shape[0]}")

    l_row, n_row = _cls_term(outputs.row_scores, row_labels, neg_ratio)
    l_col, n_col = _cls_term(outputs.col_scores, col_labels, neg_ratio)

    pos_rows = np.nonzero(q.row_class)[0]
    pos_cols = np.nonzero(q.col_class)[0]
    n_pos = int(pos_rows.size + pos_cols.size)
    if n_pos > 0:
        parts_angle = []
        parts_offset = []
        if pos_rows.size:
            parts_angle.append(_angle_term(outputs.row_angle_logits, q.row_angle, pos_rows))
            parts_offset.append(T.reduce_sum(smooth_l1_vector(
                T.gather(outputs.row_offsets, pos_rows), q.row_offset[pos_rows])))
        if pos_cols.size:
            parts_angle.append(_angle_term(outputs.col_angle_logits, q.col_angle, pos_cols))
            parts_offset.append(T.reduce_sum(smooth_l1_vector(
                T.gather(outputs.col_offsets, pos_cols), q.col_offset[pos_cols])))
        scale = _const(1.0 / n_pos, outputs.row_scores)
        l_angle = T.mul(_sum(parts_angle), scale)
        l_offset = T.mul(_sum(parts_offset), scale)
    else:
        l_angle = _zero(dtype)
        l_offset = _zero(dtype)

    valid_idx = np.nonzero(v.valid.reshape(-1))[0]
    if valid_idx.size:
        flat_logits = T.reshape(outputs.vertex_logits, (-1,))
        link_probs = T.sigmoid(T.gather(flat_logits, valid_idx))
        link_labels = v.links.reshape(-1)[valid_idx].astype(np.float64)
        l_link, n_vtx = _cls_term(link_probs, link_labels, neg_ratio)
    else:
        l_link, n_vtx = _zero(dtype), 0

    total = _sum([l_row, l_col, l_angle, l_offset, l_link])
    return LossBreakdown(l_row_cls=l_row, l_col_cls=l_col, l_angle=l_angle,
                         l_offset=l_offset, l_link=l_link, total=total,
                         n_row=n_row, n_col=n_col, n_pos=n_pos, n_vtx=n_vtx)


def _sum(terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out

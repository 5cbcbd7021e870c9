import math
from types import SimpleNamespace

import numpy as np
import pytest

from trust import losses as LS
from trust import tensor as T
from trust.labels import QueryTargets, VertexTargets
from trust.losses import angle_ce, bce, ohem_select, smooth_l1, total_loss
from trust.tensor import Tensor


# -- closed forms ---------------------------------------------------------------


def test_bce_closed_forms():
    assert bce(1, 1.0) == pytest.approx(0.0, abs=1e-6)
    assert bce(0, 0.5) == pytest.approx(math.log(2), abs=1e-6)
    assert bce(1, 0.1) == pytest.approx(-math.log(0.1), abs=1e-6)


def test_smooth_l1_closed_forms():
    assert smooth_l1(3.0, 3.0) == 0.0
    assert smooth_l1(0.5, 0.0) == pytest.approx(0.125)
    assert smooth_l1(2.0, 0.0) == pytest.approx(1.5)


def test_angle_ce_closed_forms():
    logits = np.full(91, -20.0)
    logits[30] = 20.0
    assert angle_ce(logits, 30) == pytest.approx(0.0, abs=1e-6)
    assert angle_ce(np.zeros(91), 7) == pytest.approx(math.log(91), abs=1e-6)
    favor44 = np.zeros(91)
    favor44[44] = 5.0
    assert angle_ce(favor44, 45) > math.log(2)
    with pytest.raises(ValueError):
        angle_ce(np.zeros(91), 91)


# -- OHEM ------------------------------------------------------------------------


def test_ohem_spec_example():
    mask = ohem_select(np.array([0.9, 0.1, 0.8, 0.2, 0.3]),
                       np.array([1, 0, 0, 0, 0]), 3.0)
    assert list(mask) == [1, 0, 1, 1, 1]


def test_ohem_all_positive():
    mask = ohem_select(np.array([0.5, 0.1]), np.array([1, 1]), 3.0)
    assert list(mask) == [1, 1]


def test_ohem_no_positives_keeps_one():
    mask = ohem_select(np.array([0.1, 0.9, 0.3, 0.2]), np.zeros(4, dtype=int), 3.0)
    assert mask.sum() == 1 and mask[1] == 1


def test_ohem_tie_breaks_low_index():
    mask = ohem_select(np.array([0.5, 0.5, 0.5]), np.zeros(3, dtype=int), 3.0)
    assert list(mask) == [1, 0, 0]


def test_ohem_ratio_floor():
    losses = np.array([0.0, 0.9, 0.8, 0.7, 0.6])
    labels = np.array([1, 0, 0, 0, 0])
    assert ohem_select(losses, labels, 1.5).sum() == 2  # 1 pos + floor(1.5)
    assert ohem_select(losses, labels, 3.0).sum() == 4


# -- total loss -----------------------------------------------------------------------


def make_targets(n, m, row_pos=(), col_pos=(), row_angle=45, links=None):
    q = QueryTargets(
        row_class=np.array([1 if i in row_pos else 0 for i in range(n)], dtype=np.int8),
        row_offset=np.full(n, 0.25),
        row_angle=np.full(n, row_angle, dtype=np.int64),
        row_band=np.array([list(row_pos).index(i) if i in row_pos else -1 for i in range(n)]),
        col_class=np.array([1 if j in col_pos else 0 for j in range(m)], dtype=np.int8),
        col_offset=np.full(m, 0.5),
        col_angle=np.full(m, row_angle, dtype=np.int64),
        col_band=np.array([list(col_pos).index(j) if j in col_pos else -1 for j in range(m)]),
    )
    valid = np.zeros((n, m, 4), dtype=np.int8)
    for i in row_pos:
        for j in col_pos:
            valid[i, j, :] = 1
    link = np.zeros((n, m, 4), dtype=np.int8) if links is None else links
    return q, VertexTargets(links=link, valid=valid)


def perfect_outputs(q, v, dtype=np.float64):
    def prob(labels):
        return np.where(labels == 1, 1.0 - 1e-9, 1e-9).astype(dtype)

    n = q.row_class.shape[0]
    m = q.col_class.shape[0]

    def angle_logits(classes, k):
        out = np.full((k, 91), -30.0, dtype=dtype)
        out[np.arange(k), classes] = 30.0
        return out

    link_logits = np.where(v.links == 1, 40.0, -40.0).astype(dtype)
    return SimpleNamespace(
        row_scores=Tensor(prob(q.row_class)),
        row_offsets=Tensor(q.row_offset.astype(dtype)),
        row_angle_logits=Tensor(angle_logits(q.row_angle, n)),
        col_scores=Tensor(prob(q.col_class)),
        col_offsets=Tensor(q.col_offset.astype(dtype)),
        col_angle_logits=Tensor(angle_logits(q.col_angle, m)),
        vertex_logits=Tensor(link_logits),
    )


def random_outputs(rng, n, m, dtype=np.float64, requires_grad=False):
    return SimpleNamespace(
        row_scores=Tensor(rng.uniform(0.01, 0.99, n).astype(dtype), requires_grad=requires_grad),
        row_offsets=Tensor(rng.normal(size=n).astype(dtype), requires_grad=requires_grad),
        row_angle_logits=Tensor(rng.normal(size=(n, 91)).astype(dtype), requires_grad=requires_grad),
        col_scores=Tensor(rng.uniform(0.01, 0.99, m).astype(dtype), requires_grad=requires_grad),
        col_offsets=Tensor(rng.normal(size=m).astype(dtype), requires_grad=requires_grad),
        col_angle_logits=Tensor(rng.normal(size=(m, 91)).astype(dtype), requires_grad=requires_grad),
        vertex_logits=Tensor(rng.normal(size=(n, m, 4)).astype(dtype), requires_grad=requires_grad),
    )


def test_perfect_predictions_zero_loss():
    q, v = make_targets(5, 4, row_pos=(1, 3), col_pos=(2,))
    bd = total_loss(perfect_outputs(q, v), q, v)
    assert float(bd.total.data) == pytest.approx(0.0, abs=1e-6)


def test_single_positive_ln2_case():
    q, v = make_targets(2, 2, row_pos=(0,), col_pos=(0,))
    out = perfect_outputs(q, v)
    out.row_scores = Tensor(np.array([0.5, 0.5]))
    bd = total_loss(out, q, v)
    assert float(bd.l_row_cls.data) == pytest.approx(math.log(2), abs=1e-6)
    assert bd.n_row == 2


# independent scalar recomputation of the whole objective
def loop_oracle(out, q, v, neg_ratio):
    def sel(losses, labels):
        labels = list(labels)
        order = sorted((i for i in range(len(labels)) if labels[i] == 0),
                       key=lambda i: (-losses[i], i))
        keep = set(i for i in range(len(labels)) if labels[i] == 1)
        n_neg = math.floor(neg_ratio * len(keep)) if keep else 1
        keep |= set(order[:n_neg])
        return keep

    def sbce(y, p):
        p = min(max(p, 1e-7), 1 - 1e-7)
        return -(y * math.log(p) + (1 - y) * math.log(1 - p))

    row_p = [float(x) for x in out.row_scores.data]
    col_p = [float(x) for x in out.col_scores.data]
    row_l = [sbce(int(y), p) for y, p in zip(q.row_class, row_p)]
    col_l = [sbce(int(y), p) for y, p in zip(q.col_class, col_p)]
    rsel = sel(row_l, q.row_class)
    csel = sel(col_l, q.col_class)
    l_row = sum(row_l[i] for i in rsel) / len(rsel)
    l_col = sum(col_l[i] for i in csel) / len(csel)

    pos_r = [i for i in range(len(row_p)) if q.row_class[i] == 1]
    pos_c = [j for j in range(len(col_p)) if q.col_class[j] == 1]
    n_pos = len(pos_r) + len(pos_c)
    l_ang = l_off = 0.0
    if n_pos:
        for i in pos_r:
            logits = [float(x) for x in out.row_angle_logits.data[i]]
            mx = max(logits)
            l_ang += math.log(sum(math.exp(z - mx) for z in logits)) - (logits[q.row_angle[i]] - mx)
            d = float(out.row_offsets.data[i]) - float(q.row_offset[i])
            l_off += 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5
        for j in pos_c:
            logits = [float(x) for x in out.col_angle_logits.data[j]]
            mx = max(logits)
            l_ang += math.log(sum(math.exp(z - mx) for z in logits)) - (logits[q.col_angle[j]] - mx)
            d = float(out.col_offsets.data[j]) - float(q.col_offset[j])
            l_off += 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5
        l_ang /= n_pos
        l_off /= n_pos

    link_l, link_y = [], []
    n, m = len(row_p), len(col_p)
    for i in range(n):
        for j in range(m):
            for a in range(4):
                if v.valid[i, j, a]:
                    p = 1.0 / (1.0 + math.exp(-float(out.vertex_logits.data[i, j, a])))
                    link_y.append(int(v.links[i, j, a]))
                    link_l.append(sbce(link_y[-1], p))
    l_lnk = 0.0
    if link_l:
        vsel = sel(link_l, link_y)
        l_lnk = sum(link_l[i] for i in vsel) / len(vsel)

    return l_row + l_col + l_ang + l_off + l_lnk


@pytest.mark.parametrize("seed", range(50))
def test_total_loss_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    row_pos = tuple(np.sort(rng.choice(n, size=rng.integers(0, n), replace=False)))
    col_pos = tuple(np.sort(rng.choice(m, size=rng.integers(0, m), replace=False)))
    links = None
    if row_pos and col_pos:
        links = np.zeros((n, m, 4), dtype=np.int8)
        for i in row_pos:
            for j in col_pos:
                links[i, j] = (rng.random(4) < 0.3).astype(np.int8)
    q, v = make_targets(n, m, row_pos, col_pos, links=links)
    out = random_outputs(rng, n, m)
    neg_ratio = float(rng.choice([1.0, 2.0, 3.0]))
    bd = total_loss(out, q, v, neg_ratio)
    assert float(bd.total.data) == pytest.approx(loop_oracle(out, q, v, neg_ratio), abs=1e-6)
    # unit weights: total is the sum of the five terms
    parts = sum(float(x.data) for x in (bd.l_row_cls, bd.l_col_cls, bd.l_angle, bd.l_offset, bd.l_link))
    assert float(bd.total.data) == pytest.approx(parts, abs=1e-9)
    assert float(bd.total.data) >= 0.0


def test_doubling_ratio_never_decreases_counts():
    rng = np.random.default_rng(123)
    for _ in range(20):
        n, m = 6, 6
        row_pos = tuple(np.sort(rng.choice(n, size=2, replace=False)))
        col_pos = tuple(np.sort(rng.choice(m, size=2, replace=False)))
        q, v = make_targets(n, m, row_pos, col_pos)
        out = random_outputs(rng, n, m)
        for ratio in (1.0, 2.0):
            b1 = total_loss(out, q, v, ratio)
            b2 = total_loss(out, q, v, 2 * ratio)
            assert b2.n_row >= b1.n_row
            assert b2.n_col >= b1.n_col
            assert b2.n_vtx >= b1.n_vtx


def test_masked_out_samples_get_zero_gradient():
    rng = np.random.default_rng(5)
    n, m = 6, 5
    q, v = make_targets(n, m, row_pos=(1,), col_pos=(2,))
    out = random_outputs(rng, n, m, requires_grad=True)
    bd = total_loss(out, q, v, neg_ratio=1.0)  # 1 pos + 1 hard neg per axis
    T.backward(bd.total)

    probs = out.row_scores.data
    per = -(q.row_class * np.log(np.clip(probs, 1e-7, 1 - 1e-7))
            + (1 - q.row_class) * np.log(np.clip(1 - probs, 1e-7, 1 - 1e-7)))
    mask = ohem_select(per, q.row_class, 1.0)
    assert mask.sum() == 2
    unselected = np.nonzero(mask == 0)[0]
    assert np.all(out.row_scores.grad[unselected] == 0.0)
    selected = np.nonzero(mask)[0]
    assert np.all(out.row_scores.grad[selected] != 0.0)


def test_gradient_flows_to_all_heads():
    rng = np.random.default_rng(6)
    n, m = 5, 5
    links = np.zeros((n, m, 4), dtype=np.int8)
    links[1, 2, 0] = 1
    q, v = make_targets(n, m, row_pos=(1,), col_pos=(2,), links=links)
    out = random_outputs(rng, n, m, requires_grad=True)
    T.backward(total_loss(out, q, v).total)
    for name in ("row_scores", "row_offsets", "row_angle_logits",
                 "col_scores", "col_offsets", "col_angle_logits", "vertex_logits"):
        grad = getattr(out, name).grad
        assert grad is not None and np.any(grad != 0), name


def test_no_positives_terms_zero():
    q, v = make_targets(4, 4)
    out = random_outputs(np.random.default_rng(7), 4, 4)
    bd = total_loss(out, q, v)
    assert bd.n_pos == 0 and bd.n_vtx == 0
    assert float(bd.l_angle.data) == 0.0
    assert float(bd.l_offset.data) == 0.0
    assert float(bd.l_link.data) == 0.0
    assert bd.n_row == 1 and bd.n_col == 1  # one hardest negative each


def test_loss_gradient_finite_diff():
    rng = np.random.default_rng(8)
    n, m = 4, 4
    links = np.zeros((n, m, 4), dtype=np.int8)
    links[1, 1, 2] = 1
    q, v = make_targets(n, m, row_pos=(1,), col_pos=(1,), links=links)
    base = random_outputs(rng, n, m)

    def loss_of_logits(x):
        out = SimpleNamespace(**{k: getattr(base, k) for k in vars(base)})
        out.vertex_logits = x
        return total_loss(out, q, v).total

    err = T.finite_diff_check(loss_of_logits, base.vertex_logits, epsilon=1e-5)
    assert err < 1e-4

    def loss_of_scores(x):
        out = SimpleNamespace(**{k: getattr(base, k) for k in vars(base)})
        out.row_scores = x
        return total_loss(out, q, v).total

    err = T.finite_diff_check(loss_of_scores, base.row_scores, epsilon=1e-6)
    assert err < 1e-4

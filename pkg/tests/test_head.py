import numpy as np
import pytest
from shapely.geometry import box as shp_box

from aptrack import tensor as T
from aptrack.config import TrackerConfig
from aptrack.head import (BBox, HeadOutput, LossWeights, decode_box, focal_loss,
                          gaussian_target, giou, giou_loss, init_head, predict, total_loss)


def head_params(dim=4, hidden=5, seed=0):
    cfg = TrackerConfig(dim=dim, head_hidden=hidden, heads=1, ami_heads=1)
    p = T.Params()
    init_head(p, cfg, np.random.default_rng(seed))
    return p.subset("head")


class TestPredict:
    def test_toy_shapes(self, rng):
        hp = head_params(64, 64)
        ho = predict(rng.normal(size=(64, 64)), rng.normal(size=(64, 64)), hp)
        assert ho.score.shape == (8, 8)
        assert ho.offset.shape == (2, 8, 8) and ho.size.shape == (2, 8, 8)
        assert np.all((ho.score.data > 0) & (ho.score.data < 1))

    def test_constant_features_constant_maps(self, rng):
        hp = head_params()
        row = rng.normal(size=4)
        ho = predict(np.tile(row, (16, 1)), np.tile(row[::-1], (16, 1)), hp)
        for m in (ho.score.data, ho.offset.data[0], ho.offset.data[1], ho.size.data[1]):
            assert np.ptp(m) == 0.0

    def test_symmetrized_weights_swap_invariant(self, rng):
        hp = head_params()
        for name in ("cls", "off", "size"):
            w = hp[f"{name}.w1"].data
            w[4:] = w[:4]
        a, b = rng.normal(size=(2, 9, 4)), rng.normal(size=(2, 9, 4))
        ab, ba = predict(a, b, hp), predict(b, a, hp)
        for x, y in ((ab.score, ba.score), (ab.offset, ba.offset), (ab.size, ba.size)):
            assert np.max(np.abs(x.data - y.data)) < 1e-12

    def test_unsymmetrized_not_invariant(self, rng):
        hp = head_params()
        a, b = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
        assert np.abs(predict(a, b, hp).score.data - predict(b, a, hp).score.data).max() > 1e-8

    def test_batched_layout(self, rng):
        hp = head_params()
        a, b = rng.normal(size=(3, 16, 4)), rng.normal(size=(3, 16, 4))
        ho = predict(a, b, hp)
        assert ho.offset.shape == (3, 2, 4, 4)
        one = predict(a[1], b[1], hp)
        assert np.max(np.abs(ho.offset.data[1] - one.offset.data)) < 1e-14

    def test_non_square(self, rng):
        with pytest.raises(ValueError):
            predict(rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), head_params())


def make_output(score, offset, size):
    return HeadOutput(T.Tensor(score), T.Tensor(offset), T.Tensor(size))


class TestDecode:
    def test_substitution(self):
        score = np.zeros((8, 8))
        score[3, 2] = 0.9
        off, size = np.zeros((2, 8, 8)), np.ones((2, 8, 8))
        off[:, 3, 2] = (0.5, 0.25)
        size[:, 3, 2] = (4, 6)
        b = decode_box(make_output(score, off, size), 8)
        assert (b.x, b.y, b.w, b.h) == (20.0, 26.0, 32.0, 48.0)
        assert b.score == 0.9

    def test_uniform_tie_break(self):
        b = decode_box(make_output(np.full((4, 4), 0.3), np.zeros((2, 4, 4)), np.ones((2, 4, 4))), 1)
        assert (b.x, b.y) == (0.0, 0.0)

    def test_exhaustive_scan_oracle(self, rng):
        for _ in range(50):
            score = rng.random((6, 6))
            off, size = rng.random((2, 6, 6)), rng.uniform(0.5, 3, (2, 6, 6))
            best, cell = -1.0, None
            for y in range(6):
                for x in range(6):
                    if score[y, x] > best:
                        best, cell = score[y, x], (x, y)
            x, y = cell
            b = decode_box(make_output(score, off, size), 4)
            assert b.x == (x + off[0, y, x]) * 4 and b.y == (y + off[1, y, x]) * 4
            assert b.w == size[0, y, x] * 4 and b.h == size[1, y, x] * 4

    def test_argmax_invariant_to_rescaling(self, rng):
        score = rng.random((5, 5))
        off, size = rng.random((2, 5, 5)), rng.uniform(0.5, 2, (2, 5, 5))
        a = decode_box(make_output(score, off, size), 8)
        b = decode_box(make_output(score * 0.37, off, size), 8)
        assert (a.x, a.y) == (b.x, b.y)


def focal_oracle(p, t, alpha=2.0, beta=4.0, eps=1e-7):
    total, n_pos = 0.0, 0
    for pv, tv in zip(p.reshape(-1), t.reshape(-1)):
        pv = min(max(pv, eps), 1 - eps)
        if tv == 1.0:
            total -= (1 - pv) ** alpha * np.log(pv)
            n_pos += 1
        else:
            total -= (1 - tv) ** beta * pv ** alpha * np.log(1 - pv)
    return total / max(n_pos, 1)


class TestFocal:
    def test_perfect_prediction(self):
        t = np.zeros((4, 4))
        t[1, 2] = 1.0
        assert float(focal_loss(t.copy(), t).data) < 1e-12

    def test_half_confidence_positive(self):
        val = float(focal_loss(np.array([[0.5]]), np.array([[1.0]])).data)
        assert val == pytest.approx(0.25 * np.log(2), abs=1e-15)

    def test_matches_summation_oracle(self, rng):
        for _ in range(20):
            p = rng.random((4, 4))
            t = gaussian_target([rng.uniform(0, 4), rng.uniform(0, 4), 2.0, 3.0], 4)[0]
            assert abs(float(focal_loss(p, t).data) - focal_oracle(p, t)) < 1e-12

    def test_batched_mean(self, rng):
        p = rng.random((3, 4, 4))
        t = gaussian_target([[1.5, 2.5, 1, 1], [0.2, 0.1, 2, 2], [3.9, 3.9, 1, 3]], 4)
        want = np.mean([focal_oracle(p[i], t[i]) for i in range(3)])
        assert abs(float(focal_loss(p, t).data) - want) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def test_gaussian_target_single_peak():
    t = gaussian_target([2.7, 1.2, 2.0, 2.0], 5)[0]
    assert t[1, 2] == 1.0 and np.sum(t == 1.0) == 1
    assert np.all(t <= 1.0) and np.all(t >= 0.0)


def giou_oracle(a, b):
    pa = shp_box(*BBox(*a).corners())
    pb = shp_box(*BBox(*b).corners())
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    xs = [*pa.bounds[::2], *pb.bounds[::2]]
    ys = [*pa.bounds[1::2], *pb.bounds[1::2]]
    hull = (max(xs) - min(xs)) * (max(ys) - min(ys))
    return inter / union - (hull - union) / hull


class TestGiou:
    def test_identical(self):
        b = BBox(3, 4, 2, 5)
        assert giou_loss(b, b) == 0.0

    def test_touching_corners(self):
        a = BBox.from_xywh(0, 0, 1, 1)
        b = BBox.from_xywh(1, 1, 1, 1)
        assert giou_loss(a, b) == pytest.approx(1.5, abs=1e-15)

    def test_random_pairs_vs_area_oracle(self, rng):
        for _ in range(200):
            a = np.r_[rng.uniform(0, 10, 2), rng.uniform(0.5, 6, 2)]
            b = np.r_[rng.uniform(0, 10, 2), rng.uniform(0.5, 6, 2)]
            assert abs(giou_loss(BBox(*a), BBox(*b)) - (1 - giou_oracle(a, b))) < 1e-12

    def test_symmetric_and_range(self, rng):
        for _ in range(50):
            a = BBox(*rng.uniform(0, 10, 2), *rng.uniform(0.5, 6, 2))
            b = BBox(*rng.uniform(0, 10, 2), *rng.uniform(0.5, 6, 2))
            la, lb = giou_loss(a, b), giou_loss(b, a)
            assert abs(la - lb) < 1e-12 and 0 < la <= 2

    def test_gradient(self, rng):
        p = T.Params()
        p.add("b", np.c_[rng.uniform(0, 4, (5, 2)), rng.uniform(1, 3, (5, 2))])
        gt = np.c_[rng.uniform(0, 4, (5, 2)), rng.uniform(1, 3, (5, 2))]
        assert T.grad_check(lambda q: T.sum(giou(q["b"], gt)), p) < 1e-6


class TestTotalLoss:
    def perfect(self, gt, size=64, grid=8):
        g = gt / size * grid
        xd, yd = int(g[0]), int(g[1])
        score = np.zeros((grid, grid))
        score[yd, xd] = 1.0
        off, sz = np.zeros((2, grid, grid)), np.ones((2, grid, grid))
        off[:, yd, xd] = (g[0] - xd, g[1] - yd)
        sz[:, yd, xd] = g[2:]
        return make_output(score, off, sz)

    def test_perfect_prediction(self):
        gt = np.array([27.0, 35.0, 16.0, 12.0])
        assert float(total_loss(self.perfect(gt), gt, 64).data) < 1e-12

    def test_default_weights(self):
        w = LossWeights()
        assert (w.l1, w.giou) == (5.0, 2.0)

    def test_component_sum_oracle(self, rng):
        for _ in range(20):
            grid, size = 8, 64
            gt = np.r_[rng.uniform(4, 60, 2), rng.uniform(6, 30, 2)]
            score = rng.uniform(0.01, 0.99, (grid, grid))
            off, sz = rng.random((2, grid, grid)), rng.uniform(0.5, 4, (2, grid, grid))
            g = gt / size * grid
            xd, yd = int(g[0]), int(g[1])
            pred = np.array([(xd + off[0, yd, xd]) / grid, (yd + off[1, yd, xd]) / grid,
                             sz[0, yd, xd] / grid, sz[1, yd, xd] / grid])
            gt_n = gt / size
            target = gaussian_target(g, grid)[0]
            want = (focal_oracle(score, target) + 5 * np.mean(np.abs(pred - gt_n))
                    + 2 * (1 - giou_oracle(pred, gt_n)))
            got = float(total_loss(make_output(score, off, sz), gt, size).data)
            assert abs(got - want) < 1e-10

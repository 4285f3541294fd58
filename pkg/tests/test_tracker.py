import numpy as np
import pytest

from aptrack import tensor as T
from aptrack.embed import FramePair
from aptrack.head import BBox
from aptrack.model import init_params
from aptrack.synthgen import SceneSpec, generate_sequence
from aptrack.tracker import (AdamW, box_from_crop, box_to_crop, crop_resize, init,
                             maybe_update_template, run_sequence, sample_batch, track_step, train)


@pytest.fixture
def scene():
    spec = SceneSpec(frames=8, height=48, width=48, target_w=10.0, target_h=8.0, start_x=24.0,
                     start_y=22.0, velocity_x=0.5, velocity_y=0.25, distractors=1)
    return generate_sequence(spec, seed=2)


class TestCrop:
    def test_identity_crop(self, rng):
        img = rng.random((32, 32, 3))
        assert np.max(np.abs(crop_resize(img, 16.0, 16.0, 32.0, 32) - img)) < 1e-12

    def test_outside_filled_with_mean(self, rng):
        img = rng.random((10, 10, 3))
        out = crop_resize(img, -50.0, -50.0, 8.0, 4)
        assert np.allclose(out, img.reshape(-1, 3).mean(axis=0))

    def test_box_mapping_inverse(self, rng):
        for _ in range(50):
            box = np.r_[rng.uniform(0, 100, 2), rng.uniform(2, 30, 2)]
            cx, cy, side = *rng.uniform(0, 100, 2), rng.uniform(10, 80)
            back = box_from_crop(box_to_crop(box, cx, cy, side, 64), cx, cy, side, 64)
            assert np.max(np.abs(back - box)) < 1e-10

    def test_crop_corner_maps_to_origin(self):
        z = box_from_crop(np.array([0.0, 0.0, 1.0, 1.0]), 40.0, 30.0, 20.0, 64)
        assert tuple(z[:2]) == (30.0, 20.0)


def state(tiny_cfg, scene):
    return init(scene.frame(0), BBox(*scene.gt[0]), tiny_cfg, init_params(tiny_cfg, seed=0))


class TestTemplateUpdate:
    @pytest.mark.parametrize("counter", range(8))
    @pytest.mark.parametrize("score", [0.0, 0.5, 0.65, 0.66, 0.99])
    def test_rule_grid(self, tiny_cfg, scene, counter, score):
        from dataclasses import replace
        st = replace(state(tiny_cfg, scene), frames_since_update=counter)
        new = maybe_update_template(st, score, BBox(*scene.gt[1]), scene.frame(1))
        fired = counter + 1 >= 5 and score > 0.65
        assert (new.updates == 1) == fired
        assert new.frames_since_update == (0 if fired else counter + 1)
        assert (new.template_dyn is not st.template_dyn) == fired
        assert new.template_init is st.template_init

    def test_init_templates_identical(self, tiny_cfg, scene):
        st = state(tiny_cfg, scene)
        assert np.array_equal(st.template_init[0], st.template_dyn[0])
        assert np.array_equal(st.template_init[1], st.template_dyn[1])
        assert st.frames_since_update == 0

    def test_init_deterministic(self, tiny_cfg, scene):
        a, b = state(tiny_cfg, scene), state(tiny_cfg, scene)
        assert np.array_equal(a.template_init[0], b.template_init[0])

    def test_box_outside_frame(self, tiny_cfg, scene):
        with pytest.raises(ValueError, match="outside"):
            init(scene.frame(0), BBox(200.0, 10.0, 5.0, 5.0), tiny_cfg, init_params(tiny_cfg))


class TestTrackStep:
    def test_init_template_never_mutated(self, tiny_cfg, scene):
        st = state(tiny_cfg, scene)
        snap = st.template_init[0].copy()
        for i in range(1, len(scene)):
            _, _, st = track_step(st, scene.frame(i))
        assert np.array_equal(st.template_init[0], snap)
        assert not st.template_init[0].flags.writeable

    def test_output_inside_search_region(self, tiny_cfg, scene):
        st = state(tiny_cfg, scene)
        bb, score, st = track_step(st, scene.frame(1))
        cx, cy, side = st.last_crop
        assert 0 <= score <= 1
        assert cx - side / 2 <= bb.x <= cx + side / 2 and cy - side / 2 <= bb.y <= cy + side / 2
        assert bb.w >= 2.0 and bb.h >= 2.0

    def test_duplicate_modality_is_graceful(self, tiny_cfg, scene):
        dup = scene.copy()
        dup.x = dup.rgb.copy()
        boxes = run_sequence(init_params(tiny_cfg, seed=0), tiny_cfg, dup)
        assert len(boxes) == len(scene)
        assert all(np.all(np.isfinite(b.as_array())) for b in boxes)

    def test_first_box_is_ground_truth(self, tiny_cfg, scene):
        boxes = run_sequence(init_params(tiny_cfg, seed=0), tiny_cfg, scene)
        assert np.array_equal(boxes[0].as_array(), scene.gt[0]) and boxes[0].score == 1.0

    def test_record_collects_attention(self, tiny_cfg, scene):
        sink = []
        run_sequence(init_params(tiny_cfg, seed=0), tiny_cfg, scene, attn_sink=sink)
        assert len(sink) == len(scene) - 1
        layer, rec = sink[0][1][0]
        assert layer in tiny_cfg.ami_layers and rec["A"].shape[-1] == tiny_cfg.n_tokens


class TestTraining:
    def test_batch_targets_inside_crop(self, tiny_cfg, scene, rng):
        rgb, xm, gts = sample_batch([scene], tiny_cfg, rng, 6)
        assert rgb[2].shape == (6, 16, 16, 3) and xm[0].shape == (6, 8, 8, 3)
        assert np.all(gts[:, :2] > 0) and np.all(gts[:, :2] < 16)

    def test_zero_steps_leaves_weights(self, tiny_cfg, scene):
        p0 = init_params(tiny_cfg, seed=0)
        before = p0.copy()
        p, trace = train([scene], tiny_cfg, params=p0, steps=0)
        assert trace == []
        assert all(np.array_equal(p[k].data, before[k].data) for k in p)

    def test_same_seed_same_trace(self, tiny_cfg, scene):
        cfg = tiny_cfg.replace(batch=2)
        a = train([scene], cfg, steps=3)
        b = train([scene], cfg, steps=3)
        assert a[1] == b[1]
        assert all(np.array_equal(a[0][k].data, b[0][k].data) for k in a[0])

    def test_loss_decreases_on_repeated_batch(self, tiny_cfg, scene):
        cfg = tiny_cfg.replace(batch=4, lr_rest=3e-3, lr_ami=3e-3, jitter_shift=0.0, jitter_scale=0.0)
        _, trace = train([scene], cfg, steps=40)
        assert np.mean(trace[-5:]) < np.mean(trace[:5])

    def test_non_finite_loss_raises(self, tiny_cfg, scene):
        p = init_params(tiny_cfg, seed=0)
        p["head.cls.b2"].data[:] = np.nan
        with pytest.raises(FloatingPointError, match="epoch 0 batch 0"):
            train([scene], tiny_cfg.replace(batch=2), params=p, steps=1)

    def test_empty_datasets(self, tiny_cfg):
        with pytest.raises(ValueError):
            train([], tiny_cfg)


class TestAdamW:
    def test_decay_only_on_matrices(self):
        p = T.Params()
        p.add("w", np.ones((2, 2)))
        p.add("b", np.ones(2))
        opt = AdamW(p, lambda n: 0.1, weight_decay=0.5)
        opt.step({"w": np.zeros((2, 2)), "b": np.zeros(2)})
        assert np.allclose(p["w"].data, 0.95) and np.array_equal(p["b"].data, np.ones(2))

    def test_first_step_is_sign_times_lr(self):
        p = T.Params()
        p.add("b", np.zeros(3))
        opt = AdamW(p, lambda n: 0.01, weight_decay=0.0)
        opt.step({"b": np.array([2.0, -0.5, 1e-3])})
        assert np.allclose(p["b"].data, [-0.01, 0.01, -0.01], atol=1e-7)

    def test_group_learning_rates(self):
        p = T.Params()
        p.add("encoder.ami2.x", np.zeros(1))
        p.add("encoder.block1.x", np.zeros(1))
        opt = AdamW(p, lambda n: 1e-2 if n.startswith("encoder.ami") else 1e-3, 0.0)
        opt.step({k: np.ones(1) for k in p})
        assert p["encoder.ami2.x"].data[0] == pytest.approx(-1e-2, rel=1e-6)
        assert p["encoder.block1.x"].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_framepair_crop_shapes(tiny_cfg, rng):
    fp = FramePair(rng.random((40, 40, 3)), rng.random((40, 40, 3)))
    st = init(fp, BBox(20.0, 20.0, 6.0, 6.0), tiny_cfg, init_params(tiny_cfg))
    assert st.template_init[0].shape == (8, 8, 3)

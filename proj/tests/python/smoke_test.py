"""Smoke tests for the python bindings."""

import os
import sys
import tempfile

import numpy as np

import evresid


def test_voxelize_single_event():
    events = {
        "width": 8,
        "height": 8,
        "t": np.array([0], dtype=np.int64),
        "x": np.array([3], dtype=np.uint16),
        "y": np.array([4], dtype=np.uint16),
        "p": np.array([1], dtype=np.int8),
    }
    grid = evresid.voxelize(events, 2, 0, 100)
    assert grid.shape == (2, 8, 8)
    assert abs(grid[0, 4, 3] - 1.0) < 1e-12
    assert abs(grid.sum() - 1.0) < 1e-12


def test_event_file_round_trip():
    events, _ = evresid.render_scene(width=32, height=16, blob_count=4, cx=5.0, seed=3)
    assert len(events["t"]) > 0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s.evs")
        evresid.save_events(events, path)
        back = evresid.load_events(path)
        assert np.array_equal(back["t"], events["t"])
        assert np.array_equal(back["x"], events["x"])
        assert np.array_equal(back["p"], events["p"])


def test_render_scene_deterministic():
    a, _ = evresid.render_scene(width=32, height=16, blob_count=4, cx=6.0, seed=11)
    b, _ = evresid.render_scene(width=32, height=16, blob_count=4, cx=6.0, seed=11)
    assert np.array_equal(a["t"], b["t"])
    assert np.array_equal(a["x"], b["x"])


def test_ground_truth_flow():
    _, gt = evresid.render_scene(width=48, height=32, blob_count=5, cx=8.0, cy=0.0, seed=7)
    flow = gt.flow(9000, 54000)
    mask = gt.valid_mask(9000)
    assert flow.shape == (2, 32, 48)
    on = mask > 0.5
    assert on.any()
    assert np.allclose(flow[0][on[0]], 8.0, atol=1e-9)


def test_fwl_identity_is_one():
    events, gt = evresid.render_scene(width=48, height=32, blob_count=6, cx=7.0, seed=9)
    zero = np.zeros((2, 32, 48))
    value = evresid.fwl(events, [(9000, 54000, zero)], "ltr")
    assert abs(value - 1.0) < 1e-12
    gt_flow = gt.flow(9000, 54000)
    assert evresid.fwl(events, [(9000, 54000, gt_flow)], "ltr") > 1.05


def test_forward_backward_constant():
    fwd = np.zeros((2, 8, 10))
    fwd[0] = 2.0
    bwd, mask = evresid.forward_to_backward(fwd)
    assert abs(bwd[0, 4, 6] + 2.0) < 1e-9
    assert mask[0, 4, 6] == 1.0


def test_epe_oracle():
    gt = np.zeros((2, 4, 5))
    est = gt.copy()
    est[0] += 3.0
    est[1] += 4.0
    mask = np.ones((1, 4, 5))
    assert abs(evresid.epe(est, gt, mask) - 5.0) < 1e-12
    assert abs(evresid.out3(est, gt, mask) - 100.0) < 1e-12


def test_regional_noise_shape_and_scale():
    n = evresid.make_regional_noise(24, 32, 6, 5)
    assert n.shape == (2, 24, 32)
    w = evresid.make_white_noise(24, 32, 5)
    assert n.var() < w.var()  # upsampling suppresses variance


def test_model_inference_contract():
    model = evresid.FlowModel(
        n_targets=3, feat_dim=6, hidden_dim=6, context_dim=6, motion_dim=12,
        lookup_radius=2, global_iters=1, refine_iters=2, seed=1,
    )
    events, _ = evresid.render_scene(width=32, height=16, blob_count=4, cx=5.0, seed=13)
    flows = model.infer_htr(events, 9000, 54000, freq=1)
    assert len(flows) == 3
    t, f = flows[-1]
    assert t == 54000
    assert f.shape == (2, 16, 32)
    flows3 = model.infer_htr(events, 9000, 54000, freq=3)
    assert len(flows3) == 9


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok {t.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()

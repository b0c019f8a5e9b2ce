"""Heatmap construction and PPM round trip."""

import numpy as np
import pytest

from causadv import causal, heatmap, model


def small_spec():
    layers = (
        model.Conv(4, 3, 3, stride=1, padding=1), model.Relu(), model.MaxPool(2, 2),
        model.Conv(8, 3, 3, stride=1, padding=1), model.Relu(),
        model.MaxPool(2, 2), model.Flatten(), model.Dense(3), model.Softmax(),
    )
    return model.ModelSpec(layers=layers, last_conv_index=3, num_classes=3,
                           input_shape=(1, 8, 8))


@pytest.fixture(scope="module")
def net():
    spec = small_spec()
    return spec, model.init_weights(spec, seed=0)


def proto_ci(values, label=1):
    return causal.CIVector(values=np.asarray(values, dtype=np.float32),
                           predicted_label=label, base_confidence=1.0)


def test_heatmap_matches_recomputed_weighted_sum(net):
    spec, weights = net
    x = np.random.default_rng(0).random((1, 8, 8), dtype=np.float32)
    values = np.zeros(8, dtype=np.float32)
    values[2], values[5] = 0.4, 0.2
    hm = heatmap.causal_heatmap(spec, weights, x, proto_ci(values), top_n=2,
                                image_id="img")
    assert hm.grid.shape == (8, 8)
    assert hm.grid.min() >= 0.0 and hm.grid.max() <= 1.0
    assert hm.class_label == 1 and hm.source_image_id == "img"
    # independent recomputation
    acts = model.forward(spec, weights, x).last_conv_activations
    raw = 0.4 * acts[2] + 0.2 * acts[5]
    up = np.repeat(np.repeat(raw, 2, axis=0), 2, axis=1)  # 4x4 -> 8x8 nearest
    up = np.maximum(up, 0.0)
    if up.max() > up.min():
        up = (up - up.min()) / (up.max() - up.min())
    np.testing.assert_allclose(hm.grid, up, atol=1e-6)


def test_heatmap_top_n_selects_largest_ci(net):
    spec, weights = net
    x = np.random.default_rng(1).random((1, 8, 8), dtype=np.float32)
    values = np.linspace(0.01, 0.08, 8).astype(np.float32)
    one = heatmap.causal_heatmap(spec, weights, x, proto_ci(values), top_n=1)
    acts = model.forward(spec, weights, x).last_conv_activations
    raw = float(values[7]) * acts[7]  # largest CI filter only
    up = np.repeat(np.repeat(raw, 2, axis=0), 2, axis=1)
    up = np.maximum(up, 0.0)
    if up.max() > up.min():
        up = (up - up.min()) / (up.max() - up.min())
    np.testing.assert_allclose(one.grid, up, atol=1e-6)


def test_heatmap_errors(net):
    spec, weights = net
    x = np.zeros((1, 8, 8), dtype=np.float32)
    with pytest.raises(heatmap.HeatmapError):
        heatmap.causal_heatmap(spec, weights, x, proto_ci(np.zeros(8)), top_n=3)
    with pytest.raises(heatmap.HeatmapError):
        heatmap.causal_heatmap(spec, weights, x, proto_ci(np.ones(8)), top_n=0)


def test_ppm_round_trip(tmp_path):
    grid = np.random.default_rng(2).random((8, 8)).astype(np.float32)
    hm = heatmap.Heatmap(grid=grid, source_image_id="x", class_label=0, top_n=1)
    path = tmp_path / "h.ppm"
    heatmap.export_ppm(path, hm)
    w, h, rgb = heatmap.read_ppm(path)
    assert (w, h) == (8, 8)
    np.testing.assert_array_equal(rgb[:, :, 0], np.round(grid * 255).astype(np.uint8))
    assert (rgb[:, :, 1] == 0).all() and (rgb[:, :, 2] == 0).all()
    # write -> read -> write byte-identical
    first = path.read_bytes()
    heatmap.export_ppm(path, hm)
    assert path.read_bytes() == first


def test_ppm_blend_and_errors(tmp_path):
    grid = np.zeros((4, 4), dtype=np.float32)
    hm = heatmap.Heatmap(grid=grid, source_image_id="x", class_label=0, top_n=1)
    img = np.full((1, 4, 4), 1.0, dtype=np.float32)
    path = tmp_path / "b.ppm"
    heatmap.export_ppm(path, hm, image=img)
    _, _, rgb = heatmap.read_ppm(path)
    assert (rgb[:, :, 1] == 128).all()  # 0.5 * 255 gray blend
    with pytest.raises(heatmap.HeatmapError):
        heatmap.export_ppm(path, hm, image=np.zeros((1, 5, 5)))
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n4 4\n255\nnope")
    with pytest.raises(heatmap.HeatmapError):
        heatmap.read_ppm(bad)
    bad.write_bytes(b"P6\n4 4\n255\nshort")
    with pytest.raises(heatmap.HeatmapError):
        heatmap.read_ppm(bad)

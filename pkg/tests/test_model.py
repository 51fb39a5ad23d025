import numpy as np
import pytest

from rgbdscene.config import Variant, tiny_config
from rgbdscene.errors import ConfigurationError
from rgbdscene.model import Model, pad_input, preprocess
from rgbdscene.tensor import num_threads
from rgbdscene.weights import WeightStore, reference_init


def raw_pair(seed, h, w):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
            rng.integers(400, 6000, (h, w), dtype=np.uint16))


def test_preprocess_values():
    cfg = tiny_config()
    rgb = np.full((2, 2, 3), 255, np.uint8)
    depth = np.full((2, 2), 5000, np.uint16)
    x, d = preprocess(rgb, depth, cfg)
    mean, std = np.array(cfg.preprocess.rgb_mean), np.array(cfg.preprocess.rgb_std)
    assert np.allclose(x[0, 0, 0], (1 - mean) / std, atol=1e-6)
    assert np.allclose(d, (1.0 - 0.55) / 0.35, atol=1e-6)
    assert x.shape == (1, 2, 2, 3) and d.shape == (1, 2, 2, 1)


def test_pad_input():
    assert pad_input(np.zeros((1, 50, 70, 3), np.float32)).shape == (1, 64, 96, 3)


@pytest.mark.parametrize("variant", list(Variant))
def test_predict_shapes_odd_size(tiny_stores, variant):
    cfg, store = tiny_stores[variant]
    model = Model(cfg, store)
    rgb, depth = raw_pair(0, 50, 70)
    pred = model.predict(rgb, depth if variant.uses_depth else None)
    out = pred.outputs
    assert out.semantic_logits.shape == (1, 50, 70, 40)
    assert out.center_heatmap.shape == (1, 50, 70, 1)
    assert out.offsets.shape == out.orientation.shape == (1, 50, 70, 2)
    assert out.scene_logits.shape == (1, cfg.num_scene_classes)
    assert pred.semantic.shape == (50, 70) and pred.semantic.min() >= 1
    assert set(pred.timings) == {"encoder", "context", "decoders", "postprocess", "total"}


def test_depth_required(tiny):
    cfg, store = tiny
    rgb, _ = raw_pair(1, 32, 32)
    with pytest.raises(ConfigurationError):
        Model(cfg, store).predict(rgb, None)


def test_rgb_only_ignores_depth(tiny_stores):
    cfg, store = tiny_stores[Variant.RGB_ONLY]
    m = Model(cfg, store)
    rgb, depth = raw_pair(2, 32, 32)
    a = m.predict(rgb, None).outputs.semantic_logits
    b = m.predict(rgb, depth).outputs.semantic_logits
    assert np.array_equal(a, b)


def test_too_small(tiny):
    cfg, store = tiny
    rgb, depth = raw_pair(3, 16, 40)
    with pytest.raises(ConfigurationError):
        Model(cfg, store).predict(rgb, depth)


@pytest.mark.parametrize("sem,ins", [("segformer", "emsanet"), ("emsanet", "segformer"),
                                     ("emsanet", "emsanet"), ("segformer", "segformer")])
def test_reads_exactly_the_shape_table(sem, ins):
    cfg = tiny_config(Variant.SWINV2_T_MULTI, sem, ins)
    store = WeightStore(dict(reference_init(cfg, 0)))
    store.start_recording()
    Model(cfg, store).predict(*raw_pair(4, 32, 32))
    assert store.stop_recording() == set(store)


def test_threads_bit_identical(tiny):
    cfg, store = tiny
    m = Model(cfg, store)
    rgb, depth = raw_pair(5, 64, 96)
    with num_threads(1):
        a = m.predict(rgb, depth)
    with num_threads(4):
        b = m.predict(rgb, depth)
    for name in ("semantic_logits", "center_heatmap", "offsets", "orientation", "scene_logits"):
        assert np.array_equal(getattr(a.outputs, name), getattr(b.outputs, name))
    assert np.array_equal(a.panoptic.encode(), b.panoptic.encode())

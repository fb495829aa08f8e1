"""The assembled model: reference-frame selection, clip forwarding,
spatial freezing, and initialization determinism."""

import numpy as np
import pytest

from vepe.config import RunConfig
from vepe.model import VepeModel, reference_indices
from vepe.synth import generate_clip
from vepe.tensor import backward, tape
from vepe.train import temporal_losses, total_loss


def tiny_config(**kw):
    base = dict(seed=5, image_size=32, n_queries=8, n_joints=15, d_model=16,
                heads=2, points=2, ffn_width=32, enc_layers=1, dec_layers=1,
                stpe_layers=1, stdme_layers=1, stpd_layers=2, min_keep=3,
                persons=(2, 2), epochs=1, batch_size=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(autouse=True)
def clear_tape():
    yield
    tape().clear()


def test_reference_indices_clamp_at_clip_edges():
    assert reference_indices(0, 3) == [0, 1]
    assert reference_indices(1, 3) == [0, 2]
    assert reference_indices(2, 3) == [1, 2]
    assert reference_indices(0, 2) == [0, 1]
    assert reference_indices(1, 2) == [0, 1]
    assert reference_indices(0, 1) == [0, 0]


def test_forward_clip_runs_spatial_once_per_needed_frame():
    cfg = tiny_config()
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=21)
    res = model.forward_clip(clip.frames, 1, freeze_spatial=True)
    assert res.key_idx == 1
    assert res.ref_indices == [0, 2]
    assert sorted(res.frames) == [0, 1, 2]
    s = len(res.temporal.selected.indices)
    assert cfg.min_keep <= s <= cfg.n_queries
    assert res.temporal.keypoints.shape == (s, 15, 2)


def test_forward_clip_reuses_cache_entries():
    cfg = tiny_config()
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=22)
    cache = {}
    first = model.forward_clip(clip.frames, 0, freeze_spatial=True,
                               cache=cache)
    second = model.forward_clip(clip.frames, 2, freeze_spatial=True,
                                cache=cache)
    assert first.frames[1] is second.frames[1]
    assert sorted(cache) == [0, 1, 2]


def test_forward_clip_rejects_bad_key_index():
    cfg = tiny_config()
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=23)
    for bad in (-1, 3):
        with pytest.raises(ValueError):
            model.forward_clip(clip.frames, bad)


def test_single_frame_clip_collapses_to_keyframe():
    """A one-frame clip at the default window size presents the keyframe as
    both references; a one-frame window drops references entirely."""
    cfg = tiny_config(frames=1)
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=24)
    assert len(clip.frames) == 1
    res = model.forward_clip(clip.frames, 0, freeze_spatial=True)
    assert res.ref_indices == []
    assert len(res.frames) == 1
    assert res.temporal.keypoints.shape[0] >= cfg.min_keep

    cfg3 = tiny_config()
    model3 = VepeModel(cfg3)
    clip3 = generate_clip(cfg3.synth_config(), seed=24)
    res3 = model3.forward_clip(clip3.frames[:1], 0, freeze_spatial=True)
    assert res3.ref_indices == [0, 0]
    assert len(res3.frames) == 1


def test_frozen_spatial_gets_no_gradients():
    cfg = tiny_config()
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=25)
    tape().clear()
    res = model.forward_clip(clip.frames, 1, freeze_spatial=True)
    l_kpt, l_cls, l_ic = temporal_losses(res, clip.annotations, cfg,
                                         np.random.default_rng(0))
    backward(total_loss(l_kpt, l_cls, l_ic))
    params = model.named_parameters()
    spatial_grads = [p.grad for n, p in params.items()
                     if n.startswith("spatial.")]
    temporal_grads = [p.grad for n, p in params.items()
                      if n.startswith("temporal.")]
    assert all(g is None for g in spatial_grads)
    assert any(g is not None and np.any(g != 0) for g in temporal_grads)


def test_unfrozen_spatial_gets_gradients():
    cfg = tiny_config()
    model = VepeModel(cfg)
    clip = generate_clip(cfg.synth_config(), seed=26)
    tape().clear()
    res = model.forward_clip(clip.frames, 1, freeze_spatial=False)
    l_kpt, l_cls, l_ic = temporal_losses(res, clip.annotations, cfg,
                                         np.random.default_rng(0))
    backward(total_loss(l_kpt, l_cls, l_ic))
    params = model.named_parameters()
    spatial_grads = [p.grad for n, p in params.items()
                     if n.startswith("spatial.")]
    assert any(g is not None and np.any(g != 0) for g in spatial_grads)


def test_identical_config_builds_identical_weights():
    cfg = tiny_config()
    a = VepeModel(cfg).named_parameters()
    b = VepeModel(cfg).named_parameters()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = VepeModel(tiny_config(seed=6)).named_parameters()
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)

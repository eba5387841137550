from __future__ import annotations

import numpy as np
import pytest

from vpd.synth import (BOX, CONTEXT_CHANNELS, FREE, GROUND, IGNORE, NUM_CLASSES, PLANE, CorruptionSpec,
                       SceneConfig, argmax_agreement, clean_cost, corrupt_volume, generate_scene)
from vpd.volume import DepthMap, HypothesisPlanes, check_probability_volume, probabilize

CLEAN = CorruptionSpec()


@pytest.fixture(scope="module")
def default_scenes():
    return [generate_scene(SceneConfig(seed=s)) for s in range(32)]


@pytest.mark.parametrize("seed", range(8))
def test_zero_corruption_agrees_everywhere(seed):
    s = generate_scene(SceneConfig(corruption=CLEAN, seed=seed))
    prob = probabilize(s.coarse_cost).data
    idx = s.planes.nearest_index(s.gt_depth.values)
    m = s.gt_depth.mask
    assert np.array_equal(prob[0].argmax(axis=0)[m], idx[m])


def test_same_seed_is_bitwise_identical():
    a, b = generate_scene(SceneConfig(seed=5)), generate_scene(SceneConfig(seed=5))
    assert a.coarse_cost.tobytes() == b.coarse_cost.tobytes()
    assert a.gt_depth.values.tobytes() == b.gt_depth.values.tobytes()
    assert np.array_equal(a.gt_depth.mask, b.gt_depth.mask)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.contexts, b.contexts))
    assert a.semantic_grid.tobytes() == b.semantic_grid.tobytes()
    assert not np.array_equal(a.coarse_cost, generate_scene(SceneConfig(seed=6)).coarse_cost)


def test_default_corruption_agreement_band(default_scenes):
    fracs = [argmax_agreement(s.coarse_cost, s.gt_depth, s.planes) for s in default_scenes]
    assert 0.5 <= np.mean(fracs) <= 0.9
    assert all(0.5 <= f <= 0.9 for f in fracs)


def test_occlusion_covers_about_a_fifth(default_scenes):
    spec = SceneConfig().corruption
    nominal = spec.occlusion_blocks * spec.occlusion_size ** 2 / (32 * 32)
    assert 0.15 <= nominal <= 0.25
    assert np.mean([s.corrupted.mean() for s in default_scenes]) <= nominal + spec.flatten_prob


def test_valid_coverage_and_range(default_scenes):
    for s in default_scenes:
        m = s.gt_depth.mask
        assert m.mean() >= 0.95
        d = s.gt_depth.values[m]
        assert np.all((d > s.planes.d_min) & (d < s.planes.d_max))


def test_sample_shapes(default_scenes):
    s = default_scenes[0]
    assert s.coarse_cost.shape == (1, 16, 32, 32) and s.coarse_cost.dtype == np.float32
    assert [c.shape for c in s.contexts] == [(CONTEXT_CHANNELS, 32 // k, 32 // k) for k in (1, 2, 4)]
    assert s.semantic_grid.shape == (16, 32, 32)
    labels = set(np.unique(s.semantic_grid)) - {IGNORE}
    assert labels <= set(range(NUM_CLASSES)) and FREE in labels and GROUND in labels
    check_probability_volume(probabilize(s.coarse_cost))


def test_empty_spec_is_identity(rng):
    cost = rng.standard_normal((1, 5, 6, 6)).astype(np.float32)
    assert np.array_equal(corrupt_volume(cost, CLEAN, 3), cost)


def test_full_flattening_gives_uniform(rng):
    cost = rng.standard_normal((1, 5, 6, 6)).astype(np.float32)
    out = corrupt_volume(cost, CorruptionSpec(flatten_prob=1.0), 3)
    np.testing.assert_allclose(probabilize(out).data, 0.2, atol=1e-7)


def test_noise_only_has_requested_variance(rng):
    cost = rng.standard_normal((1, 16, 32, 32))
    diff = corrupt_volume(cost, CorruptionSpec(noise_sigma=0.1), 9) - cost
    assert abs(diff.var() / 0.01 - 1) < 0.1
    assert abs(diff.mean()) < 3 * 0.1 / np.sqrt(diff.size)


def test_corruption_is_seeded(rng):
    cost = rng.standard_normal((1, 5, 8, 8))
    spec = CorruptionSpec(2, 3, 0.2, 0.1)
    assert np.array_equal(corrupt_volume(cost, spec, 1), corrupt_volume(cost, spec, 1))
    assert not np.array_equal(corrupt_volume(cost, spec, 1), corrupt_volume(cost, spec, 2))


def test_clean_cost_peaks_at_nearest_plane():
    planes = HypothesisPlanes.uniform(2.0, 10.0, 5)
    gt = DepthMap(np.array([[2.9, 7.2]]))
    cost = clean_cost(gt, planes, 2.0)
    assert list(cost[0].argmax(axis=0)[0]) == [0, 3]


def test_empty_scene_rejected():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(ground=False, walls=0, spheres=0, boxes=0))


def test_only_primitives_still_renders():
    s = generate_scene(SceneConfig(ground=False, walls=1, spheres=0, boxes=1, seed=2))
    assert s.gt_depth.mask.any()
    labels = set(np.unique(s.semantic_grid)) - {IGNORE}
    assert labels <= {FREE, PLANE, BOX}


@pytest.mark.parametrize("kw", [dict(d_min=0.0), dict(d_min=5.0, d_max=4.0), dict(num_planes=1),
                                dict(spheres=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)


@pytest.mark.parametrize("kw", [dict(flatten_prob=1.5), dict(noise_sigma=-0.1), dict(occlusion_size=0)])
def test_corruption_validation(kw):
    with pytest.raises(ValueError):
        CorruptionSpec(**kw)


def test_heavy_noise_breaks_the_contract():
    with pytest.raises(RuntimeError):
        generate_scene(SceneConfig(corruption=CorruptionSpec(noise_sigma=20.0)))


def test_digest_ignores_seed():
    assert SceneConfig(seed=1).digest() == SceneConfig(seed=2).digest() != SceneConfig(height=16).digest()

import collections

import numpy as np
import pytest

from pyeiph.core_model import *
from pyeiph.sampling import *
from pyeiph.synth import FIXTURES


def _grid_cells(n_side, width, height, grade=0, size=20, margin=100):
    xs = np.linspace(margin, width - margin - size, n_side)
    ys = np.linspace(margin, height - margin - size, n_side)
    return [(int(x), int(y), size, size, grade) for x in xs for y in ys]


def test_uniform_single_position():
    meta = SlideMeta("s", 1024, 1024)
    rng = np.random.default_rng(0)
    assert {sample_uniform(meta, SamplerConfig(), rng) for _ in range(20)} == {(0, 0)}


def test_uniform_patch_too_large():
    with pytest.raises(EIPHError):
        sample_uniform(SlideMeta("s", 1000, 2000), SamplerConfig(), np.random.default_rng(0))


def test_single_cell_hit_probability():
    p = single_cell_hit_probability(SlideMeta("s", 35999, 34118), SamplerConfig())
    assert 0.0008 <= p <= 0.00095
    assert p == pytest.approx(1024 ** 2 / ((35999 - 1023) * (34118 - 1023)))
    assert single_cell_hit_probability(SlideMeta("s", 1024, 1024), SamplerConfig()) == 1.0


@pytest.mark.slow
def test_uniform_hit_rate_matches_closed_form():
    cfg = FIXTURES["sparse-rare"]
    meta, (pin,) = cfg.meta, cfg.pinned
    sampler = SamplerConfig()
    rate = uniform_hit_rate(meta, sampler, (pin.cx, pin.cy), 4 * 10 ** 6, np.random.default_rng(1))
    assert 0.0008 <= rate <= 0.00095
    assert rate == pytest.approx(single_cell_hit_probability(meta, sampler), abs=1e-4)


def test_uniform_hit_rate_symmetry():
    meta = SlideMeta("s", 8192, 8192)
    cfg = SamplerConfig()
    a = uniform_hit_rate(meta, cfg, (2000, 3000), 200000, np.random.default_rng(2))
    b = uniform_hit_rate(meta, cfg, (6000, 5000), 200000, np.random.default_rng(3))
    assert a == pytest.approx(b, abs=0.005)


def test_build_clusters(make_set):
    s = make_set([(0, 0, 5, 5, 0), (10, 0, 5, 5, 0), (20, 0, 5, 5, 4)])
    assert build_clusters(s) == {0: (0, 1), 4: (2,)}
    assert build_clusters(make_set([])) == {}


def test_two_stage_single_cell_and_corner(make_set):
    s = make_set([(0, 0, 30, 30, 2)])
    cfg = SamplerConfig()
    rng = np.random.default_rng(0)
    for _ in range(50):
        anchor, origin = sample_two_stage(build_clusters(s), s, cfg, rng)
        assert anchor == 0
        assert origin == (0, 0)


def test_two_stage_patch_holds_anchor(make_set):
    rng = np.random.default_rng(1)
    cells = [(int(x), int(y), 40, 40, int(g)) for x, y, g in zip(
        rng.integers(0, 4056, 200), rng.integers(0, 4056, 200), rng.integers(0, 5, 200)
    )]
    s = make_set(cells)
    cfg = SamplerConfig()
    clusters, by_id = build_clusters(s), s.by_id()
    for _ in range(500):
        anchor, origin = sample_two_stage(clusters, s, cfg, rng, by_id)
        patch = cfg.patch_at(origin)
        assert s.slide.bounds.contains(patch)
        assert patch.contains(by_id[anchor].box)


def test_two_stage_without_cells(make_set):
    with pytest.raises(EIPHError):
        sample_two_stage({}, make_set([]), SamplerConfig(), np.random.default_rng(0))


@pytest.mark.slow
def test_two_stage_balances_rare_grade(make_set):
    cells = _grid_cells(32, 8192, 8192)[:1000] + [(5000, 5000, 20, 20, 4)]
    s = make_set(cells, 8192, 8192)
    clusters, by_id = build_clusters(s), s.by_id()
    rng = np.random.default_rng(7)
    n = 10 ** 5
    rare = sum(sample_two_stage(clusters, s, SamplerConfig(), rng, by_id)[0] == 1000 for _ in range(n))
    assert rare / n == pytest.approx(0.5, abs=0.01)


def test_sibling_probabilities():
    assert np.allclose(sibling_probabilities([0.25, 1.25, 0.25, 0.25], 0.0), [0.125, 0.625, 0.125, 0.125])
    p = sibling_probabilities([0, 0, 0, 0], 0.01)
    assert np.allclose(p, 0.25)
    q = sibling_probabilities([1.0, 0.0, 0.0, 0.0], 0.01)
    assert q.sum() == pytest.approx(1.0)
    assert (q > 0).all()


def _rare_quadrant_set(make_set):
    # 4 grade-0 cells per quadrant of a 4096 slide, a grade-4 cell in NE
    cells = []
    for qx, qy in ((0, 0), (2048, 0), (2048, 2048), (0, 2048)):
        cells += [(qx + 300 + 400 * k, qy + 500, 20, 20, 0) for k in range(4)]
    cells.append((3000, 1000, 20, 20, 4))
    return make_set(cells)


def test_quadtree_hand_example(make_set):
    s = _rare_quadrant_set(make_set)
    tree = build_quadtree(s, SamplerConfig(epsilon=0.0, max_depth=1, min_cells_per_node=1))
    probs = [c.sibling_prob for c in tree.children]
    assert probs == pytest.approx([0.125, 0.625, 0.125, 0.125])
    assert int(np.argmax(probs)) == 1


def test_quadtree_uniform_grade_is_symmetric(make_set):
    s = make_set(_grid_cells(8, 4096, 4096))
    tree = build_quadtree(s, SamplerConfig(epsilon=0.0, max_depth=1, min_cells_per_node=1))
    assert [c.sibling_prob for c in tree.children] == pytest.approx([0.25] * 4)


def test_quadtree_grade_weights_sum_to_one(gradient):
    tree = build_quadtree(gradient.annotations, SamplerConfig(min_cells_per_node=50))
    totals = collections.defaultdict(float)
    for _, leaf in leaves(tree):
        for c in leaf.cells:
            totals[c.grade] += c.weight
    present = {c.grade for c in gradient.annotations.cells}
    assert set(totals) == present
    for g in present:
        assert totals[g] == pytest.approx(1.0, abs=1e-9)


def test_quadtree_min_cells_guard(make_set):
    s = make_set(_grid_cells(4, 4096, 4096))
    tree = build_quadtree(s, SamplerConfig(min_cells_per_node=300))
    assert tree.is_leaf
    assert leaves(tree) == [((), tree)]


def test_quadtree_patch_size_rule(make_set):
    s = make_set(_grid_cells(4, 4096, 4096))
    tree = build_quadtree(s, SamplerConfig(split_rule=SplitRule.PatchSize, max_depth=5))
    sizes = {(leaf.bounds.w, leaf.bounds.h) for _, leaf in leaves(tree)}
    assert sizes == {(1024, 1024)}
    assert len(leaves(tree)) == 16


def test_degenerate_tree_weights_rare_cell(make_set):
    s = make_set([(100 + 50 * k, 100, 20, 20, 0) for k in range(9)] + [(3000, 3000, 20, 20, 4)])
    cfg = SamplerConfig(min_cells_per_node=300)
    tree = build_quadtree(s, cfg)
    rng = np.random.default_rng(0)
    anchors = [sample_quadtree(tree, s.slide, cfg, rng).anchor_id for _ in range(4000)]
    assert sum(a == 9 for a in anchors) / 4000 == pytest.approx(0.5, abs=0.03)


def test_empty_quadrant_gets_sampled(make_set):
    cells = []
    for qx, qy in ((0, 0), (2048, 0), (2048, 2048)):
        cells += [(qx + 300 + 400 * k, qy + 500, 20, 20, 0) for k in range(4)]
    s = make_set(cells)
    cfg = SamplerConfig(epsilon=0.01, max_depth=1, min_cells_per_node=0)
    tree = build_quadtree(s, cfg)
    assert tree.children[3].raw_weight == 0
    assert tree.children[3].sibling_prob > 0
    rng = np.random.default_rng(3)
    draws = [sample_quadtree(tree, s.slide, cfg, rng) for _ in range(5000)]
    empty = [d for d in draws if d.path == (3,)]
    assert 0 < len(empty) < 100
    for d in empty:
        assert d.anchor_id is None
        assert s.slide.bounds.contains(cfg.patch_at(d.origin))


@pytest.mark.slow
def test_leaf_frequencies_match_path_products(gradient):
    cfg = SamplerConfig(min_cells_per_node=100, max_depth=3)
    tree = build_quadtree(gradient.annotations, cfg)
    meta = gradient.annotations.slide
    rng = np.random.default_rng(11)
    n = 10 ** 5
    freq = collections.Counter(sample_quadtree(tree, meta, cfg, rng).path for _ in range(n))
    for path, _ in leaves(tree):
        assert freq[path] / n == pytest.approx(path_probability(tree, path), abs=0.01)


def test_sampling_is_deterministic(mini):
    cfg = SamplerConfig(min_cells_per_node=20)
    for strategy in SamplingStrategy:
        a = draw_patches(mini.annotations, cfg, strategy, 50, np.random.default_rng(5))
        b = draw_patches(mini.annotations, cfg, strategy, 50, np.random.default_rng(5))
        assert a == b


def test_every_patch_in_bounds(mini):
    cfg = SamplerConfig(min_cells_per_node=20)
    by_id = mini.annotations.by_id()
    for strategy in SamplingStrategy:
        for d in draw_patches(mini.annotations, cfg, strategy, 200, np.random.default_rng(6)):
            patch = cfg.patch_at(d.origin)
            assert mini.annotations.slide.bounds.contains(patch)
            if d.anchor_id is not None:
                assert patch.contains(by_id[d.anchor_id].box)


def test_quadtree_balances_grades_better_than_uniform(make_set):
    cells = _grid_cells(20, 8192, 8192)[:390] + [(7000, 600 + 60 * k, 20, 20, 4) for k in range(10)]
    s = make_set(cells, 8192, 8192)
    cfg = SamplerConfig(min_cells_per_node=5)
    uni = sampled_grade_distribution(s, cfg, SamplingStrategy.Uniform, 400, np.random.default_rng(0))
    quad = sampled_grade_distribution(s, cfg, SamplingStrategy.QuadTree, 400, np.random.default_rng(0))
    assert quad[4] > uni[4]
    assert quad.sum() == pytest.approx(1.0)

import filecmp

import numpy as np
import pytest

from pilab import keywords as kw
from pilab.depth import RawDepthMap
from pilab.errors import ConfigError, GenerationSkipped
from pilab.geometry import BBox
from pilab.scene_gen import (DEPTH_EPS, RELATIONS, Scene, SceneConfig, SceneObject, World,
                             caption_from_relation, generate_caption, generate_corpus,
                             generate_scene, load_corpus, render_depth_map, save_corpus)


def make_scene(specs, size=16):
    """Scene from (bbox, z, category, attribute) tuples, rendered at ``size``."""
    objs = [SceneObject(BBox(*b), z, c, a, np.zeros(4)) for b, z, c, a in specs]
    scene = Scene("hand", objs, RawDepthMap(np.ones((1, 1))))
    scene.raw_depth = render_depth_map(scene, size, size)
    return scene


def test_scene_has_requested_objects_inside_unit_square():
    s = generate_scene(SceneConfig(n_objects=36), 7)
    assert s.n_objects == 36
    for o in s.objects:
        b = o.bbox
        assert 0 <= b.x1 < b.x2 <= 1 and 0 <= b.y1 < b.y2 <= 1
        assert 0 < o.depth_plane < 1


def test_generation_is_deterministic():
    cfg = SceneConfig(n_objects=5)
    a, b = generate_scene(cfg, 42), generate_scene(cfg, 42)
    assert np.array_equal(a.raw_depth.values, b.raw_depth.values)
    assert [c.tokens for c in a.captions] == [c.tokens for c in b.captions]
    assert np.array_equal(a.features(), b.features())


def test_full_correlation_ties_category_to_cell():
    cfg = SceneConfig(n_objects=36, pos_category_correlation=1.0)
    s = generate_scene(cfg, 3)
    world = World(cfg)
    by_cell = {}
    for o in s.objects:
        by_cell.setdefault(world.cell_of(*o.bbox.center), set()).add(o.category_id)
    assert all(len(c) == 1 for c in by_cell.values())


def test_zero_correlation_spreads_categories():
    cfg = SceneConfig(n_objects=36, pos_category_correlation=0.0)
    s = generate_scene(cfg, 3)
    world = World(cfg)
    cats = {}
    for o in s.objects:
        cats.setdefault(world.cell_of(*o.bbox.center), set()).add(o.category_id)
    assert max(len(c) for c in cats.values()) > 1


def test_feature_is_embedding_sum_plus_noise():
    cfg = SceneConfig(n_objects=20, feature_noise_std=0.0)
    s = generate_scene(cfg, 1)
    w = World(cfg)
    for o in s.objects:
        np.testing.assert_allclose(o.feature, w.category_emb[o.category_id]
                                   + w.attribute_emb[o.attribute_id])


@pytest.mark.parametrize("bad", [dict(n_objects=0), dict(feature_noise_std=-1.0),
                                 dict(pos_category_correlation=1.5)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        SceneConfig(**bad).validate()


def test_depth_render_examples():
    full = make_scene([((0, 0, 1, 1), 0.3, 0, 0)], size=8)
    np.testing.assert_allclose(full.raw_depth.values, 1 / 0.31, rtol=1e-6)
    empty = make_scene([], size=4)
    np.testing.assert_allclose(empty.raw_depth.values, 1 / (1 + DEPTH_EPS), rtol=1e-6)
    two = make_scene([((0, 0, 0.75, 0.75), 0.6, 0, 0), ((0.25, 0.25, 1, 1), 0.2, 1, 0)], 8)
    assert two.raw_depth.values[3, 3] == pytest.approx(1 / 0.21, rel=1e-6)
    assert two.raw_depth.values[0, 0] == pytest.approx(1 / 0.61, rel=1e-6)


def test_nearer_object_has_larger_raw_value():
    s = generate_scene(SceneConfig(n_objects=6), 9)
    assert (s.raw_depth.values > 0).all()
    from pilab.depth import pixel_mask
    for o in s.objects:
        m = pixel_mask(s.raw_depth.width, s.raw_depth.height, o.bbox)
        assert (s.raw_depth.values[m] >= 1 / (o.depth_plane + DEPTH_EPS) - 1e-3).all()


def test_left_of_caption():
    s = make_scene([((0.1, 0.4, 0.3, 0.6), 0.5, 0, 0), ((0.7, 0.4, 0.9, 0.6), 0.5, 1, 1)])
    cap = caption_from_relation(s, "left", 0, 1)
    assert cap.text == "a red cat left of a blue dog" and cap.truth
    assert cap.pi_keyword_spans == ((3, "X", "left"),)


def test_in_front_caption_tagged_z():
    s = make_scene([((0.1, 0.1, 0.5, 0.5), 0.2, 0, 0), ((0.5, 0.5, 0.9, 0.9), 0.8, 1, 0)])
    cap = caption_from_relation(s, "front", 0, 1)
    assert cap.truth and "front" in cap.tokens
    assert {axis for _, axis, _ in cap.pi_keyword_spans} == {"Z"}


def test_pi_fraction_zero_has_no_keyword():
    s = generate_scene(SceneConfig(n_objects=6), 2)
    for seed in range(200):
        cap = generate_caption(s, seed, pi_fraction=0.0)
        assert not kw.axes_of(cap.text)


def test_generated_captions_agree_with_fresh_oracle():
    corpus = generate_corpus(SceneConfig(n_objects=6), 30, 5)
    n = 0
    for s in corpus.scenes:
        for cap in s.captions:
            assert all(t in kw.KEYWORD_AXIS or t == "far" for _, _, t in cap.pi_keyword_spans)
            if cap.relation is not None:
                fresh = caption_from_relation(s, cap.relation, *cap.referent_pair)
                assert cap.truth and fresh.truth
                n += 1
    assert n > 0


def test_contrastible_only_uses_antonym_list_or_skips():
    corpus = generate_corpus(SceneConfig(n_objects=5), 20, 0)
    for s in corpus.scenes:
        try:
            cap = generate_caption(s, 1, contrastible_only=True)
        except GenerationSkipped:
            continue
        assert kw.is_contrastible(cap.tokens) and RELATIONS[cap.relation][2]
    single = generate_scene(SceneConfig(n_objects=1), 0)
    with pytest.raises(GenerationSkipped):
        generate_caption(single, 0, contrastible_only=True)


def test_corpus_roundtrip_is_byte_identical(tmp_path):
    cfg = SceneConfig(n_objects=3)
    a = save_corpus(generate_corpus(cfg, 6, 7), tmp_path / "a")
    b = save_corpus(generate_corpus(cfg, 6, 7), tmp_path / "b")
    for name in ("manifest.json", "scenes.jsonl", "depth.bin"):
        assert filecmp.cmp(a / name, b / name, shallow=False)
    back = load_corpus(a)
    c = save_corpus(back, tmp_path / "c")
    for name in ("manifest.json", "scenes.jsonl", "depth.bin"):
        assert filecmp.cmp(a / name, c / name, shallow=False)
    assert np.array_equal(back.scenes[0].labels.labels,
                          generate_corpus(cfg, 6, 7).scenes[0].labels.labels)

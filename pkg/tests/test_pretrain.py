from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pilab.data import SceneCache, collate, make_mm_batch, vocab_for
from pilab.errors import ConfigError, SamplingError
from pilab.model import PI_HEAD_PREFIX, HeadOutputs
from pilab.pretrain import (COMPONENTS, LossWeights, PretrainConfig, combine_losses,
                            draw_sample, make_cl_sample, make_cmm_sample, total_loss, train)
from pilab.scene_gen import Caption

S = tuple


def caption(text):
    return Caption(tuple(text.split()))


# ---------------------------------------------------------------- word masking

def test_mask_prob_extremes_and_determinism(small_corpus, tiny_config):
    vocab = vocab_for(small_corpus)
    ids = np.arange(1, 13).reshape(2, 6)
    mask = np.ones((2, 6), bool)
    _, none = make_mm_batch(ids, mask, 0.0, 0, vocab)
    assert (none == -1).all()
    masked, every = make_mm_batch(ids, mask, 1.0, 0, vocab)
    # every word position, never [CLS] (first) or [SEP] (last)
    np.testing.assert_array_equal(every[:, 1:-1], ids[:, 1:-1])
    assert (every[:, [0, -1]] == -1).all() and (masked[:, 1:-1] == vocab.mask_id).all()
    a = make_mm_batch(ids, mask, 0.4, 7, vocab)
    b = make_mm_batch(ids, mask, 0.4, 7, vocab)
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ConfigError):
        make_mm_batch(ids, mask, 1.5, 0, vocab)


def test_mask_rate_matches_probability(small_corpus):
    vocab = vocab_for(small_corpus)
    ids = np.full((200, 50), 5)
    mask = np.ones((200, 50), bool)
    _, t = make_mm_batch(ids, mask, 0.15, 3, vocab)
    n = 200 * 48
    rate = (t >= 0).sum() / n
    assert abs(rate - 0.15) < 4 * np.sqrt(0.15 * 0.85 / n)


# ---------------------------------------------------------------- samplers

def test_forced_swap_takes_caption_from_another_scene(small_corpus, rng):
    scenes = small_corpus.scenes
    for s in scenes[:10]:
        smp = make_cmm_sample(s, s.captions[0], scenes, rng, swap_prob=1.0)
        assert not smp.match and smp.provenance == "cmm_swap"
        assert smp.caption_scene_id != s.scene_id
        assert any(c.tokens == smp.tokens for c in
                   next(o for o in scenes if o.scene_id == smp.caption_scene_id).captions)
    kept = make_cmm_sample(scenes[0], scenes[0].captions[0], scenes, rng, swap_prob=0.0)
    assert kept.match and kept.tokens == scenes[0].captions[0].tokens
    with pytest.raises(SamplingError):
        make_cmm_sample(scenes[0], scenes[0].captions[0], scenes[:1], rng)


def test_swap_fraction_over_ten_thousand_draws(small_corpus):
    rng = np.random.default_rng(99)
    scenes = small_corpus.scenes
    swaps = sum(not make_cmm_sample(scenes[k % 40], scenes[k % 40].captions[0], scenes, rng).match
                for k in range(10_000))
    assert 0.48 <= swaps / 10_000 <= 0.52


def test_antonym_sample_background_to_foreground(small_corpus):
    s = small_corpus.scenes[0]
    cap = caption("a computer screen glowing in the background")
    smp = make_cl_sample(s, cap, np.random.default_rng(0), swap_prob=1.0)
    assert smp.tokens == S("a computer screen glowing in the foreground".split())
    assert not smp.match and smp.provenance == "cl_antonym"


def test_antonym_sample_swaps_every_span(small_corpus):
    s = small_corpus.scenes[0]
    smp = make_cl_sample(s, caption("left of the dog , under the tree"),
                         np.random.default_rng(0), swap_prob=1.0)
    assert " ".join(smp.tokens) == "right of the dog , over the tree"


def test_antonym_sample_ineligible_or_kept(small_corpus):
    s = small_corpus.scenes[0]
    assert make_cl_sample(s, caption("a red cat near a dog"), np.random.default_rng(0)) is None
    kept = make_cl_sample(s, caption("a cat left of a dog"), np.random.default_rng(0),
                          swap_prob=0.0)
    assert kept.match and kept.provenance == "clean"


@given(st.integers(0, 2 ** 32 - 1))
def test_antonym_samples_are_never_matched(small_corpus, seed):
    rng = np.random.default_rng(seed)
    s = small_corpus.scenes[seed % 40]
    smp = make_cl_sample(s, caption("the cup is above the box and behind it"), rng)
    assert smp.match == (smp.provenance == "clean")


# ---------------------------------------------------------------- masked views

def test_masked_views_carry_no_match_label(small_corpus, tiny_config):
    cfg = PretrainConfig(masked_view_prob=0.5, cl=True)
    rng = np.random.default_rng(5)
    scenes = small_corpus.scenes
    samples = [draw_sample(scenes[k % 40], scenes, rng, cfg) for k in range(400)]
    views = [s for s in samples if s.masked_view]
    assert 150 < len(views) < 250
    assert all(v.match and v.provenance == "clean" for v in views)
    batch, t = collate(samples, tiny_config.mode, vocab_for(small_corpus), tiny_config,
                       SceneCache(), rng, mask_prob=0.3, obj_mask_prob=0.3)
    view = np.array([s.masked_view for s in samples])
    assert not t.cmm_mask[view].any() and t.cmm_mask[~view].all()
    # only masked views are corrupted
    assert (t.mlm[~view] == -1).all() and (t.mlm[view] >= 0).any()
    assert not t.feat_mask[~view].any() and t.feat_mask[view].any()
    assert (batch.features[t.feat_mask] == 0).all()
    assert (t.obj[t.feat_mask] >= 0).all() and (t.obj[~t.feat_mask] == -1).all()


# ---------------------------------------------------------------- losses

def test_unit_components_with_pip_sum_to_sixteen():
    ones = {k: 1.0 for k in COMPONENTS}
    manual = sum(getattr(LossWeights.paper(pip=10), k) for k in COMPONENTS)
    assert manual == 16
    assert combine_losses(ones, LossWeights.paper(pip=10)) == 16


def test_repository_weights():
    w = LossWeights.repository()
    assert (w.obj, w.attr, w.feat) == pytest.approx((20 / 3,) * 3)
    assert (w.mlm, w.cmm, w.qa, w.pip) == (1, 1, 1, 0)
    with pytest.raises(ConfigError):
        LossWeights(mlm=-1)
    with pytest.raises(ConfigError):
        LossWeights(**{k: 0.0 for k in COMPONENTS})
    with pytest.raises(ConfigError):
        LossWeights.from_dict({"depth": 1.0})


def _outputs(rng, B=3, T=5, V=7, N=2):
    return HeadOutputs(lang=None, vis=None, pooled=None,
                       mlm_logits=rng.standard_normal((B, T, V)),
                       cmm_logit=rng.standard_normal(B),
                       obj_logits=rng.standard_normal((B, N, 4)),
                       attr_logits=rng.standard_normal((B, N, 3)),
                       feat_pred=rng.standard_normal((B, N, 2)),
                       qa_logits=rng.standard_normal((B, 6)),
                       pi_logits=rng.standard_normal((B, N, N, 9)))


def _targets(rng, B=3, T=5, V=7, N=2):
    from pilab.data import Targets
    return Targets(mlm=np.where(rng.random((B, T)) < 0.5, rng.integers(0, V, (B, T)), -1),
                   match=np.array([1.0, 0.0, 1.0]), cmm_mask=np.ones(B, bool),
                   obj=rng.integers(0, 4, (B, N)), attr=rng.integers(0, 3, (B, N)),
                   feat=rng.standard_normal((B, N, 2)), feat_mask=np.ones((B, N), bool),
                   qa=rng.integers(0, 6, B), pip=rng.random((B, 9, N, N)) < 0.5)


def test_cmm_only_weights_give_cmm_loss(rng):
    out, t = _outputs(rng), _targets(rng)
    w = LossWeights(mlm=0, cmm=1, obj=0, attr=0, feat=0, qa=0)
    total, parts, dout = total_loss(out, t, w)
    assert set(parts) == {"cmm"} and total == parts["cmm"]
    assert set(dout) == {"cmm_logit"}


@given(st.sampled_from(COMPONENTS), st.floats(0.5, 4.0))
def test_loss_scales_linearly_in_each_weight(k, scale):
    r = np.random.default_rng(0)
    out, t = _outputs(r), _targets(r)
    base = LossWeights.paper(pip=1.0)
    bumped = replace(base, **{k: getattr(base, k) * scale})
    t0, parts, d0 = total_loss(out, t, base)
    t1, _, d1 = total_loss(out, t, bumped)
    assert t1 - t0 == pytest.approx((scale - 1) * getattr(base, k) * parts[k], abs=1e-9)


def test_qa_weight_without_targets_rejected(rng):
    out, t = _outputs(rng), _targets(rng)
    t.qa = None
    with pytest.raises(ConfigError):
        total_loss(out, t, LossWeights())


# ---------------------------------------------------------------- training

def test_zero_steps_rejected(small_corpus, tiny_config):
    with pytest.raises(ConfigError):
        train(tiny_config, small_corpus, LossWeights(qa=0), PretrainConfig(steps=0))
    with pytest.raises(ConfigError):
        PretrainConfig.from_dict({"epochs": 3})
    with pytest.raises(ConfigError):
        train(tiny_config, small_corpus, LossWeights(), PretrainConfig(steps=1))


def test_training_is_deterministic(small_corpus, tiny_config):
    cfg = PretrainConfig(steps=3, batch_size=4, seed=7)
    a, ca = train(tiny_config, small_corpus, LossWeights(qa=0), cfg)
    b, cb = train(tiny_config, small_corpus, LossWeights(qa=0), cfg)
    assert ca == cb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert len(ca) == 3 and all(np.isfinite(c["loss"]) for c in ca)


def test_pi_head_frozen_unless_pip_weighted(small_corpus, tiny_config):
    cfg = PretrainConfig(steps=2, batch_size=4)
    from pilab.model import PIModel
    init = PIModel(tiny_config).params
    plain, _ = train(tiny_config, small_corpus, LossWeights(qa=0), cfg)
    pip, curve = train(tiny_config, small_corpus, LossWeights(qa=0, pip=10), cfg)
    head = [k for k in init if k.startswith(PI_HEAD_PREFIX)]
    for k in head:
        np.testing.assert_array_equal(plain.params[k], init[k])
    assert any(not np.array_equal(pip.params[k], init[k]) for k in head)
    assert "pip" in curve[0]


def test_matching_learns_on_a_tiny_corpus(small_corpus, tiny_config):
    cfg = PretrainConfig(steps=250, batch_size=16, lr=3e-3, seed=1)
    _, curve = train(tiny_config, small_corpus, LossWeights(qa=0), cfg)
    early = np.mean([c["cmm"] for c in curve[:20]])
    late = np.mean([c["cmm"] for c in curve[-20:]])
    assert late < early


@pytest.mark.slow
def test_smoke_matching_accuracy_on_two_hundred_scenes():
    from pilab import experiments as ex
    desk = ex.DeskConfig.smoke_preset()
    corpus = ex.make_corpus(desk.scene_config(), desk.n_scenes, 0)
    assert len(corpus.scenes) == 200
    _, curve = ex.pretrain(corpus, "bbox_d", "plain", 0, desk)
    acc = [c["cmm_acc"] for c in curve[-200:] if c["cmm_acc"] is not None]
    assert np.mean(acc) > 0.90

import numpy as np
import pytest

from pilab import keywords as kw
from pilab.contrastive_eval import (antonym_item, build_challenge_set, eval_recall,
                                    load_challenge_set, match_probabilities,
                                    recall_from_predictions, save_challenge_set)
from pilab.errors import ConfigError, DataError
from pilab.model import Checkpoint, PIModel
from pilab.scene_gen import Caption


def test_left_caption_becomes_right():
    it = antonym_item("s0", Caption(tuple("a red cat left of a blue dog".split())))
    assert it.caption.tokens == tuple("a red cat right of a blue dog".split())
    assert not it.ground_truth_match and not it.caption.truth


def test_caption_without_keyword_is_excluded():
    assert antonym_item("s0", Caption(("a", "red", "car"))) is None
    assert antonym_item("s0", Caption(tuple("a cat left of a dog".split()), truth=False)) is None


def test_antonym_items_differ_only_at_keywords(small_corpus):
    items = build_challenge_set(small_corpus, "antonym")
    assert items
    for it in items:
        diff = [k for k, (a, b) in enumerate(zip(it.original_tokens, it.caption.tokens)) if a != b]
        assert diff and all(it.original_tokens[k] in kw.ANTONYMS for k in diff)
        assert tuple(kw.substitute_antonyms(it.caption.tokens)[0]) == it.original_tokens


def test_random_swap_never_keeps_its_own_scene(small_corpus):
    items = build_challenge_set(small_corpus, "random_swap", seed=3)
    assert len(items) == sum(len(s.captions) for s in small_corpus.scenes)
    assert all(it.scene_id != it.source_scene_id for it in items)
    assert items == build_challenge_set(small_corpus, "random_swap", seed=3)


def test_empty_or_unknown_setups_rejected(small_corpus):
    with pytest.raises(ConfigError):
        build_challenge_set(small_corpus, "shuffle")
    lone = small_corpus.subset(small_corpus.scenes[:1])
    with pytest.raises(DataError):
        build_challenge_set(lone, "random_swap")
    with pytest.raises(DataError):
        recall_from_predictions(np.array([], bool))


def test_recall_arithmetic():
    assert recall_from_predictions(np.zeros(7, bool)).recall == 1.0
    assert recall_from_predictions(np.ones(7, bool)).recall == 0.0
    r = recall_from_predictions(np.array([False, False, True, False]))
    assert (r.recall, r.tp, r.fn, r.fp, r.tn) == (0.75, 3, 1, 0, 0)


def _biased(tiny_config, bias):
    m = PIModel(tiny_config)
    m.params["cmm_head.out.weight"][:] = 0
    m.params["cmm_head.out.bias"][:] = bias
    return Checkpoint.from_model(m)


def test_constant_models_and_threshold(tiny_config, small_corpus):
    items = build_challenge_set(small_corpus, "random_swap")
    assert eval_recall(_biased(tiny_config, -3.0), items, small_corpus).recall == 1.0
    res = eval_recall(_biased(tiny_config, 3.0), items, small_corpus)
    assert res.recall == 0.0 and res.fp == res.tn == 0
    # P = 0.5 exactly is not a match
    assert eval_recall(_biased(tiny_config, 0.0), items, small_corpus).recall == 1.0
    p = match_probabilities(_biased(tiny_config, np.log(3)), items[:4], small_corpus)
    np.testing.assert_allclose(p, 0.75, rtol=1e-6)


def test_same_rule_for_both_setups(tiny_config, small_corpus):
    ckpt = Checkpoint.from_model(PIModel(tiny_config))
    items = build_challenge_set(small_corpus, "antonym")
    probs = match_probabilities(ckpt, items, small_corpus)
    assert eval_recall(ckpt, items, small_corpus).recall == pytest.approx((probs <= 0.5).mean())


def test_unknown_scene_rejected(tiny_config, small_corpus):
    items = build_challenge_set(small_corpus, "antonym")
    other = small_corpus.subset(small_corpus.scenes[:1])
    with pytest.raises(DataError):
        eval_recall(Checkpoint.from_model(PIModel(tiny_config)), items, other)


def test_challenge_set_roundtrip(tmp_path, small_corpus):
    items = build_challenge_set(small_corpus, "antonym")
    assert load_challenge_set(save_challenge_set(items, tmp_path / "c.jsonl")) == items

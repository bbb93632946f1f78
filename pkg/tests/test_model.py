import numpy as np
import pytest

from pilab.errors import ConfigError, FormatError, ShapeError, StateError
from pilab.model import (Batch, Checkpoint, ModelConfig, PIModel, checkpoint_bytes,
                         load_checkpoint, parse_checkpoint, save_checkpoint)

OUT_FIELDS = ("mlm_logits", "cmm_logit", "qa_logits", "obj_logits", "attr_logits", "feat_pred",
              "pi_logits")


def tiny(**kw):
    base = dict(hidden=8, lang_layers=1, vis_layers=1, cross_layers=1, heads=2, vocab_size=20,
                max_text_len=6, n_objects=3, feature_dim=5, n_categories=4, n_attributes=3,
                n_answers=5, pi_mode="bbox_d", dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg, rng, B=2):
    tok = rng.integers(0, cfg.vocab_size, (B, cfg.max_text_len))
    mask = np.ones((B, cfg.max_text_len), bool)
    mask[1, 4:] = False
    return Batch(tok, mask, rng.standard_normal((B, cfg.n_objects, cfg.feature_dim)),
                 rng.random((B, cfg.n_objects, cfg.mode.dim)))


def weighted_loss(out, W):
    return sum(float((getattr(out, k) * w).sum()) for k, w in W.items())


def test_gradients_match_central_differences():
    cfg = tiny()
    m = PIModel(cfg)
    rng = np.random.default_rng(0)
    batch = random_batch(cfg, rng)
    drop = 5
    out = m.forward(batch, train=True, rng=np.random.default_rng(drop))
    W = {k: rng.standard_normal(getattr(out, k).shape) for k in OUT_FIELDS}
    G = m.backward(W)
    key_biases = [n for n in m.params if n.endswith("key.bias")]
    # softmax is shift invariant, so key biases receive exactly no gradient
    for n in key_biases:
        assert np.abs(G[n]).max() < 1e-12
    names = sorted(n for n in m.params if n not in key_biases)
    picks = [(names[k % len(names)], None) for k in range(240)]
    errors = []
    h = 1e-5
    for name, _ in picks:
        p = m.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = weighted_loss(m.forward(batch, True, np.random.default_rng(drop)), W)
        p[idx] = old - h
        down = weighted_loss(m.forward(batch, True, np.random.default_rng(drop)), W)
        p[idx] = old
        m._record = None
        fd, an = (up - down) / (2 * h), G[name][idx]
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert len(errors) >= 200
    assert max(errors) < 1e-4


def test_pi_head_gradient_first_dense():
    cfg = tiny()
    m = PIModel(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2 * cfg.hidden))
    w = rng.standard_normal((4, 9))
    m.pi_head_forward(x)
    G = m.pi_head_backward(w)
    name = "pi_head.dense.weight"
    assert name in G
    P = m.params[name]
    for _ in range(20):
        idx = tuple(int(rng.integers(s)) for s in P.shape)
        old = P[idx]
        P[idx] = old + 1e-4
        up = float((m.pi_head_forward(x) * w).sum())
        P[idx] = old - 1e-4
        down = float((m.pi_head_forward(x) * w).sum())
        P[idx] = old
        m.heads["pi"].reset()
        fd = (up - down) / 2e-4
        assert abs(fd - G[name][idx]) <= 1e-4 * max(abs(fd), 1e-3)


def test_pi_head_zero_final_weights_return_bias():
    cfg = tiny()
    m = PIModel(cfg)
    m.params["pi_head.out.weight"][:] = 0
    m.params["pi_head.out.bias"][:] = np.arange(9)
    out = m.pi_head_forward(np.random.default_rng(0).standard_normal((3, 2 * cfg.hidden)))
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(9.0), (3, 9)))
    with pytest.raises(ShapeError):
        m.pi_head_forward(np.zeros((1, cfg.hidden)))


def test_eval_mode_is_deterministic_and_finite():
    cfg = tiny(dtype="float32")
    m = PIModel(cfg)
    batch = random_batch(cfg, np.random.default_rng(1))
    a, b = m.forward(batch), m.forward(batch)
    for k in OUT_FIELDS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert np.isfinite(a.cmm_logit).all()
    with pytest.raises(StateError):
        m.forward(batch, train=True)


def test_training_dropout_is_seeded():
    cfg = tiny(dropout_p=0.5)
    m = PIModel(cfg)
    batch = random_batch(cfg, np.random.default_rng(1))
    a = m.forward(batch, True, np.random.default_rng(3)).pi_logits
    b = m.forward(batch, True, np.random.default_rng(3)).pi_logits
    c = m.forward(batch, True, np.random.default_rng(4)).pi_logits
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_visual_stream_is_permutation_equivariant():
    cfg = tiny(n_objects=5)
    m = PIModel(cfg)
    batch = random_batch(cfg, np.random.default_rng(3))
    perm = np.array([3, 0, 4, 1, 2])
    moved = Batch(batch.tokens, batch.text_mask, batch.features[:, perm], batch.pi[:, perm])
    a, b = m.forward(batch), m.forward(moved)
    np.testing.assert_allclose(b.vis, a.vis[:, perm], atol=1e-10)
    np.testing.assert_allclose(b.cmm_logit, a.cmm_logit, atol=1e-10)
    np.testing.assert_allclose(b.pi_logits, a.pi_logits[:, perm][:, :, perm], atol=1e-10)


def test_masking_token_only_changes_its_position_with_attention_ablated():
    cfg = tiny(lang_layers=1, cross_layers=1)
    m = PIModel(cfg)
    # diagnostic: zero every attention output projection so each position
    # only sees itself through the residual path
    for name in m.params:
        if ".att.out." in name:
            m.params[name][:] = 0
    batch = random_batch(cfg, np.random.default_rng(4))
    tokens = batch.tokens.copy()
    tokens[0, 2] = 3
    a = m.forward(batch).mlm_logits
    b = m.forward(Batch(tokens, batch.text_mask, batch.features, batch.pi)).mlm_logits
    changed = ~np.isclose(a, b).all(axis=-1)
    assert changed[0, 2] and changed.sum() == 1


def test_backward_requires_forward_and_frozen_branch_gets_zero():
    cfg = tiny()
    m = PIModel(cfg)
    with pytest.raises(StateError):
        m.backward({})
    m.forward(random_batch(cfg, np.random.default_rng(0)), heads=("cmm",))
    G = m.backward({"cmm_logit": np.ones(2)})
    for head in ("mlm_head", "qa_head", "pi_head", "obj_head"):
        assert all(not G[k].any() for k in G if k.startswith(head))


def test_gradient_linear_in_output_weight():
    cfg = tiny()
    m = PIModel(cfg)
    batch = random_batch(cfg, np.random.default_rng(0))
    g = np.random.default_rng(1).standard_normal(2)
    m.forward(batch)
    G1 = m.backward({"cmm_logit": g})
    m.forward(batch)
    G2 = m.backward({"cmm_logit": 2 * g})
    for k in G1:
        np.testing.assert_allclose(G2[k], 2 * G1[k], rtol=1e-12, atol=1e-15)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny(dtype="float32")
    m = PIModel(cfg)
    batch = random_batch(cfg, np.random.default_rng(0))
    ckpt = Checkpoint.from_model(m, step=3, meta={"note": "x"})
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.step == 3 and back.meta == {"note": "x"}
    for k in OUT_FIELDS:
        np.testing.assert_array_equal(getattr(back.model().forward(batch), k),
                                      getattr(m.forward(batch), k))
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = tiny(dtype="float32")
    data = checkpoint_bytes(Checkpoint.from_model(PIModel(cfg)))
    with pytest.raises(FormatError):
        parse_checkpoint(data, tiny(dtype="float32", hidden=16))
    for cut in (5, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError) as err:
            parse_checkpoint(data[:cut])
        assert err.value.offset is not None
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    with pytest.raises(FormatError):
        parse_checkpoint(bytes(flipped))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_config_validation():
    for bad in (dict(hidden=10, heads=4), dict(lang_layers=0), dict(dropout_p=1.0),
                dict(dtype="float16"), dict(pi_mode="xyz")):
        with pytest.raises((ConfigError, ValueError)):
            tiny(**bad).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"hidden": 8, "width": 3})

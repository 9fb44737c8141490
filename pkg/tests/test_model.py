import numpy as np
import pytest

from conftest import numeric_grad, rel_err, tiny_config
from lencap import tensor as tc
from lencap.data import BOS, MASK, VOCAB, collate_regions
from lencap.levels import plan_4_level, plan_5_level
from lencap.model import (CheckpointError, ModelConfig, attention_mask, embed_regions, embed_tokens, forward_ar,
                          forward_nar, init_params, load_checkpoint, no_decay, param_shapes, save_checkpoint)


def dyadic(rng, shape):
    # multiples of 1/8 in [-4, 4]: sums of three stay exact in float32
    return rng.integers(-32, 33, size=shape).astype(np.float32) / 8


def test_zeroed_tables_give_level_row():
    p = init_params(tiny_config(), seed=0)
    p["word_table"].data[:] = 0
    p["position_table"].data[:] = 0
    tokens = np.random.default_rng(0).integers(0, 48, size=(3, 14))
    for lvl in range(1, 5):
        out = embed_tokens(p, tokens, np.full(3, lvl)).data
        assert np.array_equal(out, np.broadcast_to(p["level_table"].data[lvl - 1], out.shape))


@pytest.mark.parametrize("l1,l2", [(1, 2), (1, 4), (3, 2)])
def test_level_swap_is_a_constant_shift(l1, l2):
    rng = np.random.default_rng(l1 * 10 + l2)
    p = init_params(tiny_config(), seed=1)
    for name in ("word_table", "position_table", "level_table"):
        p[name].data[:] = dyadic(rng, p[name].shape)
    tokens = rng.integers(0, 48, size=(2, 25))
    a = embed_tokens(p, tokens, np.full(2, l1)).data
    b = embed_tokens(p, tokens, np.full(2, l2)).data
    shift = p["level_table"].data[l2 - 1] - p["level_table"].data[l1 - 1]
    assert np.array_equal(b - a, np.broadcast_to(shift, a.shape))


def test_level_swap_shift_with_random_tables():
    p = init_params(tiny_config(), seed=2)
    tokens = np.random.default_rng(1).integers(0, 48, size=(2, 9))
    diff = embed_tokens(p, tokens, [2, 2]).data - embed_tokens(p, tokens, [1, 1]).data
    shift = p["level_table"].data[1] - p["level_table"].data[0]
    assert np.allclose(diff, shift, atol=1e-7)


def test_token_change_shifts_by_word_difference():
    p = init_params(tiny_config(), seed=4)
    s = np.array([[5, 6, 7, 8]])
    s2 = s.copy()
    s2[0, 2] = 20
    d = embed_tokens(p, s2, [1]).data - embed_tokens(p, s, [1]).data
    expect = p["word_table"].data[20] - p["word_table"].data[7]
    assert np.allclose(d[0, 2], expect, atol=1e-7)
    assert np.all(d[0, [0, 1, 3]] == 0)


def test_embed_tokens_errors():
    p = init_params(tiny_config(max_positions=10), seed=0)
    with pytest.raises(ValueError):
        embed_tokens(p, np.zeros((1, 11), dtype=int), [1])
    with pytest.raises(IndexError):
        embed_tokens(p, np.zeros((1, 3), dtype=int), [5])
    with pytest.raises(IndexError):
        embed_tokens(p, np.full((1, 3), 48), [1])


def test_zero_projections_give_segment_vector(small_corpus):
    p = init_params(tiny_config(), seed=0)
    p["region_proj"].data[:] = 0
    p["geom_class_proj"].data[:] = 0
    app, cls, geo, _ = collate_regions(small_corpus.scenes[:2])
    out = embed_regions(p, app, cls, geo).data
    assert np.array_equal(out, np.broadcast_to(p["segment_img"].data, out.shape))


def test_identical_regions_identical_embeddings(small_corpus):
    p = init_params(tiny_config(), seed=0)
    s = small_corpus.scenes[0]
    app = np.stack([s.appearance[0]] * 3)[None]
    cls = np.stack([s.class_probs[0]] * 3)[None]
    geo = np.stack([s.geometry[0]] * 3)[None]
    out = embed_regions(p, app, cls, geo).data[0]
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_region_projection_gradient(small_corpus, f64):
    p = init_params(tiny_config(), seed=0, dtype=np.float64)
    app, cls, geo, _ = collate_regions(small_corpus.scenes[:1])
    R = np.random.default_rng(0).standard_normal((1, 8, 16))

    def f():
        with tc.no_grad():
            return float(np.sum(embed_regions(p, app, cls, geo).data * R))

    p.zero_grad()
    tc.backward(tc.sum_all(tc.mul(embed_regions(p, app, cls, geo), tc.Tensor(R))))
    assert rel_err(p["region_proj"].grad, numeric_grad(f, p["region_proj"].data)) < 1e-6


def test_region_dimension_mismatch():
    p = init_params(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        embed_regions(p, np.zeros((1, 2, 10)), np.zeros((1, 2, 16)), np.zeros((1, 2, 5)))


def test_level_table_has_one_row_per_level():
    assert param_shapes(tiny_config(num_levels=5))["level_table"] == (5, 16)
    assert param_shapes(ModelConfig(vocab_size=48, num_levels=1))["level_table"] == (1, 128)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=48, num_levels=4, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"vocab_size": 48, "num_levels": 4, "depth": 3})


def test_no_decay_names():
    assert no_decay("blocks.0.ln1.gain") and no_decay("blocks.1.attn.bq") and no_decay("classifier.bias")
    assert not no_decay("blocks.0.attn.wq") and not no_decay("word_table")


@pytest.mark.parametrize("L", [9, 14, 25])
def test_nar_logit_shape(small_corpus, L):
    p = init_params(tiny_config(), seed=0)
    scenes = small_corpus.scenes[:3]
    out = forward_nar(p, collate_regions(scenes), np.full((3, L), MASK), [1, 2, 3])
    assert out.shape == (3, L, 48)


def test_region_permutation_invariance(small_corpus):
    p = init_params(tiny_config(), seed=6)
    s = next(s for s in small_corpus.scenes if s.num_regions >= 3)
    regions = collate_regions([s])
    perm = np.random.default_rng(0).permutation(s.num_regions)
    full = np.concatenate([perm, np.arange(s.num_regions, 8)])
    permuted = tuple(r[:, full] for r in regions)
    tokens = np.random.default_rng(1).integers(3, 48, size=(1, 12))
    for fwd in (forward_nar, forward_ar):
        a = fwd(p, regions, tokens, [2]).data
        b = fwd(p, permuted, tokens, [2]).data
        assert np.allclose(a, b, atol=1e-5)


def test_absent_regions_are_ignored(small_corpus):
    p = init_params(tiny_config(), seed=6)
    s = small_corpus.scenes[0]
    app, cls, geo, present = collate_regions([s])
    noisy = [a.copy() for a in (app, cls, geo)]
    for a in noisy:
        a[~present] = 7.0
    tokens = np.full((1, 9), MASK)
    a = forward_nar(p, (app, cls, geo, present), tokens, [1]).data
    b = forward_nar(p, (*noisy, present), tokens, [1]).data
    assert np.array_equal(a, b)


def test_nar_is_bidirectional(small_corpus):
    p = init_params(tiny_config(), seed=6)
    regions = collate_regions(small_corpus.scenes[:1])
    tokens = np.random.default_rng(2).integers(3, 48, size=(1, 10))
    t2 = tokens.copy()
    t2[0, 7] = (t2[0, 7] + 1 - 3) % 45 + 3
    a = forward_nar(p, regions, tokens, [2]).data
    b = forward_nar(p, regions, t2, [2]).data
    assert not np.allclose(a[0, :7], b[0, :7])


def test_ar_is_causal(small_corpus):
    p = init_params(tiny_config(), seed=6)
    regions = collate_regions(small_corpus.scenes[:1])
    rng = np.random.default_rng(3)
    tokens = rng.integers(3, 48, size=(1, 12))
    base = forward_ar(p, regions, tokens, [3]).data
    for j in range(1, 12):
        t2 = tokens.copy()
        t2[0, j:] = rng.integers(3, 48, size=12 - j)
        out = forward_ar(p, regions, t2, [3]).data
        assert np.array_equal(out[0, :j], base[0, :j])


def test_bos_only_gives_distribution(small_corpus):
    p = init_params(tiny_config(), seed=6)
    out = forward_ar(p, collate_regions(small_corpus.scenes[:2]), np.full((2, 1), BOS), [1, 4]).data
    assert out.shape == (2, 1, 48) and np.all(np.isfinite(out))


def test_level_reaches_both_decoders(small_corpus):
    p = init_params(tiny_config(), seed=6)
    regions = collate_regions(small_corpus.scenes[:1])
    tokens = np.full((1, 5), MASK)
    for fwd in (forward_nar, forward_ar):
        assert not np.allclose(fwd(p, regions, tokens, [1]).data, fwd(p, regions, tokens, [4]).data)


def test_attention_mask_structure():
    present = np.array([[True, False, True]])
    nar = attention_mask(present, 2, causal=False, dtype=np.float32)[0, 0]
    assert np.all(nar[:, 1] < -1e8) and np.all(nar[:, [0, 2, 3, 4]] == 0)
    ar = attention_mask(present, 3, causal=True, dtype=np.float32)[0, 0]
    # regions never see text
    assert np.all(ar[:3, 3:] < -1e8)
    # text position 1 sees regions 0, 2 and text 0..1
    assert np.array_equal(ar[4] == 0, np.array([True, False, True, True, True, False]))


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(tiny_config(), seed=9)
    save_checkpoint(tmp_path / "m.bin", p, plan_4_level(), VOCAB, "masked", {"note": 1})
    q, plan, header = load_checkpoint(tmp_path / "m.bin", VOCAB)
    assert plan == plan_4_level() and header["objective"] == "masked" and header["meta"] == {"note": 1}
    for (n1, a), (n2, b) in zip(p.items(), q.items()):
        assert n1 == n2 and np.array_equal(a.data, b.data)


def test_checkpoint_rejects_mismatch(tmp_path):
    p = init_params(tiny_config(), seed=9)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.bin", p, plan_5_level(), VOCAB, "masked")
    save_checkpoint(tmp_path / "m.bin", p, plan_4_level(), VOCAB, "masked")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "g.bin").write_bytes(b"garbage\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g.bin")

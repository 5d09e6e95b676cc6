import math

import numpy as np
import pytest

from avar.attn_core import TokenSegmentation, validate_attention
from avar.env import END, GroundedLookupEnv
from avar.errors import BadMagic, LengthMismatch, SequenceTooLong, StaleTrace, SymbolOutOfRange
from avar.gradcheck import check, small_config
from avar.model import (
    ModelConfig,
    Params,
    backward,
    decode,
    finite_diff_grad,
    forward,
    init_params,
    lm_loss,
    lm_loss_grad,
    log_softmax,
    param_count,
    param_shapes,
    read_checkpoint,
    sgd_step,
    write_checkpoint,
)

ENV = GroundedLookupEnv(0)
SEG = ENV.segmentation()


def batch(n=4, start=0):
    eps = ENV.batch(start, n)
    tokens = np.stack([np.concatenate([e.prompt, e.target]) for e in eps])
    return tokens, np.stack([e.target for e in eps])


def test_init_deterministic():
    cfg = ModelConfig()
    a, b = init_params(cfg), init_params(cfg)
    assert a.fingerprint() == b.fingerprint()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    c = init_params(cfg, seed=1)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_param_count_closed_form():
    cfg = ModelConfig()
    d, V, I, P, L = cfg.d_model, cfg.vocab_size, cfg.image_vocab_size, cfg.max_seq_len, cfg.n_layers
    expected = V * d + I * d + P * d + L * (4 * d * d + 2 * d * 2 * d) + d * V
    assert param_count(cfg) == expected == 19264
    assert init_params(cfg).flat().size == expected
    assert [n for n, _ in param_shapes(cfg)][:3] == ["tok_emb", "img_emb", "pos_emb"]


def test_init_bounds():
    cfg = ModelConfig()
    flat = init_params(cfg).flat()
    assert np.abs(flat).max() <= 1 / math.sqrt(cfg.d_model)


def test_forward_attention_valid_and_deterministic():
    p = init_params(ModelConfig())
    tokens, _ = batch()
    t1, t2 = forward(p, tokens, SEG), forward(p, tokens, SEG)
    for b in range(tokens.shape[0]):
        validate_attention(t1.attention(b), row_tol=1e-12)
    np.testing.assert_array_equal(t1.logits, t2.logits)
    np.testing.assert_array_equal(t1.attn, t2.attn)


def test_tied_image_symbols_give_identical_logits():
    p = init_params(ModelConfig())
    tokens, _ = batch(1)
    a, b = tokens[0, 4], tokens[0, 5]
    p["img_emb"][b] = p["img_emb"][a]
    swapped = tokens.copy()
    swapped[0, 4], swapped[0, 5] = b, a
    np.testing.assert_array_equal(forward(p, tokens, SEG).logits, forward(p, swapped, SEG).logits)


def test_forward_input_checks():
    p = init_params(ModelConfig())
    tokens, _ = batch(1)
    bad = tokens.copy()
    bad[0, 0] = 99
    with pytest.raises(SymbolOutOfRange):
        forward(p, bad, SEG)
    bad = tokens.copy()
    bad[0, 4] = 36
    with pytest.raises(SymbolOutOfRange):
        forward(p, bad, SEG)
    long = np.zeros((1, 17), dtype=int)
    with pytest.raises(SequenceTooLong):
        forward(p, long, TokenSegmentation(17, (0, 4), ((4, 8),), ((8, 10),), (10, 17)))


def test_uniform_logits_loss_is_log_vocab():
    cfg = ModelConfig(vocab_size=8, image_vocab_size=36)
    p = init_params(cfg)
    p["out"][:] = 0.0
    tokens, targets = batch(3)
    tokens = np.where(np.isin(np.arange(13), SEG.image), tokens, tokens % 8)
    tr = forward(p, tokens, SEG)
    assert lm_loss(tr, targets % 8) == pytest.approx(math.log(8), abs=1e-12)


def test_confident_correct_logits_loss_near_zero():
    p = init_params(ModelConfig())
    tokens, targets = batch(2)
    tr = forward(p, tokens, SEG)
    tr.logits = np.zeros_like(tr.logits)
    for b in range(2):
        for j, pos in enumerate(range(9, 12)):
            tr.logits[b, pos, targets[b, j]] = 20.0
    assert lm_loss(tr, targets) < 1e-3


def test_lm_loss_matches_summation_oracle():
    p = init_params(ModelConfig(), seed=3)
    tokens, targets = batch(3)
    tr = forward(p, tokens, SEG)
    total, n = 0.0, 0
    for b in range(3):
        for j in range(3):
            z = tr.logits[b, 9 + j]
            m = max(z)
            lse = m + math.log(sum(math.exp(v - m) for v in z))
            total += lse - z[targets[b, j]]
            n += 1
    assert lm_loss(tr, targets) == pytest.approx(total / n, abs=1e-10)


def test_lm_loss_mask():
    p = init_params(ModelConfig())
    tokens, targets = batch(2)
    tr = forward(p, tokens, SEG)
    mask = np.array([[1, 0, 0], [1, 0, 0]])
    logp = log_softmax(tr.logits[:, 9])
    expect = -(logp[0, targets[0, 0]] + logp[1, targets[1, 0]]) / 2
    assert lm_loss(tr, targets, mask) == pytest.approx(expect, abs=1e-12)


def test_zero_upstream_zero_grads():
    p = init_params(ModelConfig())
    tokens, _ = batch(2)
    tr = forward(p, tokens, SEG)
    g = backward(tr, np.zeros_like(tr.logits), np.zeros_like(tr.attn))
    assert not g.flat().any()
    assert not backward(tr).flat().any()


def test_stale_trace_rejected():
    p = init_params(ModelConfig())
    tokens, targets = batch(2)
    tr = forward(p, tokens, SEG)
    p["out"][0, 0] += 1.0
    with pytest.raises(StaleTrace):
        backward(tr, lm_loss_grad(tr, targets))


@pytest.mark.parametrize("which", ["lm", "total"])
def test_gradients_match_finite_differences(which):
    assert check(0, which) <= 1e-4


def test_small_config_is_small():
    assert param_count(small_config(ENV, 0)) <= 5000


def test_finite_diff_quadratic_and_linear():
    cfg = ModelConfig(vocab_size=3, image_vocab_size=2, d_model=2, n_layers=1, n_heads=1, max_seq_len=2)
    p = init_params(cfg)
    g = finite_diff_grad(lambda q: 0.5 * float(q.flat() @ q.flat()), p, 1e-5)
    np.testing.assert_allclose(g.flat(), p.flat(), atol=1e-9)
    c = np.random.default_rng(0).standard_normal(p.flat().size)
    g = finite_diff_grad(lambda q: float(c @ q.flat()), p, 1e-5)
    np.testing.assert_allclose(g.flat(), c, atol=1e-9)


def test_sgd_fixtures():
    cfg = ModelConfig(vocab_size=3, image_vocab_size=2, d_model=2, n_layers=1, n_heads=1, max_seq_len=2)
    p = init_params(cfg)
    zero = p.zeros_like()
    same = sgd_step(p, zero, 0.1)
    for k in p:
        np.testing.assert_array_equal(same[k], p[k])
    ones = Params(cfg, {k: np.ones_like(v) for k, v in p.items()})
    stepped = sgd_step(zero, ones, 1.0)
    assert np.all(stepped.flat() == -1.0)
    g = Params(cfg, {k: np.full_like(v, 0.37) for k, v in p.items()})
    half = sgd_step(sgd_step(p, g, 0.25), g, 0.25)
    full = sgd_step(p, g, 0.5)
    np.testing.assert_allclose(half.flat(), full.flat(), atol=1e-15)


def test_decode_contract():
    p = init_params(ModelConfig())
    eps = ENV.batch(0, 5)
    prompts = np.stack([e.prompt for e in eps])
    pseg = TokenSegmentation(10, (0, 4), ((4, 8),), ((8, 10),), (10, 10))
    out, lengths = decode(p, prompts, pseg, 3, END)
    assert out.shape == (5, 3)
    assert np.all(lengths <= 3)
    for row, n in zip(out, lengths):
        # once END is emitted everything after is END
        if END in row[:n]:
            assert np.all(row[list(row).index(END):] == END)
    out2, _ = decode(p, prompts, pseg, 3, END)
    np.testing.assert_array_equal(out, out2)
    s1, _ = decode(p, prompts, pseg, 3, END, rng=np.random.default_rng(7))
    s2, _ = decode(p, prompts, pseg, 3, END, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(s1, s2)


def test_checkpoint_round_trip():
    p = init_params(ModelConfig(), seed=4)
    blob = write_checkpoint(p, step=7, extra={"stage": "x"})
    q, header = read_checkpoint(blob)
    assert header["step"] == 7 and header["extra"] == {"stage": "x"}
    assert q.config == p.config
    assert q.fingerprint() == p.fingerprint()
    assert write_checkpoint(q, step=7, extra={"stage": "x"}) == blob
    with pytest.raises(BadMagic):
        read_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(LengthMismatch):
        read_checkpoint(blob[:-8])

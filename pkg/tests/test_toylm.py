import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vistalab.autodiff import ContractError, Tensor
from vistalab.synthworld import gen_text_corpus
from vistalab.toylm import (BOS, EOS, IMG, PAD, LmConfig, PretrainConfig, TokenVocab, ToyLm,
                            TrainingFailure, generate, heldout_loss, lm_forward, pretrain_lm)

from gradcheck import rel_error, numeric_grad


def test_vocab_reserved_ids_and_bijection():
    v = TokenVocab.build(["a", "b"], size=10)
    assert (PAD, BOS, EOS, IMG) == (0, 1, 2, 3)
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<img>"]
    assert all(v.id(t) == i for i, t in enumerate(v.tokens))
    assert v.decode(v.encode(["b", "a"])) == ["b", "a"]
    with pytest.raises(ValueError):
        TokenVocab.build(list("abcdefghijk"), size=8)


def test_single_position_shapes(tiny_lm):
    logits, taps = lm_forward(tiny_lm, Tensor(np.zeros((1, 8))), [0, 1])
    assert logits.shape == (1, 64)
    assert all(t.shape == (1, 8) for t in taps.values())


def test_frozen_model_has_no_trainable_parameters(tiny_lm):
    assert tiny_lm.frozen
    assert not any(p.requires_grad for p in tiny_lm.parameters())


def test_over_length_and_bad_tap_are_contract_errors(tiny_lm):
    with pytest.raises(ContractError):
        tiny_lm.forward(Tensor(np.zeros((41, 8))))
    with pytest.raises(ContractError):
        tiny_lm.forward(Tensor(np.zeros((3, 8))), [2])


CAUSAL_LM = ToyLm(LmConfig(d_model=8, n_layers=2, seed=3)).freeze()


@settings(max_examples=30)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_causality(t, seed):
    tiny_lm = CAUSAL_LM
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(t, 8))
    i = int(rng.integers(t - 1))
    y = x.copy()
    y[i + 1:] = rng.normal(size=y[i + 1:].shape)
    a, ta = tiny_lm.forward(Tensor(x), [0, 1])
    b, tb = tiny_lm.forward(Tensor(y), [0, 1])
    assert np.array_equal(a.data[:i + 1], b.data[:i + 1])
    for l in (0, 1):
        assert np.array_equal(ta[l].data[:i + 1], tb[l].data[:i + 1])


def test_taps_are_reproducible(tiny_lm):
    x = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
    _, a = tiny_lm.forward(x, [0, 1])
    _, b = tiny_lm.forward(x, [0, 1])
    assert all(np.array_equal(a[l].data, b[l].data) for l in (0, 1))


def test_logit_gradient_wrt_input_embeddings(tiny_lm):
    """Gradients reach the input even though the model is frozen."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 7))
        x = rng.normal(size=(t, 8))
        pos, tok = int(rng.integers(t)), int(rng.integers(64))

        def f(e):
            return tiny_lm.forward(e)[0][pos, tok]

        xt = Tensor(x.copy(), requires_grad=True)
        f(xt).backward()
        worst = max(worst, rel_error(xt.grad, numeric_grad(f, [x], 0)))
    assert worst < 1e-3


def test_generate_contract(tiny_lm):
    x = np.random.default_rng(1).normal(size=(3, 8))
    assert generate(tiny_lm, x, 0) == []
    a = generate(tiny_lm, x, 6)
    assert a == generate(tiny_lm, x, 6)
    assert len(a) <= 6 and (EOS not in a[:-1])


def test_generate_ties_go_to_lowest_id():
    m = ToyLm(LmConfig(d_model=8, n_layers=1, seed=0)).freeze()
    m.params["unembed"].data[:] = 0.0  # all logits equal
    assert generate(m, np.zeros((1, 8)), 3) == [0, 0, 0]


def test_state_round_trip(tiny_lm):
    clone = ToyLm.from_state(tiny_lm.state_dict(), tiny_lm.manifest())
    assert clone.checksum() == tiny_lm.checksum() and clone.frozen


def test_untrained_loss_is_near_log_vocab(world):
    corpus = gen_text_corpus(world, 64, seed=5)
    m = ToyLm(LmConfig(seed=4))
    assert heldout_loss(m, corpus) == pytest.approx(math.log(64), rel=0.05)


def test_short_training_drops_loss_and_freezes(world):
    corpus = gen_text_corpus(world, 400, seed=6)
    cfg = PretrainConfig(steps=120, eval_every=60, threshold=0.9,
                         lm=LmConfig(d_model=16, n_layers=1, seed=1))
    model, rep = pretrain_lm(corpus, cfg)
    assert model.frozen
    assert rep["heldout_loss"] < 0.9 * rep["untrained_loss"]


def test_non_convergence_reports_curve(world):
    corpus = gen_text_corpus(world, 50, seed=7)
    cfg = PretrainConfig(steps=2, eval_every=1, lm=LmConfig(d_model=8, n_layers=1))
    with pytest.raises(TrainingFailure) as err:
        pretrain_lm(corpus, cfg)
    assert len(err.value.curve) == 3

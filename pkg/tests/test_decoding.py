import itertools

import numpy as np
import pytest

from dimbert import tensor as T
from dimbert.decoding import (
    GenerationConfig,
    Hypothesis,
    allowed_ids,
    beam_decode,
    beam_search,
    caption_step,
    generation_input,
    greedy_decode,
    greedy_search,
    referring_loss,
    referring_predict,
    referring_scores,
    step_log_probs,
)
from dimbert.errors import ConfigError, ContractError, LengthError
from dimbert.vocab import Special
from dimbert.world import generate_corpus

from conftest import small_model

END = 0


def table_step(seed, vocab_size=5):
    """A deterministic synthetic step function: log-probs are a hash of the prefix."""

    def step(prefixes):
        out = []
        for p in prefixes:
            rng = np.random.default_rng([seed, len(p), *p])
            z = rng.normal(size=vocab_size) * 2
            out.append(z - np.log(np.exp(z).sum()))
        return np.array(out)

    return step


def exhaustive_best(step, vocab_size, max_length):
    """Brute force over every sequence of length <= max_length that either ends in END or hits the limit."""
    best = None
    for n in range(1, max_length + 1):
        for seq in itertools.product(range(vocab_size), repeat=n):
            if END in seq[:-1] or (n < max_length and seq[-1] != END):
                continue
            lp = sum(step([list(seq[:i])])[0][seq[i]] for i in range(n))
            key = (-lp, n, seq)
            if best is None or key < best:
                best = key
    return best


@pytest.mark.parametrize("seed", range(10))
def test_wide_beam_equals_exhaustive_oracle(seed):
    step = table_step(seed)
    allowed = np.arange(5)
    hyp = beam_search(step, allowed, max_length=3, beam_size=5 ** 3, end_id=END)
    neg_lp, _, seq = exhaustive_best(step, 5, 3)
    assert hyp.tokens == seq
    assert hyp.log_prob == pytest.approx(-neg_lp, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_beam_of_one_is_greedy_on_synthetic_steps(seed):
    step = table_step(seed)
    allowed = np.arange(5)
    assert beam_search(step, allowed, 4, 1, end_id=END) == greedy_search(step, allowed, 4, end_id=END)


def test_beam_never_scores_below_greedy():
    for seed in range(50):
        step = table_step(100 + seed)
        allowed = np.arange(5)
        greedy = greedy_search(step, allowed, 4, end_id=END)
        beam = beam_search(step, allowed, 4, 3, end_id=END)
        assert beam.log_prob >= greedy.log_prob - 1e-12


def test_beam_tie_break_prefers_smaller_tokens():
    def flat(prefixes):
        return np.log(np.full((len(prefixes), 3), 1 / 3))

    hyp = beam_search(flat, np.arange(3), 3, 9, end_id=END)
    assert hyp.tokens == (END,)


def test_greedy_respects_max_length():
    def never_end(prefixes):
        out = np.full((len(prefixes), 4), -5.0)
        out[:, 2] = -0.01
        return out

    hyp = greedy_search(never_end, np.arange(4), 6, end_id=END)
    assert len(hyp.tokens) == 6 and not hyp.finished


def test_banned_tokens_are_never_generated():
    allowed = allowed_ids(10)
    assert not set(allowed.tolist()) & {Special.CLS, Special.SEP, Special.MASK}
    assert Special.END in allowed


def test_hypothesis_scoring():
    h = Hypothesis((5, 6, Special.END), -6.0, True)
    assert h.score() == -6.0
    assert h.score(1.0) == -2.0
    assert h.caption_ids() == [5, 6]


def test_generation_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(beam_size=0)
    with pytest.raises(ConfigError):
        beam_search(table_step(0), np.arange(5), 3, 0)


def test_empty_prefix_layout(vocab):
    ex = generate_corpus(1, 2)[0]
    model = small_model()
    seq = generation_input(model, ex.rois, ["red"], [])
    n = len(ex.rois)
    assert list(seq.token_ids[n + 1:]) == [Special.SEP, vocab.id("red"), Special.SEP, Special.MASK]
    assert seq.sentence_start == len(seq) - 1


def test_caption_step_is_a_deterministic_distribution(vocab):
    ex = generate_corpus(1, 2)[0]
    model = small_model()
    p = caption_step(model, ex.rois, ["red"], vocab.encode(["a"]))
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and (p >= 0).all()
    np.testing.assert_array_equal(p, caption_step(model, ex.rois, ["red"], vocab.encode(["a"])))
    with pytest.raises(LengthError):
        caption_step(model, ex.rois, [], vocab.encode(["a", "a"]), max_length=2)


def test_prefix_steps_match_during_and_after_decoding(vocab):
    ex = generate_corpus(1, 3)[0]
    model = small_model(seed=4)
    words, hyp = greedy_decode(model, ex.rois, ex.concepts.words[:2], GenerationConfig(1, 5))
    full = list(hyp.tokens)
    batched = step_log_probs(model, ex.rois, ex.concepts.words[:2], [full[:i] for i in range(len(full))])
    for i, tok in enumerate(full):
        single = step_log_probs(model, ex.rois, ex.concepts.words[:2], [full[:i]])[0]
        np.testing.assert_allclose(batched[i], single, atol=1e-12)
        assert int(np.argmax(np.where(np.isin(np.arange(len(vocab)), allowed_ids(len(vocab))), single, -np.inf))) \
            == tok


@pytest.mark.parametrize("seed", range(5))
def test_beam_of_one_matches_greedy_on_models(seed):
    ex = generate_corpus(1, seed)[0]
    model = small_model(seed=seed)
    cfg = GenerationConfig(1, 6)
    assert beam_decode(model, ex.rois, ex.concepts.words[:3], cfg) == greedy_decode(model, ex.rois,
                                                                                    ex.concepts.words[:3], cfg)


def test_model_emitting_end_first_gives_empty_caption(vocab):
    ex = generate_corpus(1, 0)[0]
    model = small_model()
    bias = np.zeros(len(vocab))
    bias[Special.END] = 100.0
    model.params["head.mlm.b"].data = bias
    words, hyp = greedy_decode(model, ex.rois, [], GenerationConfig(1, 5))
    assert words == [] and hyp.tokens == (Special.END,)
    assert beam_decode(model, ex.rois, [], GenerationConfig(3, 5))[0] == []


def test_single_roi_always_predicts_zero():
    ex = generate_corpus(1, 0)[0]
    for seed in range(3):
        scores = referring_scores(small_model(seed=seed), ex.rois[:1], [], ["a", "star"])
        assert scores.shape == (1,) and referring_predict(scores) == 0


def test_referring_loss_at_zero_scores():
    assert referring_loss(T.Tensor(np.zeros(4)), 2).item() == pytest.approx(4 * np.log(2))
    with pytest.raises(ContractError):
        referring_loss(T.Tensor(np.zeros(4)), 4)


def test_referring_predict_is_invariant_to_monotone_maps():
    scores = np.random.default_rng(0).normal(size=7)
    idx = referring_predict(scores)
    assert referring_predict(np.exp(scores)) == idx
    assert referring_predict(3 * scores - 2) == idx
    assert referring_predict(np.array([1.0, 3.0, 3.0])) == 1


def test_referring_scores_one_per_roi(vocab):
    ex = generate_corpus(1, 5)[0]
    model = small_model(seed=1)
    scores = referring_scores(model, ex.rois, ex.concepts.words[:2], ["a", "star"])
    assert scores.shape == (len(ex.rois),)
    with pytest.raises(ContractError):
        referring_scores(model, [], [], ["a"])

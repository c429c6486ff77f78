import math

import numpy as np
import pytest

from dimbert.decoding import GenerationConfig
from dimbert.errors import ContractError
from dimbert.metrics import (
    bleu,
    exact_match,
    generate_captions,
    precision_recall_f1,
    referring_accuracy,
    token_accuracy,
)
from dimbert.trainer import referring_items
from dimbert.world import generate_corpus
from dimbert.world import referring_items as referring_pairs

from conftest import small_model


def test_bleu_identical_is_one():
    cands = [["a", "red", "circle", "left", "of", "a", "star"]]
    assert bleu(cands, cands) == pytest.approx(1.0)


def test_bleu_zero_unigram_overlap_is_zero():
    assert bleu([["a", "red", "star"]], [["the", "blue", "moon"]]) == 0.0


def test_bleu_two_sentence_hand_case():
    cands = [["a", "red", "circle", "left", "of", "a", "star"], ["a", "big", "square"]]
    refs = [["a", "red", "circle", "left", "of", "a", "blue", "star"], ["a", "big", "square"]]
    # unigrams 10/10, bigrams 7/8 ("a star" unmatched), lengths c=10 r=11
    expected = math.exp(1 - 11 / 10) * math.sqrt(1.0 * 7 / 8)
    assert bleu(cands, refs, max_n=2) == pytest.approx(expected, rel=1e-12)
    assert bleu(cands, refs, max_n=1) == pytest.approx(math.exp(-0.1), rel=1e-12)


def test_bleu_clips_repeated_ngrams_and_takes_multiple_references():
    # "a a a a" against "a star": clipped unigram precision 1/4
    assert bleu([["a", "a", "a", "a"]], [["a", "star"]], max_n=1) == pytest.approx(0.25)
    multi = [[["a", "red", "star"], ["a", "big", "star"]]]
    assert bleu([["a", "big", "star"]], multi, max_n=3) == pytest.approx(1.0)


def test_bleu_rejects_empty_references():
    with pytest.raises(ContractError):
        bleu([["a"]], [])
    with pytest.raises(ContractError):
        bleu([["a"]], [[]])


def test_exact_match():
    assert exact_match([["a"], ["b"]], [["a"], ["c"]]) == 0.5
    assert exact_match([], []) == 0.0


def test_precision_recall_f1():
    p, r, f = precision_recall_f1({"a", "b", "c", "d"}, {"a", "b", "e"})
    assert (p, r) == (0.5, 2 / 3)
    assert f == pytest.approx(2 * 0.5 * (2 / 3) / (0.5 + 2 / 3))
    assert precision_recall_f1(set(), {"a"}) == (0.0, 0.0, 0.0)


def test_token_accuracy_against_own_greedy_outputs_is_one():
    corpus = generate_corpus(3, 0)
    model = small_model(seed=2)
    refs, hyps = generate_captions(model, corpus, 2, GenerationConfig(1, 6), with_hypotheses=True)
    acc = token_accuracy(model, corpus, 2, references=refs, terminated=[h.finished for h in hyps])
    assert acc == 1.0


def test_token_accuracy_is_a_rate():
    corpus = generate_corpus(2, 1)
    acc = token_accuracy(small_model(), corpus, 2)
    assert 0.0 <= acc <= 1.0
    assert token_accuracy(small_model(), [], 2) == 0.0


def test_referring_accuracy_matches_per_item_argmax():
    from dimbert.decoding import referring_scores

    pairs = referring_pairs(generate_corpus(6, 2))
    model = small_model(seed=3)
    items = referring_items(pairs, 2)
    expected = np.mean([int(np.argmax(referring_scores(model, r, c, q).data)) == t for r, c, q, t in items])
    assert referring_accuracy(model, items, batch_size=4) == pytest.approx(expected)

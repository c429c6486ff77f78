import numpy as np
import pytest

from dimbert import tensor as T
from dimbert.embeddings import Batch, assemble_sequence
from dimbert.errors import ConfigError, ContractError
from dimbert.objectives import (
    KEPT,
    MASKED,
    RANDOM,
    MaskingPolicy,
    TaskKind,
    apply_masking,
    build_blm_mask,
    build_s2slm_mask,
    collate_instances,
    instance_loss,
    make_coverage_instances,
    make_instance,
    mlm_loss,
    sample_task,
)
from dimbert.transformer import pad_masks
from dimbert.vocab import Special
from dimbert.world import generate_corpus

from conftest import small_model


def masking_stats(vocab, sentence, n_tokens=100_000, seed=0):
    rng = np.random.default_rng(seed)
    tokens = vocab.encode(sentence)
    selected, actions = 0, []
    for _ in range(n_tokens // len(tokens)):
        res = apply_masking(tokens, MaskingPolicy(), rng, vocab)
        selected += len(res.positions)
        actions += res.actions
    return selected / n_tokens, {a: actions.count(a) / len(actions) for a in (MASKED, RANDOM, KEPT)}


def test_masking_statistics_over_100k_tokens(vocab):
    # 1000-token sequences, so the at-least-one rule practically never fires
    rate, mix = masking_stats(vocab, ["a", "big", "red", "circle", "left"] * 200)
    assert abs(rate - 0.15) <= 0.01
    assert abs(mix[MASKED] - 0.8) <= 0.02
    assert abs(mix[RANDOM] - 0.1) <= 0.02
    assert abs(mix[KEPT] - 0.1) <= 0.02


def test_forced_target_lifts_the_rate_on_short_sentences(vocab):
    rate, _ = masking_stats(vocab, ["a", "big", "red", "circle", "left", "of", "a", "star", "and", "square"])
    # expected selections per 10-token sentence: 1.5 plus one forced pick when none is drawn
    expected = (10 * 0.15 + 0.85 ** 10) / 10
    assert abs(rate - expected) <= 0.005


def test_extreme_policy_masks_everything(vocab):
    tokens = vocab.encode(["a", "red", "star"])
    res = apply_masking(tokens, MaskingPolicy(1.0, 1.0, 0.0, 0.0), np.random.default_rng(0), vocab)
    assert res.corrupted == [Special.MASK] * 3
    assert res.positions == [0, 1, 2] and res.targets == tokens


def test_zero_selection_forces_exactly_one_target(vocab):
    tokens = vocab.encode(["a", "red", "star", "left", "of"])
    for seed in range(20):
        res = apply_masking(tokens, MaskingPolicy(p_select=0.0), np.random.default_rng(seed), vocab)
        assert len(res.positions) == 1
        assert res.targets == [tokens[res.positions[0]]]


def test_random_replacements_are_words(vocab):
    tokens = vocab.encode(["a"] * 50)
    res = apply_masking(tokens, MaskingPolicy(1.0, 0.0, 1.0, 0.0), np.random.default_rng(1), vocab)
    assert set(res.corrupted) <= set(vocab.word_ids)


def test_masking_rejects_bad_input(vocab):
    with pytest.raises(ContractError):
        apply_masking([], MaskingPolicy(), np.random.default_rng(0), vocab)
    with pytest.raises(ConfigError):
        MaskingPolicy(p_mask_token=0.5)
    with pytest.raises(ConfigError):
        MaskingPolicy(p_select=1.5)


def sequence(vocab, n_rois, concepts, words):
    ex = generate_corpus(1, 0)[0]
    rois = (ex.rois * 6)[:n_rois]
    return assemble_sequence(rois, concepts, vocab.encode(words), vocab)


def test_blm_mask_is_total_and_hides_padding(vocab):
    seq = sequence(vocab, 0, [], [])
    assert len(seq) == 4
    assert build_blm_mask(seq).all()
    padded = build_blm_mask(seq, pad_to=6)
    assert padded[:4, :4].all() and not padded[:4, 4:].any()


def test_s2slm_visual_rows_count(vocab):
    seq = sequence(vocab, 2, ["red"], ["a", "red", "circle"])
    mask = build_s2slm_mask(seq)
    # [CLS] R R [SEP] c [SEP]
    for row in range(seq.sentence_start):
        assert mask[row].sum() == 6
        assert mask[row, :6].all()


def test_s2slm_sentence_block_is_lower_triangular(vocab):
    seq = sequence(vocab, 3, ["red", "big"], ["a", "big", "red", "circle"])
    mask = build_s2slm_mask(seq)
    start = seq.sentence_start
    block = mask[start:, start:]
    np.testing.assert_array_equal(block, np.tril(np.ones_like(block)))
    assert mask[start:, :start].all()
    assert not mask[start, start + 1:].any()


def test_s2slm_padding_rows_attend_themselves(vocab):
    seq = sequence(vocab, 1, [], ["a"])
    mask = build_s2slm_mask(seq, pad_to=len(seq) + 2)
    n = len(seq)
    assert not mask[:n, n:].any()
    assert mask[n, n] and mask[n + 1, n + 1] and mask[n:].sum() == 2


def test_task_sampler_frequencies():
    rng = np.random.default_rng(0)
    draws = [sample_task(rng) for _ in range(10_000)]
    frac = draws.count(TaskKind.BLM) / len(draws)
    assert 0.23 <= frac <= 0.27


def test_task_sampler_rejects_bad_weights():
    with pytest.raises(ConfigError):
        sample_task(np.random.default_rng(0), {TaskKind.BLM: 0.5, TaskKind.S2SLM: 0.6})


def test_make_instance_couples_kind_and_mask(vocab):
    ex = generate_corpus(1, 3)[0]
    blm = make_instance(ex, TaskKind.BLM, vocab, np.random.default_rng(0))
    s2s = make_instance(ex, TaskKind.S2SLM, vocab, np.random.default_rng(0))
    np.testing.assert_array_equal(blm.mask, build_blm_mask(blm.seq))
    np.testing.assert_array_equal(s2s.mask, build_s2slm_mask(s2s.seq))
    assert blm.target_rows == s2s.target_rows


def test_make_instance_is_deterministic(vocab):
    ex = generate_corpus(1, 3)[0]
    a = make_instance(ex, TaskKind.S2SLM, vocab, np.random.default_rng(5))
    b = make_instance(ex, TaskKind.S2SLM, vocab, np.random.default_rng(5))
    np.testing.assert_array_equal(a.seq.token_ids, b.seq.token_ids)
    assert a.target_rows == b.target_rows and a.target_ids == b.target_ids


def test_instance_targets_restore_the_caption(vocab):
    ex = generate_corpus(1, 4)[0]
    inst = make_instance(ex, TaskKind.BLM, vocab, np.random.default_rng(2), MaskingPolicy(1.0, 1.0, 0.0, 0.0))
    sentence = vocab.encode(ex.caption) + [Special.END]
    assert inst.target_ids == sentence
    assert list(inst.target_rows) == list(inst.seq.sentence_rows)


def test_concept_masking_adds_concept_targets(vocab):
    ex = generate_corpus(1, 4)[0]
    inst = make_instance(ex, TaskKind.BLM, vocab, np.random.default_rng(2), MaskingPolicy(1.0, 1.0, 0.0, 0.0),
                         n_concepts=3, mask_concepts=True)
    concept_rows = set(int(r) for r in inst.seq.concept_rows)
    assert concept_rows <= set(inst.target_rows)
    assert all(inst.seq.token_ids[r] == Special.MASK for r in concept_rows)


def test_coverage_instances_mask_each_position_once(vocab):
    ex = generate_corpus(1, 6)[0]
    insts = make_coverage_instances(ex, vocab, n_concepts=2)
    sentence = vocab.encode(ex.caption) + [Special.END]
    assert [i.target_ids[0] for i in insts] == sentence
    for pos, inst in enumerate(insts):
        row = inst.seq.sentence_start + pos
        assert inst.target_rows == [row] and inst.seq.token_ids[row] == Special.MASK
        assert inst.kind == TaskKind.S2SLM
    assert len(make_coverage_instances(ex, vocab, terminated=False)) == len(sentence) - 1


def test_untrained_loss_is_near_log_vocabulary(vocab):
    model = small_model(seed=0)
    for name in ("head.mlm.W", "head.mlm.b"):
        model.params[name].data = np.zeros_like(model.params[name].data)
    insts = [make_instance(ex, TaskKind.BLM, vocab, np.random.default_rng(0)) for ex in generate_corpus(4, 1)]
    loss = instance_loss(model, collate_instances(insts)).item()
    assert loss == pytest.approx(np.log(len(vocab)), rel=1e-9)


def test_mlm_loss_rejects_non_sentence_targets(vocab):
    model = small_model(seed=0)
    seq = sequence(vocab, 2, ["red"], ["a", "star"])
    batch = Batch.collate([seq])
    H = model.encode(batch, pad_masks(batch, [build_blm_mask(seq)]))
    with pytest.raises(ContractError):
        mlm_loss(model, H, batch, [1], [vocab.id("star")])
    with pytest.raises(ContractError):
        mlm_loss(model, H, batch, [], [])
    with pytest.raises(ContractError):
        mlm_loss(model, H, batch, [int(seq.concept_rows[0])], [vocab.id("red")])
    assert mlm_loss(model, H, batch, [int(seq.concept_rows[0])], [vocab.id("red")], allow_concepts=True).item() > 0


def test_mlm_loss_gradient_matches_finite_differences(vocab):
    from dimbert.gradcheck import check_gradients

    model = small_model(seed=3, d_model=4, n_layers=1, n_heads=1)
    insts = [make_instance(ex, TaskKind.S2SLM, vocab, np.random.default_rng(1)) for ex in generate_corpus(2, 5)]
    ib = collate_instances(insts)
    names = ["layer0.attn.Wq_V", "layer0.attn.Wk_T", "head.mlm.b", "emb.lambda_g"]
    errors = check_gradients(lambda: instance_loss(model, ib), [(n, model.params[n]) for n in names])
    assert max(errors.values()) < 1e-4, errors


def test_blm_target_logits_depend_on_every_unmasked_position(vocab):
    ex = generate_corpus(1, 2)[0]
    model = small_model(seed=1)
    inst = make_instance(ex, TaskKind.BLM, vocab, np.random.default_rng(0), MaskingPolicy(p_select=0.0))
    row = inst.target_rows[0]

    def logits(seq):
        batch = Batch.collate([seq])
        return model.mlm_logits(model.encode(batch, pad_masks(batch, [build_blm_mask(seq)])), [row]).data

    base = logits(inst.seq)
    for k in np.flatnonzero(inst.seq.token_ids >= 0):
        if k == row:
            continue
        ids = inst.seq.token_ids.copy()
        ids[k] = vocab.id("star") if ids[k] != vocab.id("star") else vocab.id("heart")
        other = type(inst.seq)(**{**inst.seq.__dict__, "token_ids": ids})
        assert np.abs(logits(other) - base).max() > 0


def test_instance_loss_backpropagates(vocab):
    model = small_model(seed=2)
    insts = [make_instance(ex, TaskKind.S2SLM, vocab, np.random.default_rng(0)) for ex in generate_corpus(3, 1)]
    T.backward(instance_loss(model, collate_instances(insts)))
    assert np.abs(model.params["head.mlm.W"].grad).sum() > 0

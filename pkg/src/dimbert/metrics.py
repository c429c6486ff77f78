"""Evaluation metrics: teacher-forced token accuracy, corpus BLEU, referring accuracy, concept P/R/F1."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import replace
from typing import Sequence

import numpy as np

from .decoding import GenerationConfig, allowed_ids, beam_decode, greedy_decode, referring_batch
from .errors import ContractError
from .objectives import collate_instances, make_coverage_instances
from .transformer import DiMBERT


def token_accuracy(model: DiMBERT, examples: Sequence, n_concepts: int | None = None,
                   references: Sequence[Sequence[str]] | None = None, batch_size: int = 64,
                   terminated: Sequence[bool] | None = None) -> float:
    """Fraction of reference positions (words and [END]) whose argmax prediction is correct.

    Each position is predicted from the true prefix under the S2SLM mask, the
    same input the decoder sees during generation.  ``references`` overrides
    the examples' own captions; ``terminated[i] = False`` marks a reference
    without a final [END] (a hypothesis that hit the length limit).
    """
    allowed = allowed_ids(model.config.vocab_size)
    insts = []
    for i, ex in enumerate(examples):
        if references is not None:
            ex = _with_caption(ex, references[i])
        done = True if terminated is None else bool(terminated[i])
        insts.extend(make_coverage_instances(ex, model.vocab, n_concepts, done))
    if not insts:
        return 0.0
    correct = 0
    for start in range(0, len(insts), batch_size):
        ib = collate_instances(insts[start:start + batch_size])
        h = model.encode(ib.batch, ib.mask)
        logits = model.mlm_logits(h, ib.rows).data
        pred = allowed[np.argmax(logits[:, allowed], axis=1)]
        correct += int((pred == ib.targets).sum())
    return correct / len(insts)


def _with_caption(ex, caption):
    return replace(ex, caption=list(caption))


def generate_captions(model: DiMBERT, examples: Sequence, n_concepts: int | None = None,
                      config: GenerationConfig = GenerationConfig(), with_hypotheses: bool = False):
    """Decoded word lists, plus the raw hypotheses when ``with_hypotheses``."""
    decode = greedy_decode if config.beam_size == 1 else beam_decode
    words_out, hyps = [], []
    for ex in examples:
        words = ex.concepts.words if n_concepts is None else ex.concepts.words[:n_concepts]
        caption, hyp = decode(model, ex.rois, words, config)
        words_out.append(caption)
        hyps.append(hyp)
    return (words_out, hyps) if with_hypotheses else words_out


def exact_match(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    if not candidates:
        return 0.0
    return sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(candidates)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence, max_n: int = 4) -> float:
    """Corpus-level BLEU with clipped n-gram precision and brevity penalty, uniform weights.

    ``references[i]`` is either one token list or a list of token lists.  The
    closest reference length (shortest on ties) enters the brevity penalty.
    """
    if not references or len(candidates) != len(references):
        raise ContractError("BLEU needs one non-empty reference set per candidate")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if refs and isinstance(refs[0], str):
            refs = [refs]
        if not refs:
            raise ContractError("empty reference set")
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(list(r), n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if min(total) == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def referring_accuracy(model: DiMBERT, items: Sequence[tuple], batch_size: int = 64) -> float:
    """Accuracy over ``(rois, concepts, query, target)`` items."""
    if not items:
        return 0.0
    correct = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        batch, mask = referring_batch(model, [(r, c, q) for r, c, q, _ in chunk])
        scores = model.roi_scores(model.encode(batch, mask), batch).data
        offset = 0
        for (_, _, _, target), seq in zip(chunk, batch.seqs):
            correct += int(np.argmax(scores[offset:offset + seq.n_rois]) == target)
            offset += seq.n_rois
    return correct / len(items)


def precision_recall_f1(predicted: set, truth: set) -> tuple[float, float, float]:
    tp = len(predicted & truth)
    p = tp / len(predicted) if predicted else 0.0
    r = tp / len(truth) if truth else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f

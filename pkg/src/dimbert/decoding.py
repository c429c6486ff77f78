"""Caption generation by iterative [MASK] prediction, and the referring-expression head.

Generation re-encodes ``[CLS] RoIs [SEP] concepts [SEP] prefix [MASK]`` under
the S2SLM mask at every step and reads the vocabulary distribution at the
trailing ``[MASK]``.  The search routines only see a step function mapping a
list of prefixes to log-probabilities, so they can be driven by the model or
by any synthetic distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .embeddings import Batch, assemble_sequence
from .errors import ConfigError, ContractError, LengthError
from .objectives import build_blm_mask, build_s2slm_mask
from .transformer import DiMBERT, pad_masks
from .vocab import Special

StepFn = Callable[[list[list[int]]], np.ndarray]
NOT_GENERATED = (Special.CLS, Special.SEP, Special.MASK)


@dataclass(frozen=True)
class GenerationConfig:
    beam_size: int = 3
    max_length: int = 20
    alpha: float = 0.0  # length-normalisation exponent; 0 = raw log-prob sum

    def __post_init__(self):
        if self.beam_size < 1 or self.max_length < 1:
            raise ConfigError("beam_size and max_length must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # generated ids, including a final [END] when finished
    log_prob: float
    finished: bool

    def score(self, alpha: float = 0.0) -> float:
        if alpha == 0.0:
            return self.log_prob
        return self.log_prob / max(len(self.tokens), 1) ** alpha

    def caption_ids(self, end_id: int = Special.END) -> list[int]:
        return [t for t in self.tokens if t != end_id]


# --------------------------------------------------------------------------
# Model-driven steps
# --------------------------------------------------------------------------


def generation_input(model: DiMBERT, rois, concepts: Sequence[str], prefix: Sequence[int]):
    return assemble_sequence(rois, concepts, list(prefix), model.vocab, terminator=Special.MASK,
                             max_rois=model.config.max_rois, max_positions=model.config.max_positions)


def step_log_probs(model: DiMBERT, rois, concepts: Sequence[str], prefixes: list[list[int]]) -> np.ndarray:
    """Log-probabilities at the trailing [MASK] for each prefix, shape (len(prefixes), V)."""
    seqs = [generation_input(model, rois, concepts, p) for p in prefixes]
    batch = Batch.collate(seqs)
    mask = pad_masks(batch, [build_s2slm_mask(q) for q in seqs])
    h = model.encode(batch, mask)
    s = batch.shape[1]
    rows = np.array([i * s + len(q) - 1 for i, q in enumerate(seqs)])
    logits = model.mlm_logits(h, rows).data
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def caption_step(model: DiMBERT, rois, concepts: Sequence[str], prefix: Sequence[int],
                 max_length: int | None = None) -> np.ndarray:
    """Vocabulary distribution for the word following ``prefix``."""
    if max_length is not None and len(prefix) >= max_length:
        raise LengthError(f"prefix of length {len(prefix)} has reached max_length {max_length}")
    return np.exp(step_log_probs(model, rois, concepts, [list(prefix)])[0])


def model_step_fn(model: DiMBERT, rois, concepts: Sequence[str]) -> StepFn:
    return lambda prefixes: step_log_probs(model, rois, concepts, prefixes)


def allowed_ids(vocab_size: int, banned: Sequence[int] = NOT_GENERATED) -> np.ndarray:
    banned = {int(b) for b in banned}
    return np.array([i for i in range(vocab_size) if i not in banned], dtype=np.int64)


# --------------------------------------------------------------------------
# Search
# --------------------------------------------------------------------------


def greedy_search(step: StepFn, allowed: np.ndarray, max_length: int, end_id: int = Special.END) -> Hypothesis:
    tokens: list[int] = []
    total = 0.0
    for _ in range(max_length):
        logp = step([tokens])[0]
        tok = int(allowed[int(np.argmax(logp[allowed]))])
        total += float(logp[tok])
        tokens.append(tok)
        if tok == end_id:
            return Hypothesis(tuple(tokens), total, True)
    return Hypothesis(tuple(tokens), total, False)


def _final_key(h: Hypothesis, alpha: float):
    return (-h.score(alpha), len(h.tokens), h.tokens)


def beam_search(step: StepFn, allowed: np.ndarray, max_length: int, beam_size: int,
                alpha: float = 0.0, end_id: int = Special.END) -> Hypothesis:
    """Keep the ``beam_size`` best expansions per step; expansions ending in [END] leave the beam.

    Finished hypotheses compete on (length-normalised) log-probability, with
    ties going to the earlier finisher and then to the smaller token sequence.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    alive: list[Hypothesis] = [Hypothesis((), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_length):
        logp = step([list(h.tokens) for h in alive])
        candidates = [
            Hypothesis(h.tokens + (int(t),), h.log_prob + float(logp[i, t]), int(t) == end_id)
            for i, h in enumerate(alive)
            for t in allowed
        ]
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        kept = candidates[:beam_size]
        finished.extend(h for h in kept if h.finished)
        alive = [h for h in kept if not h.finished]
        if not alive:
            break
        if alpha == 0.0 and finished:
            # log-probs only decrease, so no live hypothesis can overtake the best finished one
            best_done = max(h.log_prob for h in finished)
            if best_done >= max(h.log_prob for h in alive):
                break
    else:
        finished.extend(alive)
    if not finished:
        finished = alive
    return min(finished, key=lambda h: _final_key(h, alpha))


def greedy_decode(model: DiMBERT, rois, concepts: Sequence[str], config: GenerationConfig = GenerationConfig()):
    hyp = greedy_search(model_step_fn(model, rois, concepts), allowed_ids(model.config.vocab_size), config.max_length)
    return model.vocab.decode(hyp.caption_ids()), hyp


def beam_decode(model: DiMBERT, rois, concepts: Sequence[str], config: GenerationConfig = GenerationConfig()):
    hyp = beam_search(model_step_fn(model, rois, concepts), allowed_ids(model.config.vocab_size),
                      config.max_length, config.beam_size, config.alpha)
    return model.vocab.decode(hyp.caption_ids()), hyp


# --------------------------------------------------------------------------
# Referring expressions
# --------------------------------------------------------------------------


def referring_input(model: DiMBERT, rois, concepts: Sequence[str], query: Sequence[str]):
    return assemble_sequence(rois, concepts, model.vocab.encode(query), model.vocab,
                             max_rois=model.config.max_rois, max_positions=model.config.max_positions)


def referring_batch(model: DiMBERT, items) -> tuple[Batch, np.ndarray]:
    """Batch and BLM mask for ``(rois, concepts, query)`` triples."""
    seqs = [referring_input(model, rois, concepts, query) for rois, concepts, query in items]
    if any(q.n_rois == 0 for q in seqs):
        raise ContractError("referring needs at least one RoI")
    batch = Batch.collate(seqs)
    return batch, pad_masks(batch, [build_blm_mask(q) for q in seqs])


def referring_scores(model: DiMBERT, rois, concepts: Sequence[str], query: Sequence[str]) -> T.Tensor:
    """One score per RoI from the linear head on the final RoI rows (full bidirectional mask)."""
    batch, mask = referring_batch(model, [(rois, concepts, query)])
    return model.roi_scores(model.encode(batch, mask), batch)


def referring_loss(scores: T.Tensor, target: int) -> T.Tensor:
    """Binary cross-entropy summed over RoIs: label 1 at the target, 0 elsewhere."""
    n = scores.shape[0]
    if not 0 <= target < n:
        raise ContractError(f"target {target} out of range for {n} RoIs")
    labels = np.zeros(n)
    labels[target] = 1.0
    return T.bce_with_logits(scores, labels)


def referring_predict(scores) -> int:
    """Index of the highest score; the lowest index wins ties."""
    values = scores.data if isinstance(scores, T.Tensor) else np.asarray(scores)
    return int(np.argmax(values))

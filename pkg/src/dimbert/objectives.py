"""Masked language modelling: masking policy, BLM / S2SLM attention masks, task sampling, loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .embeddings import Batch, MultimodalSequence, Segment, assemble_sequence
from .errors import ConfigError, ContractError
from .transformer import DiMBERT, pad_masks
from .vocab import Special, Vocabulary


class TaskKind(str, Enum):
    BLM = "BLM"
    S2SLM = "S2SLM"


DEFAULT_TASK_WEIGHTS = {TaskKind.BLM: 0.25, TaskKind.S2SLM: 0.75}

# masking actions recorded per selected position
MASKED, RANDOM, KEPT = "mask", "random", "keep"


@dataclass(frozen=True)
class MaskingPolicy:
    p_select: float = 0.15
    p_mask_token: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_select <= 1.0:
            raise ConfigError("p_select must lie in [0, 1]")
        parts = (self.p_mask_token, self.p_random, self.p_keep)
        if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError("mask/random/keep probabilities must be non-negative and sum to 1")


@dataclass
class MaskingResult:
    corrupted: list[int]
    positions: list[int]
    targets: list[int]
    actions: list[str]


def apply_masking(tokens: Sequence[int], policy: MaskingPolicy, rng: np.random.Generator,
                  vocab: Vocabulary) -> MaskingResult:
    """Select each token with ``p_select`` and corrupt it 80/10/10.

    If nothing is selected exactly one position is forced, so every instance
    carries at least one prediction target.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ContractError("cannot mask an empty sentence")
    selected = np.flatnonzero(rng.random(len(tokens)) < policy.p_select)
    if selected.size == 0:
        selected = np.array([rng.integers(len(tokens))])
    corrupted = list(tokens)
    actions = []
    pool = np.asarray(vocab.word_ids)
    cut_mask = policy.p_mask_token
    cut_random = policy.p_mask_token + policy.p_random
    for pos in selected:
        u = rng.random()
        if u < cut_mask:
            corrupted[pos] = int(Special.MASK)
            actions.append(MASKED)
        elif u < cut_random:
            corrupted[pos] = int(rng.choice(pool))
            actions.append(RANDOM)
        else:
            actions.append(KEPT)
    return MaskingResult(corrupted, [int(p) for p in selected], [tokens[p] for p in selected], actions)


# --------------------------------------------------------------------------
# Attention masks
# --------------------------------------------------------------------------


def build_blm_mask(seq: MultimodalSequence, pad_to: int | None = None) -> np.ndarray:
    """Every real position attends every real position; padding columns are never attendable."""
    n = len(seq)
    s = n if pad_to is None else pad_to
    mask = np.zeros((s, s), dtype=bool)
    mask[:n, :n] = True
    mask[np.arange(n, s), np.arange(n, s)] = True
    return mask


def build_s2slm_mask(seq: MultimodalSequence, pad_to: int | None = None) -> np.ndarray:
    """Visual encoder plus causal sentence decoder.

    Rows of the RoI and concept segments (with their [CLS]/[SEP] boundaries)
    attend exactly those segments.  The sentence row at order j attends both
    segments plus sentence rows 0..j; the terminator is the last sentence row.
    """
    n = len(seq)
    s = n if pad_to is None else pad_to
    start = seq.sentence_start
    mask = np.zeros((s, s), dtype=bool)
    mask[:n, :start] = True
    k = n - start
    mask[start:n, start:n] = np.tril(np.ones((k, k), dtype=bool))
    mask[np.arange(n, s), np.arange(n, s)] = True
    return mask


MASK_BUILDERS = {TaskKind.BLM: build_blm_mask, TaskKind.S2SLM: build_s2slm_mask}


# --------------------------------------------------------------------------
# Instances
# --------------------------------------------------------------------------


def sample_task(rng: np.random.Generator, weights: dict | None = None) -> TaskKind:
    weights = DEFAULT_TASK_WEIGHTS if weights is None else weights
    kinds = list(weights)
    probs = np.array([weights[k] for k in kinds], dtype=float)
    if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigError("task weights must be non-negative and sum to 1")
    return TaskKind(kinds[int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(max=len(kinds) - 1))])


@dataclass
class TrainingInstance:
    seq: MultimodalSequence
    target_rows: list[int]  # indices into seq
    target_ids: list[int]
    mask: np.ndarray
    kind: TaskKind
    actions: list[str] = field(default_factory=list)


def _concept_words(example, n_concepts: int | None) -> list[str]:
    words = example.concepts.words
    return words if n_concepts is None else words[:n_concepts]


def make_instance(example, kind: TaskKind, vocab: Vocabulary, rng: np.random.Generator,
                  policy: MaskingPolicy = MaskingPolicy(), n_concepts: int | None = None,
                  mask_concepts: bool = False) -> TrainingInstance:
    """Corrupt the caption (plus its [END]) and pair it with the task's attention mask.

    With ``mask_concepts`` the concept tokens are masked under the same policy
    and become targets too.
    """
    concepts = _concept_words(example, n_concepts)
    sentence = vocab.encode(example.caption) + [int(Special.END)]
    masked = apply_masking(sentence, policy, rng, vocab)
    concept_ids = vocab.encode(concepts)
    concept_masked = apply_masking(concept_ids, policy, rng, vocab) if mask_concepts and concept_ids else None
    seq = assemble_sequence(example.rois, concepts, masked.corrupted[:-1], vocab, terminator=masked.corrupted[-1])
    rows = [seq.sentence_start + p for p in masked.positions]
    targets = list(masked.targets)
    if concept_masked is not None:
        seq.token_ids[seq.concept_rows] = concept_masked.corrupted
        rows += [int(seq.concept_rows[p]) for p in concept_masked.positions]
        targets += concept_masked.targets
    seq.is_target[rows] = True
    return TrainingInstance(seq, rows, targets, MASK_BUILDERS[kind](seq), kind, masked.actions)


def make_coverage_instances(example, vocab: Vocabulary, n_concepts: int | None = None,
                            terminated: bool = True) -> list[TrainingInstance]:
    """One S2SLM instance per sentence position (words and [END]), each masking only that position.

    ``terminated=False`` drops the [END] target, for captions cut off at the
    length limit.
    """
    concepts = _concept_words(example, n_concepts)
    sentence = vocab.encode(example.caption) + [int(Special.END)]
    out = []
    for pos, target in enumerate(sentence[:len(sentence) if terminated else -1]):
        corrupted = sentence[:pos] + [int(Special.MASK)] + sentence[pos + 1:]
        seq = assemble_sequence(example.rois, concepts, corrupted[:-1], vocab, terminator=corrupted[-1])
        row = seq.sentence_start + pos
        seq.is_target[row] = True
        out.append(TrainingInstance(seq, [row], [target], build_s2slm_mask(seq), TaskKind.S2SLM, [MASKED]))
    return out


@dataclass
class InstanceBatch:
    batch: Batch
    mask: np.ndarray  # (B, S, S)
    rows: np.ndarray  # flat target rows b * S + i
    targets: np.ndarray


def collate_instances(instances: Sequence[TrainingInstance]) -> InstanceBatch:
    batch = Batch.collate([inst.seq for inst in instances])
    s = batch.shape[1]
    mask = pad_masks(batch, [inst.mask for inst in instances])
    rows = np.array([i * s + r for i, inst in enumerate(instances) for r in inst.target_rows], dtype=np.int64)
    targets = np.array([t for inst in instances for t in inst.target_ids], dtype=np.int64)
    return InstanceBatch(batch, mask, rows, targets)


def mlm_loss(model: DiMBERT, H: T.Tensor, batch: Batch, rows, targets, allow_concepts: bool = False) -> T.Tensor:
    """Mean cross-entropy of the vocabulary head at the target rows."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ContractError("no prediction targets")
    seg = batch.segment.reshape(-1)[rows]
    allowed = (Segment.SEN, Segment.CEP) if allow_concepts else (Segment.SEN,)
    text = batch.token_ids.reshape(-1)[rows] >= 0
    if not (np.isin(seg, allowed) & text).all():
        raise ContractError("target position lies outside the sentence segment")
    return T.cross_entropy(model.mlm_logits(H, rows), targets)


def instance_loss(model: DiMBERT, ib: InstanceBatch, rng=None, allow_concepts: bool = False) -> T.Tensor:
    H = model.encode(ib.batch, ib.mask, rng=rng)
    return mlm_loss(model, H, ib.batch, ib.rows, ib.targets, allow_concepts)

"""Input embeddings: RoI geometry/class fusion, concept and word embeddings, sequence layout.

Layout of every sequence::

    [CLS] R_1 .. R_n [SEP] c_1 .. c_m [SEP] s_1 .. s_k [END]

``[CLS]``, the RoIs and the first ``[SEP]`` form the RoI segment; the concepts
and the second ``[SEP]`` the concept segment; the sentence and its terminator
(``[END]`` in training, the trailing ``[MASK]`` during generation) the sentence
segment.  Only RoI rows are visual; special tokens are textual.  RoIs and the
RoI-segment specials carry no position embedding; concept positions follow
score rank and sentence positions follow word order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, DimensionError, LengthError
from .vocab import Special, Vocabulary

NO_POSITION = -1


class Segment(IntEnum):
    ROI = 0
    CEP = 1
    SEN = 2


def geometry_feature(box: Sequence[float], width: float, height: float) -> np.ndarray:
    """(x_tl/W, y_tl/H, x_br/W, y_br/H, relative area) of a box inside a W x H canvas."""
    if width <= 0 or height <= 0:
        raise ConfigError("canvas extents must be positive")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {tuple(box)} is degenerate or outside the {width}x{height} canvas")
    area = (x1 - x0) * (y1 - y0) / (width * height)
    return np.array([x0 / width, y0 / height, x1 / width, y1 / height, area])


@dataclass
class MultimodalSequence:
    """Annotated layout of one input; embeddings are computed from it by ``embed``."""

    token_ids: np.ndarray  # (S,) token id, -1 on RoI rows
    roi_index: np.ndarray  # (S,) RoI number, -1 on textual rows
    segment: np.ndarray  # (S,) Segment
    position: np.ndarray  # (S,) position id or NO_POSITION
    is_target: np.ndarray  # (S,) bool
    r: np.ndarray  # (R, d_r)
    g: np.ndarray  # (R, d_g)
    c: np.ndarray  # (R, d_c)
    n_rois: int
    n_concepts: int

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def visual(self) -> np.ndarray:
        return self.roi_index >= 0

    @property
    def modality(self) -> list[str]:
        return ["V" if v else "T" for v in self.visual]

    @property
    def roi_rows(self) -> np.ndarray:
        return np.arange(1, 1 + self.n_rois)

    @property
    def concept_rows(self) -> np.ndarray:
        start = self.n_rois + 2
        return np.arange(start, start + self.n_concepts)

    @property
    def sentence_start(self) -> int:
        """Index of the first sentence row; rows before it are the two visual segments."""
        return self.n_rois + self.n_concepts + 3

    @property
    def sentence_rows(self) -> np.ndarray:
        """Sentence words plus the terminator row."""
        return np.arange(self.sentence_start, len(self))


def assemble_sequence(
    rois: Sequence,
    concepts: Sequence[str],
    sentence: Sequence[int],
    vocab: Vocabulary,
    terminator: Special = Special.END,
    max_rois: int | None = None,
    max_positions: int | None = None,
) -> MultimodalSequence:
    """Lay out RoIs, concept words and sentence token ids in the fixed segment order.

    ``rois`` holds objects with ``r``, ``g`` and ``c`` arrays.  ``sentence`` is a
    list of token ids (it may contain ``[MASK]`` or replacement ids).  Pass
    ``terminator=Special.MASK`` to build the generation input that ends in a
    fresh ``[MASK]``.
    """
    n_r, n_c, n_s = len(rois), len(concepts), len(sentence)
    if max_rois is not None and n_r > max_rois:
        raise LengthError(f"{n_r} RoIs exceed the maximum of {max_rois}")
    if max_positions is not None and max(n_c, n_s) + 1 > max_positions:
        raise LengthError(f"segment of length {max(n_c, n_s) + 1} exceeds {max_positions} positions")
    concept_ids = vocab.encode(concepts)

    tokens = [int(Special.CLS)] + [-1] * n_r + [int(Special.SEP)] + concept_ids + [int(Special.SEP)]
    tokens += [int(t) for t in sentence] + [int(terminator)]
    roi_index = [-1] + list(range(n_r)) + [-1] * (n_c + 2 + n_s + 1)
    segment = [Segment.ROI] * (n_r + 2) + [Segment.CEP] * (n_c + 1) + [Segment.SEN] * (n_s + 1)
    position = [NO_POSITION] * (n_r + 2) + list(range(n_c + 1)) + list(range(n_s + 1))
    is_target = [False] * len(tokens)

    def stack(attr, dim):
        if not rois:
            return np.zeros((0, dim))
        return np.stack([np.asarray(getattr(f, attr), dtype=float) for f in rois])

    first = rois[0] if rois else None
    return MultimodalSequence(
        token_ids=np.array(tokens, dtype=np.int64),
        roi_index=np.array(roi_index, dtype=np.int64),
        segment=np.array(segment, dtype=np.int64),
        position=np.array(position, dtype=np.int64),
        is_target=np.array(is_target, dtype=bool),
        r=stack("r", len(first.r) if first is not None else 0),
        g=stack("g", 5),
        c=stack("c", len(first.c) if first is not None else 0),
        n_rois=n_r,
        n_concepts=n_c,
    )


@dataclass
class Batch:
    """Right-padded stack of sequences."""

    seqs: list[MultimodalSequence]
    lengths: np.ndarray  # (B,)
    token_ids: np.ndarray  # (B, S), -1 on RoI and padding rows
    visual: np.ndarray  # (B, S) bool
    segment: np.ndarray
    position: np.ndarray
    r: np.ndarray  # (N_roi, d_r) over the whole batch
    g: np.ndarray
    c: np.ndarray
    roi_flat: np.ndarray  # flat (b * S + i) row of each RoI
    text_flat: np.ndarray  # flat row of each textual token

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    @property
    def real(self) -> np.ndarray:
        b, s = self.shape
        return np.arange(s)[None, :] < self.lengths[:, None]

    @classmethod
    def collate(cls, seqs: Sequence[MultimodalSequence]) -> "Batch":
        seqs = list(seqs)
        b = len(seqs)
        s = max(len(q) for q in seqs)
        token_ids = np.full((b, s), -1, dtype=np.int64)
        visual = np.zeros((b, s), dtype=bool)
        segment = np.zeros((b, s), dtype=np.int64)
        position = np.full((b, s), NO_POSITION, dtype=np.int64)
        roi_flat, text_flat, rs, gs, cs = [], [], [], [], []
        for i, q in enumerate(seqs):
            n = len(q)
            token_ids[i, :n] = q.token_ids
            visual[i, :n] = q.visual
            segment[i, :n] = q.segment
            position[i, :n] = q.position
            rows = np.arange(n)
            roi_flat.append(i * s + rows[q.visual][np.argsort(q.roi_index[q.visual])])
            text_flat.append(i * s + rows[~q.visual])
            rs.append(q.r)
            gs.append(q.g)
            cs.append(q.c)
        return cls(
            seqs=seqs,
            lengths=np.array([len(q) for q in seqs]),
            token_ids=token_ids,
            visual=visual,
            segment=segment,
            position=position,
            r=_stack_rows(rs),
            g=_stack_rows(gs),
            c=_stack_rows(cs),
            roi_flat=np.concatenate(roi_flat).astype(np.int64),
            text_flat=np.concatenate(text_flat).astype(np.int64),
        )


def _stack_rows(parts: list[np.ndarray]) -> np.ndarray:
    parts = [p for p in parts if len(p)]
    return np.concatenate(parts) if parts else np.zeros((0, 0))


# --------------------------------------------------------------------------
# Parameters and the embedding functions
# --------------------------------------------------------------------------


def init_embedding_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    d, half, std = cfg.d_model, cfg.d_model // 2, cfg.std
    n_special = len(Special)
    normal = lambda *shape: rng.normal(0.0, std, size=shape)  # noqa: E731
    return {
        "emb.special": T.parameter(normal(n_special, d)),
        "emb.word": T.parameter(normal(cfg.vocab_size - n_special, d)),
        "emb.position": T.parameter(normal(cfg.max_positions, d)),
        "emb.segment": T.parameter(normal(len(Segment), d)),
        "emb.W_r": T.parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_r), size=(cfg.d_r, d))),
        "emb.b_r": T.parameter(np.zeros(d)),
        "emb.W_g": T.parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_g), size=(cfg.d_g, half))),
        "emb.W_c": T.parameter(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_c), size=(cfg.d_c, half))),
        "emb.ln_g.gain": T.parameter(np.ones(half)),
        "emb.ln_g.bias": T.parameter(np.zeros(half)),
        "emb.ln_c.gain": T.parameter(np.ones(half)),
        "emb.ln_c.bias": T.parameter(np.zeros(half)),
        "emb.lambda_r": T.parameter(np.ones(1)),
        "emb.lambda_g": T.parameter(np.ones(1)),
        "emb.lambda_seg": T.parameter(np.ones(1)),
    }


def token_table(params: dict[str, T.Tensor]) -> T.Tensor:
    """Special rows first (ids 0-3) followed by the word rows."""
    return T.concat([params["emb.special"], params["emb.word"]], axis=0)


def fused_geometry(g, c, params: dict[str, T.Tensor], eps: float = 1e-12) -> T.Tensor:
    """g*: the layer-normalised geometry half concatenated with the layer-normalised class half."""
    gg = T.layer_norm(T.matmul(T.as_tensor(g), params["emb.W_g"]), params["emb.ln_g.gain"], params["emb.ln_g.bias"], eps)
    cc = T.layer_norm(T.matmul(T.as_tensor(c), params["emb.W_c"]), params["emb.ln_c.gain"], params["emb.ln_c.bias"], eps)
    return T.concat([gg, cc], axis=-1)


def roi_embed(r, g, c, params: dict[str, T.Tensor], eps: float = 1e-12) -> T.Tensor:
    """Weighted sum of the appearance projection, g* and the RoI segment embedding.

    ``r``, ``g``, ``c`` are (N, d_r), (N, d_g), (N, d_c); the result is (N, d_model).
    """
    r, g, c = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (r, g, c))
    if not (r.shape[0] == g.shape[0] == c.shape[0]):
        raise DimensionError("r, g and c must describe the same number of RoIs")
    for arr, key, axis in ((r, "emb.W_r", 0), (g, "emb.W_g", 0), (c, "emb.W_c", 0)):
        if arr.shape[1] != params[key].shape[axis]:
            raise DimensionError(f"{key} expects inputs of width {params[key].shape[axis]}, got {arr.shape[1]}")
    n = r.shape[0]
    appearance = T.linear(T.as_tensor(r), params["emb.W_r"], params["emb.b_r"])
    seg = T.embedding_lookup(params["emb.segment"], np.full(n, Segment.ROI))
    out = T.scale(appearance, params["emb.lambda_r"])
    out = T.add(out, T.scale(fused_geometry(g, c, params, eps), params["emb.lambda_g"]))
    return T.add(out, T.scale(seg, params["emb.lambda_seg"]))


def text_embed(token_ids, segments, positions, params: dict[str, T.Tensor]) -> T.Tensor:
    """Token + segment + (where assigned) position embeddings for textual rows."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    n = token_ids.shape[0]
    if positions.size and positions.max() >= params["emb.position"].shape[0]:
        raise LengthError("position id exceeds the position table")
    out = T.add(T.embedding_lookup(token_table(params), token_ids), T.embedding_lookup(params["emb.segment"], segments))
    has_pos = positions >= 0
    if has_pos.any():
        pos = T.embedding_lookup(params["emb.position"], positions[has_pos])
        out = T.add(out, T.scatter_rows(pos, np.flatnonzero(has_pos), n))
    return out


def word_embed(tokens: Sequence[str], vocab: Vocabulary, params: dict[str, T.Tensor]) -> T.Tensor:
    """Sentence-word embeddings numbered by sentence order."""
    ids = vocab.encode(tokens)
    return text_embed(ids, np.full(len(ids), Segment.SEN), np.arange(len(ids)), params)


def concept_embed(concepts, vocab: Vocabulary, params: dict[str, T.Tensor]) -> T.Tensor:
    """Concept embeddings with positions given by score rank (input order)."""
    words = concepts.words if hasattr(concepts, "words") else list(concepts)
    ids = vocab.encode(words)
    return text_embed(ids, np.full(len(ids), Segment.CEP), np.arange(len(ids)), params)


def embed(batch: Batch, params: dict[str, T.Tensor], eps: float = 1e-12) -> T.Tensor:
    """H^0 for a batch: (B, S, d_model), padding rows zero."""
    b, s = batch.shape
    d = params["emb.segment"].shape[1]
    flat_tokens = batch.token_ids.reshape(-1)[batch.text_flat]
    flat_seg = batch.segment.reshape(-1)[batch.text_flat]
    flat_pos = batch.position.reshape(-1)[batch.text_flat]
    text = text_embed(flat_tokens, flat_seg, flat_pos, params)
    h0 = T.scatter_rows(text, batch.text_flat, b * s)
    if len(batch.roi_flat):
        rois = roi_embed(batch.r, batch.g, batch.c, params, eps)
        h0 = T.add(h0, T.scatter_rows(rois, batch.roi_flat, b * s))
    return T.reshape(h0, (b, s, d))

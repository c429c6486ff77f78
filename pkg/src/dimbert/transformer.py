"""Single-stream transformer with entangled (ESA) or disentangled multimodal (DiM) attention.

In ESA mode every row is projected to queries, keys and values with one
shared set of matrices.  In DiM mode RoI rows use their own visual set while
textual rows keep the textual set; the softmax, the output map and the FFN
stay shared across modalities.  Layers are post-LN:
``LN(x + FFN(LN(x + Attn(x))))``.
"""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .embeddings import Batch, embed, init_embedding_params, token_table
from .errors import ContractError, DimensionError, LengthError
from .vocab import Vocabulary

MASK_FILL = -1e9
PROJECTIONS = ("q", "k", "v")


def init_layer_params(cfg: ModelConfig, rng: np.random.Generator, prefix: str,
                      visual_rng: np.random.Generator | None = None) -> dict[str, T.Tensor]:
    """Layer parameters; the visual projections come from ``visual_rng`` so that
    ESA and DiM models built from one seed share every common parameter."""
    visual_rng = rng if visual_rng is None else visual_rng
    d, f, std = cfg.d_model, cfg.d_ff, cfg.std
    p: dict[str, T.Tensor] = {}
    for name in PROJECTIONS:
        p[f"{prefix}.attn.W{name}_T"] = T.parameter(rng.normal(0.0, std, size=(d, d)))
    if cfg.mode == "DiM":
        for name in PROJECTIONS:
            p[f"{prefix}.attn.W{name}_V"] = T.parameter(visual_rng.normal(0.0, std, size=(d, d)))
    p[f"{prefix}.attn.W_O"] = T.parameter(rng.normal(0.0, std, size=(d, d)))
    p[f"{prefix}.attn.b_O"] = T.parameter(np.zeros(d))
    p[f"{prefix}.ln1.gain"] = T.parameter(np.ones(d))
    p[f"{prefix}.ln1.bias"] = T.parameter(np.zeros(d))
    p[f"{prefix}.ffn.W1"] = T.parameter(rng.normal(0.0, std, size=(d, f)))
    p[f"{prefix}.ffn.b1"] = T.parameter(np.zeros(f))
    p[f"{prefix}.ffn.W2"] = T.parameter(rng.normal(0.0, std, size=(f, d)))
    p[f"{prefix}.ffn.b2"] = T.parameter(np.zeros(d))
    p[f"{prefix}.ln2.gain"] = T.parameter(np.ones(d))
    p[f"{prefix}.ln2.bias"] = T.parameter(np.zeros(d))
    return p


def project_qkv(H: T.Tensor, visual, params: dict[str, T.Tensor], prefix: str, mode: str):
    """Queries, keys and values for every row.

    ``visual`` is a boolean array over the leading axes of ``H``.  ESA applies
    the textual matrices to all rows; DiM switches RoI rows to the visual ones.
    """
    visual = np.asarray(visual, dtype=bool)
    if visual.shape != H.shape[:-1]:
        raise DimensionError(f"modality tags {visual.shape} do not cover rows {H.shape[:-1]}")
    out = []
    for name in PROJECTIONS:
        textual = T.matmul(H, params[f"{prefix}.attn.W{name}_T"])
        if mode == "DiM" and visual.any():
            vis = T.matmul(H, params[f"{prefix}.attn.W{name}_V"])
            textual = T.row_select(visual, vis, textual)
        out.append(textual)
    return tuple(out)


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != mask.shape[-2]:
        raise DimensionError(f"attention mask must be square, got {mask.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask has a row with no attendable column")
    return mask


def attention(Q: T.Tensor, K: T.Tensor, V: T.Tensor, mask, n_heads: int, W_O: T.Tensor, b_O: T.Tensor,
              dropout: float = 0.0, rng=None):
    """Multi-head scaled dot-product attention over (B, S, d) inputs.

    Returns the (B, S, d) output after ``W_O`` and the (B, h, S, S) weights.
    """
    b, s, d = Q.shape
    mask = check_mask(mask)
    if mask.shape != (b, s, s):
        raise DimensionError(f"mask {mask.shape} does not match ({b}, {s}, {s})")
    dk = d // n_heads

    def heads(x):
        return T.transpose(T.reshape(x, (b, s, n_heads, dk)), (0, 2, 1, 3))

    qh, kh, vh = heads(Q), heads(K), heads(V)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    fill = np.broadcast_to(np.where(mask, 0.0, MASK_FILL)[:, None, :, :], scores.shape)
    weights = T.softmax(T.add(scores, fill), axis=-1)
    ctx = T.matmul(T.dropout(weights, dropout, rng), vh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return T.linear(ctx, W_O, b_O), weights


def encoder_layer(H: T.Tensor, visual, mask, params: dict[str, T.Tensor], prefix: str, cfg: ModelConfig, rng=None):
    q, k, v = project_qkv(H, visual, params, prefix, cfg.mode)
    a, weights = attention(q, k, v, mask, cfg.n_heads, params[f"{prefix}.attn.W_O"], params[f"{prefix}.attn.b_O"],
                           cfg.dropout, rng)
    x = T.layer_norm(T.add(H, T.dropout(a, cfg.dropout, rng)), params[f"{prefix}.ln1.gain"],
                     params[f"{prefix}.ln1.bias"], cfg.ln_eps)
    hidden = T.gelu(T.linear(x, params[f"{prefix}.ffn.W1"], params[f"{prefix}.ffn.b1"]))
    f = T.linear(hidden, params[f"{prefix}.ffn.W2"], params[f"{prefix}.ffn.b2"])
    out = T.layer_norm(T.add(x, T.dropout(f, cfg.dropout, rng)), params[f"{prefix}.ln2.gain"],
                       params[f"{prefix}.ln2.bias"], cfg.ln_eps)
    return out, weights


def pad_masks(batch: Batch, masks: list[np.ndarray]) -> np.ndarray:
    """Stack per-sequence masks; padding rows attend only themselves and are never attended."""
    b, s = batch.shape
    out = np.zeros((b, s, s), dtype=bool)
    for i, m in enumerate(masks):
        n = batch.lengths[i]
        if m.shape != (n, n):
            raise DimensionError(f"mask {i} has shape {m.shape}, sequence length {n}")
        out[i, :n, :n] = m
        pad = np.arange(n, s)
        out[i, pad, pad] = True
    return out


class DiMBERT:
    """Parameters plus the forward computations of the model and its heads."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        if config.vocab_size != len(vocab):
            raise DimensionError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        visual_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        params = init_embedding_params(config, rng)
        for layer in range(config.n_layers):
            params.update(init_layer_params(config, rng, f"layer{layer}", visual_rng))
        d, v = config.d_model, config.vocab_size
        if not config.tie_embeddings:
            params["head.mlm.W"] = T.parameter(rng.normal(0.0, config.std, size=(d, v)))
        params["head.mlm.b"] = T.parameter(np.zeros(v))
        params["head.ref.W"] = T.parameter(rng.normal(0.0, config.std, size=(d, 1)))
        params["head.ref.b"] = T.parameter(np.zeros(1))
        self.params: dict[str, T.Tensor] = params
        for name, p in params.items():
            p.name = name

    # parameter management ------------------------------------------------

    def parameters(self) -> Iterator[T.Tensor]:
        return iter(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, T.Tensor]]:
        return iter(self.params.items())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ContractError(f"state keys differ from model parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def clone(self) -> "DiMBERT":
        return copy.deepcopy(self)

    def tie_visual_to_textual(self) -> None:
        """Overwrite every visual projection with a copy of its textual counterpart."""
        for layer in range(self.config.n_layers):
            for name in PROJECTIONS:
                key = f"layer{layer}.attn.W{name}_V"
                if key in self.params:
                    self.params[key].data = self.params[f"layer{layer}.attn.W{name}_T"].data.copy()

    # forward --------------------------------------------------------------

    def embed(self, batch: Batch) -> T.Tensor:
        if (batch.position >= self.config.max_positions).any():
            raise LengthError("sequence is longer than the position table")
        return embed(batch, self.params, self.config.ln_eps)

    def encode(self, batch: Batch, mask: np.ndarray, return_attention: bool = False, rng=None,
               n_layers: int | None = None):
        """H^L for a batch under a (B, S, S) mask, optionally with per-layer attention weights."""
        h = self.embed(batch)
        weights = []
        for layer in range(self.config.n_layers if n_layers is None else n_layers):
            h, w = encoder_layer(h, batch.visual, mask, self.params, f"layer{layer}", self.config, rng)
            weights.append(w.data)
        return (h, weights) if return_attention else h

    def mlm_logits(self, H: T.Tensor, rows) -> T.Tensor:
        """Vocabulary logits at flat row indices (``b * S + i``) of H."""
        b, s, d = H.shape
        picked = T.gather_rows(T.reshape(H, (b * s, d)), rows)
        if self.config.tie_embeddings:
            weight = T.transpose(token_table(self.params), (1, 0))
        else:
            weight = self.params["head.mlm.W"]
        return T.linear(picked, weight, self.params["head.mlm.b"])

    def roi_scores(self, H: T.Tensor, batch: Batch) -> T.Tensor:
        """One referring score per RoI, in batch RoI order."""
        b, s, d = H.shape
        picked = T.gather_rows(T.reshape(H, (b * s, d)), batch.roi_flat)
        return T.reshape(T.linear(picked, self.params["head.ref.W"], self.params["head.ref.b"]), (len(batch.roi_flat),))

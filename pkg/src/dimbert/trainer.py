"""Adam, checkpoints, checkpoint averaging, and the pre-training / fine-tuning loops."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoding import referring_batch
from .errors import ConfigError, ContractError, FingerprintError, NonFiniteError
from .objectives import (
    MaskingPolicy,
    TaskKind,
    collate_instances,
    instance_loss,
    make_coverage_instances,
    make_instance,
    sample_task,
)
from .transformer import DiMBERT
from .vocab import Vocabulary

CHECKPOINT_MAGIC = b"DIMBCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    batch_size: int = 16
    # model
    mode: str = "DiM"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.0
    precision: str = "double"
    # inputs
    n_concepts: int = 5
    # pre-training
    pretrain_epochs: int = 10
    blm_weight: float = 0.25
    p_select: float = 0.15
    p_mask_token: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1
    mask_concepts: bool = False
    lr_pretrain: float = 3e-4
    domain_adapt: bool = True
    # fine-tuning
    caption_epochs: int = 10
    caption_scheme: str = "coverage"  # "coverage" | "policy"
    referring_epochs: int = 10
    lr_finetune: float = 1e-4
    warmup: float = 0.0  # fraction of a phase spent in linear warm-up
    average_last: int = 20
    # decoding
    beam_size: int = 3
    max_length: int = 20

    def __post_init__(self):
        if self.caption_scheme not in ("coverage", "policy"):
            raise ConfigError(f"unknown caption_scheme {self.caption_scheme!r}")
        if not 0.0 <= self.blm_weight <= 1.0:
            raise ConfigError("blm_weight must lie in [0, 1]")
        if self.batch_size < 1 or self.average_last < 1:
            raise ConfigError("batch_size and average_last must be >= 1")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup must lie in [0, 1)")
        MaskingPolicy(self.p_select, self.p_mask_token, self.p_random, self.p_keep)

    @property
    def policy(self) -> MaskingPolicy:
        return MaskingPolicy(self.p_select, self.p_mask_token, self.p_random, self.p_keep)

    @property
    def task_weights(self) -> dict:
        return {TaskKind.BLM: self.blm_weight, TaskKind.S2SLM: 1.0 - self.blm_weight}

    def model_config(self, vocab: Vocabulary, world=None) -> ModelConfig:
        extra = {}
        if world is not None:
            extra = {"d_r": world.d_r, "d_c": world.d_c, "max_rois": world.max_objects,
                     "max_positions": max(world.max_caption_len, self.max_length, self.n_concepts) + 2}
        return ModelConfig(vocab_size=len(vocab), d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                           mode=self.mode, dropout=self.dropout, **extra)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        typed = {}
        for key, raw in values.items():
            kind = type(getattr(cls(), key))
            if not isinstance(raw, str):
                typed[key] = kind(raw)
            elif kind is bool:
                if raw.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
                typed[key] = raw.strip().lower() in ("true", "1", "yes")
            else:
                try:
                    typed[key] = kind(raw.strip())
                except ValueError:
                    raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
        return cls(**typed)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse a flat ``key = value`` document (``#`` comments allowed)."""
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        return cls.from_mapping(dict(parser["run"]))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup_steps and self.step < self.warmup_steps:
            return self.lr * (self.step + 1) / self.warmup_steps
        return self.lr


def adam_step(params: dict[str, T.Tensor], state: AdamState) -> float:
    """One bias-corrected Adam update in place; returns the learning rate used."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"missing gradients for {missing[:3]}")
    lr = state.current_lr()
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return lr


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def model_fingerprint(config: ModelConfig, vocab: Vocabulary) -> str:
    blob = json.dumps({"config": config.to_dict(), "vocab": vocab.tokens}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    fingerprint: str
    config: dict
    vocab: list[str]
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.dtype.str).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    @classmethod
    def from_model(cls, model: DiMBERT, metadata: dict | None = None, optimizer: AdamState | None = None):
        opt = None
        if optimizer is not None:
            opt = {"step": optimizer.step, "m": {k: v.copy() for k, v in optimizer.m.items()},
                   "v": {k: v.copy() for k, v in optimizer.v.items()}}
        return cls(model_fingerprint(model.config, model.vocab), model.config.to_dict(), list(model.vocab.tokens),
                   model.state_dict(), dict(metadata or {}), opt)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config)

    def build_model(self) -> DiMBERT:
        vocab = Vocabulary(self.vocab[4:])
        model = DiMBERT(self.model_config(), vocab)
        self.load_into(model)
        return model

    def load_into(self, model: DiMBERT) -> None:
        expected = model_fingerprint(model.config, model.vocab)
        if expected != self.fingerprint:
            raise FingerprintError(f"checkpoint fingerprint {self.fingerprint} != model fingerprint {expected}")
        model.load_state_dict(self.params)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the binary container.

    Layout: 8-byte magic ``DIMBCKPT``, little-endian u32 version, u64 header
    length, UTF-8 JSON header, then every tensor's little-endian bytes back to
    back at the offsets listed in the header.
    """
    tensors: list[tuple[str, np.ndarray]] = sorted(ckpt.params.items())
    if ckpt.optimizer is not None:
        tensors += [(f"opt.m/{k}", v) for k, v in sorted(ckpt.optimizer["m"].items())]
        tensors += [(f"opt.v/{k}", v) for k, v in sorted(ckpt.optimizer["v"].items())]
    directory, chunks, offset = [], [], 0
    for name, arr in tensors:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                          "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "metadata": ckpt.metadata,
        "checksum": ckpt.checksum(),
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer["step"],
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise FingerprintError(f"checkpoint fingerprint {header['fingerprint']} != expected {expected_fingerprint}")
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        name = entry["name"]
        if name.startswith("opt.m/"):
            m[name[6:]] = arr
        elif name.startswith("opt.v/"):
            v[name[6:]] = arr
        else:
            params[name] = arr
    opt = None if header["optimizer_step"] is None else {"step": header["optimizer_step"], "m": m, "v": v}
    ckpt = Checkpoint(header["fingerprint"], header["config"], header["vocab"], params, header["metadata"], opt)
    if ckpt.checksum() != header["checksum"]:
        raise ContractError(f"{path}: checksum mismatch")
    return ckpt


def average_checkpoints(checkpoints: Sequence[Checkpoint], last_k: int = 20) -> Checkpoint:
    """Arithmetic mean of the parameters of the last ``last_k`` checkpoints; optimizer state is dropped."""
    if not checkpoints:
        raise ContractError("need at least one checkpoint to average")
    chosen = list(checkpoints)[-last_k:]
    first = chosen[0]
    for c in chosen[1:]:
        if c.fingerprint != first.fingerprint:
            raise FingerprintError("cannot average checkpoints with different fingerprints")
    params = {}
    for name, arr in first.params.items():
        # offsets from the first checkpoint keep identical inputs bitwise unchanged
        base = arr.astype(np.float64)
        offset = np.zeros(arr.shape, dtype=np.float64)
        for c in chosen[1:]:
            offset += c.params[name] - base
        params[name] = (base + offset / len(chosen)).astype(arr.dtype)
    meta = {"averaged": len(chosen), "sources": [c.metadata for c in chosen]}
    return Checkpoint(first.fingerprint, first.config, first.vocab, params, meta, None)


# --------------------------------------------------------------------------
# Training loops
# --------------------------------------------------------------------------


@dataclass
class RunLog:
    """Append-only rows of (step, phase, task, loss, lr, wall_time)."""

    path: Path | None = None
    rows: list[tuple] = field(default_factory=list)
    _start: float = field(default_factory=time.perf_counter)

    def append(self, step: int, phase: str, task: str, loss: float, lr: float) -> None:
        row = (step, phase, task, loss, lr, round(time.perf_counter() - self._start, 4))
        self.rows.append(row)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a", encoding="utf-8") as fh:
                if new:
                    fh.write("step\tphase\ttask\tloss\tlr\twall_time\n")
                fh.write("\t".join(str(x) for x in row) + "\n")

    def losses(self, phase: str | None = None, task: str | None = None) -> list[float]:
        return [r[3] for r in self.rows if (phase is None or r[1] == phase) and (task is None or r[2] == task)]


@dataclass
class PhaseResult:
    checkpoints: list[Checkpoint]
    log: RunLog
    task_counts: dict[str, int] = field(default_factory=dict)


def _phase_rng(seed: int, phase: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(phase.encode()[:8], "little")]))


def _optimizer(run: RunConfig, lr: float, steps: int) -> AdamState:
    return AdamState(lr=lr, warmup_steps=int(math.ceil(run.warmup * steps)))


# parameters that receive no gradient in a phase (the other task's head)
_FROZEN = {"pretrain": ("head.ref.",), "domain": ("head.ref.",), "caption": ("head.ref.",), "referring": ("head.mlm.",)}


def phase_parameters(model: DiMBERT, phase: str) -> dict[str, T.Tensor]:
    frozen = _FROZEN.get(phase, ())
    return {k: p for k, p in model.params.items() if not k.startswith(frozen)}


def _train_step(model: DiMBERT, loss_fn: Callable[[], T.Tensor], state: AdamState, phase: str) -> tuple[float, float]:
    model.zero_grad()
    try:
        loss = loss_fn()
        T.backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"{phase} step {state.step}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"{phase} step {state.step}: loss is {value}")
    lr = adam_step(phase_parameters(model, phase), state)
    model.zero_grad()
    return value, lr


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _snapshot(model, phase, epoch, state) -> Checkpoint:
    return Checkpoint.from_model(model, {"phase": phase, "epoch": epoch, "step": state.step})


def pretrain(model: DiMBERT, examples: Sequence, run: RunConfig, log: RunLog | None = None,
             phase: str = "pretrain", epochs: int | None = None) -> PhaseResult:
    """Mixed BLM / S2SLM masked language modelling; one checkpoint per epoch."""
    log = RunLog() if log is None else log
    epochs = run.pretrain_epochs if epochs is None else epochs
    rng = _phase_rng(run.seed, phase)
    steps_per_epoch = math.ceil(len(examples) / run.batch_size)
    state = _optimizer(run, run.lr_pretrain, epochs * steps_per_epoch)
    counts = {k.value: 0 for k in TaskKind}
    ckpts = []
    drop_rng = rng if run.dropout > 0 else None
    for epoch in range(epochs):
        for idx in _batches(len(examples), run.batch_size, rng):
            kind = sample_task(rng, run.task_weights)
            counts[kind.value] += 1
            insts = [make_instance(examples[i], kind, model.vocab, rng, run.policy, run.n_concepts, run.mask_concepts)
                     for i in idx]
            ib = collate_instances(insts)
            value, lr = _train_step(model, lambda: instance_loss(model, ib, drop_rng, run.mask_concepts), state, phase)
            log.append(state.step, phase, kind.value, value, lr)
        ckpts.append(_snapshot(model, phase, epoch, state))
    return PhaseResult(ckpts, log, counts)


def _check_init(model: DiMBERT, init: Checkpoint | None) -> None:
    if init is not None:
        init.load_into(model)


def finetune_caption(model: DiMBERT, examples: Sequence, run: RunConfig, init: Checkpoint | None = None,
                     log: RunLog | None = None, epochs: int | None = None) -> PhaseResult:
    """Continued S2SLM training on (scene, caption) pairs."""
    _check_init(model, init)
    log = RunLog() if log is None else log
    epochs = run.caption_epochs if epochs is None else epochs
    rng = _phase_rng(run.seed, "caption")
    drop_rng = rng if run.dropout > 0 else None
    if run.caption_scheme == "coverage":
        pool = [inst for ex in examples for inst in make_coverage_instances(ex, model.vocab, run.n_concepts)]
        n_items = len(pool)
    else:
        n_items = len(examples)
    state = _optimizer(run, run.lr_finetune, epochs * math.ceil(n_items / run.batch_size))
    ckpts = []
    for epoch in range(epochs):
        for idx in _batches(n_items, run.batch_size, rng):
            if run.caption_scheme == "coverage":
                insts = [pool[i] for i in idx]
            else:
                insts = [make_instance(examples[i], TaskKind.S2SLM, model.vocab, rng, run.policy, run.n_concepts)
                         for i in idx]
            ib = collate_instances(insts)
            value, lr = _train_step(model, lambda: instance_loss(model, ib, drop_rng), state, "caption")
            log.append(state.step, "caption", TaskKind.S2SLM.value, value, lr)
        ckpts.append(_snapshot(model, "caption", epoch, state))
    if not ckpts:
        ckpts.append(_snapshot(model, "caption", -1, state))
    return PhaseResult(ckpts, log)


def referring_loss_batch(model: DiMBERT, items, rng=None) -> T.Tensor:
    """Mean over tasks of the per-task summed binary cross-entropy over RoIs."""
    batch, mask = referring_batch(model, [(rois, concepts, query) for rois, concepts, query, _ in items])
    scores = model.roi_scores(model.encode(batch, mask, rng=rng), batch)
    labels = np.zeros(scores.shape)
    offset = 0
    for (rois, _, _, target), seq in zip(items, batch.seqs):
        if not 0 <= target < seq.n_rois:
            raise ContractError(f"target {target} out of range for {seq.n_rois} RoIs")
        labels[offset + target] = 1.0
        offset += seq.n_rois
    return T.mul(T.bce_with_logits(scores, labels), 1.0 / len(items))


def referring_items(pairs, n_concepts: int | None) -> list[tuple]:
    """(rois, concept words, query, target) from (Example, ReferringTask) pairs."""
    out = []
    for ex, task in pairs:
        words = ex.concepts.words if n_concepts is None else ex.concepts.words[:n_concepts]
        out.append((ex.rois, words, list(task.query), task.target))
    return out


def finetune_referring(model: DiMBERT, pairs: Sequence, run: RunConfig, init: Checkpoint | None = None,
                       log: RunLog | None = None, epochs: int | None = None) -> PhaseResult:
    """Binary cross-entropy on the RoI scores of (Example, ReferringTask) pairs."""
    _check_init(model, init)
    log = RunLog() if log is None else log
    epochs = run.referring_epochs if epochs is None else epochs
    items = referring_items(pairs, run.n_concepts)
    rng = _phase_rng(run.seed, "referring")
    drop_rng = rng if run.dropout > 0 else None
    state = _optimizer(run, run.lr_finetune, epochs * math.ceil(len(items) / run.batch_size))
    ckpts = []
    for epoch in range(epochs):
        for idx in _batches(len(items), run.batch_size, rng):
            chunk = [items[i] for i in idx]
            value, lr = _train_step(model, lambda: referring_loss_batch(model, chunk, drop_rng), state, "referring")
            log.append(state.step, "referring", "REF", value, lr)
        ckpts.append(_snapshot(model, "referring", epoch, state))
    if not ckpts:
        ckpts.append(_snapshot(model, "referring", -1, state))
    return PhaseResult(ckpts, log)

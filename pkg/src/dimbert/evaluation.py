"""Metric reports, the ablation grid, the concept-count sweep and attention dumps."""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoding import GenerationConfig, generation_input, referring_input
from .embeddings import Batch
from .errors import ContractError
from .metrics import bleu, exact_match, generate_captions, referring_accuracy, token_accuracy
from .objectives import MASK_BUILDERS, TaskKind
from .trainer import (
    RunConfig,
    RunLog,
    average_checkpoints,
    finetune_caption,
    finetune_referring,
    pretrain,
    referring_items,
)
from .transformer import DiMBERT, pad_masks
from .world import (
    WorldConfig,
    concept_ground_truth,
    default_vocabulary,
    derive_seed,
    extract_concepts,
    generate_scene,
)

RATE_FIELDS = ("token_accuracy", "exact_match", "referring_accuracy")


@dataclass
class MetricReport:
    token_accuracy: float | None = None
    bleu: list[float] = field(default_factory=list)  # BLEU-1..4
    exact_match: float | None = None
    referring_accuracy: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    fingerprint: str = ""
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        for name in RATE_FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"{name}={value} is not a rate")
        if any(not 0.0 <= b <= 1.0 for b in self.bleu):
            raise ContractError("BLEU scores must lie in [0, 1]")

    def metrics(self) -> dict[str, float]:
        """Flat name -> value view of the numeric fields that are present."""
        out = {name: getattr(self, name) for name in RATE_FIELDS if getattr(self, name) is not None}
        out.update({f"bleu{n + 1}": b for n, b in enumerate(self.bleu)})
        return out

    def to_text(self) -> str:
        """Tab-separated ``key<TAB>json-value`` lines."""
        return "".join(f"{k}\t{json.dumps(v, sort_keys=True)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, raw = line.split("\t", 1)
                values[key] = json.loads(raw)
        return cls(**values)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate_model(model: DiMBERT, run: RunConfig, captions: Sequence = (), referring: Sequence = (),
                   fingerprint: str = "", seeds: Sequence[int] = (), generation: GenerationConfig | None = None,
                   teacher_references: Sequence | None = None,
                   teacher_terminated: Sequence[bool] | None = None) -> MetricReport:
    """Caption metrics on ``captions`` (examples) and accuracy on ``referring`` (example, task) pairs."""
    report = MetricReport(fingerprint=fingerprint, seeds=list(seeds))
    if captions:
        gen = generation or GenerationConfig(run.beam_size, run.max_length)
        refs = [list(ex.caption) for ex in captions]
        report.token_accuracy = token_accuracy(model, captions, run.n_concepts, teacher_references,
                                              terminated=teacher_terminated)
        cands = generate_captions(model, captions, run.n_concepts, gen)
        report.bleu = [bleu(cands, refs, n) for n in range(1, 5)]
        report.exact_match = exact_match(cands, refs)
        report.counts["captions"] = len(captions)
    if referring:
        report.referring_accuracy = referring_accuracy(model, referring_items(referring, run.n_concepts))
        report.counts["referring"] = len(referring)
    return report


def finalize(model: DiMBERT, checkpoints, last_k: int) -> None:
    """Load the average of the last ``last_k`` checkpoints into ``model``."""
    average_checkpoints(checkpoints, last_k).load_into(model)


# --------------------------------------------------------------------------
# Ablation grid
# --------------------------------------------------------------------------

PRETRAIN_VARIANTS = ("none", "BLM", "S2SLM", "both")


@dataclass(frozen=True)
class AblationCell:
    mode: str
    concepts: bool
    pretrain: str

    @property
    def label(self) -> str:
        return f"{self.mode}/concepts-{'on' if self.concepts else 'off'}/{self.pretrain}"


def ablation_cells() -> list[AblationCell]:
    return [AblationCell(m, c, p) for m, c, p in itertools.product(("ESA", "DiM"), (True, False), PRETRAIN_VARIANTS)]


def cell_run(cell: AblationCell, run: RunConfig, seed: int) -> RunConfig:
    blm = {"none": run.blm_weight, "BLM": 1.0, "S2SLM": 0.0, "both": run.blm_weight}[cell.pretrain]
    return dataclasses.replace(run, seed=seed, mode=cell.mode, n_concepts=run.n_concepts if cell.concepts else 0,
                               blm_weight=blm, pretrain_epochs=0 if cell.pretrain == "none" else run.pretrain_epochs)


def run_cell(cell: AblationCell, run: RunConfig, seed: int, world: WorldConfig, train: Sequence, test: Sequence,
             train_ref: Sequence = (), test_ref: Sequence = ()) -> MetricReport:
    """Pre-train (unless ``none``), then fine-tune captioning and referring from the same weights."""
    crun = cell_run(cell, run, seed)
    vocab = default_vocabulary()
    model = DiMBERT(crun.model_config(vocab, world), vocab, seed=seed)
    log = RunLog()
    if crun.pretrain_epochs:
        finalize(model, pretrain(model, train, crun, log).checkpoints, crun.average_last)
    referring_model = model.clone()
    finalize(model, finetune_caption(model, train, crun, log=log).checkpoints, crun.average_last)
    report = evaluate_model(model, crun, captions=test, fingerprint=crun.fingerprint(), seeds=[seed])
    if train_ref and test_ref:
        result = finetune_referring(referring_model, train_ref, crun, log=log)
        finalize(referring_model, result.checkpoints, crun.average_last)
        report.referring_accuracy = referring_accuracy(referring_model, referring_items(test_ref, crun.n_concepts))
        report.counts["referring"] = len(test_ref)
    return report


@dataclass
class AblationGrid:
    seeds: list[int]
    fingerprint: str
    reports: dict[AblationCell, list[MetricReport]]

    def summary(self) -> list[dict]:
        """Per cell and metric: mean, min, max and per-seed values."""
        rows = []
        for cell in ablation_cells():
            per_seed = [r.metrics() for r in self.reports[cell]]
            for name in per_seed[0]:
                values = [m[name] for m in per_seed]
                rows.append({"mode": cell.mode, "concepts": "on" if cell.concepts else "off",
                             "pretrain": cell.pretrain, "metric": name, "mean": float(np.mean(values)),
                             "min": min(values), "max": max(values), "values": values})
        return rows

    def _means(self) -> dict[tuple, float]:
        return {(r["mode"], r["concepts"], r["pretrain"], r["metric"]): r["mean"] for r in self.summary()}

    def deltas(self) -> list[dict]:
        """DiM minus ESA at fixed (concepts, pretrain); concepts on minus off at fixed (mode, pretrain)."""
        means = self._means()
        metrics = sorted({k[3] for k in means})
        rows = []
        for c, p, name in itertools.product(("on", "off"), PRETRAIN_VARIANTS, metrics):
            rows.append({"comparison": "DiM-ESA", "fixed": f"concepts-{c}/{p}", "metric": name,
                         "delta": means[("DiM", c, p, name)] - means[("ESA", c, p, name)]})
        for m, p, name in itertools.product(("ESA", "DiM"), PRETRAIN_VARIANTS, metrics):
            rows.append({"comparison": "concepts on-off", "fixed": f"{m}/{p}", "metric": name,
                         "delta": means[(m, "on", p, name)] - means[(m, "off", p, name)]})
        return rows

    def summary_tsv(self) -> str:
        head = f"# fingerprint={self.fingerprint} seeds={','.join(map(str, self.seeds))}\n"
        lines = ["mode\tconcepts\tpretrain\tmetric\tmean\tmin\tmax\tvalues"]
        for r in self.summary():
            lines.append(f"{r['mode']}\t{r['concepts']}\t{r['pretrain']}\t{r['metric']}\t{r['mean']:.6f}\t"
                         f"{r['min']:.6f}\t{r['max']:.6f}\t{','.join(f'{v:.6f}' for v in r['values'])}")
        return head + "\n".join(lines) + "\n"

    def deltas_tsv(self) -> str:
        head = f"# fingerprint={self.fingerprint} seeds={','.join(map(str, self.seeds))}\n"
        lines = ["comparison\tfixed\tmetric\tdelta"]
        lines += [f"{r['comparison']}\t{r['fixed']}\t{r['metric']}\t{r['delta']:+.6f}" for r in self.deltas()]
        return head + "\n".join(lines) + "\n"


def run_ablation(run: RunConfig, world: WorldConfig, train: Sequence, test: Sequence, seeds: Sequence[int] = (0, 1, 2),
                 train_ref: Sequence = (), test_ref: Sequence = (), progress=None) -> AblationGrid:
    """Every cell of mode x concepts x pre-training, each over the same corpus and seed list."""
    reports = {}
    for cell in ablation_cells():
        reports[cell] = [run_cell(cell, run, s, world, train, test, train_ref, test_ref) for s in seeds]
        if progress is not None:
            progress(cell)
    return AblationGrid(list(seeds), run.fingerprint(), reports)


# --------------------------------------------------------------------------
# Concept sweep
# --------------------------------------------------------------------------


def sweep_concepts(ms: Sequence[int], n_scenes: int, seed: int, world: WorldConfig) -> list[dict]:
    """Micro-averaged precision / recall / F1 of the top-M extractor against the caption's words."""
    scenes = [generate_scene(derive_seed(seed, i), world) for i in range(n_scenes)]
    truths = [concept_ground_truth(s, world) for s in scenes]
    rows = []
    for m in ms:
        tp = n_pred = n_true = 0
        for scene, truth in zip(scenes, truths):
            predicted = set(extract_concepts(scene, m, world).words) if m > 0 else set()
            tp += len(predicted & truth)
            n_pred += len(predicted)
            n_true += len(truth)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        rows.append({"M": int(m), "precision": p, "recall": r, "f1": f, "scenes": n_scenes})
    return rows


def sweep_tsv(rows: Sequence[dict], seed: int) -> str:
    lines = [f"# seed={seed}", "M\tprecision\trecall\tf1\tscenes"]
    lines += [f"{r['M']}\t{r['precision']:.6f}\t{r['recall']:.6f}\t{r['f1']:.6f}\t{r['scenes']}" for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Attention dumps
# --------------------------------------------------------------------------


def _labels(model: DiMBERT, seq) -> list[str]:
    out = []
    for tok, roi in zip(seq.token_ids, seq.roi_index):
        out.append(f"RoI{int(roi)}" if roi >= 0 else model.vocab.tokens[int(tok)])
    return out


def _top(row: np.ndarray, columns: np.ndarray, k: int = 3) -> list[int]:
    # stable sort: equal weights keep column order
    order = np.argsort(-row[columns], kind="stable")
    return [int(columns[i]) for i in order[:k]]


def dump_attention(model: DiMBERT, rois, concepts: Sequence[str], sentence: Sequence[str],
                   kind: TaskKind = TaskKind.BLM, generation: bool = False) -> dict:
    """Head-averaged last-layer attention with text-to-RoI and RoI-to-text top-3 lists.

    ``sentence`` is a caption or a referring query.  With ``generation`` the
    sequence ends in ``[MASK]`` as during decoding.
    """
    if generation:
        seq = generation_input(model, rois, concepts, model.vocab.encode(sentence))
    else:
        seq = referring_input(model, rois, concepts, sentence)
    mask = MASK_BUILDERS[TaskKind(kind)](seq)
    batch = Batch.collate([seq])
    _, weights = model.encode(batch, pad_masks(batch, [mask]), return_attention=True)
    matrix = weights[-1][0].mean(axis=0)
    labels = _labels(model, seq)
    roi_cols = seq.roi_rows
    text_cols = np.flatnonzero(~seq.visual)
    text_to_roi = []
    for row in seq.sentence_rows[:len(sentence)]:
        cols = roi_cols[mask[row, roi_cols]]
        top = _top(matrix[row], cols)
        text_to_roi.append({"row": int(row), "token": labels[row],
                            "top": [{"roi": int(seq.roi_index[c]), "column": c, "weight": float(matrix[row, c])}
                                    for c in top]})
    roi_to_text = []
    for row in roi_cols:
        cols = text_cols[mask[row, text_cols]]
        top = _top(matrix[row], cols)
        roi_to_text.append({"roi": int(seq.roi_index[row]), "row": int(row),
                            "top": [{"column": c, "token": labels[c], "weight": float(matrix[row, c])} for c in top]})
    return {
        "format": "dimbert-attention",
        "version": 1,
        "layer": model.config.n_layers - 1,
        "mask": TaskKind(kind).value,
        "tokens": labels,
        "modality": seq.modality,
        "segments": [int(s) for s in seq.segment],
        "attendable": mask.astype(int).tolist(),
        "matrix": matrix.tolist(),
        "text_to_roi": text_to_roi,
        "roi_to_text": roi_to_text,
    }


def query_alignment(model: DiMBERT, pairs: Sequence, n_concepts: int | None) -> float:
    """Fraction of referring tasks whose query noun attends most to the target RoI."""
    if not pairs:
        return 0.0
    hits = 0
    for rois, concepts, query, target in referring_items(pairs, n_concepts):
        dump = dump_attention(model, rois, concepts, query)
        hits += int(dump["text_to_roi"][-1]["top"][0]["roi"] == target)
    return hits / len(pairs)

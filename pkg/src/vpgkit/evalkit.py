"""Instruction-following evaluation: ROUGE-L for open-ended tasks, option matching for choice tasks.

Records are JSONL, one per line::

    {"task_id": "...", "category": "...", "task_instruction": "...",
     "segments": [{"img": "a.ppm"}, {"t": "some text"}, ...],
     "options": ["...", ...] | null, "answer_index": 0 | null, "response": "..."}

Image paths are resolved relative to the records file.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scenegen as sg
from .decoder import MixedSequence
from .numkit.kernels import lcs_length
from .svg import bar_chart
from .vocab import CAPTION_INSTRUCTION, DIFF_INSTRUCTION, KIND_OPTIONS

log = logging.getLogger(__name__)

CHOICE_METRIC = "accuracy"
OPEN_METRIC = "rouge_l"


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class EvalRecord:
    task_id: str
    category: str
    task_instruction: str
    segments: tuple          # ("t", text) | ("img", path)
    response: str
    options: tuple[str, ...] | None = None
    answer_index: int | None = None

    def __post_init__(self):
        if self.options is not None:
            if len(self.options) < 2:
                raise ValueError(f"{self.task_id}: choice records need at least two options")
            if self.answer_index is None or not 0 <= self.answer_index < len(self.options):
                raise ValueError(f"{self.task_id}: answer_index {self.answer_index} out of range")
        elif self.answer_index is not None:
            raise ValueError(f"{self.task_id}: answer_index given without options")
        for kind, _ in self.segments:
            if kind not in ("t", "img"):
                raise ValueError(f"unknown segment kind {kind!r}")

    @property
    def is_choice(self) -> bool:
        return self.options is not None

    @property
    def image_refs(self) -> list[str]:
        return [v for k, v in self.segments if k == "img"]

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "category": self.category,
                "task_instruction": self.task_instruction,
                "segments": [{k: v} for k, v in self.segments],
                "options": list(self.options) if self.options is not None else None,
                "answer_index": self.answer_index, "response": self.response}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        segs = []
        for s in d["segments"]:
            if len(s) != 1:
                raise ValueError(f"segment must have exactly one key, got {s}")
            (k, v), = s.items()
            segs.append((k, v))
        opts = d.get("options")
        return cls(d["task_id"], d["category"], d["task_instruction"], tuple(segs), d["response"],
                   tuple(opts) if opts is not None else None, d.get("answer_index"))


def write_records(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))


def read_records(path) -> list[EvalRecord]:
    return [EvalRecord.from_dict(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def cap_per_task(records, cap: int) -> list[EvalRecord]:
    """Keep the first ``cap`` records of every task, preserving order."""
    seen: Counter = Counter()
    out = []
    for r in records:
        if seen[r.task_id] < cap:
            out.append(r)
            seen[r.task_id] += 1
    return out


# ---------------------------------------------------------------------------
# metrics


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def rouge_l(candidate: str, reference: str) -> float:
    """Sentence-level ROUGE-L F1 over lowercase whitespace tokens."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    ids: dict[str, int] = {}
    a = [ids.setdefault(w, len(ids)) for w in cand]
    b = [ids.setdefault(w, len(ids)) for w in ref]
    lcs = lcs_length(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


_LETTER = r"\(?([A-Z])\)?"
_NUMBER = r"\(?([0-9]+)\)?"
# checked in order; letters are 0-based from A, numbers 1-based
_PATTERNS = (
    (re.compile(rf"^\s*{_LETTER}[.:]?\s*$"), "letter"),
    (re.compile(rf"^\s*{_NUMBER}[.:]?\s*$"), "number"),
    (re.compile(rf"(?i:answer\s*(?:is|:))\s*{_LETTER}(?=$|[\s.,;:!?])"), "letter"),
    (re.compile(rf"(?i:answer\s*(?:is|:))\s*{_NUMBER}(?=$|[\s.,;:!?])"), "number"),
    (re.compile(rf"(?i:option)\s*{_LETTER}(?=$|[\s.,;:!?])"), "letter"),
    (re.compile(rf"(?i:option)\s*{_NUMBER}(?=$|[\s.,;:!?])"), "number"),
    (re.compile(r"^\s*\(([A-Z])\)"), "letter"),
    (re.compile(r"^\s*\(([0-9]+)\)"), "number"),
)


@dataclass(frozen=True)
class OptionMatch:
    index: int
    branch: str        # "exact" | "pattern" | "tfidf" | "fallback"
    degenerate: bool = False


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def tfidf_scores(output: str, options) -> list[float]:
    """Cosine similarity between the output and each option under option-corpus TF-IDF.

    tf is the raw count, idf = ln(N / (1 + df)) with df counted over the
    options; output words absent from every option carry no weight.
    """
    docs = [Counter(_words(o)) for o in options]
    n = len(docs)
    df = Counter(w for d in docs for w in d)
    idf = {w: math.log(n / (1 + c)) for w, c in df.items()}
    q = Counter(w for w in _words(output) if w in idf)
    qv = {w: c * idf[w] for w, c in q.items()}
    qn = math.sqrt(sum(v * v for v in qv.values()))
    scores = []
    for d in docs:
        dv = {w: c * idf[w] for w, c in d.items()}
        dn = math.sqrt(sum(v * v for v in dv.values()))
        if qn == 0.0 or dn == 0.0:
            scores.append(0.0)
        else:
            scores.append(sum(qv[w] * dv.get(w, 0.0) for w in qv) / (qn * dn))
    return scores


def match_option_detail(output: str, options) -> OptionMatch:
    if len(options) < 2:
        raise ValueError("match_option needs at least two options")
    norm = " ".join(_tokens(output))
    for i, o in enumerate(options):
        if norm == " ".join(_tokens(o)):
            return OptionMatch(i, "exact")
    for pattern, kind in _PATTERNS:
        m = pattern.search(output)
        if m:
            tok = m.group(1)
            idx = ord(tok) - ord("A") if kind == "letter" else int(tok) - 1
            if 0 <= idx < len(options):
                return OptionMatch(idx, "pattern")
    scores = tfidf_scores(output, options)
    best = max(scores)
    if best <= 0.0:
        return OptionMatch(0, "fallback", degenerate=True)
    return OptionMatch(scores.index(best), "tfidf")


def match_option(output: str, options) -> int:
    """Index of the option the output refers to; see ``match_option_detail`` for the branch taken."""
    return match_option_detail(output, options).index


# ---------------------------------------------------------------------------
# models


class EchoModel:
    """Oracle responder: returns each record's gold response."""

    def respond(self, records, images) -> list[str]:
        return [r.response for r in records]


class ConstantModel:
    def __init__(self, text: str):
        self.text = text

    def respond(self, records, images) -> list[str]:
        return [self.text for _ in records]


class VPGCResponder:
    """Greedy-decoding adapter: bos, the instance segments in order, the instruction, then the response marker."""

    def __init__(self, model, max_new: int = 16, batch_size: int = 32, use_vpgc: bool = True):
        self.model = model
        self.max_new = max_new
        self.batch_size = batch_size
        self.use_vpgc = use_vpgc

    def _sequence(self, record: EvalRecord) -> MixedSequence:
        v = self.model.backbone.vocab
        seq = MixedSequence().text([v.bos])
        j = 0
        for kind, val in record.segments:
            if kind == "t":
                seq.text(v.encode(val))
            else:
                seq.image(j)
                j += 1
        return seq.text(v.encode(record.task_instruction) + [v.resp])

    def respond(self, records, images) -> list[str]:
        bb = self.model.backbone
        out: list[str | None] = [None] * len(records)
        groups: dict[int, list[int]] = {}
        for i, imgs in enumerate(images):
            groups.setdefault(len(imgs), []).append(i)
        for n_img, idx in sorted(groups.items()):
            for s in range(0, len(idx), self.batch_size):
                part = idx[s:s + self.batch_size]
                seqs = [self._sequence(records[i]) for i in part]
                feats = bb.encode_batch([images[i] for i in part]) if n_img else None
                gen = self.model.generate(seqs, feats, self.max_new) if self.use_vpgc \
                    else _generate_off(self.model, seqs, feats, self.max_new)
                for i, ids in zip(part, gen):
                    out[i] = bb.vocab.decode(ids)
        return out


def _generate_off(model, seqs, feats, max_new):
    from .vpgc import VPGCConfig, VPGCModel
    off = VPGCModel(model.backbone, VPGCConfig(variant="off"))
    return off.generate(seqs, feats, max_new)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class TaskScore:
    task: str
    category: str
    metric: str
    n: int
    score: float
    record_scores: tuple[float, ...] = ()


@dataclass
class MetricResult:
    tasks: list[TaskScore] = field(default_factory=list)
    categories: dict[str, float] = field(default_factory=dict)
    skipped: int = 0
    degenerate_matches: int = 0

    def task(self, name: str) -> TaskScore:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)


def load_images(record: EvalRecord, root) -> list[sg.Raster] | None:
    out = []
    for ref in record.image_refs:
        path = Path(ref) if root is None else Path(root) / ref
        try:
            out.append(sg.read_ppm(path))
        except (OSError, ValueError) as exc:
            log.warning("record %s: cannot read image %s (%s)", record.task_id, path, exc)
            return None
    return out


def evaluate(model, records, root=None) -> MetricResult:
    """Score every resolvable record; tasks keep first-appearance order."""
    result = MetricResult()
    usable, images = [], []
    for r in records:
        imgs = load_images(r, root)
        if imgs is None:
            result.skipped += 1
            continue
        usable.append(r)
        images.append(imgs)
    if not usable:
        return result
    outputs = model.respond(usable, images)
    per_task: dict[str, list[float]] = {}
    meta: dict[str, tuple[str, str]] = {}
    for r, out in zip(usable, outputs):
        if r.is_choice:
            m = match_option_detail(out, r.options)
            result.degenerate_matches += m.degenerate
            score, metric = float(m.index == r.answer_index), CHOICE_METRIC
        else:
            score, metric = rouge_l(out, r.response), OPEN_METRIC
        prev = meta.setdefault(r.task_id, (r.category, metric))
        if prev != (r.category, metric):
            raise ValueError(f"task {r.task_id} mixes categories or metric types")
        per_task.setdefault(r.task_id, []).append(score)
    for task, scores in per_task.items():
        cat, metric = meta[task]
        result.tasks.append(TaskScore(task, cat, metric, len(scores), float(np.mean(scores)), tuple(scores)))
    cats: dict[str, list[float]] = {}
    for t in result.tasks:
        cats.setdefault(t.category, []).append(t.score)
    result.categories = {c: float(np.mean(v)) for c, v in cats.items()}
    return result


@dataclass
class ShuffleReport:
    original: MetricResult
    shuffled: MetricResult
    deltas: dict[str, float]
    skipped: int


def permute_images(record: EvalRecord, perm) -> EvalRecord:
    """Reorder image segments by ``perm``; text segments keep their positions."""
    refs = record.image_refs
    if sorted(perm) != list(range(len(refs))):
        raise ValueError(f"{perm} is not a permutation of {len(refs)} images")
    it = iter([refs[p] for p in perm])
    segs = tuple((k, next(it)) if k == "img" else (k, v) for k, v in record.segments)
    return EvalRecord(record.task_id, record.category, record.task_instruction, segs, record.response,
                      record.options, record.answer_index)


def shuffle_probe(model, records, seed: int = 0, root=None, identity: bool = False) -> ShuffleReport:
    """Score change (shuffled minus original) when image order is permuted uniformly at random."""
    multi = [r for r in records if len(r.image_refs) >= 2]
    skipped = len(records) - len(multi)
    rng = np.random.default_rng(seed)
    shuffled = []
    for r in multi:
        n = len(r.image_refs)
        perm = list(range(n)) if identity else [int(i) for i in rng.permutation(n)]
        shuffled.append(permute_images(r, perm))
    orig = evaluate(model, multi, root)
    shuf = evaluate(model, shuffled, root)
    deltas = {t.task: shuf.task(t.task).score - t.score for t in orig.tasks}
    return ShuffleReport(orig, shuf, deltas, skipped)


# ---------------------------------------------------------------------------
# reports


REPORT_COLUMNS = ("task", "category", "metric", "n", "score")


def report_csv(result: MetricResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for t in result.tasks:
        w.writerow([t.task, t.category, t.metric, t.n, repr(t.score)])
    return buf.getvalue()


def write_report(result: MetricResult, csv_path, svg_path=None) -> None:
    Path(csv_path).write_text(report_csv(result))
    if svg_path is not None:
        Path(svg_path).write_text(bar_chart([t.task for t in result.tasks], [t.score for t in result.tasks],
                                            title="score per task", y_max=1.0))


# ---------------------------------------------------------------------------
# record generation


KIND_INDEX = {"DELETE": 0, "ADD": 1, "MODIFY": 2, "SWAP": 3}


def records_from_pairs(pairs, out_dir, prefix: str = "eval") -> list[EvalRecord]:
    """Difference (open-ended), change-kind (choice) and captioning records for held-out pairs."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    diff, kind, cap = [], [], []
    for i, p in enumerate(pairs):
        before, after = f"images/{prefix}{i:05d}_before.ppm", f"images/{prefix}{i:05d}_after.ppm"
        sg.write_ppm(out / before, p.raster_before)
        sg.write_ppm(out / after, p.raster_after)
        segs = (("img", before), ("img", after))
        diff.append(EvalRecord("difference", "discrimination", DIFF_INSTRUCTION, segs, p.target))
        k = KIND_INDEX[p.edit.kind]
        kind.append(EvalRecord("change_kind", "discrimination", DIFF_INSTRUCTION, segs, KIND_OPTIONS[k],
                               tuple(KIND_OPTIONS), k))
        cap.append(EvalRecord("caption", "captioning", CAPTION_INSTRUCTION, (("img", before),),
                              sg.caption(p.scene_before)))
    return diff + kind + cap

"""Automatic evaluation: n-gram diversity, reference overlap, and the
one-to-many ratios computed over repeated-generation logs.

A generation log holds, per case, a fixed number of repetitions, each a
(grounding, generated tokens) pair where the grounding is either a span or
a knowledge-sentence index. Metrics that need at least two repetitions are
reported as absent-with-reason instead of silently dropping to zero.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import DialogueCase
from .spans import Span

METRIC_KEYS = (
    "bleu_1",
    "bleu_2",
    "rouge_1",
    "rouge_2",
    "rouge_l",
    "entropy_1",
    "entropy_2",
    "intra_dist_1",
    "intra_dist_2",
    "inter_dist_1",
    "inter_dist_2",
    "unique_grounding_ratio",
    "unique_generation_ratio",
    "effect_of_grounding",
)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _check_n(n: int) -> None:
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")


def distinct_n(responses: Sequence[Sequence[str]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across the responses."""
    _check_n(n)
    grams = [g for r in responses for g in _ngrams(r, n)]
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def entropy_n(responses: Sequence[Sequence[str]], n: int) -> float:
    """Shannon entropy (natural log) of the pooled n-gram frequencies."""
    _check_n(n)
    counts = Counter(g for r in responses for g in _ngrams(r, n))
    total = sum(counts.values())
    if total == 0:
        return 0.0
    return -sum((c / total) * math.log(c / total) for c in counts.values())


# ---------------------------------------------------------------------------
# Reference overlap
# ---------------------------------------------------------------------------


def _clipped_matches(hyp_grams: list, references: Sequence[Sequence[str]], n: int) -> int:
    hyp_counts = Counter(hyp_grams)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in Counter(_ngrams(ref, n)).items():
            if c > max_ref[g]:
                max_ref[g] = c
    return sum(min(c, max_ref[g]) for g, c in hyp_counts.items())


def _closest_ref_len(hyp_len: int, references: Sequence[Sequence[str]]) -> int:
    return min((len(r) for r in references), key=lambda L: (abs(L - hyp_len), L))


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def _f1(overlap: float, len_h: int, len_r: int) -> float:
    if overlap == 0 or len_h == 0 or len_r == 0:
        return 0.0
    p, r = overlap / len_h, overlap / len_r
    return 2 * p * r / (p + r)


def _rouge_n(hyp: Sequence[str], references: Sequence[Sequence[str]], n: int) -> float:
    hyp_grams = Counter(_ngrams(hyp, n))
    best = 0.0
    for ref in references:
        ref_grams = Counter(_ngrams(ref, n))
        overlap = sum((hyp_grams & ref_grams).values())
        best = max(best, _f1(overlap, sum(hyp_grams.values()), sum(ref_grams.values())))
    return best


def _rouge_l(hyp: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    return max((_f1(_lcs_len(hyp, r), len(hyp), len(r)) for r in references), default=0.0)


@dataclass
class _BleuStats:
    matches: list[int]  # per order 1..max_order
    totals: list[int]
    hyp_len: int = 0
    ref_len: int = 0

    @classmethod
    def empty(cls, max_order: int) -> "_BleuStats":
        return cls(matches=[0] * max_order, totals=[0] * max_order)

    def add(self, hyp: Sequence[str], references: Sequence[Sequence[str]]) -> None:
        for k in range(len(self.matches)):
            grams = _ngrams(hyp, k + 1)
            self.totals[k] += len(grams)
            self.matches[k] += _clipped_matches(grams, references, k + 1)
        self.hyp_len += len(hyp)
        self.ref_len += _closest_ref_len(len(hyp), references)

    def bleu(self, order: int) -> float:
        if self.hyp_len == 0:
            return 0.0
        precisions = []
        for k in range(order):
            if self.totals[k] == 0 or self.matches[k] == 0:
                return 0.0
            precisions.append(self.matches[k] / self.totals[k])
        geo = math.exp(sum(math.log(p) for p in precisions) / order)
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1.0 - self.ref_len / self.hyp_len)
        return bp * geo


def reference_overlap(
    hypothesis: Sequence[str], references: Sequence[Sequence[str]]
) -> dict[str, float]:
    """BLEU-1/2 (clipped precision, brevity vs closest reference) and
    ROUGE-1/2/L (F1, max over references) for one hypothesis."""
    if not references:
        raise ValueError("references must be non-empty")
    if not hypothesis:
        return {k: 0.0 for k in ("bleu_1", "bleu_2", "rouge_1", "rouge_2", "rouge_l")}
    stats = _BleuStats.empty(2)
    stats.add(hypothesis, references)
    return {
        "bleu_1": stats.bleu(1),
        "bleu_2": stats.bleu(2),
        "rouge_1": _rouge_n(hypothesis, references, 1),
        "rouge_2": _rouge_n(hypothesis, references, 2),
        "rouge_l": _rouge_l(hypothesis, references),
    }


def corpus_reference_overlap(
    pairs: Iterable[tuple[Sequence[str], Sequence[Sequence[str]]]],
) -> dict[str, float]:
    """Corpus-level BLEU (pooled counts) and mean ROUGE over all pairs."""
    stats = _BleuStats.empty(2)
    rouge_sums = {"rouge_1": 0.0, "rouge_2": 0.0, "rouge_l": 0.0}
    count = 0
    for hyp, refs in pairs:
        if not refs:
            raise ValueError("references must be non-empty")
        count += 1
        if not hyp:
            continue
        stats.add(hyp, refs)
        rouge_sums["rouge_1"] += _rouge_n(hyp, refs, 1)
        rouge_sums["rouge_2"] += _rouge_n(hyp, refs, 2)
        rouge_sums["rouge_l"] += _rouge_l(hyp, refs)
    if count == 0:
        raise ValueError("no hypothesis/reference pairs")
    out = {k: v / count for k, v in rouge_sums.items()}
    out["bleu_1"] = stats.bleu(1)
    out["bleu_2"] = stats.bleu(2)
    return out


# ---------------------------------------------------------------------------
# Generation logs
# ---------------------------------------------------------------------------


@dataclass
class Repetition:
    grounding: Span | int  # span, or knowledge-sentence index
    tokens: list[str]

    def grounding_key(self) -> tuple:
        if isinstance(self.grounding, Span):
            return ("span", self.grounding.start, self.grounding.end)
        return ("sentence", int(self.grounding))


@dataclass
class GenerationRecord:
    case_id: str
    repetitions: list[Repetition]


@dataclass
class GenerationLog:
    records: list[GenerationRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        counts = {len(r.repetitions) for r in self.records}
        if len(counts) > 1:
            raise ValueError(f"repetition_count must be uniform across cases, got {sorted(counts)}")

    @property
    def repetition_count(self) -> int:
        return len(self.records[0].repetitions) if self.records else 0

    def validate_against(self, cases: dict[str, DialogueCase]) -> None:
        for rec in self.records:
            if rec.case_id not in cases:
                raise ValueError(f"generation log references unknown case {rec.case_id}")
            case = cases[rec.case_id]
            l_k = len(case.knowledge_tokens)
            m = len(case.knowledge_sentences)
            for rep in rec.repetitions:
                if isinstance(rep.grounding, Span):
                    if rep.grounding.end >= l_k:
                        raise ValueError(
                            f"case {rec.case_id}: span {rep.grounding} exceeds knowledge length {l_k}"
                        )
                elif not 0 <= int(rep.grounding) < m:
                    raise ValueError(
                        f"case {rec.case_id}: sentence index {rep.grounding} out of range ({m} sentences)"
                    )


def save_generation_log(log: GenerationLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log.records:
            reps = []
            for rep in rec.repetitions:
                if isinstance(rep.grounding, Span):
                    g = {"start": rep.grounding.start, "end": rep.grounding.end}
                else:
                    g = {"sentence_index": int(rep.grounding)}
                reps.append({"grounding": g, "tokens": rep.tokens})
            f.write(json.dumps({"case_id": rec.case_id, "repetitions": reps}, ensure_ascii=False) + "\n")


def load_generation_log(path: str | Path) -> GenerationLog:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                reps = []
                for rep in obj["repetitions"]:
                    g = rep["grounding"]
                    grounding = (
                        Span(g["start"], g["end"]) if "start" in g else int(g["sentence_index"])
                    )
                    reps.append(Repetition(grounding=grounding, tokens=list(rep["tokens"])))
                records.append(GenerationRecord(case_id=obj["case_id"], repetitions=reps))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad record on line {line_no}: {exc}") from exc
    return GenerationLog(records=records)


# ---------------------------------------------------------------------------
# Log-level metrics
# ---------------------------------------------------------------------------


@dataclass
class IntraInter:
    intra: float | None
    inter: float
    intra_absent_reason: str | None = None


def intra_inter_dist(log: GenerationLog, n: int) -> IntraInter:
    """Intra: mean distinct-n within each case's repetitions; inter:
    distinct-n over all generations pooled."""
    _check_n(n)
    if not log.records:
        raise ValueError("empty generation log")
    pooled = [rep.tokens for rec in log.records for rep in rec.repetitions]
    inter = distinct_n(pooled, n)
    if log.repetition_count < 2:
        return IntraInter(intra=None, inter=inter, intra_absent_reason="repetition_count < 2")
    intra = sum(
        distinct_n([rep.tokens for rep in rec.repetitions], n) for rec in log.records
    ) / len(log.records)
    return IntraInter(intra=intra, inter=inter)


def one2many_ratios(log: GenerationLog) -> dict[str, float]:
    """Per-case unique grounding/generation counts over repetitions,
    averaged across cases; effect = generation ratio / grounding ratio."""
    if not log.records:
        raise ValueError("empty generation log")
    if log.repetition_count < 2:
        raise ValueError("one-to-many ratios need repetition_count >= 2")
    g_ratios, r_ratios = [], []
    for rec in log.records:
        reps = rec.repetitions
        g_ratios.append(len({rep.grounding_key() for rep in reps}) / len(reps))
        r_ratios.append(len({tuple(rep.tokens) for rep in reps}) / len(reps))
    unique_grounding = sum(g_ratios) / len(g_ratios)
    unique_generation = sum(r_ratios) / len(r_ratios)
    return {
        "unique_grounding_ratio": unique_grounding,
        "unique_generation_ratio": unique_generation,
        "effect_of_grounding": unique_generation / unique_grounding,
    }


def build_report(log: GenerationLog, cases: dict[str, DialogueCase]) -> dict:
    """Full metrics report; metrics that cannot be computed carry
    {"absent": reason} instead of a number."""
    log.validate_against(cases)
    if not log.records:
        raise ValueError("empty generation log")
    pairs = [
        (rep.tokens, cases[rec.case_id].responses)
        for rec in log.records
        for rep in rec.repetitions
    ]
    pooled = [hyp for hyp, _ in pairs]
    report: dict = dict(corpus_reference_overlap(pairs))
    report["entropy_1"] = entropy_n(pooled, 1)
    report["entropy_2"] = entropy_n(pooled, 2)
    for n in (1, 2):
        ii = intra_inter_dist(log, n)
        report[f"inter_dist_{n}"] = ii.inter
        report[f"intra_dist_{n}"] = (
            ii.intra if ii.intra is not None else {"absent": ii.intra_absent_reason}
        )
    if log.repetition_count >= 2:
        report.update(one2many_ratios(log))
    else:
        reason = "repetition_count < 2"
        report["unique_grounding_ratio"] = {"absent": reason}
        report["unique_generation_ratio"] = {"absent": reason}
        report["effect_of_grounding"] = {"absent": reason}
    return {k: report[k] for k in METRIC_KEYS}

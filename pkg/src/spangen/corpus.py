"""Multi-reference corpus construction, filtering and splitting.

A dialogue case is (context utterances, knowledge sentences, response set).
This module builds synthetic desk-scale corpora with planted ground-truth
spans, applies the general/focused filter cascade to any pre-extracted
corpus, extracts cases from reply trees, and splits by a deterministic
hash of the case id. Corpus files are JSONL, one case per line.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .spans import Span, unigram_f1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# Appendix-style thresholds, read literally: responses need at least
# MIN_RESPONSE_TOKENS tokens, knowledge sentences strictly more than
# KNOWLEDGE_TOKEN_FLOOR, and the best response/sentence pair at least
# SIMILARITY_FLOOR unigram F1 with n >= 2 responses, m >= 3 sentences.
MIN_RESPONSE_TOKENS = 6
KNOWLEDGE_TOKEN_FLOOR = 15
SIMILARITY_FLOOR = 0.1
MIN_RESPONSES = 2
MIN_KNOWLEDGE_SENTENCES = 3

RULE_RESPONSE_LENGTH = "rule-1"
RULE_KNOWLEDGE_LENGTH = "rule-3"
RULE_SIMILARITY = "rule-4"


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, collapse whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class PlantedSpan:
    """Hidden diagnostic metadata: which knowledge region a synthetic
    response was copied from (absolute token indices into K)."""

    response_index: int
    sentence_index: int
    start: int
    end: int


@dataclass
class DialogueCase:
    case_id: str
    context: list[list[str]]
    knowledge_sentences: list[list[str]]
    responses: list[list[str]]
    planted_spans: list[PlantedSpan] = field(default_factory=list)
    allow_empty_opening: bool = False

    def __post_init__(self) -> None:
        if not self.responses:
            raise ValueError(f"case {self.case_id}: empty response set")
        for i, r in enumerate(self.responses):
            if not r:
                raise ValueError(f"case {self.case_id}: response {i} is empty")
        if not self.knowledge_sentences or any(not s for s in self.knowledge_sentences):
            raise ValueError(f"case {self.case_id}: empty knowledge sentence")
        for i, u in enumerate(self.context):
            if not u and not (i == 0 and self.allow_empty_opening):
                raise ValueError(f"case {self.case_id}: empty context utterance {i}")

    @property
    def knowledge_tokens(self) -> list[str]:
        return [t for s in self.knowledge_sentences for t in s]

    @property
    def context_tokens(self) -> list[str]:
        return [t for u in self.context for t in u]

    def sentence_boundaries(self) -> list[tuple[int, int]]:
        """Inclusive (start, end) token ranges of each knowledge sentence;
        by construction they partition the concatenated knowledge exactly."""
        bounds = []
        offset = 0
        for s in self.knowledge_sentences:
            bounds.append((offset, offset + len(s) - 1))
            offset += len(s)
        return bounds

    def sentence_of_position(self, pos: int) -> int:
        for j, (lo, hi) in enumerate(self.sentence_boundaries()):
            if lo <= pos <= hi:
                return j
        raise ValueError(f"position {pos} outside knowledge of length {len(self.knowledge_tokens)}")


@dataclass(frozen=True)
class TreeNode:
    node_id: str
    tokens: tuple[str, ...]
    parent_id: str | None


@dataclass
class MessageTree:
    """Reply tree: one root, every other node replies to exactly one parent."""

    nodes: list[TreeNode]
    knowledge_ref: str

    def __post_init__(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        by_id = {n.node_id: n for n in self.nodes}
        roots = [n for n in self.nodes if n.parent_id is None]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        for n in self.nodes:
            if n.parent_id is not None and n.parent_id not in by_id:
                raise ValueError(f"node {n.node_id} has unknown parent {n.parent_id}")
        for n in self.nodes:
            seen = set()
            cur: TreeNode | None = n
            while cur is not None:
                if cur.node_id in seen:
                    raise ValueError(f"cycle through node {cur.node_id}")
                seen.add(cur.node_id)
                cur = by_id[cur.parent_id] if cur.parent_id is not None else None

    @property
    def root(self) -> TreeNode:
        return next(n for n in self.nodes if n.parent_id is None)

    def children(self, node_id: str) -> list[TreeNode]:
        return [n for n in self.nodes if n.parent_id == node_id]

    def path_to(self, node_id: str) -> list[TreeNode]:
        by_id = {n.node_id: n for n in self.nodes}
        path = []
        cur: TreeNode | None = by_id[node_id]
        while cur is not None:
            path.append(cur)
            cur = by_id[cur.parent_id] if cur.parent_id is not None else None
        return list(reversed(path))


def extract_cases(
    tree: MessageTree,
    knowledge_sentences: Sequence[Sequence[str]],
    case_prefix: str | None = None,
) -> list[DialogueCase]:
    """One case per node with children: context is the root-to-node path,
    responses are all of that node's children (sibling groups stay whole)."""
    prefix = case_prefix if case_prefix is not None else tree.knowledge_ref
    cases = []
    for node in tree.nodes:
        kids = tree.children(node.node_id)
        if not kids:
            continue
        cases.append(
            DialogueCase(
                case_id=f"{prefix}:{node.node_id}",
                context=[list(n.tokens) for n in tree.path_to(node.node_id)],
                knowledge_sentences=[list(s) for s in knowledge_sentences],
                responses=[list(k.tokens) for k in kids],
            )
        )
    return cases


def passes_general_filter(case: DialogueCase) -> tuple[bool, str | None]:
    """Filter cascade; the reason names the first violated rule.

    Rule 2 (HTML paragraph tagging) does not apply: inputs are already
    sentence lists.
    """
    if any(len(r) < MIN_RESPONSE_TOKENS for r in case.responses):
        return False, RULE_RESPONSE_LENGTH
    if any(len(s) <= KNOWLEDGE_TOKEN_FLOOR for s in case.knowledge_sentences):
        return False, RULE_KNOWLEDGE_LENGTH
    if len(case.responses) < MIN_RESPONSES:
        return False, RULE_SIMILARITY
    if len(case.knowledge_sentences) < MIN_KNOWLEDGE_SENTENCES:
        return False, RULE_SIMILARITY
    best = max(
        unigram_f1(r, s) for r in case.responses for s in case.knowledge_sentences
    )
    if best < SIMILARITY_FLOOR:
        return False, RULE_SIMILARITY
    return True, None


def _argmax_sentence(response: Sequence[str], sentences: Sequence[Sequence[str]]) -> int:
    """Most similar knowledge sentence; F1 ties break to the lowest index."""
    scores = [unigram_f1(response, s) for s in sentences]
    return max(range(len(scores)), key=lambda j: (scores[j], -j))


def passes_focused_filter(case: DialogueCase) -> bool:
    """True iff every response is most similar to the same knowledge sentence."""
    ok, reason = passes_general_filter(case)
    if not ok:
        raise ValueError(
            f"case {case.case_id}: focused filter requires a general-passing case ({reason})"
        )
    indices = {_argmax_sentence(r, case.knowledge_sentences) for r in case.responses}
    return len(indices) == 1


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_CARRIER_PREFIXES = [
    ("i", "think", "that"),
    ("maybe", "it", "is", "true", "that"),
    ("they", "say", "that"),
    ("well", "i", "heard", "that"),
    ("so", "basically"),
    ("honestly", "i", "believe"),
]
_CARRIER_SUFFIXES = [
    ("right", "?"),
    ("i", "guess", "."),
    ("for", "sure", "."),
    ("or", "so", "it", "goes", "."),
    ("!",),
]
_CONTEXT_OPENERS = [
    ("what", "do", "you", "know", "about"),
    ("tell", "me", "more", "about"),
    ("any", "thoughts", "on"),
]

_SENTENCE_LEN = (16, 24)  # strictly above the rule-3 floor
_SPAN_LEN = (3, 6)
_N_RESPONSES = (2, 5)
_M_SENTENCES = (3, 8)


@dataclass
class SynthConfig:
    cases: int = 200
    vocab_size: int = 200
    seed: int = 13
    focused_fraction: float = 0.3  # cases whose responses all target one sentence
    context_utterances: tuple[int, int] = (1, 3)

    def validate(self) -> None:
        if self.cases < 1:
            raise ValueError(f"cases must be >= 1, got {self.cases}")
        if self.vocab_size < 20:
            raise ValueError(f"vocab_size must be >= 20, got {self.vocab_size}")
        if not 0.0 <= self.focused_fraction <= 1.0:
            raise ValueError(f"focused_fraction must lie in [0, 1], got {self.focused_fraction}")


def synth_corpus(config: SynthConfig) -> list[DialogueCase]:
    """Deterministic synthetic multi-reference corpus.

    Each response embeds a contiguous copy of a knowledge sub-span in
    templated carrier text; the copied region is recorded as a planted
    span for diagnostics. Every generated case passes the general filter.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tag = hashlib.sha256(str(config.seed).encode("utf-8")).hexdigest()[:8]
    words = [f"w{i:03d}" for i in range(config.vocab_size)]
    cases = []
    for idx in range(config.cases):
        m = int(rng.integers(_M_SENTENCES[0], _M_SENTENCES[1] + 1))
        sentences = [
            [words[int(w)] for w in rng.integers(0, config.vocab_size, int(rng.integers(*_SENTENCE_LEN, endpoint=True)))]
            for _ in range(m)
        ]
        boundaries = []
        offset = 0
        for s in sentences:
            boundaries.append(offset)
            offset += len(s)

        n = int(rng.integers(_N_RESPONSES[0], _N_RESPONSES[1] + 1))
        focused = rng.random() < config.focused_fraction
        pinned = int(rng.integers(0, m)) if focused else None
        responses, planted = [], []
        for ri in range(n):
            j = pinned if pinned is not None else int(rng.integers(0, m))
            s_len = len(sentences[j])
            span_len = int(rng.integers(_SPAN_LEN[0], min(_SPAN_LEN[1], s_len) + 1))
            local = int(rng.integers(0, s_len - span_len + 1))
            copied = sentences[j][local : local + span_len]
            prefix = list(_CARRIER_PREFIXES[int(rng.integers(0, len(_CARRIER_PREFIXES)))])
            suffix = list(_CARRIER_SUFFIXES[int(rng.integers(0, len(_CARRIER_SUFFIXES)))])
            responses.append(prefix + copied + suffix)
            planted.append(
                PlantedSpan(
                    response_index=ri,
                    sentence_index=j,
                    start=boundaries[j] + local,
                    end=boundaries[j] + local + span_len - 1,
                )
            )

        n_utt = int(rng.integers(config.context_utterances[0], config.context_utterances[1] + 1))
        context = []
        for _ in range(n_utt):
            opener = list(_CONTEXT_OPENERS[int(rng.integers(0, len(_CONTEXT_OPENERS)))])
            topic_sentence = sentences[int(rng.integers(0, m))]
            k_hint = int(rng.integers(2, 5))
            start = int(rng.integers(0, len(topic_sentence) - k_hint + 1))
            context.append(opener + topic_sentence[start : start + k_hint] + ["?"])

        case = DialogueCase(
            case_id=f"synth-{tag}-{idx:05d}",
            context=context,
            knowledge_sentences=sentences,
            responses=responses,
            planted_spans=planted,
        )
        ok, reason = passes_general_filter(case)
        if not ok:  # construction guarantees this; fail loudly if it drifts
            raise RuntimeError(f"synthetic case {case.case_id} violates {reason}")
        cases.append(case)
    return cases


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass
class CorpusSplit:
    train: list[DialogueCase]
    valid: list[DialogueCase]
    general_test: list[DialogueCase]
    focused_test: list[DialogueCase]

    def as_manifest(self) -> dict[str, list[str]]:
        return {
            name: [c.case_id for c in getattr(self, name)]
            for name in ("train", "valid", "general_test", "focused_test")
        }


def _split_hash(seed: int, case_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{case_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def split_corpus(
    cases: Sequence[DialogueCase],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 13,
) -> CorpusSplit:
    """Deterministic hash split into train/valid/general_test; focused_test
    is then carved out of general_test by the focused filter.

    Cases are ordered by sha256(seed, case_id) and sliced by
    largest-remainder counts, so sizes match the ratios exactly and the
    assignment is reproducible and leakage-free by case id.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case_id in corpus")
    if not cases:
        return CorpusSplit([], [], [], [])

    ordered = sorted(cases, key=lambda c: (_split_hash(seed, c.case_id), c.case_id))
    n = len(ordered)
    exact = [r * n for r in ratios]
    counts = [int(x) for x in exact]
    for _ in range(n - sum(counts)):
        j = max(range(3), key=lambda i: (exact[i] - counts[i], -i))
        counts[j] += 1
    train = ordered[: counts[0]]
    valid = ordered[counts[0] : counts[0] + counts[1]]
    general = ordered[counts[0] + counts[1] :]

    focused, remaining = [], []
    for case in general:
        ok, _ = passes_general_filter(case)
        if ok and passes_focused_filter(case):
            focused.append(case)
        else:
            remaining.append(case)
    return CorpusSplit(train=train, valid=valid, general_test=remaining, focused_test=focused)


# ---------------------------------------------------------------------------
# Serialization (JSONL corpus + JSON split manifest)
# ---------------------------------------------------------------------------


def case_to_dict(case: DialogueCase) -> dict:
    obj = {
        "case_id": case.case_id,
        "context": case.context,
        "knowledge": case.knowledge_sentences,
        "responses": case.responses,
    }
    if case.planted_spans:
        obj["meta"] = {
            "planted_spans": [
                {
                    "response_index": p.response_index,
                    "sentence_index": p.sentence_index,
                    "start": p.start,
                    "end": p.end,
                }
                for p in case.planted_spans
            ]
        }
    return obj


def case_from_dict(obj: dict) -> DialogueCase:
    planted = [
        PlantedSpan(**p) for p in obj.get("meta", {}).get("planted_spans", [])
    ]
    return DialogueCase(
        case_id=obj["case_id"],
        context=[list(u) for u in obj["context"]],
        knowledge_sentences=[list(s) for s in obj["knowledge"]],
        responses=[list(r) for r in obj["responses"]],
        planted_spans=planted,
    )


def save_corpus(cases: Iterable[DialogueCase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for case in cases:
            f.write(json.dumps(case_to_dict(case), ensure_ascii=False) + "\n")


def load_corpus(path: str | Path) -> list[DialogueCase]:
    cases = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                cases.append(case_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad case on line {line_no}: {exc}") from exc
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate case_id")
    return cases


def save_manifest(split: CorpusSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(split.as_manifest(), f, indent=2)
        f.write("\n")


def load_manifest(path: str | Path) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if not isinstance(manifest, dict):
        raise ValueError(f"{path}: manifest must be an object mapping split -> case ids")
    return {str(k): [str(x) for x in v] for k, v in manifest.items()}


def select_split(
    cases: Sequence[DialogueCase], manifest: dict[str, list[str]], name: str
) -> list[DialogueCase]:
    if name not in manifest:
        raise ValueError(f"unknown split {name!r}; manifest has {sorted(manifest)}")
    by_id = {c.case_id: c for c in cases}
    missing = [cid for cid in manifest[name] if cid not in by_id]
    if missing:
        raise ValueError(f"split {name!r} references missing case ids: {missing[:5]}")
    return [by_id[cid] for cid in manifest[name]]


@dataclass
class FilterReport:
    total: int
    accepted: int
    rejected: dict[str, int]

    def as_dict(self) -> dict:
        return {"total": self.total, "accepted": self.accepted, "rejected": self.rejected}


def filter_corpus(cases: Sequence[DialogueCase]) -> tuple[list[DialogueCase], FilterReport]:
    """Apply the general filter, tallying rejections per rule."""
    kept = []
    rejected = {RULE_RESPONSE_LENGTH: 0, RULE_KNOWLEDGE_LENGTH: 0, RULE_SIMILARITY: 0}
    for case in cases:
        ok, reason = passes_general_filter(case)
        if ok:
            kept.append(case)
        else:
            rejected[reason] += 1
    return kept, FilterReport(total=len(cases), accepted=len(kept), rejected=rejected)

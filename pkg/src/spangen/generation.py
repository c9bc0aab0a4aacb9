"""Repeated generation over a split: the span path samples groundings from
the prior joint; the sentence path disables the end distribution and grounds
on the whole knowledge sentence the sampled start falls in."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .corpus import DialogueCase
from .metrics import GenerationLog, GenerationRecord, Repetition
from .nets import DecodeConfig, Model, generator_decode
from .spans import Span, joint_prior, sample_span
from .training import prior_distributions

MODES = ("span", "sentence")


def generate_log(
    cases: Sequence[DialogueCase],
    model: Model,
    repetitions: int,
    mode: str,
    decode_config: DecodeConfig,
    rng: np.random.Generator,
) -> GenerationLog:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    records = []
    with torch.no_grad():
        for case in cases:
            knowledge = case.knowledge_tokens
            p_start, p_end = prior_distributions(case, model)
            p_joint = joint_prior(p_start, p_end) if mode == "span" else None
            start_cdf = np.cumsum(p_start.numpy())
            reps = []
            for _ in range(repetitions):
                if mode == "span":
                    span = sample_span(p_joint, rng)
                    grounding: Span | int = span
                else:
                    s = int(np.searchsorted(start_cdf, rng.random(), side="right"))
                    s = min(s, len(knowledge) - 1)
                    j = case.sentence_of_position(s)
                    lo, hi = case.sentence_boundaries()[j]
                    span = Span(lo, hi)
                    grounding = j
                tokens = generator_decode(
                    case.context_tokens, span.tokens(knowledge), decode_config, model
                )
                reps.append(Repetition(grounding=grounding, tokens=tokens))
            records.append(GenerationRecord(case_id=case.case_id, repetitions=reps))
    return GenerationLog(records=records)

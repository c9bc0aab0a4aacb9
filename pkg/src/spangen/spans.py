"""Probability math over knowledge spans.

A span is a contiguous token range [start, end] (inclusive) in the
concatenated knowledge text. The prior factorizes as a start distribution
times a start-constrained end distribution, so its joint is upper
triangular; the mean-field posterior is a plain outer product of its two
marginals. Everything here is encoder-independent: callers hand in logits
or probability vectors and get joints, samples, divergences and the
unigram-F1 kernel used both for corpus filtering and pseudo-span tagging.

All dense math runs in float64 torch tensors so the same code serves
plain evaluation and gradient-carrying training paths.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

DEFAULT_WINDOW_SIZES = (5, 10, 15)


@dataclass(frozen=True)
class Span:
    """Inclusive token range [start, end] within the knowledge sequence."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def tokens(self, knowledge: Sequence[str]) -> list[str]:
        if self.end >= len(knowledge):
            raise ValueError(
                f"span ({self.start}, {self.end}) exceeds knowledge length {len(knowledge)}"
            )
        return list(knowledge[self.start : self.end + 1])


def _as_vector(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    if t.dim() != 1:
        raise ValueError(f"{name} must be 1-D, got shape {tuple(t.shape)}")
    if t.numel() == 0:
        raise ValueError(f"{name} is empty")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return t


def _as_distribution(x, name: str, tol: float = 1e-6) -> torch.Tensor:
    t = _as_vector(x, name)
    if (t < 0).any():
        raise ValueError(f"{name} has negative entries")
    total = float(t.detach().sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} sums to {total}, expected 1")
    return t


def softmax_distribution(scores) -> torch.Tensor:
    """Numerically stable softmax: max-subtraction, sums to 1."""
    t = _as_vector(scores, "scores")
    shifted = t - t.max()
    e = torch.exp(shifted)
    return e / e.sum()


def constrained_end_distribution(end_probs, z_s: int) -> torch.Tensor:
    """Renormalize the end distribution onto positions >= z_s.

    A zero tail mass (possible only through floating-point underflow;
    softmax outputs are strictly positive) falls back to uniform over the
    valid tail so the joint stays well-defined. The underlying formula
    leaves this case undefined.
    """
    p = _as_distribution(end_probs, "end_probs")
    l_k = p.numel()
    if not 0 <= z_s < l_k:
        raise ValueError(f"z_s={z_s} out of range for length {l_k}")
    tail = p[z_s:]
    total = tail.sum()
    out = torch.zeros_like(p)
    if float(total.detach()) <= 0.0:
        out[z_s:] = 1.0 / (l_k - z_s)
    else:
        out[z_s:] = tail / total
    return out


def joint_prior(start_probs, end_probs) -> torch.Tensor:
    """Upper-triangular joint: joint[s, e] = start[s] * end[e] / sum(end[s:]).

    Rows whose end-tail mass underflows to zero use a uniform tail (see
    constrained_end_distribution). Differentiable when handed tensors
    that carry gradients.
    """
    start = _as_distribution(start_probs, "start_probs")
    end = _as_distribution(end_probs, "end_probs")
    if start.numel() != end.numel():
        raise ValueError("start_probs and end_probs must have equal length")
    l_k = start.numel()
    # tail[s] = sum_{j >= s} end[j]
    tail = torch.flip(torch.cumsum(torch.flip(end, [0]), 0), [0])
    tri = torch.triu(torch.ones((l_k, l_k), dtype=end.dtype, device=end.device))
    safe_tail = torch.where(tail > 0, tail, torch.ones_like(tail))
    cond = tri * end.unsqueeze(0) / safe_tail.unsqueeze(1)
    # uniform fallback for rows with zero tail mass
    counts = torch.arange(l_k, 0, -1, dtype=end.dtype, device=end.device)
    uniform = tri / counts.unsqueeze(1)
    cond = torch.where((tail > 0).unsqueeze(1), cond, uniform)
    return start.unsqueeze(1) * cond


def joint_posterior(q_start, q_end) -> torch.Tensor:
    """Mean-field joint: the full outer product, not constrained to e >= s."""
    qs = _as_distribution(q_start, "q_start")
    qe = _as_distribution(q_end, "q_end")
    if qs.numel() != qe.numel():
        raise ValueError("q_start and q_end must have equal length")
    return torch.outer(qs, qe)


def clamp_joint_to_spans(joint: torch.Tensor) -> torch.Tensor:
    """Push a (possibly full) joint through e := max(s, e).

    Mass below the diagonal folds onto the diagonal, giving the law of the
    clamped sample: a valid upper-triangular span distribution. Triangular
    inputs pass through unchanged.
    """
    if joint.dim() != 2 or joint.shape[0] != joint.shape[1]:
        raise ValueError(f"joint must be square, got {tuple(joint.shape)}")
    upper = torch.triu(joint, diagonal=1)
    diag = torch.tril(joint).sum(dim=1)
    return upper + torch.diag_embed(diag)


def sample_span(joint, rng: np.random.Generator) -> Span:
    """Draw (s, e) with probability joint[s, e]; e < s draws clamp to e = s."""
    t = joint if torch.is_tensor(joint) else torch.as_tensor(joint, dtype=torch.float64)
    if t.dim() != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"joint must be square, got {tuple(t.shape)}")
    flat = t.detach().cpu().numpy().reshape(-1).astype(np.float64)
    if (flat < 0).any() or not np.isfinite(flat).all():
        raise ValueError("joint has negative or non-finite entries")
    total = flat.sum()
    if total <= 0.0:
        raise ValueError("cannot sample from an all-zero joint")
    cdf = np.cumsum(flat / total)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    idx = min(idx, flat.size - 1)
    s, e = divmod(idx, t.shape[0])
    return Span(s, max(s, e))


def kl_joint(q, p) -> torch.Tensor:
    """KL(q || p) = sum q * ln(q / p) with 0 ln 0 = 0; returns +inf where
    q puts mass outside p's support."""
    qt = q if torch.is_tensor(q) else torch.as_tensor(q, dtype=torch.float64)
    pt = p if torch.is_tensor(p) else torch.as_tensor(p, dtype=torch.float64)
    if qt.shape != pt.shape:
        raise ValueError(f"shape mismatch: {tuple(qt.shape)} vs {tuple(pt.shape)}")
    support = qt > 0
    if bool((support & (pt <= 0)).any()):
        return torch.tensor(math.inf, dtype=qt.dtype)
    safe_q = torch.where(support, qt, torch.ones_like(qt))
    safe_p = torch.where(support, pt, torch.ones_like(pt))
    return (safe_q * (torch.log(safe_q) - torch.log(safe_p)))[support].sum()


def unigram_f1(a: Sequence[str], b: Sequence[str]) -> float:
    """Harmonic mean of clipped-count unigram precision/recall; symmetric."""
    if not a or not b:
        return 0.0
    overlap = sum((Counter(a) & Counter(b)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(a)
    recall = overlap / len(b)
    return 2 * precision * recall / (precision + recall)


def candidate_windows(
    length: int, window_sizes: Iterable[int] = DEFAULT_WINDOW_SIZES
) -> list[Span]:
    """Sliding-window candidate set: every full window of each size; a size
    larger than the knowledge clips to the whole knowledge. Duplicates are
    dropped."""
    sizes = sorted(set(int(w) for w in window_sizes))
    if not sizes or sizes[0] <= 0:
        raise ValueError("window_sizes must be a non-empty set of positive lengths")
    if length <= 0:
        raise ValueError("knowledge is empty")
    seen: set[tuple[int, int]] = set()
    out: list[Span] = []
    for w in sizes:
        for start in range(max(1, length - w + 1)):
            end = min(start + w - 1, length - 1)
            if (start, end) not in seen:
                seen.add((start, end))
                out.append(Span(start, end))
    return out


def pseudo_span_tag(
    response: Sequence[str],
    knowledge_tokens: Sequence[str],
    window_sizes: Iterable[int] = DEFAULT_WINDOW_SIZES,
) -> Span:
    """Highest unigram-F1 sliding-window span for a response.

    Ties break toward the shorter span, then the earlier start, so tagging
    is deterministic. An all-zero similarity therefore lands on the
    earliest shortest window.
    """
    best: Span | None = None
    best_key: tuple[float, int, int] | None = None
    for span in candidate_windows(len(knowledge_tokens), window_sizes):
        f1 = unigram_f1(span.tokens(knowledge_tokens), list(response))
        key = (f1, -len(span), -span.start)
        if best_key is None or key > best_key:
            best, best_key = span, key
    assert best is not None
    return best

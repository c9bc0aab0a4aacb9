"""Wake-sleep training with an adversarially reweighted span ELBO.

The sleep phase augments each case's response set by decoding from
posterior-sampled spans and trains a discriminator to tell observed from
augmented responses. The wake phase freezes the discriminator and updates
the readers and generator on the augmented set, weighting responses by
normalized discriminator scores: the posterior gets a REINFORCE gradient
whose reward mixes a reconstruction term with a learned grounding score,
the generator gets the direct likelihood gradient, and both readers get
the exact enumerated gradient of the weighted span KL.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import CorpusSplit, DialogueCase
from .nets import (
    DecodeConfig,
    Model,
    ModelConfig,
    Vocab,
    discriminator_logit,
    discriminator_score,
    generator_decode,
    generator_nll,
    grounding_logit,
    grounding_score,
    init_model,
    posterior_read,
    prior_read,
    save_checkpoint,
)
from .spans import (
    Span,
    clamp_joint_to_spans,
    joint_posterior,
    joint_prior,
    kl_joint,
    pseudo_span_tag,
    softmax_distribution,
    unigram_f1,
)

OBSERVED = "observed"
AUGMENTED = "augmented"


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    sleep_lr: float = 1e-3
    grounding_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 2.0
    lambda_aug: int = 3
    alpha: float = 1.0
    mu: float = 1.0
    baseline: bool = True
    baseline_decay: float = 0.95
    n_rollouts: int = 4
    enum_threshold: int = 256
    mc_samples: int = 1024
    sleep_passes: int = 1
    augment_cases: int | None = None  # cases augmented per epoch; None = all
    grounding_pretrain_steps: int = 150
    eval_cases: int | None = 64
    eval_mc_samples: int = 32
    # validation uses Monte Carlo above this much smaller bound: the exact
    # likelihood term costs l_K^2 generator forwards per response, which is
    # fine for fixtures but not per-epoch at corpus scale
    eval_enum_threshold: int = 16
    use_discriminator: bool = True
    use_rec_reward: bool = True
    use_ground_reward: bool = True

    def validate(self) -> None:
        if self.lambda_aug < 1:
            raise ValueError(f"lambda_aug must be >= 1, got {self.lambda_aug}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_rollouts < 1:
            raise ValueError("epochs, batch_size and n_rollouts must be >= 1")
        if not 0.0 < self.baseline_decay < 1.0:
            raise ValueError(f"baseline_decay must lie in (0, 1), got {self.baseline_decay}")
        if self.grad_clip <= 0 or self.lr <= 0 or self.sleep_lr <= 0 or self.grounding_lr <= 0:
            raise ValueError("learning rates and grad_clip must be positive")
        if self.enum_threshold < 1 or self.mc_samples < 1 or self.eval_mc_samples < 1:
            raise ValueError("enum_threshold and sample counts must be >= 1")


# ---------------------------------------------------------------------------
# Span distributions per case
# ---------------------------------------------------------------------------


def prior_distributions(case: DialogueCase, model: Model) -> tuple[torch.Tensor, torch.Tensor]:
    out = prior_read(case.context_tokens, case.knowledge_tokens, model)
    return softmax_distribution(out.start_logits), softmax_distribution(out.end_logits)


def posterior_distributions(
    case: DialogueCase, response: Sequence[str], model: Model
) -> tuple[torch.Tensor, torch.Tensor]:
    out = posterior_read(case.context_tokens, response, case.knowledge_tokens, model)
    return softmax_distribution(out.start_logits), softmax_distribution(out.end_logits)


def _sample_cell(
    q_start: np.ndarray, q_end: np.ndarray, rng: np.random.Generator
) -> tuple[int, int]:
    s = int(np.searchsorted(np.cumsum(q_start), rng.random(), side="right"))
    e = int(np.searchsorted(np.cumsum(q_end), rng.random(), side="right"))
    return min(s, len(q_start) - 1), min(e, len(q_end) - 1)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


@dataclass
class ElboResult:
    value: float
    likelihood: float
    kl: float
    mode: str  # "exact" | "mc"
    n_samples: int | None = None
    std_error: float | None = None


def enumerate_elbo_terms(
    q_tri: torch.Tensor, p_joint: torch.Tensor, ln_p: Callable[[Span], torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact expectation and KL over the triangular span joint.

    Differentiable when the joints and ln_p carry gradients.
    """
    l_k = q_tri.shape[0]
    likelihood = q_tri.new_zeros(())
    weights = q_tri.detach()
    for s in range(l_k):
        for e in range(s, l_k):
            if float(weights[s, e]) > 0.0:
                likelihood = likelihood + q_tri[s, e] * ln_p(Span(s, e))
    return likelihood, kl_joint(q_tri, p_joint)


def compute_elbo(
    case: DialogueCase,
    response: Sequence[str],
    model: Model,
    *,
    enum_threshold: int = 256,
    mc_samples: int = 1024,
    rng: np.random.Generator | None = None,
) -> ElboResult:
    """E_q[ln p(R | C, span)] - KL(q || p) on the clamped posterior joint.

    Exact enumeration of the l_K^2 joint below the threshold, Monte Carlo
    above it (rng required). An infinite KL is flagged as a -inf value.
    """
    knowledge = case.knowledge_tokens
    l_k = len(knowledge)
    with torch.no_grad():
        q_s, q_e = posterior_distributions(case, response, model)
        p_s, p_e = prior_distributions(case, model)
        p_joint = joint_prior(p_s, p_e)
        q_tri = clamp_joint_to_spans(joint_posterior(q_s, q_e))

        def ln_p(span: Span) -> torch.Tensor:
            return -generator_nll(case.context_tokens, span.tokens(knowledge), response, model)

        if l_k <= enum_threshold:
            likelihood, kl = enumerate_elbo_terms(q_tri, p_joint, ln_p)
            kl_f = float(kl)
            lik_f = float(likelihood)
            value = -math.inf if math.isinf(kl_f) else lik_f - kl_f
            return ElboResult(value=value, likelihood=lik_f, kl=kl_f, mode="exact")

        if rng is None:
            raise ValueError(f"l_K={l_k} exceeds enum_threshold={enum_threshold}; pass an rng for Monte Carlo")
        qs_np = q_s.numpy()
        qe_np = q_e.numpy()
        ln_p_cache: dict[tuple[int, int], float] = {}
        lik_terms, kl_terms = [], []
        for _ in range(mc_samples):
            s, e_raw = _sample_cell(qs_np, qe_np, rng)
            e = max(s, e_raw)
            if (s, e) not in ln_p_cache:
                ln_p_cache[(s, e)] = float(ln_p(Span(s, e)))
            q_val = float(q_tri[s, e])
            p_val = float(p_joint[s, e])
            if p_val <= 0.0:
                return ElboResult(value=-math.inf, likelihood=math.nan, kl=math.inf,
                                  mode="mc", n_samples=mc_samples)
            lik_terms.append(ln_p_cache[(s, e)])
            kl_terms.append(math.log(q_val) - math.log(p_val))
        arr = np.asarray(lik_terms) - np.asarray(kl_terms)
        se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else None
        return ElboResult(
            value=float(arr.mean()),
            likelihood=float(np.mean(lik_terms)),
            kl=float(np.mean(kl_terms)),
            mode="mc",
            n_samples=mc_samples,
            std_error=se,
        )


# ---------------------------------------------------------------------------
# Response augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentedEntry:
    tokens: list[str]
    origin: str
    disc_score: float
    prior_weight: float


@dataclass
class AugmentedResponseSet:
    case_ref: str
    entries: list[AugmentedEntry]

    def __post_init__(self) -> None:
        total = sum(e.prior_weight for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"prior weights sum to {total}, expected 1")

    def refresh_disc_scores(self, model: Model) -> None:
        for e in self.entries:
            e.disc_score = discriminator_score(e.tokens, model)

    def normalized_disc_weights(self) -> np.ndarray:
        scores = np.asarray([e.disc_score for e in self.entries], dtype=np.float64)
        return scores / scores.sum()

    def origins(self) -> set[str]:
        return {e.origin for e in self.entries}


def observed_only_set(case: DialogueCase, model: Model | None = None) -> AugmentedResponseSet:
    """Degenerate set used by the no-discriminator ablation: observed
    responses with uniform weights and unit scores."""
    n = len(case.responses)
    entries = [
        AugmentedEntry(tokens=list(r), origin=OBSERVED, disc_score=1.0, prior_weight=1.0 / n)
        for r in case.responses
    ]
    return AugmentedResponseSet(case_ref=case.case_id, entries=entries)


def augment_responses(
    case: DialogueCase,
    lam: int,
    model: Model,
    decode_config: DecodeConfig,
    rng: np.random.Generator,
) -> AugmentedResponseSet:
    """Observed responses plus lam decoded ones from posterior-sampled spans."""
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    knowledge = case.knowledge_tokens
    q_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    augmented: list[list[str]] = []
    with torch.no_grad():
        for _ in range(lam):
            ridx = int(rng.integers(0, len(case.responses)))
            if ridx not in q_cache:
                q_s, q_e = posterior_distributions(case, case.responses[ridx], model)
                q_cache[ridx] = (q_s.numpy(), q_e.numpy())
            s, e_raw = _sample_cell(*q_cache[ridx], rng)
            span = Span(s, max(s, e_raw))
            try:
                augmented.append(
                    generator_decode(case.context_tokens, span.tokens(knowledge), decode_config, model)
                )
            except Exception as exc:
                raise RuntimeError(f"decode failed for case {case.case_id}: {exc}") from exc
    all_tokens = [list(r) for r in case.responses] + augmented
    n = len(all_tokens)
    entries = []
    for i, toks in enumerate(all_tokens):
        origin = OBSERVED if i < len(case.responses) else AUGMENTED
        entries.append(
            AugmentedEntry(
                tokens=toks,
                origin=origin,
                disc_score=discriminator_score(toks, model),
                prior_weight=1.0 / n,
            )
        )
    return AugmentedResponseSet(case_ref=case.case_id, entries=entries)


# ---------------------------------------------------------------------------
# Sleep step
# ---------------------------------------------------------------------------


def sleep_step(
    sets: Sequence[AugmentedResponseSet],
    model: Model,
    optimizer: torch.optim.Optimizer,
    grad_clip: float | None = None,
) -> float:
    """One discriminator update on a batch of augmented sets.

    Maximizes observed-vs-augmented log likelihood; reports mean binary
    cross-entropy. Only discriminator parameters may be in the optimizer.
    """
    losses = []
    for s in sets:
        if s.origins() != {OBSERVED, AUGMENTED}:
            raise ValueError(f"set for case {s.case_ref} must contain both origins")
    optimizer.zero_grad(set_to_none=True)
    for s in sets:
        for e in s.entries:
            logit = discriminator_logit(e.tokens, model)
            y = 1.0 if e.origin == OBSERVED else 0.0
            losses.append(
                torch.nn.functional.binary_cross_entropy_with_logits(
                    logit, torch.tensor(y, dtype=logit.dtype)
                )
            )
    loss = torch.stack(losses).mean()
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            [p for _, p in model.parameter_groups()["discriminator"]], grad_clip
        )
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


def reconstruction_reward(
    generated: Sequence[str], response_set: AugmentedResponseSet, sampled_index: int
) -> float:
    """Mean of s(gen, R_i) at the sampled entry and 1 - s(gen, R_i) elsewhere."""
    n = len(response_set.entries)
    if not 0 <= sampled_index < n:
        raise ValueError(f"sampled_index {sampled_index} out of range for set of size {n}")
    total = 0.0
    for i, entry in enumerate(response_set.entries):
        sim = unigram_f1(generated, entry.tokens)
        total += sim if i == sampled_index else (1.0 - sim)
    return total / n


def total_reward(
    generated: Sequence[str],
    response_set: AugmentedResponseSet,
    sampled_index: int,
    span_tokens: Sequence[str],
    alpha: float,
    model: Model,
    *,
    use_rec_reward: bool = True,
    use_ground_reward: bool = True,
) -> float:
    """d(R_sampled) * (alpha * reconstruction + grounding); d taken raw."""
    d = discriminator_score(response_set.entries[sampled_index].tokens, model)
    rec = (
        reconstruction_reward(generated, response_set, sampled_index)
        if use_rec_reward
        else 0.0
    )
    gnd = grounding_score(span_tokens, generated, model) if use_ground_reward else 0.0
    return d * (alpha * rec + gnd)


def grounding_margin_loss(
    responses: Sequence[Sequence[str]],
    pseudo_spans: Sequence[Sequence[str]],
    model: Model,
    mu: float,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Hinge loss pushing each response's own pseudo span above a mismatched
    one by at least mu; the mismatch index is drawn fresh per response."""
    n = len(responses)
    if n < 2:
        raise ValueError("grounding margin loss needs at least 2 responses")
    if len(pseudo_spans) != n:
        raise ValueError("pseudo_spans must align with responses")
    terms = []
    for i in range(n):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        own = torch.sigmoid(grounding_logit(pseudo_spans[i], responses[i], model))
        other = torch.sigmoid(grounding_logit(pseudo_spans[j], responses[i], model))
        terms.append(torch.clamp(mu + other - own, min=0.0))
    return torch.stack(terms).mean()


def pseudo_spans_for_case(case: DialogueCase, window_sizes=(5, 10, 15)) -> list[list[str]]:
    knowledge = case.knowledge_tokens
    return [
        pseudo_span_tag(r, knowledge, window_sizes).tokens(knowledge) for r in case.responses
    ]


# ---------------------------------------------------------------------------
# REINFORCE estimator
# ---------------------------------------------------------------------------


@dataclass
class RewardTables:
    """Per (entry, clamped span) reward cache shared by the estimator, the
    wake surrogate and the enumeration oracle used in tests."""

    case: DialogueCase
    response_set: AugmentedResponseSet
    model: Model
    alpha: float
    decode_config: DecodeConfig
    use_rec_reward: bool = True
    use_ground_reward: bool = True
    _decodes: dict[tuple[int, int], list[str]] = field(default_factory=dict)
    _rewards: dict[tuple[int, int, int], float] = field(default_factory=dict)

    def decoded(self, span: Span) -> list[str]:
        key = (span.start, span.end)
        if key not in self._decodes:
            self._decodes[key] = generator_decode(
                self.case.context_tokens,
                span.tokens(self.case.knowledge_tokens),
                self.decode_config,
                self.model,
            )
        return self._decodes[key]

    def reward(self, entry_index: int, span: Span) -> float:
        key = (entry_index, span.start, span.end)
        if key not in self._rewards:
            generated = self.decoded(span)
            self._rewards[key] = total_reward(
                generated,
                self.response_set,
                entry_index,
                span.tokens(self.case.knowledge_tokens),
                self.alpha,
                self.model,
                use_rec_reward=self.use_rec_reward,
                use_ground_reward=self.use_ground_reward,
            )
        return self._rewards[key]


@dataclass
class BaselineState:
    """Exponential moving average of rewards; update after use so the
    baseline for each sample depends only on past samples."""

    decay: float = 0.95
    value: float = 0.0
    initialized: bool = False

    def baseline(self) -> float:
        return self.value if self.initialized else 0.0

    def update(self, reward: float) -> None:
        if not self.initialized:
            self.value = reward
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * reward


@dataclass
class ReinforceEstimate:
    grads: dict[str, torch.Tensor]
    variances: dict[str, torch.Tensor] | None
    n_samples: int
    mean_reward: float


def reinforce_estimate(
    case: DialogueCase,
    response_set: AugmentedResponseSet,
    model: Model,
    n_samples: int,
    rng: np.random.Generator,
    *,
    alpha: float = 1.0,
    decode_config: DecodeConfig | None = None,
    baseline: bool = False,
    baseline_decay: float = 0.95,
    compute_variance: bool = False,
    use_rec_reward: bool = True,
    use_ground_reward: bool = True,
) -> ReinforceEstimate:
    """Score-function estimate of the posterior gradient of the expected
    reward, averaged over (response, span) rollouts.

    Responses are drawn from the normalized discriminator weights, raw
    cells from the mean-field posterior; rewards are computed on the
    clamped span so the estimator is unbiased for the enumerated objective
    when the baseline is off.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    decode_config = decode_config or DecodeConfig()
    params = model.phi_parameters()
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    l_k = len(case.knowledge_tokens)
    n_entries = len(response_set.entries)
    d_tilde = response_set.normalized_disc_weights()

    # Posterior log-marginals per entry, with graph kept for repeated grads.
    log_qs, log_qe, qs_np, qe_np = [], [], [], []
    for entry in response_set.entries:
        out = posterior_read(case.context_tokens, entry.tokens, case.knowledge_tokens, model)
        lqs = torch.log_softmax(out.start_logits, dim=-1)
        lqe = torch.log_softmax(out.end_logits, dim=-1)
        log_qs.append(lqs)
        log_qe.append(lqe)
        qs_np.append(np.exp(lqs.detach().numpy()))
        qe_np.append(np.exp(lqe.detach().numpy()))

    # Joint sampling over (entry, start, end).
    flat_probs = np.concatenate(
        [d_tilde[r] * np.outer(qs_np[r], qe_np[r]).reshape(-1) for r in range(n_entries)]
    )
    flat_probs = flat_probs / flat_probs.sum()
    cdf = np.cumsum(flat_probs)
    draws = np.searchsorted(cdf, rng.random(n_samples), side="right")
    draws = np.minimum(draws, flat_probs.size - 1)

    tables = RewardTables(
        case, response_set, model, alpha, decode_config,
        use_rec_reward=use_rec_reward, use_ground_reward=use_ground_reward,
    )
    state = BaselineState(decay=baseline_decay)
    sum_w: dict[int, float] = {}
    sum_w2: dict[int, float] = {}
    reward_total = 0.0
    for flat in draws.tolist():
        r, cell = divmod(flat, l_k * l_k)
        s, e_raw = divmod(cell, l_k)
        re = tables.reward(r, Span(s, max(s, e_raw)))
        reward_total += re
        w = re - (state.baseline() if baseline else 0.0)
        if baseline:
            state.update(re)
        sum_w[flat] = sum_w.get(flat, 0.0) + w
        sum_w2[flat] = sum_w2.get(flat, 0.0) + w * w

    # Mean gradient in one backward pass.
    surrogate = torch.zeros((), dtype=torch.float64)
    for flat, w in sum_w.items():
        r, cell = divmod(flat, l_k * l_k)
        s, e_raw = divmod(cell, l_k)
        surrogate = surrogate + (w / n_samples) * (log_qs[r][s] + log_qe[r][e_raw])
    grads = torch.autograd.grad(surrogate, tensors, allow_unused=True, retain_graph=compute_variance)
    mean = {
        name: (g.detach().clone() if g is not None else torch.zeros_like(t))
        for name, g, t in zip(names, grads, tensors)
    }

    variances = None
    if compute_variance:
        # Per-sample second moments via per-cell score gradients.
        grad_cache: dict[tuple[str, int, int], dict[str, torch.Tensor]] = {}

        def cell_grad(r: int, s: int, e_raw: int) -> dict[str, torch.Tensor]:
            key = ("cell", r, s * l_k + e_raw)
            if key not in grad_cache:
                g = torch.autograd.grad(
                    log_qs[r][s] + log_qe[r][e_raw], tensors, allow_unused=True, retain_graph=True
                )
                grad_cache[key] = {
                    name: (gi.detach() if gi is not None else torch.zeros_like(t))
                    for name, gi, t in zip(names, g, tensors)
                }
            return grad_cache[key]

        second = {name: torch.zeros_like(t) for name, t in params}
        for flat, w2 in sum_w2.items():
            r, cell = divmod(flat, l_k * l_k)
            s, e_raw = divmod(cell, l_k)
            g = cell_grad(r, s, e_raw)
            for name in second:
                second[name] = second[name] + (w2 / n_samples) * g[name] ** 2
        variances = {name: second[name] - mean[name] ** 2 for name in second}

    return ReinforceEstimate(
        grads=mean,
        variances=variances,
        n_samples=n_samples,
        mean_reward=reward_total / n_samples,
    )


# ---------------------------------------------------------------------------
# Wake step
# ---------------------------------------------------------------------------


def weighted_joint_kl(
    q_tris: Sequence[torch.Tensor],
    weights_q: np.ndarray,
    p_joint: torch.Tensor,
    weights_p: np.ndarray,
) -> torch.Tensor:
    """KL between the response-weighted posterior joint and the prior-side
    product: sum_R w_q(R) * (ln(w_q/w_p) + KL(q_R || p))."""
    total = p_joint.new_zeros(())
    for q_tri, wq, wp in zip(q_tris, weights_q, weights_p):
        if wq <= 0.0:
            continue
        total = total + wq * (math.log(wq / wp) + kl_joint(q_tri, p_joint))
    return total


@dataclass
class WakeStats:
    loss: float
    aaelbo: float
    kl: float
    mean_reward: float


def wake_step(
    batch: Sequence[tuple[DialogueCase, AugmentedResponseSet]],
    model: Model,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    baseline_state: BaselineState,
    decode_config: DecodeConfig,
) -> WakeStats:
    """One update of readers and generator on a batch; the discriminator
    and grounding scorer stay frozen (they are absent from the optimizer
    and their outputs enter only as detached rewards/weights)."""
    objectives = []
    aaelbos, kls, rewards = [], [], []
    for case, rset in batch:
        l_k = len(case.knowledge_tokens)
        n_entries = len(rset.entries)
        d_tilde = (
            rset.normalized_disc_weights()
            if config.use_discriminator
            else np.full(n_entries, 1.0 / n_entries)
        )
        d_prior = np.asarray([e.prior_weight for e in rset.entries])

        log_qs, log_qe, q_tris = [], [], []
        for entry in rset.entries:
            out = posterior_read(case.context_tokens, entry.tokens, case.knowledge_tokens, model)
            lqs = torch.log_softmax(out.start_logits, dim=-1)
            lqe = torch.log_softmax(out.end_logits, dim=-1)
            log_qs.append(lqs)
            log_qe.append(lqe)
            q_tris.append(clamp_joint_to_spans(torch.outer(torch.exp(lqs), torch.exp(lqe))))
        p_s, p_e = prior_distributions(case, model)
        p_joint = joint_prior(p_s, p_e)
        kl_term = weighted_joint_kl(q_tris, d_tilde, p_joint, d_prior)

        tables = RewardTables(
            case, rset, model, config.alpha, decode_config,
            use_rec_reward=config.use_rec_reward,
            use_ground_reward=config.use_ground_reward,
        )
        cdf = np.cumsum(d_tilde)
        score_sum = torch.zeros((), dtype=torch.float64)
        lik_sum = torch.zeros((), dtype=torch.float64)
        for _ in range(config.n_rollouts):
            r = int(np.searchsorted(cdf, rng.random(), side="right"))
            r = min(r, n_entries - 1)
            s, e_raw = _sample_cell(
                np.exp(log_qs[r].detach().numpy()), np.exp(log_qe[r].detach().numpy()), rng
            )
            span = Span(s, max(s, e_raw))
            nll = generator_nll(
                case.context_tokens, span.tokens(case.knowledge_tokens), rset.entries[r].tokens, model
            )
            if config.use_discriminator:
                re = tables.reward(r, span)
            else:
                re = float(-nll.detach())  # conventional teacher-forcing reward
            rewards.append(re)
            w = re - (baseline_state.baseline() if config.baseline else 0.0)
            if config.baseline:
                baseline_state.update(re)
            score_sum = score_sum + w * (log_qs[r][s] + log_qe[r][e_raw])
            lik_sum = lik_sum - nll
        objective = (score_sum + lik_sum) / config.n_rollouts - kl_term
        objectives.append(objective)
        aaelbos.append(float(lik_sum.detach()) / config.n_rollouts - float(kl_term.detach()))
        kls.append(float(kl_term.detach()))

    loss = -torch.stack(objectives).mean()
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    wake_params = [
        p
        for group in ("shared", "prior", "posterior", "generator")
        for _, p in model.parameter_groups()[group]
    ]
    torch.nn.utils.clip_grad_norm_(wake_params, config.grad_clip)
    optimizer.step()
    return WakeStats(
        loss=float(loss.detach()),
        aaelbo=float(np.mean(aaelbos)),
        kl=float(np.mean(kls)),
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
    )


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoints: list[Path]
    initial_validation: dict
    final_validation: dict
    grounding_skipped: int


def _validation_elbo(
    cases: Sequence[DialogueCase], model: Model, config: TrainConfig, seed: int
) -> dict:
    rng = np.random.default_rng(derive_seed(seed, "eval"))
    values, kls = [], []
    for case in cases:
        for response in case.responses:
            res = compute_elbo(
                case, response, model,
                enum_threshold=config.eval_enum_threshold,
                mc_samples=config.eval_mc_samples,
                rng=rng,
            )
            values.append(res.value)
            kls.append(res.kl)
    return {"elbo": float(np.mean(values)), "kl": float(np.mean(kls))}


def _assert_frozen(before: dict[str, str], after: dict[str, str], allowed: set[str], phase: str) -> None:
    for group, digest in before.items():
        if group not in allowed and after[group] != digest:
            raise RuntimeError(f"freezing contract violated: {group} changed during {phase}")


def run_training(
    split: CorpusSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    decode_config: DecodeConfig,
    seed: int,
    run_dir: str | Path,
    config_fingerprint: str = "",
) -> TrainResult:
    """Alternate sleep and wake phases over the train split.

    The grounding scorer is pretrained on pseudo-span pairs and then
    frozen; freezing contracts are enforced by parameter checksums every
    epoch. Deterministic given (split, configs, seed): metrics.jsonl is
    byte-reproducible, timings go to a separate sidecar.
    """
    train_config.validate()
    decode_config.validate()
    if not split.train:
        raise ValueError("train split is empty")
    torch.set_num_threads(1)  # keeps reductions bit-reproducible run-to-run

    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "logs" / "metrics.jsonl"
    timings_path = run_dir / "logs" / "timings.jsonl"
    metrics_path.write_text("")
    timings_path.write_text("")

    vocab = Vocab.build(
        [c.context_tokens for c in split.train]
        + [c.knowledge_tokens for c in split.train]
        + [r for c in split.train for r in c.responses]
    )
    model = init_model(vocab, model_config, derive_seed(seed, "init"))

    betas = (train_config.adam_beta1, train_config.adam_beta2)
    groups = model.parameter_groups()
    wake_params = [p for g in ("shared", "prior", "posterior", "generator") for _, p in groups[g]]
    wake_opt = torch.optim.Adam(wake_params, lr=train_config.lr, betas=betas)
    sleep_opt = torch.optim.Adam(
        [p for _, p in groups["discriminator"]], lr=train_config.sleep_lr, betas=betas
    )
    n_train = len(split.train)
    wake_steps_total = train_config.epochs * math.ceil(n_train / train_config.batch_size)
    wake_sched = torch.optim.lr_scheduler.CosineAnnealingLR(wake_opt, T_max=max(1, wake_steps_total), eta_min=0.0)

    # Grounding scorer pretraining (then frozen for the whole main loop).
    grounding_skipped = 0
    if train_config.use_ground_reward:
        sums_before = model.group_checksums()
        g_rng = np.random.default_rng(derive_seed(seed, "grounding"))
        eligible = []
        for case in split.train:
            if len(case.responses) < 2:
                grounding_skipped += 1
                continue
            eligible.append((case, pseudo_spans_for_case(case)))
        if eligible:
            g_opt = torch.optim.Adam(
                [p for _, p in groups["grounding"]], lr=train_config.grounding_lr, betas=betas
            )
            g_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
                g_opt, T_max=max(1, train_config.grounding_pretrain_steps), eta_min=0.0
            )
            order = g_rng.permutation(len(eligible))
            for step in range(train_config.grounding_pretrain_steps):
                case, spans_ = eligible[int(order[step % len(eligible)])]
                loss = grounding_margin_loss(case.responses, spans_, model, train_config.mu, g_rng)
                g_opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_([p for _, p in groups["grounding"]], train_config.grad_clip)
                g_opt.step()
                g_sched.step()
        _assert_frozen(sums_before, model.group_checksums(), {"grounding"}, "grounding pretraining")

    initial_validation = _validation_elbo(
        split.valid[: train_config.eval_cases] if split.valid else split.train[: train_config.eval_cases],
        model, train_config, seed,
    )
    (run_dir / "logs" / "initial_validation.json").write_text(
        json.dumps(initial_validation, sort_keys=True) + "\n"
    )

    metrics_rows: list[dict] = []
    checkpoints: list[Path] = []
    baseline_state = BaselineState(decay=train_config.baseline_decay)
    val_cases = split.valid if split.valid else split.train
    if train_config.eval_cases is not None:
        val_cases = val_cases[: train_config.eval_cases]

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.monotonic()
        epoch_rng = np.random.default_rng(derive_seed(seed, f"epoch:{epoch}"))

        # ---- sleep phase: augment, then train the discriminator only ----
        sleep_bce = None
        sets: dict[str, AugmentedResponseSet] = {}
        if train_config.use_discriminator:
            sums = model.group_checksums()
            case_pool = list(split.train)
            if train_config.augment_cases is not None and train_config.augment_cases < n_train:
                idx = epoch_rng.choice(n_train, size=train_config.augment_cases, replace=False)
                case_pool = [split.train[int(i)] for i in sorted(idx)]
            for case in case_pool:
                try:
                    sets[case.case_id] = augment_responses(
                        case, train_config.lambda_aug, model, decode_config, epoch_rng
                    )
                except Exception as exc:
                    _dump_diagnostic(run_dir, epoch, "sleep-augment", [case.case_id], str(exc))
                    raise
            bces = []
            set_list = [sets[c.case_id] for c in case_pool]
            for _ in range(train_config.sleep_passes):
                for lo in range(0, len(set_list), train_config.batch_size):
                    batch = set_list[lo : lo + train_config.batch_size]
                    bce = sleep_step(batch, model, sleep_opt, train_config.grad_clip)
                    if not math.isfinite(bce):
                        _dump_diagnostic(run_dir, epoch, "sleep", [s.case_ref for s in batch], f"bce={bce}")
                        raise TrainingDiverged(f"non-finite sleep loss at epoch {epoch}")
                    bces.append(bce)
            sleep_bce = float(np.mean(bces))
            _assert_frozen(sums, model.group_checksums(), {"discriminator"}, "sleep phase")
            for s in sets.values():
                s.refresh_disc_scores(model)

        # ---- wake phase: freeze the discriminator, update the rest ----
        sums = model.group_checksums()
        order = epoch_rng.permutation(n_train)
        wake_elbos, wake_kls, wake_rewards = [], [], []
        for lo in range(0, n_train, train_config.batch_size):
            batch_cases = [split.train[int(i)] for i in order[lo : lo + train_config.batch_size]]
            batch = [
                (case, sets.get(case.case_id) or observed_only_set(case)) for case in batch_cases
            ]
            stats = wake_step(
                batch, model, train_config, wake_opt, epoch_rng, baseline_state, decode_config
            )
            if not math.isfinite(stats.loss):
                _dump_diagnostic(run_dir, epoch, "wake", [c.case_id for c in batch_cases], f"loss={stats.loss}")
                raise TrainingDiverged(f"non-finite wake loss at epoch {epoch}")
            wake_sched.step()
            wake_elbos.append(stats.aaelbo)
            wake_kls.append(stats.kl)
            wake_rewards.append(stats.mean_reward)
        _assert_frozen(sums, model.group_checksums(), {"shared", "prior", "posterior", "generator"}, "wake phase")

        val_metrics = _validation_elbo(val_cases, model, train_config, seed)
        row = {
            "epoch": epoch,
            "sleep_bce": sleep_bce,
            "wake_elbo": float(np.mean(wake_elbos)),
            "kl": float(np.mean(wake_kls)),
            "mean_reward": float(np.mean(wake_rewards)),
            "val_metrics": val_metrics,
        }
        metrics_rows.append(row)
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        with open(timings_path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"epoch": epoch, "wall_time": time.monotonic() - t0}) + "\n")

        ckpt = run_dir / "checkpoints" / f"epoch_{epoch:03d}.pt"
        save_checkpoint(
            ckpt, model,
            config_hash=config_fingerprint,
            rng_state={"epoch": epoch, "numpy": epoch_rng.bit_generator.state},
        )
        checkpoints.append(ckpt)

    return TrainResult(
        metrics=metrics_rows,
        checkpoints=checkpoints,
        initial_validation=initial_validation,
        final_validation=metrics_rows[-1]["val_metrics"],
        grounding_skipped=grounding_skipped,
    )


def _dump_diagnostic(run_dir: Path, epoch: int, phase: str, case_ids: list[str], detail: str) -> None:
    payload = {"epoch": epoch, "phase": phase, "case_ids": case_ids, "detail": detail}
    (Path(run_dir) / "diagnostic_dump.json").write_text(json.dumps(payload, indent=2) + "\n")

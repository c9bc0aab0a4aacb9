"""Shared test utilities: tiny fixtures, finite-difference gradient checks,
and independent enumeration oracles for the estimators under test."""

from __future__ import annotations

import math

import numpy as np
import torch

from spangen.corpus import DialogueCase
from spangen.nets import Model, ModelConfig, Vocab, init_model
from spangen.spans import Span
from spangen.training import RewardTables, posterior_distributions

TINY_MODEL_CFG = ModelConfig(d_model=16, n_heads=2, ff_multiplier=2, max_len=128)


def tiny_vocab(extra_tokens=(), size=20) -> Vocab:
    toks = [f"t{i}" for i in range(size)]
    return Vocab.build([toks, list(extra_tokens)])


def tiny_model(vocab: Vocab | None = None, seed: int = 7, cfg: ModelConfig | None = None) -> Model:
    return init_model(vocab or tiny_vocab(), cfg or TINY_MODEL_CFG, seed)


def tiny_case(
    l_k: int = 6,
    n_sentences: int = 2,
    n_responses: int = 2,
    seed: int = 0,
    vocab_tokens: int = 12,
    response_len: int = 3,
    case_id: str = "tiny-0",
) -> DialogueCase:
    """Small hand-scale case; does not need to pass the corpus filters."""
    rng = np.random.default_rng(seed)
    words = [f"t{i}" for i in range(vocab_tokens)]
    cuts = sorted(rng.choice(range(1, l_k), size=n_sentences - 1, replace=False)) if n_sentences > 1 else []
    bounds = [0, *cuts, l_k]
    sentences = [
        [words[int(w)] for w in rng.integers(0, vocab_tokens, bounds[i + 1] - bounds[i])]
        for i in range(n_sentences)
    ]
    responses = [
        [words[int(w)] for w in rng.integers(0, vocab_tokens, response_len)]
        for _ in range(n_responses)
    ]
    context = [[words[int(w)] for w in rng.integers(0, vocab_tokens, 3)]]
    return DialogueCase(
        case_id=case_id, context=context, knowledge_sentences=sentences, responses=responses
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def central_difference_check(
    loss_fn,
    named_params: list[tuple[str, torch.nn.Parameter]],
    n_coords: int,
    rng: np.random.Generator,
    h: float = 1e-6,
) -> list[tuple[str, int, float, float, float]]:
    """Compare autograd gradients against central finite differences at
    n_coords randomly chosen parameter coordinates.

    Returns (name, flat_index, analytic, numeric, relative_error) tuples;
    the relative error uses a small absolute floor for near-zero gradients.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]

    sizes = np.array([p.numel() for p in params])
    probs = sizes / sizes.sum()
    results = []
    for _ in range(n_coords):
        pi = int(rng.choice(len(params), p=probs))
        fi = int(rng.integers(0, sizes[pi]))
        p = params[pi]
        with torch.no_grad():
            flat = p.view(-1)
            orig = float(flat[fi])
            flat[fi] = orig + h
            f_plus = float(loss_fn().detach())
            flat[fi] = orig - h
            f_minus = float(loss_fn().detach())
            flat[fi] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grads[pi].view(-1)[fi])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        results.append((named_params[pi][0], fi, analytic, numeric, rel))
    return results


# ---------------------------------------------------------------------------
# Enumeration oracle for the REINFORCE estimator
# ---------------------------------------------------------------------------


def enumerate_reinforce_gradient(
    case: DialogueCase,
    response_set,
    model: Model,
    *,
    alpha: float,
    decode_config,
) -> dict[str, torch.Tensor]:
    """Exact gradient of sum_R d~(R) sum_{s,e} q(s|R) q(e|R) Re(R, clamp(s,e))
    with respect to the posterior-side parameters, via full enumeration.

    Rewards are detached constants (they do not depend on the posterior),
    so autograd of the enumerated expectation is the exact target the
    sampling estimator should match in mean.
    """
    l_k = len(case.knowledge_tokens)
    d_tilde = response_set.normalized_disc_weights()
    tables = RewardTables(case, response_set, model, alpha, decode_config)
    objective = torch.zeros((), dtype=torch.float64)
    for r, entry in enumerate(response_set.entries):
        q_s, q_e = posterior_distributions(case, entry.tokens, model)
        for s in range(l_k):
            for e_raw in range(l_k):
                re = tables.reward(r, Span(s, max(s, e_raw)))
                objective = objective + d_tilde[r] * q_s[s] * q_e[e_raw] * re
    params = model.phi_parameters()
    grads = torch.autograd.grad(objective, [p for _, p in params], allow_unused=True)
    return {
        name: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params, grads)
    }


def exact_log_marginal(case: DialogueCase, response, model, p_joint: torch.Tensor) -> float:
    """ln sum_{s<=e} p(s,e) p(R | C, span) by direct enumeration."""
    from spangen.nets import generator_nll

    knowledge = case.knowledge_tokens
    terms = []
    for s in range(len(knowledge)):
        for e in range(s, len(knowledge)):
            if float(p_joint[s, e]) > 0:
                lnp = -float(generator_nll(case.context_tokens, knowledge[s : e + 1], response, model))
                terms.append(math.log(float(p_joint[s, e])) + lnp)
    return float(torch.logsumexp(torch.tensor(terms, dtype=torch.float64), dim=0))

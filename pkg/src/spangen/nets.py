"""Small trainable networks behind the reader/generator/scorer interfaces.

Five components: a prior span reader over [context; knowledge], a posterior
reader over [context; response; knowledge], a causal decoder generator, a
response discriminator and a span-response grounding scorer. The readers
and the generator share one token embedding table; the discriminator and
grounding scorer own theirs so that adversarial updates cannot leak into
frozen components. Everything runs in float64 on CPU, single sequence at a
time, which keeps runs bit-reproducible and finite-difference checks tight.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

CHECKPOINT_SCHEMA_VERSION = 1

UNK, SEP, CLS, BOS, EOS = "<unk>", "<sep>", "<cls>", "<bos>", "<eos>"
SPECIAL_TOKENS = (UNK, SEP, CLS, BOS, EOS)


class Vocab:
    """Shared token/id space. Unknown tokens map to <unk>, never an error."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError("vocab must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, token_iter: Iterable[Sequence[str]], max_size: int | None = None) -> "Vocab":
        counts: dict[str, int] = {}
        for seq in token_iter:
            for tok in seq:
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        ordered = [t for t in ordered if t not in SPECIAL_TOKENS]
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(list(SPECIAL_TOKENS) + ordered)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    ff_multiplier: int = 4
    prior_layers: int = 2
    posterior_layers: int = 3
    generator_layers: int = 2
    discriminator_layers: int = 2
    grounding_layers: int = 2
    max_len: int = 512
    use_positional: bool = True

    def validate(self) -> None:
        if self.d_model < 4 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} must be >= 4 and divisible by n_heads={self.n_heads}")
        for name in ("prior_layers", "posterior_layers", "generator_layers",
                     "discriminator_layers", "grounding_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_len < 8:
            raise ValueError("max_len too small")


@dataclass
class DecodeConfig:
    beam_width: int = 2
    repetition_penalty: float = 2.0
    min_len: int = 10
    max_len: int = 30

    def validate(self) -> None:
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if not (0 < self.min_len <= self.max_len):
            raise ValueError(f"need 0 < min_len <= max_len, got ({self.min_len}, {self.max_len})")
        if self.repetition_penalty < 1.0:
            raise ValueError(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")


@dataclass
class EncoderOutput:
    context_summary: torch.Tensor  # (d,)
    knowledge_states: torch.Tensor  # (l_K, d)
    start_logits: torch.Tensor  # (l_K,)
    end_logits: torch.Tensor  # (l_K,)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.in_proj = nn.Linear(d, 3 * d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        t, d = x.shape
        q, k, v = self.in_proj(x).chunk(3, dim=-1)
        q = q.view(t, self.n_heads, self.d_head).transpose(0, 1)
        k = k.view(t, self.n_heads, self.d_head).transpose(0, 1)
        v = v.view(t, self.n_heads, self.d_head).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(0, 1).reshape(t, d)
        return self.out_proj(y)


class TransformerLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, ff_multiplier: int):
        super().__init__()
        self.attn = SelfAttention(d, n_heads)
        self.ln1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_multiplier * d), nn.GELU(), nn.Linear(ff_multiplier * d, d))
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        x = self.ln1(x + self.attn(x, causal))
        return self.ln2(x + self.ff(x))


class Encoder(nn.Module):
    def __init__(self, d: int, n_heads: int, ff_multiplier: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads, ff_multiplier) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, causal)
        return x


class Embedder(nn.Module):
    """Token + segment + (optional) learned positional embeddings."""

    def __init__(self, token_emb: nn.Embedding, cfg: ModelConfig, n_segments: int):
        super().__init__()
        self.token_emb = token_emb
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.seg_emb = nn.Embedding(n_segments, cfg.d_model)
        self.use_positional = cfg.use_positional
        self.max_len = cfg.max_len

    def forward(self, ids: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
        t = ids.numel()
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds model bound {self.max_len}")
        x = self.token_emb(ids) + self.seg_emb(segments)
        if self.use_positional:
            x = x + self.pos_emb(torch.arange(t, device=ids.device))
        return x


class ScoreHead(nn.Module):
    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, d_hidden), nn.Tanh(), nn.Linear(d_hidden, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


def _ids(x: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(list(x), dtype=torch.long)


class SpanReader(nn.Module):
    """Bidirectional encoder producing start/end logits over the knowledge."""

    def __init__(self, token_emb: nn.Embedding, cfg: ModelConfig, n_layers: int, n_segments: int):
        super().__init__()
        d = cfg.d_model
        self.embed = Embedder(token_emb, cfg, n_segments)
        self.encoder = Encoder(d, cfg.n_heads, cfg.ff_multiplier, n_layers)
        self.start_head = ScoreHead(2 * d, d)
        self.end_head = ScoreHead(2 * d, d)

    def forward(self, parts: Sequence[Sequence[int]], pool_parts: Sequence[int]) -> EncoderOutput:
        """parts: token-id sequences, one per segment, knowledge last;
        pool_parts: indices of the parts mean-pooled into the summary."""
        if any(len(p) == 0 for p in parts[:-1]) or len(parts[-1]) == 0:
            raise ValueError("reader parts must be non-empty")
        ids = _ids([i for p in parts for i in p])
        segments = _ids([si for si, p in enumerate(parts) for _ in p])
        h = self.encoder(self.embed(ids, segments))
        lengths = [len(p) for p in parts]
        k_start = sum(lengths[:-1])
        pool_mask = torch.zeros(ids.numel(), dtype=torch.bool)
        for si in pool_parts:
            lo = sum(lengths[:si])
            pool_mask[lo : lo + lengths[si]] = True
        summary = h[pool_mask].mean(dim=0)
        knowledge = h[k_start:]
        paired = torch.cat([summary.expand(knowledge.shape[0], -1), knowledge], dim=-1)
        return EncoderOutput(
            context_summary=summary,
            knowledge_states=knowledge,
            start_logits=self.start_head(paired),
            end_logits=self.end_head(paired),
        )


class Generator(nn.Module):
    """Causal decoder conditioned on [context <sep> span <sep>] as a prefix."""

    def __init__(self, token_emb: nn.Embedding, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.embed = Embedder(token_emb, cfg, n_segments=3)
        self.decoder = Encoder(cfg.d_model, cfg.n_heads, cfg.ff_multiplier, cfg.generator_layers)
        self.lm_head = nn.Linear(cfg.d_model, vocab_size)

    def _sequence(
        self, context_ids: Sequence[int], span_ids: Sequence[int], emitted_ids: Sequence[int],
        sep_id: int, bos_id: int,
    ) -> tuple[torch.Tensor, torch.Tensor, int]:
        ids = list(context_ids) + [sep_id] + list(span_ids) + [sep_id] + [bos_id] + list(emitted_ids)
        segs = (
            [0] * (len(context_ids) + 1)
            + [1] * (len(span_ids) + 1)
            + [2] * (1 + len(emitted_ids))
        )
        prefix_len = len(context_ids) + len(span_ids) + 2
        return _ids(ids), _ids(segs), prefix_len

    def logits(self, context_ids, span_ids, emitted_ids, sep_id, bos_id) -> torch.Tensor:
        ids, segs, _ = self._sequence(context_ids, span_ids, emitted_ids, sep_id, bos_id)
        h = self.decoder(self.embed(ids, segs), causal=True)
        return self.lm_head(h)

    def nll(self, context_ids, span_ids, response_ids, sep_id, bos_id, eos_id) -> torch.Tensor:
        if not response_ids:
            raise ValueError("response must be non-empty")
        ids, segs, prefix_len = self._sequence(context_ids, span_ids, response_ids, sep_id, bos_id)
        h = self.decoder(self.embed(ids, segs), causal=True)
        rows = self.lm_head(h[prefix_len:])  # BOS position onward
        targets = _ids(list(response_ids) + [eos_id])
        logprobs = torch.log_softmax(rows, dim=-1)
        return -logprobs[torch.arange(targets.numel()), targets].sum()


class SequenceScorer(nn.Module):
    """<cls>-pooled encoder with a sigmoid head; owns its embedding table."""

    def __init__(self, vocab_size: int, cfg: ModelConfig, n_layers: int, n_segments: int):
        super().__init__()
        d = cfg.d_model
        self.token_emb = nn.Embedding(vocab_size, d)
        self.embed = Embedder(self.token_emb, cfg, n_segments)
        self.encoder = Encoder(d, cfg.n_heads, cfg.ff_multiplier, n_layers)
        self.head = ScoreHead(d, d)

    def logit(self, parts: Sequence[Sequence[int]], cls_id: int) -> torch.Tensor:
        if any(len(p) == 0 for p in parts):
            raise ValueError("scorer parts must be non-empty")
        ids = _ids([cls_id] + [i for p in parts for i in p])
        segs = _ids([0] + [si for si, p in enumerate(parts) for _ in p])
        h = self.encoder(self.embed(ids, segs))
        return self.head(h[0])


class Model(nn.Module):
    """Parameter bundle: the five components plus the shared embedding."""

    GROUPS = ("shared", "prior", "posterior", "generator", "discriminator", "grounding")

    def __init__(self, vocab: Vocab, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.vocab = vocab
        self.cfg = cfg
        d = cfg.d_model
        self.shared_embedding = nn.Embedding(len(vocab), d)
        self.prior = SpanReader(self.shared_embedding, cfg, cfg.prior_layers, n_segments=2)
        self.posterior = SpanReader(self.shared_embedding, cfg, cfg.posterior_layers, n_segments=3)
        self.generator = Generator(self.shared_embedding, cfg, len(vocab))
        self.discriminator = SequenceScorer(len(vocab), cfg, cfg.discriminator_layers, n_segments=1)
        self.grounding = SequenceScorer(len(vocab), cfg, cfg.grounding_layers, n_segments=2)
        self.to(torch.float64)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        shared = {id(self.shared_embedding.weight)}
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "shared": [("shared_embedding.weight", self.shared_embedding.weight)]
        }
        for name in ("prior", "posterior", "generator", "discriminator", "grounding"):
            module = getattr(self, name)
            groups[name] = [
                (f"{name}.{pname}", p)
                for pname, p in module.named_parameters()
                if id(p) not in shared
            ]
        return groups

    def group_checksums(self) -> dict[str, str]:
        sums = {}
        for group, params in self.parameter_groups().items():
            digest = hashlib.sha256()
            for name, p in sorted(params, key=lambda np_: np_[0]):
                digest.update(name.encode("utf-8"))
                digest.update(p.detach().cpu().contiguous().numpy().tobytes())
            sums[group] = digest.hexdigest()
        return sums

    def phi_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Everything the posterior span distribution depends on."""
        groups = self.parameter_groups()
        return groups["posterior"] + groups["shared"]


def init_model(vocab: Vocab, cfg: ModelConfig, seed: int) -> Model:
    """Deterministic initialization, independent of module registration order."""
    model = Model(vocab, cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters(), key=lambda np_: np_[0]):
            if p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:  # LayerNorm weights
                p.fill_(1.0)
    return model


# ---------------------------------------------------------------------------
# Spec-facing operations
# ---------------------------------------------------------------------------


def _check_length(model: Model, *lengths: int, extra: int = 0) -> None:
    total = sum(lengths) + extra
    if total > model.cfg.max_len:
        raise ValueError(f"input length {total} exceeds model bound {model.cfg.max_len}")


def prior_read(context_tokens: Sequence[str], knowledge_tokens: Sequence[str], model: Model) -> EncoderOutput:
    if len(context_tokens) < 1 or len(knowledge_tokens) < 1:
        raise ValueError("prior_read needs non-empty context and knowledge")
    _check_length(model, len(context_tokens), len(knowledge_tokens))
    v = model.vocab
    return model.prior([v.encode(context_tokens), v.encode(knowledge_tokens)], pool_parts=[0])


def posterior_read(
    context_tokens: Sequence[str],
    response_tokens: Sequence[str],
    knowledge_tokens: Sequence[str],
    model: Model,
) -> EncoderOutput:
    if min(len(context_tokens), len(response_tokens), len(knowledge_tokens)) < 1:
        raise ValueError("posterior_read needs non-empty context, response and knowledge")
    _check_length(model, len(context_tokens), len(response_tokens), len(knowledge_tokens))
    v = model.vocab
    return model.posterior(
        [v.encode(context_tokens), v.encode(response_tokens), v.encode(knowledge_tokens)],
        pool_parts=[0, 1],
    )


def generator_nll(
    context_tokens: Sequence[str],
    span_tokens: Sequence[str],
    response_tokens: Sequence[str],
    model: Model,
) -> torch.Tensor:
    v = model.vocab
    _check_length(model, len(context_tokens), len(span_tokens), len(response_tokens), extra=3)
    return model.generator.nll(
        v.encode(context_tokens), v.encode(span_tokens), v.encode(response_tokens),
        v.sep_id, v.bos_id, v.eos_id,
    )


def _apply_repetition_penalty(logits: torch.Tensor, emitted: Sequence[int], penalty: float) -> torch.Tensor:
    if penalty == 1.0 or not emitted:
        return logits
    out = logits.clone()
    for tok in set(emitted):
        val = out[tok]
        out[tok] = val / penalty if val > 0 else val * penalty
    return out


def generator_decode(
    context_tokens: Sequence[str],
    span_tokens: Sequence[str],
    decode_config: DecodeConfig,
    model: Model,
) -> list[str]:
    """Beam search with repetition penalty and [min_len, max_len] bounds.

    The end token is suppressed until min_len and forced at max_len; the
    best finished hypothesis by cumulative log-probability is returned.
    """
    decode_config.validate()
    v = model.vocab
    _check_length(model, len(context_tokens), len(span_tokens), decode_config.max_len, extra=3)
    ctx = v.encode(context_tokens)
    span = v.encode(span_tokens)
    eos = v.eos_id

    active: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    with torch.no_grad():
        while active:
            candidates: list[tuple[float, list[int], bool]] = []
            for toks, score in active:
                logits = model.generator.logits(ctx, span, toks, v.sep_id, v.bos_id)[-1]
                logits = _apply_repetition_penalty(logits, toks, decode_config.repetition_penalty)
                if len(toks) < decode_config.min_len:
                    logits = logits.clone()
                    logits[eos] = float("-inf")
                logprobs = torch.log_softmax(logits, dim=-1)
                if len(toks) >= decode_config.max_len:
                    candidates.append((score + float(logprobs[eos]), toks + [eos], True))
                    continue
                for tok in range(logprobs.numel()):
                    lp = float(logprobs[tok])
                    if lp == float("-inf"):
                        continue
                    candidates.append((score + lp, toks + [tok], tok == eos))
            candidates.sort(key=lambda c: -c[0])
            next_active: list[tuple[list[int], float]] = []
            for score, toks, done in candidates:
                if done:
                    finished.append((toks, score))
                else:
                    next_active.append((toks, score))
                if len(next_active) == decode_config.beam_width:
                    break
            active = next_active
    best_toks, _ = max(finished, key=lambda fs: fs[1])
    return v.decode(best_toks[:-1])  # strip the end token


def discriminator_logit(response_tokens: Sequence[str], model: Model) -> torch.Tensor:
    if not response_tokens:
        raise ValueError("discriminator needs a non-empty response")
    v = model.vocab
    _check_length(model, len(response_tokens), extra=1)
    return model.discriminator.logit([v.encode(response_tokens)], v.cls_id)


def discriminator_score(response_tokens: Sequence[str], model: Model) -> float:
    with torch.no_grad():
        s = torch.sigmoid(discriminator_logit(response_tokens, model))
    return float(s.clamp(1e-12, 1 - 1e-12))


def grounding_logit(span_tokens: Sequence[str], response_tokens: Sequence[str], model: Model) -> torch.Tensor:
    if not span_tokens or not response_tokens:
        raise ValueError("grounding score needs non-empty span and response")
    v = model.vocab
    _check_length(model, len(span_tokens), len(response_tokens), extra=1)
    return model.grounding.logit([v.encode(response_tokens), v.encode(span_tokens)], v.cls_id)


def grounding_score(span_tokens: Sequence[str], response_tokens: Sequence[str], model: Model) -> float:
    with torch.no_grad():
        s = torch.sigmoid(grounding_logit(span_tokens, response_tokens, model))
    return float(s.clamp(1e-12, 1 - 1e-12))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: Model,
    config_hash: str = "",
    rng_state: dict | None = None,
) -> None:
    groups = model.parameter_groups()
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "d": model.cfg.d_model,
        "vocab_size": len(model.vocab),
        "component_shapes": {
            g: {name: list(p.shape) for name, p in params} for g, params in groups.items()
        },
        "config_hash": config_hash,
    }
    payload = {
        "meta": meta,
        "model_config": asdict(model.cfg),
        "vocab": model.vocab.tokens,
        "state": model.state_dict(),
        "rng_state": rng_state or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"{path}: cannot read checkpoint: {exc}") from exc
    meta = payload.get("meta", {})
    version = meta.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"{path}: checkpoint schema_version {version} unsupported "
            f"(expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    cfg = ModelConfig(**payload["model_config"])
    vocab = Vocab(payload["vocab"])
    if meta.get("vocab_size") != len(vocab) or meta.get("d") != cfg.d_model:
        raise ValueError(f"{path}: checkpoint metadata inconsistent with stored vocab/config")
    model = Model(vocab, cfg)
    expected = {name: tuple(p.shape) for name, p in model.state_dict().items()}
    stored = {name: tuple(t.shape) for name, t in payload["state"].items()}
    if expected != stored:
        diff = sorted(set(expected.items()) ^ set(stored.items()))[:4]
        raise ValueError(f"{path}: checkpoint shapes inconsistent: {diff}")
    model.load_state_dict(payload["state"])
    return model, {**meta, "rng_state": payload.get("rng_state", {})}


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(json.dumps(config_dict, sort_keys=True).encode("utf-8")).hexdigest()

"""spangen: span-grounded multi-reference dialogue generation at desk scale."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    DialogueCase,
    MessageTree,
    SynthConfig,
    extract_cases,
    passes_focused_filter,
    passes_general_filter,
    split_corpus,
    synth_corpus,
    tokenize,
)
from .nets import DecodeConfig, Model, ModelConfig, Vocab, init_model  # noqa: F401
from .spans import Span, joint_posterior, joint_prior, pseudo_span_tag, unigram_f1  # noqa: F401
from .training import TrainConfig, compute_elbo, run_training  # noqa: F401

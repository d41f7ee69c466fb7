"""Membership-inference attacks and inference-time defenses for language models.

Models are reached through a small duck-typed surface (``score``,
``distributions``, ``generate``); :class:`ToyModel` and :func:`serve_mock`
provide offline stand-ins for real completion endpoints.
"""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ConfigurationError,
    InputError,
    MiaGuardError,
    ProtocolError,
    TransportError,
)
from .model_access import (
    GeneratedAnswer,
    MockJudge,
    RemoteModel,
    TokenDistributions,
    TokenScoredText,
    ToyModel,
    connect,
    fit_toy_lm,
    generate,
    score_tokens,
    toy_lm_score,
)
from .metrics import asr, auc, exact_match, format_cell, summarize, token_f1, tpr_at_fpr
from .attacks import ATTACKS, AttackConfig, AttackSample, run_attack_suite
from .defenses import (
    DefendedModel,
    DefenseChain,
    NoiseParams,
    PrivacyLedger,
    defense_dp_logits,
    defense_flatten,
    epd_answer,
    rdp_to_dp,
)
from .retrieval import HashingEmbedder, RagModel, RetrievalIndex, build_index, retrieve_topk
from .judge_analysis import bias_report, categorize
from .harness import ExperimentConfig, DefenseArm, emit_report, load_config, render_table, run_experiment
from .testbed import TestbedConfig, build_testbed
from .server import serve_mock

__all__ = [
    "ATTACKS", "AttackConfig", "AttackSample", "CapabilityError", "ConfigurationError", "DefendedModel",
    "DefenseArm", "DefenseChain", "ExperimentConfig", "GeneratedAnswer", "HashingEmbedder", "InputError",
    "MiaGuardError", "MockJudge", "NoiseParams", "PrivacyLedger", "ProtocolError", "RagModel", "RemoteModel",
    "RetrievalIndex", "TestbedConfig", "TokenDistributions", "TokenScoredText", "ToyModel", "TransportError",
    "asr", "auc", "bias_report", "build_index", "build_testbed", "categorize", "connect", "defense_dp_logits",
    "defense_flatten", "emit_report", "epd_answer", "exact_match", "fit_toy_lm", "format_cell", "generate",
    "load_config", "rdp_to_dp", "render_table", "retrieve_topk", "run_attack_suite", "run_experiment",
    "score_tokens", "serve_mock", "summarize", "token_f1", "toy_lm_score", "tpr_at_fpr",
]

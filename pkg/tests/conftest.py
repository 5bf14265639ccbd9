import os

# Keep BLAS single-threaded: batch matmuls here are small enough that thread
# fan-out only adds overhead and jitter.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np

from slp_mnmt.data import (
    LanguageSpec,
    SamplingSchedule,
    generate_synthetic_suite,
    identity_table,
    shifted_table,
)
from slp_mnmt.model import ModelConfig, init_params


def tiny_specs():
    return [
        LanguageSpec("ha", "high", 80, shifted_table(6, 6)),
        LanguageSpec("hb", "high", 80, shifted_table(6, 0), reverse=True),
        LanguageSpec("lc", "low", 24, shifted_table(6, 3)),
    ]


def tiny_suite(seed=5):
    return generate_synthetic_suite(
        seed,
        tiny_specs(),
        base_vocab_size=12,
        source_alphabet_size=6,
        dev_size=12,
        min_len=4,
        max_len=8,
    )


def tiny_config(suite, **overrides):
    base = dict(
        embed_dim=16,
        slp_hidden_dim=32,
        num_slp_modules=2,
        num_encoder_layers=1,
        num_decoder_layers=1,
        num_heads=2,
        ffn_dim=32,
        vocab_size=len(suite.vocab),
        max_seq_len=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(suite, seed=0, variant="slp", **overrides):
    cfg = tiny_config(suite, **overrides)
    return init_params(cfg, suite.languages(), np.random.default_rng(seed), variant=variant)


def quick_schedule():
    return SamplingSchedule(1.0, 5.0, 5)

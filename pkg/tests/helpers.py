"""Shared builders for the test modules."""

from dataclasses import replace

import numpy as np

from fassl.data import AugmentConfig, DatasetSpec, augment_batch
from fassl.encoder import EncoderConfig, add_head, encode, init_params
from fassl.pipeline import EncoderDims, EvalConfig, RunConfig
from fassl.prototypes import ProtoStageConfig, build_proto_tape, init_prototypes, interleave
from fassl.rebalance import RebalanceConfig, build_rebalance_tape, clip_normalize_weights

GRAD_ENC = EncoderConfig((8, 12, 6), (6, 12, 6))


def tiny_config(out, seed=0, **sections) -> RunConfig:
    """A pipeline config that finishes in well under a second."""
    cfg = RunConfig(
        data=DatasetSpec(num_classes=6, max_count=60, imbalance_factor=10.0, input_dim=8),
        encoder=EncoderDims(hidden=16, feature_dim=8, head_hidden=16),
        proto=ProtoStageConfig(num_prototypes=16, epochs=2, batch_size=32),
        rebalance=RebalanceConfig(epochs=2, batch_size=32),
        eval=EvalConfig(test_per_class=10),
        seed=seed,
        out=str(out),
    )
    return replace(cfg, **sections)


def generic_point(params, rng, scale=0.5):
    """Random biases. Zero-bias ReLU nets are positively homogeneous, which
    puts exact zeros and kinks into the normalized losses at init."""
    for name in params.names():
        if name.endswith(".b"):
            params[name] = rng.normal(0.0, scale, params[name].shape)
    return params


def gradient_tapes(samples, seed, enc=GRAD_ENC, K=10):
    """Stage-1 and stage-2 loss tapes on a random 4-sample batch.

    The stage-2 weights are constants; they are drawn from a bounded
    distribution so every coordinate's gradient is well above the rounding
    floor of central differences.
    """
    rng = np.random.default_rng([seed, 7])
    X = samples[rng.choice(len(samples), 4, replace=False)]
    aug = AugmentConfig()
    v1, v2 = augment_batch(X, aug, rng), augment_batch(X, aug, rng)
    teacher = generic_point(init_params(enc, seed), rng)
    bank = init_prototypes(K, enc.feature_dim, seed + 1)
    contra, _, _ = build_proto_tape(teacher, bank, interleave(v1, v2), 0.2)
    student = generic_point(add_head(teacher, enc, seed + 2), rng)
    w = clip_normalize_weights(rng.lognormal(0.0, 1.0, 4), 0.95)
    reb, _, _ = build_rebalance_tape(student, v1, encode(teacher, v2), w)
    return contra, reb

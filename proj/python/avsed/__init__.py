# SPDX-License-Identifier: Apache-2.0
"""Audio-visual sound event detection with a mean-teacher CRNN."""

from ._avsed import (
    AvsedRuntimeError,
    RunConfig,
    ValidationError,
    clip_micro_f1,
    evaluate,
    event_macro_f1,
    experiment,
    generate,
    gradcheck,
    linear_pool,
    lr_at,
    median_filter,
    parse_strong_tsv,
    predict,
    read_features,
    score_checkpoint,
    segment_micro_f1,
    train,
    write_features,
)

__version__ = "0.1.0"

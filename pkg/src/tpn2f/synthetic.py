"""Synthetic copy/arithmetic word-problem datasets for desk-scale runs.

Each sample pairs a short token sequence with the program it denotes, over a
deliberately tiny vocabulary, so a correct implementation can drive training
accuracy to 100% within a few hundred epochs at reduced dimensions.
"""

from __future__ import annotations

import numpy as np

from .data import Sample
from .formal_lang import RelationalTuple

_VALUES = [f"v{i}" for i in range(8)]
_OP_WORDS = {"plus": "add", "minus": "sub", "times": "mul"}


def make_micro_dataset(n: int = 50, seed: int = 0) -> list[Sample]:
    """Deterministic set of ``n`` distinct text -> program pairs.

    Three templates, exercising one- and two-step programs and #-references:
      copy V                -> (copy, V)
      V1 OP V2              -> (op, V1, V2)
      V1 OP V2 then OP2 V3  -> (op, V1, V2) (op2, #0, V3)
    """
    rng = np.random.default_rng(seed)
    ops = sorted(_OP_WORDS)
    seen: set[tuple[str, ...]] = set()
    samples: list[Sample] = []
    while len(samples) < n:
        kind = rng.integers(0, 3)
        if kind == 0:
            text = ["copy", _VALUES[rng.integers(len(_VALUES))]]
            program = [RelationalTuple("copy", (text[1],))]
        elif kind == 1:
            w = ops[rng.integers(len(ops))]
            a, b = (_VALUES[rng.integers(len(_VALUES))] for _ in range(2))
            text = [a, w, b]
            program = [RelationalTuple(_OP_WORDS[w], (a, b))]
        else:
            w1, w2 = (ops[rng.integers(len(ops))] for _ in range(2))
            a, b, c = (_VALUES[rng.integers(len(_VALUES))] for _ in range(3))
            text = [a, w1, b, "then", w2, c]
            program = [RelationalTuple(_OP_WORDS[w1], (a, b)),
                       RelationalTuple(_OP_WORDS[w2], ("#0", c))]
        key = tuple(text)
        if key in seen:
            continue
        seen.add(key)
        samples.append(Sample(id=f"micro-{len(samples)}", text=text, program=program))
    return samples


def micro_config():
    """Reduced-dimension training configuration suited to the micro dataset."""
    from .training import TrainConfig

    return TrainConfig(
        epochs=500,
        learning_rate=0.005,
        batch_size=10,
        seed=0,
        max_decode_len=4,
        d_word=16,
        n_fillers=12,
        n_roles=10,
        d_filler=10,
        d_role=8,
        d_rel=8,
        d_arg=6,
        d_pos=5,
        positions=2,
        stop_at_full_accuracy=True,
    )

"""Desk-scale Transformer with multiway dynamic dense connections.

Thin Python wrapper over the C++ core: architecture overhead analysis,
byte-level training/evaluation/generation, and exact parameter accounting.
All heavy lifting happens in the compiled ``_core`` extension; this layer
only converts paths and JSON.
"""

from __future__ import annotations

import json as _json
import os as _os

from . import _core

__version__ = _core.__version__

__all__ = [
    "analyze",
    "evaluate",
    "generate",
    "make_corpus",
    "param_counts",
    "train",
]


def analyze(L: int = 24, D: int = 2048, T: int = 4096, heads: int = 16,
            batch: int = 1, ways: int = 4) -> dict:
    """Closed-form overhead report for one architecture point.

    Returns a dict with exact and approximate extra-parameter/FLOP ratios
    (including their printed forms) and the activation-memory rows.
    """
    return _json.loads(_core.analyze_json(L=L, D=D, T=T, heads=heads,
                                          batch=batch, ways=ways))


def make_corpus(seed: int = 0, nbytes: int = 1 << 20) -> bytes:
    """Deterministic pseudo-English byte corpus (ASCII, learnable statistics)."""
    return _core.make_corpus(seed, nbytes)


def param_counts(config_text: str) -> dict:
    """Exact parameter accounting for the model a flat config text describes."""
    return _core.param_counts(config_text)


def train(config_path: str | _os.PathLike, seed: int | None = None,
          out_dir: str | _os.PathLike | None = None) -> dict:
    """Run the training loop from a flat ``key = value`` config file.

    ``seed``/``out_dir`` override the config when given. Returns final and
    best validation losses plus the metrics CSV and checkpoint prefixes.
    """
    return _core.train_file(str(config_path),
                            -1 if seed is None else int(seed),
                            "" if out_dir is None else str(out_dir))


def evaluate(checkpoint: str | _os.PathLike, corpus: str | _os.PathLike,
             batch_size: int = 8) -> dict:
    """Mean token-level cross-entropy and perplexity of a checkpoint."""
    return _core.evaluate(str(checkpoint), str(corpus), batch_size)


def generate(checkpoint: str | _os.PathLike, prompt: bytes, n: int = 64,
             mode: str = "greedy", temperature: float = 1.0, top_k: int = 40,
             seed: int = 0) -> bytes:
    """Continue ``prompt`` with ``n`` bytes via incremental decoding."""
    return _core.generate(str(checkpoint), prompt, n, mode, temperature,
                          top_k, seed)

"""Attention cost of the style modulator versus naive joint attention.

Both paths are run for real on random tokens with an instrumented attention
kernel.  The naive path attends over the global tokens and all ``n`` patch
sequences at once, ``(n + 1) L`` tokens; the modulator attends over ``2 L``
tokens (twice, one pass per refinement step).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import msm
from .attention import AttentionCounter, multi_head_attention
from .numerics import ParamStore, concat, constant, no_grad
from .tokenizer import ModelConfig, TokenSequence

DEFAULT_LENGTHS = (4, 16, 64)
DEFAULT_PATCHES = (1, 2, 5, 10)


@dataclass
class CostRow:
    L: int
    n: int
    msm_scores: int
    naive_scores: int
    msm_macs: int
    naive_macs: int
    msm_ms: float
    naive_ms: float

    @property
    def ratio(self):
        return self.naive_scores / self.msm_scores

    @staticmethod
    def closed_form_ratio(n):
        return ((n + 1) / 2) ** 2


def measure(L, n, d=32, heads=4, seed=0):
    cfg = ModelConfig(d=d, heads=heads, n_patches=n)
    store = ParamStore(np.float64, seed=seed)
    msm.init_params(store, cfg, n=n)
    rng = np.random.default_rng(seed)
    glob = TokenSequence(constant(rng.standard_normal((L, d))), "style-global")
    locs = [TokenSequence(constant(rng.standard_normal((L, d))), "style-local") for _ in range(n)]

    msm_counter = AttentionCounter()
    with no_grad():
        t0 = time.perf_counter()
        msm.msm_forward(glob, locs, store, heads, counter=msm_counter)
        msm_ms = (time.perf_counter() - t0) * 1e3

        naive_counter = AttentionCounter()
        joint = concat([glob.tokens] + [s.tokens for s in locs])
        t0 = time.perf_counter()
        multi_head_attention(joint, joint, joint, heads, counter=naive_counter)
        naive_ms = (time.perf_counter() - t0) * 1e3

    first = msm_counter.passes[0]
    return CostRow(
        L=L, n=n,
        msm_scores=first["score_entries"], naive_scores=naive_counter.score_entries,
        msm_macs=msm_counter.macs, naive_macs=naive_counter.macs,
        msm_ms=msm_ms, naive_ms=naive_ms,
    )


def cost_table(lengths=DEFAULT_LENGTHS, patches=DEFAULT_PATCHES, d=32, heads=4, seed=0):
    return [measure(L, n, d, heads, seed) for L in lengths for n in patches]


def format_table(rows):
    header = (f"{'L':>4} {'n':>3} {'msm_scores':>11} {'naive_scores':>13} {'ratio':>8} "
              f"{'((n+1)/2)^2':>12} {'msm_macs':>10} {'naive_macs':>11} {'msm_ms':>8} {'naive_ms':>9}")
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.L:>4} {r.n:>3} {r.msm_scores:>11} {r.naive_scores:>13} {r.ratio:>8.4g} "
            f"{CostRow.closed_form_ratio(r.n):>12.4g} {r.msm_macs:>10} {r.naive_macs:>11} "
            f"{r.msm_ms:>8.3f} {r.naive_ms:>9.3f}"
        )
    return "\n".join(lines)

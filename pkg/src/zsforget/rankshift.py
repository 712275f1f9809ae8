"""How far the true class slipped for images that forgetting turned from right to wrong."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .encoders import InputError


@dataclass(frozen=True)
class RankShiftStats:
    one_step_pct: float
    one_step_avg_delta: float
    two_step_pct: float
    two_step_avg_delta: float
    n_newly_incorrect: int

    def to_dict(self) -> dict:
        return asdict(self)


def _rank_of(logits: torch.Tensor, cls: int) -> int:
    """1-based rank of ``cls``; ties are resolved by class index."""
    order = torch.sort(-logits, stable=True).indices
    return int((order == cls).nonzero()[0, 0]) + 1


def rank_shift_analysis(logits_bf, logits_af, true_labels) -> RankShiftStats:
    """Classify each newly misclassified image by how many places its true class dropped.

    A shift of ``s`` places requires the true class to rank at most ``s + 1``
    after forgetting and the new top class to have ranked at most ``s + 1``
    before. The delta for an image is the gap between the new top logit and
    the true-class logit, divided by the standard deviation of that image's
    logits before forgetting.
    """
    bf = torch.as_tensor(np.asarray(logits_bf, dtype=np.float64))
    af = torch.as_tensor(np.asarray(logits_af, dtype=np.float64))
    y = torch.as_tensor(np.asarray(true_labels, dtype=np.int64))
    if bf.ndim != 2 or bf.shape != af.shape or y.shape != (bf.shape[0],):
        raise InputError(f"shape mismatch: bf {tuple(bf.shape)}, af {tuple(af.shape)}, labels {tuple(y.shape)}")
    counts = {1: 0, 2: 0}
    deltas = {1: [], 2: []}
    n = 0
    for i in range(len(y)):
        t = int(y[i])
        if _rank_of(bf[i], t) != 1 or _rank_of(af[i], t) == 1:
            continue
        n += 1
        top_af = int(torch.sort(-af[i], stable=True).indices[0])
        true_rank_af = _rank_of(af[i], t)
        top_rank_bf = _rank_of(bf[i], top_af)
        spread = float(bf[i].std(unbiased=False))
        delta = float(af[i, top_af] - af[i, t]) / spread if spread > 0 else 0.0
        for s in (1, 2):
            if true_rank_af <= s + 1 and top_rank_bf <= s + 1:
                counts[s] += 1
                deltas[s].append(delta)

    def pct(s):
        return 100.0 * counts[s] / n if n else 0.0

    def avg(s):
        return sum(deltas[s]) / len(deltas[s]) if deltas[s] else 0.0

    return RankShiftStats(pct(1), avg(1), pct(2), avg(2), n)

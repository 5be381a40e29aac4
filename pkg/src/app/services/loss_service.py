# File: src/app/services/loss_service.py
from typing import Optional, Sequence

import numpy as np

from src.app.models import tensor as T
from src.app.models.tensor import Tensor
from src.app.utils.exceptions import ValidationException

ENTROPY_TEMPERATURE = 2.0


def consensus_loss(pre_quant: Sequence[Tensor], stop_grad: bool = False) -> Tensor:
    """
    Mean over frames of (1/n) sum_i ||p_i - p_bar||^2, p_bar the all-branch mean.

    The gradient flows into p_bar unless stop_grad is set.
    """
    if len(pre_quant) < 2:
        raise ValidationException("consensus_loss needs at least two branches.")
    n_frames = pre_quant[0].shape[0]
    p_bar = T.mean_over_branches(pre_quant)
    if stop_grad:
        p_bar = T.stop_gradient(p_bar)
    per_branch = [T.sum_squares(T.sub(p, p_bar)) for p in pre_quant]
    return T.scale(T.mean_over_branches(per_branch), 1.0 / n_frames)


def commitment_loss(pre_quant: Sequence[Tensor], codes: Optional[Sequence[Tensor]] = None) -> Tensor:
    """Mean of (p - stop_gradient(B))^2 over branches, frames and bits; B defaults to sign(p)."""
    if codes is None:
        codes = [Tensor(np.where(p.values >= 0, 1.0, -1.0)) for p in pre_quant]
    if len(codes) != len(pre_quant):
        raise ValidationException("commitment_loss needs one code per branch.")
    return T.mean_over_branches([T.mse(p, T.stop_gradient(b)) for p, b in zip(pre_quant, codes)])


def codebook_entropy_loss(pre_quant: Sequence[Tensor], temperature: float = ENTROPY_TEMPERATURE) -> Tensor:
    """
    Per-bit factorized LFQ entropy objective with q = sigmoid(temperature * p):

        mean_{samples,bits} H(q) - mean_bits H(mean_samples q)

    Confident per-sample bits drive the first term to 0; balanced usage across
    the batch drives the second towards ln 2.
    """
    if not pre_quant or pre_quant[0].shape[0] == 0:
        raise ValidationException("codebook_entropy_loss needs a non-empty batch.")
    q = T.sigmoid(T.concat(pre_quant, axis=0), temperature)
    per_sample = T.mean(T.binary_entropy(q))
    usage = T.mean(T.binary_entropy(T.mean(q, axis=0)))
    return T.sub(per_sample, usage)

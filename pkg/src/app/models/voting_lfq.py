# File: src/app/models/voting_lfq.py
"""
Voting lookup-free quantizer.

n parallel projections p_i = W_i h + b_i are binarized with sign (STE in
training). Training aggregates the codes into the real-valued consensus
score s = mean_i B_i; inference takes sign(s), i.e. the per-bit strict
majority, and reads the +1/-1 bits as a binary number with dimension j
weighted 2^j (LSB first).
"""
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.app.core.seeding import make_rng
from src.app.models.tensor import Tensor, identity, mean_over_branches, sign_ste
from src.app.models import tensor as T
from src.app.schemas.quantizer import QuantizerConfig
from src.app.utils.exceptions import ValidationException

ArrayLike = Union[np.ndarray, Sequence[float]]


class BranchBank:
    """Per-branch projection weights W_i (d x D) and biases b_i (d)."""

    def __init__(self, weights: List[Tensor], biases: List[Tensor]):
        if not weights or len(weights) != len(biases):
            raise ValidationException("BranchBank needs one bias per weight matrix.")
        shape = weights[0].shape
        for W, b in zip(weights, biases):
            if W.shape != shape or b.shape != (shape[0],):
                raise ValidationException("All branches must share the same (d, D) shape.")
        self.weights = weights
        self.biases = biases

    @classmethod
    def initialize(cls, cfg: QuantizerConfig, seed: int) -> "BranchBank":
        """Independent U(-1/sqrt(D), 1/sqrt(D)) weights per branch, zero biases."""
        bound = 1.0 / np.sqrt(cfg.hidden_dim)
        weights, biases = [], []
        for i in range(cfg.n_branches):
            rng = make_rng(seed, f"init/branch/{i}")
            weights.append(
                Tensor(rng.uniform(-bound, bound, size=(cfg.code_dim, cfg.hidden_dim)), requires_grad=True)
            )
            biases.append(Tensor(np.zeros(cfg.code_dim), requires_grad=True))
        return cls(weights, biases)

    @classmethod
    def from_arrays(cls, weights: Sequence[ArrayLike], biases: Sequence[ArrayLike]) -> "BranchBank":
        return cls(
            [Tensor(np.array(W, dtype=np.float64), requires_grad=True) for W in weights],
            [Tensor(np.array(b, dtype=np.float64), requires_grad=True) for b in biases],
        )

    @classmethod
    def tied(cls, weight: Tensor, bias: Tensor, n_branches: int) -> "BranchBank":
        """All branches share one parameter pair."""
        return cls([weight] * n_branches, [bias] * n_branches)

    @property
    def n_branches(self) -> int:
        return len(self.weights)

    @property
    def is_tied(self) -> bool:
        return self.n_branches > 1 and all(W is self.weights[0] for W in self.weights) and all(
            b is self.biases[0] for b in self.biases
        )

    @property
    def code_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        seen = set()
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if id(W) not in seen:
                params[f"branch.{i}.weight"] = W
                seen.add(id(W))
            if id(b) not in seen:
                params[f"branch.{i}.bias"] = b
                seen.add(id(b))
        return params


def _as_frames(h) -> Tensor:
    if isinstance(h, Tensor):
        return h
    arr = np.asarray(h, dtype=np.float64)
    return Tensor(arr[None, :] if arr.ndim == 1 else arr)


def project(h, bank: BranchBank, h_perturbed=None, perturbed: Optional[Sequence[bool]] = None) -> List[Tensor]:
    """
    p_i = h W_i^T + b_i for every branch, h of shape (frames, D).

    With `perturbed` set, branch i reads h_perturbed where perturbed[i] is true.
    """
    h = _as_frames(h)
    if h.shape[1] != bank.hidden_dim:
        raise ValidationException(f"hidden size {h.shape[1]} != bank hidden_dim {bank.hidden_dim}")
    if perturbed is not None:
        if h_perturbed is None or len(perturbed) != bank.n_branches:
            raise ValidationException("routing needs a perturbed stream and one flag per branch")
        h_perturbed = _as_frames(h_perturbed)

    out = []
    for i, (W, b) in enumerate(zip(bank.weights, bank.biases)):
        source = h_perturbed if perturbed is not None and perturbed[i] else h
        out.append(T.affine(source, W, b))
    return out


def binarize(p: Tensor, clip: bool = False, surrogate: bool = False) -> Tensor:
    """B = sign(p) with STE; `surrogate` swaps in the identity for gradient checks."""
    return identity(p) if surrogate else sign_ste(p, clip=clip)


def aggregate_train(codes: Sequence[Tensor]) -> Tensor:
    """Bit-wise mean of the branch codes, differentiable through each branch."""
    if not codes:
        raise ValidationException("aggregate_train needs at least one code.")
    if any(c.shape != codes[0].shape for c in codes):
        raise ValidationException("aggregate_train needs codes of equal dimension.")
    return mean_over_branches(codes)


def sign_pm(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0)


def aggregate_infer(codes: ArrayLike) -> np.ndarray:
    """
    Per-bit strict majority of the branch codes, stacked on axis 0.

    Odd branch counts only, so sign(mean) never sees a tie.
    """
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.shape[0]
    if n % 2 == 0:
        raise ValidationException(f"aggregate_infer needs an odd number of branches, got {n}")
    return sign_pm(codes.mean(axis=0))


def code_to_token(code: ArrayLike) -> Union[int, np.ndarray]:
    """Map a +-1 code (last axis d) to its index: bit j has weight 2^j, +1 -> 1, -1 -> 0."""
    code = np.asarray(code)
    if not np.all(np.abs(code) == 1):
        raise ValidationException("Binary codes must contain only -1 and +1.")
    d = code.shape[-1]
    if d > 62:
        raise ValidationException("code_dim above 62 does not fit an int64 token.")
    weights = np.left_shift(np.int64(1), np.arange(d, dtype=np.int64))
    tokens = ((code > 0).astype(np.int64) * weights).sum(axis=-1)
    return int(tokens) if tokens.ndim == 0 else tokens


def token_to_code(k: Union[int, np.ndarray], d: int) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0) or np.any(k >= 2**d):
        raise ValidationException(f"token out of range [0, {2**d - 1}]")
    bits = (k[..., None] >> np.arange(d, dtype=np.int64)) & 1
    return np.where(bits == 1, 1.0, -1.0)


def vote_tokens(tokens: Sequence[int], d: int) -> int:
    """Decode voter tokens to codes, vote bit-wise, re-encode."""
    return code_to_token(aggregate_infer(token_to_code(np.asarray(tokens), d)))


def quantize_frame_train(
    h,
    bank: BranchBank,
    h_perturbed=None,
    perturbed: Optional[Sequence[bool]] = None,
    clip: bool = False,
    surrogate: bool = False,
) -> Tuple[Tensor, List[Tensor], List[Tensor]]:
    """Returns (consensus score, pre-quantization vectors, branch codes)."""
    pre_quant = project(h, bank, h_perturbed, perturbed)
    codes = [binarize(p, clip=clip, surrogate=surrogate) for p in pre_quant]
    return aggregate_train(codes), pre_quant, codes


def quantize_frame_infer(h: ArrayLike, bank: BranchBank) -> Union[int, np.ndarray]:
    """
    Token for one hidden vector (D,) or a token array for frames (T, D).
    Runs on plain arrays, so concurrent callers only read the bank.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    frames = h[None, :] if single else h
    if frames.shape[1] != bank.hidden_dim:
        raise ValidationException(f"hidden size {frames.shape[1]} != bank hidden_dim {bank.hidden_dim}")
    codes = np.stack([sign_pm(frames @ W.values.T + b.values) for W, b in zip(bank.weights, bank.biases)])
    tokens = code_to_token(aggregate_infer(codes))
    return int(tokens[0]) if single else tokens

# File: src/app/services/vote_analysis_service.py
"""
Oracles for bit-wise voting under an i.i.d. flip model.

Every bit of every branch flips independently with probability p; a token
survives when the per-bit majority restores every bit.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binom

from src.app.core.config import settings
from src.app.core.logger import create_logger
from src.app.core.seeding import make_rng
from src.app.models.voting_lfq import code_to_token, sign_pm, token_to_code, vote_tokens
from src.app.schemas.analysis import CaseReplayRow, CaseTable, FlipModel, SurvivalEstimate
from src.app.utils.exceptions import ResourceNotFoundException, ValidationException

MC_SHARD_SIZE = 50_000
EXHAUSTIVE_MAX_BITS = 20
CASE_FIXTURE = "vote_case.json"

logger = create_logger("vote_analysis", "vote_analysis_service.log")


def majority_flip_prob(model: FlipModel) -> float:
    """P(at least ceil(n/2) of n branches flip a given bit)."""
    return float(binom.sf(model.n // 2, model.n, model.p))


def token_survival_prob(model: FlipModel) -> float:
    return (1.0 - majority_flip_prob(model)) ** model.d


def exhaustive_vote_outcomes(model: FlipModel) -> Tuple[float, float]:
    """
    Enumerate every flip pattern over the n x d bits and return
    (P(voted token correct), P(voted token correct while most branches are wrong)).
    """
    n_bits = model.n * model.d
    if n_bits > EXHAUSTIVE_MAX_BITS:
        raise ValidationException(f"Exhaustive enumeration is limited to n*d <= {EXHAUSTIVE_MAX_BITS}, got {n_bits}")

    patterns = ((np.arange(2**n_bits)[:, None] >> np.arange(n_bits)) & 1).astype(np.int8)
    n_flips = patterns.sum(axis=1)
    weight = np.power(model.p, n_flips) * np.power(1.0 - model.p, n_bits - n_flips)

    # reference code is all +1; a flip turns a bit to -1
    codes = 1.0 - 2.0 * patterns.reshape(-1, model.n, model.d)
    voted_ok = np.all(sign_pm(codes.mean(axis=1)) > 0, axis=1)
    branches_wrong = np.any(codes < 0, axis=2).sum(axis=1)
    override = voted_ok & (branches_wrong > model.n / 2)
    return float(weight[voted_ok].sum()), float(weight[override].sum())


def exhaustive_survival_prob(model: FlipModel) -> float:
    return exhaustive_vote_outcomes(model)[0]


def _simulate_shard(model: FlipModel, seed: int, shard: int, size: int) -> Tuple[int, int]:
    """(survived, overridden) counts for one shard of trials."""
    rng = make_rng(seed, f"mc/{shard}")
    reference = rng.integers(0, 2**model.d, size=size)
    codes = token_to_code(reference, model.d)
    flips = rng.random((size, model.n, model.d)) < model.p
    branch_codes = np.where(flips, -codes[:, None, :], codes[:, None, :])

    voted = code_to_token(sign_pm(branch_codes.mean(axis=1)))
    survived = voted == reference
    branches_wrong = (code_to_token(branch_codes) != reference[:, None]).sum(axis=1)
    overridden = survived & (branches_wrong > model.n / 2)
    return int(survived.sum()), int(overridden.sum())


def _run_trials(model: FlipModel, trials: int, seed: int, workers: int) -> Tuple[int, int]:
    """
    Trials are cut into fixed-size shards, each with its own derived seed, so
    the totals do not depend on the worker count.
    """
    if trials < 1:
        raise ValidationException("Monte Carlo needs at least one trial.")
    shards = [
        (index, min(MC_SHARD_SIZE, trials - start))
        for index, start in enumerate(range(0, trials, MC_SHARD_SIZE))
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        counts = list(executor.map(lambda s: _simulate_shard(model, seed, *s), shards))
    return sum(c[0] for c in counts), sum(c[1] for c in counts)


def monte_carlo_survival(model: FlipModel, trials: int, seed: int, workers: int = 1) -> SurvivalEstimate:
    survived, _ = _run_trials(model, trials, seed, workers)
    estimate = survived / trials
    return SurvivalEstimate(
        estimate=estimate,
        stderr=math.sqrt(estimate * (1.0 - estimate) / trials),
        trials=trials,
    )


def majority_override_rate(model: FlipModel, trials: int, seed: int, workers: int = 1) -> float:
    """Fraction of trials where more than half the branch tokens are wrong yet the vote is right."""
    _, overridden = _run_trials(model, trials, seed, workers)
    return overridden / trials


def survival_table(
    n_values: Sequence[int],
    d: int,
    p_values: Sequence[float],
    trials: int,
    seed: int,
    workers: int = 1,
) -> List[Dict[str, float]]:
    rows = []
    for n in n_values:
        for p in p_values:
            model = FlipModel(n=n, d=d, p=p)
            estimate = monte_carlo_survival(model, trials, seed, workers)
            row = {
                "n": n,
                "d": d,
                "p": p,
                "analytic": token_survival_prob(model),
                "mc_estimate": estimate.estimate,
                "mc_stderr": estimate.stderr,
                "override_rate": majority_override_rate(model, trials, seed, workers),
            }
            if n * d <= EXHAUSTIVE_MAX_BITS:
                row["exhaustive"] = exhaustive_survival_prob(model)
            rows.append(row)
            logger.info(f"n={n} d={d} p={p}: analytic={row['analytic']:.6f} mc={estimate.estimate:.6f}")
    return rows


def load_case_table(path: Optional[Union[str, Path]] = None) -> CaseTable:
    path = Path(path) if path is not None else Path(settings.FIXTURE_DIR) / CASE_FIXTURE
    if not path.is_file():
        raise ResourceNotFoundException(f"Case table not found: {path}")
    return CaseTable.model_validate_json(path.read_text(encoding="utf-8"))


def replay_case(table: CaseTable) -> List[CaseReplayRow]:
    rows = []
    for position in table.positions:
        rows.append(
            CaseReplayRow(
                position=position.position,
                reference=position.reference,
                voted=vote_tokens(position.voters, table.code_dim),
                voters_wrong=sum(1 for v in position.voters if v != position.reference),
                n_voters=len(position.voters),
            )
        )
    return rows


def voter_param_overhead(n: int, hidden_dim: int, code_dim: int) -> int:
    """Projection parameters of n branches: n * (D*d + d)."""
    if n < 1 or hidden_dim < 1 or code_dim < 1:
        raise ValidationException("voter_param_overhead needs positive n, D and d.")
    return n * (hidden_dim * code_dim + code_dim)


def overhead_table(max_n: int, hidden_dim: int, code_dim: int) -> List[Dict[str, int]]:
    """Odd branch counts 1..max_n with the increment over the previous odd count."""
    rows = []
    previous = None
    for n in range(1, max_n + 1, 2):
        params = voter_param_overhead(n, hidden_dim, code_dim)
        rows.append({"n": n, "params": params, "increment": 0 if previous is None else params - previous})
        previous = params
    return rows

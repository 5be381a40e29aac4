# File: src/app/schemas/metrics.py
from typing import List, Optional

from pydantic import BaseModel, ConfigDict


class ItemRecord(BaseModel):
    """One (utterance, perturbation) robustness measurement."""

    model_config = ConfigDict(frozen=True)

    utterance_id: str
    perturbation: str
    realized_intensity: Optional[float] = None
    noise_clip_id: Optional[str] = None
    ued: float


ITEM_FIELDS = ["utterance_id", "perturbation", "realized_intensity", "noise_clip_id", "ued"]


class PerturbationSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    perturbation: str
    mean_ued: float
    std_ued: float
    count: int


class RobustnessReport(BaseModel):
    """
    average_ued is the unweighted mean of the per-perturbation means;
    std is the population standard deviation over utterances.
    """

    per_perturbation: List[PerturbationSummary]
    average_ued: float
    clean_frame_error_rate: float
    n_utterances: int
    items: List[ItemRecord] = []

    def summary_dict(self) -> dict:
        return self.model_dump(mode="json", exclude={"items"})

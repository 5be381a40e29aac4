# File: src/app/schemas/analysis.py
from typing import List

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.app.schemas.validators import CommonValidators


class FlipModel(BaseModel):
    """
    Idealized branch noise: every bit of every branch flips independently
    with probability p.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(ge=1)
    d: int = Field(ge=1, le=62)
    p: float = Field(ge=0.0, le=1.0)

    @field_validator("n")
    @classmethod
    def n_must_be_odd(cls, v: int) -> int:
        return CommonValidators().validate_odd_count(v, "n")


class CasePosition(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    position: int
    reference: int
    voters: List[int]


class CaseTable(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    code_dim: int = Field(ge=1, le=62)
    positions: List[CasePosition]

    @model_validator(mode="after")
    def tokens_in_range(self) -> "CaseTable":
        limit = 2**self.code_dim
        problems = []
        for row in self.positions:
            if not 0 <= row.reference < limit:
                problems.append(f"position {row.position}: reference {row.reference} out of range")
            bad = [t for t in row.voters if not 0 <= t < limit]
            if bad:
                problems.append(f"position {row.position}: voter tokens {bad} out of range")
            if len(row.voters) % 2 == 0:
                problems.append(f"position {row.position}: needs an odd number of voters")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class CaseReplayRow(BaseModel):
    position: int
    reference: int
    voted: int
    voters_wrong: int
    n_voters: int

    @property
    def recovered(self) -> bool:
        return self.voted == self.reference


class SurvivalEstimate(BaseModel):
    estimate: float
    stderr: float
    trials: int

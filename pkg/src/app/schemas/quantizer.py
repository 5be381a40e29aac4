# File: src/app/schemas/quantizer.py
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.app.schemas.validators import CommonValidators


class QuantizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_branches: int = Field(default=5, ge=1)
    code_dim: int = Field(default=13, ge=1, le=30)
    hidden_dim: int = Field(default=64, ge=1)
    ste_clip: bool = False

    @field_validator("n_branches")
    @classmethod
    def branches_must_be_odd(cls, v: int) -> int:
        return CommonValidators().validate_odd_count(v, "n_branches")

    @property
    def codebook_size(self) -> int:
        return 2**self.code_dim

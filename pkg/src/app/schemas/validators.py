# File: src/app/schemas/validators.py
from typing import List


class CommonValidators:
    def validate_odd_count(cls, v: int, name: str = "n") -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError(f"{name} must be a positive odd number so bit-wise votes cannot tie.")
        return v

    def validate_odd_counts(cls, values: List[int], name: str = "n") -> List[int]:
        bad = [v for v in values if v < 1 or v % 2 == 0]
        if bad:
            raise ValueError(f"{name} must contain positive odd numbers only, got {bad}")
        return values

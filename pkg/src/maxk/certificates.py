"""Certificate records emitted by the proof strategies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class Certificate:
    """One strategy's verdict on one model.

    bound is a sound lower bound on full-distribution accuracy, flops the
    approximate cost of computing it, unexplained_dims the count of free
    scalars the strategy consults without structural justification.
    wall_seconds is measured and therefore excluded from byte-for-byte
    report comparisons.
    """

    strategy_id: str
    bound: float
    flops: int
    unexplained_dims: int
    wall_seconds: float = 0.0
    detail: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.bound <= 1.0:
            raise ValueError(f"bound {self.bound} outside [0, 1]")
        if self.flops < 0 or self.unexplained_dims < 0:
            raise ValueError("flops and unexplained_dims must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy_id": self.strategy_id,
            "bound": self.bound,
            "flops": self.flops,
            "unexplained_dims": self.unexplained_dims,
            "wall_seconds": self.wall_seconds,
            "detail": self.detail,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Certificate":
        return cls(
            strategy_id=payload["strategy_id"],
            bound=payload["bound"],
            flops=payload["flops"],
            unexplained_dims=payload["unexplained_dims"],
            wall_seconds=payload.get("wall_seconds", 0.0),
            detail=payload.get("detail", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "Certificate":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

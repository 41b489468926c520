"""Small result containers shared by the estimate modules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field


def _clean(x):
    """Make values JSON friendly (numpy scalars, inf/nan as strings)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "tolist"):
        return _clean(x.tolist())
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


@dataclass
class EstimateReport:
    """Measured left and right sides of one inequality.

    ``trials`` holds per-trial or per-refinement rows; ``details`` is free-form.
    """

    name: str
    lhs: float
    rhs: float
    grid_level: int = 0
    trials: list = field(default_factory=list)
    passed: bool | None = None
    details: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict, repr=False)  # large fields, never serialised

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("arrays")
        d["ratio"] = self.ratio
        return _clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def to_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2)

"""Rough pre-training compute estimate: params x samples x epochs x views^2 x tokens^2."""
from __future__ import annotations

from dataclasses import dataclass

UNIT = 1e22
_SUFFIX = {"K": 1e3, "M": 1e6, "B": 1e9, "G": 1e9, "T": 1e12}


@dataclass(frozen=True)
class CostInputs:
    parameters: float
    samples: float
    epochs: float
    views: float
    tokens: float

    def __post_init__(self):
        for name in ("parameters", "samples", "epochs", "views", "tokens"):
            if not getattr(self, name) >= 1:
                raise ValueError(f"{name} must be >= 1")


def estimate_cost(inputs: CostInputs) -> float:
    """Cost in units of 1e22."""
    i = inputs
    return float(i.parameters) * i.samples * i.epochs * i.views ** 2 * i.tokens ** 2 / UNIT


def parse_count(text: str | float) -> float:
    """``"632e6"``, ``"14M"`` or ``"2B"`` -> float."""
    if isinstance(text, (int, float)):
        return float(text)
    s = text.strip()
    if s and s[-1].upper() in _SUFFIX:
        return float(s[:-1]) * _SUFFIX[s[-1].upper()]
    return float(s)


# Published inputs of the reference comparison table, with its reported costs.
REFERENCE_ROWS = {
    "DINO": (CostInputs(85e6, 1.2e6, 800, 2, 768), 19.2),
    "iBOT": (CostInputs(307e6, 1.2e6, 250, 2, 196), 1.4),
    "BEiT": (CostInputs(307e6, 14e6, 150, 1, 256), 4.2),
    "MAE": (CostInputs(632e6, 1.2e6, 1600, 1, 256), 8.0),
    "AIM": (CostInputs(632e6, 2e9, 2.5, 1, 256), 20.7),
    "XTRA": (CostInputs(632e6, 14e6, 100, 1, 256), 5.8),
}

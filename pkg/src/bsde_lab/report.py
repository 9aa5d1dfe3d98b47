"""Structured pass/fail records shared by every check."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf/nan; keep them readable and round-trippable
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def config_hash(cfg: Any) -> str:
    """sha256 of the canonical JSON form of a configuration mapping."""
    blob = json.dumps(_clean(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class VerificationReport:
    check_name: str
    passed: bool
    worst_margin: float = 0.0
    violation_rate: float = 0.0
    noise_band: float = 0.0
    seed: Optional[int] = None
    scenario_hash: str = ""
    details: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.passed)

    def to_dict(self) -> dict:
        return _clean({
            "check_name": self.check_name,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "pass": bool(self.passed),
            "worst_margin": self.worst_margin,
            "violation_rate": self.violation_rate,
            "noise_band": self.noise_band,
            "details": self.details,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        def num(x):
            return float(x) if isinstance(x, str) else x
        return cls(check_name=d["check_name"], passed=bool(d["pass"]), worst_margin=num(d["worst_margin"]),
                   violation_rate=num(d["violation_rate"]), noise_band=num(d["noise_band"]),
                   seed=d.get("seed"), scenario_hash=d.get("scenario_hash", ""), details=d.get("details", []))

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.check_name}  worst_margin={self.worst_margin:.3g}  violation_rate={self.violation_rate:.3g}"

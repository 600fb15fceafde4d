"""Data-quality requirements per application use case.

Each use case carries an accuracy limit (TVE), a latency limit and a device
class that fixes the minimum report rate and the angle resolution. Where a
requirement is given as a range the upper end is the limit, and a measured
value passes when it is at or below it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import UnknownUseCase, ValidationError

NOMINAL_FREQUENCY = 60.0


@dataclass(frozen=True)
class DeviceClass:
    name: str
    min_samples_per_cycle: float
    max_samples_per_cycle: float
    angle_resolution_mdeg: tuple[float, float]


STEADY_STATE = DeviceClass("steady-state", 1, 1, (10.0, 100.0))
DYNAMIC = DeviceClass("dynamic", 2, 512, (10.0, 100.0))


@dataclass(frozen=True)
class UseCase:
    name: str
    application: str
    tve_percent: tuple[float, float]  # (low, high) of the stated range
    latency_s: tuple[float, float]
    device_class: DeviceClass = STEADY_STATE

    @property
    def tve_limit(self) -> float:
        return self.tve_percent[1]

    @property
    def latency_limit(self) -> float:
        return self.latency_s[1]


_MIN = 60.0

USE_CASES: dict[str, UseCase] = {
    uc.name: uc
    for uc in (
        UseCase("emergency alarms", "state estimation", (1.0, 5.0), (5 * _MIN, 15 * _MIN)),
        UseCase("avoid constraints violations", "state estimation", (0.5, 0.5), (5 * _MIN, 5 * _MIN)),
        UseCase("improve system efficiency", "state estimation", (0.5, 0.5), (30.0, 30.0)),
        # "~0.000%": zero when rounded to three decimals
        UseCase("switch status identification", "topology detection", (0.0, 0.0005), (5 * _MIN, 15 * _MIN)),
        UseCase("corroborate field crew or scada information", "topology detection", (1.0, 1.0), (5 * _MIN, 5 * _MIN)),
        UseCase("support state estimation", "topology detection", (5.0, 5.0), (_MIN, _MIN)),
    )
}

_ALIASES = {
    "avoid constraint violations": "avoid constraints violations",
    "corroborate field crew or scada": "corroborate field crew or scada information",
    "corroborate field crew": "corroborate field crew or scada information",
    "switch status": "switch status identification",
}


def normalize_use_case(name: str) -> str:
    key = re.sub(r"[\s_\-/]+", " ", name.strip().lower())
    key = _ALIASES.get(key, key)
    if key not in USE_CASES:
        raise UnknownUseCase(f"unknown use case {name!r}; known: {sorted(USE_CASES)}")
    return key


@dataclass(frozen=True)
class CriterionResult:
    criterion: str
    measured: float
    limit: float
    passed: bool
    margin: float  # limit minus measured for upper limits; measured minus limit for lower


@dataclass(frozen=True)
class ComplianceReport:
    use_case: str
    results: list[CriterionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed(self) -> list[str]:
        return [r.criterion for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {
            "use_case": self.use_case,
            "passed": self.passed,
            "criteria": [r.__dict__ for r in self.results],
        }


def _upper(criterion: str, measured: float, limit: float) -> CriterionResult:
    return CriterionResult(criterion, measured, limit, measured <= limit, limit - measured)


def _lower(criterion: str, measured: float, limit: float) -> CriterionResult:
    return CriterionResult(criterion, measured, limit, measured >= limit, measured - limit)


def check_requirements(
    use_case: str,
    *,
    tve_percent: float | None = None,
    latency_s: float | None = None,
    report_rate_hz: float | None = None,
    angle_resolution_mdeg: float | None = None,
    nominal_frequency: float = NOMINAL_FREQUENCY,
) -> ComplianceReport:
    """Compare declared or measured stream statistics against a use case.

    Only the statistics supplied are checked.
    """
    uc = USE_CASES[normalize_use_case(use_case)]
    results = []
    for name, value in (("tve_percent", tve_percent), ("latency_s", latency_s), ("report_rate_hz", report_rate_hz),
                        ("angle_resolution_mdeg", angle_resolution_mdeg)):
        if value is not None and not value >= 0:
            raise ValidationError(f"{name} must be a non-negative number, got {value!r}")
    if tve_percent is not None:
        results.append(_upper("accuracy", float(tve_percent), uc.tve_limit))
    if latency_s is not None:
        results.append(_upper("latency", float(latency_s), uc.latency_limit))
    if report_rate_hz is not None:
        results.append(_lower("report_rate", float(report_rate_hz), uc.device_class.min_samples_per_cycle * nominal_frequency))
    if angle_resolution_mdeg is not None:
        results.append(_upper("angle_resolution", float(angle_resolution_mdeg), uc.device_class.angle_resolution_mdeg[1]))
    return ComplianceReport(uc.name, results)

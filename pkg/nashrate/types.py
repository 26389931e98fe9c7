from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Literal, Optional


MechanismKind = Literal["wbb", "sbb"]
AllocationRule = Literal["corrected", "pure"]
LinkRegime = Literal["shared", "single", "idle"]
Side = Literal["right", "left"]
SlopeCase = Literal["A", "B1", "B2"]
StepRule = Literal["armijo", "diminishing"]
BrOrder = Literal["index", "shuffle"]

EquilibriumStatus = Literal["equilibrium", "not_equilibrium", "not_converged"]
RunStatus = Literal["passed", "failed", "out_of_scope"]
JobStatus = Literal["queued", "running", "completed", "failed"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def check(name: str, residual: float, tolerance: float) -> CheckResult:
    residual = float(residual)
    return CheckResult(name=name, residual=residual, tolerance=float(tolerance), passed=residual <= tolerance)


@dataclass
class SweepJob:
    job_id: str
    scenario_id: str
    status: JobStatus

    created_at_ms: int
    started_at_ms: Optional[int]
    finished_at_ms: Optional[int]

    result: Optional[dict[str, Any]]
    error: Optional[str]

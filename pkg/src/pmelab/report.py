"""Verification records shared by the checking modules."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable


def _clean(v: Any) -> Any:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if hasattr(v, "item"):
        return _clean(v.item())
    return v


@dataclass
class CheckRecord:
    """One inequality instance: ``lhs <= constant * sum(rhs_terms)``."""

    check_id: str
    passed: bool
    lhs: float = float("nan")
    rhs_terms: dict[str, float] = field(default_factory=dict)
    constant: float = float("nan")
    cylinder: str = ""
    detail: str = ""

    @property
    def rhs(self) -> float:
        return float(sum(self.rhs_terms.values())) if self.rhs_terms else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rhs"] = self.rhs
        return _clean(d)


def realized_constant(lhs: float, rhs: float) -> float:
    """``lhs / rhs``; zero when both vanish, infinite when only ``rhs`` does."""
    if lhs <= 0:
        return 0.0
    if rhs <= 0:
        return math.inf
    return lhs / rhs


@dataclass
class VerificationReport:
    name: str
    records: list[CheckRecord] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def add(self, rec: CheckRecord) -> CheckRecord:
        self.records.append(rec)
        return rec

    def extend(self, recs: Iterable[CheckRecord]) -> None:
        self.records.extend(recs)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def failures(self) -> list[CheckRecord]:
        return [r for r in self.records if not r.passed]

    def by_id(self, check_id: str) -> list[CheckRecord]:
        return [r for r in self.records if r.check_id == check_id]

    def max_constant(self, check_id: str | None = None) -> float:
        vals = [r.constant for r in self.records
                if (check_id is None or r.check_id == check_id) and not math.isnan(r.constant)]
        return max(vals) if vals else float("nan")

    def to_dict(self) -> dict:
        return _clean({"name": self.name, "passed": self.passed, "summary": self.summary,
                       "records": [r.to_dict() for r in self.records]})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check_id", "passed", "lhs", "rhs", "constant", "cylinder", "rhs_terms", "detail"])
        for r in self.records:
            w.writerow([r.check_id, int(r.passed), repr(float(r.lhs)), repr(float(r.rhs)),
                        repr(float(r.constant)), r.cylinder,
                        json.dumps(_clean(r.rhs_terms), sort_keys=True), r.detail])
        return buf.getvalue()

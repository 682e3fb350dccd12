"""Evaluation report models."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

from src.utils.artifacts import digest_payload

REPORT_SCHEMA_VERSION = 1
UNDEFINED_RATIO = "undefined"


def accuracy_ratio(ta: Optional[float], sa: Optional[float]) -> Optional[float]:
    """SA/TA, or None when TA is zero or either side is missing."""
    if ta is None or sa is None or ta == 0:
        return None
    return sa / ta


@dataclass
class TaskResult:
    """TA/SA pair for one downstream task."""

    task: str
    ta: Optional[float] = None
    sa: Optional[float] = None
    queries_attack: int = 0
    queries_downstream: int = 0
    cost_dollars: float = 0.0

    @property
    def ratio(self) -> Optional[float]:
        return accuracy_ratio(self.ta, self.sa)

    @property
    def ratio_percent(self):
        """Whole-percent ratio, or the undefined marker."""
        ratio = self.ratio
        if ratio is None:
            return UNDEFINED_RATIO
        return int(round(ratio * 100))

    def to_dict(self) -> Dict:
        return {
            "task": self.task,
            "ta": self.ta,
            "sa": self.sa,
            "ratio": self.ratio,
            "ratio_percent": self.ratio_percent,
            "queries_attack": self.queries_attack,
            "queries_downstream": self.queries_downstream,
            "cost_dollars": round(self.cost_dollars, 6),
        }


@dataclass
class EvalReport:
    """Results of one attack variant (or one sweep point) across downstream tasks."""

    label: str
    tasks: List[TaskResult] = field(default_factory=list)
    config_digest: str = ""
    manifest_digest: str = ""
    axis: Optional[str] = None
    axis_value: Optional[object] = None
    extra: Dict = field(default_factory=dict)

    def task(self, name: str) -> TaskResult:
        for result in self.tasks:
            if result.task == name:
                return result
        raise KeyError(name)

    def to_dict(self) -> Dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "label": self.label,
            "config_digest": self.config_digest,
            "manifest_digest": self.manifest_digest,
            "axis": self.axis,
            "axis_value": self.axis_value,
            "tasks": [result.to_dict() for result in self.tasks],
            "extra": self.extra,
        }

    def digest(self) -> str:
        return digest_payload(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        tasks = [
            TaskResult(
                task=row["task"],
                ta=row.get("ta"),
                sa=row.get("sa"),
                queries_attack=row.get("queries_attack", 0),
                queries_downstream=row.get("queries_downstream", 0),
                cost_dollars=row.get("cost_dollars", 0.0),
            )
            for row in data.get("tasks", [])
        ]
        return cls(
            label=data["label"],
            tasks=tasks,
            config_digest=data.get("config_digest", ""),
            manifest_digest=data.get("manifest_digest", ""),
            axis=data.get("axis"),
            axis_value=data.get("axis_value"),
            extra=data.get("extra", {}),
        )

"""Plan comparison metrics: F1, edit distance, and match-at-k."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

KS = (0, 1, 2)
COLUMNS = ("F1", "M@0", "M@1", "M@2", "ED")


def edit_distance(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> int:
    """Levenshtein distance: unit-cost insert, delete, substitute."""
    if len(pred) < len(gold):
        pred, gold = gold, pred
    prev = list(range(len(gold) + 1))
    for i, p in enumerate(pred, 1):
        cur = [i]
        for j, g in enumerate(gold, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (p != g)))
        prev = cur
    return prev[-1]


def match_at_k(pred, gold, k: int) -> bool:
    # "within k moves", so k = 0 is an exact match
    if k < 0:
        raise ValueError("k must be >= 0")
    return edit_distance(pred, gold) <= k


def f1_plan(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> float:
    """Multiset F1 between the behaviors of two plans."""
    overlap = sum((Counter(pred) & Counter(gold)).values())
    precision = overlap / len(pred) if pred else 0.0
    recall = overlap / len(gold) if gold else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class SampleRecord:
    pred: list
    gold: list
    ed: int = field(init=False)
    f1: float = field(init=False)
    # filled by evaluation; None when the plan was never executed
    reached: str | None = None
    valid: bool | None = None
    failed_step: int | None = None
    truncated: bool = False

    def __post_init__(self):
        self.ed = edit_distance(self.pred, self.gold)
        self.f1 = f1_plan(self.pred, self.gold)

    def to_dict(self) -> dict:
        return {
            "pred": list(self.pred),
            "gold": list(self.gold),
            "ed": self.ed,
            "f1": self.f1,
            "reached": self.reached,
            "valid": self.valid,
            "failed_step": self.failed_step,
            "truncated": self.truncated,
        }


@dataclass
class MetricsReport:
    f1: float
    m_at: dict[int, float]
    ed: float
    n: int

    def as_row(self) -> list[float]:
        return [self.f1, self.m_at[0], self.m_at[1], self.m_at[2], self.ed]

    def to_dict(self) -> dict:
        return {
            "F1": self.f1,
            "M@0": self.m_at[0],
            "M@1": self.m_at[1],
            "M@2": self.m_at[2],
            "ED": self.ed,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["F1"], {k: d[f"M@{k}"] for k in KS}, d["ED"], d["n"])

    def format_row(self) -> str:
        return " / ".join(f"{v:.2f}" for v in self.as_row())


def aggregate(records: Iterable[SampleRecord]) -> MetricsReport:
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    n = len(records)
    return MetricsReport(
        f1=100.0 * sum(r.f1 for r in records) / n,
        m_at={k: 100.0 * sum(r.ed <= k for r in records) / n for k in KS},
        ed=sum(r.ed for r in records) / n,
        n=n,
    )


def format_table(rows: Sequence[tuple[str, MetricsReport]], label: str = "split") -> str:
    """Plain-text table with the columns F1, M@0, M@1, M@2, ED."""
    width = max([len(label)] + [len(name) for name, _ in rows])
    head = f"{label:<{width}} | " + " | ".join(f"{c:>6}" for c in COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        lines.append(f"{name:<{width}} | " + " | ".join(f"{v:6.2f}" for v in rep.as_row()))
    return "\n".join(lines) + "\n"

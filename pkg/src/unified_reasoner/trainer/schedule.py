"""Multi-task schedules: which tasks are optimised at each step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .tasks import TaskSpec, make_task

KINDS = ("joint", "alternating", "single-switch", "none")


class ScheduleError(ValueError):
    pass


@dataclass
class Schedule:
    """``kind`` semantics:

    joint          every task every step, losses summed with task weights
    alternating    step s trains task (s // interval) mod len(tasks)
    single-switch  tasks[0] for pretrain_steps, then tasks[1] to the end
    none           a single (reasoning) task from scratch
    """

    kind: str
    tasks: List[TaskSpec] = field(default_factory=list)
    interval: int = 100
    pretrain_steps: int = 0

    def validate(self, total_steps: int) -> None:
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule {self.kind!r}; expected one of {KINDS}")
        if not self.tasks:
            raise ScheduleError("schedule has no tasks")
        if self.kind == "alternating" and self.interval < 1:
            raise ScheduleError("alternating interval must be >= 1")
        if self.kind == "single-switch":
            if len(self.tasks) != 2:
                raise ScheduleError("single-switch needs exactly two tasks (pretrain, main)")
            if not 0 < self.pretrain_steps < total_steps:
                raise ScheduleError(f"pretrain steps {self.pretrain_steps} must lie in (0, {total_steps})")
        if self.kind == "none" and len(self.tasks) != 1:
            raise ScheduleError("schedule 'none' trains exactly one task")

    def active(self, step: int) -> List[TaskSpec]:
        if self.kind in ("joint", "none"):
            return list(self.tasks)
        if self.kind == "alternating":
            return [self.tasks[(step // self.interval) % len(self.tasks)]]
        return [self.tasks[0] if step < self.pretrain_steps else self.tasks[1]]

    def phases(self, total_steps: int) -> List[Tuple[int, int]]:
        """Half-open step ranges that each get their own lr schedule and fresh Adam moments."""
        if self.kind == "single-switch":
            return [(0, self.pretrain_steps), (self.pretrain_steps, total_steps)]
        return [(0, total_steps)]

    def expected_counts(self, total_steps: int) -> Dict[str, int]:
        """Closed-form number of steps in which each task is optimised."""
        names = [t.name for t in self.tasks]
        if self.kind in ("joint", "none"):
            return {n: total_steps for n in names}
        if self.kind == "single-switch":
            return {names[0]: self.pretrain_steps, names[1]: total_steps - self.pretrain_steps}
        k, i = len(names), self.interval
        cycles, rem = divmod(total_steps, i * k)
        return {n: cycles * i + min(i, max(0, rem - j * i)) for j, n in enumerate(names)}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tasks": [t.to_dict() for t in self.tasks],
                "interval": self.interval, "pretrain_steps": self.pretrain_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(d["kind"], [TaskSpec(**t) for t in d["tasks"]], d.get("interval", 100),
                   d.get("pretrain_steps", 0))


def build_schedule(kind: str, main_task: str, pretrain_task: str | None = None,
                   pretrain_steps: int = 0, interval: int = 100,
                   extra: Sequence[str] = (), pretrain_domain: str | None = None) -> Schedule:
    """Convenience constructor used by the CLI.

    Pretraining data follows the main task's domain unless ``pretrain_domain``
    names another one (e.g. CATER-video detection before ACRE).
    """
    main = make_task(main_task)
    domain = pretrain_domain or main.domain
    if kind == "none":
        return Schedule("none", [main])
    if pretrain_task is None:
        raise ScheduleError(f"schedule {kind!r} needs a pretraining task")
    pre = make_task(pretrain_task, domain)
    tasks = [pre, main] + [make_task(e, domain) for e in extra]
    return Schedule(kind, tasks, interval=interval, pretrain_steps=pretrain_steps)

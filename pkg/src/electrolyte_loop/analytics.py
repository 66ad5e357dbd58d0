"""Throughput accounting: closed loop versus a researcher running factorial designs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class HumanModel:
    hours_per_day: float = 8.0
    # 60 work-days for 1000 sequential characterizations at 8 h/day
    minutes_per_experiment: float = 28.8

    def __post_init__(self):
        if self.hours_per_day <= 0 or self.minutes_per_experiment <= 0:
            raise ValueError("human model values must be positive")

    @property
    def experiments_per_day(self) -> float:
        return self.hours_per_day * 60.0 / self.minutes_per_experiment


@dataclass(frozen=True)
class RobotModel:
    hours_per_day: float = 24.0
    # dose + triplicate + rinse, matching the default lab timings (70 + 10 min)
    minutes_per_experiment: float = 80.0

    def __post_init__(self):
        if self.hours_per_day <= 0 or self.minutes_per_experiment <= 0:
            raise ValueError("robot model values must be positive")

    @property
    def experiments_per_day(self) -> float:
        return self.hours_per_day * 60.0 / self.minutes_per_experiment

    @classmethod
    def from_lab(cls, lab_config, hours_per_day: float = 24.0) -> "RobotModel":
        return cls(hours_per_day, lab_config.triplicate_minutes + lab_config.rinse_minutes)


def work_days(n: int, model) -> float:
    return n * model.minutes_per_experiment / (model.hours_per_day * 60.0)


@dataclass(frozen=True)
class TimeEfficiency:
    n: int
    human_days: float
    robot_days: float
    human_days_ceil: int
    robot_days_ceil: int

    @property
    def ratio(self) -> float:
        return self.human_days / self.robot_days if self.robot_days else math.nan

    @property
    def fewer_fraction(self) -> float:
        """Fraction of work-days saved by the robot."""
        return 1.0 - self.robot_days / self.human_days if self.human_days else 0.0


def time_efficiency(n: int, human: HumanModel = HumanModel(), robot: RobotModel = RobotModel()) -> TimeEfficiency:
    if n < 0:
        raise ValueError("n must be non-negative")
    h, r = work_days(n, human), work_days(n, robot)
    return TimeEfficiency(n, h, r, math.ceil(h - 1e-12), math.ceil(r - 1e-12))


def factorial_count(levels: int, factors: int) -> int:
    return int(levels) ** int(factors)


def sample_efficiency(ml_doe_count: int, factorial_levels: int = 5, factors: int = 3) -> float:
    if ml_doe_count < 1 or factorial_levels < 1 or factors < 1:
        raise ValueError("counts must be >= 1")
    return factorial_count(factorial_levels, factors) / ml_doe_count


def overall_speedup(
    ml_doe_count: int = 42,
    factorial_levels: int = 5,
    factors: int = 3,
    human: HumanModel = HumanModel(),
    robot: RobotModel = RobotModel(),
) -> float:
    """Human days for the factorial divided by robot days for the ML design."""
    human_days = work_days(factorial_count(factorial_levels, factors), human)
    return human_days / work_days(ml_doe_count, robot)


@dataclass(frozen=True)
class EfficiencyReport:
    n: int
    ml_doe_count: int
    factorial_levels: int
    factors: int
    factorial_count: int
    human_days: float
    robot_days: float
    human_days_ceil: int
    robot_days_ceil: int
    time_ratio: float
    sample_ratio: float
    overall_speedup: float
    exhaustive_grid: int
    exhaustive_human_days: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [
            ("experiments compared", f"{self.n}"),
            ("human work-days", f"{self.human_days:.2f} (ceil {self.human_days_ceil})"),
            ("robot work-days", f"{self.robot_days:.2f} (ceil {self.robot_days_ceil})"),
            ("time ratio", f"{self.time_ratio:.2f}x"),
            (f"factorial {self.factorial_levels}^{self.factors}", f"{self.factorial_count} samples"),
            ("sample ratio", f"{self.sample_ratio:.2f}x vs {self.ml_doe_count} ML-guided"),
            ("overall speed-up", f"{self.overall_speedup:.2f}x"),
            (f"exhaustive {self.exhaustive_grid}", f"{self.exhaustive_human_days:.1f} human work-days"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def efficiency_report(
    n: int = 40,
    ml_doe_count: int = 42,
    factorial_levels: int = 5,
    factors: int = 3,
    exhaustive_levels: int = 10,
    human: HumanModel = HumanModel(),
    robot: RobotModel = RobotModel(),
) -> EfficiencyReport:
    t = time_efficiency(n, human, robot)
    exhaustive = factorial_count(exhaustive_levels, factors)
    return EfficiencyReport(
        n=n,
        ml_doe_count=ml_doe_count,
        factorial_levels=factorial_levels,
        factors=factors,
        factorial_count=factorial_count(factorial_levels, factors),
        human_days=t.human_days,
        robot_days=t.robot_days,
        human_days_ceil=t.human_days_ceil,
        robot_days_ceil=t.robot_days_ceil,
        time_ratio=t.ratio,
        sample_ratio=sample_efficiency(ml_doe_count, factorial_levels, factors),
        overall_speedup=overall_speedup(ml_doe_count, factorial_levels, factors, human, robot),
        exhaustive_grid=exhaustive,
        exhaustive_human_days=work_days(exhaustive, human),
    )

"""Run reports: per-check pass/fail records serialized as JSON.

Reports are deterministic for a fixed (config, seed): the ``timing``
block is the only volatile part and is excluded from byte-identity
comparisons. CSV side files carry a one-line header comment with the
config hash so tabular data can be traced back to its run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


@dataclass
class Check:
    name: str
    passed: bool
    measured: object
    expected: object
    tolerance: object
    detail: str = ""


@dataclass
class RunReport:
    command: str
    config: dict
    seed: int
    checks: list[Check] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def add(self, name: str, passed: bool, measured, expected, tolerance,
            detail: str = "") -> bool:
        names = {c.name for c in self.checks}
        if name in names:
            raise ValueError(f"duplicate check name {name!r}")
        self.checks.append(Check(name, bool(passed), _jsonable(measured),
                                 _jsonable(expected), _jsonable(tolerance), detail))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self, include_timing: bool = True) -> dict:
        out = {
            "command": self.command,
            "code_version": __version__,
            "seed": self.seed,
            "config": _jsonable(self.config),
            "config_hash": config_hash(_jsonable(self.config), self.seed),
            "checks": [vars(c) for c in self.checks],
            "passed": self.passed,
        }
        if include_timing:
            out["timing"] = {"runtime_seconds": round(time.time() - self.started, 3)}
        return out

    def write(self, outdir: str | Path, name: str = "report.json") -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / name
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def print_summary(self):
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            print(f"[{status}] {self.command}/{c.name}: measured={c.measured} "
                  f"expected={c.expected} tol={c.tolerance}")
        print(f"[{'PASS' if self.passed else 'FAIL'}] {self.command}: "
              f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks")


def write_csv(outdir: str | Path, name: str, header_cols: list[str],
              rows: np.ndarray, cfg: dict, seed: int) -> Path:
    """CSV with a config-hash comment line then a column-name line."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / name
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash(_jsonable(cfg), seed)} "
                 f"fellerkit={__version__}\n")
        fh.write(",".join(header_cols) + "\n")
        np.savetxt(fh, rows, delimiter=",")
    return path


def merge_reports(reports: list[RunReport], seed: int) -> dict:
    """Combined document for the meta-command."""
    started = min(r.started for r in reports) if reports else time.time()
    return {
        "command": "all",
        "code_version": __version__,
        "seed": seed,
        "passed": all(r.passed for r in reports),
        "reports": [r.as_dict(include_timing=False) for r in reports],
        "timing": {"runtime_seconds": round(time.time() - started, 3)},
    }

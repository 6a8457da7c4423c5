"""Experiment reports: config echo, metric tables and emitted files."""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from outlierflow.core.data_io import write_json
from outlierflow.experiments.tables import Table, parse_cell, read_table, table_to_markdown, write_table


@dataclass
class ExperimentReport:
    name: str
    config: dict
    out_dir: Path
    metrics: Dict[str, float] = field(default_factory=dict)
    tables: Dict[str, Path] = field(default_factory=dict)
    figures: Dict[str, Path] = field(default_factory=dict)
    summary_tables: List[str] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)
    wall_clock: Optional[float] = None

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def add_table(self, name: str, table: Table, in_summary: bool = False) -> Path:
        """Write ``name.csv``; with ``in_summary`` the table is also rendered into ``summary.md``."""
        path = write_table(table, self.out_dir / f"{name}.csv")
        self.tables[name] = path
        if in_summary and name not in self.summary_tables:
            self.summary_tables.append(name)
        return path

    def add_figure(self, name: str, path: Union[str, Path]) -> Path:
        self.figures[name] = Path(path)
        return self.figures[name]

    def metrics_table(self) -> Table:
        return [["metric", "value"]] + [[k, float(v)] for k, v in sorted(self.metrics.items())]

    def finish(self) -> "ExperimentReport":
        """Stop the clock and write ``metrics.csv``, ``report.json`` and ``summary.md``."""
        self.wall_clock = time.perf_counter() - self.started
        if self.metrics:
            self.add_table("metrics", self.metrics_table())
        write_json(self.to_dict(), self.out_dir / "report.json")
        (self.out_dir / "summary.md").write_text(self.to_markdown() + "\n", encoding="utf-8")
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config,
            "metrics": self.metrics,
            "tables": {k: str(v) for k, v in self.tables.items()},
            "figures": {k: str(v) for k, v in self.figures.items()},
            "wall_clock_s": self.wall_clock,
        }

    def to_markdown(self) -> str:
        lines = [f"## {self.name}", ""]
        if self.metrics:
            lines += [table_to_markdown(self.metrics_table()), ""]
        for name in self.summary_tables:
            table = [row if i == 0 else [parse_cell(c) for c in row]
                     for i, row in enumerate(read_table(self.tables[name]))]
            lines += [f"### {name}", "", table_to_markdown(table), ""]
        for name, path in sorted({**self.tables, **self.figures}.items()):
            lines.append(f"- {name}: {path}")
        return "\n".join(lines)

"""Result tables as CSV and markdown."""

import csv
import io
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

Table = List[List]


def format_cell(cell) -> str:
    """Render a cell; floats get 4 decimals, NaN and None become empty."""
    if cell is None:
        return ""
    if isinstance(cell, (float, np.floating)):
        return "" if np.isnan(cell) else f"{float(cell):.4f}"
    return str(cell).strip().replace("\n", " ")


def table_to_markdown(table: Table) -> str:
    """Convert a table (first row is the header) to markdown format."""
    if not table or not table[0]:
        return ""

    cleaned = [[format_cell(cell) for cell in row] for row in table]

    col_count = max(len(row) for row in cleaned)
    col_widths = [3] * col_count  # minimum width of 3
    for row in cleaned:
        for i, cell in enumerate(row):
            col_widths[i] = max(col_widths[i], len(cell))
    for row in cleaned:
        row.extend([""] * (col_count - len(row)))

    lines = ["| " + " | ".join(cell.ljust(col_widths[i]) for i, cell in enumerate(cleaned[0])) + " |"]
    lines.append("|" + "|".join("-" * (w + 2) for w in col_widths) + "|")
    for row in cleaned[1:]:
        lines.append("| " + " | ".join(cell.ljust(col_widths[i]) for i, cell in enumerate(row)) + " |")
    return "\n".join(lines)


def _csv_cell(cell) -> str:
    if cell is None:
        return ""
    if isinstance(cell, (float, np.floating)):
        return repr(float(cell))
    return str(cell)


def table_to_csv(table: Table) -> str:
    """Convert a table to CSV format. Numbers keep full precision."""
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    for row in table:
        writer.writerow([_csv_cell(cell) for cell in row])
    return output.getvalue()


def write_table(table: Table, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table_to_csv(table), encoding="utf-8")
    return path


def read_table(path: Union[str, Path]) -> Table:
    with open(path, newline="", encoding="utf-8") as f:
        return [row for row in csv.reader(f)]


def parse_cell(text: str):
    """Inverse of the CSV rendering: numbers become int or float, empty cells None."""
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def mean_spread(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation; NaN entries are dropped."""
    array = np.asarray(values, dtype=np.float64)
    array = array[~np.isnan(array)]
    if array.size == 0:
        return float("nan"), float("nan")
    return float(array.mean()), float(array.std())

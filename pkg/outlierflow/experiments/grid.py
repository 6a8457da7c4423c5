"""Queue of experiment grid cells with status tracking."""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class CellStatus(str, Enum):
    """Status of a grid cell."""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class Cell:
    """One configuration of an ablation grid."""

    name: str
    params: Dict[str, Any]
    fn: Callable[..., Dict[str, Any]] = field(repr=False)
    status: CellStatus = CellStatus.PENDING
    progress: float = 0.0
    message: str = "Waiting..."
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    created_at: datetime = field(default_factory=datetime.now)
    completed_at: Optional[datetime] = None

    def to_dict(self) -> dict:
        """Convert cell to dictionary for JSON serialization."""
        return {
            "name": self.name,
            "params": {k: v.to_dict() if hasattr(v, "to_dict") else v for k, v in self.params.items()},
            "status": self.status.value,
            "progress": self.progress,
            "message": self.message,
            "result": self.result,
            "error": self.error,
            "created_at": self.created_at.isoformat(),
            "completed_at": self.completed_at.isoformat() if self.completed_at else None,
        }


class GridRunner:
    """Runs grid cells in insertion order; a failing cell is recorded and the grid continues."""

    def __init__(self):
        self.cells: Dict[str, Cell] = {}
        self.update_callbacks: List[Callable[[Cell], None]] = []

    def on_update(self, callback: Callable[[Cell], None]):
        """Register a callback for cell updates."""
        self.update_callbacks.append(callback)

    def _notify_update(self, cell: Cell):
        for callback in self.update_callbacks:
            try:
                callback(cell)
            except Exception:
                logger.debug("update callback failed for %s", cell.name, exc_info=True)

    def add_cell(self, name: str, fn: Callable[..., Dict[str, Any]], **params) -> Cell:
        """Queue ``fn(**params)``; its dict result becomes the cell's row."""
        if name in self.cells:
            raise ValueError(f"Duplicate grid cell {name!r}")
        cell = Cell(name=name, params=params, fn=fn)
        self.cells[name] = cell
        self._notify_update(cell)
        return cell

    def run(self, progress_callback: Optional[Callable[[float, str], None]] = None) -> List[Cell]:
        """Process all pending cells."""
        pending = [c for c in self.cells.values() if c.status == CellStatus.PENDING]
        for i, cell in enumerate(pending):
            cell.status = CellStatus.RUNNING
            cell.message = "Starting..."
            self._notify_update(cell)
            if progress_callback:
                progress_callback(100.0 * i / len(pending), cell.name)
            try:
                cell.result = cell.fn(**cell.params)
                cell.status = CellStatus.COMPLETED
                cell.progress = 100.0
                cell.message = "Complete!"
                cell.completed_at = datetime.now()
            except Exception as e:
                cell.status = CellStatus.FAILED
                cell.error = str(e)
                cell.message = f"Error: {e}"
                logger.warning("grid cell %s failed: %s", cell.name, e)
            self._notify_update(cell)
        if progress_callback and pending:
            progress_callback(100.0, "Grid complete")
        return list(self.cells.values())

    def completed(self) -> List[Cell]:
        return [c for c in self.cells.values() if c.status == CellStatus.COMPLETED]

    def failed(self) -> List[Cell]:
        return [c for c in self.cells.values() if c.status == CellStatus.FAILED]

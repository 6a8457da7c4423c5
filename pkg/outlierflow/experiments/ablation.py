"""Ablation grids on the toy-image dataset.

Four grids share one pair of pre-trained models and one seed:

* ``loss``: negative-loss kind x anomaly score (KL-MSP, KL-KL, RKL-RKL, JSD-MSP, JSD-JSD)
* ``generator``: negatives from the flow or from a patch GAN
* ``pretrain``: which models start from pre-trained weights
* ``temperature``: one training run re-scored at several temperatures

Each table cell is the mean and population spread over the last three
evaluated epochs of joint training.
"""

import copy
import functools
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from outlierflow.core.data_io import DatasetManifest, SplitData, load_split, write_json
from outlierflow.core.errors import ConfigurationError
from outlierflow.core.flow import FlowModel
from outlierflow.core.gan import GanPair
from outlierflow.core.options import RunConfig
from outlierflow.core.trainer import JointState, TrainSchedule, joint_train, pretrain_classifier, pretrain_flow, \
    seed_everything
from outlierflow.experiments.grid import Cell, CellStatus, GridRunner
from outlierflow.experiments.pipeline import (
    Scoring,
    build_classifier,
    build_flow,
    build_gan,
    initialize_flow,
    make_eval_fn,
    scoring_tag,
)
from outlierflow.experiments.report import ExperimentReport
from outlierflow.experiments.tables import Table, mean_spread

logger = logging.getLogger(__name__)

GRIDS = ("loss", "generator", "pretrain", "temperature")
LOSS_SCORE_ROWS = (("kl", "msp"), ("kl", "kl"), ("rkl", "rkl"), ("jsd", "msp"), ("jsd", "jsd"))
PRETRAIN_ROWS = ((False, False), (True, False), (True, True))
TEMPERATURES = (1.0, 1.5, 2.0)
METRICS = ("ap", "fpr95", "auroc", "miou", "open_miou")
LAST_EPOCHS = 3


def summarize_history(history: List[Dict[str, float]], tag: str, last: int = LAST_EPOCHS) -> Dict[str, float]:
    """Mean and spread of every metric of ``tag`` over the last ``last`` epochs."""
    rows = history[-last:]
    summary = {}
    for metric in METRICS:
        mean, spread = mean_spread([row.get(f"{tag}/{metric}", float("nan")) for row in rows])
        summary[metric] = mean
        summary[f"{metric}_spread"] = spread
    return summary


def _metric_header() -> List[str]:
    header = []
    for metric in METRICS:
        header += [metric, f"{metric}_spread"]
    return header


def _metric_cells(cell: Cell, tag: str) -> List:
    if cell.status != CellStatus.COMPLETED:
        return [None] * (2 * len(METRICS))
    summary = cell.result[tag]
    cells = []
    for metric in METRICS:
        cells += [summary[metric], summary[f"{metric}_spread"]]
    return cells


def _status(cell: Cell) -> List:
    return [cell.status.value, cell.error or ""]


class AblationRunner:
    """Pre-trains once, then queues one joint-training run per grid cell."""

    def __init__(self, config: RunConfig, train: SplitData, test: SplitData, out_dir: Union[str, Path],
                 progress_callback: Optional[Callable[[float, str], None]] = None):
        self.config = config
        self.train = train
        self.test = test
        self.out_dir = Path(out_dir)
        self.progress_callback = progress_callback
        self.grid = GridRunner()
        self.grid.on_update(self._record_cell)

        seed_everything(config.seed, config.deterministic)
        self.fresh_classifier = build_classifier(config)
        self.fresh_flow = build_flow(config)
        self.pretrained_classifier = copy.deepcopy(self.fresh_classifier)
        self.pretrained_flow = copy.deepcopy(self.fresh_flow)
        initialize_flow(self.fresh_flow, train, config)
        self._pretrained = False

    def _report(self, pct: float, msg: str):
        if self.progress_callback:
            self.progress_callback(pct, msg)

    def _record_cell(self, cell: Cell) -> None:
        """Log a status change and rewrite ``cells.json``."""
        level = logging.DEBUG if cell.status == CellStatus.PENDING else logging.INFO
        logger.log(level, "ablation cell %s: %s", cell.name, cell.status.value)
        write_json({"cells": [c.to_dict() for c in self.grid.cells.values()]}, self.out_dir / "cells.json")

    def pretrain(self) -> None:
        if self._pretrained:
            return
        schedule = TrainSchedule.from_config(self.config)
        self._report(0, "Pre-training classifier...")
        pretrain_classifier(self.pretrained_classifier, self.train, schedule)
        self._report(5, "Pre-training flow...")
        pretrain_flow(self.pretrained_flow, self.train, self.config.crop_size, schedule)
        self._pretrained = True

    def run_cell(
        self,
        name: str,
        config: RunConfig,
        scorings: Sequence[Scoring],
        pretrained_classifier: bool = True,
        pretrained_flow: bool = True,
        generator: str = "flow",
    ) -> Dict[str, Dict[str, float]]:
        """One joint-training run; returns a summary per scoring tag."""
        schedule = TrainSchedule.from_config(config)
        classifier = copy.deepcopy(self.pretrained_classifier if pretrained_classifier else self.fresh_classifier)
        flow: Optional[FlowModel] = None
        gan: Optional[GanPair] = None
        if generator == "gan":
            gan = build_gan(config)
        else:
            flow = copy.deepcopy(self.pretrained_flow if pretrained_flow else self.fresh_flow)
        state = JointState.create(classifier, flow, schedule, schedule.steps_per_epoch(len(self.train)), gan=gan)
        eval_fn = make_eval_fn(self.test, config.num_classes, scorings, config.tpr, config.batch_size)
        joint_train(state, self.train, schedule, self.out_dir / name, eval_fn, config=config.to_dict())
        return {scoring_tag(*s): summarize_history(state.history, scoring_tag(*s)) for s in scorings}

    def add(self, name: str, **params) -> Cell:
        return self.grid.add_cell(name, functools.partial(self.run_cell, name), **params)

    def run(self) -> List[Cell]:
        def progress(pct: float, msg: str):
            self._report(10 + 0.9 * pct, msg)

        return self.grid.run(progress)


def _loss_cells(runner: AblationRunner) -> Callable[[], Tuple[str, Table]]:
    config = runner.config
    cells = {}
    for loss in dict.fromkeys(loss for loss, _ in LOSS_SCORE_ROWS):
        scorings = [(score, config.temperature_for(score)) for row_loss, score in LOSS_SCORE_ROWS if row_loss == loss]
        cells[loss] = runner.add(f"loss_{loss}", config=config.replace(loss_kind=loss), scorings=scorings)

    def table() -> Tuple[str, Table]:
        rows: Table = [["loss", "score", "temperature"] + _metric_header() + ["status", "error"]]
        for loss, score in LOSS_SCORE_ROWS:
            t = config.temperature_for(score)
            cell = cells[loss]
            rows.append([loss, score, t] + _metric_cells(cell, scoring_tag(score, t)) + _status(cell))
        return "loss_score", rows

    return table


def _generator_cells(runner: AblationRunner) -> Callable[[], Tuple[str, Table]]:
    config = runner.config.replace(loss_kind="jsd")
    scoring = ("jsd", config.temperature_for("jsd"))
    cells = {g: runner.add(f"generator_{g}", config=config, scorings=[scoring], generator=g) for g in ("gan", "flow")}

    def table() -> Tuple[str, Table]:
        rows: Table = [["generator"] + _metric_header() + ["status", "error"]]
        for g, cell in cells.items():
            rows.append([g] + _metric_cells(cell, scoring_tag(*scoring)) + _status(cell))
        return "generator", rows

    return table


def _pretrain_cells(runner: AblationRunner) -> Callable[[], Tuple[str, Table]]:
    config = runner.config.replace(loss_kind="jsd")
    scoring = ("jsd", config.temperature_for("jsd"))
    cells = {}
    for cls, flow in PRETRAIN_ROWS:
        name = f"pretrain_cls{int(cls)}_flow{int(flow)}"
        cells[(cls, flow)] = runner.add(name, config=config, scorings=[scoring],
                                        pretrained_classifier=cls, pretrained_flow=flow)

    def table() -> Tuple[str, Table]:
        rows: Table = [["pretrained_classifier", "pretrained_flow"] + _metric_header() + ["status", "error"]]
        for (cls, flow), cell in cells.items():
            rows.append(["yes" if cls else "no", "yes" if flow else "no"]
                        + _metric_cells(cell, scoring_tag(*scoring)) + _status(cell))
        return "pretraining", rows

    return table


def _temperature_cells(runner: AblationRunner) -> Callable[[], Tuple[str, Table]]:
    config = runner.config.replace(loss_kind="jsd")
    scorings = [("jsd", t) for t in TEMPERATURES]
    cell = runner.add("temperature", config=config, scorings=scorings)

    def table() -> Tuple[str, Table]:
        rows: Table = [["temperature"] + _metric_header() + ["status", "error"]]
        for kind, t in scorings:
            rows.append([t] + _metric_cells(cell, scoring_tag(kind, t)) + _status(cell))
        return "temperature", rows

    return table


_GRID_BUILDERS = {
    "loss": _loss_cells,
    "generator": _generator_cells,
    "pretrain": _pretrain_cells,
    "temperature": _temperature_cells,
}


def ablation_grid(
    config: RunConfig,
    manifest: DatasetManifest,
    out_dir: Union[str, Path],
    grids: Sequence[str] = GRIDS,
    progress_callback: Optional[Callable[[float, str], None]] = None,
) -> ExperimentReport:
    """Run the requested grids and write one CSV per grid.

    Failing cells are recorded with their error and leave empty metric cells.
    """
    unknown = sorted(set(grids) - set(GRIDS))
    if unknown:
        raise ConfigurationError(f"Unknown grid(s): {', '.join(unknown)}; choose from {GRIDS}")
    report = ExperimentReport("ablation", config.to_dict(), out_dir)
    train = load_split(manifest, "train")
    test = load_split(manifest, "test")

    runner = AblationRunner(config, train, test, report.out_dir, progress_callback)
    runner.pretrain()
    tables = [_GRID_BUILDERS[name](runner) for name in GRIDS if name in grids]
    runner.run()

    for build in tables:
        name, table = build()
        report.add_table(name, table, in_summary=True)
    report.metrics["cells_completed"] = len(runner.grid.completed())
    report.metrics["cells_failed"] = len(runner.grid.failed())
    for cell in runner.grid.failed():
        logger.warning("ablation cell %s failed: %s", cell.name, cell.error)
    return report.finish()

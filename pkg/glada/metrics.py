"""Macro-F1 scoring, run report, JSON / JSONL writers."""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from sklearn.metrics import f1_score

from .errors import ShapeError

log = logging.getLogger(__name__)

REPORT_FILENAME = "report.json"


def f1_per_class(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    """F1 for every class 0..K-1; a class with precision + recall = 0 scores 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ShapeError("cannot score an empty prediction set")
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.min() < 0 or y.max() >= num_classes:
            raise ShapeError(f"{name} values must lie in [0, {num_classes})")
    return f1_score(y_true, y_pred, labels=np.arange(num_classes), average=None, zero_division=0)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    return float(np.mean(f1_per_class(y_true, y_pred, num_classes)))


@dataclass
class RunReport:
    mode: str
    adv_loss_mode: str
    lca_enabled: bool
    source_only: bool
    seed: int
    num_classes: int
    target_test_macro_f1: float
    target_test_f1_per_class: list[float]
    source_test_macro_f1: Optional[float] = None  # sanity: source model on source test
    source_only_target_macro_f1: Optional[float] = None  # baseline: source model on target test
    threshold_used: Optional[float] = None  # UDA only
    pseudo_labels: dict = field(default_factory=dict)  # provenance counts + quality vs ground truth
    am_history: list[dict] = field(default_factory=list)
    discriminator_means: dict = field(default_factory=dict)  # {"before": {...}, "after": {...}}
    class_spread: Optional[float] = None
    config: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # stage -> seconds, plus started_at / finished_at

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_test_macro_f1 <= 1.0:
            raise ShapeError(f"macro F1 {self.target_test_macro_f1} outside [0, 1]")
        if len(self.target_test_f1_per_class) != self.num_classes:
            raise ShapeError("per-class F1 list must have one entry per class")

    def to_dict(self) -> dict:
        return asdict(self)


def write_json(path: Path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    log.info("Wrote %s", path)


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    """One JSON object per line; replaces any existing file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    log.debug("Wrote %s", path)


def write_report(out_dir: Path, report: RunReport) -> Path:
    """report.json in out_dir."""
    path = Path(out_dir) / REPORT_FILENAME
    write_json(path, report.to_dict())
    return path


def load_report(path: Path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)

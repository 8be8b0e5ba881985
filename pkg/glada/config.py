"""Hyperparameters and scenario configuration (JSON file + CLI overrides)."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

ADV_MODES = ("shared-half", "literal")
MODES = ("uda", "ssda")
ENCODER_PRESETS = ("auto", "har", "eeg")


@dataclass
class TrainHyperparams:
    epochs_pretrain: int = 40
    epochs_am: int = 3
    epochs_adapt: int = 50
    epochs_shared: Optional[int] = None  # None -> epochs_pretrain
    threshold: float = 0.7
    threshold_step: float = 0.1  # retry ladder when threshold init labels nothing
    threshold_margin: float = 0.05  # ladder floor = 1/K + margin
    lr_src_enc: float = 1e-4
    lr_tgt_enc: float = 5e-5
    lr_disc: float = 1e-3
    lr_clf: float = 1e-3
    lr_center: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.9)
    adam_eps: float = 1e-8
    batch_size: int = 32
    adv_loss_mode: str = "shared-half"
    lca_enabled: bool = True
    center_weight: float = 1.0

    def __post_init__(self) -> None:
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        for name in ("epochs_pretrain", "epochs_am", "epochs_adapt", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs_shared is not None and self.epochs_shared < 1:
            raise ConfigError(f"epochs_shared must be >= 1, got {self.epochs_shared}")
        for name in ("lr_src_enc", "lr_tgt_enc", "lr_disc", "lr_clf", "lr_center", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.adv_loss_mode not in ADV_MODES:
            raise ConfigError(f"adv_loss_mode must be one of {ADV_MODES}, got {self.adv_loss_mode!r}")
        if self.center_weight < 0:
            raise ConfigError("center_weight must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def shared_epochs(self) -> int:
        return self.epochs_shared if self.epochs_shared is not None else self.epochs_pretrain

    def check_threshold(self, num_classes: int) -> None:
        """tau must lie in (1/K, 1) for a K-class problem."""
        if not 1.0 / num_classes < self.threshold < 1.0:
            raise ConfigError(f"threshold {self.threshold} outside (1/{num_classes}, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class SbcConfig:
    """Label-spreading settings for the similarity-based classifier."""
    n_neighbors: int = 7
    alpha: float = 0.2
    max_iter: int = 30
    tol: float = 1e-3

    def __post_init__(self) -> None:
        if self.n_neighbors < 1:
            raise ConfigError("n_neighbors must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0")


@dataclass
class ScenarioConfig:
    source_path: Path
    target_path: Path
    output_dir: Path = Path("out")
    mode: str = "uda"
    labeled_fraction: float = 0.01
    seed: int = 0
    train_ratio: float = 0.7
    export_embeddings: bool = False
    source_only: bool = False
    encoder_preset: str = "auto"
    hyperparams: TrainHyperparams = field(default_factory=TrainHyperparams)
    sbc: SbcConfig = field(default_factory=SbcConfig)

    def __post_init__(self) -> None:
        self.source_path = Path(self.source_path)
        self.target_path = Path(self.target_path)
        self.output_dir = Path(self.output_dir)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "ssda" and not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")
        if self.encoder_preset not in ENCODER_PRESETS:
            raise ConfigError(f"encoder_preset must be one of {ENCODER_PRESETS}")

    def check_paths(self) -> None:
        for name in ("source_path", "target_path"):
            p = getattr(self, name)
            if not p.is_dir():
                raise ConfigError(f"{name} does not exist or is not a directory: {p}")

    def to_dict(self) -> dict:
        return {
            "source_path": str(self.source_path),
            "target_path": str(self.target_path),
            "output_dir": str(self.output_dir),
            "mode": self.mode,
            "labeled_fraction": self.labeled_fraction,
            "seed": self.seed,
            "train_ratio": self.train_ratio,
            "export_embeddings": self.export_embeddings,
            "source_only": self.source_only,
            "encoder_preset": self.encoder_preset,
            "hyperparams": self.hyperparams.to_dict(),
            "sbc": asdict(self.sbc),
        }


def _build(cls: type, data: dict[str, Any], where: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def scenario_from_dict(data: dict[str, Any], base_dir: Optional[Path] = None) -> ScenarioConfig:
    """Build a ScenarioConfig from parsed JSON; relative data paths resolve against base_dir."""
    data = dict(data)
    hp = _build(TrainHyperparams, dict(data.pop("hyperparams", {}) or {}), "hyperparams")
    sbc = _build(SbcConfig, dict(data.pop("sbc", {}) or {}), "sbc")
    for key in ("source_path", "target_path"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    for key in ("source_path", "target_path", "output_dir"):
        if key in data and base_dir is not None and not Path(data[key]).is_absolute():
            data[key] = base_dir / data[key]
    return _build(ScenarioConfig, {**data, "hyperparams": hp, "sbc": sbc}, "scenario")


def load_scenario_config(path: Path) -> ScenarioConfig:
    """Read a ScenarioConfig JSON file; absent fields keep their defaults."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return scenario_from_dict(data, base_dir=path.resolve().parent)

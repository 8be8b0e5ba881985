# Time-series domain adaptation (agreement pseudo-labels + global/local alignment) – public API

from .align import (
    AdvBatchLosses,
    CenterBank,
    adapt,
    center_grad,
    center_loss,
    center_update,
    discriminator_loss,
    encoder_adv_loss,
    init_center_bank,
    train_shared_classifier,
)
from .config import SbcConfig, ScenarioConfig, TrainHyperparams, load_scenario_config
from .dataio import (
    SplitPair,
    SynthSpec,
    TimeSeriesDataset,
    batch_iter,
    load_dataset,
    make_synthetic_pair,
    save_dataset,
    split_train_test,
    stratified_label_mask,
)
from .errors import GladaError, StageError
from .metrics import RunReport, f1_per_class, macro_f1, write_report
from .nets import (
    EncoderConfig,
    adam_step,
    build_classifier,
    build_discriminator,
    build_encoder,
    init_target_from_source,
    load_net,
    save_net,
)
from .pipeline import evaluate, export_embeddings, run_scenario
from .pretrain import finetune_target, pretrain_source
from .pseudolabel import (
    PseudoLabelState,
    Provenance,
    agree_inject,
    dnn_predict,
    initial_threshold_labels,
    run_agree_mechanism,
    sbc_fit_predict,
)
from .cli import cli_main

__all__ = [
    "AdvBatchLosses",
    "CenterBank",
    "adapt",
    "center_grad",
    "center_loss",
    "center_update",
    "discriminator_loss",
    "encoder_adv_loss",
    "init_center_bank",
    "train_shared_classifier",
    "SbcConfig",
    "ScenarioConfig",
    "TrainHyperparams",
    "load_scenario_config",
    "SplitPair",
    "SynthSpec",
    "TimeSeriesDataset",
    "batch_iter",
    "load_dataset",
    "make_synthetic_pair",
    "save_dataset",
    "split_train_test",
    "stratified_label_mask",
    "GladaError",
    "StageError",
    "RunReport",
    "f1_per_class",
    "macro_f1",
    "write_report",
    "EncoderConfig",
    "adam_step",
    "build_classifier",
    "build_discriminator",
    "build_encoder",
    "init_target_from_source",
    "load_net",
    "save_net",
    "evaluate",
    "export_embeddings",
    "run_scenario",
    "finetune_target",
    "pretrain_source",
    "PseudoLabelState",
    "Provenance",
    "agree_inject",
    "dnn_predict",
    "initial_threshold_labels",
    "run_agree_mechanism",
    "sbc_fit_predict",
    "cli_main",
]

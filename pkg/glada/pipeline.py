"""Scenario orchestration: split, pretrain, pseudo-label, adapt, shared classifier, evaluate, report."""
import copy
import logging
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd
import torch

from .align import (
    adapt,
    class_spread,
    fit_domain_critic,
    init_center_bank,
    mean_discriminator_output,
    train_shared_classifier,
)
from .config import ScenarioConfig
from .dataio import TimeSeriesDataset, load_dataset, split_train_test, stratified_label_mask
from .errors import DatasetFormatError, GladaError, ShapeError, StageError
from .metrics import REPORT_FILENAME, RunReport, f1_per_class, load_report, write_jsonl, write_report
from .nets import (
    Classifier,
    Encoder,
    build_discriminator,
    extract_features,
    init_target_from_source,
    save_net,
    seed_everything,
)
from .pretrain import encoder_config_for, predict_proba, pretrain_source
from .pseudolabel import initial_labels_with_retry, pseudo_label_quality, run_agree_mechanism, write_audit

LOGGER_NAME = "glada"
RUN_LOG_FILENAME = "run.log"
EMBEDDINGS_FILENAME = "embeddings.tsv"
AUDIT_FILENAME = "pseudo_labels.jsonl"
CHECKPOINT_DIR = "checkpoints"

log = logging.getLogger(__name__)


def setup_run_log(out_dir: Path) -> logging.Logger:
    """Fresh run.log (DEBUG) in out_dir plus a Rich console handler (INFO) on the package logger."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()
    fh = logging.FileHandler(out_dir / RUN_LOG_FILENAME, mode="w", encoding="utf-8")  # fresh log per run
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(fh)
    try:
        from rich.logging import RichHandler
        sh = RichHandler(rich_tracebacks=True, show_path=False)
    except ImportError:
        sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO)
    logger.addHandler(sh)
    return logger


@dataclass
class Evaluation:
    macro_f1: float
    f1_per_class: list[float]
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"macro_f1": self.macro_f1, "f1_per_class": self.f1_per_class}


def evaluate(encoder: Encoder, classifier: Classifier, test: TimeSeriesDataset) -> Evaluation:
    """Eval-mode argmax predictions on a labeled test set, scored by per-class and macro F1."""
    if test.labels is None or not test.fully_labeled:
        raise DatasetFormatError("evaluation needs a fully labeled test set")
    if classifier.num_classes != test.num_classes:
        raise ShapeError(f"classifier has {classifier.num_classes} classes, test set has {test.num_classes}")
    preds = predict_proba(encoder, classifier, test.samples).argmax(axis=1)
    per_class = [float(v) for v in f1_per_class(test.labels, preds, test.num_classes)]
    return Evaluation(macro_f1=float(np.mean(per_class)), f1_per_class=per_class, predictions=preds)


def export_embeddings(encoder_s: Encoder, encoder_t: Encoder, src_test: TimeSeriesDataset,
                      tgt_test: TimeSeriesDataset, path: Path) -> Path:
    """Tab-separated rows: domain tag (src/tgt), true label, then the 128 eval-mode feature values."""
    frames = []
    for tag, encoder, ds in (("src", encoder_s, src_test), ("tgt", encoder_t, tgt_test)):
        feats = extract_features(encoder, ds.samples)
        labels = ds.labels if ds.labels is not None else np.full(ds.p, -1, dtype=np.int64)
        frame = pd.DataFrame(feats, columns=[f"f{i}" for i in range(feats.shape[1])])
        frame.insert(0, "label", labels)
        frame.insert(0, "domain", tag)
        frames.append(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        pd.concat(frames, ignore_index=True).to_csv(path, sep="\t", header=False, index=False, float_format="%.8g")
    except OSError as e:
        raise GladaError(f"cannot write embeddings to {path}: {e}") from e
    log.info("Wrote %s", path)
    return path


def environment_info() -> dict:
    return {
        "python_version": sys.version.split()[0],
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "platform": platform.platform(),
    }


@contextmanager
def _stage(name: str, timings: dict) -> Iterator[None]:
    log.info("stage %s: start", name)
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        log.debug("stage %s failed", name, exc_info=True)
        raise StageError(name, str(e)) from e
    finally:
        timings[name] = round(time.perf_counter() - start, 3)
    log.info("stage %s: done in %.1fs", name, timings[name])


def _load_pair(cfg: ScenarioConfig) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    cfg.check_paths()
    source = load_dataset(cfg.source_path)
    target = load_dataset(cfg.target_path)
    if not source.fully_labeled:
        raise DatasetFormatError(f"source {cfg.source_path} must be fully labeled")
    if not target.fully_labeled:
        raise DatasetFormatError(f"target {cfg.target_path} needs labels for evaluation and SSDA masking")
    if source.num_classes != target.num_classes:
        raise DatasetFormatError(f"source has K={source.num_classes}, target K={target.num_classes}")
    if source.m != target.m:
        raise DatasetFormatError(f"source has m={source.m} channels, target m={target.m}")
    return source, target


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    """Run one source -> target scenario end to end and write every artifact to cfg.output_dir."""
    out = cfg.output_dir
    setup_run_log(out)
    hp = cfg.hyperparams
    seed = cfg.seed
    timings: dict = {"started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    log.info("scenario %s -> %s mode=%s adv=%s lca=%s seed=%d", cfg.source_path, cfg.target_path,
             cfg.mode, hp.adv_loss_mode, hp.lca_enabled, seed)
    seed_everything(seed)

    with _stage("load", timings):
        source, target = _load_pair(cfg)
        K = source.num_classes
        if cfg.mode == "uda":
            hp.check_threshold(K)

    with _stage("split", timings):
        src_split = split_train_test(source, cfg.train_ratio, seed)
        tgt_split = split_train_test(target, cfg.train_ratio, seed + 1)
        tgt_truth = tgt_split.train.labels
        tgt_train = tgt_split.train.with_labels(None)  # ground truth withheld from training

    with _stage("pretrain", timings):
        enc_cfg = encoder_config_for(source, cfg.encoder_preset)
        encoder_s, classifier_s, pre_hist = pretrain_source(src_split.train, hp, seed, enc_cfg)
        write_jsonl(out / "pretrain_history.jsonl", pre_hist)
        source_eval = evaluate(encoder_s, classifier_s, src_split.test)
        baseline = evaluate(encoder_s, classifier_s, tgt_split.test)
        log.info("source-only: source-test MF1=%.2f target-test MF1=%.2f",
                 100 * source_eval.macro_f1, 100 * baseline.macro_f1)

    report_kwargs = dict(
        mode=cfg.mode,
        adv_loss_mode=hp.adv_loss_mode,
        lca_enabled=hp.lca_enabled,
        source_only=cfg.source_only,
        seed=seed,
        num_classes=K,
        source_test_macro_f1=source_eval.macro_f1,
        source_only_target_macro_f1=baseline.macro_f1,
        config=cfg.to_dict(),
        environment=environment_info(),
        timings=timings,
    )
    if cfg.source_only:
        save_net(encoder_s, out / CHECKPOINT_DIR / "source_encoder")
        save_net(classifier_s, out / CHECKPOINT_DIR / "source_classifier")
        timings["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        report = RunReport(target_test_macro_f1=baseline.macro_f1,
                           target_test_f1_per_class=baseline.f1_per_class, **report_kwargs)
        write_report(out, report)
        return report

    threshold_used: Optional[float] = None
    with _stage("pseudo_init", timings):
        if cfg.mode == "uda":
            state, threshold_used = initial_labels_with_retry(encoder_s, classifier_s, tgt_train, hp)
        else:
            state = stratified_label_mask(tgt_split.train, cfg.labeled_fraction, seed)
        log.info("initial target labels: %d of %d", state.n_labeled, state.size)

    with _stage("agree", timings):
        encoder_t = init_target_from_source(encoder_s)
        classifier_am = copy.deepcopy(classifier_s)  # fine-tuned copy serves DNN predictions only
        state, encoder_t, classifier_am = run_agree_mechanism(encoder_t, classifier_am, tgt_train, state, hp, cfg.sbc, seed)
        write_audit(state, out / AUDIT_FILENAME)

    with _stage("adapt", timings):
        critic = fit_domain_critic(encoder_s, encoder_t, src_split.test.samples, tgt_split.test.samples, hp, seed=seed)
        d_before = {
            "src": mean_discriminator_output(encoder_s, critic, src_split.test.samples),
            "tgt": mean_discriminator_output(encoder_t, critic, tgt_split.test.samples),
        }
        discriminator = build_discriminator()
        bank = init_center_bank(encoder_s, src_split.train, K)
        labeled = state.labeled_indices()
        tgt_labeled = (tgt_train.samples[labeled], state.labels[labeled])
        encoder_s, encoder_t, discriminator, bank, adv_hist = adapt(
            encoder_s, encoder_t, discriminator, src_split.train, tgt_labeled, hp, bank, seed
        )
        write_jsonl(out / "adapt_metrics.jsonl", (row.to_dict() for row in adv_hist))
        d_after = {
            "src": mean_discriminator_output(encoder_s, discriminator, src_split.test.samples),
            "tgt": mean_discriminator_output(encoder_t, discriminator, tgt_split.test.samples),
        }

    with _stage("shared", timings):
        classifier_sh, sh_hist = train_shared_classifier(encoder_s, encoder_t, src_split.train, tgt_labeled, hp, seed)
        write_jsonl(out / "shared_history.jsonl", sh_hist)

    with _stage("evaluate", timings):
        result = evaluate(encoder_t, classifier_sh, tgt_split.test)
        pooled = np.concatenate([extract_features(encoder_s, src_split.test.samples),
                                 extract_features(encoder_t, tgt_split.test.samples)])
        spread = class_spread(pooled, np.concatenate([src_split.test.labels, tgt_split.test.labels]))
        log.info("target-test MF1=%.2f (source-only %.2f)", 100 * result.macro_f1, 100 * baseline.macro_f1)

    with _stage("save", timings):
        ckpt = out / CHECKPOINT_DIR
        for name, net in (("source_encoder", encoder_s), ("source_classifier", classifier_s),
                          ("target_encoder", encoder_t), ("discriminator", discriminator),
                          ("shared_classifier", classifier_sh)):
            save_net(net, ckpt / name)
        if cfg.export_embeddings:
            export_embeddings(encoder_s, encoder_t, src_split.test, tgt_split.test, out / EMBEDDINGS_FILENAME)

    timings["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    report = RunReport(
        target_test_macro_f1=result.macro_f1,
        target_test_f1_per_class=result.f1_per_class,
        threshold_used=threshold_used,
        pseudo_labels=pseudo_label_quality(state, tgt_truth, K),
        am_history=state.history,
        discriminator_means={"before": d_before, "after": d_after},
        class_spread=spread,
        **report_kwargs,
    )
    write_report(out, report)
    return report


def summarize_reports(root: Path) -> list[dict]:
    """One row per report.json below root, sorted by run directory."""
    root = Path(root)
    rows = []
    for path in sorted(root.rglob(REPORT_FILENAME)):
        data = load_report(path)
        pseudo = (data.get("pseudo_labels") or {}).get("all") or {}
        rows.append({
            "run": str(path.parent.relative_to(root)) or ".",
            "mode": data.get("mode"),
            "adv_loss_mode": data.get("adv_loss_mode"),
            "lca_enabled": data.get("lca_enabled"),
            "source_only": data.get("source_only"),
            "seed": data.get("seed"),
            "target_test_macro_f1": data.get("target_test_macro_f1"),
            "source_only_target_macro_f1": data.get("source_only_target_macro_f1"),
            "pseudo_label_macro_f1": pseudo.get("macro_f1"),
        })
    return rows

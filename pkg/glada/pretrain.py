"""Source pre-training and target fine-tuning on labeled target samples."""
import logging
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainHyperparams
from .dataio import TimeSeriesDataset, UNLABELED, batch_iter
from .errors import DatasetFormatError, EmptyLabeledSetError, NonFiniteError, ShapeError
from .nets import (
    Classifier,
    Encoder,
    EncoderConfig,
    adam_step,
    build_classifier,
    build_encoder,
    make_optim_state,
    zero_grad,
)

log = logging.getLogger(__name__)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[y] over the batch."""
    return F.cross_entropy(logits, labels)


def encoder_config_for(ds: TimeSeriesDataset, preset: str = "auto") -> EncoderConfig:
    """auto -> EEG settings for univariate input, HAR settings otherwise."""
    if preset == "eeg" or (preset == "auto" and ds.m == 1):
        return EncoderConfig.eeg(ds.m)
    return EncoderConfig.har(ds.m)


def predict_proba(encoder: Encoder, classifier: Classifier, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities [p, K]."""
    encoder.eval()
    classifier.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            x = torch.as_tensor(np.asarray(samples[start:start + batch_size]), dtype=torch.float32)
            out.append(torch.softmax(classifier(encoder(x)), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, classifier.num_classes), dtype=np.float32)


def _train_step(encoder: Encoder, classifier: Classifier, optim, x: torch.Tensor, y: torch.Tensor) -> tuple[float, int]:
    zero_grad(encoder, classifier)
    logits = classifier(encoder(x))
    loss = classification_loss(logits, y)
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite classification loss")
    loss.backward()
    adam_step([encoder, classifier], optim)
    return float(loss.item()), int((logits.argmax(1) == y).sum().item())


def pretrain_source(
    src_train: TimeSeriesDataset,
    hp: TrainHyperparams,
    seed: int = 0,
    encoder_cfg: Optional[EncoderConfig] = None,
) -> tuple[Encoder, Classifier, list[dict]]:
    """Supervised cross-entropy on labeled source data for epochs_pretrain epochs."""
    if src_train.p == 0:
        raise DatasetFormatError("empty source training set")
    if not src_train.fully_labeled:
        raise DatasetFormatError("source training set must be fully labeled")
    if np.unique(src_train.labels).size < 2:
        raise DatasetFormatError("source labels cover fewer than 2 classes")

    torch.manual_seed(seed)
    encoder = build_encoder(encoder_cfg or encoder_config_for(src_train))
    classifier = build_classifier(src_train.num_classes)
    optim = make_optim_state([(encoder, hp.lr_src_enc), (classifier, hp.lr_clf)], betas=hp.betas, eps=hp.adam_eps)

    history: list[dict] = []
    for epoch in range(hp.epochs_pretrain):
        encoder.train()
        classifier.train()
        total_loss, correct, seen = 0.0, 0, 0
        for x, y in batch_iter(src_train, hp.batch_size, seed, epoch):
            loss, hits = _train_step(encoder, classifier, optim, x, y)
            total_loss += loss * len(y)
            correct += hits
            seen += len(y)
        row = {"epoch": epoch + 1, "loss": total_loss / seen, "accuracy": correct / seen}
        history.append(row)
        log.info("pretrain epoch %d/%d loss=%.4f acc=%.3f", epoch + 1, hp.epochs_pretrain, row["loss"], row["accuracy"])
    return encoder, classifier, history


def finetune_target(
    encoder_t: Encoder,
    classifier: Classifier,
    samples: np.ndarray,
    labels: np.ndarray,
    hp: TrainHyperparams,
    steps: int,
    seed: int = 0,
) -> tuple[Encoder, Classifier]:
    """Cross-entropy on labeled target samples (T_L only) for `steps` Adam updates.

    Encoder parameters use lr_tgt_enc, classifier parameters lr_clf. Batches cycle over
    T_L epoch by epoch until the step budget is spent.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(samples) == 0:
        raise EmptyLabeledSetError("no labeled target samples to fine-tune on; lower the threshold or abort")
    if len(labels) != len(samples):
        raise ShapeError(f"{len(samples)} samples but {len(labels)} labels")
    if (labels == UNLABELED).any() or labels.min() < 0 or labels.max() >= classifier.num_classes:
        raise ShapeError("fine-tuning labels must lie in [0, K)")
    if steps <= 0:
        return encoder_t, classifier

    optim = make_optim_state([(encoder_t, hp.lr_tgt_enc), (classifier, hp.lr_clf)], betas=hp.betas, eps=hp.adam_eps)
    encoder_t.train()
    classifier.train()
    done, epoch = 0, 0
    while done < steps:
        for x, y in batch_iter((samples, labels), hp.batch_size, seed, epoch):
            _train_step(encoder_t, classifier, optim, x, y)
            done += 1
            if done >= steps:
                break
        epoch += 1
    log.debug("fine-tuned on %d labeled target samples for %d steps", len(labels), steps)
    return encoder_t, classifier

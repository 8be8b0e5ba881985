"""Global feature alignment (adversarial), local class alignment (center loss), shared classifier."""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainHyperparams
from .dataio import TimeSeriesDataset, batch_iter
from .errors import DatasetFormatError, EmptyLabeledSetError, NonFiniteError, ProbabilityRangeError, ShapeError
from .nets import (
    Classifier,
    Discriminator,
    Encoder,
    adam_step,
    build_classifier,
    build_discriminator,
    extract_features,
    make_optim_state,
    zero_grad,
)
from .pretrain import classification_loss

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-6


@dataclass
class CenterBank:
    """Per-class feature centers [K, 128], shared by both domains."""
    centers: torch.Tensor

    def __post_init__(self) -> None:
        if self.centers.dim() != 2:
            raise ShapeError(f"centers must be [K, d], got {tuple(self.centers.shape)}")
        if not torch.isfinite(self.centers).all():
            raise NonFiniteError("center bank holds NaN or Inf")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.detach().clone())


@dataclass
class AdvBatchLosses:
    """Epoch means of the adaptation losses and discriminator outputs."""
    epoch: int
    loss_disc: float
    loss_enc_src: float
    loss_enc_tgt: float
    loss_center: float
    mean_d_src: float
    mean_d_tgt: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_probs(d: torch.Tensor, name: str) -> None:
    if d.numel() == 0:
        raise ProbabilityRangeError(f"{name} is empty")
    if not torch.isfinite(d).all() or (d < 0).any() or (d > 1).any():
        raise ProbabilityRangeError(f"{name} must lie in [0, 1]")


def _check_mode(mode: str) -> None:
    if mode not in ("shared-half", "literal"):
        raise ValueError(f"unknown adversarial loss mode {mode!r}")


def discriminator_loss(d_src: torch.Tensor, d_tgt: torch.Tensor, mode: str = "shared-half") -> torch.Tensor:
    """shared-half: BCE with source -> 0 and target -> 1, averaged per domain and summed.

    literal: -(mean log(0.5 - d_src) + mean log(d_tgt - 0.5)), log arguments clamped to >= 1e-6.
    """
    _check_mode(mode)
    _check_probs(d_src, "d_src")
    _check_probs(d_tgt, "d_tgt")
    if mode == "shared-half":
        return (F.binary_cross_entropy(d_src, torch.zeros_like(d_src))
                + F.binary_cross_entropy(d_tgt, torch.ones_like(d_tgt)))
    return -(torch.log(torch.clamp(0.5 - d_src, min=LOG_CLAMP)).mean()
             + torch.log(torch.clamp(d_tgt - 0.5, min=LOG_CLAMP)).mean())


def encoder_adv_loss(d: torch.Tensor, mode: str = "shared-half") -> torch.Tensor:
    """shared-half: BCE against 0.5, minimal exactly at d = 0.5. literal: mean -log d."""
    _check_mode(mode)
    _check_probs(d, "d")
    target = torch.full_like(d, 0.5) if mode == "shared-half" else torch.ones_like(d)
    return F.binary_cross_entropy(d, target)


def _check_labels(f: torch.Tensor, y: torch.Tensor, bank: CenterBank) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    if f.dim() != 2 or f.shape[1] != bank.centers.shape[1] or len(y) != f.shape[0]:
        raise ShapeError(f"features {tuple(f.shape)} / labels {tuple(y.shape)} do not match the center bank")
    if len(y) and (y.min() < 0 or y.max() >= bank.num_classes):
        raise ShapeError(f"center-loss labels must lie in [0, {bank.num_classes})")
    return y


def center_loss(f: torch.Tensor, y: torch.Tensor, bank: CenterBank) -> torch.Tensor:
    """0.5 * sum_i ||f_i - c_{y_i}||^2 over the batch; centers are constants here."""
    y = _check_labels(f, y, bank)
    c = bank.centers.detach().to(f.dtype)[y]
    return 0.5 * ((f - c) ** 2).sum()


def center_grad(f: torch.Tensor, y: torch.Tensor, bank: CenterBank) -> torch.Tensor:
    y = _check_labels(f, y, bank)
    return f.detach() - bank.centers.detach().to(f.dtype)[y]


def center_update(f: torch.Tensor, y: torch.Tensor, bank: CenterBank, lr_center: float) -> CenterBank:
    """Damped center step: delta_j = sum_{y_i=j} (c_j - f_i) / (1 + n_j); c_j <- c_j - lr * delta_j."""
    y = _check_labels(f, y, bank)
    with torch.no_grad():
        centers = bank.centers.detach()
        diff = centers[y] - f.detach().to(centers.dtype)
        sums = torch.zeros_like(centers).index_add_(0, y, diff)
        counts = torch.bincount(y, minlength=bank.num_classes).to(centers.dtype)
        delta = sums / (1.0 + counts).unsqueeze(1)
        return CenterBank(centers - lr_center * delta)


def init_center_bank(encoder: Encoder, ds: TimeSeriesDataset, num_classes: int) -> CenterBank:
    """Class means of eval-mode source features; classes without samples start at the origin."""
    if ds.labels is None:
        raise DatasetFormatError("center bank initialisation needs labeled data")
    feats = extract_features(encoder, ds.samples)
    centers = np.zeros((num_classes, feats.shape[1]), dtype=np.float32)
    for c in range(num_classes):
        members = feats[ds.labels == c]
        if len(members):
            centers[c] = members.mean(axis=0)
        else:
            log.warning("class %d has no source samples; its center starts at zero", c)
    return CenterBank(torch.from_numpy(centers))


def _finite(loss: torch.Tensor, what: str, mode: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite {what} in adv_loss_mode={mode} at adaptation epoch {epoch}")


def adapt(
    encoder_s: Encoder,
    encoder_t: Encoder,
    discriminator: Discriminator,
    src_train: TimeSeriesDataset,
    tgt_labeled: tuple[np.ndarray, np.ndarray],
    hp: TrainHyperparams,
    bank: CenterBank,
    seed: int = 0,
) -> tuple[Encoder, Encoder, Discriminator, CenterBank, list[AdvBatchLosses]]:
    """epochs_adapt epochs of paired-batch GFA (+ LCA unless disabled).

    Per batch pair: discriminator step on detached features, then one encoder step on both
    encoders with D frozen, then a center update over the concatenated batch. Encoders run in
    eval mode (running BN statistics, no dropout) so D trains on the features it is scored on.
    The center term is averaged over the paired batch to stay on the scale of the adversarial terms.
    """
    tgt_samples, tgt_labels = tgt_labeled
    tgt_labels = np.asarray(tgt_labels, dtype=np.int64)
    if len(tgt_samples) == 0:
        raise EmptyLabeledSetError("adaptation needs labeled or pseudo-labeled target samples")
    if not src_train.fully_labeled:
        raise DatasetFormatError("source training set must be fully labeled")
    mode = hp.adv_loss_mode
    opt_d = make_optim_state(discriminator, hp.lr_disc, betas=hp.betas, eps=hp.adam_eps)
    opt_enc = make_optim_state([(encoder_s, hp.lr_src_enc), (encoder_t, hp.lr_tgt_enc)], betas=hp.betas, eps=hp.adam_eps)
    bank = bank.copy()

    log.debug("adapt: encoder lrs %s, discriminator lr %s, betas %s", opt_enc.lr, opt_d.lr, opt_enc.betas)
    history: list[AdvBatchLosses] = []
    for epoch in range(hp.epochs_adapt):
        encoder_s.eval()
        encoder_t.eval()
        discriminator.train()
        sums = np.zeros(6)
        pairs = 0
        src_batches = batch_iter(src_train, hp.batch_size, seed, epoch)
        tgt_batches = batch_iter((tgt_samples, tgt_labels), hp.batch_size, seed + 1, epoch)
        for (xs, ys), (xt, yt) in zip(src_batches, tgt_batches):
            f_s = encoder_s(xs)
            f_t = encoder_t(xt)

            zero_grad(discriminator)
            d_src = torch.sigmoid(discriminator(f_s.detach()))
            d_tgt = torch.sigmoid(discriminator(f_t.detach()))
            loss_d = discriminator_loss(d_src, d_tgt, mode)
            _finite(loss_d, "discriminator loss", mode, epoch + 1)
            loss_d.backward()
            adam_step(discriminator, opt_d)

            zero_grad(encoder_s, encoder_t)
            discriminator.requires_grad_(False)
            try:
                loss_src = encoder_adv_loss(torch.sigmoid(discriminator(f_s)), mode)
                loss_tgt = encoder_adv_loss(torch.sigmoid(discriminator(f_t)), mode)
                total = loss_src + loss_tgt
                loss_ct = torch.zeros(())
                if hp.lca_enabled:
                    loss_ct = (center_loss(f_s, ys, bank) + center_loss(f_t, yt, bank)) / (len(ys) + len(yt))
                    total = total + hp.center_weight * loss_ct
                _finite(total, "encoder loss", mode, epoch + 1)
                total.backward()
            finally:
                discriminator.requires_grad_(True)
            adam_step([encoder_s, encoder_t], opt_enc)

            if hp.lca_enabled:
                bank = center_update(torch.cat([f_s.detach(), f_t.detach()]), torch.cat([ys, yt]), bank, hp.lr_center)

            sums += [loss_d.item(), loss_src.item(), loss_tgt.item(), float(loss_ct.item()),
                     d_src.mean().item(), d_tgt.mean().item()]
            pairs += 1
        row = AdvBatchLosses(epoch + 1, *(float(v) for v in sums / max(pairs, 1)))
        history.append(row)
        log.info("adapt epoch %d/%d L_D=%.4f L_src=%.4f L_tgt=%.4f L_ct=%.4f D(src)=%.3f D(tgt)=%.3f",
                 row.epoch, hp.epochs_adapt, row.loss_disc, row.loss_enc_src, row.loss_enc_tgt,
                 row.loss_center, row.mean_d_src, row.mean_d_tgt)
    return encoder_s, encoder_t, discriminator, bank, history


def train_shared_classifier(
    encoder_s: Encoder,
    encoder_t: Encoder,
    src_train: TimeSeriesDataset,
    tgt_labeled: tuple[np.ndarray, np.ndarray],
    hp: TrainHyperparams,
    seed: int = 0,
) -> tuple[Classifier, list[dict]]:
    """Fresh classifier on frozen eval-mode features: CE(source, true labels) + CE(target, pseudo labels)."""
    tgt_samples, tgt_labels = tgt_labeled
    tgt_labels = np.asarray(tgt_labels, dtype=np.int64)
    if len(tgt_samples) == 0:
        raise EmptyLabeledSetError("shared classifier needs labeled target samples")
    if src_train.p == 0 or not src_train.fully_labeled:
        raise DatasetFormatError("shared classifier needs a non-empty, fully labeled source set")

    feats_s = extract_features(encoder_s, src_train.samples)
    feats_t = extract_features(encoder_t, tgt_samples)
    torch.manual_seed(seed)
    classifier = build_classifier(src_train.num_classes)
    optim = make_optim_state(classifier, hp.lr_clf, betas=hp.betas, eps=hp.adam_eps)

    history: list[dict] = []
    for epoch in range(hp.shared_epochs):
        classifier.train()
        total, pairs = 0.0, 0
        src_batches = batch_iter((feats_s, src_train.labels), hp.batch_size, seed, epoch)
        tgt_batches = batch_iter((feats_t, tgt_labels), hp.batch_size, seed + 1, epoch)
        for (fs, ys), (ft, yt) in zip(src_batches, tgt_batches):
            zero_grad(classifier)
            loss = classification_loss(classifier(fs), ys) + classification_loss(classifier(ft), yt)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite shared-classifier loss at epoch {epoch + 1}")
            loss.backward()
            adam_step(classifier, optim)
            total += loss.item()
            pairs += 1
        history.append({"epoch": epoch + 1, "loss": total / max(pairs, 1)})
        log.debug("shared classifier epoch %d/%d loss=%.4f", epoch + 1, hp.shared_epochs, history[-1]["loss"])
    return classifier, history


def mean_discriminator_output(encoder: Encoder, discriminator: Discriminator, samples: np.ndarray) -> float:
    """Mean D(M(x)) over samples, eval mode."""
    feats = torch.from_numpy(extract_features(encoder, samples))
    discriminator.eval()
    with torch.no_grad():
        return float(torch.sigmoid(discriminator(feats)).mean().item())


def class_spread(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean distance of each feature to its class mean."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise ShapeError("class_spread needs at least one sample")
    dists = np.empty(len(features))
    for c in np.unique(labels):
        members = labels == c
        dists[members] = np.linalg.norm(features[members] - features[members].mean(axis=0), axis=1)
    return float(dists.mean())


def fit_domain_critic(
    encoder_s: Encoder,
    encoder_t: Encoder,
    src_samples: np.ndarray,
    tgt_samples: np.ndarray,
    hp: TrainHyperparams,
    epochs: int = 30,
    seed: int = 0,
) -> Discriminator:
    """Fresh discriminator fit (shared-half targets) on frozen eval-mode features of both domains.

    Gives the pre-adaptation domain separability; the adaptation discriminator is untrained then.
    """
    feats_s = extract_features(encoder_s, src_samples)
    feats_t = extract_features(encoder_t, tgt_samples)
    torch.manual_seed(seed)
    critic = build_discriminator()
    optim = make_optim_state(critic, hp.lr_disc, betas=hp.betas, eps=hp.adam_eps)
    zeros_s = np.zeros(len(feats_s), dtype=np.int64)
    zeros_t = np.zeros(len(feats_t), dtype=np.int64)
    for epoch in range(epochs):
        src_batches = batch_iter((feats_s, zeros_s), hp.batch_size, seed, epoch)
        tgt_batches = batch_iter((feats_t, zeros_t), hp.batch_size, seed + 1, epoch)
        for (fs, _), (ft, _) in zip(src_batches, tgt_batches):
            zero_grad(critic)
            loss = discriminator_loss(torch.sigmoid(critic(fs)), torch.sigmoid(critic(ft)), "shared-half")
            loss.backward()
            adam_step(critic, optim)
    return critic

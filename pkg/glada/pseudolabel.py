"""Target pseudo-labels: threshold initialisation, label spreading (SBC), DNN prediction, Agree Mechanism."""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.extmath import safe_sparse_dot

from .config import SbcConfig, TrainHyperparams
from .errors import EmptyLabeledSetError, ShapeError
from .metrics import macro_f1
from .nets import Classifier, Encoder, extract_features
from .pretrain import finetune_target, predict_proba

if TYPE_CHECKING:
    from .dataio import TimeSeriesDataset

log = logging.getLogger(__name__)


class Provenance(str, Enum):
    GIVEN = "given"
    INIT_THRESHOLD = "init-threshold"
    AGREED = "agreed"
    ABANDONED = "abandoned"
    UNLABELED = "unlabeled"


LABELED_PROVENANCE = (Provenance.GIVEN.value, Provenance.INIT_THRESHOLD.value, Provenance.AGREED.value)


@dataclass
class PseudoLabelState:
    """Per-sample label, provenance and injection bookkeeping for the target training set."""
    labels: np.ndarray
    provenance: np.ndarray  # object array of Provenance values
    iteration: np.ndarray  # AM iteration that labeled the sample; 0 before AM, -1 never
    y_sbc: np.ndarray  # predictions at injection time, -1 unless agreed
    y_dnn: np.ndarray
    history: list[dict] = field(default_factory=list)

    @classmethod
    def unlabeled(cls, p: int) -> "PseudoLabelState":
        return cls(
            labels=np.full(p, -1, dtype=np.int64),
            provenance=np.array([Provenance.UNLABELED.value] * p, dtype=object),
            iteration=np.full(p, -1, dtype=np.int64),
            y_sbc=np.full(p, -1, dtype=np.int64),
            y_dnn=np.full(p, -1, dtype=np.int64),
        )

    @classmethod
    def from_given(cls, p: int, indices: np.ndarray, labels: np.ndarray) -> "PseudoLabelState":
        state = cls.unlabeled(p)
        idx = np.asarray(indices, dtype=np.int64)
        state.labels[idx] = np.asarray(labels, dtype=np.int64)
        state.provenance[idx] = Provenance.GIVEN.value
        state.iteration[idx] = 0
        return state

    @property
    def size(self) -> int:
        return len(self.labels)

    def labeled_mask(self) -> np.ndarray:
        return self.labels >= 0

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.provenance == Provenance.UNLABELED.value)

    @property
    def n_labeled(self) -> int:
        return int((self.labels >= 0).sum())

    @property
    def n_unlabeled(self) -> int:
        return int((self.provenance == Provenance.UNLABELED.value).sum())

    @property
    def n_abandoned(self) -> int:
        return int((self.provenance == Provenance.ABANDONED.value).sum())

    def counts(self) -> dict[str, int]:
        return {p.value: int((self.provenance == p.value).sum()) for p in Provenance}

    def copy(self) -> "PseudoLabelState":
        return PseudoLabelState(
            labels=self.labels.copy(),
            provenance=self.provenance.copy(),
            iteration=self.iteration.copy(),
            y_sbc=self.y_sbc.copy(),
            y_dnn=self.y_dnn.copy(),
            history=[dict(h) for h in self.history],
        )

    def validate(self) -> None:
        has_label = self.labels >= 0
        labeled_prov = np.isin(self.provenance, LABELED_PROVENANCE)
        if not np.array_equal(has_label, labeled_prov):
            raise ShapeError("label >= 0 must coincide with given/init-threshold/agreed provenance")
        if self.n_labeled + self.n_unlabeled + self.n_abandoned != self.size:
            raise ShapeError("labeled + unlabeled + abandoned must equal the sample count")


# ---- threshold initialisation ----

def threshold_state(probs: np.ndarray, tau: float) -> PseudoLabelState:
    """Label sample i with argmax p_i iff max p_i > tau (provenance init-threshold)."""
    probs = np.asarray(probs)
    state = PseudoLabelState.unlabeled(len(probs))
    if len(probs) == 0:
        return state
    confident = probs.max(axis=1) > tau
    idx = np.flatnonzero(confident)
    state.labels[idx] = probs[idx].argmax(axis=1)
    state.provenance[idx] = Provenance.INIT_THRESHOLD.value
    state.iteration[idx] = 0
    return state


def initial_threshold_labels(encoder_s: Encoder, classifier_s: Classifier, target_train: "TimeSeriesDataset",
                             tau: float) -> PseudoLabelState:
    """UDA start: confident source-model predictions on the target training set."""
    return threshold_state(predict_proba(encoder_s, classifier_s, target_train.samples), tau)


def initial_labels_with_retry(encoder_s: Encoder, classifier_s: Classifier, target_train: "TimeSeriesDataset",
                              hp: TrainHyperparams) -> tuple[PseudoLabelState, float]:
    """Try the configured tau, then lower it by threshold_step down to 1/K + threshold_margin.

    The configured tau is always tried even when it already sits below the floor.
    """
    probs = predict_proba(encoder_s, classifier_s, target_train.samples)
    floor = 1.0 / target_train.num_classes + hp.threshold_margin
    tau = hp.threshold
    attempt = 0
    while True:
        state = threshold_state(probs, tau)
        if state.n_labeled > 0:
            if attempt:
                log.warning("threshold lowered to %.2f after %d empty attempts", tau, attempt)
            return state, tau
        attempt += 1
        tau = round(hp.threshold - attempt * hp.threshold_step, 10)
        if tau < floor - 1e-12:
            break
    raise EmptyLabeledSetError(
        f"no target prediction exceeds any threshold down to {floor:.3f}; max confidence {probs.max():.3f}"
    )


# ---- similarity-based classifier ----

class LabelSpreader(BaseEstimator):
    """Label spreading over a symmetric kNN graph with RBF weights (bandwidth = median kNN distance).

    F <- alpha * S F + (1 - alpha) * Y0 with S = D^-1/2 W D^-1/2, iterated until the largest
    entry change drops below tol or max_iter is reached. Unlabeled entries in y are -1;
    rows the spreading never reaches keep -1 in transduction_. Transductive only: predict
    answers for the fitted samples and nothing else.
    """

    def __init__(self, n_neighbors: int = 7, alpha: float = 0.2, max_iter: int = 30, tol: float = 1e-3,
                 num_classes: Optional[int] = None):
        self.n_neighbors = n_neighbors
        self.alpha = alpha
        self.max_iter = max_iter
        self.tol = tol
        self.num_classes = num_classes

    def _affinity(self, X: np.ndarray) -> sparse.csr_matrix:
        p = X.shape[0]
        k = min(self.n_neighbors, p - 1)
        if k < 1:
            return sparse.csr_matrix((p, p))
        dist, ind = NearestNeighbors(n_neighbors=k).fit(X).kneighbors()
        self.sigma_ = float(np.median(dist))
        if self.sigma_ > 0 and np.isfinite(self.sigma_):
            weights = np.exp(-(dist ** 2) / (2.0 * self.sigma_ ** 2))
        else:
            weights = np.ones_like(dist)  # all-identical features
        rows = np.repeat(np.arange(p), k)
        W = sparse.csr_matrix((weights.ravel(), (rows, ind.ravel())), shape=(p, p))
        return W.maximum(W.T).tocsr()

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LabelSpreader":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or len(X) != len(y):
            raise ShapeError(f"features {X.shape} do not match labels {y.shape}")
        labeled = y >= 0
        if not labeled.any():
            raise EmptyLabeledSetError("label spreading needs at least one labeled sample")
        n_classes = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        self.classes_ = np.arange(n_classes)
        self.sigma_ = 0.0

        W = self._affinity(X)
        degree = np.asarray(W.sum(axis=1)).ravel()
        inv_sqrt = np.zeros_like(degree)
        inv_sqrt[degree > 0] = 1.0 / np.sqrt(degree[degree > 0])
        D = sparse.diags(inv_sqrt)
        S = (D @ W @ D).tocsr()

        Y0 = np.zeros((len(y), n_classes))
        Y0[np.flatnonzero(labeled), y[labeled]] = 1.0
        F = Y0.copy()
        self.deltas_: list[float] = []
        self.n_iter_ = 0
        for it in range(1, self.max_iter + 1):
            F_next = self.alpha * safe_sparse_dot(S, F) + (1.0 - self.alpha) * Y0
            delta = float(np.abs(F_next - F).max())
            F = F_next
            self.n_iter_ = it
            self.deltas_.append(delta)
            if delta < self.tol:
                break
        self.label_distributions_ = F
        transduction = F.argmax(axis=1)  # ties -> smallest class index
        transduction[F.sum(axis=1) <= 0] = -1  # no path to any labeled sample
        transduction[labeled] = y[labeled]
        self.transduction_ = transduction
        self.X_fit_ = X
        return self

    def predict(self, X: Optional[np.ndarray] = None) -> np.ndarray:
        if X is not None:
            X = np.asarray(X, dtype=np.float64)
            if X.shape != self.X_fit_.shape or not np.array_equal(X, self.X_fit_):
                raise ShapeError("label spreading is transductive; predict only covers the fitted samples")
        return self.transduction_


def sbc_fit_predict(features: np.ndarray, state: PseudoLabelState, cfg: SbcConfig,
                    num_classes: Optional[int] = None) -> np.ndarray:
    """Spread the current labels over the feature graph; known labels are returned unchanged."""
    if state.n_labeled == 0:
        raise EmptyLabeledSetError("similarity-based classifier needs at least one labeled sample")
    spreader = LabelSpreader(cfg.n_neighbors, cfg.alpha, cfg.max_iter, cfg.tol, num_classes=num_classes)
    spreader.fit(features, state.labels)
    log.debug("label spreading: %d iterations, last change %.2e, sigma=%.4f",
              spreader.n_iter_, spreader.deltas_[-1], spreader.sigma_)
    return spreader.transduction_


def dnn_predict(encoder_t: Encoder, classifier: Classifier, samples: np.ndarray) -> np.ndarray:
    """Eval-mode argmax of the fine-tuned target model."""
    if len(samples) == 0:
        return np.zeros(0, dtype=np.int64)
    return predict_proba(encoder_t, classifier, samples).argmax(axis=1).astype(np.int64)


def agree_inject(state: PseudoLabelState, y_sbc: np.ndarray, y_dnn: np.ndarray, iteration: int = 0) -> PseudoLabelState:
    """Move currently unlabeled samples whose two predictions agree into T_L (provenance agreed).

    y_sbc and y_dnn are aligned with state.unlabeled_indices().
    """
    unlabeled = state.unlabeled_indices()
    y_sbc = np.asarray(y_sbc, dtype=np.int64)
    y_dnn = np.asarray(y_dnn, dtype=np.int64)
    if len(y_sbc) != len(unlabeled) or len(y_dnn) != len(unlabeled):
        raise ShapeError(
            f"predictions cover {len(y_sbc)}/{len(y_dnn)} samples; {len(unlabeled)} are unlabeled"
        )
    new = state.copy()
    agree = y_sbc == y_dnn
    idx = unlabeled[agree]
    new.labels[idx] = y_sbc[agree]
    new.provenance[idx] = Provenance.AGREED.value
    new.iteration[idx] = iteration
    new.y_sbc[idx] = y_sbc[agree]
    new.y_dnn[idx] = y_dnn[agree]
    return new


def _check_agreement(state: PseudoLabelState, iteration: int) -> None:
    idx = np.flatnonzero((state.provenance == Provenance.AGREED.value) & (state.iteration == iteration))
    if not (np.array_equal(state.labels[idx], state.y_sbc[idx]) and np.array_equal(state.labels[idx], state.y_dnn[idx])):
        raise ShapeError(f"agreed labels of iteration {iteration} disagree with their predictors")


def run_agree_mechanism(
    encoder_t: Encoder,
    classifier: Classifier,
    target_train: "TimeSeriesDataset",
    state0: PseudoLabelState,
    hp: TrainHyperparams,
    cfg: SbcConfig,
    seed: int = 0,
) -> tuple[PseudoLabelState, Encoder, Classifier]:
    """epochs_am rounds of fine-tune -> label spreading -> DNN predict -> agree/inject; leftovers abandoned."""
    if state0.n_labeled == 0:
        raise EmptyLabeledSetError("Agree Mechanism needs at least one labeled target sample")
    if state0.size != target_train.p:
        raise ShapeError(f"state covers {state0.size} samples, target set has {target_train.p}")
    samples = target_train.samples
    state = state0.copy()
    for it in range(1, hp.epochs_am + 1):
        lab = state.labeled_indices()
        steps = math.ceil(len(lab) / hp.batch_size)
        finetune_target(encoder_t, classifier, samples[lab], state.labels[lab], hp, steps, seed=seed + it)
        unl = state.unlabeled_indices()
        injected = 0
        if len(unl):
            y_sbc = sbc_fit_predict(extract_features(encoder_t, samples), state, cfg, target_train.num_classes)
            y_dnn = dnn_predict(encoder_t, classifier, samples[unl])
            before = state.n_labeled
            state = agree_inject(state, y_sbc[unl], y_dnn, iteration=it)
            injected = state.n_labeled - before
            _check_agreement(state, it)
        state.history.append({"iteration": it, "labeled": state.n_labeled, "unlabeled": state.n_unlabeled,
                              "injected": injected})
        log.info("AM iteration %d/%d: injected=%d |T_L|=%d |T_U|=%d",
                 it, hp.epochs_am, injected, state.n_labeled, state.n_unlabeled)
    leftover = state.unlabeled_indices()
    state.provenance[leftover] = Provenance.ABANDONED.value
    if len(leftover):
        log.info("abandoned %d target samples still unlabeled after %d iterations", len(leftover), hp.epochs_am)
    state.validate()
    return state, encoder_t, classifier


# ---- audit / quality ----

def write_audit(state: PseudoLabelState, path: Path) -> None:
    """One JSON line per target sample: index, label, provenance, iteration, y_sbc, y_dnn."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for i in range(state.size):
            agreed = state.provenance[i] == Provenance.AGREED.value
            f.write(json.dumps({
                "index": i,
                "label": int(state.labels[i]),
                "provenance": str(state.provenance[i]),
                "iteration": int(state.iteration[i]),
                "y_sbc": int(state.y_sbc[i]) if agreed else None,
                "y_dnn": int(state.y_dnn[i]) if agreed else None,
            }) + "\n")


def pseudo_label_quality(state: PseudoLabelState, y_true: np.ndarray, num_classes: int) -> dict:
    """Pseudo-label MF1/accuracy against withheld ground truth (all labeled, and non-given only)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    out: dict = {"counts": state.counts()}
    for key, mask in (
        ("all", state.labeled_mask()),
        ("pseudo_only", np.isin(state.provenance, (Provenance.INIT_THRESHOLD.value, Provenance.AGREED.value))),
    ):
        if mask.any():
            out[key] = {
                "n": int(mask.sum()),
                "macro_f1": macro_f1(y_true[mask], state.labels[mask], num_classes),
                "accuracy": float((y_true[mask] == state.labels[mask]).mean()),
            }
        else:
            out[key] = {"n": 0, "macro_f1": None, "accuracy": None}
    return out

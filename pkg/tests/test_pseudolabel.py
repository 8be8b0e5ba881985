import json

import numpy as np
import pytest

from glada.config import SbcConfig, TrainHyperparams
from glada.dataio import SynthSpec, make_synthetic_pair, split_train_test, stratified_label_mask
from glada.errors import EmptyLabeledSetError, ShapeError
from glada.nets import init_target_from_source
from glada.pretrain import finetune_target, pretrain_source
from glada.pseudolabel import (
    LabelSpreader,
    Provenance,
    PseudoLabelState,
    agree_inject,
    dnn_predict,
    initial_labels_with_retry,
    initial_threshold_labels,
    pseudo_label_quality,
    run_agree_mechanism,
    sbc_fit_predict,
    threshold_state,
    write_audit,
)


def _blobs(rng, centers, per=20, scale=0.1):
    feats = np.concatenate([c + scale * rng.normal(size=(per, len(c))) for c in centers])
    truth = np.repeat(np.arange(len(centers)), per)
    return feats, truth


class TestState:
    def test_from_given(self):
        state = PseudoLabelState.from_given(5, np.array([1, 3]), np.array([2, 0]))
        assert state.labels.tolist() == [-1, 2, -1, 0, -1]
        assert state.counts()[Provenance.GIVEN.value] == 2
        assert state.unlabeled_indices().tolist() == [0, 2, 4]
        state.validate()

    def test_validate_catches_inconsistency(self):
        state = PseudoLabelState.unlabeled(3)
        state.labels[0] = 1
        with pytest.raises(ShapeError):
            state.validate()


class TestThreshold:
    def test_hand_example(self):
        state = threshold_state(np.array([[0.9, 0.1], [0.55, 0.45]]), 0.7)
        assert state.labels.tolist() == [0, -1]
        assert state.provenance.tolist() == [Provenance.INIT_THRESHOLD.value, Provenance.UNLABELED.value]

    def test_strict_comparison(self):
        assert threshold_state(np.array([[0.7, 0.3]]), 0.7).n_labeled == 0

    def test_labeled_fraction_non_increasing_in_tau(self, rng):
        probs = rng.dirichlet(np.ones(4), size=200)
        counts = [threshold_state(probs, tau).n_labeled for tau in np.linspace(0.25, 0.99, 30)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_source_model_thresholding(self, tiny_pair, fast_hp):
        source, target = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        state = initial_threshold_labels(encoder, classifier, target.with_labels(None), 0.999999)
        assert state.size == target.p
        state.validate()

    def test_retry_ladder_lowers_tau(self, tiny_pair, fast_hp, monkeypatch):
        source, target = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        probs = np.tile([0.5, 0.3, 0.2], (target.p, 1))
        monkeypatch.setattr("glada.pseudolabel.predict_proba", lambda *a, **k: probs)
        state, tau = initial_labels_with_retry(encoder, classifier, target, TrainHyperparams(threshold=0.7))
        assert tau == pytest.approx(0.4)
        assert state.n_labeled == target.p

    def test_retry_ladder_gives_up_at_floor(self, tiny_pair, fast_hp, monkeypatch):
        source, target = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        probs = np.full((target.p, 3), 1 / 3)
        monkeypatch.setattr("glada.pseudolabel.predict_proba", lambda *a, **k: probs)
        with pytest.raises(EmptyLabeledSetError):
            initial_labels_with_retry(encoder, classifier, target, TrainHyperparams(threshold=0.7))

    def test_configured_tau_below_floor_is_still_tried(self, tiny_pair, fast_hp, monkeypatch):
        source, target = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        probs = np.tile([0.9, 0.05, 0.05], (target.p, 1))
        monkeypatch.setattr("glada.pseudolabel.predict_proba", lambda *a, **k: probs)
        # 1/3 < 0.35 < 1/3 + margin
        state, tau = initial_labels_with_retry(encoder, classifier, target, TrainHyperparams(threshold=0.35))
        assert tau == pytest.approx(0.35)
        assert state.n_labeled == target.p


class TestLabelSpreading:
    def test_two_clusters_one_seed_each(self, rng):
        feats, truth = _blobs(rng, [np.zeros(8), np.full(8, 5.0)])
        state = PseudoLabelState.from_given(len(feats), np.array([0, 20]), np.array([0, 1]))
        np.testing.assert_array_equal(sbc_fit_predict(feats, state, SbcConfig(), 2), truth)

    def test_all_labeled_returns_given(self, rng):
        feats, truth = _blobs(rng, [np.zeros(4), np.ones(4)], per=6)
        flipped = 1 - truth
        state = PseudoLabelState.from_given(len(feats), np.arange(len(feats)), flipped)
        np.testing.assert_array_equal(sbc_fit_predict(feats, state, SbcConfig(), 2), flipped)

    def test_duplicated_points_share_labels(self, rng):
        feats, truth = _blobs(rng, [np.zeros(6), np.full(6, 4.0), np.full(6, -4.0)], per=10)
        seeds = np.array([0, 10, 20])
        single = sbc_fit_predict(feats, PseudoLabelState.from_given(30, seeds, truth[seeds]), SbcConfig(), 3)
        doubled = np.concatenate([feats, feats])
        both = sbc_fit_predict(doubled, PseudoLabelState.from_given(60, seeds, truth[seeds]), SbcConfig(), 3)
        np.testing.assert_array_equal(both[:30], both[30:])
        np.testing.assert_array_equal(both[:30], single)

    def test_identical_features_fall_back_to_uniform(self):
        feats = np.ones((10, 3))
        spreader = LabelSpreader(n_neighbors=9, num_classes=2).fit(feats, np.array([1] + [-1] * 9))
        assert spreader.sigma_ == 0.0
        assert (spreader.transduction_ == 1).all()

    def test_change_sequence_and_termination(self, rng):
        feats, _ = _blobs(rng, [np.zeros(5), np.full(5, 3.0)])
        y = np.full(len(feats), -1)
        y[[0, 20]] = [0, 1]
        spreader = LabelSpreader(tol=1e-3, max_iter=30, num_classes=2).fit(feats, y)
        assert spreader.n_iter_ == len(spreader.deltas_)
        assert spreader.deltas_[-1] < 1e-3 or spreader.n_iter_ == 30

    def test_all_unlabeled_rejected(self, rng):
        with pytest.raises(EmptyLabeledSetError):
            sbc_fit_predict(rng.normal(size=(5, 3)), PseudoLabelState.unlabeled(5), SbcConfig(), 2)

    def test_predict_only_covers_fitted_samples(self, rng):
        feats, truth = _blobs(rng, [np.zeros(4), np.full(4, 5.0)], per=8)
        y = np.full(len(feats), -1)
        y[[0, 8]] = [0, 1]
        spreader = LabelSpreader(num_classes=2).fit(feats, y)
        np.testing.assert_array_equal(spreader.predict(), truth)
        np.testing.assert_array_equal(spreader.predict(feats.copy()), truth)
        with pytest.raises(ShapeError):
            spreader.predict(feats[:4])
        with pytest.raises(ShapeError):
            spreader.predict(feats + 1.0)
        assert not hasattr(spreader, "score")


class TestAgreeInject:
    def test_hand_example(self):
        state = PseudoLabelState.unlabeled(3)
        new = agree_inject(state, np.array([1, 2, 0]), np.array([1, 0, 0]), iteration=1)
        assert new.labels.tolist() == [1, -1, 0]
        assert new.provenance.tolist() == ["agreed", "unlabeled", "agreed"]
        assert state.n_labeled == 0  # input untouched

    def test_labeled_entries_untouched(self):
        state = PseudoLabelState.from_given(4, np.array([1]), np.array([2]))
        new = agree_inject(state, np.array([0, 0, 0]), np.array([0, 0, 0]))
        assert new.labels.tolist() == [0, 2, 0, 0]
        assert new.provenance[1] == Provenance.GIVEN.value
        assert new.n_unlabeled == 0

    def test_zero_agreement(self):
        state = PseudoLabelState.unlabeled(2)
        new = agree_inject(state, np.array([0, 1]), np.array([1, 0]))
        np.testing.assert_array_equal(new.labels, state.labels)

    def test_coverage_mismatch(self):
        with pytest.raises(ShapeError):
            agree_inject(PseudoLabelState.unlabeled(3), np.array([0, 1]), np.array([0, 1]))


class TestAgreeMechanism:
    def _setup(self, tiny_pair, fast_hp, fraction=0.1):
        source, target = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        state0 = stratified_label_mask(target, fraction, seed=0)
        return encoder, classifier, target, state0

    def test_invariants(self, tiny_pair, fast_hp):
        encoder, classifier, target, state0 = self._setup(tiny_pair, fast_hp)
        encoder_t = init_target_from_source(encoder)
        state, _, _ = run_agree_mechanism(encoder_t, classifier, target.with_labels(None), state0,
                                          fast_hp, SbcConfig(), seed=0)
        assert [h["iteration"] for h in state.history] == [1, 2]
        sizes = [state0.n_labeled] + [h["labeled"] for h in state.history]
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))
        given = state0.labeled_indices()
        np.testing.assert_array_equal(state.labels[given], state0.labels[given])
        assert (state.provenance[given] == Provenance.GIVEN.value).all()
        agreed = state.provenance == Provenance.AGREED.value
        np.testing.assert_array_equal(state.labels[agreed], state.y_sbc[agreed])
        np.testing.assert_array_equal(state.labels[agreed], state.y_dnn[agreed])
        assert state.n_unlabeled == 0
        assert state.n_labeled + state.n_abandoned == target.p

    def test_dnn_predict_deterministic(self, tiny_pair, fast_hp):
        encoder, classifier, target, _ = self._setup(tiny_pair, fast_hp)
        a = dnn_predict(encoder, classifier, target.samples)
        assert len(a) == target.p
        np.testing.assert_array_equal(a, dnn_predict(encoder, classifier, target.samples))

    def test_finetune_sees_only_labeled_samples(self, tiny_pair, fast_hp, monkeypatch):
        import glada.pretrain

        encoder, classifier, target, state0 = self._setup(tiny_pair, fast_hp)
        seen = []
        real_batch_iter = glada.pretrain.batch_iter

        def recording_batch_iter(data, *args, **kwargs):
            seen.append((np.array(data[0]), np.array(data[1])))
            return real_batch_iter(data, *args, **kwargs)

        monkeypatch.setattr("glada.pretrain.batch_iter", recording_batch_iter)
        state, _, _ = run_agree_mechanism(init_target_from_source(encoder), classifier,
                                          target.with_labels(None), state0, fast_hp, SbcConfig(), seed=0)
        assert seen
        labeled_rows = {target.samples[i].tobytes(): state.labels[i] for i in state.labeled_indices()}
        first_samples, first_labels = seen[0]
        np.testing.assert_array_equal(first_samples, target.samples[state0.labeled_indices()])
        np.testing.assert_array_equal(first_labels, state0.labels[state0.labeled_indices()])
        for samples, labels in seen:
            assert (labels >= 0).all()
            for row, label in zip(samples, labels):
                assert labeled_rows[row.tobytes()] == label

    def test_dnn_predict_fits_labeled_set_after_finetune(self, tiny_pair, fast_hp):
        encoder, classifier, target, _ = self._setup(tiny_pair, fast_hp)
        lab = stratified_label_mask(target, 0.2, seed=0).labeled_indices()
        hp = TrainHyperparams(batch_size=16, lr_tgt_enc=1e-3)
        encoder_t = init_target_from_source(encoder)
        finetune_target(encoder_t, classifier, target.samples[lab], target.labels[lab], hp, steps=200, seed=0)
        predicted = dnn_predict(encoder_t, classifier, target.samples[lab])
        assert (predicted == target.labels[lab]).mean() >= 0.95

    def test_empty_start_rejected(self, tiny_pair, fast_hp):
        encoder, classifier, target, _ = self._setup(tiny_pair, fast_hp)
        with pytest.raises(EmptyLabeledSetError):
            run_agree_mechanism(encoder, classifier, target, PseudoLabelState.unlabeled(target.p),
                                fast_hp, SbcConfig())

    @pytest.mark.slow
    def test_zero_noise_target_mostly_labeled_and_accurate(self):
        source, target = make_synthetic_pair(SynthSpec(seed=0))
        hp = TrainHyperparams()
        tgt_train = split_train_test(target, 0.7, seed=1).train
        encoder, classifier, _ = pretrain_source(split_train_test(source, 0.7, seed=0).train, hp, seed=0)
        state0 = stratified_label_mask(tgt_train, 0.01, seed=0)
        state, _, _ = run_agree_mechanism(init_target_from_source(encoder), classifier,
                                          tgt_train.with_labels(None), state0, hp, SbcConfig(), seed=0)
        assert state.n_labeled >= 0.95 * tgt_train.p
        quality = pseudo_label_quality(state, tgt_train.labels, 6)
        assert quality["all"]["accuracy"] >= 0.95


def test_audit_file(tmp_path):
    state = agree_inject(PseudoLabelState.from_given(3, np.array([0]), np.array([1])),
                         np.array([0, 1]), np.array([0, 0]), iteration=1)
    write_audit(state, tmp_path / "audit.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert [r["provenance"] for r in rows] == ["given", "agreed", "unlabeled"]
    assert rows[1] == {"index": 1, "label": 0, "provenance": "agreed", "iteration": 1, "y_sbc": 0, "y_dnn": 0}
    assert rows[0]["y_sbc"] is None


def test_quality_counts_sum_to_size():
    state = PseudoLabelState.from_given(4, np.array([0, 1]), np.array([0, 1]))
    quality = pseudo_label_quality(state, np.array([0, 1, 1, 0]), 2)
    assert sum(quality["counts"].values()) == 4
    assert quality["all"]["accuracy"] == 1.0
    assert quality["pseudo_only"]["n"] == 0

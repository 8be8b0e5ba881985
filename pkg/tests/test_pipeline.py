import json

import numpy as np
import pandas as pd
import pytest

from glada.config import ScenarioConfig, TrainHyperparams
from glada.dataio import SynthSpec, TimeSeriesDataset, make_synthetic_pair, save_dataset, split_train_test
from glada.errors import StageError
from glada.nets import load_net
from glada.pipeline import (
    AUDIT_FILENAME,
    CHECKPOINT_DIR,
    EMBEDDINGS_FILENAME,
    RUN_LOG_FILENAME,
    evaluate,
    export_embeddings,
    run_scenario,
    summarize_reports,
)
from glada.pretrain import pretrain_source


@pytest.fixture
def pipeline_hp() -> TrainHyperparams:
    # enough pretraining that the source model is confident on the tiny pair
    return TrainHyperparams(epochs_pretrain=8, epochs_am=2, epochs_adapt=2, batch_size=16, threshold=0.5)


@pytest.fixture
def data_dirs(tmp_path, tiny_pair):
    source, target = tiny_pair
    save_dataset(source, tmp_path / "source")
    save_dataset(target, tmp_path / "target")
    return tmp_path / "source", tmp_path / "target"


def _scenario(data_dirs, out, hp, **kwargs) -> ScenarioConfig:
    src, tgt = data_dirs
    return ScenarioConfig(source_path=src, target_path=tgt, output_dir=out, hyperparams=hp, **kwargs)


def _strip_volatile(report: dict) -> dict:
    report = dict(report)
    for key in ("timings", "environment", "config"):
        report.pop(key)
    return report


class TestRunScenario:
    def test_ssda_report_and_artifacts(self, tmp_path, data_dirs, pipeline_hp, tiny_pair):
        out = tmp_path / "run"
        report = run_scenario(_scenario(data_dirs, out, pipeline_hp, mode="ssda", labeled_fraction=0.1,
                                        export_embeddings=True))
        assert 0.0 <= report.target_test_macro_f1 <= 1.0
        assert len(report.target_test_f1_per_class) == 3
        assert report.threshold_used is None
        assert set(report.discriminator_means) == {"before", "after"}
        assert [h["iteration"] for h in report.am_history] == [1, 2]

        target_train_p = split_train_test(tiny_pair[1], 0.7, 1).train.p
        assert sum(report.pseudo_labels["counts"].values()) == target_train_p
        for stage in ("load", "split", "pretrain", "pseudo_init", "agree", "adapt", "shared", "evaluate", "save"):
            assert stage in report.timings

        for name in ("report.json", RUN_LOG_FILENAME, AUDIT_FILENAME, EMBEDDINGS_FILENAME,
                     "pretrain_history.jsonl", "adapt_metrics.jsonl", "shared_history.jsonl"):
            assert (out / name).is_file(), name
        for name in ("source_encoder", "source_classifier", "target_encoder", "discriminator", "shared_classifier"):
            assert (out / CHECKPOINT_DIR / name / "net.json").is_file(), name
        audit = (out / AUDIT_FILENAME).read_text().splitlines()
        assert len(audit) == target_train_p
        assert len((out / "adapt_metrics.jsonl").read_text().splitlines()) == 2

    def test_uda_records_threshold(self, tmp_path, data_dirs, pipeline_hp):
        report = run_scenario(_scenario(data_dirs, tmp_path / "run", pipeline_hp, mode="uda"))
        assert report.threshold_used is not None
        assert report.threshold_used <= 0.5
        assert report.pseudo_labels["counts"].get("given", 0) == 0

    def test_same_seed_same_report(self, tmp_path, data_dirs, pipeline_hp):
        a = run_scenario(_scenario(data_dirs, tmp_path / "a", pipeline_hp, mode="ssda"))
        b = run_scenario(_scenario(data_dirs, tmp_path / "b", pipeline_hp, mode="ssda"))
        assert _strip_volatile(a.to_dict()) == _strip_volatile(b.to_dict())

    def test_ssda_skips_threshold_init(self, tmp_path, data_dirs, pipeline_hp, monkeypatch):
        def boom(*args, **kwargs):
            raise AssertionError("threshold initialisation must not run in ssda mode")

        monkeypatch.setattr("glada.pipeline.initial_labels_with_retry", boom)
        report = run_scenario(_scenario(data_dirs, tmp_path / "run", pipeline_hp, mode="ssda"))
        assert report.pseudo_labels["counts"]["given"] >= 3

    def test_source_only(self, tmp_path, data_dirs, pipeline_hp):
        out = tmp_path / "run"
        report = run_scenario(_scenario(data_dirs, out, pipeline_hp, source_only=True))
        assert report.source_only
        assert report.target_test_macro_f1 == report.source_only_target_macro_f1
        assert not (out / AUDIT_FILENAME).exists()
        assert (out / CHECKPOINT_DIR / "source_encoder" / "weights.bin").is_file()

    def test_no_lca_echoed(self, tmp_path, data_dirs, pipeline_hp):
        pipeline_hp.lca_enabled = False
        report = run_scenario(_scenario(data_dirs, tmp_path / "run", pipeline_hp, mode="ssda"))
        assert report.lca_enabled is False
        data = json.loads((tmp_path / "run" / "report.json").read_text())
        assert data["config"]["hyperparams"]["lca_enabled"] is False

    def test_class_count_mismatch_names_load_stage(self, tmp_path, tiny_pair, pipeline_hp):
        source, target = tiny_pair
        save_dataset(source, tmp_path / "source")
        save_dataset(TimeSeriesDataset(target.samples, target.labels, num_classes=4), tmp_path / "target")
        cfg = _scenario((tmp_path / "source", tmp_path / "target"), tmp_path / "run", pipeline_hp)
        with pytest.raises(StageError) as info:
            run_scenario(cfg)
        assert info.value.stage == "load"

    def test_uda_threshold_outside_range_rejected(self, tmp_path, data_dirs):
        hp = TrainHyperparams(threshold=0.3)
        with pytest.raises(StageError) as info:
            run_scenario(_scenario(data_dirs, tmp_path / "run", hp, mode="uda"))
        assert info.value.stage == "load"


def test_export_embeddings_layout(tmp_path, tiny_pair, fast_hp):
    source, target = tiny_pair
    encoder, _, _ = pretrain_source(source, fast_hp, seed=0)
    path = export_embeddings(encoder, encoder, source.subset(np.arange(5)), target.subset(np.arange(7)),
                             tmp_path / "emb.tsv")
    frame = pd.read_csv(path, sep="\t", header=None)
    assert frame.shape == (12, 130)
    assert frame[0].tolist() == ["src"] * 5 + ["tgt"] * 7
    assert frame[1].tolist() == source.labels[:5].tolist() + target.labels[:7].tolist()


class TestEvaluate:
    def test_checkpoint_round_trip(self, tmp_path, tiny_pair, fast_hp):
        from glada.nets import save_net

        source, _ = tiny_pair
        encoder, classifier, _ = pretrain_source(source, fast_hp, seed=0)
        save_net(encoder, tmp_path / "enc")
        save_net(classifier, tmp_path / "clf")
        before = evaluate(encoder, classifier, source)
        after = evaluate(load_net(tmp_path / "enc"), load_net(tmp_path / "clf"), source)
        assert before.macro_f1 == after.macro_f1
        np.testing.assert_array_equal(before.predictions, after.predictions)

    def test_frequency_shift_hurts_source_model(self):
        # drift of one cycle against a 1.5-cycle class spacing pushes most target samples to the next class
        spec = SynthSpec(num_classes=3, samples_per_class=40, channels=2, length=64,
                         frequency_shift=1.0, frequency_jitter=0.1, seed=0)
        source, target = make_synthetic_pair(spec)
        split = split_train_test(source, 0.7, seed=0)
        hp = TrainHyperparams(epochs_pretrain=30, batch_size=16)
        encoder, classifier, _ = pretrain_source(split.train, hp, seed=0)
        on_source = evaluate(encoder, classifier, split.test).macro_f1
        on_target = evaluate(encoder, classifier, target).macro_f1
        assert on_source > on_target

    @pytest.mark.slow
    def test_zero_noise_source_test_is_near_perfect(self):
        source, _ = make_synthetic_pair(SynthSpec(seed=0))
        split = split_train_test(source, 0.7, seed=0)
        encoder, classifier, _ = pretrain_source(split.train, TrainHyperparams(), seed=0)
        assert evaluate(encoder, classifier, split.test).macro_f1 >= 0.95


def test_summarize_reports(tmp_path, data_dirs, pipeline_hp):
    run_scenario(_scenario(data_dirs, tmp_path / "runs" / "a", pipeline_hp, source_only=True))
    run_scenario(_scenario(data_dirs, tmp_path / "runs" / "b", pipeline_hp, source_only=True, seed=1))
    rows = summarize_reports(tmp_path / "runs")
    assert [r["run"] for r in rows] == ["a", "b"]
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(r["source_only"] for r in rows)

"""
评估模块测试

测试重点：
- 指标手算示例与穷举对照
- 朴素基线（含分类任务的二值化历史）
- 方差分桶的秩与单调变换不变性
- 协议评估的确定性、区域重叠检查与报告输出
- 消融对比表

作者：ST-Instruct
版本：0.1.0
"""

import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st_instruct.config import RunConfig
from st_instruct.evaluation import (
    BUCKET_LABELS,
    MODEL_NAME,
    DatasetMetrics,
    MetricReport,
    ModelMetrics,
    baseline_prediction,
    comparison_table,
    copy_last,
    evaluate_protocol,
    historical_average,
    mae_rmse,
    protocol_scope,
    recall_macro_f1,
    run_ablation,
    save_report,
    variance_buckets,
)
from st_instruct.exceptions import ConfigurationException, ErrorCode, EvaluationException, RegionSplitException
from st_instruct.prompts import build_record
from st_instruct.st_data import DatasetSplit, RegionMeta, SpatioTemporalTensor, TimeMeta, WindowSample

from tests.conftest import make_model, tiny_config_dict

binary_pairs = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.integers(0, 1), min_size=n, max_size=n))
)


def _tensor(values):
    values = np.asarray(values, dtype=np.float32)
    regions, steps, features = values.shape
    return SpatioTemporalTensor(
        values=values,
        regions=[RegionMeta(region_id=r) for r in range(regions)],
        time=TimeMeta(start="2020-01-06T00:00:00Z", interval_minutes=60, steps=steps),
        feature_names=[f"f{i}" for i in range(features)],
        name="synthetic",
    )


def _alternating(regions=8, steps=10):
    """区域 r 在 0 与 r+1 之间交替，方差随 r 严格递增"""
    t = np.arange(steps) % 2
    return np.stack([(r + 1) * t for r in range(regions)])[:, :, None]


def _report(value, protocol="zero-shot", variant="FULL"):
    metrics = DatasetMetrics(dataset="taxi", task_kind="regression", feature_names=["inflow"],
                             models={MODEL_NAME: ModelMetrics(mae={"inflow": value}, rmse={"inflow": value + 1})})
    return MetricReport(protocol=protocol, variant=variant, seed=1, config_fingerprint="abc",
                        datasets={"taxi": metrics})


def _eval_config(**eval_block):
    return RunConfig.from_dict(tiny_config_dict(eval={"max_new_tokens": 6, **eval_block}))


class TestMetrics:
    def test_mae_rmse_example(self):
        mae, rmse = mae_rmse(np.array([0.0, 0.0]), np.array([3.0, 4.0]))
        assert mae == pytest.approx(3.5)
        assert rmse == pytest.approx(3.5355, abs=1e-4)

    def test_perfect_prediction(self):
        assert mae_rmse(np.arange(5), np.arange(5)) == (0.0, 0.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    @settings(max_examples=100)
    def test_rmse_at_least_mae(self, errors):
        mae, rmse = mae_rmse(np.zeros(len(errors)), np.array(errors))
        assert rmse >= mae >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationException):
            mae_rmse(np.zeros(3), np.zeros(4))
        with pytest.raises(EvaluationException):
            mae_rmse(np.zeros(0), np.zeros(0))

    def test_recall_f1_example(self):
        recall, f1 = recall_macro_f1(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0]))
        assert recall == pytest.approx(0.5)
        assert f1 == pytest.approx(0.7333, abs=1e-4)

    def test_no_positives(self):
        recall, _ = recall_macro_f1(np.zeros(4), np.zeros(4))
        assert recall == 0.0

    def test_non_binary_rejected(self):
        with pytest.raises(EvaluationException):
            recall_macro_f1(np.array([0, 2]), np.array([0, 1]))

    @given(binary_pairs)
    @settings(max_examples=1000)
    def test_matches_brute_force(self, pair):
        y, y_hat = pair

        def f1(positive):
            tp = sum(1 for a, b in zip(y, y_hat) if a == positive and b == positive)
            predicted = sum(1 for b in y_hat if b == positive)
            actual = sum(1 for a in y if a == positive)
            if tp == 0:
                return 0.0
            precision, recall = tp / predicted, tp / actual
            return 2 * precision * recall / (precision + recall)

        positives = sum(y)
        expected_recall = sum(1 for a, b in zip(y, y_hat) if a == b == 1) / positives if positives else 0.0
        recall, macro = recall_macro_f1(np.array(y), np.array(y_hat))
        assert recall == pytest.approx(expected_recall)
        assert macro == pytest.approx((f1(1) + f1(0)) / 2)


class TestBaselines:
    def test_historical_average_on_ramp(self):
        history = np.arange(12, dtype=np.float64)[:, None]
        target = np.arange(12, 24, dtype=np.float64)[:, None]
        mae, _ = mae_rmse(target, historical_average(history, 12))
        assert mae == pytest.approx(12.0)

    def test_copy_last(self):
        history = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(copy_last(history, 3), [[3.0, 4.0]] * 3)

    def test_classification_uses_binary_history(self):
        sample = WindowSample(history=np.array([[0.0], [5.0], [2.0], [0.0]]), target=np.zeros((2, 1)),
                              region_id=0, window_start_step=0)
        record = build_record(sample, None, TimeMeta(start="2020-01-06T00:00:00Z", interval_minutes=60, steps=6),
                              ["burglary"], domain="crime", task_kind="classification")
        np.testing.assert_allclose(baseline_prediction(record, "historical-average", 2), [[0.5], [0.5]])
        np.testing.assert_array_equal(baseline_prediction(record, "copy-last", 2), [[0.0], [0.0]])


class TestVarianceBuckets:
    def test_even_split(self):
        buckets = variance_buckets(_tensor(_alternating()), range(8))
        assert list(buckets.buckets) == BUCKET_LABELS
        assert buckets.buckets[BUCKET_LABELS[0]] == [0, 1]
        assert buckets.buckets[BUCKET_LABELS[3]] == [6, 7]
        assert buckets.ranks == pytest.approx([(r + 1) / 8 for r in range(8)])
        assert not buckets.degenerate
        assert buckets.bucket_of(5) == BUCKET_LABELS[2]

    def test_increasing_affine_invariance(self):
        values = _alternating()
        plain = variance_buckets(_tensor(values), range(8))
        shifted = variance_buckets(_tensor(2 * values + 5), range(8))
        assert plain.buckets == shifted.buckets

    def test_ties_are_flagged(self):
        buckets = variance_buckets(_tensor(np.ones((4, 6, 1))), range(4))
        assert buckets.degenerate
        assert [members for members in buckets.buckets.values()] == [[0], [1], [2], [3]]

    def test_needs_four_regions(self):
        with pytest.raises(EvaluationException):
            variance_buckets(_tensor(_alternating(regions=3)), range(3))

    def test_feature_out_of_range(self):
        with pytest.raises(EvaluationException):
            variance_buckets(_tensor(_alternating()), range(8), feature=1)

    def test_time_range(self):
        values = _alternating().astype(np.float32)
        values[0, 6:, 0] = 100.0
        assert variance_buckets(_tensor(values), range(8), time_range=(0, 6)).buckets[BUCKET_LABELS[0]] == [0, 1]


class TestProtocols:
    def test_scope(self, tiny_data):
        tensors, splits = tiny_data
        split = splits["taxi"]
        regions, time_range = protocol_scope("supervised", split, tensors["taxi"])
        assert regions == split.train_region_ids
        assert time_range == tuple(split.test_time_range)
        assert protocol_scope("zero-shot", split, tensors["taxi"])[0] == split.zero_shot_region_ids
        with pytest.raises(EvaluationException):
            protocol_scope("few-shot", split, tensors["taxi"])

    def test_zero_shot_report(self, tiny_data, tiny_corpus):
        tensors, splits = tiny_data
        model = make_model(_eval_config(), tiny_corpus)
        report = evaluate_protocol(model, tensors, splits, "zero-shot")
        assert set(report.datasets) == {"taxi", "bike", "crime"}
        assert report.samples == sum(m.samples for m in report.datasets.values())
        assert report.exact_pre == sum(m.exact_pre for m in report.datasets.values())
        assert 0.0 <= report.exact_pre_rate <= 1.0
        assert report.split_fingerprints["taxi"] == splits["taxi"].fingerprint()
        taxi = report.datasets["taxi"]
        assert set(taxi.models) == {MODEL_NAME, "historical-average", "copy-last"}
        assert set(taxi.models[MODEL_NAME].mae) == set(taxi.feature_names)
        assert len(taxi.models[MODEL_NAME].per_step_mae[taxi.feature_names[0]]) == 6
        crime = report.datasets["crime"]
        assert crime.task_kind == "classification"
        assert set(crime.models[MODEL_NAME].macro_f1) == set(crime.feature_names)
        assert not crime.models[MODEL_NAME].mae

    def test_deterministic(self, tiny_data, tiny_corpus):
        tensors, splits = tiny_data
        model = make_model(_eval_config(), tiny_corpus)
        a = evaluate_protocol(model, tensors, splits, "supervised")
        b = evaluate_protocol(model, tensors, splits, "supervised", threads=2)
        assert a.model_dump() == b.model_dump()

    def test_without_baselines(self, tiny_data, tiny_corpus):
        tensors, splits = tiny_data
        model = make_model(_eval_config(baselines=False), tiny_corpus)
        report = evaluate_protocol(model, {"taxi": tensors["taxi"]}, splits, "zero-shot")
        assert set(report.datasets["taxi"].models) == {MODEL_NAME}

    def test_overlapping_regions(self, tiny_data, tiny_model):
        tensors, splits = tiny_data
        split = splits["taxi"]
        broken = dict(splits)
        broken["taxi"] = DatasetSplit(
            train_region_ids=split.train_region_ids,
            zero_shot_region_ids=split.zero_shot_region_ids + split.train_region_ids[:1],
            train_time_range=split.train_time_range,
            test_time_range=split.test_time_range,
        )
        with pytest.raises(RegionSplitException) as exc_info:
            evaluate_protocol(tiny_model, tensors, broken, "zero-shot")
        assert exc_info.value.error_code == ErrorCode.REGION_OVERLAP
        assert exc_info.value.exit_code == 2

    def test_missing_seed(self, tiny_data, tiny_corpus):
        tensors, splits = tiny_data
        model = make_model(RunConfig.from_dict(tiny_config_dict(eval={"seed": None})), tiny_corpus)
        with pytest.raises(ConfigurationException) as exc_info:
            evaluate_protocol(model, tensors, splits, "zero-shot")
        assert exc_info.value.exit_code == 1


class TestReports:
    def test_save_report(self, tmp_path):
        paths = save_report(_report(2.0), tmp_path)
        assert [p.name for p in paths] == ["report.json", "metrics.csv", "per_step.csv"]
        payload = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert payload["unparseable_rate"] == 0.0
        metrics = pd.read_csv(tmp_path / "metrics.csv")
        assert set(metrics["metric"]) == {"MAE", "RMSE"}
        assert metrics.loc[metrics["metric"] == "MAE", "value"].item() == 2.0

    def test_comparison_table(self):
        table = comparison_table({"zero-shot": _report(2.0)}, {"zero-shot": _report(3.5, variant="STC_OFF")},
                                 "STC_OFF")
        mae = table[table["metric"] == "MAE"].iloc[0]
        assert mae["FULL"] == 2.0
        assert mae["STC_OFF"] == 3.5
        assert mae["delta"] == pytest.approx(1.5)
        assert list(table.columns) == ["protocol", "dataset", "feature", "metric", "FULL", "STC_OFF", "delta"]

    def test_ablation_rejects_full(self, tiny_config, tiny_data):
        tensors, splits = tiny_data
        with pytest.raises(EvaluationException):
            run_ablation("FULL", tiny_config, tensors, splits)

    def test_ablation_run(self, tmp_path, tiny_data):
        tensors, splits = tiny_data
        config = _eval_config(protocols=["zero-shot"])
        result = run_ablation("STC_OFF", config, tensors, splits, out_dir=tmp_path, epochs=1)
        assert result.reports["zero-shot"].variant == "STC_OFF"
        assert result.baseline_reports["zero-shot"].variant == "FULL"
        assert (tmp_path / "comparison.csv").exists()
        assert (tmp_path / "STC_OFF" / "zero-shot" / "report.json").exists()
        assert not result.comparison.empty

"""
默认配置下的端到端验收测试（pytest -m slow）

- 20 轮训练后平均总损失低于第 1 轮的一半
- supervised 协议在至少 2 个数据集上优于 historical-average
- zero-shot 协议在稠密数据集上优于 copy-last
- 至少 95% 的答案恰好包含 F 个 <ST_PRE>
- STE_OFF 的 zero-shot MAE 不低于 FULL（同时打印对比表与各项差距）

作者：ST-Instruct
版本：0.1.0
"""

import numpy as np
import pytest

from st_instruct.config import RunConfig
from st_instruct.evaluation import MODEL_NAME, evaluate_protocol, run_ablation
from st_instruct.st_data import build_synthetic_corpus, default_split
from st_instruct.training import run_training

from tests.conftest import CONFIG_DIR

pytestmark = pytest.mark.slow

DENSE = ("taxi", "bike")


@pytest.fixture(scope="module")
def default_run():
    config = RunConfig.from_file(CONFIG_DIR / "default_run.json")
    tensors = build_synthetic_corpus(config.data)
    splits = {name: default_split(t, config.data) for name, t in tensors.items()}
    return config, tensors, splits, run_training(config, tensors, splits)


def _mean_mae(report, dataset, model):
    return float(np.mean(list(report.datasets[dataset].models[model].mae.values())))


def _beats(report, dataset, baseline):
    """回归任务比较 MAE（越小越好），分类任务比较 Macro-F1（越大越好）"""
    metrics = report.datasets[dataset]
    ours, theirs = metrics.models[MODEL_NAME], metrics.models[baseline]
    if metrics.task_kind == "classification":
        return np.mean(list(ours.macro_f1.values())) > np.mean(list(theirs.macro_f1.values()))
    return _mean_mae(report, dataset, MODEL_NAME) < _mean_mae(report, dataset, baseline)


def _print_margins(report, baseline):
    print(f"\n[{report.protocol}] <ST_PRE> 完整: {report.exact_pre}/{report.samples}, "
          f"缺失: {report.missing_pre}, 无法解析: {report.unparseable}")
    for name in DENSE:
        model_mae = _mean_mae(report, name, MODEL_NAME)
        baseline_mae = _mean_mae(report, name, baseline)
        print(f"  {name}: MAE {model_mae:.3f} vs {baseline} {baseline_mae:.3f} "
              f"(margin {baseline_mae - model_mae:+.3f})")
    crime = report.datasets["crime"].models
    print(f"  crime: Macro-F1 {np.mean(list(crime[MODEL_NAME].macro_f1.values())):.3f} "
          f"vs {baseline} {np.mean(list(crime[baseline].macro_f1.values())):.3f}")


@pytest.fixture(scope="module")
def reports(default_run):
    _, tensors, splits, result = default_run
    return {protocol: evaluate_protocol(result.model, tensors, splits, protocol)
            for protocol in ("supervised", "zero-shot")}


def test_corpus_shape(default_run):
    _, tensors, splits, _ = default_run
    assert set(tensors) == {"taxi", "bike", "crime"}
    for name, tensor in tensors.items():
        assert tensor.values.shape[:2] == (40, 14 * 48)
        assert len(splits[name].zero_shot_region_ids) == 20
    assert tensors["crime"].task_kind == "classification"


def test_loss_halves(default_run):
    _, _, _, result = default_run
    first, last = result.history[0].total, result.history[-1].total
    print(f"\nepoch 1 total={first:.4f}, epoch {len(result.history)} total={last:.4f}")
    assert len(result.history) == 20
    assert last < 0.5 * first


def test_supervised_beats_historical_average(reports):
    report = reports["supervised"]
    _print_margins(report, "historical-average")
    wins = [name for name in report.datasets if _beats(report, name, "historical-average")]
    assert len(wins) >= 2, f"只在 {wins} 上优于 historical-average"


def test_zero_shot_beats_copy_last(reports):
    report = reports["zero-shot"]
    _print_margins(report, "copy-last")
    for name in DENSE:
        assert _mean_mae(report, name, MODEL_NAME) < _mean_mae(report, name, "copy-last"), name


@pytest.mark.parametrize("protocol", ["supervised", "zero-shot"])
def test_answers_carry_every_pre_token(reports, protocol):
    report = reports[protocol]
    assert report.samples > 0
    assert report.exact_pre_rate >= 0.95
    assert report.missing_pre <= 0.05 * sum(m.samples * len(m.feature_names) for m in report.datasets.values())


def test_encoder_ablation_hurts_dense_data(default_run):
    config, tensors, splits, _ = default_run
    config = config.with_overrides({"eval": {"protocols": ["zero-shot"]}})
    result = run_ablation("STE_OFF", config, tensors, splits)
    table = result.comparison
    print("\n" + table.to_string(index=False))
    mae = table[(table["metric"] == "MAE") & table["dataset"].isin(DENSE)]
    assert not mae.empty
    assert mae["FULL"].notna().all()
    for name, rows in mae.groupby("dataset"):
        assert rows["STE_OFF"].mean() >= rows["FULL"].mean(), name

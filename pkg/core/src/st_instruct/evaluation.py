"""
评估模块

这个模块负责模型与朴素基线的评估，包括：
1. 指标：MAE / RMSE（回归），Recall / Macro-F1（分类，标签为计数>0，预测概率以 0.5 为阈值）
2. 朴素基线：历史均值（historical-average）、最后值复制（copy-last）
3. 方差分桶：按区域时间方差的归一化秩分为 (0,.25] (.25,.5] (.5,.75] (.75,1] 四档
4. 评估协议：zero-shot（未见区域）、cross-city（第二座城市）、supervised（训练区域 + 后续时间段）
5. 消融对比：同种子同预算训练 FULL 与变体并输出对比表
6. 报告输出：report.json / metrics.csv / per_step.csv / comparison.csv

作者：ST-Instruct
版本：0.1.0
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .config import PROTOCOLS, RunConfig
from .exceptions import EvaluationException
from .model import RecordPrediction, STInstructModel
from .prompts import InstructionRecord, build_corpus
from .st_data import DatasetSplit, SpatioTemporalTensor, binarize
from .training import run_training, variant_options

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

MODEL_NAME = "st-instruct"
BUCKET_LABELS = ["(0, 0.25]", "(0.25, 0.5]", "(0.5, 0.75]", "(0.75, 1.0]"]
CLASSIFICATION_THRESHOLD = 0.5


# ==================== 指标 ====================

def mae_rmse(y: np.ndarray, y_hat: np.ndarray) -> Tuple[float, float]:
    """
    平均绝对误差与均方根误差

    Raises:
        EvaluationException: 形状不一致或输入为空
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise EvaluationException(f"形状不一致: {y.shape} 与 {y_hat.shape}")
    if y.size == 0:
        raise EvaluationException("输入为空")
    error = y - y_hat
    mae = float(np.mean(np.abs(error)))
    rmse = float(math.sqrt(np.mean(error * error)))
    # 舍入误差下保持 RMSE ≥ MAE
    return mae, max(rmse, mae)


def _check_binary(values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values)
    if not np.all((values == 0) | (values == 1)):
        raise EvaluationException(f"{name} 不是二值数组")
    return values.astype(np.int64)


def recall_macro_f1(y_bin: np.ndarray, y_hat_bin: np.ndarray) -> Tuple[float, float]:
    """
    正类召回率与两类宏平均 F1

    没有正样本时召回率为 0 并给出警告；某一类 precision+recall 为 0 时该类 F1 记为 0。
    """
    y = _check_binary(y_bin, "y_bin")
    y_hat = _check_binary(y_hat_bin, "y_hat_bin")
    if y.shape != y_hat.shape:
        raise EvaluationException(f"形状不一致: {y.shape} 与 {y_hat.shape}")
    if y.size == 0:
        raise EvaluationException("输入为空")

    tp = int(np.sum((y == 1) & (y_hat == 1)))
    fn = int(np.sum((y == 1) & (y_hat == 0)))
    fp = int(np.sum((y == 0) & (y_hat == 1)))
    tn = int(np.sum((y == 0) & (y_hat == 0)))

    if tp + fn == 0:
        logger.warning("⚠️ 标签中没有正样本，召回率记为 0")
    recall = tp / (tp + fn) if tp + fn else 0.0

    def f1(true_pos: int, false_pos: int, false_neg: int) -> float:
        precision = true_pos / (true_pos + false_pos) if true_pos + false_pos else 0.0
        rec = true_pos / (true_pos + false_neg) if true_pos + false_neg else 0.0
        return 2 * precision * rec / (precision + rec) if precision + rec else 0.0

    macro = (f1(tp, fp, fn) + f1(tn, fn, fp)) / 2.0
    return float(recall), float(macro)


# ==================== 朴素基线 ====================

def historical_average(history: np.ndarray, prediction_length: int) -> np.ndarray:
    """(H, F) → (P, F)：历史均值重复 P 次"""
    history = np.asarray(history, dtype=np.float64)
    return np.repeat(history.mean(axis=0, keepdims=True), prediction_length, axis=0)


def copy_last(history: np.ndarray, prediction_length: int) -> np.ndarray:
    """(H, F) → (P, F)：最后一个观测重复 P 次"""
    history = np.asarray(history, dtype=np.float64)
    return np.repeat(history[-1:], prediction_length, axis=0)


BASELINES = {
    "historical-average": historical_average,
    "copy-last": copy_last,
}


def baseline_prediction(record: InstructionRecord, name: str, prediction_length: int) -> np.ndarray:
    """分类任务在二值化后的历史上计算，结果可视为概率"""
    history = record.history_array()
    if record.task_kind == "classification":
        history = binarize(history)
    return BASELINES[name](history, prediction_length)


# ==================== 方差分桶 ====================

class VarianceBuckets(BaseModel):
    """区域按时间方差的归一化秩分桶"""

    feature: int = Field(0, description="用于计算方差的特征下标")
    region_ids: List[int]
    variances: List[float]
    ranks: List[float] = Field(..., description="归一化秩 r/R，位于 (0, 1]")
    buckets: Dict[str, List[int]]
    degenerate: bool = False

    def bucket_of(self, region_id: int) -> str:
        for label, members in self.buckets.items():
            if region_id in members:
                return label
        raise EvaluationException(f"区域 {region_id} 不在任何分桶中")


def variance_buckets(
    tensor: SpatioTemporalTensor,
    region_ids: Sequence[int],
    feature: int = 0,
    time_range: Optional[Tuple[int, int]] = None,
) -> VarianceBuckets:
    """
    按区域时间方差分桶

    方差相同的区域按稳定排序（区域顺序）决定秩，并给出警告。

    Raises:
        EvaluationException: 区域少于 4 个或特征下标越界
    """
    region_ids = [int(r) for r in region_ids]
    if len(region_ids) < 4:
        raise EvaluationException(f"方差分桶至少需要 4 个区域，实际 {len(region_ids)} 个")
    if not 0 <= feature < tensor.num_features:
        raise EvaluationException(f"特征下标越界: {feature}")
    lo, hi = time_range if time_range is not None else (0, tensor.num_steps)
    variances = np.asarray([
        float(np.var(tensor.values[tensor.region_index(r), lo:hi, feature].astype(np.float64)))
        for r in region_ids
    ])
    degenerate = len(np.unique(variances)) < len(variances)
    if degenerate:
        logger.warning("⚠️ 存在方差相同的区域，按区域顺序决定秩")

    order = np.argsort(variances, kind="stable")
    ranks = np.empty(len(region_ids), dtype=np.float64)
    ranks[order] = np.arange(1, len(region_ids) + 1) / len(region_ids)
    buckets: Dict[str, List[int]] = {label: [] for label in BUCKET_LABELS}
    for region_id, rank in zip(region_ids, ranks):
        index = min(max(int(math.ceil(rank * 4 - 1e-12)) - 1, 0), 3)
        buckets[BUCKET_LABELS[index]].append(region_id)
    return VarianceBuckets(
        feature=feature,
        region_ids=region_ids,
        variances=variances.tolist(),
        ranks=ranks.tolist(),
        buckets=buckets,
        degenerate=degenerate,
    )


# ==================== 报告模型 ====================

class ModelMetrics(BaseModel):
    """一个模型（或基线）在一个数据集上的指标"""

    mae: Dict[str, float] = Field(default_factory=dict)
    rmse: Dict[str, float] = Field(default_factory=dict)
    per_step_mae: Dict[str, List[float]] = Field(default_factory=dict)
    per_step_rmse: Dict[str, List[float]] = Field(default_factory=dict)
    recall: Dict[str, float] = Field(default_factory=dict)
    macro_f1: Dict[str, float] = Field(default_factory=dict)
    buckets: Dict[str, Dict[str, float]] = Field(default_factory=dict, description="分桶 → {mae, rmse, regions}")


class DatasetMetrics(BaseModel):
    dataset: str
    task_kind: str
    feature_names: List[str]
    samples: int = 0
    evaluated: int = 0
    regions: int = 0
    missing_pre: int = 0
    exact_pre: int = Field(default=0, description="<ST_PRE> 个数恰为 F 的记录数")
    unparseable: int = 0
    models: Dict[str, ModelMetrics] = Field(default_factory=dict)


class MetricReport(BaseModel):
    """一次评估协议运行的完整报告"""

    protocol: str
    variant: str = "FULL"
    seed: int
    config_fingerprint: str
    split_fingerprints: Dict[str, str] = Field(default_factory=dict)
    datasets: Dict[str, DatasetMetrics] = Field(default_factory=dict)
    samples: int = 0
    missing_pre: int = 0
    exact_pre: int = 0
    unparseable: int = 0

    @property
    def exact_pre_rate(self) -> float:
        return self.exact_pre / self.samples if self.samples else 0.0

    @property
    def unparseable_rate(self) -> float:
        return self.unparseable / self.samples if self.samples else 0.0

    def rows(self) -> List[Dict[str, object]]:
        """长表：协议 × 数据集 × 模型 × 特征 × 指标"""
        rows = []
        for name, metrics in self.datasets.items():
            for model_name, result in metrics.models.items():
                for metric in ("mae", "rmse", "recall", "macro_f1"):
                    for feature, value in getattr(result, metric).items():
                        rows.append({
                            "protocol": self.protocol, "variant": self.variant, "dataset": name,
                            "model": model_name, "feature": feature, "metric": metric.upper(), "value": value,
                        })
        return rows

    def per_step_rows(self) -> List[Dict[str, object]]:
        rows = []
        for name, metrics in self.datasets.items():
            for model_name, result in metrics.models.items():
                for metric, table in (("MAE", result.per_step_mae), ("RMSE", result.per_step_rmse)):
                    for feature, values in table.items():
                        for step, value in enumerate(values, start=1):
                            rows.append({
                                "protocol": self.protocol, "variant": self.variant, "dataset": name,
                                "model": model_name, "feature": feature, "step": step,
                                "metric": metric, "value": value,
                            })
        return rows


def save_report(report: MetricReport, out_dir: Union[str, Path]) -> List[Path]:
    """写出 report.json、metrics.csv、per_step.csv"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.model_dump(mode="json")
    payload["unparseable_rate"] = report.unparseable_rate
    json_path = out / "report.json"
    json_path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    metrics_path = out / "metrics.csv"
    pd.DataFrame(report.rows(), columns=["protocol", "variant", "dataset", "model", "feature", "metric", "value"]
                 ).to_csv(metrics_path, index=False)
    steps_path = out / "per_step.csv"
    pd.DataFrame(report.per_step_rows(),
                 columns=["protocol", "variant", "dataset", "model", "feature", "step", "metric", "value"]
                 ).to_csv(steps_path, index=False)
    logger.info(f"✅ 评估报告已保存: {out}")
    return [json_path, metrics_path, steps_path]


# ==================== 聚合 ====================

def _regression_metrics(y: np.ndarray, y_hat: np.ndarray, features: Sequence[str]) -> ModelMetrics:
    """y, y_hat: (N, P, F)"""
    result = ModelMetrics()
    for f, feature in enumerate(features):
        result.mae[feature], result.rmse[feature] = mae_rmse(y[:, :, f], y_hat[:, :, f])
        steps = [mae_rmse(y[:, p, f], y_hat[:, p, f]) for p in range(y.shape[1])]
        result.per_step_mae[feature] = [s[0] for s in steps]
        result.per_step_rmse[feature] = [s[1] for s in steps]
    return result


def _classification_metrics(y: np.ndarray, prob: np.ndarray, features: Sequence[str]) -> ModelMetrics:
    result = ModelMetrics()
    labels = binarize(y)
    decided = (prob >= CLASSIFICATION_THRESHOLD).astype(np.int64)
    for f, feature in enumerate(features):
        result.recall[feature], result.macro_f1[feature] = recall_macro_f1(labels[:, :, f], decided[:, :, f])
    return result


def _bucket_metrics(buckets: VarianceBuckets, region_ids: np.ndarray, y: np.ndarray,
                    y_hat: np.ndarray) -> Dict[str, Dict[str, float]]:
    table = {}
    for label, members in buckets.buckets.items():
        mask = np.isin(region_ids, members)
        if not mask.any():
            continue
        mae, rmse = mae_rmse(y[mask], y_hat[mask])
        table[label] = {"mae": mae, "rmse": rmse, "regions": float(len(members))}
    return table


def protocol_scope(protocol: str, split: DatasetSplit, tensor: SpatioTemporalTensor) -> Tuple[List[int], Tuple[int, int]]:
    """协议 → (评估区域, 时间段)"""
    if protocol == "zero-shot":
        return list(split.zero_shot_region_ids), tuple(split.test_time_range)
    if protocol == "supervised":
        return list(split.train_region_ids), tuple(split.test_time_range)
    if protocol == "cross-city":
        regions = list(split.zero_shot_region_ids) or tensor.region_ids
        return regions, tuple(split.test_time_range)
    raise EvaluationException(f"未知评估协议: {protocol}，可选 {PROTOCOLS}", protocol=protocol)


# ==================== 协议评估 ====================

def evaluate_protocol(
    model: STInstructModel,
    tensors: Mapping[str, SpatioTemporalTensor],
    splits: Mapping[str, DatasetSplit],
    protocol: str,
    baselines: Optional[bool] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> MetricReport:
    """
    在一个协议下评估模型与朴素基线

    对每条记录贪心生成答案并在 <ST_PRE> 处回归；缺失的 <ST_PRE> 以 copy-last 回退并计数，
    文本数字模式解析失败的记录计数后排除。

    Raises:
        RegionSplitException: 训练区域与零样本区域重叠
        EvaluationException: 未知协议或没有可评估的数据集
    """
    config = model.config
    seed = config.require_seed("eval") if seed is None else seed
    baselines = config.eval.baselines if baselines is None else baselines
    threads = config.eval.threads if threads is None else threads
    mode, with_context = variant_options(config.train.variant)
    data = config.data

    names = [name for name in data.datasets if name in tensors] or list(tensors)
    if not names:
        raise EvaluationException("没有可评估的数据集", protocol=protocol)

    report = MetricReport(
        protocol=protocol,
        variant=config.train.variant,
        seed=seed,
        config_fingerprint=config.fingerprint(),
    )
    logger.info(f"🔄 评估协议 {protocol}（变体 {config.train.variant}, 种子 {seed}）")

    for index, name in enumerate(names):
        tensor, split = tensors[name], splits[name]
        split.check_disjoint()
        report.split_fingerprints[name] = split.fingerprint()
        region_ids, time_range = protocol_scope(protocol, split, tensor)
        records = build_corpus(
            tensor, region_ids, time_range, data.history_length, data.prediction_length, data.eval_stride,
            mode=mode, with_context=with_context, max_records=data.max_eval_records_per_dataset,
            seed=seed + index, threads=threads,
        )
        report.datasets[name] = _evaluate_dataset(model, tensor, records, region_ids, time_range,
                                                  baselines, threads)
        metrics = report.datasets[name]
        report.samples += metrics.samples
        report.missing_pre += metrics.missing_pre
        report.exact_pre += metrics.exact_pre
        report.unparseable += metrics.unparseable

    if report.missing_pre:
        logger.warning(f"⚠️ {report.missing_pre} 个 (区域, 特征) 缺少 <ST_PRE>，已使用 copy-last 回退")
    if report.unparseable:
        logger.warning(f"⚠️ {report.unparseable} 条答案无法解析（比例 {report.unparseable_rate:.2%}）")
    logger.info(f"✅ 协议 {protocol} 评估完成: {report.samples} 条记录")
    return report


def _evaluate_dataset(
    model: STInstructModel,
    tensor: SpatioTemporalTensor,
    records: List[InstructionRecord],
    region_ids: Sequence[int],
    time_range: Tuple[int, int],
    baselines: bool,
    threads: int,
) -> DatasetMetrics:
    features = list(tensor.feature_names)
    horizon = model.config.data.prediction_length
    metrics = DatasetMetrics(dataset=tensor.name, task_kind=tensor.task_kind,
                             feature_names=features, samples=len(records), regions=len(region_ids))
    if not records:
        return metrics

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            predictions: List[RecordPrediction] = list(pool.map(model.predict, records))
    else:
        predictions = [model.predict(record) for record in records]

    metrics.missing_pre = sum(p.missing_pre for p in predictions)
    metrics.exact_pre = sum(1 for p in predictions if p.pre_tokens == len(features))
    valid = [i for i, p in enumerate(predictions) if p.values is not None]
    metrics.unparseable = len(records) - len(valid)
    metrics.evaluated = len(valid)
    if not valid:
        logger.warning(f"⚠️ 数据集 {tensor.name} 没有可解析的预测")
        return metrics

    y = np.stack([records[i].target_array() for i in valid]).astype(np.float64)
    outputs = {MODEL_NAME: np.stack([predictions[i].values for i in valid])}
    if baselines:
        for name in BASELINES:
            outputs[name] = np.stack([baseline_prediction(records[i], name, horizon) for i in valid])

    owners = np.asarray([records[i].region_id for i in valid])
    buckets = None
    if tensor.task_kind == "regression" and len(set(owners.tolist())) >= 4:
        feature = min(model.config.eval.bucket_feature, tensor.num_features - 1)
        buckets = variance_buckets(tensor, sorted(set(owners.tolist())), feature=feature, time_range=time_range)

    for name, y_hat in outputs.items():
        if tensor.task_kind == "classification":
            result = _classification_metrics(y, y_hat, features)
        else:
            result = _regression_metrics(y, y_hat, features)
            if buckets is not None:
                result.buckets = _bucket_metrics(buckets, owners, y, y_hat)
        metrics.models[name] = result

    summary = ", ".join(f"{n}={_headline(metrics.models[n])}" for n in outputs)
    logger.info(f"📊 {tensor.name}: {summary}")
    return metrics


def _headline(result: ModelMetrics) -> str:
    if result.mae:
        return f"MAE {np.mean(list(result.mae.values())):.3f}"
    if result.macro_f1:
        return f"F1 {np.mean(list(result.macro_f1.values())):.3f}"
    return "-"


# ==================== 消融 ====================

@dataclass
class AblationResult:
    variant: str
    reports: Dict[str, MetricReport]
    baseline_reports: Dict[str, MetricReport]
    comparison: pd.DataFrame = field(default_factory=pd.DataFrame)


def comparison_table(full: Mapping[str, MetricReport], variant: Mapping[str, MetricReport],
                     variant_name: str) -> pd.DataFrame:
    """FULL 与变体在模型指标上的逐项对比"""
    def frame(reports: Mapping[str, MetricReport], column: str) -> pd.DataFrame:
        rows = [row for report in reports.values() for row in report.rows() if row["model"] == MODEL_NAME]
        table = pd.DataFrame(rows, columns=["protocol", "variant", "dataset", "model", "feature", "metric", "value"])
        return table.drop(columns=["variant", "model"]).rename(columns={"value": column})

    keys = ["protocol", "dataset", "feature", "metric"]
    merged = frame(full, "FULL").merge(frame(variant, variant_name), on=keys, how="outer")
    merged["delta"] = merged[variant_name] - merged["FULL"]
    return merged.sort_values(keys).reset_index(drop=True)


def run_ablation(
    variant: str,
    config: RunConfig,
    tensors: Mapping[str, SpatioTemporalTensor],
    splits: Mapping[str, DatasetSplit],
    cross_city: Optional[Tuple[Mapping[str, SpatioTemporalTensor], Mapping[str, DatasetSplit]]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    epochs: Optional[int] = None,
) -> AblationResult:
    """
    用同一种子与训练预算分别训练 FULL 与变体，在相同切分上评估并输出对比表

    Args:
        cross_city: cross-city 协议所需的 (张量, 切分)；协议列表不含 cross-city 时可省略
    """
    if variant == "FULL":
        raise EvaluationException("消融变体不能是 FULL")
    runs: Dict[str, Dict[str, MetricReport]] = {}
    for name in ("FULL", variant):
        run_config = config.with_overrides({"train": {"variant": name}})
        logger.info(f"🔄 消融运行: {name}")
        trained = run_training(run_config, tensors, splits, threads=threads, epochs=epochs)
        reports = {}
        for protocol in run_config.eval.protocols:
            if protocol == "cross-city":
                if cross_city is None:
                    raise EvaluationException("cross-city 协议需要第二座城市的数据", protocol=protocol)
                reports[protocol] = evaluate_protocol(trained.model, cross_city[0], cross_city[1], protocol,
                                                      threads=threads)
            else:
                reports[protocol] = evaluate_protocol(trained.model, tensors, splits, protocol, threads=threads)
        runs[name] = reports

    result = AblationResult(
        variant=variant,
        reports=runs[variant],
        baseline_reports=runs["FULL"],
        comparison=comparison_table(runs["FULL"], runs[variant], variant),
    )
    if out_dir is not None:
        out = Path(out_dir)
        for name, reports in runs.items():
            for protocol, report in reports.items():
                save_report(report, out / name / protocol)
        out.mkdir(parents=True, exist_ok=True)
        result.comparison.to_csv(out / "comparison.csv", index=False)
        logger.info(f"✅ 消融对比表已保存: {out / 'comparison.csv'}")
    return result

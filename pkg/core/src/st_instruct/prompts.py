"""
时空提示词构建模块

这个模块负责把窗口样本渲染为指令记录，包括：
1. 提示词模板（历史数值列表、记录时间段、区域描述、预测时间段、时空词元说明）
2. 目标文本：词元回归模式（<ST_PRE>）与文本数字模式（T2P 消融）
3. 占位符位置计算（基于与词表无关的预分词）
4. 数值列表解析与回填
5. .stjsonl 指令语料读写

序列约定：完整序列 = [<BOS>] + 提示词词元 + 目标词元 + [<EOS>]，
st_his_positions / st_pre_positions 都是该完整序列中的下标。

作者：ST-Instruct
版本：0.1.0
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .exceptions import DataException, ErrorCode
from .st_data import DatasetSplit, RegionMeta, SpatioTemporalTensor, TimeMeta, WindowSample, make_windows, parse_utc
from .tokenizer import ST_END, ST_HIS, ST_PRE, ST_START, pretokenize

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

MODE_TOKENS = "token-regression"
MODE_TEXT = "text-numbers"

_MONTHS = ["January", "February", "March", "April", "May", "June", "July",
           "August", "September", "October", "November", "December"]
_WEEKDAYS = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]
_ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]

NO_DESCRIPTION = "No description is available for this region."
ANSWER_PREFIX = "Based on the given information, the predictions"
_LIST_PATTERN = re.compile(r"\[([^\[\]]*)\]")


# ==================== 数据模型 ====================

class InstructionRecord(BaseModel):
    """
    指令记录

    ground_truth 为 P×F 原始计数（predict 场景下可为空）；history 为 H×F 原始计数，
    供编码器在训练/评估时使用。
    """

    prompt_text: str
    st_his_positions: List[int]
    target_text: str
    st_pre_positions: List[int]
    ground_truth: Optional[List[List[float]]] = None
    task_kind: str = "regression"
    region_id: int = 0
    window_start_step: int = 0
    dataset: str = ""
    feature_names: List[str] = Field(default_factory=list)
    history: List[List[float]] = Field(default_factory=list)
    mode: str = MODE_TOKENS

    @property
    def num_features(self) -> int:
        return len(self.feature_names)

    def history_array(self) -> np.ndarray:
        return np.asarray(self.history, dtype=np.float32)

    def target_array(self) -> np.ndarray:
        if self.ground_truth is None:
            raise DataException("指令记录没有真实值", error_code=ErrorCode.DATA_ERROR)
        return np.asarray(self.ground_truth, dtype=np.float32)


class PromptRequest(BaseModel):
    """
    predict 命令的结构化输入

    history 按特征给出（F 个长度为 H 的列表），与提示词中的数值列表一致。
    """

    history: List[List[float]]
    feature_names: List[str] = Field(default_factory=lambda: ["inflow", "outflow"])
    domain: str = "taxi"
    city: str = "New York City"
    start: str
    interval_minutes: int = Field(30, gt=0)
    prediction_length: int = Field(12, ge=1)
    task_kind: str = "regression"
    region: Optional[RegionMeta] = None
    dataset: str = ""

    def to_record(self, mode: str = MODE_TOKENS, with_context: bool = True) -> InstructionRecord:
        if len(self.history) != len(self.feature_names):
            raise DataException(f"history 特征数 {len(self.history)} 与特征名 {len(self.feature_names)} 不一致")
        history = np.asarray(self.history, dtype=np.float32).T
        time = TimeMeta(start=self.start, interval_minutes=self.interval_minutes,
                        steps=history.shape[0] + self.prediction_length)
        sample = WindowSample(
            history=history,
            target=np.zeros((self.prediction_length, history.shape[1]), dtype=np.float32),
            region_id=self.region.region_id if self.region else 0,
            window_start_step=0,
        )
        record = build_record(
            sample, self.region or RegionMeta(region_id=0, city=self.city), time, self.feature_names,
            domain=self.domain, city=self.city, task_kind=self.task_kind, mode=mode,
            with_context=with_context, dataset=self.dataset or self.domain,
        )
        return record.model_copy(update={"ground_truth": None})


# ==================== 文本格式化 ====================

def format_time(moment: datetime) -> str:
    """'January 14, 2020, 12:00, Tuesday'（与区域设置无关）"""
    moment = parse_utc(moment)
    return (f"{_MONTHS[moment.month - 1]} {moment.day}, {moment.year}, "
            f"{moment.hour:02d}:{moment.minute:02d}, {_WEEKDAYS[moment.weekday()]}")


def format_span(time: TimeMeta, first_step: int, length: int) -> str:
    first = format_time(time.timestamp(first_step))
    last = format_time(time.timestamp(first_step + length - 1))
    return f"'{first} to {last}, with data points recorded at {time.interval_minutes}-minute intervals'"


def render_list(values: Sequence[float]) -> str:
    """数值渲染为方括号整数列表"""
    return "[" + " ".join(str(int(v)) for v in np.rint(np.asarray(values, dtype=np.float64))) + "]"


def join_phrases(items: Sequence[str]) -> str:
    items = list(items)
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def _feature_label(name: str, task_kind: str) -> str:
    return name if task_kind == "regression" else f"{name} count"


def _ordinal_phrase(count: int) -> str:
    words = [f"the {_ORDINALS[i] if i < len(_ORDINALS) else f'{i + 1}th'}" for i in range(count)]
    if count == 1:
        return "the first token corresponds"
    return f"{join_phrases(words)} tokens correspond"


def region_sentence(region: Optional[RegionMeta]) -> str:
    if region is None or not region.has_description:
        return NO_DESCRIPTION
    borough = f"within the {region.borough} borough district" if region.borough else "within the city"
    covering = ""
    if region.poi_categories:
        covering = f", covering {', '.join(region.poi_categories)} categories"
    return (f"Here is the region information: This region is located {borough} and encompasses "
            f"various POIs within a one-kilometer radius{covering}.")


# ==================== 指令构建 ====================

def build_instruction(
    sample: WindowSample,
    region: Optional[RegionMeta],
    time: TimeMeta,
    feature_names: Sequence[str],
    domain: str,
    city: str = "",
    task_kind: str = "regression",
    history_length: Optional[int] = None,
    prediction_length: Optional[int] = None,
    with_context: bool = True,
) -> str:
    """
    渲染提示词

    with_context=False 时去掉时间与区域信息（STC_OFF 消融）。

    Raises:
        DataException: 样本的 H/P/F 与模板不一致
    """
    history = np.asarray(sample.history)
    target = np.asarray(sample.target)
    h, p = history.shape[0], target.shape[0]
    if history.ndim != 2 or history.shape[1] != len(feature_names) or target.shape[1:] != history.shape[1:]:
        raise DataException(
            f"样本形状 {history.shape}/{target.shape} 与特征 {list(feature_names)} 不匹配",
            error_code=ErrorCode.WINDOW_ERROR,
        )
    if (history_length is not None and h != history_length) or (prediction_length is not None and p != prediction_length):
        raise DataException(
            f"窗口长度 H={h}, P={p} 与模板 H={history_length}, P={prediction_length} 不一致",
            error_code=ErrorCode.WINDOW_ERROR,
        )

    labels = [_feature_label(name, task_kind) for name in feature_names]
    subject = f"{domain} flow" if task_kind == "regression" else f"{domain} counts"
    where = f"in a specific region of {city}" if (city and with_context) else "in a specific region"
    recorded = [f"the recorded {domain} {label}s are {render_list(history[:, f])}" for f, label in enumerate(labels)]
    if len(recorded) > 1:
        recorded_text = ", ".join(recorded[:-1]) + ", and " + recorded[-1]
    else:
        recorded_text = recorded[0]
    first = sample.window_start_step

    parts = [f"Given the historical data for {subject} over {h} time steps {where}, {recorded_text}."]
    if with_context:
        parts.append(f"The recording time of the historical data is {format_span(time, first, h)}.")
        parts.append(region_sentence(region))
        parts.append(
            f"We now aim to predict the {domain} {join_phrases(labels)} for the next {p} time steps "
            f"during the time period of {format_span(time, first + h, p)}."
        )
    else:
        parts.append(f"We now aim to predict the {domain} {join_phrases(labels)} for the next {p} time steps.")
    tokens = ST_START + ST_HIS * len(labels) + ST_END
    parts.append(
        f"To improve prediction accuracy, a spatio-temporal model is utilized to encode the historical "
        f"{domain} data as tokens {tokens}, where {_ordinal_phrase(len(labels))} to the representations "
        f"of {domain} {join_phrases(labels)}."
    )
    parts.append(
        "Please conduct an analysis of the traffic patterns in this region, taking into account the provided "
        "time and regional information, and then generate the predictions (the predictive tokens for regression)."
    )
    return " ".join(parts)


def build_target(
    sample: WindowSample,
    feature_names: Sequence[str],
    domain: str,
    task_kind: str = "regression",
    mode: str = MODE_TOKENS,
) -> str:
    """
    渲染目标文本

    token-regression: 每个特征一个 <ST_PRE>，数值不出现在文本中；
    text-numbers: 直接给出整数列表。
    """
    labels = [_feature_label(name, task_kind) for name in feature_names]
    if mode == MODE_TOKENS:
        slots = [ST_PRE] * len(labels)
    elif mode == MODE_TEXT:
        slots = [render_list(np.asarray(sample.target)[:, f]) for f in range(len(labels))]
    else:
        raise DataException(f"未知目标模式: {mode}")
    return f"{ANSWER_PREFIX} of {domain} {join_phrases(labels)} in this region are {join_phrases(slots)}."


def special_positions(prompt_text: str, target_text: str) -> Tuple[List[int], List[int]]:
    """计算 <ST_HIS> 与 <ST_PRE> 在完整序列（含开头 <BOS>）中的下标"""
    prompt_tokens = pretokenize(prompt_text)
    target_tokens = pretokenize(target_text)
    his = [1 + i for i, tok in enumerate(prompt_tokens) if tok == ST_HIS]
    pre = [1 + len(prompt_tokens) + j for j, tok in enumerate(target_tokens) if tok == ST_PRE]
    return his, pre


def build_record(
    sample: WindowSample,
    region: Optional[RegionMeta],
    time: TimeMeta,
    feature_names: Sequence[str],
    domain: str,
    city: str = "",
    task_kind: str = "regression",
    mode: str = MODE_TOKENS,
    with_context: bool = True,
    dataset: str = "",
    history_length: Optional[int] = None,
    prediction_length: Optional[int] = None,
) -> InstructionRecord:
    """组合提示词与目标文本，得到一条完整的指令记录"""
    prompt = build_instruction(
        sample, region, time, feature_names, domain, city=city, task_kind=task_kind,
        history_length=history_length, prediction_length=prediction_length, with_context=with_context,
    )
    target = build_target(sample, feature_names, domain, task_kind=task_kind, mode=mode)
    his, pre = special_positions(prompt, target)
    if prompt.count(ST_START) != 1 or prompt.count(ST_END) != 1 or len(his) != len(feature_names):
        raise DataException("提示词中的时空词元数量与特征数不一致", error_code=ErrorCode.DATA_ERROR)
    return InstructionRecord(
        prompt_text=prompt,
        st_his_positions=his,
        target_text=target,
        st_pre_positions=pre,
        ground_truth=np.asarray(sample.target, dtype=np.float64).tolist(),
        task_kind=task_kind,
        region_id=sample.region_id,
        window_start_step=sample.window_start_step,
        dataset=dataset or domain,
        feature_names=list(feature_names),
        history=np.asarray(sample.history, dtype=np.float64).tolist(),
        mode=mode,
    )


def build_corpus(
    tensor: SpatioTemporalTensor,
    region_ids: Sequence[int],
    time_range: Tuple[int, int],
    history_length: int,
    prediction_length: int,
    stride: int,
    mode: str = MODE_TOKENS,
    with_context: bool = True,
    max_records: Optional[int] = None,
    seed: int = 0,
    threads: int = 1,
) -> List[InstructionRecord]:
    """
    为一个数据集的一组区域构建全部指令记录

    超过 max_records 时按种子无放回抽样（保持原有顺序）。
    """
    windows = make_windows(tensor, history_length, prediction_length, stride,
                           time_range=time_range, region_ids=region_ids)
    if max_records is not None and len(windows) > max_records:
        keep = np.sort(np.random.default_rng(seed).choice(len(windows), size=max_records, replace=False))
        windows = [windows[i] for i in keep]

    def _render(window: WindowSample) -> InstructionRecord:
        return build_record(
            window, tensor.region(window.region_id), tensor.time, tensor.feature_names,
            domain=tensor.domain or tensor.name, city=tensor.regions[0].city if tensor.regions else "",
            task_kind=tensor.task_kind, mode=mode, with_context=with_context, dataset=tensor.name,
            history_length=history_length, prediction_length=prediction_length,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_render, windows))
    else:
        records = [_render(w) for w in windows]
    logger.info(f"📊 数据集 {tensor.name}: {len(region_ids)} 个区域, 时间段 {tuple(time_range)}, {len(records)} 条指令")
    return records


def build_split_corpus(
    corpus: Dict[str, SpatioTemporalTensor],
    split: DatasetSplit,
    which: str,
    history_length: int,
    prediction_length: int,
    stride: int,
    mode: str = MODE_TOKENS,
    with_context: bool = True,
    max_records: Optional[int] = None,
    seed: int = 0,
    threads: int = 1,
) -> List[InstructionRecord]:
    """
    按切分构建多数据集语料

    which: "train"（训练区域 × 训练时间段）、"supervised"（训练区域 × 测试时间段）、
    "zero-shot"（零样本区域 × 测试时间段）、"all"（全部区域 × 测试时间段）
    """
    records: List[InstructionRecord] = []
    for index, (name, tensor) in enumerate(corpus.items()):
        if which == "train":
            regions, time_range = split.train_region_ids, split.train_time_range
        elif which == "supervised":
            regions, time_range = split.train_region_ids, split.test_time_range
        elif which == "zero-shot":
            regions, time_range = split.zero_shot_region_ids, split.test_time_range
        elif which == "all":
            regions, time_range = tensor.region_ids, split.test_time_range
        else:
            raise DataException(f"未知语料类别: {which}", error_code=ErrorCode.SPLIT_ERROR)
        records.extend(build_corpus(
            tensor, regions, time_range, history_length, prediction_length, stride,
            mode=mode, with_context=with_context, max_records=max_records,
            seed=seed + index, threads=threads,
        ))
    return records


# ==================== 数值解析与回填 ====================

def parse_prediction_lists(text: str) -> List[List[int]]:
    """解析文本中的方括号整数列表，格式不正确的列表跳过"""
    lists = []
    for body in _LIST_PATTERN.findall(text):
        items = body.split()
        try:
            lists.append([int(x) for x in items])
        except ValueError:
            continue
    return lists


def render_answer(answer_text: str, predictions: Sequence[Sequence[float]]) -> str:
    """把每个 <ST_PRE> 替换为 '<ST_PRE> [数值列表]'"""
    pieces = answer_text.split(ST_PRE)
    out = [pieces[0]]
    for i, piece in enumerate(pieces[1:]):
        filled = f"{ST_PRE} {render_list(predictions[i])}" if i < len(predictions) else ST_PRE
        out.append(filled + piece)
    return "".join(out)


# ==================== .stjsonl 读写 ====================

def save_corpus(records: Sequence[InstructionRecord], path: Union[str, Path]) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write("\n")
    logger.info(f"✅ 指令语料已保存: {out} ({len(records)} 条)")


def load_corpus(path: Union[str, Path]) -> List[InstructionRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(InstructionRecord.model_validate_json(line))
                except ValidationError as e:
                    raise DataException(f"第 {line_number} 行指令记录格式错误: {e}", cause=e,
                                        details={"line_number": line_number})
    except OSError as e:
        raise DataException(f"指令语料读取失败: {path}", cause=e)
    return records


def group_by_dataset(records: Sequence[InstructionRecord]) -> Dict[str, List[InstructionRecord]]:
    groups: Dict[str, List[InstructionRecord]] = {}
    for record in records:
        groups.setdefault(record.dataset, []).append(record)
    return groups

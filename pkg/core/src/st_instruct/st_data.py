"""
时空数据模块

这个模块负责时空张量 X (R×T×F) 的全部数据处理，包括：
1. 领域类型：RegionMeta / TimeMeta / SpatioTemporalTensor / WindowSample / DatasetSplit
2. 出行记录 CSV 的网格聚合（流入 = 下车计数，流出 = 上车计数）
3. 带种子的合成语料生成（稠密计数 + 稀疏事件）
4. 滑动窗口切分与区域切分
5. .stt 张量文件读写、POI 旁路文件读取

网格约定：从包围盒西南角按行优先编号，单元为左闭右开区间。
越界记录只计数跳过，不报错。

作者：ST-Instruct
版本：0.1.0
"""

import hashlib
import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dateutil import parser as date_parser
from pydantic import BaseModel, Field, ValidationError, field_validator

from .config import DataConfig, SynthPattern
from .exceptions import ConfigurationException, CSVFormatException, DataException, ErrorCode, RegionSplitException

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

TRIP_COLUMNS = ["timestamp", "pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon"]
TENSOR_MAGIC = b"STT1"
KM_PER_DEGREE = 111.32

NYC_BOROUGHS = ["Manhattan", "Brooklyn", "Queens", "Bronx", "Staten Island"]
CHICAGO_DISTRICTS = ["Loop", "Near North Side", "Lincoln Park", "Hyde Park", "Pilsen", "Uptown"]
POI_CATEGORIES = [
    "Education Facility",
    "Cultural Facility",
    "Commercial",
    "Transportation Facility",
    "Residential",
    "Medical Facility",
    "Recreational Facility",
    "Government Facility",
]


def parse_utc(value: Union[str, datetime]) -> datetime:
    """ISO-8601 时间解析为带时区的 UTC 时间，无时区按 UTC 处理"""
    if isinstance(value, datetime):
        dt = value
    else:
        try:
            dt = date_parser.isoparse(str(value))
        except (ValueError, OverflowError) as e:
            raise DataException(f"无法解析时间戳: {value}", cause=e)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


# ==================== 元数据模型 ====================

class RegionMeta(BaseModel):
    """区域元数据：城市、行政区与周边 POI 类别"""

    region_id: int = Field(..., ge=0, description="数据集内唯一的区域编号")
    city: str = Field("", description="城市名称")
    borough: str = Field("", description="所属行政区")
    cell: Tuple[int, int] = Field((0, 0), description="网格坐标 (row, col)")
    poi_categories: List[str] = Field(default_factory=list, description="一公里内 POI 类别")

    @property
    def has_description(self) -> bool:
        return bool(self.borough) or bool(self.poi_categories)


class TimeMeta(BaseModel):
    """时间元数据：第 t 步对应 start + t·interval"""

    start: datetime = Field(..., description="UTC 起始时间")
    interval_minutes: int = Field(..., gt=0, description="采样间隔（分钟）")
    steps: int = Field(..., ge=0, description="时间步数 T")

    @field_validator("start", mode="before")
    @classmethod
    def validate_start(cls, v):
        return parse_utc(v)

    def timestamp(self, step: int) -> datetime:
        return self.start + timedelta(minutes=self.interval_minutes * step)

    def step_of(self, moment: datetime) -> int:
        delta = parse_utc(moment) - self.start
        return math.floor(delta.total_seconds() / (60 * self.interval_minutes))


class GridConfig(BaseModel):
    """网格配置（对应 grid JSON 文件）"""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_km: float
    interval_minutes: int = Field(30, gt=0)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "GridConfig":
        grid_path = Path(path)
        if not grid_path.exists():
            raise ConfigurationException(f"网格配置文件不存在: {path}", error_code=ErrorCode.CONFIG_FILE_ERROR)
        try:
            with open(grid_path, "r", encoding="utf-8") as f:
                return cls(**json.load(f))
        except (ValueError, TypeError, ValidationError) as e:
            raise ConfigurationException(f"网格配置文件格式错误: {e}", error_code=ErrorCode.CONFIG_FILE_ERROR, cause=e)

    @property
    def lat_step(self) -> float:
        return self.cell_km / KM_PER_DEGREE

    @property
    def lon_step(self) -> float:
        mid = math.radians((self.lat_min + self.lat_max) / 2.0)
        return self.cell_km / (KM_PER_DEGREE * max(math.cos(mid), 1e-6))

    def shape(self) -> Tuple[int, int]:
        """返回 (行数, 列数)，包围盒退化或单元尺寸非正时报错"""
        if self.cell_km <= 0:
            raise DataException(f"网格单元尺寸必须为正: {self.cell_km}", error_code=ErrorCode.GRID_ERROR)
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise DataException("包围盒退化，网格单元数为 0", error_code=ErrorCode.GRID_ERROR)
        rows = math.ceil((self.lat_max - self.lat_min) / self.lat_step)
        cols = math.ceil((self.lon_max - self.lon_min) / self.lon_step)
        if rows * cols == 0:
            raise DataException("网格单元数为 0", error_code=ErrorCode.GRID_ERROR)
        return rows, cols

    def locate(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        """坐标映射到行优先区域编号，包围盒外返回 -1"""
        rows, cols = self.shape()
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = (lat >= self.lat_min) & (lat < self.lat_max) & (lon >= self.lon_min) & (lon < self.lon_max)
        r = np.floor((lat - self.lat_min) / self.lat_step).astype(np.int64)
        c = np.floor((lon - self.lon_min) / self.lon_step).astype(np.int64)
        inside &= (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        return np.where(inside, r * cols + c, -1)


# ==================== 张量与样本 ====================

@dataclass
class SpatioTemporalTensor:
    """
    时空张量 X

    Attributes:
        values: (R, T, F) 计数数组
        regions: 长度为 R 的区域元数据
        time: 时间元数据
        feature_names: 长度为 F 的特征名
        name: 数据集名称（taxi / bike / crime ...）
        domain: 提示词中使用的领域名称
        task_kind: regression | classification
        attrs: 附加统计信息（如摄取时跳过的记录数）
    """

    values: np.ndarray
    regions: List[RegionMeta]
    time: TimeMeta
    feature_names: List[str]
    name: str = ""
    domain: str = ""
    task_kind: str = "regression"
    attrs: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DataException(f"时空张量必须是三维 (R,T,F)，实际 {self.values.shape}")
        num_regions, steps, features = self.values.shape
        if len(self.regions) != num_regions:
            raise DataException(f"区域元数据数量 {len(self.regions)} 与 R={num_regions} 不一致")
        if len(self.feature_names) != features:
            raise DataException(f"特征名数量 {len(self.feature_names)} 与 F={features} 不一致")
        if self.time.steps != steps:
            raise DataException(f"时间步数 {self.time.steps} 与 T={steps} 不一致")
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise DataException("区域编号重复")
        if np.any(self.values < 0):
            raise DataException("计数数据不能为负")

    @property
    def num_regions(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    @property
    def num_features(self) -> int:
        return self.values.shape[2]

    @property
    def region_ids(self) -> List[int]:
        return [r.region_id for r in self.regions]

    def region_index(self, region_id: int) -> int:
        for i, region in enumerate(self.regions):
            if region.region_id == region_id:
                return i
        raise DataException(f"区域 {region_id} 不存在于数据集 {self.name}")

    def region(self, region_id: int) -> RegionMeta:
        return self.regions[self.region_index(region_id)]


@dataclass
class WindowSample:
    """单个区域的一个预测窗口：history (H,F) 紧接 target (P,F)"""

    history: np.ndarray
    target: np.ndarray
    region_id: int
    window_start_step: int


class DatasetSplit(BaseModel):
    """区域切分与时间段切分"""

    train_region_ids: List[int]
    zero_shot_region_ids: List[int]
    train_time_range: Tuple[int, int]
    test_time_range: Tuple[int, int]
    seed: Optional[int] = None

    def check_disjoint(self) -> None:
        overlap = sorted(set(self.train_region_ids) & set(self.zero_shot_region_ids))
        if overlap:
            raise RegionSplitException(
                f"训练区域与零样本区域重叠: {overlap[:10]}",
                error_code=ErrorCode.REGION_OVERLAP,
                details={"overlap": overlap},
            )

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetSplit":
        try:
            return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, ValidationError) as e:
            raise DataException(f"切分文件读取失败: {path}", error_code=ErrorCode.SPLIT_ERROR, cause=e)


def binarize(values: np.ndarray) -> np.ndarray:
    """稀疏事件标签：count > 0"""
    return (np.asarray(values) > 0).astype(np.float32)


def instance_scale(history: np.ndarray, floor: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    按窗口自身的均值/标准差做实例标准化

    Args:
        history: (..., H, F)
        floor: 标准差下限

    Returns:
        (scaled, mean, std)，mean/std 形状为 (..., 1, F)
    """
    mean = history.mean(axis=-2, keepdims=True)
    std = np.maximum(history.std(axis=-2, keepdims=True), floor)
    return (history - mean) / std, mean, std


# ==================== 出行记录摄取 ====================

_PANDAS_LINE = re.compile(r"line (\d+)")


def _iter_trip_chunks(source, chunk_size: int):
    """按块产出 (起始行号, DataFrame)；行号从 1 开始且计入表头"""
    if isinstance(source, (str, Path)):
        try:
            reader = pd.read_csv(source, dtype=str, keep_default_na=False, chunksize=chunk_size)
            first_line = 2
            for chunk in reader:
                missing = [c for c in TRIP_COLUMNS if c not in chunk.columns]
                if missing:
                    raise CSVFormatException(f"缺少列 {missing}", line_number=1)
                yield first_line, chunk
                first_line += len(chunk)
        except pd.errors.EmptyDataError:
            return
        except pd.errors.ParserError as e:
            match = _PANDAS_LINE.search(str(e))
            raise CSVFormatException(str(e), line_number=int(match.group(1)) if match else 0, cause=e)
        return

    buffer: List[Mapping[str, Any]] = []
    first_line = 1
    for record in source:
        buffer.append(record)
        if len(buffer) >= chunk_size:
            yield first_line, pd.DataFrame(buffer, columns=TRIP_COLUMNS)
            first_line += len(buffer)
            buffer = []
    if buffer:
        yield first_line, pd.DataFrame(buffer, columns=TRIP_COLUMNS)


def _parse_chunk(chunk: pd.DataFrame, first_line: int) -> pd.DataFrame:
    parsed = pd.DataFrame(index=chunk.index)
    parsed["timestamp"] = pd.to_datetime(chunk["timestamp"], utc=True, errors="coerce", format="ISO8601")
    for column in TRIP_COLUMNS[1:]:
        parsed[column] = pd.to_numeric(chunk[column], errors="coerce")
    bad = parsed.isna().any(axis=1).to_numpy()
    if bad.any():
        offset = int(np.argmax(bad))
        raise CSVFormatException(
            f"无法解析的记录: {chunk.iloc[offset].to_dict()}", line_number=first_line + offset
        )
    return parsed


def ingest_trips(
    source: Union[str, Path, Iterable[Mapping[str, Any]]],
    grid: GridConfig,
    time: TimeMeta,
    city: str = "",
    name: str = "trips",
    chunk_size: int = 100_000,
) -> SpatioTemporalTensor:
    """
    把出行记录聚合为 R×T×2 张量（特征 0 = 流入，特征 1 = 流出）

    Args:
        source: CSV 路径，或由 TRIP_COLUMNS 字段组成的记录流
        grid: 网格配置
        time: 时间元数据（决定 T 与起点）
        city: 城市名称
        name: 数据集名称
        chunk_size: 分块大小

    Returns:
        SpatioTemporalTensor: attrs 中记录跳过的上车/下车事件数
    """
    rows, cols = grid.shape()
    num_regions = rows * cols
    logger.info(f"🔄 开始聚合出行记录: {rows}×{cols} 网格, T={time.steps}")

    counts = np.zeros((num_regions, time.steps, 2), dtype=np.int64)
    skipped = {"pickup": 0, "dropoff": 0}
    total_records = 0
    interval_seconds = 60.0 * time.interval_minutes
    origin = pd.Timestamp(time.start)

    for first_line, chunk in _iter_trip_chunks(source, chunk_size):
        parsed = _parse_chunk(chunk, first_line)
        total_records += len(parsed)
        offset_seconds = (parsed["timestamp"] - origin).dt.total_seconds().to_numpy()
        step = np.floor(offset_seconds / interval_seconds).astype(np.int64)
        in_time = (step >= 0) & (step < time.steps)

        for feature, (kind, lat_col, lon_col) in enumerate(
            [("dropoff", "dropoff_lat", "dropoff_lon"), ("pickup", "pickup_lat", "pickup_lon")]
        ):
            region = grid.locate(parsed[lat_col].to_numpy(), parsed[lon_col].to_numpy())
            keep = in_time & (region >= 0)
            skipped[kind] += int((~keep).sum())
            np.add.at(counts, (region[keep], step[keep], feature), 1)

    if skipped["pickup"] or skipped["dropoff"]:
        logger.warning(
            f"⚠️ 跳过越界记录: 上车 {skipped['pickup']} 条, 下车 {skipped['dropoff']} 条 (共 {total_records} 条)"
        )

    regions = [
        RegionMeta(region_id=r * cols + c, city=city, cell=(r, c))
        for r in range(rows)
        for c in range(cols)
    ]
    tensor = SpatioTemporalTensor(
        values=counts.astype(np.float32),
        regions=regions,
        time=time,
        feature_names=["inflow", "outflow"],
        name=name,
        domain=name,
        attrs={"records": total_records, "skipped_pickups": skipped["pickup"], "skipped_dropoffs": skipped["dropoff"]},
    )
    logger.info(f"✅ 出行记录聚合完成: {total_records} 条记录, 张量形状 {tensor.values.shape}")
    return tensor


def load_poi_sidecar(path: Union[str, Path]) -> Dict[Tuple[int, int], Dict[str, Any]]:
    """
    读取静态 POI 旁路文件

    格式: {"<row>,<col>": {"borough": ..., "poi_categories": [...]}}
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise DataException(f"POI 文件读取失败: {path}", cause=e)
    sidecar = {}
    for key, entry in raw.items():
        if str(key).startswith("_"):
            continue
        try:
            row, col = (int(x) for x in str(key).split(","))
        except ValueError:
            raise DataException(f"POI 文件键格式错误: {key}，应为 'row,col'")
        sidecar[(row, col)] = {
            "borough": str(entry.get("borough", "")),
            "poi_categories": [str(c) for c in entry.get("poi_categories", [])],
        }
    return sidecar


def attach_poi(tensor: SpatioTemporalTensor, sidecar: Mapping[Tuple[int, int], Mapping[str, Any]]) -> None:
    """把 POI 信息写入区域元数据"""
    matched = 0
    for i, region in enumerate(tensor.regions):
        entry = sidecar.get(tuple(region.cell))
        if entry:
            tensor.regions[i] = region.model_copy(update=dict(entry))
            matched += 1
    logger.info(f"📊 POI 信息匹配 {matched}/{tensor.num_regions} 个区域")


# ==================== 合成数据 ====================

def _synthetic_regions(rng: np.random.Generator, count: int, city: str, districts: Sequence[str]) -> List[RegionMeta]:
    cols = max(1, math.ceil(math.sqrt(count)))
    regions = []
    for region_id in range(count):
        if rng.random() < 0.1:
            borough, pois = "", []
        else:
            borough = str(districts[int(rng.integers(len(districts)))])
            n_pois = int(rng.integers(2, 5))
            pois = [str(p) for p in rng.choice(POI_CATEGORIES, size=n_pois, replace=False)]
        regions.append(RegionMeta(
            region_id=region_id, city=city, borough=borough,
            cell=(region_id // cols, region_id % cols), poi_categories=pois,
        ))
    return regions


def synth_generate(
    seed: int,
    num_regions: int,
    days: int,
    pattern: SynthPattern,
    interval_minutes: int = 30,
    start: Union[str, datetime] = "2020-01-06T00:00:00Z",
    city: str = "",
    regions: Optional[List[RegionMeta]] = None,
    name: str = "",
    phase_offset: float = 0.0,
) -> SpatioTemporalTensor:
    """
    生成带种子的合成时空张量

    稠密数据: max(0, base + s_r·(daily·sin(2πt/steps_per_day + φ_r + φ_f) + weekly·sin(2πt/(7·steps_per_day) + φ_r)) + noise)，
    四舍五入为计数。稀疏数据把同一强度作为泊松率采样，得到以 0/1 为主的罕见事件计数。

    Args:
        seed: 随机种子
        num_regions: 区域数 R
        days: 天数
        pattern: 生成模式
        interval_minutes: 采样间隔
        start: 起始时间
        city: 城市名称
        regions: 外部提供的区域元数据（缺省时按种子生成）
        name: 数据集名称
        phase_offset: 全局相位偏移（用于生成另一座城市）
    """
    if num_regions < 1 or days < 1 or interval_minutes <= 0:
        raise DataException(f"合成参数无效: R={num_regions}, days={days}, interval={interval_minutes}")
    steps_per_day = (24 * 60) // interval_minutes
    steps = days * steps_per_day
    num_features = len(pattern.feature_names)
    rng = np.random.default_rng(seed)

    if regions is None:
        regions = _synthetic_regions(rng, num_regions, city, NYC_BOROUGHS)
    phases = rng.uniform(-0.5, 0.5, size=num_regions) * pattern.phase_spread + phase_offset
    scales = np.clip(1.0 + rng.uniform(-1.0, 1.0, size=num_regions) * pattern.region_scale_spread, 0.0, None)

    t = np.arange(steps, dtype=np.float64)
    feature_shift = 0.5 * np.arange(num_features, dtype=np.float64)
    daily = np.sin(2.0 * np.pi * t[None, :, None] / steps_per_day + phases[:, None, None] + feature_shift[None, None, :])
    weekly = np.sin(2.0 * np.pi * t[None, :, None] / (7 * steps_per_day) + phases[:, None, None])
    signal = pattern.base_rate + scales[:, None, None] * (
        pattern.daily_amplitude * daily + pattern.weekly_amplitude * weekly
    )
    signal = np.broadcast_to(signal, (num_regions, steps, num_features))

    if pattern.sparsity:
        values = rng.poisson(np.maximum(signal, 0.0)).astype(np.float64)
    else:
        noise = rng.normal(0.0, pattern.noise_scale, size=signal.shape) if pattern.noise_scale > 0 else 0.0
        values = np.rint(np.maximum(signal + noise, 0.0))

    return SpatioTemporalTensor(
        values=values.astype(np.float32),
        regions=list(regions),
        time=TimeMeta(start=start, interval_minutes=interval_minutes, steps=steps),
        feature_names=list(pattern.feature_names),
        name=name or pattern.domain,
        domain=pattern.domain,
        task_kind=pattern.task_kind,
        attrs={"seed": seed, "synthetic": True},
    )


def build_synthetic_corpus(config: DataConfig) -> Dict[str, SpatioTemporalTensor]:
    """
    生成默认多数据集语料（同一城市、同一批区域）

    Returns:
        Dict[str, SpatioTemporalTensor]: 数据集名 → 张量（顺序同 config.datasets）
    """
    logger.info(f"🔧 生成合成语料: {config.datasets}, R={config.regions}, {config.days} 天")
    regions = _synthetic_regions(np.random.default_rng(config.seed), config.regions, config.city, NYC_BOROUGHS)
    corpus = {}
    for index, name in enumerate(config.datasets):
        corpus[name] = synth_generate(
            seed=config.seed + 1000 * (index + 1),
            num_regions=config.regions,
            days=config.days,
            pattern=config.patterns[name],
            interval_minutes=config.interval_minutes,
            start=config.start,
            city=config.city,
            regions=regions,
            name=name,
        )
    logger.info("✅ 合成语料生成完成")
    return corpus


def build_cross_city(config: DataConfig) -> Dict[str, SpatioTemporalTensor]:
    """生成第二座城市（不同相位与强度）的同类数据集，用于跨城市协议"""
    logger.info(f"🔧 生成跨城市语料: {config.cross_city}, R={config.cross_city_regions}")
    rng = np.random.default_rng(config.cross_city_seed)
    regions = _synthetic_regions(rng, config.cross_city_regions, config.cross_city, CHICAGO_DISTRICTS)
    corpus = {}
    for index, name in enumerate(config.datasets):
        base = config.patterns[name]
        pattern = base.model_copy(update={
            "base_rate": base.base_rate * 0.8,
            "daily_amplitude": base.daily_amplitude * 1.2,
            "phase_spread": base.phase_spread + 0.5,
        })
        corpus[name] = synth_generate(
            seed=config.cross_city_seed + 1000 * (index + 1),
            num_regions=config.cross_city_regions,
            days=config.days,
            pattern=pattern,
            interval_minutes=config.interval_minutes,
            start=config.start,
            city=config.cross_city,
            regions=regions,
            name=name,
            phase_offset=0.7,
        )
    return corpus


# ==================== 窗口与切分 ====================

def make_windows(
    tensor: SpatioTemporalTensor,
    history_length: int,
    prediction_length: int,
    stride: int,
    time_range: Optional[Tuple[int, int]] = None,
    region_ids: Optional[Sequence[int]] = None,
) -> List[WindowSample]:
    """
    滑动窗口切分

    每个区域的窗口起点为 lo, lo+stride, ...，满足 start+H+P ≤ hi；
    窗口数 = floor((hi−lo−H−P)/stride)+1。结果按区域、再按起点排序。
    """
    if stride < 1:
        raise DataException(f"步长必须为正: {stride}", error_code=ErrorCode.WINDOW_ERROR)
    lo, hi = time_range if time_range is not None else (0, tensor.num_steps)
    lo, hi = max(0, lo), min(tensor.num_steps, hi)
    span = history_length + prediction_length
    if hi - lo < span:
        raise DataException(
            f"时间长度 {hi - lo} 小于 H+P={span}",
            error_code=ErrorCode.WINDOW_ERROR,
            details={"time_range": [lo, hi], "H": history_length, "P": prediction_length},
        )

    ids = tensor.region_ids if region_ids is None else list(region_ids)
    windows = []
    for region_id in ids:
        series = tensor.values[tensor.region_index(region_id)]
        for start in range(lo, hi - span + 1, stride):
            windows.append(WindowSample(
                history=series[start:start + history_length].copy(),
                target=series[start + history_length:start + span].copy(),
                region_id=region_id,
                window_start_step=start,
            ))
    return windows


def split_regions(
    tensor: SpatioTemporalTensor,
    seed: int,
    n_train: int,
    n_zero_shot: int,
    train_time_range: Optional[Tuple[int, int]] = None,
    test_time_range: Optional[Tuple[int, int]] = None,
) -> DatasetSplit:
    """带种子的区域切分：训练区域与零样本区域不相交"""
    if n_train < 0 or n_zero_shot < 0 or n_train + n_zero_shot > tensor.num_regions:
        raise RegionSplitException(
            f"区域不足: 需要 {n_train}+{n_zero_shot}，只有 {tensor.num_regions}",
            details={"regions": tensor.num_regions, "n_train": n_train, "n_zero_shot": n_zero_shot},
        )
    order = np.random.default_rng(seed).permutation(np.asarray(tensor.region_ids))
    split = DatasetSplit(
        train_region_ids=sorted(int(x) for x in order[:n_train]),
        zero_shot_region_ids=sorted(int(x) for x in order[n_train:n_train + n_zero_shot]),
        train_time_range=train_time_range or (0, tensor.num_steps),
        test_time_range=test_time_range or (0, tensor.num_steps),
        seed=seed,
    )
    split.check_disjoint()
    logger.info(f"📊 区域切分: 训练 {n_train} 个, 零样本 {n_zero_shot} 个, 指纹 {split.fingerprint()[:12]}")
    return split


def default_split(tensor: SpatioTemporalTensor, config: DataConfig) -> DatasetSplit:
    """按数据配置切分：前 train_days 天为训练时间段，其余为测试时间段"""
    boundary = min(config.train_days * config.steps_per_day, tensor.num_steps)
    return split_regions(
        tensor,
        seed=config.split_seed,
        n_train=config.n_train_regions,
        n_zero_shot=config.n_zero_shot_regions,
        train_time_range=(0, boundary),
        test_time_range=(boundary, tensor.num_steps),
    )


def cross_city_split(tensor: SpatioTemporalTensor, config: DataConfig) -> DatasetSplit:
    """第二座城市的全部区域都视为零样本区域，时间段划分与训练城市相同"""
    boundary = min(config.train_days * config.steps_per_day, tensor.num_steps)
    return DatasetSplit(
        train_region_ids=[],
        zero_shot_region_ids=sorted(tensor.region_ids),
        train_time_range=(0, boundary),
        test_time_range=(boundary, tensor.num_steps),
        seed=config.cross_city_seed,
    )


# ==================== .stt 文件 ====================

def save_tensor(tensor: SpatioTemporalTensor, path: Union[str, Path]) -> None:
    """写出 .stt 文件：magic + u32 头长度 + JSON 头 + float32 小端数据"""
    header = {
        "shape": list(tensor.values.shape),
        "feature_names": tensor.feature_names,
        "regions": [r.model_dump(mode="json") for r in tensor.regions],
        "time": tensor.time.model_dump(mode="json"),
        "name": tensor.name,
        "domain": tensor.domain,
        "task_kind": tensor.task_kind,
        "attrs": tensor.attrs,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(tensor.values, dtype="<f4").tobytes()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    logger.info(f"✅ 张量已保存: {out} {tensor.values.shape}")


def load_tensor(path: Union[str, Path]) -> SpatioTemporalTensor:
    """读取 .stt 文件"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataException(f"张量文件读取失败: {path}", error_code=ErrorCode.TENSOR_FILE_ERROR, cause=e)
    if blob[:4] != TENSOR_MAGIC or len(blob) < 8:
        raise DataException(f"不是有效的 .stt 文件: {path}", error_code=ErrorCode.TENSOR_FILE_ERROR)
    (header_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise DataException(f"张量文件头损坏: {path}", error_code=ErrorCode.TENSOR_FILE_ERROR, cause=e)

    shape = tuple(header["shape"])
    payload = blob[8 + header_len:]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataException(
            f"张量数据长度 {len(payload)} 与形状 {shape} 不符（期望 {expected}）",
            error_code=ErrorCode.TENSOR_FILE_ERROR,
        )
    return SpatioTemporalTensor(
        values=np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32),
        regions=[RegionMeta(**r) for r in header["regions"]],
        time=TimeMeta(**header["time"]),
        feature_names=list(header["feature_names"]),
        name=header.get("name", ""),
        domain=header.get("domain", ""),
        task_kind=header.get("task_kind", "regression"),
        attrs=header.get("attrs", {}),
    )


def save_corpus_tensors(corpus: Mapping[str, SpatioTemporalTensor], out_dir: Union[str, Path]) -> List[Path]:
    """每个数据集写一个 <name>.stt"""
    paths = []
    for name, tensor in corpus.items():
        path = Path(out_dir) / f"{name}.stt"
        save_tensor(tensor, path)
        paths.append(path)
    return paths

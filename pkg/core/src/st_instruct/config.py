"""
配置管理模块

这个模块提供了系统的统一配置管理，包括：
1. 数据配置（合成语料、窗口长度、区域切分）
2. 时空编码器配置
3. 语言模型配置
4. 训练配置
5. 评估配置
6. 运行时环境变量配置

设计原则：
- 单一职责：每个配置类只负责一个模块的配置
- 严格解析：未知字段直接拒绝
- 优先级：命令行参数 > 配置文件 > 内置默认值
- 可复现：配置指纹写入清单与报告

作者：ST-Instruct
版本：0.1.0
"""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import json5
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigurationException, ErrorCode

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("FULL", "STC_OFF", "MULTI_OFF", "STE_OFF", "T2P")
PROTOCOLS = ("zero-shot", "cross-city", "supervised")


class StrictModel(BaseModel):
    """所有配置块的基类：未知字段直接拒绝"""

    model_config = ConfigDict(extra="forbid")


class SynthPattern(StrictModel):
    """
    合成数据生成模式

    对应一个"数据集"（如 taxi / bike / crime）的生成参数。
    """

    base_rate: float = Field(default=20.0, ge=0.0, description="基础计数率")
    daily_amplitude: float = Field(default=10.0, ge=0.0, description="日周期振幅")
    weekly_amplitude: float = Field(default=3.0, ge=0.0, description="周周期振幅")
    phase_spread: float = Field(default=1.0, ge=0.0, description="各区域相位散布（弧度）")
    region_scale_spread: float = Field(default=0.5, ge=0.0, description="各区域强度的相对散布")
    noise_scale: float = Field(default=2.0, ge=0.0, description="噪声标准差")
    sparsity: bool = Field(default=False, description="稀有事件（犯罪类）数据")
    feature_names: List[str] = Field(default_factory=lambda: ["inflow", "outflow"])
    task_kind: str = Field(default="regression", description="regression | classification")
    domain: str = Field(default="taxi", description="提示词中使用的领域名称")

    @field_validator("task_kind")
    @classmethod
    def validate_task_kind(cls, v):
        if v not in ("regression", "classification"):
            raise ValueError("task_kind 必须是 regression 或 classification")
        return v


def default_patterns() -> Dict[str, SynthPattern]:
    """默认三套合成数据：两套稠密计数，一套稀疏分类"""
    return {
        "taxi": SynthPattern(base_rate=40.0, daily_amplitude=25.0, weekly_amplitude=6.0,
                             noise_scale=4.0, domain="taxi"),
        "bike": SynthPattern(base_rate=15.0, daily_amplitude=10.0, weekly_amplitude=3.0,
                             phase_spread=1.5, noise_scale=2.0, domain="bike"),
        "crime": SynthPattern(base_rate=0.3, daily_amplitude=0.25, weekly_amplitude=0.05,
                              noise_scale=0.0, sparsity=True, domain="crime",
                              feature_names=["burglary", "robbery"], task_kind="classification"),
    }


class DataConfig(StrictModel):
    """数据与切分配置"""

    regions: int = Field(default=40, ge=1, description="每个数据集的区域数 R")
    days: int = Field(default=14, ge=1, description="天数")
    interval_minutes: int = Field(default=30, gt=0, description="采样间隔（分钟）")
    start: str = Field(default="2020-01-06T00:00:00Z", description="UTC 起始时间")
    city: str = Field(default="New York City", description="城市名称")
    seed: int = Field(default=7, description="合成数据随机种子")
    patterns: Dict[str, SynthPattern] = Field(default_factory=default_patterns)
    datasets: List[str] = Field(default_factory=lambda: ["taxi", "bike", "crime"])

    history_length: int = Field(default=12, ge=1, description="历史长度 H")
    prediction_length: int = Field(default=12, ge=1, description="预测长度 P")
    train_stride: int = Field(default=24, ge=1, description="训练窗口步长")
    eval_stride: int = Field(default=24, ge=1, description="评估窗口步长")
    train_days: int = Field(default=10, ge=1, description="训练时间段天数，其余为测试时间段")

    n_train_regions: int = Field(default=20, ge=0)
    n_zero_shot_regions: int = Field(default=20, ge=0)
    split_seed: int = Field(default=11)
    max_train_records_per_dataset: Optional[int] = Field(default=64, ge=1)
    max_eval_records_per_dataset: Optional[int] = Field(default=48, ge=1)

    cross_city: str = Field(default="Chicago")
    cross_city_regions: int = Field(default=30, ge=4)
    cross_city_seed: int = Field(default=101)

    @model_validator(mode="after")
    def validate_datasets(self):
        missing = [name for name in self.datasets if name not in self.patterns]
        if missing:
            raise ValueError(f"数据集没有对应的生成模式: {missing}")
        return self

    @property
    def steps_per_day(self) -> int:
        return (24 * 60) // self.interval_minutes


class EncoderConfig(StrictModel):
    """
    时空编码器配置

    n_layers=L, gate_kernel=T_g, injection_kernel=T_S（None 表示覆盖剩余全部时间轴）。
    """

    n_layers: int = Field(default=2, ge=1)
    gate_kernel: int = Field(default=3, ge=1)
    injection_kernel: Optional[int] = Field(default=None, ge=1)
    dilation: List[int] = Field(default_factory=lambda: [1, 1])
    d_in: int = Field(default=32, ge=1)
    d_out: int = Field(default=32, ge=1)
    d_out_prime: int = Field(default=32, ge=1)
    d: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def validate_dilation(self):
        if len(self.dilation) != self.n_layers:
            raise ValueError(f"dilation 长度 {len(self.dilation)} 与层数 {self.n_layers} 不一致")
        if any(x < 1 for x in self.dilation):
            raise ValueError("dilation 必须为正整数")
        return self

    @property
    def receptive_field(self) -> int:
        """整个卷积栈的感受野"""
        return 1 + sum(dil * (self.gate_kernel - 1) for dil in self.dilation)


class LMConfig(StrictModel):
    """小型解码器语言模型配置（d_model 即 d_L）"""

    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_model: int = Field(default=128, ge=1)
    context_length: int = Field(default=1024, ge=8)
    vocab_size: Optional[int] = Field(default=None, description="由分词器决定")
    regression_hidden: int = Field(default=128, ge=1, description="回归层隐藏宽度 d'")

    @model_validator(mode="after")
    def validate_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        return self


class TrainConfig(StrictModel):
    """训练配置"""

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    betas: Tuple[float, float] = Field(default=(0.9, 0.999))
    weight_decay: float = Field(default=0.0, ge=0.0)
    eps: float = Field(default=1e-8, gt=0.0)
    seed: Optional[int] = Field(default=None, description="训练必须显式给出")
    mix_weights: Dict[str, float] = Field(default_factory=dict, description="数据集轮转权重，缺省为 1")
    checkpoint_every: int = Field(default=0, ge=0, description="每 N 步保存一次，0 表示只在结束时保存")
    grad_clip_norm: Optional[float] = Field(default=None, gt=0.0)
    regression_loss_on_classification: bool = Field(default=False)
    pretrain_encoder_epochs: int = Field(default=0, ge=0)
    variant: str = Field(default="FULL")

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, v):
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"未知消融变体: {v}，可选 {ABLATION_VARIANTS}")
        return v


class EvalConfig(StrictModel):
    """评估配置"""

    seed: Optional[int] = Field(default=None, description="评估必须显式给出")
    protocols: List[str] = Field(default_factory=lambda: ["zero-shot", "supervised"])
    baselines: bool = Field(default=True)
    max_new_tokens: int = Field(default=48, ge=0)
    threads: int = Field(default=1, ge=1)
    bucket_feature: int = Field(default=0, ge=0)

    @field_validator("protocols")
    @classmethod
    def validate_protocols(cls, v):
        unknown = [p for p in v if p not in PROTOCOLS]
        if unknown:
            raise ValueError(f"未知评估协议: {unknown}")
        return v


class RunConfig(StrictModel):
    """
    运行总配置

    整合 data / encoder / lm / train / eval 五个配置块。
    """

    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    lm: LMConfig = Field(default_factory=LMConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def validate_receptive_field(self):
        if self.encoder.receptive_field > self.data.history_length:
            raise ValueError(
                f"编码器感受野 {self.encoder.receptive_field} 超过历史长度 {self.data.history_length}"
            )
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(**cls._filter_comments(data))
        except ValidationError as e:
            raise ConfigurationException(f"配置校验失败: {e}", cause=e)

    @classmethod
    def from_file(cls, config_path: str) -> "RunConfig":
        """
        从配置文件创建配置实例

        支持带注释字段（以 _ 开头）的 JSON；文件缺失或格式错误均视为用法错误。

        Args:
            config_path: 配置文件路径

        Returns:
            RunConfig: 配置实例
        """
        logger.info(f"🔧 从配置文件加载配置: {config_path}")

        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigurationException(
                f"配置文件不存在: {config_path}",
                error_code=ErrorCode.CONFIG_FILE_ERROR,
                config_key=str(config_path),
            )
        try:
            with open(config_file, "r", encoding="utf-8") as f:
                raw_config_data = json5.load(f)
        except ValueError as e:
            raise ConfigurationException(
                f"配置文件格式错误: {e}", error_code=ErrorCode.CONFIG_FILE_ERROR, cause=e
            )
        if not isinstance(raw_config_data, dict):
            raise ConfigurationException("配置文件顶层必须是对象", error_code=ErrorCode.CONFIG_FILE_ERROR)

        config = cls.from_dict(raw_config_data)
        logger.info(f"✅ 配置文件加载成功，指纹 {config.fingerprint()[:12]}")
        return config

    @staticmethod
    def _filter_comments(data):
        """递归过滤以 _ 开头的注释字段"""
        if isinstance(data, dict):
            return {
                key: RunConfig._filter_comments(value)
                for key, value in data.items()
                if not str(key).startswith("_")
            }
        if isinstance(data, list):
            return [RunConfig._filter_comments(item) for item in data]
        return data

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """
        叠加覆盖项，返回新配置

        Args:
            overrides: 形如 {"train": {"seed": 3}} 的嵌套字典，值为 None 的项忽略
        """
        merged = _deep_merge(self.model_dump(mode="json"), overrides)
        return RunConfig.from_dict(merged)

    def fingerprint(self) -> str:
        """配置指纹：规范化 JSON 的 SHA-256"""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def require_seed(self, block: str) -> int:
        """训练/评估必须显式给出随机种子"""
        seed = getattr(self, block).seed
        if seed is None:
            raise ConfigurationException(f"{block}.seed 未设置，训练与评估必须给出随机种子", config_key=f"{block}.seed")
        return seed


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class RuntimeSettings(BaseSettings):
    """
    运行时配置

    从环境变量（前缀 ST_INSTRUCT_）和 .env 文件读取，不参与实验复现指纹。
    """

    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    THREADS: int = 1

    model_config = SettingsConfigDict(
        env_prefix="ST_INSTRUCT_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v):
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"日志级别必须是: {valid_levels}")
        return v.upper()


# ==================== 全局配置实例 ====================
_settings: Optional[RuntimeSettings] = None


def get_settings() -> RuntimeSettings:
    """获取运行时配置实例（单例）"""
    global _settings
    if _settings is None:
        _settings = RuntimeSettings()
    return _settings

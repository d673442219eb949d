"""
指令微调训练模块

这个模块负责联合目标与训练循环，包括：
1. 联合损失：L = L_LLMs + L_r + L_c（无加权系数）
   - L_LLMs：教师强制下目标文本与 <EOS> 位置的平均交叉熵（提示词与填充不计）
   - L_r：回归任务的平均绝对误差（标准化尺度）
   - L_c：分类任务 sigmoid(Ŷ) 与二值标签的二元交叉熵
2. 多数据集轮转混合的批次规划（按 mix_weights 每轮取若干条）
3. 可中断、可恢复的训练器状态（epoch、游标、本轮批次顺序、随机数状态）
4. 消融变体对应的语料准备（STC_OFF / MULTI_OFF / STE_OFF / T2P）

作者：ST-Instruct
版本：0.1.0
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .alignment import classify
from .autodiff import AdamOptimizer, Tensor
from .checkpoint import Checkpoint, checkpoint_save, restore_model, restore_optimizer
from .config import RunConfig, TrainConfig
from .encoder import pretrain_encoder
from .exceptions import ConfigurationException, DataException, ErrorCode, NumericalException, TokenizerException
from .model import BatchOutputs, STInstructModel
from .prompts import MODE_TEXT, MODE_TOKENS, InstructionRecord, build_corpus
from .st_data import DatasetSplit, SpatioTemporalTensor, make_windows
from .tokenizer import ST_PRE

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)


# ==================== 损失 ====================

@dataclass
class LossBreakdown:
    """联合损失分解；total 恒等于三项之和"""

    l_llm: float = 0.0
    l_r: float = 0.0
    l_c: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.l_llm + self.l_r + self.l_c

    @classmethod
    def weighted(cls, parts: Sequence[Tuple["LossBreakdown", float]]) -> "LossBreakdown":
        return cls(
            l_llm=float(sum(p.l_llm * w for p, w in parts)),
            l_r=float(sum(p.l_r * w for p, w in parts)),
            l_c=float(sum(p.l_c * w for p, w in parts)),
        )

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        return cls.weighted([(item, 1.0 / len(items)) for item in items])

    def to_dict(self) -> Dict[str, float]:
        return {"l_llm": self.l_llm, "l_r": self.l_r, "l_c": self.l_c, "total": self.total}


def compute_losses(outputs: BatchOutputs, regression_on_classification: bool = False) -> Tuple[Tensor, LossBreakdown]:
    """
    计算一个批次的联合损失

    Args:
        outputs: STInstructModel.forward 的输出
        regression_on_classification: 分类任务是否同时计入 L_r（概率与二值标签的绝对误差）

    Returns:
        (可反向传播的总损失, 损失分解)

    Raises:
        TokenizerException: 需要回归的记录缺少 <ST_PRE> 隐状态
        DataException: 记录没有真实值
    """
    l_llm = ad.cross_entropy(outputs.logits, outputs.batch.labels, outputs.batch.loss_mask)
    total = l_llm
    l_r_value = l_c_value = 0.0

    if outputs.prediction_rows:
        if outputs.predictions is None:
            raise TokenizerException("缺少 <ST_PRE> 隐状态，无法计算回归损失",
                                     token=ST_PRE, error_code=ErrorCode.SUBSTITUTION_ERROR)
        if outputs.targets is None:
            raise DataException("训练记录缺少真实值")
        kinds = np.asarray(outputs.task_kinds)
        every = len(kinds)
        regression_rows = np.flatnonzero(kinds == "regression")
        classification_rows = np.flatnonzero(kinds == "classification")

        def rows_of(index: np.ndarray) -> Tensor:
            return outputs.predictions if index.size == every else outputs.predictions[index]

        absolute_terms: List[Tuple[Tensor, int]] = []
        if regression_rows.size:
            prediction = rows_of(regression_rows)
            absolute_terms.append((ad.l1_loss(prediction, outputs.targets[regression_rows]), prediction.size))
        if classification_rows.size:
            probability = classify(rows_of(classification_rows))
            labels = outputs.targets[classification_rows]
            l_c = ad.binary_cross_entropy(probability, labels)
            l_c_value = l_c.item()
            total = total + l_c
            if regression_on_classification:
                absolute_terms.append((ad.l1_loss(probability, labels), probability.size))
        if absolute_terms:
            count = sum(n for _, n in absolute_terms)
            l_r = absolute_terms[0][0] * (absolute_terms[0][1] / count)
            for term, n in absolute_terms[1:]:
                l_r = l_r + term * (n / count)
            l_r_value = l_r.item()
            total = total + l_r

    return total, LossBreakdown(l_llm=l_llm.item(), l_r=l_r_value, l_c=l_c_value)


# ==================== 变体与语料 ====================

def variant_options(variant: str) -> Tuple[str, bool]:
    """消融变体 → (目标文本模式, 是否包含时间/区域上下文)"""
    mode = MODE_TEXT if variant == "T2P" else MODE_TOKENS
    return mode, variant != "STC_OFF"


def training_datasets(config: RunConfig) -> List[str]:
    """MULTI_OFF 只在第一个数据集（taxi）上训练"""
    if config.train.variant == "MULTI_OFF":
        return list(config.data.datasets[:1])
    return list(config.data.datasets)


def build_training_corpus(
    config: RunConfig,
    tensors: Mapping[str, SpatioTemporalTensor],
    splits: Mapping[str, DatasetSplit],
    threads: int = 1,
) -> Dict[str, List[InstructionRecord]]:
    """训练区域 × 训练时间段的指令语料，按数据集分组"""
    mode, with_context = variant_options(config.train.variant)
    data = config.data
    corpus: Dict[str, List[InstructionRecord]] = {}
    for index, name in enumerate(training_datasets(config)):
        if name not in tensors:
            raise DataException(f"缺少数据集: {name}", details={"available": sorted(tensors)})
        split = splits[name]
        split.check_disjoint()
        corpus[name] = build_corpus(
            tensors[name], split.train_region_ids, split.train_time_range,
            data.history_length, data.prediction_length, data.train_stride,
            mode=mode, with_context=with_context,
            max_records=data.max_train_records_per_dataset,
            seed=data.split_seed + index, threads=threads,
        )
    return corpus


# ==================== 训练器 ====================

class Trainer:
    """
    指令微调训练器

    每个 epoch 开始时用种子随机数为每个数据集洗牌，再按 mix_weights 轮转拼接并切成批次；
    每个批次一次优化器更新。状态可完整写入检查点并精确恢复。
    """

    def __init__(
        self,
        model: STInstructModel,
        corpus: Mapping[str, Sequence[InstructionRecord]],
        config: Optional[TrainConfig] = None,
        seed: Optional[int] = None,
        optimizer: Optional[AdamOptimizer] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
    ):
        self.model = model
        self.config = config or model.config.train
        self.seed = seed if seed is not None else model.config.require_seed("train")
        self.corpus = {name: list(records) for name, records in corpus.items() if records}
        if not self.corpus:
            raise DataException("训练语料为空")
        self.datasets = list(self.corpus)
        self.optimizer = optimizer or AdamOptimizer(
            model.params,
            lr=self.config.learning_rate,
            betas=self.config.betas,
            eps=self.config.eps,
            weight_decay=self.config.weight_decay,
            clip_norm=self.config.grad_clip_norm,
        )
        self.checkpoint_path = checkpoint_path
        self.rng = np.random.default_rng(self.seed)
        self.epoch = 0
        self.cursor = 0
        self.step = 0
        self.batches: List[List[Tuple[str, int]]] = []

    # ---------- 状态 ----------
    def state_dict(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "cursor": self.cursor,
            "step": self.step,
            "batches": [[[name, index] for name, index in batch] for batch in self.batches],
            "rng": self.rng.bit_generator.state,
            "seed": self.seed,
        }

    def load_state_dict(self, state: Mapping[str, object]) -> None:
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self.step = int(state["step"])
        self.batches = [[(str(name), int(index)) for name, index in batch] for batch in state["batches"]]
        self.rng.bit_generator.state = state["rng"]

    def snapshot(self) -> Checkpoint:
        return Checkpoint.capture(self.model, self.optimizer, self.state_dict())

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, corpus: Mapping[str, Sequence[InstructionRecord]],
                        checkpoint_path: Optional[Union[str, Path]] = None) -> "Trainer":
        """从检查点恢复模型、优化器与训练器状态"""
        model = restore_model(checkpoint)
        optimizer = restore_optimizer(checkpoint, model)
        seed = int(checkpoint.trainer_state.get("seed", checkpoint.seed))
        trainer = cls(model, corpus, seed=seed, optimizer=optimizer, checkpoint_path=checkpoint_path)
        if checkpoint.trainer_state:
            trainer.load_state_dict(checkpoint.trainer_state)
        return trainer

    # ---------- 批次规划 ----------
    def _plan_epoch(self) -> None:
        counts = {name: max(0, int(round(self.config.mix_weights.get(name, 1.0)))) for name in self.datasets}
        active = [name for name in self.datasets if counts[name] > 0]
        if not active:
            raise ConfigurationException("mix_weights 使所有数据集都被排除", config_key="train.mix_weights")
        queues = {name: [int(i) for i in self.rng.permutation(len(self.corpus[name]))] for name in active}
        order: List[Tuple[str, int]] = []
        while any(queues[name] for name in active):
            for name in active:
                take, queues[name] = queues[name][:counts[name]], queues[name][counts[name]:]
                order.extend((name, i) for i in take)
        size = self.config.batch_size
        self.batches = [order[i:i + size] for i in range(0, len(order), size)]
        self.cursor = 0
        logger.debug(f"🔄 epoch {self.epoch + 1}: {len(order)} 条记录, {len(self.batches)} 个批次")

    # ---------- 单步 ----------
    def train_batch(self, refs: Sequence[Tuple[str, int]]) -> LossBreakdown:
        records = [self.corpus[name][index] for name, index in refs]
        groups: Dict[int, List[InstructionRecord]] = {}
        for record in records:
            groups.setdefault(record.num_features, []).append(record)

        self.model.params.zero_grads()
        parts: List[Tuple[LossBreakdown, float]] = []
        total: Optional[Tensor] = None
        try:
            for members in groups.values():
                weight = len(members) / len(records)
                loss, breakdown = compute_losses(
                    self.model.forward(members),
                    regression_on_classification=self.config.regression_loss_on_classification,
                )
                loss = loss if weight == 1.0 else loss * weight
                total = loss if total is None else total + loss
                parts.append((breakdown, weight))
            breakdown = LossBreakdown.weighted(parts)
            if not math.isfinite(breakdown.total):
                raise NumericalException(f"损失非有限: {breakdown.total}")
            ad.backward(total)
        except NumericalException as e:
            raise NumericalException(
                f"批次 {self.cursor}（epoch {self.epoch + 1}, step {self.step}）数值异常: {e.message}",
                details={"epoch": self.epoch + 1, "batch": self.cursor, "step": self.step,
                         "datasets": sorted({name for name, _ in refs})},
                cause=e,
            ) from e
        self.optimizer.step()
        self.step += 1
        return breakdown

    def _advance(self) -> LossBreakdown:
        if not self.batches:
            self._plan_epoch()
        breakdown = self.train_batch(self.batches[self.cursor])
        self.cursor += 1
        if self.cursor >= len(self.batches):
            self.epoch += 1
            self.cursor = 0
            self.batches = []
        if self.checkpoint_path and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
            checkpoint_save(self.snapshot(), self.checkpoint_path)
        return breakdown

    # ---------- 外部接口 ----------
    def train_steps(self, n: int) -> List[LossBreakdown]:
        """执行 n 个批次（可跨 epoch）"""
        return [self._advance() for _ in range(n)]

    def train_epoch(self) -> LossBreakdown:
        """跑完当前 epoch 剩余的全部批次，返回平均损失分解"""
        epoch = self.epoch
        losses = [self._advance()]
        while self.epoch == epoch:
            losses.append(self._advance())
        return LossBreakdown.mean(losses)

    def fit(self, epochs: Optional[int] = None) -> List[LossBreakdown]:
        epochs = self.config.epochs if epochs is None else epochs
        history = []
        logger.info(f"🚀 开始训练: {epochs} 轮, 数据集 {self.datasets}, 种子 {self.seed}")
        for _ in range(epochs):
            breakdown = self.train_epoch()
            history.append(breakdown)
            logger.info(
                f"📊 epoch {self.epoch}: total={breakdown.total:.4f} "
                f"(llm={breakdown.l_llm:.4f}, r={breakdown.l_r:.4f}, c={breakdown.l_c:.4f})"
            )
        if self.checkpoint_path:
            checkpoint_save(self.snapshot(), self.checkpoint_path)
        return history


# ==================== 端到端训练 ====================

@dataclass
class TrainingResult:
    model: STInstructModel
    trainer: Trainer
    history: List[LossBreakdown]
    corpus: Dict[str, List[InstructionRecord]]
    pretrain_losses: List[float] = field(default_factory=list)


def run_training(
    config: RunConfig,
    tensors: Mapping[str, SpatioTemporalTensor],
    splits: Mapping[str, DatasetSplit],
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    epochs: Optional[int] = None,
) -> TrainingResult:
    """
    构建语料与分词器、创建模型、（可选）预训练编码器并完成指令微调

    Args:
        out_dir: 检查点目录，None 表示不落盘
        epochs: 覆盖 config.train.epochs
    """
    seed = config.require_seed("train")
    corpus = build_training_corpus(config, tensors, splits, threads=threads)
    records = [record for group in corpus.values() for record in group]
    tokenizer = STInstructModel.build_tokenizer(records)
    model = STInstructModel.create(config, tokenizer, seed)

    pretrain_losses: List[float] = []
    if config.train.pretrain_encoder_epochs and model.use_encoder:
        data = config.data
        windows = []
        for name in corpus:
            split = splits[name]
            windows.extend(make_windows(tensors[name], data.history_length, data.prediction_length,
                                        data.train_stride, split.train_time_range, split.train_region_ids))
        pretrain_losses = pretrain_encoder(
            model.encoder, windows, config.train.pretrain_encoder_epochs, data.prediction_length,
            learning_rate=config.train.learning_rate, seed=seed,
        )

    trainer = Trainer(model, corpus, seed=seed, checkpoint_path=out_dir)
    history = trainer.fit(epochs)
    return TrainingResult(model=model, trainer=trainer, history=history, corpus=corpus,
                          pretrain_losses=pretrain_losses)

"""
时空指令模型

把编码器、对齐投影、语言模型、回归头与分词器打包为一个整体（训练与评估共用）：
1. 批处理：分词、右侧填充、教师强制标签与损失掩码、<ST_HIS>/<ST_PRE> 位置校验
2. 前向：实例标准化 → 编码 → 投影 → 嵌入替换 → 语言模型 → Γ → 回归
3. 推理：贪心生成答案，按生成的 <ST_PRE> 回归数值；缺失时回退到 copy-last 并计数；
   文本数字模式下直接解析生成文本中的整数列表

作者：ST-Instruct
版本：0.1.0
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .alignment import AlignmentProjection, RegressionHead, classify
from .autodiff import ParameterSet, Tensor
from .config import RunConfig
from .encoder import STEncoder
from .exceptions import ErrorCode, ShapeMismatchException, TokenizerException
from .language_model import Substitution, TinyLM, extend_vocab
from .prompts import MODE_TEXT, InstructionRecord, parse_prediction_lists
from .st_data import binarize, instance_scale
from .tokenizer import ST_HIS, ST_PRE, ST_TOKENS, Tokenizer

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)


@dataclass
class SequenceBatch:
    """
    教师强制批次

    Attributes:
        token_ids: (B, S) 右侧以 <PAD> 填充
        attention_mask: (B, S) 真实词元为 1
        labels: (B, S) 位置 i 的目标为 token_ids[i+1]
        loss_mask: (B, S) 只覆盖目标文本与 <EOS> 的预测位置
        his_positions: (B, F) <ST_HIS> 位置
        pre_positions: 每条记录的 <ST_PRE> 位置列表
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    his_positions: np.ndarray
    pre_positions: List[List[int]]


@dataclass
class BatchOutputs:
    """一个批次的模型输出（所有张量都在计算图上）"""

    logits: Tensor
    hidden: Tensor
    batch: SequenceBatch
    predictions: Optional[Tensor]
    prediction_rows: List[int]
    targets: Optional[np.ndarray]
    task_kinds: List[str]


@dataclass
class RecordPrediction:
    """单条记录的推理结果；values 为 (P, F)，分类任务为概率"""

    answer_text: str
    values: Optional[np.ndarray]
    missing_pre: int = 0
    pre_tokens: int = 0
    parse_failed: bool = False


class STInstructModel:
    """
    模型整体

    参数顺序固定为 encoder.* → lm.* → align.* → regression.*。
    """

    def __init__(self, config: RunConfig, tokenizer: Tokenizer, seed: int):
        self.config = config
        self.tokenizer = tokenizer
        self.seed = seed
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)

        self.encoder = STEncoder(config.encoder, config.data.history_length, self.params, rng)
        self.lm = TinyLM(config.lm, tokenizer.vocab_size, self.params, rng)
        self.align = AlignmentProjection(config.encoder.d, config.lm.d_model, self.params, rng)
        self.head = RegressionHead(config.lm.d_model, config.lm.regression_hidden,
                                   config.data.prediction_length, self.params, rng)
        if ST_HIS in tokenizer:
            self.lm.substitution_token_id = tokenizer.id_of(ST_HIS)
        self.use_encoder = config.train.variant != "STE_OFF"

    @classmethod
    def create(cls, config: RunConfig, tokenizer: Tokenizer, seed: int) -> "STInstructModel":
        """新建模型：在基础词表上初始化后扩展时空特殊符号"""
        model = cls(config, tokenizer, seed)
        missing = [t for t in ST_TOKENS if t not in tokenizer]
        if missing:
            extend_vocab(tokenizer, model.lm, missing)
        logger.info(f"✅ 模型创建完成: {model.params.num_parameters()} 个参数, 词表 {tokenizer.vocab_size}")
        return model

    @staticmethod
    def build_tokenizer(records: Sequence[InstructionRecord]) -> Tokenizer:
        texts = []
        for record in records:
            texts.append(record.prompt_text)
            texts.append(record.target_text)
        return Tokenizer.build(texts)

    # ---------- 批处理 ----------
    def sequence_ids(self, record: InstructionRecord, with_target: bool = True) -> List[int]:
        ids = [self.tokenizer.bos_id] + self.tokenizer.encode(record.prompt_text)
        if with_target:
            ids += self.tokenizer.encode(record.target_text) + [self.tokenizer.eos_id]
        return ids

    def _check_positions(self, ids: Sequence[int], positions: Sequence[int], token: str) -> None:
        expected = self.tokenizer.id_of(token)
        for pos in positions:
            if pos >= len(ids) or ids[pos] != expected:
                raise TokenizerException(
                    f"位置 {pos} 上不是 {token}", token=token, error_code=ErrorCode.SUBSTITUTION_ERROR
                )

    def make_batch(self, records: Sequence[InstructionRecord]) -> SequenceBatch:
        """分词并右侧填充；所有记录的特征数必须一致"""
        features = {r.num_features for r in records}
        if len(features) != 1:
            raise ShapeMismatchException("make_batch", sorted(features), reason="批内特征数不一致")
        sequences, prompt_lengths = [], []
        for record in records:
            ids = self.sequence_ids(record)
            self._check_positions(ids, record.st_his_positions, ST_HIS)
            self._check_positions(ids, record.st_pre_positions, ST_PRE)
            sequences.append(ids)
            prompt_lengths.append(1 + len(self.tokenizer.encode(record.prompt_text)))

        length = max(len(s) for s in sequences)
        if length > self.config.lm.context_length:
            raise TokenizerException(
                f"序列长度 {length} 超过上下文长度 {self.config.lm.context_length}",
                error_code=ErrorCode.CONTEXT_OVERFLOW,
            )
        batch = len(records)
        token_ids = np.full((batch, length), self.tokenizer.pad_id, dtype=np.int64)
        attention = np.zeros((batch, length), dtype=np.float32)
        labels = np.full((batch, length), self.tokenizer.pad_id, dtype=np.int64)
        loss_mask = np.zeros((batch, length), dtype=np.float32)
        for b, ids in enumerate(sequences):
            n = len(ids)
            token_ids[b, :n] = ids
            attention[b, :n] = 1.0
            labels[b, :n - 1] = ids[1:]
            loss_mask[b, prompt_lengths[b] - 1:n - 1] = 1.0
        return SequenceBatch(
            token_ids=token_ids,
            attention_mask=attention,
            labels=labels,
            loss_mask=loss_mask,
            his_positions=np.asarray([r.st_his_positions for r in records], dtype=np.int64),
            pre_positions=[list(r.st_pre_positions) for r in records],
        )

    # ---------- 编码与投影 ----------
    def project_histories(self, histories: np.ndarray) -> Tensor:
        """(B, H, F) 原始计数 → 标准化 → 编码 → 投影，得到 H (B, F, d_L)"""
        scaled, _, _ = instance_scale(np.asarray(histories, dtype=np.float64))
        return self.align(self.encoder.encode(scaled))

    def _scaled_targets(self, record: InstructionRecord) -> np.ndarray:
        """回归任务：与历史同尺度的标准化目标；分类任务：二值标签。返回 (F, P)"""
        target = record.target_array()
        if record.task_kind == "classification":
            return binarize(target).T
        _, mean, std = instance_scale(record.history_array().astype(np.float64))
        return ((target - mean) / std).T

    # ---------- 前向 ----------
    def forward(self, records: Sequence[InstructionRecord]) -> BatchOutputs:
        batch = self.make_batch(records)
        histories = np.stack([r.history_array() for r in records])
        if self.use_encoder:
            H = self.project_histories(histories)
            substitution = Substitution(positions=batch.his_positions, vectors=H)
        else:
            H = Tensor(np.zeros((len(records), records[0].num_features, self.config.lm.d_model)))
            substitution = None

        logits, hidden = self.lm.forward(batch.token_ids, substitution)

        rows = [i for i, r in enumerate(records) if r.mode != MODE_TEXT]
        predictions, targets = None, None
        if rows:
            features = records[0].num_features
            for i in rows:
                if len(batch.pre_positions[i]) != features:
                    raise TokenizerException(
                        f"记录 {i} 的 <ST_PRE> 数量 {len(batch.pre_positions[i])} 与特征数 {features} 不一致",
                        token=ST_PRE, error_code=ErrorCode.SUBSTITUTION_ERROR,
                    )
            row_index = np.asarray(rows, dtype=np.int64)
            positions = np.asarray([batch.pre_positions[i] for i in rows], dtype=np.int64)
            gamma = hidden[row_index[:, None], positions]
            h_rows = H if len(rows) == len(records) else H[row_index]
            predictions = self.head(h_rows, gamma)
            if all(records[i].ground_truth is not None for i in rows):
                targets = np.stack([self._scaled_targets(records[i]) for i in rows])

        return BatchOutputs(
            logits=logits,
            hidden=hidden,
            batch=batch,
            predictions=predictions,
            prediction_rows=rows,
            targets=targets,
            task_kinds=[records[i].task_kind for i in rows],
        )

    # ---------- 推理 ----------
    def _to_values(self, record: InstructionRecord, y_hat: np.ndarray) -> np.ndarray:
        """(k, P) 头输出（前 k 个特征）→ (P, k) 计数或概率"""
        if record.task_kind == "classification":
            return classify(Tensor(y_hat)).data.T
        k = y_hat.shape[0]
        _, mean, std = instance_scale(record.history_array().astype(np.float64))
        return np.maximum(y_hat.T * std[:, :k] + mean[:, :k], 0.0)

    def copy_last(self, record: InstructionRecord) -> np.ndarray:
        """(P, F) copy-last 回退值"""
        history = record.history_array()
        last = history[-1:]
        if record.task_kind == "classification":
            last = binarize(last)
        return np.repeat(last, self.config.data.prediction_length, axis=0).astype(np.float64)

    def predict(self, record: InstructionRecord, max_new_tokens: Optional[int] = None) -> RecordPrediction:
        """
        生成答案并得到数值预测

        缺失的第 f 个 <ST_PRE> 用 copy-last 回退并计入 missing_pre；
        文本数字模式下解析失败时 values 为 None。
        """
        max_new_tokens = self.config.eval.max_new_tokens if max_new_tokens is None else max_new_tokens
        features = record.num_features
        horizon = self.config.data.prediction_length
        with ad.no_grad():
            prompt_ids = self.sequence_ids(record, with_target=False)
            self._check_positions(prompt_ids, record.st_his_positions, ST_HIS)
            substitution = None
            H = np.zeros((features, self.config.lm.d_model))
            if self.use_encoder:
                projected = self.project_histories(record.history_array()[None])
                substitution = Substitution(positions=np.asarray([record.st_his_positions]), vectors=projected)
                H = projected.data[0]
            result = self.lm.generate(
                prompt_ids, max_new_tokens, substitution,
                stop_id=self.tokenizer.eos_id,
                pre_token_id=self.tokenizer.id_of(ST_PRE),
            )
            answer = self.tokenizer.decode(result.tokens)
            pre_tokens = len(result.st_pre_positions)

            if record.mode == MODE_TEXT:
                lists = parse_prediction_lists(answer)
                if len(lists) < features or any(len(lst) != horizon for lst in lists[:features]):
                    return RecordPrediction(answer_text=answer, values=None, pre_tokens=pre_tokens, parse_failed=True)
                values = np.asarray(lists[:features], dtype=np.float64).T
                if record.task_kind == "classification":
                    values = binarize(values).astype(np.float64)
                return RecordPrediction(answer_text=answer, values=values, pre_tokens=pre_tokens)

            values = self.copy_last(record)
            found = 0 if result.st_pre_hidden is None else min(len(result.st_pre_hidden), features)
            if found:
                gamma = Tensor(result.st_pre_hidden[:found])
                y_hat = self.head(Tensor(H[:found]), gamma).data
                values[:, :found] = self._to_values(record, y_hat)
        return RecordPrediction(answer_text=answer, values=values, missing_pre=features - found,
                                pre_tokens=pre_tokens)

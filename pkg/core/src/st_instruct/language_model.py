"""
小型解码器语言模型

这个模块实现一个从零训练的因果解码器，包括：
1. 词元嵌入 + 可学习绝对位置嵌入
2. 嵌入替换钩子：<ST_HIS> 位置的输入嵌入在第一个 block 之前被外部向量覆盖
3. Pre-LN Transformer block（多头因果自注意力 + ReLU 前馈）
4. 输出头（不与嵌入共享）与最终层隐状态（回归头读取 Γ 的来源）
5. 贪心生成（无 KV 缓存）
6. 词表扩展：新行取已有行的均值，已有 id 与参数不变

参数命名：lm.tok_emb / lm.pos_emb / lm.block{l}.* / lm.ln_f.* / lm.head.W

作者：ST-Instruct
版本：0.1.0
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .config import LMConfig
from .exceptions import ErrorCode, ShapeMismatchException, TokenizerException
from .tokenizer import ST_HIS, ST_PRE, Tokenizer

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


@dataclass
class Substitution:
    """
    嵌入替换表

    Attributes:
        positions: (B, K) 整数位置，-1 表示该槽位不替换
        vectors: (B, K, d_L) 外部向量（对齐投影的输出）
    """

    positions: np.ndarray
    vectors: Tensor


@dataclass
class GenerationResult:
    """贪心生成结果"""

    tokens: List[int]
    st_pre_positions: List[int] = field(default_factory=list)
    st_pre_hidden: Optional[np.ndarray] = None
    stopped: bool = False


class TinyLM:
    """
    因果解码器语言模型

    forward 返回 logits (B,S,V) 与最终层隐状态 (B,S,d_L)。
    """

    def __init__(self, config: LMConfig, vocab_size: int, params: ParameterSet,
                 rng: np.random.Generator, prefix: str = "lm"):
        self.config = config
        self.vocab_size = vocab_size
        self.params = params
        self.prefix = prefix
        self.substitution_token_id: Optional[int] = None

        d = config.d_model
        p = prefix
        params.create(f"{p}.tok_emb", (vocab_size, d), rng, fan_in=d)
        params.create(f"{p}.pos_emb", (config.context_length, d), rng, fan_in=d)
        for layer in range(config.n_layers):
            b = f"{p}.block{layer}"
            params.register(f"{b}.ln1.g", np.ones(d))
            params.create(f"{b}.ln1.b", (d,), rng, zeros=True)
            for name in ("Wq", "Wk", "Wv", "Wo"):
                params.create(f"{b}.attn.{name}", (d, d), rng, fan_in=d)
                params.create(f"{b}.attn.b{name[1]}", (d,), rng, zeros=True)
            params.register(f"{b}.ln2.g", np.ones(d))
            params.create(f"{b}.ln2.b", (d,), rng, zeros=True)
            params.create(f"{b}.mlp.W1", (d, 4 * d), rng, fan_in=d)
            params.create(f"{b}.mlp.b1", (4 * d,), rng, zeros=True)
            params.create(f"{b}.mlp.W2", (4 * d, d), rng, fan_in=4 * d)
            params.create(f"{b}.mlp.b2", (d,), rng, zeros=True)
        params.register(f"{p}.ln_f.g", np.ones(d))
        params.create(f"{p}.ln_f.b", (d,), rng, zeros=True)
        params.create(f"{p}.head.W", (vocab_size, d), rng, fan_in=d)
        logger.debug(f"🔧 语言模型初始化: {config.n_layers} 层, d_L={d}, 词表 {vocab_size}")

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    # ---------- 嵌入 ----------
    def embed(self, ids: np.ndarray, substitution: Optional[Substitution] = None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeMismatchException("embed", ids.shape, reason="期望 (B, S)")
        batch, length = ids.shape
        if length > self.config.context_length:
            raise TokenizerException(
                f"序列长度 {length} 超过上下文长度 {self.config.context_length}",
                error_code=ErrorCode.CONTEXT_OVERFLOW,
            )
        x = ad.embedding(self._p("tok_emb"), ids)
        if substitution is not None:
            x = self._substitute(x, ids, substitution)
        return x + self._p("pos_emb")[:length]

    def _substitute(self, x: Tensor, ids: np.ndarray, substitution: Substitution) -> Tensor:
        positions = np.asarray(substitution.positions, dtype=np.int64)
        batch, length = ids.shape
        if positions.ndim != 2 or positions.shape[0] != batch or substitution.vectors.shape[:2] != positions.shape:
            raise ShapeMismatchException("substitute", positions.shape, substitution.vectors.shape)
        slots = positions.shape[1]
        keep = np.ones((batch, length, 1), dtype=x.dtype)
        place = np.zeros((batch, length, slots), dtype=x.dtype)
        for b in range(batch):
            for k in range(slots):
                pos = int(positions[b, k])
                if pos < 0:
                    continue
                if pos >= length or ids[b, pos] != self.substitution_token_id:
                    raise TokenizerException(
                        f"替换位置 {pos} 上不是 {ST_HIS}",
                        error_code=ErrorCode.SUBSTITUTION_ERROR,
                        details={"batch_index": b, "position": pos},
                    )
                keep[b, pos, 0] = 0.0
                place[b, pos, k] = 1.0
        return x * keep + ad.matmul(place, substitution.vectors)

    # ---------- Transformer ----------
    def _attention(self, x: Tensor, layer: int, mask: np.ndarray, probes: Optional[list]) -> Tensor:
        b = f"block{layer}.attn"
        batch, length, width = x.shape
        heads = self.config.n_heads
        head_dim = width // heads

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

        q = split(x @ self._p(f"{b}.Wq") + self._p(f"{b}.bq"))
        k = split(x @ self._p(f"{b}.Wk") + self._p(f"{b}.bk"))
        v = split(x @ self._p(f"{b}.Wv") + self._p(f"{b}.bv"))
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim)) + mask
        probs = ad.softmax(scores)
        if probes is not None:
            probes.append(probs.data)
        context = ad.reshape(ad.transpose(probs @ v, (0, 2, 1, 3)), (batch, length, width))
        return context @ self._p(f"{b}.Wo") + self._p(f"{b}.bo")

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        b = f"block{layer}.mlp"
        return ad.relu(x @ self._p(f"{b}.W1") + self._p(f"{b}.b1")) @ self._p(f"{b}.W2") + self._p(f"{b}.b2")

    def hidden_states(self, ids: np.ndarray, substitution: Optional[Substitution] = None,
                      probes: Optional[list] = None) -> Tensor:
        """最终层（ln_f 之后）隐状态 (B, S, d_L)"""
        x = self.embed(ids, substitution)
        length = x.shape[1]
        mask = np.triu(np.full((length, length), MASK_VALUE, dtype=x.dtype), k=1)
        for layer in range(self.config.n_layers):
            b = f"block{layer}"
            h = ad.layer_norm(x, self._p(f"{b}.ln1.g"), self._p(f"{b}.ln1.b"))
            x = x + self._attention(h, layer, mask, probes)
            h = ad.layer_norm(x, self._p(f"{b}.ln2.g"), self._p(f"{b}.ln2.b"))
            x = x + self._mlp(h, layer)
        return ad.layer_norm(x, self._p("ln_f.g"), self._p("ln_f.b"))

    def logits(self, hidden: Tensor) -> Tensor:
        return hidden @ ad.transpose(self._p("head.W"), (1, 0))

    def forward(self, ids: np.ndarray, substitution: Optional[Substitution] = None):
        """
        前向计算

        Returns:
            (logits (B,S,V), hidden (B,S,d_L))
        """
        hidden = self.hidden_states(ids, substitution)
        return self.logits(hidden), hidden

    # ---------- 生成 ----------
    def generate(
        self,
        prompt_ids: Sequence[int],
        max_new_tokens: int,
        substitution: Optional[Substitution] = None,
        stop_id: Optional[int] = None,
        pre_token_id: Optional[int] = None,
    ) -> GenerationResult:
        """
        贪心解码

        遇到 stop_id 或达到 max_new_tokens 停止；生成结束后再做一次完整前向，
        取出每个生成的 <ST_PRE> 位置上的隐状态。

        Raises:
            TokenizerException: 提示词本身超过上下文长度，或解码到上下文长度仍未停止
        """
        ids = [int(i) for i in prompt_ids]
        limit = self.config.context_length
        if len(ids) > limit:
            raise TokenizerException(
                f"提示词 {len(ids)} 超过上下文长度 {limit}",
                error_code=ErrorCode.CONTEXT_OVERFLOW,
            )
        budget = min(max_new_tokens, limit - len(ids))
        suffix: List[int] = []
        stopped = False
        with ad.no_grad():
            for _ in range(budget):
                hidden = self.hidden_states(np.asarray([ids]), substitution)
                scores = self.logits(hidden[:, -1:, :]).data[0, -1]
                next_id = int(np.argmax(scores))
                if stop_id is not None and next_id == stop_id:
                    stopped = True
                    break
                suffix.append(next_id)
                ids.append(next_id)
            if not stopped and budget < max_new_tokens:
                raise TokenizerException(
                    f"解码到上下文长度 {limit} 仍未结束（提示词 {len(prompt_ids)}，已生成 {len(suffix)}）",
                    error_code=ErrorCode.CONTEXT_OVERFLOW,
                )

            result = GenerationResult(tokens=suffix, stopped=stopped)
            if pre_token_id is not None:
                offset = len(prompt_ids)
                result.st_pre_positions = [offset + i for i, t in enumerate(suffix) if t == pre_token_id]
                if result.st_pre_positions:
                    hidden = self.hidden_states(np.asarray([ids]), substitution)
                    result.st_pre_hidden = np.array(hidden.data[0, result.st_pre_positions])
        return result

    # ---------- 词表扩展 ----------
    def resize_vocab(self, new_size: int) -> None:
        """追加嵌入与输出头的行，新行取已有行均值"""
        added = new_size - self.vocab_size
        if added <= 0:
            return
        for name in ("tok_emb", "head.W"):
            param = self._p(name)
            rows = np.repeat(param.data.mean(axis=0, keepdims=True), added, axis=0)
            param.data = np.concatenate([param.data, rows.astype(param.dtype)], axis=0)
            param.grad = None
        self.vocab_size = new_size


def extend_vocab(tokenizer: Tokenizer, lm: TinyLM, new_tokens: Sequence[str]) -> List[int]:
    """
    同步扩展分词器与语言模型的词表

    Raises:
        TokenizerException: 词元重复，或分词器与模型词表大小不一致
    """
    if tokenizer.vocab_size != lm.vocab_size:
        raise TokenizerException(f"分词器词表 {tokenizer.vocab_size} 与模型词表 {lm.vocab_size} 不一致")
    ids = tokenizer.extend(new_tokens)
    lm.resize_vocab(tokenizer.vocab_size)
    if ST_HIS in tokenizer:
        lm.substitution_token_id = tokenizer.id_of(ST_HIS)
    return ids


def pre_token_id(tokenizer: Tokenizer) -> Optional[int]:
    return tokenizer.id_of(ST_PRE) if ST_PRE in tokenizer else None

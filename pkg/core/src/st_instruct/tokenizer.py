"""
分词器模块

词级分词 + 数字逐位切分：
- 特殊符号 <...> 整体成为一个词元，永不切分
- 单词（可带一个前导空格）、单个数字（可带前导空格）、单个标点、单个空白各成一个词元
- 解码即拼接，因此词表内文本满足 decode(encode(s)) == s

预分词与词表无关，提示词构建阶段即可确定占位符位置。

作者：ST-Instruct
版本：0.1.0
"""

import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .exceptions import ErrorCode, TokenizerException

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

# ==================== 特殊符号 ====================
PAD = "<PAD>"
UNK = "<UNK>"
BOS = "<BOS>"
EOS = "<EOS>"
BASE_SPECIAL_TOKENS = [PAD, UNK, BOS, EOS]

ST_START = "<ST_start>"
ST_HIS = "<ST_HIS>"
ST_END = "<ST_end>"
ST_PRE = "<ST_PRE>"
ST_TOKENS = [ST_START, ST_HIS, ST_END, ST_PRE]

_SPECIAL = r"<[A-Za-z_]+>"
_PRETOKEN = re.compile(rf"{_SPECIAL}| ?[A-Za-z]+| ?[0-9]| ?(?!{_SPECIAL})[^\sA-Za-z0-9]|\s")
_SPECIAL_FULL = re.compile(rf"^{_SPECIAL}$")

DIGIT_TOKENS = [str(d) for d in range(10)] + [f" {d}" for d in range(10)]


def pretokenize(text: str) -> List[str]:
    """与词表无关的预分词，所有字符都被覆盖"""
    return _PRETOKEN.findall(text)


def is_special(token: str) -> bool:
    return bool(_SPECIAL_FULL.match(token))


class Tokenizer:
    """
    词级分词器

    Attributes:
        vocab: id → 词元
        special_tokens: 已注册的特殊符号（整体匹配）
        strict: 严格模式下未知词元直接报错
    """

    def __init__(self, vocab: Sequence[str], special_tokens: Sequence[str], strict: bool = False):
        self.vocab: List[str] = list(vocab)
        self.special_tokens: List[str] = list(special_tokens)
        self.strict = strict
        self._ids: Dict[str, int] = {}
        for i, token in enumerate(self.vocab):
            if token in self._ids:
                raise TokenizerException(f"词表中存在重复词元: {token!r}", token=token)
            self._ids[token] = i
        for token in BASE_SPECIAL_TOKENS:
            if token not in self._ids:
                raise TokenizerException(f"词表缺少基础特殊符号 {token}", token=token)

    # ---------- 构建 ----------
    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, strict: bool = False) -> "Tokenizer":
        """
        从语料构建词表

        基础特殊符号在前，其后为全部数字词元，再按字典序排列语料词元；
        语料中出现的 <...> 形式符号不进入基础词表（由 extend 追加）。
        """
        counter: Counter = Counter()
        for text in texts:
            counter.update(tok for tok in pretokenize(text) if not is_special(tok))
        words = sorted(tok for tok, n in counter.items() if n >= min_count and tok not in DIGIT_TOKENS)
        vocab = BASE_SPECIAL_TOKENS + DIGIT_TOKENS + words
        logger.info(f"✅ 分词器构建完成: 词表大小 {len(vocab)}")
        return cls(vocab, BASE_SPECIAL_TOKENS, strict=strict)

    def extend(self, new_tokens: Sequence[str]) -> List[int]:
        """追加特殊符号，已有 id 不变"""
        duplicates = [t for t in new_tokens if t in self._ids]
        if duplicates or len(set(new_tokens)) != len(new_tokens):
            raise TokenizerException(f"词元已存在: {duplicates or list(new_tokens)}", token=(duplicates or [None])[0])
        for token in new_tokens:
            if not is_special(token):
                raise TokenizerException(f"特殊符号必须形如 <NAME>: {token!r}", token=token)
        ids = []
        for token in new_tokens:
            self._ids[token] = len(self.vocab)
            self.vocab.append(token)
            self.special_tokens.append(token)
            ids.append(self._ids[token])
        logger.info(f"🔧 词表扩展: {list(new_tokens)} → 词表大小 {self.vocab_size}")
        return ids

    # ---------- 查询 ----------
    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise TokenizerException(f"未知词元: {token!r}", token=token)
        return self._ids[token]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    # ---------- 编解码 ----------
    def encode(self, text: str, strict: Optional[bool] = None) -> List[int]:
        strict = self.strict if strict is None else strict
        ids = []
        for token in pretokenize(text):
            index = self._ids.get(token)
            if index is None:
                if strict:
                    raise TokenizerException(f"严格模式下出现未知词元: {token!r}", token=token)
                index = self.unk_id
            ids.append(index)
        return ids

    def decode(self, ids: Iterable[int], skip_control: bool = True) -> str:
        """拼接词元；默认跳过 <PAD>/<BOS>/<EOS>"""
        control = {self.pad_id, self.bos_id, self.eos_id} if skip_control else set()
        pieces = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise TokenizerException(f"词元 id 越界: {i}", error_code=ErrorCode.TOKENIZER_ERROR)
            if i not in control:
                pieces.append(self.vocab[i])
        return "".join(pieces)

    # ---------- 持久化 ----------
    def to_dict(self) -> Dict[str, object]:
        return {"vocab": self.vocab, "special_tokens": self.special_tokens, "strict": self.strict}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Tokenizer":
        try:
            return cls(data["vocab"], data["special_tokens"], strict=bool(data.get("strict", False)))
        except (KeyError, TypeError) as e:
            raise TokenizerException(f"分词器数据格式错误: {e}", cause=e)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Tokenizer":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise TokenizerException(f"分词器文件读取失败: {path}", cause=e)
        return cls.from_dict(data)

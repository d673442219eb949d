"""
检查点读写

文件布局（全部小端）：
    "STIT" | u32 版本 | u32 清单长度 | u64 数据长度 | JSON 清单 | float32 数据块 | u32 CRC-32

- 清单按键排序，记录参数名/形状/偏移、配置、分词器、优化器步数、训练器状态（含随机数状态）
- 数据块依次为参数、Adam 一阶矩、Adam 二阶矩
- CRC-32 覆盖清单与数据块
- 版本不符、文件截断、校验失败分别抛出不同的异常；save → load → save 字节一致

作者：ST-Instruct
版本：0.1.0
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .autodiff import AdamOptimizer
from .config import RunConfig
from .exceptions import (
    CheckpointChecksumException,
    CheckpointException,
    CheckpointTruncatedException,
    CheckpointVersionException,
)
from .model import STInstructModel
from .tokenizer import Tokenizer

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STIT"
CHECKPOINT_VERSION = 1
CHECKPOINT_FILENAME = "model.stit"
_HEADER = struct.Struct("<4sIIQ")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    """
    检查点内容

    Attributes:
        params: 按注册顺序的参数数组
        adam_t / adam_m / adam_v: 优化器状态（矩可能只覆盖部分参数）
        trainer_state: 训练器状态（epoch、游标、本轮批次顺序、随机数状态、步数）
    """

    config: RunConfig
    tokenizer: Tokenizer
    seed: int
    params: Dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    trainer_state: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def step(self) -> int:
        return int(self.trainer_state.get("step", 0))

    @classmethod
    def capture(cls, model: STInstructModel, optimizer: Optional[AdamOptimizer] = None,
                trainer_state: Optional[Dict[str, Any]] = None) -> "Checkpoint":
        """从运行中的模型与优化器生成快照（数组均为副本）"""
        adam = optimizer.state_dict() if optimizer is not None else {"t": 0, "m": {}, "v": {}}
        order = model.params.names()
        return cls(
            config=model.config,
            tokenizer=Tokenizer.from_dict(model.tokenizer.to_dict()),
            seed=model.seed,
            params=model.params.state_arrays(),
            adam_t=int(adam["t"]),
            adam_m={k: adam["m"][k] for k in order if k in adam["m"]},
            adam_v={k: adam["v"][k] for k in order if k in adam["v"]},
            trainer_state=json.loads(json.dumps(trainer_state or {})),
        )


# ==================== 编码 ====================

def _blocks(arrays: Dict[str, np.ndarray], offset: int) -> Tuple[List[Dict[str, Any]], List[bytes], int]:
    entries, chunks = [], []
    for name, value in arrays.items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return entries, chunks, offset


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    params, param_chunks, offset = _blocks(checkpoint.params, 0)
    moments_m, m_chunks, offset = _blocks(checkpoint.adam_m, offset)
    moments_v, v_chunks, offset = _blocks(checkpoint.adam_v, offset)
    manifest = {
        "format_version": checkpoint.version,
        "config": checkpoint.config.model_dump(mode="json"),
        "tokenizer": checkpoint.tokenizer.to_dict(),
        "seed": checkpoint.seed,
        "params": params,
        "optimizer": {"t": checkpoint.adam_t, "m": moments_m, "v": moments_v},
        "trainer_state": checkpoint.trainer_state,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(param_chunks + m_chunks + v_chunks)
    body = manifest_bytes + payload
    header = _HEADER.pack(CHECKPOINT_MAGIC, checkpoint.version, len(manifest_bytes), len(payload))
    return header + body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _read_arrays(entries: List[Dict[str, Any]], payload: bytes) -> Dict[str, np.ndarray]:
    arrays = {}
    for entry in entries:
        start, size = int(entry["offset"]), int(entry["nbytes"])
        if start + size > len(payload):
            raise CheckpointTruncatedException(f"数据块 {entry['name']} 超出文件范围")
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:start + size], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        )
    return arrays


def decode_checkpoint(blob: bytes, path: Optional[str] = None) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedException(f"文件长度 {len(blob)} 小于文件头", path=path)
    magic, version, manifest_len, payload_len = _HEADER.unpack(blob[:_HEADER.size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointException(f"不是检查点文件（magic={magic!r}）", path=path)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionException(
            f"检查点版本 {version} 与当前版本 {CHECKPOINT_VERSION} 不一致", path=path,
            details={"found": version, "expected": CHECKPOINT_VERSION},
        )
    expected = _HEADER.size + manifest_len + payload_len + _CRC.size
    if len(blob) != expected:
        raise CheckpointTruncatedException(
            f"文件长度 {len(blob)} 与文件头记录的 {expected} 不一致", path=path,
        )
    body = blob[_HEADER.size:-_CRC.size]
    (stored_crc,) = _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumException("CRC-32 校验失败，检查点已损坏", path=path)

    try:
        manifest = json.loads(body[:manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointException(f"检查点清单无法解析: {e}", path=path, cause=e)
    payload = body[manifest_len:]
    optimizer = manifest["optimizer"]
    return Checkpoint(
        config=RunConfig.from_dict(manifest["config"]),
        tokenizer=Tokenizer.from_dict(manifest["tokenizer"]),
        seed=int(manifest["seed"]),
        params=_read_arrays(manifest["params"], payload),
        adam_t=int(optimizer["t"]),
        adam_m=_read_arrays(optimizer["m"], payload),
        adam_v=_read_arrays(optimizer["v"], payload),
        trainer_state=manifest.get("trainer_state", {}),
        version=int(manifest["format_version"]),
    )


# ==================== 文件读写 ====================

def resolve_path(path: Union[str, Path]) -> Path:
    """目录参数指向其中的 model.stit"""
    path = Path(path)
    return path / CHECKPOINT_FILENAME if path.is_dir() or not path.suffix else path


def checkpoint_save(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    out = resolve_path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(checkpoint)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(out)
    logger.info(f"💾 检查点已保存: {out} (step={checkpoint.step}, {len(blob)} 字节)")
    return out


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    source = resolve_path(path)
    try:
        blob = source.read_bytes()
    except OSError as e:
        raise CheckpointException(f"检查点读取失败: {source}", path=str(source), cause=e)
    checkpoint = decode_checkpoint(blob, path=str(source))
    logger.info(f"✅ 检查点已加载: {source} (step={checkpoint.step})")
    return checkpoint


# ==================== 恢复 ====================

def restore_model(checkpoint: Checkpoint) -> STInstructModel:
    """按检查点中的配置与分词器重建模型并载入参数"""
    tokenizer = Tokenizer.from_dict(checkpoint.tokenizer.to_dict())
    model = STInstructModel(checkpoint.config, tokenizer, checkpoint.seed)
    model.params.load_state_arrays(checkpoint.params)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: STInstructModel) -> AdamOptimizer:
    train = checkpoint.config.train
    optimizer = AdamOptimizer(model.params, lr=train.learning_rate, betas=train.betas, eps=train.eps,
                              weight_decay=train.weight_decay, clip_norm=train.grad_clip_norm)
    optimizer.load_state_dict({"t": checkpoint.adam_t, "m": checkpoint.adam_m, "v": checkpoint.adam_v})
    return optimizer

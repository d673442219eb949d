"""
时空依赖编码器

这个模块实现门控空洞卷积编码器，包括：
1. 输入嵌入：每个特征通道独立地线性提升到宽度 d_in
2. 门控空洞卷积层：Ψ = (W_k ∗ E + b_k) ⊙ σ(W_g ∗ E + b_g) + E′
3. 多层级相关性注入：S^(l) = (W_s ∗ Ψ^(l) + b_s) + S^(l−1)，S^(0) = 0
4. 融合：ReLU(Linear(concat(S^(L), mean_t Ψ^(L)))) → 宽度 d
5. 编码器预训练（临时线性预测头 + 绝对误差损失）

编码完全按区域独立进行，不做任何空间混合；F 个特征共享参数。

参数命名：
- encoder.embed.W / encoder.embed.b
- encoder.layer{l}.Wk / bk / Wg / bg / Ws / bs（宽度不一致时另有 Wres）
- encoder.fuse.W / encoder.fuse.b

作者：ST-Instruct
版本：0.1.0
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .config import EncoderConfig
from .exceptions import ErrorCode, ShapeMismatchException
from .st_data import WindowSample, instance_scale

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)


# ==================== 函数式构件 ====================

def gated_conv(
    E: Tensor,
    Wk: Tensor,
    bk: Tensor,
    Wg: Tensor,
    bg: Tensor,
    dilation: int = 1,
    Wres: Optional[Tensor] = None,
) -> Tensor:
    """
    门控空洞卷积层

    Args:
        E: (..., T, d_in)
        Wk, Wg: (T_g, d_in, d_out)
        bk, bg: (d_out,)
        dilation: 空洞因子
        Wres: (d_in, d_out) 残差通道适配，宽度一致时为 None

    Returns:
        Tensor: (..., T′, d_out)，T′ = T − dilation·(T_g − 1)
    """
    kernel = Wk.shape[0]
    needed = dilation * (kernel - 1) + 1
    length = E.shape[-2]
    if length < needed:
        raise ShapeMismatchException(
            "gated_layer", E.shape, Wk.shape,
            reason=f"序列长度 {length} 小于所需感受野 {needed}",
            error_code=ErrorCode.RECEPTIVE_FIELD_ERROR,
        )
    filt = ad.conv1d(E, Wk, dilation) + bk
    gate = ad.sigmoid(ad.conv1d(E, Wg, dilation) + bg)
    out_length = filt.shape[-2]
    residual = E[..., length - out_length:, :]
    if Wres is not None:
        residual = residual @ Wres
    elif residual.shape[-1] != filt.shape[-1]:
        raise ShapeMismatchException("gated_layer", residual.shape, filt.shape, reason="残差宽度不一致且没有 Wres")
    return filt * gate + residual


def inject(psi: Tensor, Ws: Tensor, bs: Tensor, previous: Optional[Tensor] = None) -> Tensor:
    """
    多层级相关性注入

    W_s 卷积后在剩余时间轴上取均值；核长等于剩余长度时即完全折叠时间轴。

    Args:
        psi: (..., T′, d_out)
        Ws: (T_S, d_out, d_out′)
        bs: (d_out′,)
        previous: S^(l−1)，None 表示 S^(0) = 0

    Returns:
        Tensor: (..., d_out′)
    """
    collapsed = ad.mean(ad.conv1d(psi, Ws, 1), axis=-2) + bs
    return collapsed if previous is None else collapsed + previous


# ==================== 编码器 ====================

class STEncoder:
    """
    门控空洞卷积时空编码器

    输入 (R, H, F) 历史窗口，输出 Ψ̃ (R, F, d)。
    """

    def __init__(self, config: EncoderConfig, history_length: int, params: ParameterSet,
                 rng: np.random.Generator, prefix: str = "encoder"):
        if config.receptive_field > history_length:
            raise ShapeMismatchException(
                "encoder", (history_length,), (config.receptive_field,),
                reason="历史长度小于编码器感受野",
                error_code=ErrorCode.RECEPTIVE_FIELD_ERROR,
            )
        self.config = config
        self.history_length = history_length
        self.params = params
        self.prefix = prefix

        p = prefix
        params.create(f"{p}.embed.W", (1, config.d_in), rng, fan_in=1)
        params.create(f"{p}.embed.b", (config.d_in,), rng, zeros=True)

        length = history_length
        width = config.d_in
        self.lengths: List[int] = []
        for layer, dilation in enumerate(config.dilation):
            name = f"{p}.layer{layer}"
            fan_in = config.gate_kernel * width
            params.create(f"{name}.Wk", (config.gate_kernel, width, config.d_out), rng, fan_in=fan_in)
            params.create(f"{name}.bk", (config.d_out,), rng, zeros=True)
            params.create(f"{name}.Wg", (config.gate_kernel, width, config.d_out), rng, fan_in=fan_in)
            params.create(f"{name}.bg", (config.d_out,), rng, zeros=True)
            if width != config.d_out:
                params.create(f"{name}.Wres", (width, config.d_out), rng, fan_in=width)
            length -= dilation * (config.gate_kernel - 1)
            span = length if config.injection_kernel is None else min(config.injection_kernel, length)
            params.create(f"{name}.Ws", (span, config.d_out, config.d_out_prime), rng, fan_in=span * config.d_out)
            params.create(f"{name}.bs", (config.d_out_prime,), rng, zeros=True)
            self.lengths.append(length)
            width = config.d_out

        fuse_in = config.d_out_prime + config.d_out
        params.create(f"{p}.fuse.W", (fuse_in, config.d), rng, fan_in=fuse_in)
        params.create(f"{p}.fuse.b", (config.d,), rng, zeros=True)
        logger.debug(f"🔧 编码器初始化: L={config.n_layers}, 感受野 {config.receptive_field}, 时间长度 {self.lengths}")

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    # ---------- 各阶段 ----------
    def embed_input(self, history) -> Tensor:
        """(R, H, F) → E (R, F, H, d_in)，每个特征是独立序列"""
        values = history.data if isinstance(history, Tensor) else np.asarray(history)
        if values.ndim != 3:
            raise ShapeMismatchException("embed_input", values.shape, reason="期望 (R, H, F)")
        x = Tensor(np.transpose(values, (0, 2, 1))[..., None], dtype=self._p("embed.W").dtype)
        return x @ self._p("embed.W") + self._p("embed.b")

    def gated_layer(self, E: Tensor, layer: int) -> Tensor:
        name = f"layer{layer}"
        res_key = f"{self.prefix}.{name}.Wres"
        return gated_conv(
            E,
            self._p(f"{name}.Wk"), self._p(f"{name}.bk"),
            self._p(f"{name}.Wg"), self._p(f"{name}.bg"),
            dilation=self.config.dilation[layer],
            Wres=self.params[res_key] if res_key in self.params else None,
        )

    def layer_outputs(self, history) -> List[Tensor]:
        """逐层输出 Ψ^(1..L)"""
        E = self.embed_input(history)
        outputs = []
        for layer in range(self.config.n_layers):
            E = self.gated_layer(E, layer)
            outputs.append(E)
        return outputs

    def inject_and_fuse(self, psis: Sequence[Tensor]) -> Tensor:
        """多层级注入后融合为 Ψ̃ (R, F, d)"""
        if len(psis) != self.config.n_layers:
            raise ShapeMismatchException(
                "inject_and_fuse", (len(psis),), (self.config.n_layers,), reason="层输出数量与层数不一致"
            )
        s = None
        for layer, psi in enumerate(psis):
            s = inject(psi, self._p(f"layer{layer}.Ws"), self._p(f"layer{layer}.bs"), s)
        pooled = ad.mean(psis[-1], axis=-2)
        fused = ad.concat([s, pooled]) @ self._p("fuse.W") + self._p("fuse.b")
        return ad.relu(fused)

    def encode(self, history) -> Tensor:
        """
        完整编码

        Args:
            history: (R, H, F) 已标准化的历史窗口

        Returns:
            Tensor: Ψ̃ (R, F, d)
        """
        values = history.data if isinstance(history, Tensor) else np.asarray(history)
        if values.ndim != 3 or values.shape[1] < self.config.receptive_field:
            raise ShapeMismatchException(
                "encode", values.shape, reason=f"历史长度需不小于感受野 {self.config.receptive_field}",
                error_code=ErrorCode.RECEPTIVE_FIELD_ERROR,
            )
        if values.shape[1] != self.history_length:
            raise ShapeMismatchException("encode", values.shape, reason=f"历史长度需为 {self.history_length}")
        return self.inject_and_fuse(self.layer_outputs(values))

    def parameter_names(self) -> List[str]:
        return [n for n in self.params.names() if n.startswith(self.prefix + ".")]


# ==================== 编码器预训练 ====================

def pretrain_encoder(
    encoder: STEncoder,
    windows: Sequence[WindowSample],
    epochs: int,
    prediction_length: int,
    learning_rate: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> List[float]:
    """
    用临时线性预测头在训练窗口上预训练编码器

    预测头只存在于本函数内；目标为与历史同尺度的标准化值，损失为绝对误差。

    Returns:
        List[float]: 每个 epoch 的平均损失
    """
    if epochs <= 0 or not windows:
        return []
    rng = np.random.default_rng(seed)
    head = Tensor(
        ad.uniform_init(rng, (encoder.config.d, prediction_length), encoder.config.d),
        requires_grad=True, name="pretrain.W",
    )
    tensors: Dict[str, Tensor] = {name: encoder.params[name] for name in encoder.parameter_names()}
    tensors["pretrain.W"] = head
    view = ParameterSet.from_tensors(tensors)
    optimizer = ad.AdamOptimizer(view, lr=learning_rate)

    groups: Dict[int, List[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(w.history.shape[1], []).append(i)

    logger.info(f"🔄 编码器预训练: {len(windows)} 个窗口, {epochs} 轮")
    history_losses = []
    for epoch in range(epochs):
        losses = []
        for indices in groups.values():
            order = rng.permutation(indices)
            for start in range(0, len(order), batch_size):
                batch = [windows[i] for i in order[start:start + batch_size]]
                history = np.stack([w.history for w in batch])
                target = np.stack([w.target for w in batch])
                scaled, mean, std = instance_scale(history)
                goal = np.transpose((target - mean) / std, (0, 2, 1))
                view.zero_grads()
                prediction = encoder.encode(scaled) @ head
                loss = ad.l1_loss(prediction, goal)
                ad.backward(loss)
                optimizer.step()
                losses.append(loss.item())
        history_losses.append(float(np.mean(losses)))
        logger.debug(f"📊 预训练 epoch {epoch + 1}: L1={history_losses[-1]:.4f}")
    logger.info(f"✅ 编码器预训练完成, 最终 L1={history_losses[-1]:.4f}")
    return history_losses

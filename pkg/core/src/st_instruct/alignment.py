"""
对齐投影与回归头

1. 对齐投影：H = Ψ̃·W_p + b_p，把编码器输出映射到语言模型宽度 d_L
2. 回归层：Ŷ = W3·[ReLU(W1·H), ReLU(W2·Γ)]（无偏置）
3. 分类包装：对同一回归输出逐元素取 sigmoid

第 f 个 <ST_HIS> 携带 H[r,f]，第 f 个 <ST_PRE> 的隐状态即 Γ[r,f]。

作者：ST-Instruct
版本：0.1.0
"""

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .exceptions import ShapeMismatchException

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)


def project(psi: Tensor, W_p: Tensor, b_p: Tensor) -> Tensor:
    """(…, d) → (…, d_L)"""
    if psi.shape[-1] != W_p.shape[0]:
        raise ShapeMismatchException("project", psi.shape, W_p.shape, reason="编码器宽度与 W_p 不一致")
    return psi @ W_p + b_p


def regress(H: Tensor, gamma: Tensor, W1: Tensor, W2: Tensor, W3: Tensor) -> Tensor:
    """
    回归层

    Args:
        H: (…, d_L)
        gamma: (…, d_L)
        W1, W2: (d′, d_L)
        W3: (P, 2d′)

    Returns:
        Tensor: (…, P)
    """
    if H.shape != gamma.shape:
        raise ShapeMismatchException("regress", H.shape, gamma.shape)
    h_branch = ad.relu(H @ ad.transpose(W1, (1, 0)))
    g_branch = ad.relu(gamma @ ad.transpose(W2, (1, 0)))
    return ad.concat([h_branch, g_branch]) @ ad.transpose(W3, (1, 0))


def classify(y_hat: Tensor) -> Tensor:
    """分类概率：sigmoid(Ŷ)，指标阶段以 0.5 为阈值"""
    return ad.sigmoid(y_hat)


class AlignmentProjection:
    """对齐投影参数 align.W_p (d, d_L) / align.b_p (d_L)"""

    def __init__(self, d: int, d_lm: int, params: ParameterSet, rng: np.random.Generator, prefix: str = "align"):
        self.params = params
        self.prefix = prefix
        params.create(f"{prefix}.W_p", (d, d_lm), rng, fan_in=d)
        params.create(f"{prefix}.b_p", (d_lm,), rng, zeros=True)

    def __call__(self, psi: Tensor) -> Tensor:
        return project(psi, self.params[f"{self.prefix}.W_p"], self.params[f"{self.prefix}.b_p"])


class RegressionHead:
    """回归层参数 regression.W1 / W2 (d′, d_L)、W3 (P, 2d′)"""

    def __init__(self, d_lm: int, hidden: int, prediction_length: int, params: ParameterSet,
                 rng: np.random.Generator, prefix: str = "regression"):
        self.params = params
        self.prefix = prefix
        self.prediction_length = prediction_length
        params.create(f"{prefix}.W1", (hidden, d_lm), rng, fan_in=d_lm)
        params.create(f"{prefix}.W2", (hidden, d_lm), rng, fan_in=d_lm)
        params.create(f"{prefix}.W3", (prediction_length, 2 * hidden), rng, fan_in=2 * hidden)

    def __call__(self, H: Tensor, gamma: Tensor) -> Tensor:
        p = self.prefix
        return regress(H, gamma, self.params[f"{p}.W1"], self.params[f"{p}.W2"], self.params[f"{p}.W3"])

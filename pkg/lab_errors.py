# -*- coding: utf-8 -*-
"""
异常层级与退出码：各模块只抛下列异常，run_pipeline 统一映射为退出码。
0 通过，1 校验失败，2 配置错误，3 数值失败。
"""
from typing import Optional

import numpy as np

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3


class LabError(Exception):
    """所有实验室异常的基类。"""

    exit_code = EXIT_NUMERICAL_FAILURE


class DomainError(LabError, ValueError):
    """参数或点不在算子定义域内。"""


class DepthOverflowError(LabError):
    """构造深度超出双精度可分辨范围。"""


class ConvergenceError(LabError):
    """标量反演（二分）未收敛，附带出问题的点。"""

    def __init__(self, message: str, points: Optional[np.ndarray] = None):
        super().__init__(message)
        self.points = None if points is None else np.atleast_2d(np.asarray(points, dtype=float))

    def __str__(self) -> str:
        base = super().__str__()
        if self.points is None or self.points.size == 0:
            return base
        head = np.array2string(self.points[:3], precision=6)
        return f"{base}（首个失败点: {head}）"


class ConfigError(LabError):
    """配置校验失败；field 为点号路径，例如 geometry.alpha。"""

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericalError(LabError):
    """其它数值失败（积分器失败、非有限值等）。"""


class JacobianSingularityError(NumericalError):
    """雅可比行列式绝对值低于阈值。"""


class SupportViolationError(LabError):
    """时间变换的支撑集不在允许的子圆盘内。"""


class DegeneracyError(NumericalError):
    """辛形式 ω̂ 在采样点退化。"""


class MassMismatchError(NumericalError):
    """单元质量或总质量与解析簿记不符。"""


class MissingArtifactError(LabError):
    """verify 所需的 construct 产物缺失。"""

    exit_code = EXIT_VERIFY_FAILED


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, LabError):
        return exc.exit_code
    return EXIT_NUMERICAL_FAILURE

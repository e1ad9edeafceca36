"""
异常层次与退出码映射

命令行约定：0 成功，1 配置/参数错误，2 数值不收敛。
"""

from typing import Optional


class RelayLabError(Exception):
    """所有领域异常的基类"""


class DomainError(RelayLabError, ValueError):
    """参数或不变量不满足"""


class InclusionExclusionCapExceeded(DomainError):
    """竞争者数量超过容斥展开上限，调用方应改用蒙特卡洛估计"""

    def __init__(self, competitors: int, cap: int):
        super().__init__(f"竞争流数量 {competitors} 超过容斥上限 {cap}")
        self.competitors = competitors
        self.cap = cap


class ConfigError(RelayLabError):
    """配置文件无法读取或内容非法"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path:
            location = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{location}{message}")


class ContractViolation(RelayLabError):
    """内部契约被破坏（例如半双工中继同时收发）"""


class ConvergenceError(RelayLabError):
    """数值求解未收敛（仅用于命令行选择退出码）"""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONCONVERGED = 2


def exit_code_for(exc: BaseException) -> int:
    """把异常映射为命令行退出码"""
    if isinstance(exc, ConvergenceError):
        return EXIT_NONCONVERGED
    return EXIT_CONFIG

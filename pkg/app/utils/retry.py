from typing import Callable, Optional

from app.config import settings
from app.models import FixedPointReport
from app.utils.logger import setup_logger

logger = setup_logger(__name__)


def retry_with_damping(
    solve: Callable[[float], FixedPointReport],
    damping: Optional[float] = None,
    max_retries: Optional[int] = None,
    backoff: Optional[float] = None,
) -> FixedPointReport:
    """
    带阻尼退避的重解

    不收敛时把阻尼系数乘以 backoff 后重新求解，最多 max_retries 次。

    Args:
        solve: 以阻尼系数为参数的求解函数
        damping: 初始阻尼系数
        max_retries: 最大重试次数
        backoff: 每次重试的阻尼缩放因子

    Returns:
        第一个收敛的结果；全部失败时返回最后一次结果（converged=False）
    """
    damping = settings.SOLVER_DAMPING if damping is None else damping
    max_retries = settings.SOLVER_RETRIES if max_retries is None else max_retries
    backoff = settings.SOLVER_DAMPING_BACKOFF if backoff is None else backoff

    report = solve(damping)
    for attempt in range(1, max_retries + 1):
        if report.converged:
            break
        damping *= backoff
        logger.warning(
            f"重试 {attempt}/{max_retries}：残差 {report.residual:.2e}，阻尼降为 {damping:g}"
        )
        report = solve(damping)

    if not report.converged:
        logger.error(f"✗ 重试失败 (已尝试 {max_retries + 1} 次)：残差 {report.residual:.2e}")
    return report

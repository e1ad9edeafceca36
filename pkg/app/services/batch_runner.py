"""
批量任务执行器

在进程池上并行执行相互独立、可 pickle 的任务（扫描点、蒙特卡洛种子、计划对、栅格行块）。
信号量限制同时在途的任务数，结果始终按提交顺序返回。
"""

import asyncio
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence

from app.config import settings
from app.utils.logger import setup_logger

logger = setup_logger(__name__)


class BatchRunner:
    """批量执行器 - jobs = 1 时在当前进程内顺序执行"""

    def __init__(self, jobs: Optional[int] = None):
        """
        Args:
            jobs: 并发进程数，默认取配置 DEFAULT_JOBS
        """
        self.jobs = max(1, jobs if jobs is not None else settings.DEFAULT_JOBS)

    async def run_async(
        self,
        tasks: Sequence[Callable[[], Any]],
        progress_callback: Optional[Callable[[Dict], None]] = None,
    ) -> List[Any]:
        """
        异步执行全部任务

        Args:
            tasks: 无参可调用对象（通常是模块级函数的 functools.partial）
            progress_callback: 每完成一个任务调用一次，参数 {"total", "completed", "index"}

        Returns:
            与 tasks 顺序一致的结果列表；任一任务抛出异常则向上传播
        """
        total = len(tasks)
        if total == 0:
            return []
        completed = 0

        def _report(index: int) -> None:
            nonlocal completed
            completed += 1
            if progress_callback:
                progress_callback({"total": total, "completed": completed, "index": index})
            logger.debug(f"批量进度：{completed}/{total}")

        if self.jobs == 1:
            results = []
            for index, task in enumerate(tasks):
                results.append(task())
                _report(index)
            return results

        logger.info(f"开始并行执行 {total} 个任务，并发数：{self.jobs}")
        semaphore = asyncio.Semaphore(self.jobs)
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:

            async def _one(index: int, task: Callable[[], Any]) -> Any:
                async with semaphore:
                    result = await loop.run_in_executor(pool, task)
                    _report(index)
                    return result

            results = await asyncio.gather(*(_one(k, task) for k, task in enumerate(tasks)))
        logger.info(f"✓ 并行执行完成：{total} 个任务")
        return list(results)

    def run(
        self,
        tasks: Sequence[Callable[[], Any]],
        progress_callback: Optional[Callable[[Dict], None]] = None,
    ) -> List[Any]:
        """同步入口（命令行与服务层使用）"""
        if self.jobs == 1:
            return [task() for task in tasks]
        return asyncio.run(self.run_async(tasks, progress_callback))

import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.cli.commands import HANDLERS
from app.config import settings
from app.services.monitor_service import MonitorService
from app.utils.errors import (
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    ConvergenceError,
    RelayLabError,
    exit_code_for,
)
from app.utils.logger import bind_run_context, clear_run_context, setup_logger

logger = setup_logger(__name__)


class _Parser(argparse.ArgumentParser):
    """参数错误按配置错误处理（退出码 1），不使用 argparse 默认的 2"""

    def error(self, message: str):
        raise ConfigError(f"参数错误：{message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="relaylab",
        description=f"{settings.APP_NAME} v{settings.APP_VERSION}",
    )
    parser.add_argument("--version", action="version", version=settings.APP_VERSION)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON 配置文件路径")
    common.add_argument("--out", default=settings.OUTPUT_DIR, help="输出目录（默认 ./out）")
    common.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")
    common.add_argument("--jobs", type=int, default=settings.DEFAULT_JOBS, help="并行进程数")
    common.add_argument("--svg", action="store_true", help="同时输出 SVG 图")
    common.add_argument("--metrics", action="store_true", help="输出 Prometheus 文本指标 metrics.prom")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="求解平稳吞吐（不动点）")
    sub.add_parser("sweep", parents=[common], help="beta / alpha / gamma 参数扫描")
    sub.add_parser("mc", parents=[common], help="时隙级蒙特卡洛仿真（附解析对照）")
    sub.add_parser("sim", parents=[common], help="TTI 级中继系统仿真")
    sub.add_parser("compare", parents=[common], help="比较两个子帧计划")
    sub.add_parser("map", parents=[common], help="渲染 SINR 栅格图")
    schema = sub.add_parser("schema", help="导出配置文件 JSON Schema")
    schema.add_argument("--out", default=settings.OUTPUT_DIR, help="输出目录")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """命令行入口，返回退出码：0 成功，1 配置错误，2 数值不收敛"""
    monitor = MonitorService()
    command = "?"
    clear_run_context()
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        bind_run_context(subcommand=command)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError(f"--jobs 必须为正整数：{args.jobs}")
        code = HANDLERS[command](args, monitor)
    except ConvergenceError as e:
        # 结果与指标已写出
        logger.error(f"✗ {e}")
        return exit_code_for(e)
    except RelayLabError as e:
        code = exit_code_for(e)
        logger.error(f"✗ {e}")
    except ValidationError as e:
        code = EXIT_CONFIG
        logger.error(f"✗ 参数不合法：{e.errors()[0].get('msg', e)}")
    except Exception as e:
        code = EXIT_CONFIG
        logger.exception(f"✗ 未预期的错误：{e}")
    if code != EXIT_OK:
        monitor.record_cli_run(command, code)
    return code


if __name__ == "__main__":
    sys.exit(main())

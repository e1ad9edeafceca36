import logging
import json
import sys
from datetime import datetime, timezone
from typing import Any, Dict

from app.config import settings

# 标准 LogRecord 属性，其余属性视为调用方通过 extra= 附加的字段
_RECORD_ATTRS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime", "run", "run_tag"}

# 当前运行的上下文：subcommand / config_path / config_hash
_run_context: Dict[str, Any] = {}


def bind_run_context(**fields: Any) -> None:
    """为之后的日志记录附加本次运行的上下文，值为 None 的字段忽略"""
    _run_context.update({key: value for key, value in fields.items() if value is not None})


def clear_run_context() -> None:
    _run_context.clear()


def run_context() -> Dict[str, Any]:
    return dict(_run_context)


class RunContextFilter(logging.Filter):
    """把运行上下文挂到每条记录上"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run = run_context()
        parts = [str(record.run[key]) for key in ("subcommand",) if key in record.run]
        if "config_hash" in record.run:
            parts.append(str(record.run["config_hash"])[:8])
        record.run_tag = f"[{' '.join(parts)}] " if parts else ""
        return True


class JsonFormatter(logging.Formatter):
    """JSON 格式日志：固定字段 + 运行上下文 + extra= 附加字段"""

    def format(self, record):
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        log_data.update(getattr(record, "run", None) or {})
        for key, value in vars(record).items():
            if key not in _RECORD_ATTRS and key not in log_data:
                log_data[key] = value

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=str)


def setup_logger(name: str) -> logging.Logger:
    """设置模块日志（输出到 stderr，避免与数据输出混在一起）"""
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))
    logger.propagate = False

    # 清除现有处理器
    logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.addFilter(RunContextFilter())

    if settings.LOG_FORMAT == "json":
        formatter = JsonFormatter()
    else:
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(run_tag)s%(message)s'
        )

    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger

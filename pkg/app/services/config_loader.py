"""
配置加载器

读取 JSON 配置并用 app.schemas 中的模型校验；所有失败都转换为带行号的 ConfigError。
同时负责规范化 JSON、配置哈希与 manifest.json 的写出。
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Sequence, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from app.config import settings
from app.models import RunManifest
from app.utils.errors import ConfigError
from app.utils.logger import bind_run_context, setup_logger

logger = setup_logger(__name__)

M = TypeVar("M", bound=BaseModel)


def locate_key(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """
    按校验错误的位置路径在原文中查找对应键所在的行（从 1 开始）

    依次查找路径上的每个键名，每次从上一个命中处往后找；一个都找不到时返回 None。
    """
    position = None
    start = 0
    for part in loc:
        if not isinstance(part, str):
            continue
        found = text.find(f'"{part}"', start)
        if found >= 0:
            position = found
            start = found + 1
    if position is None:
        return None
    return text.count("\n", 0, position) + 1


def canonical_json(data: Any) -> str:
    """键排序、紧凑分隔符的规范化 JSON"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(data: Any) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


class ConfigLoader:
    """配置加载器 - 读取、校验并记录一次运行的配置"""

    def __init__(self, config_path: Union[str, Path]):
        """
        Args:
            config_path: JSON 配置文件路径
        """
        self.config_path = Path(config_path)
        self.text: Optional[str] = None

    def read_text(self) -> str:
        try:
            self.text = self.config_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"无法读取配置文件：{e.strerror or e}", str(self.config_path)) from e
        return self.text

    def load(self, model: Type[M]) -> M:
        """
        加载并校验配置

        Args:
            model: app.schemas 中的配置模型

        Returns:
            校验后的模型实例

        Raises:
            ConfigError: 文件不可读、JSON 语法错误或内容不合法
        """
        path = str(self.config_path)
        text = self.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            logger.error(f"✗ JSON 解析错误：{path}:{e.lineno}: {e.msg}")
            raise ConfigError(f"JSON 语法错误：{e.msg}", path, e.lineno) from e

        if not isinstance(data, dict):
            raise ConfigError("配置顶层必须是 JSON 对象", path, 1)

        try:
            config = model.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            loc = first.get("loc", ())
            where = ".".join(str(part) for part in loc) or "<root>"
            message = f"{where}: {first.get('msg', '配置不合法')}"
            line = locate_key(text, loc)
            logger.error(f"✗ 配置校验失败：{path}:{line or '?'}: {message}")
            raise ConfigError(message, path, line) from e

        bind_run_context(config_path=path)
        logger.info(f"✓ 配置加载成功：{path}")
        return config


def write_manifest(
    output_dir: Path,
    subcommand: str,
    config_path: Union[str, Path],
    resolved_config: dict,
    seed_override: Optional[int] = None,
) -> RunManifest:
    """写出 manifest.json（不含时间戳，同一输入逐字节一致）"""
    manifest = RunManifest(
        subcommand=subcommand,
        config_path=str(config_path),
        output_dir=str(output_dir),
        seed_override=seed_override,
        tool_version=settings.APP_VERSION,
        config_hash=config_hash({"subcommand": subcommand, "config": resolved_config}),
        resolved_config=resolved_config,
    )
    bind_run_context(config_hash=manifest.config_hash)
    target = Path(output_dir) / "manifest.json"
    with open(target, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest.model_dump(mode="json"), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return manifest

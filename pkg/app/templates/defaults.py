# 默认数据（CQI 效率表、示例配置路径）
import json
from pathlib import Path
from typing import List, Optional

TEMPLATES_DIR = Path(__file__).resolve().parent

# 默认效率表（JSON 未找到时使用）
DEFAULT_EFFICIENCY_TABLE = [
    0.0,
    0.15, 0.23, 0.38, 0.60, 0.88,
    1.18, 1.48, 1.91, 2.41, 2.73,
    3.32, 3.90, 4.52, 5.12, 5.55,
]


def load_efficiency_table(json_path: Optional[Path] = None) -> List[float]:
    """
    从 JSON 文件加载 CQI 效率表。

    如果 JSON 文件存在且合法（16 项、单调不减），优先使用 JSON；否则使用默认表。

    Args:
        json_path: JSON 文件路径，默认 templates/efficiency_table.json

    Returns:
        16 项效率表
    """
    path = Path(json_path) if json_path else TEMPLATES_DIR / "efficiency_table.json"
    if path.exists():
        try:
            with open(path, "r", encoding="utf-8") as f:
                table = [float(v) for v in json.load(f).get("efficiency", [])]
            if len(table) == 16 and all(b >= a for a, b in zip(table, table[1:])):
                return table
        except (OSError, ValueError, AttributeError):
            # 解析失败，使用默认表
            pass
    return list(DEFAULT_EFFICIENCY_TABLE)


def example_path(name: str) -> Path:
    """随仓库发布的示例配置，例如 example_path("solve_baseline.json")"""
    return TEMPLATES_DIR / "examples" / name


EFFICIENCY_TABLE = load_efficiency_table()

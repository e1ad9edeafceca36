"""
结果输出

CSV：固定列顺序，'.' 小数点，浮点数统一 format(x, ".10g")，行尾 "\n"。
SVG：matplotlib Agg 后端，固定 svg.hashsalt 且不写日期元数据，同一输入逐字节一致。
"""

import csv
import math
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.models import FlowSpec, SinrGrid, SweepRow, TtiRecord  # noqa: E402
from app.utils.logger import setup_logger  # noqa: E402

logger = setup_logger(__name__)

plt.rcParams["svg.hashsalt"] = "relaylab"
plt.rcParams["svg.fonttype"] = "none"


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".10g")
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """写 CSV 文件"""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        count = 0
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])
            count += 1
    logger.debug(f"写出 {path.name}：{count} 行")
    return path


# ============ 各模块的 CSV 约定 ============

SWEEP_COLUMNS = ["residual", "converged", "iterations"]
TRACE_HEADER = ["tti", "kind", "node", "ue", "cqi", "mcs", "bytes"]


def sweep_header(flows: Sequence[FlowSpec]) -> List[str]:
    """每个扫描点一行：parameter, value, theta_<id>..., residual, converged, iterations"""
    return ["parameter", "value", *(f"theta_{flow.id}" for flow in flows), *SWEEP_COLUMNS]


def sweep_rows(rows: Sequence[SweepRow]) -> List[list]:
    return [
        [row.parameter, row.value, *row.report.theta.theta, row.report.residual, row.report.converged, row.report.iterations]
        for row in rows
    ]


def trace_rows(records: Sequence[TtiRecord]) -> List[list]:
    """逐 TTI 轨迹：每个终端一行，B 子帧的回程流以 node=donor、ue=bh:<ue> 追加"""
    out = []
    for record in records:
        for entry in record.ues:
            out.append([record.tti, record.kind, entry.node, entry.ue, entry.cqi, entry.mcs, entry.bytes])
        for entry in record.backhaul:
            out.append([record.tti, record.kind, "donor", f"bh:{entry.ue}", entry.cqi, entry.mcs, entry.bytes])
    return out


def write_sinr_grid(path: Path, grid: SinrGrid) -> Path:
    """首行为 origin_x, origin_y, cell_size 的取值，其后每行一行像素（y 递增）；场景见文件名"""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([format_cell(float(grid.origin[0])), format_cell(float(grid.origin[1])),
                         format_cell(float(grid.cell_size))])
        for row in grid.values:
            writer.writerow([format_cell(float(v)) for v in row])
    return path


# ============ SVG ============

def _save_svg(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug(f"写出 {path.name}")
    return path


def plot_sweep_svg(rows: Sequence[SweepRow], flows: Sequence[FlowSpec], path: Path) -> Path:
    """横轴为扫描参数，每条流一条曲线"""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row.value for row in rows]
    for k, flow in enumerate(flows):
        ax.plot(xs, [row.report.theta[k] for row in rows], marker="o", markersize=3,
                label=f"flow {flow.id} ({flow.flow_class.value})")
    parameter = rows[0].parameter if rows else ""
    if parameter == "beta" and xs and min(xs) > 0 and max(xs) / min(xs) > 100:
        ax.set_xscale("log")
    ax.set_xlabel(parameter)
    ax.set_ylabel("theta")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save_svg(fig, path)


def plot_sinr_map_svg(grid: SinrGrid, path: Path, marks: Optional[Sequence] = None) -> Path:
    """灰度热力图"""
    fig, ax = plt.subplots(figsize=(6, 5))
    height, width = grid.shape
    x0, y0 = grid.origin
    extent = (x0, x0 + width * grid.cell_size, y0, y0 + height * grid.cell_size)
    image = ax.imshow(grid.values, origin="lower", extent=extent, cmap="gray", interpolation="nearest")
    fig.colorbar(image, ax=ax, label="SINR (dB)")
    for xy in marks or []:
        ax.plot(xy[0], xy[1], marker="^", color="red", markersize=5)
    ax.set_title(grid.scenario)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    return _save_svg(fig, path)


def plot_mc_trace_svg(points: Sequence, flows: Sequence[FlowSpec], path: Path, oracle=None) -> Path:
    """EWMA 轨迹，可选画出解析不动点"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, flow in enumerate(flows):
        series = [(p.slot, p.theta_bar) for p in points if p.flow_id == flow.id]
        if series:
            ax.plot([s for s, _ in series], [v for _, v in series], label=f"flow {flow.id}")
        if oracle is not None and not math.isnan(oracle[k]):
            ax.axhline(oracle[k], linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("slot")
    ax.set_ylabel("theta_bar")
    ax.legend()
    return _save_svg(fig, path)

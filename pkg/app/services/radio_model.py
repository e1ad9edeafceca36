"""
无线链路模型

对数距离路损、单位均值指数衰落、SINR、CQI 量化与 MCS 频谱效率，
以及有/无中继发射两种场景下的 SINR 栅格图。

发射机编号：0 为宿主基站，r + 1 为第 r 个中继（见 app.models.relay_tx）。
"""

import math
from functools import partial
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.models import (
    DONOR_TX,
    LinkState,
    MapScenario,
    NodeGeometry,
    Receiver,
    SinrGrid,
    relay_tx,
)
from app.templates.defaults import EFFICIENCY_TABLE
from app.utils.errors import ContractViolation, DomainError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

Bounds = Tuple[float, float, float, float]


# ============ 功率与路损 ============

def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


def pathloss_db(distance, exponent: float, reference_db: float, min_distance: float = 1.0):
    """PL(d) = PL0 + 10 n log10(max(d, d_min))，d 以米计"""
    d = np.maximum(np.asarray(distance, dtype=float), min_distance)
    return reference_db + 10.0 * exponent * np.log10(d)


def _distances(geometry: NodeGeometry, points: np.ndarray) -> np.ndarray:
    """各发射机到各点的距离，形状 (T, ...)"""
    tx = geometry.tx_positions()
    points = np.asarray(points, dtype=float)
    shape = (len(tx),) + (1,) * (points.ndim - 1) + (2,)
    return np.linalg.norm(points[None, ...] - tx.reshape(shape), axis=-1)


def mean_rx_dbm(geometry: NodeGeometry, points) -> np.ndarray:
    """
    各发射机在各点的平均接收功率（dBm），不含衰落

    Args:
        geometry: 节点几何
        points: 形状 (..., 2) 的坐标

    Returns:
        形状 (T, ...) 的数组，T = 1 + 中继数
    """
    loss = pathloss_db(
        _distances(geometry, points),
        geometry.pathloss_exponent,
        geometry.reference_loss_db,
        geometry.min_distance_m,
    )
    powers = geometry.tx_powers_dbm()
    return powers.reshape((-1,) + (1,) * (loss.ndim - 1)) - loss


def receiver_position(geometry: NodeGeometry, receiver: Receiver) -> Tuple[float, float]:
    if receiver.kind == "ue":
        return geometry.ue_xy[receiver.index]
    return geometry.relay_xy[receiver.index]


# ============ SINR / CQI ============

def _check_half_duplex(receiver: Receiver, active: Iterable[int]) -> None:
    if receiver.kind == "rn" and relay_tx(receiver.index) in set(active):
        raise ContractViolation(f"中继 {receiver.index} 在同一 TTI 内既发射又接收")


def _link_powers(
    geometry: NodeGeometry,
    active: Sequence[int],
    serving: int,
    receiver: Receiver,
    fading: Optional[np.ndarray],
):
    _check_half_duplex(receiver, active)
    rx_dbm = mean_rx_dbm(geometry, np.asarray(receiver_position(geometry, receiver)))
    rx_mw = dbm_to_mw(rx_dbm)
    gains = np.ones(len(rx_mw)) if fading is None else np.asarray(fading, dtype=float)
    signal = float(rx_mw[serving] * gains[serving])
    interference = float(sum(rx_mw[t] * gains[t] for t in active if t != serving))
    return float(rx_dbm[serving]), float(gains[serving]), signal, interference


def sinr_db(
    geometry: NodeGeometry,
    active: Sequence[int],
    serving: int,
    receiver: Receiver,
    fading: Optional[np.ndarray] = None,
) -> float:
    """
    SINR = S / (N + sum I)

    Args:
        geometry: 节点几何
        active: 本 TTI 的发射机集合
        serving: 服务发射机编号；不在 active 中时视为仅上报（不计入干扰）
        receiver: 接收端
        fading: 每个发射机到该接收端的衰落乘子（长度 T），None 表示无衰落

    Raises:
        ContractViolation: 接收中的中继同时出现在发射集合中
    """
    _, _, signal, interference = _link_powers(geometry, active, serving, receiver, fading)
    noise = float(dbm_to_mw(geometry.noise_dbm))
    return float(mw_to_dbm(signal / (noise + interference)))


def evaluate_link(
    geometry: NodeGeometry,
    active: Sequence[int],
    serving: int,
    receiver: Receiver,
    fading: Optional[np.ndarray] = None,
    cqi_floor_db: Optional[float] = None,
    cqi_step_db: Optional[float] = None,
) -> LinkState:
    """单条链路在一个 TTI 内的完整状态（served_mcs 由调度器决定，此处为空）"""
    mean_rx, gain, signal, interference = _link_powers(geometry, active, serving, receiver, fading)
    noise = float(dbm_to_mw(geometry.noise_dbm))
    sinr = float(mw_to_dbm(signal / (noise + interference)))
    return LinkState(
        mean_rx_dbm=mean_rx,
        fading=gain,
        interference_mw=interference,
        sinr_db=sinr,
        cqi=quantize_cqi(sinr, cqi_floor_db, cqi_step_db),
    )


def quantize_cqi(
    sinr: float,
    cqi_floor_db: Optional[float] = None,
    cqi_step_db: Optional[float] = None,
) -> int:
    """CQI = clamp(floor((sinr - floor) / step) + 1, 0, 15)"""
    floor_db = settings.CQI_FLOOR_DB if cqi_floor_db is None else cqi_floor_db
    step_db = settings.CQI_STEP_DB if cqi_step_db is None else cqi_step_db
    if math.isnan(sinr):
        raise DomainError("SINR 不能为 NaN")
    if math.isinf(sinr):
        return 0 if sinr < 0 else 15
    return int(min(15, max(0, math.floor((sinr - floor_db) / step_db) + 1)))


def dequantize_cqi(
    cqi: int,
    cqi_floor_db: Optional[float] = None,
    cqi_step_db: Optional[float] = None,
) -> float:
    """第 cqi 个量化区间的中点 SINR（dB）；CQI 0 返回门限以下半个步长"""
    floor_db = settings.CQI_FLOOR_DB if cqi_floor_db is None else cqi_floor_db
    step_db = settings.CQI_STEP_DB if cqi_step_db is None else cqi_step_db
    if not 0 <= cqi <= 15:
        raise DomainError(f"CQI 超出 0..15：{cqi}")
    return floor_db + (cqi - 0.5) * step_db


def mcs_efficiency(cqi: int, table: Optional[Sequence[float]] = None) -> float:
    """CQI / MCS 对应的频谱效率（bit/符号）"""
    table = EFFICIENCY_TABLE if table is None else table
    if not 0 <= cqi < len(table):
        raise DomainError(f"CQI 超出效率表范围：{cqi}")
    return float(table[cqi])


# ============ 关联 ============

def best_server(
    geometry: NodeGeometry,
    xy: Tuple[float, float],
    include_relays: bool = True,
) -> int:
    """平均接收功率最强的发射机编号（并列取较小编号）"""
    rx = mean_rx_dbm(geometry, np.asarray(xy, dtype=float))
    if not include_relays:
        return DONOR_TX
    return int(np.argmax(rx))


def associate_ues(geometry: NodeGeometry) -> List[Optional[int]]:
    """按最强平均接收功率关联终端：None 表示宿主基站，整数为中继下标"""
    serving = []
    for xy in geometry.ue_xy:
        tx = best_server(geometry, xy)
        serving.append(None if tx == DONOR_TX else tx - 1)
    return serving


# ============ SINR 栅格 ============

def default_bounds(geometry: NodeGeometry, margin: float = 50.0) -> Bounds:
    """所有节点的包围盒外扩 margin 米"""
    points = np.asarray([geometry.donor_xy, *geometry.relay_xy, *geometry.ue_xy], dtype=float)
    x_min, y_min = points.min(axis=0) - margin
    x_max, y_max = points.max(axis=0) + margin
    return float(x_min), float(y_min), float(x_max), float(y_max)


def active_transmitters(geometry: NodeGeometry, scenario: MapScenario) -> List[int]:
    if scenario == "relays_active":
        return [DONOR_TX] + [relay_tx(r) for r in range(geometry.n_relays)]
    return [DONOR_TX]


def render_rows(
    geometry: NodeGeometry,
    active: Sequence[int],
    xs: np.ndarray,
    ys: np.ndarray,
) -> np.ndarray:
    """计算若干行像素的平均 SINR（dB），最佳服务者取活跃发射机中平均接收功率最大者"""
    grid = np.stack(np.meshgrid(xs, ys), axis=-1)
    rx_mw = dbm_to_mw(mean_rx_dbm(geometry, grid))[list(active)]
    best = np.argmax(rx_mw, axis=0)
    index = np.arange(len(active)).reshape(-1, 1, 1)
    signal = np.take_along_axis(rx_mw, best[None, ...], axis=0)[0]
    interference = np.sum(np.where(index == best[None, ...], 0.0, rx_mw), axis=0)
    noise = float(dbm_to_mw(geometry.noise_dbm))
    return mw_to_dbm(signal / (noise + interference))


def render_sinr_map(
    geometry: NodeGeometry,
    scenario: MapScenario,
    resolution: float,
    bounds: Optional[Bounds] = None,
    runner=None,
) -> SinrGrid:
    """
    渲染平均 SINR 栅格图（不含衰落）

    Args:
        geometry: 节点几何
        scenario: relays_active（中继发射）或 relays_silent（中继静默）
        resolution: 像素边长（米）
        bounds: (x_min, y_min, x_max, y_max)；默认所有节点包围盒外扩 50 m
        runner: 可选 BatchRunner，按行块并行

    Raises:
        DomainError: 栅格面积为零或未覆盖全部节点
    """
    if resolution <= 0:
        raise DomainError(f"像素边长必须为正：{resolution}")
    x_min, y_min, x_max, y_max = bounds if bounds is not None else default_bounds(geometry)
    if x_max <= x_min or y_max <= y_min:
        raise DomainError("栅格面积为零")
    points = np.asarray([geometry.donor_xy, *geometry.relay_xy, *geometry.ue_xy], dtype=float)
    if (
        np.any(points[:, 0] < x_min) or np.any(points[:, 0] > x_max)
        or np.any(points[:, 1] < y_min) or np.any(points[:, 1] > y_max)
    ):
        raise DomainError("栅格未覆盖全部节点")

    width = int(math.ceil((x_max - x_min) / resolution))
    height = int(math.ceil((y_max - y_min) / resolution))
    xs = x_min + (np.arange(width) + 0.5) * resolution
    ys = y_min + (np.arange(height) + 0.5) * resolution
    active = active_transmitters(geometry, scenario)

    if runner is None or runner.jobs <= 1:
        values = render_rows(geometry, active, xs, ys)
    else:
        chunks = np.array_split(ys, min(runner.jobs, height))
        tasks = [partial(render_rows, geometry, active, xs, chunk) for chunk in chunks if len(chunk)]
        values = np.concatenate(runner.run(tasks), axis=0)

    logger.debug(f"SINR 栅格 {scenario}：{height}x{width}，像素 {resolution:g} m")
    return SinrGrid(origin=(x_min, y_min), cell_size=resolution, values=values, scenario=scenario)

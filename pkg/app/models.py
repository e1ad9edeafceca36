"""
领域模型

调度分析、时隙仿真、无线模型与系统级仿真共用的数据类型。
不可变的值对象用 pydantic 模型表达并在构造时校验不变量；
有状态的中继缓存是普通类。
"""

from enum import Enum
from fractions import Fraction
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

from app.utils.errors import DomainError


# ============ 调度分析 ============

class FlowClass(str, Enum):
    """流类别"""
    DIRECT = "direct"
    RELAYED = "relayed"


class Phase(str, Enum):
    """帧内阶段：中继阶段所有流竞争，接入阶段只有直连流"""
    RELAY = "relay"
    ACCESS = "access"


class FlowSpec(BaseModel):
    """一条可调度流（lambda 为指数分布速率参数，平均增益 1/lambda）"""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    id: int = Field(ge=0)
    flow_class: FlowClass = Field(alias="class")
    lambda_r: float = Field(gt=0)
    lambda_a: Optional[float] = Field(default=None, gt=0)
    incentive: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def check_class(self) -> "FlowSpec":
        if self.flow_class is FlowClass.RELAYED and self.lambda_a is not None:
            raise ValueError("中继流在接入阶段不可被宿主基站调度，不能携带 lambda_a")
        if self.flow_class is FlowClass.DIRECT and self.incentive != 1.0:
            raise ValueError("直连流的激励系数必须为 1")
        return self

    @property
    def is_direct(self) -> bool:
        return self.flow_class is FlowClass.DIRECT

    @property
    def access_rate(self) -> float:
        """接入阶段的速率参数；单阶段直连流沿用 lambda_r"""
        return self.lambda_a if self.lambda_a is not None else self.lambda_r


class RelayPhaseConfig(BaseModel):
    """半双工帧划分：tau_r 个中继子帧后接 tau_a 个接入子帧"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    tau_r: int = Field(ge=0)
    tau_a: int = Field(ge=0)
    beta: float = Field(default=1.0, ge=1.0)

    @model_validator(mode="after")
    def check_period(self) -> "RelayPhaseConfig":
        if self.tau_r + self.tau_a <= 0:
            raise ValueError("帧周期必须为正")
        return self

    @computed_field
    @property
    def alpha(self) -> float:
        return self.tau_r / (self.tau_r + self.tau_a)

    @property
    def period(self) -> int:
        return self.tau_r + self.tau_a

    @classmethod
    def from_alpha(cls, alpha: float, beta: float = 1.0, max_period: int = 1000) -> "RelayPhaseConfig":
        """由实数 alpha 构造，取分母不超过 max_period 的有理近似"""
        if not 0.0 <= alpha <= 1.0:
            raise DomainError(f"alpha 必须位于 [0, 1]：{alpha}")
        fraction = Fraction(alpha).limit_denominator(max_period)
        return cls(
            tau_r=fraction.numerator,
            tau_a=fraction.denominator - fraction.numerator,
            beta=beta,
        )

    @classmethod
    def from_plan(cls, plan: "SubframePlan", beta: float = 1.0) -> "RelayPhaseConfig":
        b = plan.count(SubframeKind.B)
        return cls(tau_r=b, tau_a=plan.period - b, beta=beta)


class ThroughputVector(BaseModel):
    """各流的平稳平均吞吐"""
    model_config = ConfigDict(frozen=True)

    theta: Tuple[float, ...]

    @field_validator("theta")
    @classmethod
    def non_negative(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not np.isfinite(v) or v < 0 for v in value):
            raise ValueError(f"吞吐必须为非负有限值：{value}")
        return value

    @classmethod
    def of(cls, values) -> "ThroughputVector":
        return cls(theta=tuple(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)

    def __len__(self) -> int:
        return len(self.theta)

    def __getitem__(self, index: int) -> float:
        return self.theta[index]


class FixedPointReport(BaseModel):
    """不动点求解结果"""
    model_config = ConfigDict(frozen=True)

    theta: ThroughputVector
    iterations: int = Field(ge=0)
    residual: float
    converged: bool
    tolerance: float
    damping: float

    @model_validator(mode="after")
    def check_converged(self) -> "FixedPointReport":
        if self.converged and self.residual > self.tolerance:
            raise ValueError("converged 为真时残差不得超过容差")
        return self


class WinnerEstimate(BaseModel):
    """获胜期望的蒙特卡洛估计"""
    mean: float
    stderr: float
    samples: int


class SweepRow(BaseModel):
    """参数扫描的一行"""
    parameter: str
    value: float
    report: FixedPointReport


# ============ 时隙级蒙特卡洛 ============

class SchedulingPolicy(str, Enum):
    RR = "rr"
    PF = "pf"
    INCENTIVIZED_PF = "incentivized_pf"


class McConfig(BaseModel):
    """时隙仿真配置"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    slots: int = Field(gt=0)
    ewma_epsilon: float = Field(gt=0, lt=1)
    seed: int = Field(ge=0, lt=2 ** 64)
    config: RelayPhaseConfig
    flows: List[FlowSpec] = Field(min_length=1)
    trace_every: Optional[int] = Field(default=None, gt=0)

    @property
    def burn_in(self) -> int:
        return min(self.slots - 1, int(np.ceil(10.0 / self.ewma_epsilon)))


class TracePoint(BaseModel):
    slot: int
    flow_id: int
    theta_bar: float


class McResult(BaseModel):
    """时隙仿真结果；empirical_theta 为最终 EWMA，credited_mean 为预热后每时隙记账增益的样本均值"""
    model_config = ConfigDict(frozen=True)

    empirical_theta: ThroughputVector
    credited_mean: ThroughputVector
    win_counts: List[int]
    relay_phase_wins: List[int]
    access_phase_wins: List[int]
    idle_slots: int
    relay_phase_slots: int
    slots: int
    trace: Optional[List[TracePoint]] = None

    @model_validator(mode="after")
    def check_accounting(self) -> "McResult":
        if sum(self.win_counts) + self.idle_slots != self.slots:
            raise ValueError("每个时隙恰好一个获胜者（或计入空闲）")
        return self


# ============ 无线模型 ============

class NodeGeometry(BaseModel):
    """一个宿主基站、R 个中继、U 个终端的位置与发射功率"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    donor_xy: Tuple[float, float] = (0.0, 0.0)
    donor_power_dbm: float = 46.0
    relay_xy: List[Tuple[float, float]] = Field(default_factory=list)
    relay_power_dbm: List[float] = Field(default_factory=list)
    ue_xy: List[Tuple[float, float]] = Field(min_length=1)
    noise_dbm: float = -95.0
    pathloss_exponent: float = Field(default=3.5, gt=0)
    reference_loss_db: float = 30.0
    min_distance_m: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def check_relays(self) -> "NodeGeometry":
        if len(self.relay_xy) != len(self.relay_power_dbm):
            raise ValueError("中继位置与功率数量不一致")
        return self

    @property
    def n_relays(self) -> int:
        return len(self.relay_xy)

    @property
    def n_ues(self) -> int:
        return len(self.ue_xy)

    def tx_positions(self) -> np.ndarray:
        """发射机位置，下标 0 为宿主基站，r+1 为第 r 个中继"""
        return np.asarray([self.donor_xy, *self.relay_xy], dtype=float).reshape(-1, 2)

    def tx_powers_dbm(self) -> np.ndarray:
        return np.asarray([self.donor_power_dbm, *self.relay_power_dbm], dtype=float)

    def without_relays(self) -> "NodeGeometry":
        return self.model_copy(update={"relay_xy": [], "relay_power_dbm": []})


DONOR_TX = 0


def relay_tx(relay_index: int) -> int:
    """中继在发射机编号中的下标"""
    return relay_index + 1


class Receiver(BaseModel):
    """接收端：终端或（半双工接收态的）中继"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["ue", "rn"]
    index: int = Field(ge=0)


class LinkState(BaseModel):
    """单个 TTI 单条链路的状态"""
    model_config = ConfigDict(frozen=True)

    mean_rx_dbm: float
    fading: float
    interference_mw: float
    sinr_db: float
    cqi: int = Field(ge=0, le=15)
    served_mcs: Optional[int] = Field(default=None, ge=0, le=15)

    @model_validator(mode="after")
    def check_mcs(self) -> "LinkState":
        if self.served_mcs is not None and self.served_mcs > self.cqi:
            raise ValueError("实际 MCS 不得高于上报 CQI")
        return self


MapScenario = Literal["relays_active", "relays_silent"]


class SinrGrid(BaseModel):
    """SINR 栅格（行对应 y，列对应 x，像素中心位于 origin + (k + 0.5) * cell_size）"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    origin: Tuple[float, float]
    cell_size: float = Field(gt=0)
    values: np.ndarray
    scenario: MapScenario

    @field_validator("values")
    @classmethod
    def finite(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 2 or value.size == 0:
            raise ValueError("栅格必须是非空二维矩阵")
        if not np.all(np.isfinite(value)):
            raise ValueError("栅格含非有限值")
        return value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def pixel_of(self, xy: Tuple[float, float]) -> Tuple[int, int]:
        """返回包含该点的像素 (row, col)"""
        col = int((xy[0] - self.origin[0]) // self.cell_size)
        row = int((xy[1] - self.origin[1]) // self.cell_size)
        return row, col


# ============ 系统级仿真 ============

class SubframeKind(str, Enum):
    """b：中继阶段；d：仅直连用户的接入子帧；u：中继发射的普通接入子帧"""
    B = "B"
    D = "D"
    U = "U"


class SubframePlan(BaseModel):
    """周期性子帧计划，B 必须构成连续前缀"""
    model_config = ConfigDict(frozen=True)

    pattern: Tuple[SubframeKind, ...] = Field(min_length=1)

    @field_validator("pattern")
    @classmethod
    def check_pattern(cls, value: Tuple[SubframeKind, ...]) -> Tuple[SubframeKind, ...]:
        b_count = sum(1 for kind in value if kind is SubframeKind.B)
        if b_count == 0:
            raise ValueError("每个周期至少需要一个 B 子帧")
        if any(kind is not SubframeKind.B for kind in value[:b_count]):
            raise ValueError("B 子帧必须构成周期的连续前缀")
        return value

    @classmethod
    def from_string(cls, text: str) -> "SubframePlan":
        """例如 "BDDDUU"；也接受 "1/7" 形式的 FDD 划分"""
        text = text.strip().upper()
        if "/" in text:
            return cls.from_partition(text)
        try:
            return cls(pattern=tuple(SubframeKind(ch) for ch in text))
        except ValueError as e:
            raise ValueError(f"非法子帧计划 {text!r}：{e}") from e

    @classmethod
    def from_partition(cls, partition: str) -> "SubframePlan":
        """FDD 划分 "k/m"（k + m = 8，k 为 1..7）：k 个 B 后接 m 个 U"""
        try:
            relay, access = (int(part) for part in partition.split("/"))
        except ValueError as e:
            raise ValueError(f"非法划分 {partition!r}") from e
        if relay + access != 8 or not 1 <= relay <= 7:
            raise ValueError(f"FDD 划分只允许 1/7 … 7/1：{partition!r}")
        return cls.from_counts(relay, 0, access)

    @classmethod
    def from_counts(cls, b: int, d: int, u: int) -> "SubframePlan":
        return cls(pattern=(SubframeKind.B,) * b + (SubframeKind.D,) * d + (SubframeKind.U,) * u)

    @property
    def period(self) -> int:
        return len(self.pattern)

    def count(self, kind: SubframeKind) -> int:
        return sum(1 for k in self.pattern if k is kind)

    @property
    def alpha(self) -> float:
        return self.count(SubframeKind.B) / self.period

    @property
    def u_fraction(self) -> float:
        return self.count(SubframeKind.U) / self.period

    def kind_at(self, tti: int) -> SubframeKind:
        return self.pattern[tti % self.period]

    def __str__(self) -> str:
        return "".join(kind.value for kind in self.pattern)


class RelayBuffer:
    """中继转发缓存：每个中继用户一条尾丢弃队列"""

    def __init__(self, ue_ids: List[int], capacity_bytes: int):
        if capacity_bytes <= 0:
            raise ValueError("缓存容量必须为正")
        self.capacity_bytes = capacity_bytes
        self.queued: Dict[int, int] = {ue: 0 for ue in ue_ids}
        self.arrivals = 0
        self.departures = 0
        self.drops = 0

    def enqueue(self, ue: int, nbytes: int) -> int:
        """入队，返回被丢弃的字节数"""
        accepted = min(nbytes, self.capacity_bytes - self.queued[ue])
        dropped = nbytes - accepted
        self.queued[ue] += accepted
        self.arrivals += nbytes
        self.drops += dropped
        return dropped

    def dequeue(self, ue: int, nbytes: int) -> int:
        """出队，返回实际取出的字节数"""
        taken = min(nbytes, self.queued[ue])
        self.queued[ue] -= taken
        self.departures += taken
        return taken

    @property
    def total_queued(self) -> int:
        return sum(self.queued.values())

    def is_conserved(self) -> bool:
        return self.arrivals == self.departures + self.drops + self.total_queued


class CbrTraffic(BaseModel):
    """恒定比特率业务"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    cbr_bytes_per_tti: int = Field(ge=0)


TrafficModel = Union[Literal["full_buffer"], CbrTraffic]


class NodePolicy(str, Enum):
    PF = "pf"
    RR = "rr"


class RbMode(str, Enum):
    SUBFRAME = "subframe"
    RB_ROUND_ROBIN = "rb_round_robin"


class ScenarioConfig(BaseModel):
    """一次系统级仿真的完整输入（关联关系已解析）"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    geometry: NodeGeometry
    plan: SubframePlan
    ue_serving: List[Optional[int]]
    traffic: List[TrafficModel]
    donor_policy: NodePolicy = NodePolicy.PF
    relay_policy: NodePolicy = NodePolicy.PF
    backhaul_incentive: float = Field(default=1.0, ge=1.0)
    rb_mode: RbMode = RbMode.SUBFRAME
    relay_rb_mode: Optional[RbMode] = None
    pf_epsilon: float = Field(default=0.05, gt=0, lt=1)
    rb_count: int = Field(default=50, gt=0)
    symbols_per_rb: int = Field(default=150, gt=0)
    tti_count: int = Field(gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    buffer_capacity_bytes: int = Field(default=1_000_000, gt=0)

    @model_validator(mode="after")
    def check_association(self) -> "ScenarioConfig":
        n_ues = self.geometry.n_ues
        if len(self.ue_serving) != n_ues or len(self.traffic) != n_ues:
            raise ValueError("ue_serving / traffic 必须与终端数量一致")
        for ue, serving in enumerate(self.ue_serving):
            if serving is not None and not 0 <= serving < self.geometry.n_relays:
                raise ValueError(f"终端 {ue} 关联到不存在的中继 {serving}")
        return self

    def relayed_ues(self, relay_index: int) -> List[int]:
        return [ue for ue, serving in enumerate(self.ue_serving) if serving == relay_index]


class UeTtiEntry(BaseModel):
    """单个终端在一个 TTI 内的记录"""
    ue: int
    node: str
    relayed: bool
    sinr_db: float
    cqi: int
    mcs: Optional[int] = None
    bytes: int = 0


class BackhaulTtiEntry(BaseModel):
    """中继回程（宿主基站 → 中继）在 B 子帧内的记录"""
    rn: int
    ue: int
    sinr_db: float
    cqi: int
    mcs: Optional[int] = None
    bytes: int = 0


class TtiRecord(BaseModel):
    tti: int
    kind: SubframeKind
    transmitters: List[int]
    receivers: List[int]
    ues: List[UeTtiEntry]
    backhaul: List[BackhaulTtiEntry] = Field(default_factory=list)


# ============ 命令行 ============

class RunManifest(BaseModel):
    """每个输出目录的可复现记录"""
    subcommand: str
    config_path: str
    output_dir: str
    seed_override: Optional[int] = None
    tool_version: str
    config_hash: str
    resolved_config: dict

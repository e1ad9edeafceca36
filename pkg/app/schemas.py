"""
配置文件模型

每个子命令一种 JSON 配置，未知键一律拒绝。
经 ConfigLoader 加载后调用 to_* 得到服务层使用的领域对象。
"""

from typing import Dict, List, Literal, Optional, Tuple, Type, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings
from app.models import (
    FlowSpec,
    MapScenario,
    McConfig,
    NodeGeometry,
    NodePolicy,
    RbMode,
    RelayPhaseConfig,
    ScenarioConfig,
    SchedulingPolicy,
    SubframePlan,
    TrafficModel,
)
from app.services.radio_model import associate_ues


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============ 调度分析 ============

class FrameEntry(_Strict):
    """帧划分：给出 tau_r + tau_a，或给出 alpha"""
    tau_r: Optional[int] = Field(default=None, ge=0)
    tau_a: Optional[int] = Field(default=None, ge=0)
    alpha: Optional[float] = Field(default=None, ge=0, le=1)
    beta: float = Field(default=1.0, ge=1.0)

    @model_validator(mode="after")
    def one_form(self) -> "FrameEntry":
        by_slots = self.tau_r is not None or self.tau_a is not None
        if by_slots == (self.alpha is not None):
            raise ValueError("frame 需要 tau_r/tau_a 或 alpha 之一")
        if by_slots and (self.tau_r is None or self.tau_a is None):
            raise ValueError("tau_r 与 tau_a 必须同时给出")
        return self

    def to_config(self) -> RelayPhaseConfig:
        if self.alpha is not None:
            return RelayPhaseConfig.from_alpha(self.alpha, beta=self.beta)
        return RelayPhaseConfig(tau_r=self.tau_r, tau_a=self.tau_a, beta=self.beta)


class SolverEntry(_Strict):
    tolerance: Optional[float] = Field(default=None, gt=0)
    max_iter: Optional[int] = Field(default=None, gt=0)
    damping: Optional[float] = Field(default=None, gt=0, le=1)
    retries: Optional[int] = Field(default=None, ge=0)


def _unique_ids(flows: List[FlowSpec]) -> List[FlowSpec]:
    ids = [f.id for f in flows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"流 id 重复：{ids}")
    return flows


class SolveFile(_Strict):
    """solve：省略 frame 时使用单阶段（无中继）求解器"""
    flows: List[FlowSpec] = Field(min_length=1)
    frame: Optional[FrameEntry] = None
    solver: SolverEntry = Field(default_factory=SolverEntry)

    @field_validator("flows")
    @classmethod
    def check_ids(cls, value: List[FlowSpec]) -> List[FlowSpec]:
        return _unique_ids(value)


class RangeEntry(_Strict):
    start: float
    stop: float
    num: int = Field(ge=2)
    scale: Literal["linear", "log"] = "linear"

    @model_validator(mode="after")
    def check_log(self) -> "RangeEntry":
        if self.scale == "log" and (self.start <= 0 or self.stop <= 0):
            raise ValueError("对数范围的端点必须为正")
        return self

    def values(self) -> List[float]:
        if self.scale == "log":
            return [float(v) for v in np.geomspace(self.start, self.stop, self.num)]
        return [float(v) for v in np.linspace(self.start, self.stop, self.num)]


class SweepFile(_Strict):
    flows: List[FlowSpec] = Field(min_length=1)
    frame: FrameEntry
    parameter: Literal["beta", "alpha", "gamma"]
    values: Union[List[float], RangeEntry]
    solver: SolverEntry = Field(default_factory=SolverEntry)

    @field_validator("flows")
    @classmethod
    def check_ids(cls, value: List[FlowSpec]) -> List[FlowSpec]:
        return _unique_ids(value)

    def resolved_values(self) -> List[float]:
        if isinstance(self.values, RangeEntry):
            return self.values.values()
        return [float(v) for v in self.values]


class McFile(_Strict):
    """mc：每个种子一次独立的时隙仿真"""
    flows: List[FlowSpec] = Field(min_length=1)
    frame: FrameEntry
    policy: SchedulingPolicy = SchedulingPolicy.PF
    slots: int = Field(default=1_000_000, gt=0)
    ewma_epsilon: float = Field(default_factory=lambda: settings.MC_EPSILON, gt=0, lt=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    trace_every: Optional[int] = Field(default=None, gt=0)

    @field_validator("flows")
    @classmethod
    def check_ids(cls, value: List[FlowSpec]) -> List[FlowSpec]:
        return _unique_ids(value)

    def to_config(self, seed: int) -> McConfig:
        return McConfig(
            slots=self.slots,
            ewma_epsilon=self.ewma_epsilon,
            seed=seed,
            config=self.frame.to_config(),
            flows=self.flows,
            trace_every=self.trace_every,
        )


# ============ 几何与场景 ============

class DonorEntry(_Strict):
    xy: Tuple[float, float] = (0.0, 0.0)
    power_dbm: float = Field(default_factory=lambda: settings.DONOR_POWER_DBM)


class RelayEntry(_Strict):
    name: str
    xy: Tuple[float, float]
    parent: str = "donor"
    power_dbm: float = Field(default_factory=lambda: settings.RELAY_POWER_DBM)


class UeEntry(_Strict):
    xy: Tuple[float, float]
    serving: str = "auto"
    traffic: TrafficModel = "full_buffer"


class RadioEntry(_Strict):
    noise_dbm: float = Field(default_factory=lambda: settings.NOISE_FLOOR_DBM)
    pathloss_exponent: float = Field(default_factory=lambda: settings.PATHLOSS_EXPONENT, gt=0)
    reference_loss_db: float = Field(default_factory=lambda: settings.PATHLOSS_REF_DB)
    min_distance_m: float = Field(default_factory=lambda: settings.MIN_DISTANCE_M, gt=0)


class GeometryFile(_Strict):
    """节点几何；中继只能挂在宿主基站下（单跳）"""
    donor: DonorEntry = Field(default_factory=DonorEntry)
    relays: List[RelayEntry] = Field(default_factory=list)
    ues: List[UeEntry] = Field(min_length=1)
    radio: RadioEntry = Field(default_factory=RadioEntry)

    @model_validator(mode="after")
    def check_topology(self) -> "GeometryFile":
        names = [relay.name for relay in self.relays]
        if len(set(names)) != len(names):
            raise ValueError(f"中继名称重复：{names}")
        if "donor" in names or "auto" in names:
            raise ValueError("中继不能命名为 donor 或 auto")
        parents = {relay.name: relay.parent for relay in self.relays}
        for relay in self.relays:
            seen = [relay.name]
            parent = relay.parent
            while parent != "donor":
                if parent not in parents:
                    raise ValueError(f"中继 {relay.name} 的上级 {parent} 不存在")
                if parent in seen:
                    raise ValueError(f"中继关联存在环：{' -> '.join(seen + [parent])}")
                seen.append(parent)
                parent = parents[parent]
            if len(seen) > 1:
                raise ValueError(f"中继 {relay.name} 不直接挂在宿主基站下，不支持多跳")
        for k, ue in enumerate(self.ues):
            if ue.serving not in ("donor", "auto") and ue.serving not in parents:
                raise ValueError(f"终端 {k} 关联的节点 {ue.serving} 不存在")
        return self

    def to_geometry(self) -> NodeGeometry:
        return NodeGeometry(
            donor_xy=self.donor.xy,
            donor_power_dbm=self.donor.power_dbm,
            relay_xy=[relay.xy for relay in self.relays],
            relay_power_dbm=[relay.power_dbm for relay in self.relays],
            ue_xy=[ue.xy for ue in self.ues],
            noise_dbm=self.radio.noise_dbm,
            pathloss_exponent=self.radio.pathloss_exponent,
            reference_loss_db=self.radio.reference_loss_db,
            min_distance_m=self.radio.min_distance_m,
        )

    def resolve_serving(self, geometry: NodeGeometry) -> List[Optional[int]]:
        """None 为宿主基站，整数为中继下标；auto 按最强平均接收功率关联"""
        index = {relay.name: r for r, relay in enumerate(self.relays)}
        auto = associate_ues(geometry)
        serving = []
        for k, ue in enumerate(self.ues):
            if ue.serving == "auto":
                serving.append(auto[k])
            elif ue.serving == "donor":
                serving.append(None)
            else:
                serving.append(index[ue.serving])
        return serving


class SchedulerEntry(_Strict):
    donor_policy: NodePolicy = NodePolicy.PF
    relay_policy: NodePolicy = NodePolicy.PF
    backhaul_incentive: float = Field(default=1.0, ge=1.0)
    rb_mode: RbMode = RbMode.SUBFRAME
    relay_rb_mode: Optional[RbMode] = None
    pf_epsilon: float = Field(default_factory=lambda: settings.SIM_PF_EPSILON, gt=0, lt=1)
    rb_count: int = Field(default_factory=lambda: settings.RB_COUNT, gt=0)
    symbols_per_rb: int = Field(default_factory=lambda: settings.SYMBOLS_PER_RB, gt=0)


def _check_plan(value: str) -> str:
    SubframePlan.from_string(value)
    return value


class ScenarioFile(GeometryFile):
    """sim：一次系统级仿真"""
    plan: str
    scheduler: SchedulerEntry = Field(default_factory=SchedulerEntry)
    tti_count: int = Field(gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    buffer_capacity_bytes: int = Field(default_factory=lambda: settings.RELAY_BUFFER_BYTES, gt=0)

    @field_validator("plan")
    @classmethod
    def check_plan(cls, value: str) -> str:
        return _check_plan(value)

    def to_config(self, plan: Optional[str] = None) -> ScenarioConfig:
        geometry = self.to_geometry()
        return ScenarioConfig(
            geometry=geometry,
            plan=SubframePlan.from_string(plan or self.plan),
            ue_serving=self.resolve_serving(geometry),
            traffic=[ue.traffic for ue in self.ues],
            tti_count=self.tti_count,
            seed=self.seed,
            buffer_capacity_bytes=self.buffer_capacity_bytes,
            **self.scheduler.model_dump(),
        )


class CompareFile(_Strict):
    """compare：同一场景下的两个子帧计划"""
    scenario: ScenarioFile
    plan_a: str
    plan_b: str
    tie_tolerance: float = Field(default_factory=lambda: settings.COMPARE_TIE_TOLERANCE, ge=0)

    @field_validator("plan_a", "plan_b")
    @classmethod
    def check_plans(cls, value: str) -> str:
        return _check_plan(value)


class MapFile(GeometryFile):
    """map：平均 SINR 栅格"""
    resolution: float = Field(default=10.0, gt=0)
    bounds: Optional[Tuple[float, float, float, float]] = None
    scenarios: List[MapScenario] = Field(
        default_factory=lambda: ["relays_active", "relays_silent"], min_length=1
    )


CONFIG_MODELS: Dict[str, Type[BaseModel]] = {
    "solve": SolveFile,
    "sweep": SweepFile,
    "mc": McFile,
    "sim": ScenarioFile,
    "compare": CompareFile,
    "map": MapFile,
}


def export_json_schemas() -> Dict[str, dict]:
    """各子命令配置文件的 JSON Schema"""
    return {name: model.model_json_schema(by_alias=True) for name, model in CONFIG_MODELS.items()}

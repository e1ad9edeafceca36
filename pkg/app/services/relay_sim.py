"""
带中继的单小区 TTI 级系统仿真

每个 TTI：
1. 按子帧类型确定发射集合：B / D 只有宿主基站；U 为宿主基站加缓存非空的中继
2. 宿主基站可调度流：直连终端；B 子帧另加每个中继终端一条回程流
   中继只在 U 子帧调度自己缓存中有数据的终端
3. 用当前发射集合与预先抽取的衰落计算 SINR / CQI
4. 调度器分配 RB，交付字节 = floor(效率 * RB 数 * 每 RB 符号数 / 8)，不超过队列长度
5. 回程交付进入中继缓存（满则尾丢弃），中继交付从缓存取出

衰落按 (接收端, 发射机, TTI) 一次性抽取，与子帧计划无关：
只改计划的两次运行看到完全相同的信道实现。
"""

import math
from functools import partial
from typing import Dict, Hashable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.config import settings
from app.models import (
    DONOR_TX,
    BackhaulTtiEntry,
    CbrTraffic,
    NodePolicy,
    RbMode,
    Receiver,
    RelayBuffer,
    ScenarioConfig,
    SubframeKind,
    SubframePlan,
    TtiRecord,
    UeTtiEntry,
    relay_tx,
)
from app.services.radio_model import evaluate_link, mcs_efficiency
from app.services.sched_analytic import optimal_split
from app.utils.errors import DomainError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

_METRIC_FLOOR = 1e-9


# ============ 节点调度器 ============

class NodeScheduler:
    """
    单个发射节点（宿主基站或中继）的调度器

    policy=pf：按 b * 可达字节 / 平均交付字节 选择，平均值为 EWMA（每次调度都更新，未服务记 0）
    policy=rr：按流注册顺序轮转
    rb_mode=subframe：获胜流拿走全部 RB；rb_mode=rb_round_robin：RB 在可调度流间逐个轮转分配
    （中继可用 relay_rb_mode 单独指定，缺省与宿主相同）
    """

    def __init__(
        self,
        flow_keys: Sequence[Hashable],
        policy: NodePolicy,
        epsilon: float,
        rb_mode: RbMode = RbMode.SUBFRAME,
        weights: Optional[Dict[Hashable, float]] = None,
    ):
        self.flow_keys = list(flow_keys)
        self.order = {key: k for k, key in enumerate(self.flow_keys)}
        self.policy = policy
        self.epsilon = epsilon
        self.rb_mode = rb_mode
        self.weights = {key: 1.0 for key in self.flow_keys}
        if weights:
            self.weights.update(weights)
        self.average = {key: 1.0 for key in self.flow_keys}
        self._rr_last = -1
        self._rb_pointer = 0

    def _rotate(self, eligible: List[Hashable]) -> List[Hashable]:
        """可调度流按注册顺序排列，从上次服务之后的流开始"""
        ordered = sorted(eligible, key=self.order.__getitem__)
        start = next((k for k, key in enumerate(ordered) if self.order[key] > self._rr_last), 0)
        return ordered[start:] + ordered[:start]

    def allocate(
        self,
        eligible: Sequence[Hashable],
        rate_per_rb: Dict[Hashable, float],
        rb_count: int,
    ) -> Dict[Hashable, int]:
        """
        返回 {流: RB 数}

        Args:
            eligible: 本 TTI 可调度的流
            rate_per_rb: 每条流每个 RB 的可达字节数（用于 PF 度量）
            rb_count: 可分配的 RB 总数
        """
        eligible = list(eligible)
        if not eligible:
            return {}

        if self.rb_mode is RbMode.RB_ROUND_ROBIN:
            ordered = sorted(eligible, key=self.order.__getitem__)
            shares = {key: 0 for key in ordered}
            for j in range(rb_count):
                shares[ordered[(self._rb_pointer + j) % len(ordered)]] += 1
            self._rb_pointer = (self._rb_pointer + rb_count) % len(ordered)
            return {key: n for key, n in shares.items() if n > 0}

        if self.policy is NodePolicy.RR:
            winner = self._rotate(eligible)[0]
        else:
            winner = max(
                sorted(eligible, key=self.order.__getitem__),
                key=lambda key: self.weights[key] * rate_per_rb[key] / max(self.average[key], _METRIC_FLOOR),
            )
        self._rr_last = self.order[winner]
        return {winner: rb_count}

    def update(self, delivered: Dict[Hashable, int]) -> None:
        keep = 1.0 - self.epsilon
        for key in self.flow_keys:
            self.average[key] = keep * self.average[key] + self.epsilon * delivered.get(key, 0)


# ============ 结果类型 ============

class ScenarioSummary(BaseModel):
    """一次运行的聚合指标（吞吐单位：字节 / TTI）"""
    plan: str
    tti_count: int
    direct_throughput: float
    relayed_throughput: float
    backhaul_throughput: float
    drops: int
    idle_access_rbs: int
    per_ue_bytes: List[int]
    mean_direct_cqi: Dict[str, float]
    mean_relayed_cqi: Dict[str, float]
    mean_direct_mcs: Dict[str, float]
    relay_active_u_fraction: float


class InvariantReport(BaseModel):
    half_duplex_violations: int
    gating_violations: int
    conservation_ok: bool

    @property
    def ok(self) -> bool:
        return self.half_duplex_violations == 0 and self.gating_violations == 0 and self.conservation_ok


class ScenarioResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ScenarioConfig
    records: List[TtiRecord]
    summary: ScenarioSummary
    buffers: List[RelayBuffer]
    idle_rbs: List[int]


class PlanComparisonRow(BaseModel):
    metric: str
    value_a: float
    value_b: float
    dominant: Literal["a", "b", "tie", "n/a"]


class PlanComparison(BaseModel):
    plan_a: str
    plan_b: str
    summary_a: ScenarioSummary
    summary_b: ScenarioSummary
    rows: List[PlanComparisonRow]


class RelayBalance(BaseModel):
    """单个中继的回程 / 接入平衡"""
    rn: int
    inbound_rate: float
    outbound_rate: float
    drops: int
    idle_access_rbs: int
    rho_r: Optional[float]
    rho_a: Optional[float]
    plan_alpha: float
    alpha_star: Optional[float]
    verdict: Literal["backhaul_underprovisioned", "access_underprovisioned", "balanced", "unmeasurable"]


# ============ 仿真 ============

def _fading_stream(seed: int, receiver: Receiver, tti_count: int, n_tx: int) -> np.ndarray:
    """某接收端对所有发射机的衰落，形状 (tti_count, n_tx)"""
    group = 0 if receiver.kind == "ue" else 1
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(group, receiver.index))))
    return rng.standard_exponential((tti_count, n_tx))


def _node_name(serving: Optional[int]) -> str:
    return "donor" if serving is None else f"rn{serving}"


def _bytes_for(cqi: int, rbs: int, symbols_per_rb: int) -> int:
    return int(math.floor(mcs_efficiency(cqi) * rbs * symbols_per_rb / 8.0))


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """
    运行一次 TTI 级仿真

    Returns:
        ScenarioResult：逐 TTI 记录、聚合指标、中继缓存与各中继空闲接入 RB 数
    """
    geometry = cfg.geometry
    plan = cfg.plan
    n_relays = geometry.n_relays
    n_ues = geometry.n_ues
    n_tx = 1 + n_relays
    if cfg.tti_count % plan.period:
        logger.warning(f"运行长度 {cfg.tti_count} 不是周期 {plan.period} 的整数倍")

    ue_fading = [_fading_stream(cfg.seed, Receiver(kind="ue", index=u), cfg.tti_count, n_tx) for u in range(n_ues)]
    rn_fading = [_fading_stream(cfg.seed, Receiver(kind="rn", index=r), cfg.tti_count, n_tx) for r in range(n_relays)]

    direct_ues = [u for u, s in enumerate(cfg.ue_serving) if s is None]
    relayed_ues = [u for u, s in enumerate(cfg.ue_serving) if s is not None]

    donor_keys = [("ue", u) for u in direct_ues] + [("bh", u) for u in relayed_ues]
    donor = NodeScheduler(
        donor_keys,
        cfg.donor_policy,
        cfg.pf_epsilon,
        cfg.rb_mode,
        weights={("bh", u): cfg.backhaul_incentive for u in relayed_ues},
    )
    relay_rb_mode = cfg.relay_rb_mode or cfg.rb_mode
    relays = [
        NodeScheduler([("ue", u) for u in cfg.relayed_ues(r)], cfg.relay_policy, cfg.pf_epsilon, relay_rb_mode)
        for r in range(n_relays)
    ]
    buffers = [RelayBuffer(cfg.relayed_ues(r), cfg.buffer_capacity_bytes) for r in range(n_relays)]
    idle_rbs = [0] * n_relays

    # 宿主侧队列：直连终端的下行数据与中继终端尚未回程的数据
    donor_queue: List[float] = [
        math.inf if not isinstance(t, CbrTraffic) else 0.0 for t in cfg.traffic
    ]
    records: List[TtiRecord] = []

    for t in range(cfg.tti_count):
        kind = plan.kind_at(t)
        for u, traffic in enumerate(cfg.traffic):
            if isinstance(traffic, CbrTraffic):
                donor_queue[u] += traffic.cbr_bytes_per_tti

        active = [DONOR_TX]
        if kind is SubframeKind.U:
            active += [relay_tx(r) for r in range(n_relays) if buffers[r].total_queued > 0]
        listening = list(range(n_relays)) if kind is SubframeKind.B else []

        links = {}
        for u in range(n_ues):
            serving = cfg.ue_serving[u]
            tx = DONOR_TX if serving is None else relay_tx(serving)
            links[u] = evaluate_link(geometry, active, tx, Receiver(kind="ue", index=u), ue_fading[u][t])
        backhaul_links = {
            r: evaluate_link(geometry, active, DONOR_TX, Receiver(kind="rn", index=r), rn_fading[r][t])
            for r in listening
        }

        # 宿主基站
        eligible = [("ue", u) for u in direct_ues if donor_queue[u] > 0 and links[u].cqi > 0]
        cqi_of = {("ue", u): links[u].cqi for u in direct_ues}
        if kind is SubframeKind.B:
            for u in relayed_ues:
                cqi = backhaul_links[cfg.ue_serving[u]].cqi
                cqi_of[("bh", u)] = cqi
                if donor_queue[u] > 0 and cqi > 0:
                    eligible.append(("bh", u))
        rate = {key: _bytes_for(cqi_of[key], 1, cfg.symbols_per_rb) for key in eligible}
        allocation = donor.allocate(eligible, rate, cfg.rb_count)
        delivered: Dict[Tuple[str, int], int] = {}
        for key, rbs in allocation.items():
            u = key[1]
            nbytes = int(min(_bytes_for(cqi_of[key], rbs, cfg.symbols_per_rb), donor_queue[u]))
            donor_queue[u] -= nbytes
            delivered[key] = nbytes
            if key[0] == "bh":
                buffers[cfg.ue_serving[u]].enqueue(u, nbytes)
        donor.update(delivered)

        # 中继（仅 U 子帧）
        relay_delivered: Dict[int, int] = {}
        if kind is SubframeKind.U:
            for r in range(n_relays):
                if relay_tx(r) not in active:
                    idle_rbs[r] += cfg.rb_count
                    continue
                own = [("ue", u) for u in cfg.relayed_ues(r) if buffers[r].queued[u] > 0 and links[u].cqi > 0]
                rn_rate = {key: _bytes_for(links[key[1]].cqi, 1, cfg.symbols_per_rb) for key in own}
                rn_alloc = relays[r].allocate(own, rn_rate, cfg.rb_count)
                idle_rbs[r] += cfg.rb_count - sum(rn_alloc.values())
                served = {}
                for key, rbs in rn_alloc.items():
                    u = key[1]
                    nbytes = buffers[r].dequeue(u, _bytes_for(links[u].cqi, rbs, cfg.symbols_per_rb))
                    served[key] = nbytes
                    relay_delivered[u] = nbytes
                relays[r].update(served)

        ue_entries = []
        for u in range(n_ues):
            serving = cfg.ue_serving[u]
            if serving is None:
                got = ("ue", u) in allocation
                nbytes = delivered.get(("ue", u), 0)
            else:
                got = u in relay_delivered
                nbytes = relay_delivered.get(u, 0)
            ue_entries.append(UeTtiEntry(
                ue=u,
                node=_node_name(serving),
                relayed=serving is not None,
                sinr_db=links[u].sinr_db,
                cqi=links[u].cqi,
                mcs=links[u].cqi if got else None,
                bytes=nbytes,
            ))
        backhaul_entries = [
            BackhaulTtiEntry(
                rn=cfg.ue_serving[u],
                ue=u,
                sinr_db=backhaul_links[cfg.ue_serving[u]].sinr_db,
                cqi=cqi_of[("bh", u)],
                mcs=cqi_of[("bh", u)] if ("bh", u) in allocation else None,
                bytes=delivered.get(("bh", u), 0),
            )
            for u in relayed_ues
        ] if kind is SubframeKind.B else []

        records.append(TtiRecord(
            tti=t,
            kind=kind,
            transmitters=active,
            receivers=listening,
            ues=ue_entries,
            backhaul=backhaul_entries,
        ))

    summary = summarize(cfg, records, buffers, idle_rbs)
    logger.info(
        f"✓ 仿真完成：计划 {plan}，{cfg.tti_count} TTI，"
        f"直连 {summary.direct_throughput:.1f} B/TTI，中继 {summary.relayed_throughput:.1f} B/TTI，丢弃 {summary.drops} B",
        extra={"plan": str(plan), "tti_count": cfg.tti_count, "drops": summary.drops},
    )
    return ScenarioResult(config=cfg, records=records, summary=summary, buffers=buffers, idle_rbs=idle_rbs)


def _mean_or_nan(values: List[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def summarize(
    cfg: ScenarioConfig,
    records: Sequence[TtiRecord],
    buffers: Sequence[RelayBuffer],
    idle_rbs: Sequence[int],
) -> ScenarioSummary:
    n = len(records)
    per_ue = [0] * cfg.geometry.n_ues
    direct_cqi: Dict[str, List[int]] = {kind.value: [] for kind in SubframeKind}
    relayed_cqi: Dict[str, List[int]] = {kind.value: [] for kind in SubframeKind}
    direct_mcs: Dict[str, List[int]] = {kind.value: [] for kind in SubframeKind}
    backhaul_bytes = 0
    u_slots = 0
    u_with_relay = 0
    for record in records:
        if record.kind is SubframeKind.U:
            u_slots += 1
            if len(record.transmitters) > 1:
                u_with_relay += 1
        for entry in record.ues:
            per_ue[entry.ue] += entry.bytes
            if entry.relayed:
                relayed_cqi[record.kind.value].append(entry.cqi)
            else:
                direct_cqi[record.kind.value].append(entry.cqi)
                if entry.mcs is not None:
                    direct_mcs[record.kind.value].append(entry.mcs)
        backhaul_bytes += sum(entry.bytes for entry in record.backhaul)

    direct_total = sum(b for u, b in enumerate(per_ue) if cfg.ue_serving[u] is None)
    relayed_total = sum(b for u, b in enumerate(per_ue) if cfg.ue_serving[u] is not None)
    return ScenarioSummary(
        plan=str(cfg.plan),
        tti_count=n,
        direct_throughput=direct_total / n,
        relayed_throughput=relayed_total / n,
        backhaul_throughput=backhaul_bytes / n,
        drops=sum(b.drops for b in buffers),
        idle_access_rbs=sum(idle_rbs),
        per_ue_bytes=per_ue,
        mean_direct_cqi={k: _mean_or_nan(v) for k, v in direct_cqi.items()},
        mean_relayed_cqi={k: _mean_or_nan(v) for k, v in relayed_cqi.items()},
        mean_direct_mcs={k: _mean_or_nan(v) for k, v in direct_mcs.items()},
        relay_active_u_fraction=u_with_relay / u_slots if u_slots else 0.0,
    )


def check_invariants(records: Sequence[TtiRecord], buffers: Sequence[RelayBuffer]) -> InvariantReport:
    """统计半双工与子帧门控违例，并检查中继缓存守恒"""
    half_duplex = 0
    gating = 0
    for record in records:
        half_duplex += sum(1 for r in record.receivers if relay_tx(r) in record.transmitters)
        if record.kind is not SubframeKind.U:
            gating += sum(1 for e in record.ues if e.relayed and e.bytes > 0)
        if record.kind is not SubframeKind.B:
            gating += sum(1 for e in record.backhaul if e.bytes > 0)
    return InvariantReport(
        half_duplex_violations=half_duplex,
        gating_violations=gating,
        conservation_ok=all(b.is_conserved() for b in buffers),
    )


# ============ 计划比较 ============

# (指标名, 越大越好)
_COMPARED_METRICS: List[Tuple[str, bool]] = [
    ("direct_throughput", True),
    ("relayed_throughput", True),
    ("backhaul_throughput", True),
    ("drops", False),
] + [
    (f"{family}_{kind.value}", True)
    for family in ("mean_direct_cqi", "mean_relayed_cqi", "mean_direct_mcs")
    for kind in SubframeKind
]


def _metric(summary: ScenarioSummary, name: str) -> float:
    if hasattr(summary, name):
        return float(getattr(summary, name))
    family, kind = name.rsplit("_", 1)
    return getattr(summary, family)[kind]


def _dominant(a: float, b: float, higher_is_better: bool, tolerance: float) -> str:
    if math.isnan(a) or math.isnan(b):
        return "n/a"
    if abs(a - b) <= tolerance * max(abs(a), abs(b)):
        return "tie"
    return "a" if (a > b) == higher_is_better else "b"


def compare_plans(
    cfg: ScenarioConfig,
    plan_a: SubframePlan,
    plan_b: SubframePlan,
    tie_tolerance: Optional[float] = None,
    runner=None,
) -> PlanComparison:
    """
    同一场景、同一种子下比较两个子帧计划

    Raises:
        DomainError: 两个计划周期不同
    """
    if plan_a.period != plan_b.period:
        raise DomainError(f"计划周期不同：{plan_a} ({plan_a.period}) vs {plan_b} ({plan_b.period})")
    tolerance = settings.COMPARE_TIE_TOLERANCE if tie_tolerance is None else tie_tolerance
    configs = [cfg.model_copy(update={"plan": plan}) for plan in (plan_a, plan_b)]
    if runner is None:
        results = [run_scenario(c) for c in configs]
    else:
        results = runner.run([partial(run_scenario, c) for c in configs])
    summary_a, summary_b = results[0].summary, results[1].summary

    rows = []
    for name, higher_is_better in _COMPARED_METRICS:
        a = _metric(summary_a, name)
        b = _metric(summary_b, name)
        rows.append(PlanComparisonRow(
            metric=name,
            value_a=a,
            value_b=b,
            dominant=_dominant(a, b, higher_is_better, tolerance),
        ))
    return PlanComparison(plan_a=str(plan_a), plan_b=str(plan_b), summary_a=summary_a, summary_b=summary_b, rows=rows)


# ============ 缓存平衡 ============

def buffer_balance_report(result: ScenarioResult, tolerance: float = 0.05) -> List[RelayBalance]:
    """
    每个中继的进出速率与最优划分建议

    rho_r 为回程链路在 B 子帧的平均 CQI 效率，rho_a 为其终端在 U 子帧的平均 CQI 效率；
    计划的 alpha 取 B / (B + U)，即缓存进出所用子帧中回程的占比。
    """
    cfg = result.config
    plan = cfg.plan
    n_b = plan.count(SubframeKind.B)
    n_u = plan.count(SubframeKind.U)
    plan_alpha = n_b / (n_b + n_u)
    n = len(result.records)

    report = []
    for r, buffer in enumerate(result.buffers):
        own = set(cfg.relayed_ues(r))
        backhaul_eff = []
        access_eff = []
        for record in result.records:
            if record.kind is SubframeKind.B:
                entry = next((e for e in record.backhaul if e.rn == r), None)
                if entry is not None:
                    backhaul_eff.append(mcs_efficiency(entry.cqi))
            elif record.kind is SubframeKind.U:
                access_eff.extend(mcs_efficiency(e.cqi) for e in record.ues if e.ue in own)
        rho_r = float(np.mean(backhaul_eff)) if backhaul_eff else None
        rho_a = float(np.mean(access_eff)) if access_eff else None

        if rho_r and rho_a:
            alpha_star = optimal_split(rho_r, rho_a)
            if plan_alpha < alpha_star - tolerance:
                verdict = "backhaul_underprovisioned"
            elif plan_alpha > alpha_star + tolerance:
                verdict = "access_underprovisioned"
            else:
                verdict = "balanced"
        else:
            alpha_star = None
            verdict = "unmeasurable"

        report.append(RelayBalance(
            rn=r,
            inbound_rate=buffer.arrivals / n,
            outbound_rate=buffer.departures / n,
            drops=buffer.drops,
            idle_access_rbs=result.idle_rbs[r],
            rho_r=rho_r,
            rho_a=rho_a,
            plan_alpha=plan_alpha,
            alpha_star=alpha_star,
            verdict=verdict,
        ))
    return report

"""
时隙级蒙特卡洛调度仿真

RR / PF / 激励 PF 在半双工中继相位门控下的逐时隙仿真，作为解析模型的独立校验。

随机数：每条流一个 PCG64 流，由 SeedSequence(seed, spawn_key=(flow.id,)) 派生，
增减其它流不会扰动该流的抽样序列。每个时隙每条流都抽一个单位均值指数变量，
再按所处阶段的速率参数缩放。
"""

import math
from typing import List, Optional, Sequence

import numpy as np

from app.models import (
    FlowSpec,
    McConfig,
    McResult,
    Phase,
    SchedulingPolicy,
    ThroughputVector,
    TracePoint,
    WinnerEstimate,
)
from app.services.sched_analytic import apply_incentive, initial_guess
from app.utils.errors import DomainError
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

_BLOCK = 1 << 16
MIN_ESTIMATE_SAMPLES = 10_000


def flow_generator(seed: int, flow_id: int) -> np.random.Generator:
    """某条流的独立随机数生成器"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(flow_id,))))


def _weights_for(flows: Sequence[FlowSpec], policy: SchedulingPolicy, beta: float) -> List[float]:
    if policy is SchedulingPolicy.INCENTIVIZED_PF:
        return [f.incentive for f in apply_incentive(flows, beta)]
    return [1.0] * len(flows)


def run_mc(cfg: McConfig, policy: SchedulingPolicy = SchedulingPolicy.PF) -> McResult:
    """
    逐时隙仿真

    每个时隙：由 t mod (tau_r + tau_a) 判断阶段；中继阶段所有流可调度，接入阶段只有直连流；
    PF 选 arg max b_i h_i / theta_bar_i（并列取最小下标），RR 在可调度流中轮转；
    获胜者 theta_bar ← (1 - eps) theta_bar + eps h，其余流 theta_bar ← (1 - eps) theta_bar。

    Raises:
        DomainError: 全部为中继流且 alpha < 1
    """
    flows = list(cfg.flows)
    phase_cfg = cfg.config
    alpha = phase_cfg.alpha
    direct = [k for k, f in enumerate(flows) if f.is_direct]
    if not direct and alpha < 1:
        raise DomainError("alpha < 1 时至少需要一个直连流")
    if cfg.slots < 10.0 / cfg.ewma_epsilon:
        logger.warning(f"时隙数 {cfg.slots} 少于 10/eps = {10.0 / cfg.ewma_epsilon:g}，结果可能未收敛")

    n = len(flows)
    eps = cfg.ewma_epsilon
    keep = 1.0 - eps
    period = phase_cfg.period
    tau_r = phase_cfg.tau_r
    everyone = list(range(n))
    weights = _weights_for(flows, policy, phase_cfg.beta)
    relay_scale = [1.0 / f.lambda_r for f in flows]
    access_scale = [1.0 / f.access_rate for f in flows]
    generators = [flow_generator(cfg.seed, f.id) for f in flows]

    theta_bar = list(initial_guess(flows, alpha).theta)
    win_counts = [0] * n
    relay_wins = [0] * n
    access_wins = [0] * n
    credited = [0.0] * n
    idle = 0
    relay_slots = 0
    rr_last = {True: -1, False: -1}
    burn_in = cfg.burn_in
    trace: Optional[List[TracePoint]] = [] if cfg.trace_every else None
    is_rr = policy is SchedulingPolicy.RR

    for block_start in range(0, cfg.slots, _BLOCK):
        block_len = min(_BLOCK, cfg.slots - block_start)
        unit = [g.standard_exponential(block_len).tolist() for g in generators]
        for offset in range(block_len):
            t = block_start + offset
            in_relay = (t % period) < tau_r
            if in_relay:
                relay_slots += 1
                eligible = everyone
                scale = relay_scale
            else:
                eligible = direct
                scale = access_scale

            if not eligible:
                idle += 1
                theta_bar = [keep * v for v in theta_bar]
                continue

            if is_rr:
                # 两个阶段各自轮转
                winner = next((k for k in eligible if k > rr_last[in_relay]), eligible[0])
                rr_last[in_relay] = winner
            else:
                winner = eligible[0]
                best = -1.0
                for k in eligible:
                    tb = theta_bar[k]
                    metric = weights[k] * unit[k][offset] * scale[k] / tb if tb > 0 else math.inf
                    if metric > best:
                        best = metric
                        winner = k

            gain = unit[winner][offset] * scale[winner]
            theta_bar = [keep * v for v in theta_bar]
            theta_bar[winner] += eps * gain
            win_counts[winner] += 1
            if in_relay:
                relay_wins[winner] += 1
            else:
                access_wins[winner] += 1
            if t >= burn_in:
                credited[winner] += gain

            if trace is not None and t % cfg.trace_every == 0:
                trace.extend(
                    TracePoint(slot=t, flow_id=flows[k].id, theta_bar=theta_bar[k]) for k in range(n)
                )

    measured = cfg.slots - burn_in
    logger.debug(f"时隙仿真完成：{cfg.slots} 个时隙，策略 {policy.value}，种子 {cfg.seed}")
    return McResult(
        empirical_theta=ThroughputVector.of(theta_bar),
        credited_mean=ThroughputVector.of(c / measured for c in credited),
        win_counts=win_counts,
        relay_phase_wins=relay_wins,
        access_phase_wins=access_wins,
        idle_slots=idle,
        relay_phase_slots=relay_slots,
        slots=cfg.slots,
        trace=trace,
    )


def estimate_winner_expectation(
    i: int,
    flows: Sequence[FlowSpec],
    theta: ThroughputVector,
    samples: int = 100_000,
    seed: int = 0,
    phase: Phase = Phase.RELAY,
) -> WinnerEstimate:
    """
    E[h_i * 1{i 获胜}] 的无偏蒙特卡洛估计（附标准误）

    竞争规则与 winner_expectation 相同，用于超出容斥上限的人口。
    """
    if samples < MIN_ESTIMATE_SAMPLES:
        raise DomainError(f"样本数至少为 {MIN_ESTIMATE_SAMPLES}")
    if phase is Phase.RELAY:
        members = list(range(len(flows)))
        rates = [f.lambda_r for f in flows]
        weights = [f.incentive for f in flows]
    else:
        members = [k for k, f in enumerate(flows) if f.is_direct]
        rates = [flows[k].access_rate for k in members]
        weights = [1.0] * len(members)
    if i not in members:
        raise DomainError(f"流 {i} 不参与 {phase.value} 阶段竞争")
    theta_local = np.array([theta[k] for k in members], dtype=float)
    if np.any(theta_local <= 0):
        raise DomainError("theta 必须为正")

    gains = np.stack([
        flow_generator(seed, flows[k].id).exponential(1.0 / rate, samples)
        for k, rate in zip(members, rates)
    ])
    metric = np.asarray(weights)[:, None] * gains / theta_local[:, None]
    winners = np.argmax(metric, axis=0)
    local = members.index(i)
    credited = np.where(winners == local, gains[local], 0.0)
    return WinnerEstimate(
        mean=float(credited.mean()),
        stderr=float(credited.std(ddof=1) / np.sqrt(samples)),
        samples=samples,
    )

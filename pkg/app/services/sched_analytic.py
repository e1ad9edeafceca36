"""
比例公平（PF）与轮询（RR）调度的解析模型

提供：
1. RR / PF 闭式解（无中继约束）
2. 指数衰落下“获胜期望”的容斥闭式
3. 单阶段与两阶段（半双工中继）平稳方程的阻尼不动点求解
4. beta→∞ 极限、beta 平衡规则、端到端频谱效率与最优划分
5. beta / alpha / gamma 参数扫描

流下标 i 均指 flows 列表中的位置（从 0 开始）。
"""

from functools import partial
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.config import settings
from app.models import (
    FixedPointReport,
    FlowClass,
    FlowSpec,
    Phase,
    RelayPhaseConfig,
    SweepRow,
    ThroughputVector,
)
from app.utils.errors import DomainError, InclusionExclusionCapExceeded
from app.utils.logger import setup_logger

logger = setup_logger(__name__)

SWEEP_PARAMETERS = ("beta", "alpha", "gamma")


def _require_flows(flows: Sequence[FlowSpec]) -> None:
    if not flows:
        raise DomainError("流列表为空")


# ============ 闭式解 ============

def rr_closed_form(flows: Sequence[FlowSpec]) -> ThroughputVector:
    """RR 每个被调度时隙的平均增益 1/lambda_i"""
    _require_flows(flows)
    return ThroughputVector.of(1.0 / f.lambda_r for f in flows)


def rr_share_of_slots(flows: Sequence[FlowSpec]) -> ThroughputVector:
    """RR 按全部时隙折算的每流吞吐 1/(n * lambda_i)，即时隙仿真直接测得的量"""
    _require_flows(flows)
    n = len(flows)
    return ThroughputVector.of(1.0 / (n * f.lambda_r) for f in flows)


def rr_phase_gated(flows: Sequence[FlowSpec], config: RelayPhaseConfig) -> ThroughputVector:
    """
    两阶段下 RR 按全部时隙折算的吞吐

    中继阶段在全部 n 条流间轮转，接入阶段只在 n_d 条直连流间轮转：
    theta_i = alpha / (n lambda_r,i) + [直连] (1 - alpha) / (n_d lambda_a,i)
    """
    _require_flows(flows)
    alpha = config.alpha
    n = len(flows)
    n_direct = sum(1 for f in flows if f.is_direct)
    if n_direct == 0 and alpha < 1:
        raise DomainError("alpha < 1 时至少需要一个直连流")
    theta = []
    for f in flows:
        value = alpha / (n * f.lambda_r)
        if f.is_direct and alpha < 1:
            value += (1.0 - alpha) / (n_direct * f.access_rate)
        theta.append(value)
    return ThroughputVector.of(theta)


def harmonic_number(n: int) -> float:
    return float(sum(1.0 / j for j in range(1, n + 1)))


def pf_closed_form_norelay(flows: Sequence[FlowSpec]) -> ThroughputVector:
    """单阶段 PF：theta_i = (H_n / n) / lambda_i"""
    _require_flows(flows)
    if any(not f.is_direct or f.incentive != 1.0 for f in flows):
        raise DomainError("闭式解仅适用于无激励的直连流")
    n = len(flows)
    scale = harmonic_number(n) / n
    return ThroughputVector.of(scale / f.lambda_r for f in flows)


# ============ 获胜期望 ============

def _subset_terms(c: np.ndarray):
    """展开所有子集 S 的 (sum_{j in S} c_j, (-1)^|S|)"""
    sums = np.zeros(1)
    signs = np.ones(1)
    for cj in c:
        sums = np.concatenate([sums, sums + cj])
        signs = np.concatenate([signs, -signs])
    return sums, signs


def _inclusion_exclusion(
    i: int,
    rates: np.ndarray,
    weights: np.ndarray,
    theta: np.ndarray,
    power: int,
) -> float:
    # i 获胜 <=> 对所有 j≠i 有 h_j < h_i * (b_i theta_j) / (b_j theta_i)
    others = np.arange(len(rates)) != i
    c = rates[others] * weights[i] * theta[others] / (weights[others] * theta[i])
    sums, signs = _subset_terms(c)
    return float(np.sum(signs * rates[i] / (rates[i] + sums) ** power))


def _phase_arrays(flows: Sequence[FlowSpec], phase: Phase):
    """返回该阶段的竞争者位置、速率参数与激励"""
    if phase is Phase.RELAY:
        members = list(range(len(flows)))
        rates = np.array([f.lambda_r for f in flows], dtype=float)
        weights = np.array([f.incentive for f in flows], dtype=float)
    else:
        members = [k for k, f in enumerate(flows) if f.is_direct]
        rates = np.array([flows[k].access_rate for k in members], dtype=float)
        weights = np.ones(len(members))
    return members, rates, weights


def _phase_kernel(
    i: int,
    flows: Sequence[FlowSpec],
    theta: ThroughputVector,
    phase: Phase,
    power: int,
    cap: Optional[int],
) -> float:
    _require_flows(flows)
    if len(theta) != len(flows):
        raise DomainError("theta 长度与流数量不一致")
    members, rates, weights = _phase_arrays(flows, phase)
    if i not in members:
        raise DomainError(f"流 {i} 不参与 {phase.value} 阶段竞争")
    local_theta = np.array([theta[k] for k in members], dtype=float)
    if np.any(local_theta <= 0):
        raise DomainError("获胜期望要求所有竞争流的 theta > 0")
    cap = settings.INCLUSION_EXCLUSION_CAP if cap is None else cap
    if len(members) > cap:
        raise InclusionExclusionCapExceeded(len(members), cap)
    return _inclusion_exclusion(members.index(i), rates, weights, local_theta, power)


def winner_expectation(
    i: int,
    flows: Sequence[FlowSpec],
    theta: ThroughputVector,
    phase: Phase = Phase.RELAY,
    cap: Optional[int] = None,
) -> float:
    """
    E[h_i * 1{i 获胜}]，获胜规则为 arg max b_j h_j / theta_j

    Args:
        i: 流位置
        flows: 流列表
        theta: 当前平均吞吐
        phase: RELAY 时所有流以 lambda_r 与激励竞争；ACCESS 时仅直连流以接入速率竞争
        cap: 容斥展开的竞争者上限，默认取配置

    Raises:
        DomainError: theta 非正或流不参与该阶段
        InclusionExclusionCapExceeded: 竞争者超过上限
    """
    return _phase_kernel(i, flows, theta, phase, power=2, cap=cap)


def winner_probability(
    i: int,
    flows: Sequence[FlowSpec],
    theta: ThroughputVector,
    phase: Phase = Phase.RELAY,
    cap: Optional[int] = None,
) -> float:
    """P(i 获胜)，与 winner_expectation 同一展开，核函数换为 lambda_i / (lambda_i + sum c_j)"""
    return _phase_kernel(i, flows, theta, phase, power=1, cap=cap)


def _phase_expectations(
    flows: Sequence[FlowSpec],
    theta: ThroughputVector,
    phase: Phase,
    cap: Optional[int],
    mc_samples: Optional[int],
) -> np.ndarray:
    """该阶段每条流的获胜期望（不参与者为 0）；超出上限时用公共随机数的蒙特卡洛估计"""
    members, _, _ = _phase_arrays(flows, phase)
    out = np.zeros(len(flows))
    cap = settings.INCLUSION_EXCLUSION_CAP if cap is None else cap
    if len(members) <= cap:
        for k in members:
            out[k] = winner_expectation(k, flows, theta, phase, cap=cap)
        return out

    from app.services.sched_mc import estimate_winner_expectation

    samples = mc_samples or settings.MC_FALLBACK_SAMPLES
    for k in members:
        out[k] = estimate_winner_expectation(k, flows, theta, samples=samples, seed=0, phase=phase).mean
    return out


# ============ 平稳方程与不动点 ============

def apply_incentive(flows: Sequence[FlowSpec], beta: float) -> List[FlowSpec]:
    """中继流激励统一设为 beta，直连流保持 1"""
    return [
        f if f.is_direct else f.model_copy(update={"incentive": float(beta)})
        for f in flows
    ]


def two_flow_population(
    lambda_direct_r: float = 1.0,
    lambda_direct_a: Optional[float] = 1.0,
    lambda_relayed: float = 1.0,
    beta: float = 1.0,
) -> List[FlowSpec]:
    """一个直连流 + 一个中继流的基准人口"""
    return [
        FlowSpec(id=0, flow_class=FlowClass.DIRECT, lambda_r=lambda_direct_r, lambda_a=lambda_direct_a),
        FlowSpec(id=1, flow_class=FlowClass.RELAYED, lambda_r=lambda_relayed, incentive=beta),
    ]


def initial_guess(flows: Sequence[FlowSpec], alpha: float = 1.0) -> ThroughputVector:
    """按阶段时长加权的平均增益"""
    return ThroughputVector.of(
        alpha / f.lambda_r + (1.0 - alpha) / f.access_rate if f.is_direct else alpha / f.lambda_r
        for f in flows
    )


def stationary_map(
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
    theta: ThroughputVector,
    cap: Optional[int] = None,
    mc_samples: Optional[int] = None,
) -> np.ndarray:
    """
    两阶段平稳映射 F(theta)

    直连流：alpha * E_r + (1 - alpha) * E_a；中继流：alpha * E_r。
    alpha = 0 时跳过中继阶段项，alpha = 1 时跳过接入阶段项。
    """
    alpha = config.alpha
    result = np.zeros(len(flows))
    if alpha > 0:
        result += alpha * _phase_expectations(flows, theta, Phase.RELAY, cap, mc_samples)
    if alpha < 1:
        result += (1.0 - alpha) * _phase_expectations(flows, theta, Phase.ACCESS, cap, mc_samples)
    return result


def stationary_residual(
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
    theta: ThroughputVector,
    cap: Optional[int] = None,
) -> float:
    """平稳方程的最大绝对残差 max |F(theta) - theta|"""
    return float(np.max(np.abs(stationary_map(flows, config, theta, cap) - theta.as_array())))


def _damped_iteration(
    mapping: Callable[[ThroughputVector], np.ndarray],
    start: ThroughputVector,
    tolerance: float,
    max_iter: int,
    damping: float,
) -> FixedPointReport:
    theta = start.as_array()
    residual = float("inf")
    iterations = 0
    for iterations in range(1, max_iter + 1):
        current = ThroughputVector.of(theta)
        image = mapping(current)
        residual = float(np.max(np.abs(image - theta)))
        if residual <= tolerance:
            return FixedPointReport(
                theta=current,
                iterations=iterations,
                residual=residual,
                converged=True,
                tolerance=tolerance,
                damping=damping,
            )
        theta = (1.0 - damping) * theta + damping * image

    logger.warning(f"✗ 不动点迭代未收敛：{max_iter} 次后残差 {residual:.3e}")
    return FixedPointReport(
        theta=ThroughputVector.of(theta),
        iterations=iterations,
        residual=residual,
        converged=False,
        tolerance=tolerance,
        damping=damping,
    )


def _solver_settings(tolerance, max_iter, damping, n_flows, cap):
    tolerance = settings.SOLVER_TOLERANCE if tolerance is None else tolerance
    max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter
    damping = settings.SOLVER_DAMPING if damping is None else damping
    if not 0 < damping <= 1:
        raise DomainError(f"阻尼系数必须位于 (0, 1]：{damping}")
    cap = settings.INCLUSION_EXCLUSION_CAP if cap is None else cap
    if n_flows > cap:
        # 蒙特卡洛估计有统计误差，容差放宽到其精度量级
        tolerance = max(tolerance, settings.MC_FALLBACK_TOLERANCE)
        logger.info(f"流数量 {n_flows} 超过容斥上限 {cap}，改用蒙特卡洛估计（容差 {tolerance:g}）")
    return tolerance, max_iter, damping, cap


def fixed_point_norelay(
    flows: Sequence[FlowSpec],
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
    damping: Optional[float] = None,
    cap: Optional[int] = None,
) -> FixedPointReport:
    """单阶段 PF 平稳方程 theta_i = E[h_i * 1{i 获胜}] 的阻尼不动点"""
    _require_flows(flows)
    if any(not f.is_direct for f in flows):
        raise DomainError("无中继求解器只接受直连流")
    tolerance, max_iter, damping, cap = _solver_settings(tolerance, max_iter, damping, len(flows), cap)
    config = RelayPhaseConfig(tau_r=1, tau_a=0)
    report = _damped_iteration(
        partial(stationary_map, flows, config, cap=cap),
        initial_guess(flows),
        tolerance,
        max_iter,
        damping,
    )
    logger.debug(f"单阶段 PF 求解：{report.iterations} 次迭代，残差 {report.residual:.2e}")
    return report


def fixed_point_relay(
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
    damping: Optional[float] = None,
    cap: Optional[int] = None,
) -> FixedPointReport:
    """
    两阶段（半双工中继）激励 PF 平稳方程的阻尼不动点

    config.beta 覆盖中继流的激励系数。

    Raises:
        DomainError: 没有直连流
    """
    _require_flows(flows)
    if not any(f.is_direct for f in flows):
        raise DomainError("两阶段求解至少需要一个直连流")
    tolerance, max_iter, damping, cap = _solver_settings(tolerance, max_iter, damping, len(flows), cap)
    population = apply_incentive(flows, config.beta)
    report = _damped_iteration(
        partial(stationary_map, population, config, cap=cap),
        initial_guess(population, config.alpha),
        tolerance,
        max_iter,
        damping,
    )
    logger.debug(
        f"两阶段 PF 求解 (alpha={config.alpha:.4g}, beta={config.beta:g})："
        f"{report.iterations} 次迭代，残差 {report.residual:.2e}"
    )
    return report


def beta_asymptote(flows: Sequence[FlowSpec], config: RelayPhaseConfig) -> ThroughputVector:
    """beta→∞ 的极限：两个按时间复用的独立 PF 系统"""
    _require_flows(flows)
    alpha = config.alpha
    direct = [k for k, f in enumerate(flows) if f.is_direct]
    relayed = [k for k, f in enumerate(flows) if not f.is_direct]
    theta = np.zeros(len(flows))
    if direct:
        scale = harmonic_number(len(direct)) / len(direct)
        for k in direct:
            theta[k] = (1.0 - alpha) * scale / flows[k].access_rate
    if relayed:
        scale = harmonic_number(len(relayed)) / len(relayed)
        for k in relayed:
            theta[k] = alpha * scale / flows[k].lambda_r
    return ThroughputVector.of(theta)


def pf_multiuser_gain(flows: Sequence[FlowSpec], config: RelayPhaseConfig) -> float:
    """两阶段 PF 总吞吐与 RR（按全部时隙折算）总吞吐之比"""
    report = fixed_point_relay(flows, config)
    rr_total = float(np.sum(rr_share_of_slots(flows).as_array()))
    return float(np.sum(report.theta.as_array())) / rr_total


# ============ 平衡规则 ============

def recommended_beta(alpha: float, lambda_r: float, lambda_a: float) -> float:
    """让中继流在 alpha 时间内与接入流平均吞吐相等的激励 beta = alpha lambda_r / ((1 - alpha) lambda_a)"""
    if alpha >= 1.0:
        raise DomainError("alpha = 1 时没有接入阶段可供平衡")
    if alpha <= 0.0:
        raise DomainError(f"alpha 必须位于 (0, 1)：{alpha}")
    if lambda_r <= 0 or lambda_a <= 0:
        raise DomainError("速率参数必须为正")
    return alpha * lambda_r / ((1.0 - alpha) * lambda_a)


def _check_efficiencies(rho_r: float, rho_a: float) -> None:
    if rho_r <= 0 or rho_a <= 0:
        raise DomainError(f"频谱效率必须为正：rho_r={rho_r}, rho_a={rho_a}")


def end_to_end_efficiency(rho_r: float, rho_a: float) -> float:
    """最优划分下的端到端频谱效率 rho_r rho_a / (rho_r + rho_a)"""
    _check_efficiencies(rho_r, rho_a)
    return rho_r * rho_a / (rho_r + rho_a)


def optimal_split(rho_r: float, rho_a: float) -> float:
    """使 alpha rho_r = (1 - alpha) rho_a 的中继链路时间占比"""
    _check_efficiencies(rho_r, rho_a)
    return rho_a / (rho_r + rho_a)


# ============ 参数扫描 ============

def population_for(
    parameter: str,
    value: float,
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
):
    """把扫描参数的一个取值应用到基准人口与帧配置上"""
    if parameter == "beta":
        if not value >= 1.0:
            raise DomainError(f"beta 必须不小于 1：{value}")
        return list(flows), config.model_copy(update={"beta": float(value)})
    if parameter == "alpha":
        return list(flows), RelayPhaseConfig.from_alpha(value, beta=config.beta)
    if parameter == "gamma":
        if value <= 0:
            raise DomainError(f"gamma 必须为正：{value}")
        # gamma = 接入阶段平均增益 / 中继阶段平均增益
        shifted = [
            f.model_copy(update={"lambda_a": f.lambda_r / value}) if f.is_direct else f
            for f in flows
        ]
        return shifted, config
    raise DomainError(f"未知扫描参数：{parameter}")


def sweep_point(
    parameter: str,
    value: float,
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
    damping: Optional[float] = None,
) -> SweepRow:
    population, point_config = population_for(parameter, value, flows, config)
    report = fixed_point_relay(population, point_config, tolerance, max_iter, damping)
    if not report.converged:
        logger.warning(f"扫描点 {parameter}={value:g} 未收敛（残差 {report.residual:.2e}）")
    return SweepRow(parameter=parameter, value=float(value), report=report)


def sweep(
    parameter: str,
    values: Sequence[float],
    flows: Sequence[FlowSpec],
    config: RelayPhaseConfig,
    tolerance: Optional[float] = None,
    max_iter: Optional[int] = None,
    damping: Optional[float] = None,
    runner=None,
) -> List[SweepRow]:
    """
    对 beta / alpha / gamma 做一维扫描，每个取值求解一次 fixed_point_relay

    Args:
        runner: 可选 BatchRunner，用于并行计算各行；输出始终按参数值排序

    Returns:
        SweepRow 列表；单行不收敛只在行内标记
    """
    if parameter not in SWEEP_PARAMETERS:
        raise DomainError(f"未知扫描参数：{parameter}")
    values = [float(v) for v in values]
    if not values or not all(np.isfinite(values)):
        raise DomainError("扫描范围必须是非空的有限数列")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise DomainError("扫描范围必须严格递增")

    tasks = [
        partial(sweep_point, parameter, v, list(flows), config, tolerance, max_iter, damping)
        for v in values
    ]
    if runner is None:
        rows = [task() for task in tasks]
    else:
        rows = runner.run(tasks)

    failed = sum(1 for row in rows if not row.report.converged)
    logger.info(f"✓ {parameter} 扫描完成：{len(rows)} 个点，{failed} 个未收敛")
    return sorted(rows, key=lambda row: row.value)

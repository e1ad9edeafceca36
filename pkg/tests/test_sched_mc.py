import numpy as np
import pytest

from app.models import FlowClass, FlowSpec, McConfig, Phase, RelayPhaseConfig, SchedulingPolicy, ThroughputVector
from app.services.sched_analytic import (
    fixed_point_norelay,
    fixed_point_relay,
    rr_closed_form,
    rr_phase_gated,
    two_flow_population,
    winner_expectation,
)
from app.services.sched_mc import MIN_ESTIMATE_SAMPLES, estimate_winner_expectation, flow_generator, run_mc
from app.utils.errors import DomainError

HALF = RelayPhaseConfig(tau_r=1, tau_a=1)


def mc_config(flows, config=HALF, slots=20_000, epsilon=0.01, seed=1, trace_every=None):
    return McConfig(
        slots=slots, ewma_epsilon=epsilon, seed=seed, config=config, flows=flows, trace_every=trace_every
    )


@pytest.fixture
def baseline():
    return two_flow_population()


@pytest.fixture
def norelay():
    return [FlowSpec(id=k, flow_class=FlowClass.DIRECT, lambda_r=1.0) for k in range(2)]


# ============ 随机数 ============

def test_flow_generator_deterministic():
    """测试同一 (seed, flow_id) 得到相同序列"""
    a = flow_generator(5, 3).standard_exponential(10)
    b = flow_generator(5, 3).standard_exponential(10)
    np.testing.assert_array_equal(a, b)


def test_flow_generator_independent_per_flow():
    """测试不同流的序列不同"""
    a = flow_generator(5, 0).standard_exponential(10)
    b = flow_generator(5, 1).standard_exponential(10)
    assert not np.array_equal(a, b)


# ============ 记账与门控 ============

def test_accounting(baseline):
    """测试每个时隙恰好一个获胜者，中继阶段时隙数正确"""
    result = run_mc(mc_config(baseline, slots=10_001))
    assert sum(result.win_counts) + result.idle_slots == 10_001
    assert result.relay_phase_slots == 5_001
    assert sum(result.relay_phase_wins) == result.relay_phase_slots
    assert result.idle_slots == 0


def test_relayed_flow_never_wins_access_phase(baseline):
    """测试中继流在接入阶段不获胜"""
    result = run_mc(mc_config(baseline))
    assert result.access_phase_wins[1] == 0
    assert result.relay_phase_wins[1] > 0


def test_all_relayed_requires_full_relay_phase():
    """测试全部为中继流且 alpha < 1 时报错，alpha = 1 时可运行"""
    flows = [FlowSpec(id=0, flow_class=FlowClass.RELAYED, lambda_r=1.0)]
    with pytest.raises(DomainError):
        run_mc(mc_config(flows))
    result = run_mc(mc_config(flows, config=RelayPhaseConfig(tau_r=1, tau_a=0), slots=2_000))
    assert result.win_counts == [2_000]


def test_same_seed_reproducible(baseline):
    """测试同一种子结果完全一致"""
    a = run_mc(mc_config(baseline, slots=5_000))
    b = run_mc(mc_config(baseline, slots=5_000))
    assert a.credited_mean.theta == b.credited_mean.theta
    assert a.win_counts == b.win_counts


def test_different_seed_differs(baseline):
    a = run_mc(mc_config(baseline, slots=5_000, seed=1))
    b = run_mc(mc_config(baseline, slots=5_000, seed=2))
    assert a.credited_mean.theta != b.credited_mean.theta


def test_trace_sampling(baseline):
    """测试轨迹每 trace_every 个时隙每条流一个点"""
    result = run_mc(mc_config(baseline, slots=1_000, trace_every=100))
    assert len(result.trace) == 10 * len(baseline)
    assert [p.slot for p in result.trace[:4]] == [0, 0, 100, 100]


def test_no_trace_by_default(baseline):
    assert run_mc(mc_config(baseline, slots=1_000)).trace is None


# ============ 与解析结果对照 ============

def test_rr_matches_phase_gated(baseline):
    """测试 RR 仿真与两阶段 RR 解析值一致"""
    result = run_mc(mc_config(baseline, slots=200_000), policy=SchedulingPolicy.RR)
    expected = rr_phase_gated(baseline, HALF).as_array()
    np.testing.assert_allclose(result.credited_mean.as_array(), expected, rtol=0.02)
    # 中继阶段两流各占一半
    assert result.relay_phase_wins[0] == result.relay_phase_wins[1]


@pytest.mark.parametrize("n", [1, 3, 5])
def test_rr_win_counts_fair(n):
    """测试 alpha = 1 时 RR 每条流的获胜次数在 slots / n ± 1 以内"""
    flows = [FlowSpec(id=k, flow_class=FlowClass.DIRECT, lambda_r=1.0 + k) for k in range(n)]
    slots = 10_001
    result = run_mc(mc_config(flows, config=RelayPhaseConfig(tau_r=1, tau_a=0), slots=slots), policy=SchedulingPolicy.RR)
    assert result.idle_slots == 0
    for wins in result.win_counts:
        assert abs(wins - slots / n) <= 1


def test_rr_single_flow_mean_gain():
    """测试 RR 单流 lambda = 2：解析值与仿真均为 0.5"""
    flows = [FlowSpec(id=0, flow_class=FlowClass.DIRECT, lambda_r=2.0)]
    assert rr_closed_form(flows).theta == pytest.approx((0.5,))
    config = RelayPhaseConfig(tau_r=1, tau_a=0)
    result = run_mc(mc_config(flows, config=config, slots=40_000), policy=SchedulingPolicy.RR)
    assert result.win_counts == [40_000]
    assert result.credited_mean[0] == pytest.approx(0.5, rel=0.03)


def test_short_pf_run_near_baseline(norelay):
    """测试较短的 PF 仿真已接近 (0.75, 0.75)"""
    result = run_mc(mc_config(norelay, config=RelayPhaseConfig(tau_r=1, tau_a=0), slots=100_000))
    np.testing.assert_allclose(result.credited_mean.as_array(), [0.75, 0.75], rtol=0.05)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_pf_norelay_oracle(norelay, seed):
    """测试无中继 PF：1e6 时隙、eps = 1e-3 与不动点相差 2% 以内"""
    config = RelayPhaseConfig(tau_r=1, tau_a=0)
    result = run_mc(mc_config(norelay, config=config, slots=1_000_000, epsilon=1e-3, seed=seed))
    oracle = fixed_point_norelay(norelay).theta.as_array()
    np.testing.assert_allclose(result.credited_mean.as_array(), oracle, rtol=0.02)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_pf_relay_oracle(baseline, seed):
    """测试两阶段 PF 基准点"""
    result = run_mc(mc_config(baseline, slots=1_000_000, epsilon=1e-3, seed=seed))
    oracle = fixed_point_relay(baseline, HALF).theta.as_array()
    np.testing.assert_allclose(result.credited_mean.as_array(), oracle, rtol=0.02)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_incentivized_pf_oracle(baseline, seed):
    """测试 beta = 10 的激励 PF"""
    config = RelayPhaseConfig(tau_r=1, tau_a=1, beta=10.0)
    result = run_mc(
        mc_config(baseline, config=config, slots=1_000_000, epsilon=1e-3, seed=seed),
        policy=SchedulingPolicy.INCENTIVIZED_PF,
    )
    oracle = fixed_point_relay(baseline, config).theta.as_array()
    np.testing.assert_allclose(result.credited_mean.as_array(), oracle, rtol=0.02)


# ============ 获胜期望估计 ============

def test_estimate_matches_inclusion_exclusion():
    """测试蒙特卡洛估计与容斥公式一致（4 倍标准误以内）"""
    flows = [
        FlowSpec(id=0, flow_class=FlowClass.DIRECT, lambda_r=1.0),
        FlowSpec(id=1, flow_class=FlowClass.DIRECT, lambda_r=2.0),
        FlowSpec(id=2, flow_class=FlowClass.RELAYED, lambda_r=0.5, incentive=3.0),
    ]
    theta = ThroughputVector.of([0.6, 0.3, 0.9])
    for i in range(3):
        estimate = estimate_winner_expectation(i, flows, theta, samples=200_000, seed=11)
        exact = winner_expectation(i, flows, theta)
        assert abs(estimate.mean - exact) <= 4 * estimate.stderr + 1e-12


def test_estimate_access_phase(baseline):
    """测试接入阶段只有直连流参与"""
    theta = ThroughputVector.of([0.5, 0.5])
    estimate = estimate_winner_expectation(0, baseline, theta, samples=MIN_ESTIMATE_SAMPLES, phase=Phase.ACCESS)
    assert estimate.mean == pytest.approx(1.0, rel=0.05)
    with pytest.raises(DomainError):
        estimate_winner_expectation(1, baseline, theta, phase=Phase.ACCESS)


def test_estimate_rejects_small_sample(baseline):
    """测试样本数不足 1e4 时报错"""
    with pytest.raises(DomainError):
        estimate_winner_expectation(0, baseline, ThroughputVector.of([0.5, 0.5]), samples=9_999)

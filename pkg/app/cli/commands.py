"""
子命令处理函数

约定：先完成全部计算再创建输出目录，配置或参数错误时不留下任何输出文件；
结果写完后若存在未收敛项则抛出 ConvergenceError（退出码 2）。
"""

import argparse
import json
import math
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional

from app.config import settings
from app.models import FixedPointReport, RelayPhaseConfig, SchedulingPolicy, SubframePlan
from app.schemas import (
    CompareFile,
    McFile,
    MapFile,
    ScenarioFile,
    SolveFile,
    SweepFile,
    export_json_schemas,
)
from app.services import report_writer
from app.services.batch_runner import BatchRunner
from app.services.config_loader import ConfigLoader, write_manifest
from app.services.monitor_service import MonitorService
from app.services.radio_model import render_sinr_map
from app.services.relay_sim import buffer_balance_report, check_invariants, compare_plans, run_scenario
from app.services.sched_analytic import (
    fixed_point_norelay,
    fixed_point_relay,
    rr_closed_form,
    rr_phase_gated,
    rr_share_of_slots,
    sweep,
)
from app.services.sched_mc import run_mc
from app.utils.errors import EXIT_NONCONVERGED, EXIT_OK, ConvergenceError, DomainError
from app.utils.logger import setup_logger
from app.utils.retry import retry_with_damping

logger = setup_logger(__name__)

Handler = Callable[[argparse.Namespace, MonitorService], int]


def _prepare_output(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(
    args: argparse.Namespace,
    monitor: MonitorService,
    out: Path,
    resolved: dict,
    converged: bool = True,
) -> int:
    """写 manifest 与可选的指标文件；有未收敛项时抛出 ConvergenceError"""
    write_manifest(out, args.command, args.config, resolved, args.seed)
    monitor.record_cli_run(args.command, EXIT_OK if converged else EXIT_NONCONVERGED)
    if args.metrics:
        monitor.write_textfile(out / "metrics.prom")
    if not converged:
        raise ConvergenceError(f"{args.command}：存在未收敛的结果，详见 {out}")
    logger.info(f"✓ {args.command} 完成，输出目录 {out}")
    return EXIT_OK


def _runner(args: argparse.Namespace) -> BatchRunner:
    return BatchRunner(args.jobs)


# ============ solve ============

def cmd_solve(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = ConfigLoader(args.config).load(SolveFile)
    flows = cfg.flows
    solver = cfg.solver

    if cfg.frame is None:
        name = "norelay"
        phase_config = RelayPhaseConfig(tau_r=1, tau_a=0)

        def solve(damping: float) -> FixedPointReport:
            return fixed_point_norelay(flows, solver.tolerance, solver.max_iter, damping)
    else:
        name = "relay"
        phase_config = cfg.frame.to_config()

        def solve(damping: float) -> FixedPointReport:
            return fixed_point_relay(flows, phase_config, solver.tolerance, solver.max_iter, damping)

    report = retry_with_damping(solve, solver.damping, solver.retries)
    monitor.record_solve(name, report.converged, report.iterations)
    rr_slot = rr_closed_form(flows)
    rr_share = rr_share_of_slots(flows) if cfg.frame is None else rr_phase_gated(flows, phase_config)

    out = _prepare_output(args.out)
    report_writer.write_csv(
        out / "theta.csv",
        ["flow_id", "class", "theta", "residual", "converged", "rr_per_scheduled_slot", "rr_share_of_slots"],
        [
            [f.id, f.flow_class, report.theta[k], report.residual, report.converged, rr_slot[k], rr_share[k]]
            for k, f in enumerate(flows)
        ],
    )
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True), report.converged)


# ============ sweep ============

def cmd_sweep(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = ConfigLoader(args.config).load(SweepFile)
    solver = cfg.solver
    rows = sweep(
        cfg.parameter,
        cfg.resolved_values(),
        cfg.flows,
        cfg.frame.to_config(),
        solver.tolerance,
        solver.max_iter,
        solver.damping,
        runner=_runner(args),
    )
    for row in rows:
        monitor.record_solve("relay", row.report.converged, row.report.iterations)

    out = _prepare_output(args.out)
    report_writer.write_csv(out / "sweep.csv", report_writer.sweep_header(cfg.flows), report_writer.sweep_rows(rows))
    if args.svg:
        report_writer.plot_sweep_svg(rows, cfg.flows, out / "sweep.svg")
    converged = all(row.report.converged for row in rows)
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True), converged)


# ============ mc ============

def _mc_oracle(cfg: McFile) -> Optional[FixedPointReport]:
    """时隙仿真对应的解析值；RR 用相位门控闭式，PF 不带激励，激励 PF 带 frame.beta"""
    phase_config = cfg.frame.to_config()
    if cfg.policy is SchedulingPolicy.RR:
        theta = rr_phase_gated(cfg.flows, phase_config)
        return FixedPointReport(theta=theta, iterations=0, residual=0.0, converged=True, tolerance=0.0, damping=1.0)
    if cfg.policy is SchedulingPolicy.PF:
        phase_config = phase_config.model_copy(update={"beta": 1.0})
    try:
        return fixed_point_relay(cfg.flows, phase_config)
    except DomainError as e:
        logger.warning(f"该人口没有解析对照：{e}")
        return None


def cmd_mc(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = ConfigLoader(args.config).load(McFile)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seeds": [args.seed]})
    if args.svg and cfg.trace_every is None:
        # 出图需要轨迹
        cfg = cfg.model_copy(update={"trace_every": settings.MC_TRACE_EVERY})
    if cfg.slots < 10.0 / cfg.ewma_epsilon:
        logger.warning(f"时隙数 {cfg.slots} 少于 10/eps，EWMA 可能未收敛")

    configs = [cfg.to_config(seed) for seed in cfg.seeds]
    tasks = [partial(run_mc, mc_config, cfg.policy) for mc_config in configs]
    results = _runner(args).run(tasks)
    for result in results:
        monitor.record_mc_run(cfg.policy.value, result.slots)
    oracle = _mc_oracle(cfg)
    oracle_theta = [math.nan] * len(cfg.flows) if oracle is None else list(oracle.theta.theta)

    out = _prepare_output(args.out)
    rows = []
    for seed, result in zip(cfg.seeds, results):
        for k, flow in enumerate(cfg.flows):
            credited = result.credited_mean[k]
            reference = oracle_theta[k]
            rel_error = abs(credited - reference) / reference if reference and not math.isnan(reference) else math.nan
            rows.append([
                seed, flow.id, flow.flow_class, result.empirical_theta[k], credited, reference, rel_error,
                result.win_counts[k], result.relay_phase_wins[k], result.access_phase_wins[k],
            ])
    report_writer.write_csv(
        out / "mc.csv",
        ["seed", "flow_id", "class", "empirical_theta", "credited_mean", "oracle_theta", "rel_error",
         "wins", "relay_phase_wins", "access_phase_wins"],
        rows,
    )
    report_writer.write_csv(
        out / "mc_slots.csv",
        ["seed", "slots", "idle_slots", "relay_phase_slots"],
        [[seed, r.slots, r.idle_slots, r.relay_phase_slots] for seed, r in zip(cfg.seeds, results)],
    )
    if cfg.trace_every:
        report_writer.write_csv(
            out / "mc_trace.csv",
            ["slot", "flow_id", "theta_bar", "seed"],
            [[p.slot, p.flow_id, p.theta_bar, seed] for seed, r in zip(cfg.seeds, results) for p in r.trace or []],
        )
        if args.svg:
            report_writer.plot_mc_trace_svg(results[0].trace or [], cfg.flows, out / "mc_trace.svg", oracle_theta)
    converged = oracle is None or oracle.converged
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True), converged)


# ============ sim / compare ============

def _scenario_file(cfg: ScenarioFile, seed: Optional[int]) -> ScenarioFile:
    return cfg if seed is None else cfg.model_copy(update={"seed": seed})


def cmd_sim(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = _scenario_file(ConfigLoader(args.config).load(ScenarioFile), args.seed)
    result = run_scenario(cfg.to_config())
    invariants = check_invariants(result.records, result.buffers)
    balance = buffer_balance_report(result)
    summary = result.summary
    monitor.record_sim_run(summary.plan, summary.tti_count, summary.drops)

    out = _prepare_output(args.out)
    report_writer.write_csv(out / "trace.csv", report_writer.TRACE_HEADER, report_writer.trace_rows(result.records))
    summary_rows: List[list] = [
        ["plan", summary.plan],
        ["tti_count", summary.tti_count],
        ["direct_throughput", summary.direct_throughput],
        ["relayed_throughput", summary.relayed_throughput],
        ["backhaul_throughput", summary.backhaul_throughput],
        ["drops", summary.drops],
        ["idle_access_rbs", summary.idle_access_rbs],
        ["relay_active_u_fraction", summary.relay_active_u_fraction],
    ]
    for family in ("mean_direct_cqi", "mean_relayed_cqi", "mean_direct_mcs"):
        summary_rows += [[f"{family}_{kind}", value] for kind, value in getattr(summary, family).items()]
    summary_rows += [[f"ue_bytes_{u}", b] for u, b in enumerate(summary.per_ue_bytes)]
    summary_rows += [
        ["half_duplex_violations", invariants.half_duplex_violations],
        ["gating_violations", invariants.gating_violations],
        ["conservation_ok", invariants.conservation_ok],
    ]
    report_writer.write_csv(out / "summary.csv", ["metric", "value"], summary_rows)
    report_writer.write_csv(
        out / "balance.csv",
        ["rn", "inbound_rate", "outbound_rate", "drops", "idle_access_rbs", "rho_r", "rho_a",
         "plan_alpha", "alpha_star", "verdict"],
        [
            [b.rn, b.inbound_rate, b.outbound_rate, b.drops, b.idle_access_rbs, b.rho_r, b.rho_a,
             b.plan_alpha, b.alpha_star, b.verdict]
            for b in balance
        ],
    )
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True))


def cmd_compare(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = ConfigLoader(args.config).load(CompareFile)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"scenario": _scenario_file(cfg.scenario, args.seed)})
    comparison = compare_plans(
        cfg.scenario.to_config(),
        SubframePlan.from_string(cfg.plan_a),
        SubframePlan.from_string(cfg.plan_b),
        tie_tolerance=cfg.tie_tolerance,
        runner=_runner(args),
    )
    for summary in (comparison.summary_a, comparison.summary_b):
        monitor.record_sim_run(summary.plan, summary.tti_count, summary.drops)

    out = _prepare_output(args.out)
    report_writer.write_csv(
        out / "comparison.csv",
        ["metric", f"plan_a:{comparison.plan_a}", f"plan_b:{comparison.plan_b}", "dominant"],
        [[row.metric, row.value_a, row.value_b, row.dominant] for row in comparison.rows],
    )
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True))


# ============ map ============

def cmd_map(args: argparse.Namespace, monitor: MonitorService) -> int:
    cfg = ConfigLoader(args.config).load(MapFile)
    geometry = cfg.to_geometry()
    runner = _runner(args)
    grids = [
        render_sinr_map(geometry, scenario, cfg.resolution, cfg.bounds, runner=runner)
        for scenario in cfg.scenarios
    ]

    out = _prepare_output(args.out)
    for grid in grids:
        report_writer.write_sinr_grid(out / f"sinr_{grid.scenario}.csv", grid)
        if args.svg:
            report_writer.plot_sinr_map_svg(grid, out / f"sinr_{grid.scenario}.svg", marks=geometry.relay_xy)
    return _finish(args, monitor, out, cfg.model_dump(mode="json", by_alias=True))


# ============ schema ============

def cmd_schema(args: argparse.Namespace, monitor: MonitorService) -> int:
    """导出各子命令配置文件的 JSON Schema"""
    schemas = export_json_schemas()
    out = _prepare_output(args.out)
    for name, schema in schemas.items():
        with open(out / f"{name}.schema.json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(schema, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
    logger.info(f"✓ 已导出 {len(schemas)} 个 JSON Schema 到 {out}")
    return 0


HANDLERS: Dict[str, Handler] = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "mc": cmd_mc,
    "sim": cmd_sim,
    "compare": cmd_compare,
    "map": cmd_map,
    "schema": cmd_schema,
}

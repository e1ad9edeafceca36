from pathlib import Path

from prometheus_client import (
    CollectorRegistry,
    Counter,
    disable_created_metrics,
    generate_latest,
    write_to_textfile,
)

from app.utils.logger import setup_logger

logger = setup_logger(__name__)

# *_created 样本带有时间戳
disable_created_metrics()


class MonitorService:
    """
    监控和指标收集服务

    指标注册在私有 CollectorRegistry 上，只记录计数器，
    导出的文本文件在相同输入下逐字节一致。
    """

    def __init__(self, registry: CollectorRegistry = None):
        self.registry = registry or CollectorRegistry()

        self.solves_total = Counter(
            'relaylab_solves_total',
            '不动点求解次数',
            ['solver', 'status'],
            registry=self.registry,
        )
        self.solver_iterations_total = Counter(
            'relaylab_solver_iterations_total',
            '不动点迭代总次数',
            ['solver'],
            registry=self.registry,
        )
        self.mc_slots_total = Counter(
            'relaylab_mc_slots_total',
            '时隙仿真总时隙数',
            ['policy'],
            registry=self.registry,
        )
        self.sim_ttis_total = Counter(
            'relaylab_sim_ttis_total',
            '系统级仿真总 TTI 数',
            ['plan'],
            registry=self.registry,
        )
        self.relay_drops_bytes_total = Counter(
            'relaylab_relay_drops_bytes_total',
            '中继缓存丢弃字节总数',
            registry=self.registry,
        )
        self.cli_runs_total = Counter(
            'relaylab_cli_runs_total',
            '命令行运行次数',
            ['subcommand', 'exit_code'],
            registry=self.registry,
        )

    def record_solve(self, solver: str, converged: bool, iterations: int):
        """记录一次求解"""
        self.solves_total.labels(solver=solver, status="converged" if converged else "diverged").inc()
        self.solver_iterations_total.labels(solver=solver).inc(iterations)

    def record_mc_run(self, policy: str, slots: int):
        self.mc_slots_total.labels(policy=policy).inc(slots)

    def record_sim_run(self, plan: str, ttis: int, drops: int):
        """记录一次系统级仿真"""
        self.sim_ttis_total.labels(plan=plan).inc(ttis)
        if drops:
            self.relay_drops_bytes_total.inc(drops)

    def record_cli_run(self, subcommand: str, exit_code: int):
        self.cli_runs_total.labels(subcommand=subcommand, exit_code=str(exit_code)).inc()

    def get_metrics(self) -> bytes:
        """获取 Prometheus 格式的指标"""
        return generate_latest(self.registry)

    def write_textfile(self, path: Path) -> Path:
        """写出 node-exporter 文本格式（metrics.prom）"""
        write_to_textfile(str(path), self.registry)
        logger.debug(f"指标已写入 {path}")
        return Path(path)

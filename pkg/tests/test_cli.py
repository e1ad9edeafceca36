import csv
import json
from unittest.mock import patch

import pytest

from app.main import build_parser, main
from app.templates.defaults import example_path
from app.utils.errors import EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_OK


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_json(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return str(path)


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


# ============ 参数与退出码 ============

def test_parser_subcommands():
    parser = build_parser()
    args = parser.parse_args(["sim", "--config", "x.json", "--seed", "3", "--jobs", "2", "--svg"])
    assert args.command == "sim"
    assert args.seed == 3 and args.jobs == 2 and args.svg


def test_missing_config_argument():
    """测试缺少 --config 时退出码为 1"""
    assert main(["solve"]) == EXIT_CONFIG


def test_unknown_subcommand():
    assert main(["launch"]) == EXIT_CONFIG


def test_bad_jobs(out):
    assert main(["solve", "--config", str(example_path("solve_baseline.json")), "--out", str(out), "--jobs", "0"]) == EXIT_CONFIG
    assert not out.exists()


def test_malformed_config_leaves_no_output(tmp_path, out):
    """测试配置错误时退出码为 1 且不创建输出"""
    path = tmp_path / "broken.json"
    path.write_text('{"flows": [', encoding="utf-8")
    assert main(["solve", "--config", str(path), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_invalid_domain_value_leaves_no_output(tmp_path, out):
    """测试全部为中继流的 mc 配置"""
    config = write_json(tmp_path, {
        "flows": [{"id": 0, "class": "relayed", "lambda_r": 1.0}],
        "frame": {"tau_r": 1, "tau_a": 1},
        "slots": 1000,
    })
    assert main(["mc", "--config", config, "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


# ============ solve ============

def test_solve_baseline(out):
    """测试基准配置的 theta.csv 与 manifest"""
    code = main(["solve", "--config", str(example_path("solve_baseline.json")), "--out", str(out)])
    assert code == EXIT_OK
    rows = read_csv(out / "theta.csv")
    assert [row["class"] for row in rows] == ["direct", "relayed"]
    assert float(rows[0]["theta"]) == pytest.approx(0.79, abs=0.01)
    assert float(rows[1]["theta"]) == pytest.approx(0.44, abs=0.01)
    assert all(row["converged"] == "true" for row in rows)
    assert float(rows[0]["rr_share_of_slots"]) == pytest.approx(0.75)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["subcommand"] == "solve"
    assert len(manifest["config_hash"]) == 64


def test_solve_single_flow(tmp_path, out):
    """测试单流吞吐为 1/lambda"""
    config = write_json(tmp_path, {"flows": [{"id": 7, "class": "direct", "lambda_r": 2.0}]})
    assert main(["solve", "--config", config, "--out", str(out)]) == EXIT_OK
    rows = read_csv(out / "theta.csv")
    assert rows[0]["flow_id"] == "7"
    assert float(rows[0]["theta"]) == pytest.approx(0.5)


def test_solve_nonconvergence_exit_code(tmp_path, out):
    """测试不收敛时退出码为 2，结果仍写出"""
    config = write_json(tmp_path, {
        "flows": [{"id": 0, "class": "direct", "lambda_r": 1.0}, {"id": 1, "class": "relayed", "lambda_r": 1.0}],
        "frame": {"tau_r": 1, "tau_a": 1},
        "solver": {"max_iter": 1, "retries": 0},
    })
    assert main(["solve", "--config", config, "--out", str(out), "--metrics"]) == EXIT_NONCONVERGED
    rows = read_csv(out / "theta.csv")
    assert all(row["converged"] == "false" for row in rows)
    assert 'exit_code="2"' in (out / "metrics.prom").read_text(encoding="utf-8")


def test_rerun_byte_identical(out):
    """测试同一配置重复运行输出逐字节一致"""
    argv = ["solve", "--config", str(example_path("solve_norelay.json")), "--out", str(out), "--metrics"]
    assert main(argv) == EXIT_OK
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == EXIT_OK
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second
    assert set(first) == {"theta.csv", "manifest.json", "metrics.prom"}


# ============ sweep ============

def test_sweep_beta(out):
    """测试 beta 扫描：25 个点，直连流单调不增"""
    assert main(["sweep", "--config", str(example_path("sweep_beta.json")), "--out", str(out), "--svg"]) == EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 25
    assert list(rows[0]) == ["parameter", "value", "theta_0", "theta_1", "residual", "converged", "iterations"]
    direct = [float(r["theta_0"]) for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(direct, direct[1:]))
    assert (out / "sweep.svg").exists()


def test_sweep_alpha_out_of_range(tmp_path, out):
    """测试 alpha 扫描越界：退出码 1，不产生输出"""
    data = json.loads(example_path("sweep_alpha.json").read_text(encoding="utf-8"))
    data["values"] = [0.5, 1.5]
    config = write_json(tmp_path, data)
    with patch("app.main.logger") as mock_logger:
        assert main(["sweep", "--config", config, "--out", str(out)]) == EXIT_CONFIG
    mock_logger.exception.assert_not_called()
    assert not out.exists()


def test_sweep_svg_deterministic(tmp_path):
    """测试 SVG 重复生成逐字节一致"""
    outputs = []
    for name in ("a", "b"):
        target = tmp_path / name
        assert main(["sweep", "--config", str(example_path("sweep_alpha.json")), "--out", str(target), "--svg"]) == EXIT_OK
        outputs.append((target / "sweep.svg").read_bytes())
    assert outputs[0] == outputs[1]


# ============ mc ============

def test_mc_short_run(tmp_path, out):
    """测试 mc 输出与种子覆盖"""
    config = write_json(tmp_path, {
        "flows": [{"id": 0, "class": "direct", "lambda_r": 1.0}, {"id": 1, "class": "relayed", "lambda_r": 1.0}],
        "frame": {"tau_r": 1, "tau_a": 1},
        "policy": "rr",
        "slots": 20000,
        "ewma_epsilon": 0.01,
        "seeds": [1, 2],
        "trace_every": 1000,
    })
    assert main(["mc", "--config", config, "--out", str(out), "--seed", "9", "--svg"]) == EXIT_OK
    rows = read_csv(out / "mc.csv")
    assert {row["seed"] for row in rows} == {"9"}
    assert float(rows[0]["oracle_theta"]) == pytest.approx(0.75)
    assert float(rows[1]["oracle_theta"]) == pytest.approx(0.25)
    trace = read_csv(out / "mc_trace.csv")
    assert len(trace) == 40
    assert list(trace[0]) == ["slot", "flow_id", "theta_bar", "seed"]
    assert (out / "mc_trace.svg").exists()
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed_override"] == 9


# ============ sim / compare ============

def test_sim_outputs(tmp_path, out):
    """测试 sim 输出轨迹、汇总与平衡报告"""
    data = json.loads(example_path("sim_bdddu.json").read_text(encoding="utf-8"))
    data["tti_count"] = 60
    config = write_json(tmp_path, data)
    assert main(["sim", "--config", config, "--out", str(out)]) == EXIT_OK
    summary = {row["metric"]: row["value"] for row in read_csv(out / "summary.csv")}
    assert summary["plan"] == "BDDDUU"
    assert summary["half_duplex_violations"] == "0"
    assert summary["gating_violations"] == "0"
    assert summary["conservation_ok"] == "true"
    trace = read_csv(out / "trace.csv")
    assert len(trace) == 60 * 8 + 10 * 4
    assert any(row["ue"].startswith("bh:") for row in trace)
    assert len(read_csv(out / "balance.csv")) == 2


def test_sim_rerun_identical(tmp_path, out):
    """测试 sim 重复运行逐字节一致"""
    data = json.loads(example_path("sim_bdddu.json").read_text(encoding="utf-8"))
    data["tti_count"] = 60
    argv = ["sim", "--config", write_json(tmp_path, data), "--out", str(out)]
    assert main(argv) == EXIT_OK
    first = (out / "trace.csv").read_bytes()
    assert main(argv) == EXIT_OK
    assert (out / "trace.csv").read_bytes() == first


def test_compare_example(out):
    """测试计划比较：D 子帧的直连 MCS 提升"""
    assert main(["compare", "--config", str(example_path("compare_plans.json")), "--out", str(out)]) == EXIT_OK
    rows = {row["metric"]: row for row in read_csv(out / "comparison.csv")}
    assert set(next(iter(rows.values()))) == {"metric", "plan_a:BUUUUU", "plan_b:BDDDUU", "dominant"}
    assert rows["mean_direct_mcs_D"]["dominant"] == "n/a"
    assert float(rows["mean_direct_mcs_D"]["plan_b:BDDDUU"]) >= float(rows["mean_direct_mcs_U"]["plan_b:BDDDUU"])
    assert rows["relayed_throughput"]["dominant"] in ("tie", "a", "b")


def test_compare_period_mismatch(tmp_path, out):
    """测试两个计划周期不同"""
    data = json.loads(example_path("compare_plans.json").read_text(encoding="utf-8"))
    data["plan_b"] = "BDU"
    assert main(["compare", "--config", write_json(tmp_path, data), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


# ============ map ============

def test_map_zero_relays(tmp_path, out):
    """测试没有中继时两种场景的栅格相同"""
    config = write_json(tmp_path, {
        "ues": [{"xy": [100.0, 50.0]}],
        "resolution": 25.0,
        "bounds": [-200.0, -200.0, 200.0, 200.0],
    })
    assert main(["map", "--config", config, "--out", str(out), "--svg"]) == EXIT_OK
    active = (out / "sinr_relays_active.csv").read_text(encoding="utf-8").splitlines()
    silent = (out / "sinr_relays_silent.csv").read_text(encoding="utf-8").splitlines()
    assert active == silent
    assert active[0] == "-200,-200,25"
    assert len(active) == 1 + 16
    assert (out / "sinr_relays_active.svg").exists()


def test_map_bounds_not_covering(tmp_path, out):
    """测试栅格未覆盖节点时为配置错误"""
    config = write_json(tmp_path, {"ues": [{"xy": [900.0, 0.0]}], "bounds": [-100.0, -100.0, 100.0, 100.0]})
    assert main(["map", "--config", config, "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


# ============ schema ============

def test_schema_export(out):
    """测试导出 JSON Schema"""
    assert main(["schema", "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(f"{n}.schema.json" for n in ("solve", "sweep", "mc", "sim", "compare", "map"))


# ============ 可复现性 ============

def _small_config(tmp_path, command):
    if command == "mc":
        return write_json(tmp_path, {
            "flows": [{"id": 0, "class": "direct", "lambda_r": 1.0}, {"id": 1, "class": "relayed", "lambda_r": 1.0}],
            "frame": {"tau_r": 1, "tau_a": 1},
            "slots": 5000,
            "ewma_epsilon": 0.01,
            "seeds": [1, 2],
            "trace_every": 500,
        })
    if command == "compare":
        data = json.loads(example_path("compare_plans.json").read_text(encoding="utf-8"))
        data["scenario"]["tti_count"] = 120
        return write_json(tmp_path, data)
    if command == "sim":
        data = json.loads(example_path("sim_bdddu.json").read_text(encoding="utf-8"))
        data["tti_count"] = 60
        return write_json(tmp_path, data)
    names = {"solve": "solve_baseline.json", "sweep": "sweep_alpha.json", "map": "map_example.json"}
    return str(example_path(names[command]))


@pytest.mark.parametrize("command", ["solve", "sweep", "mc", "sim", "compare", "map"])
def test_every_subcommand_rerun_identical(tmp_path, out, command):
    """测试每个子命令重复运行的全部输出逐字节一致"""
    argv = [command, "--config", _small_config(tmp_path, command), "--out", str(out), "--svg", "--metrics"]
    assert main(argv) == EXIT_OK
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(argv) == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
    assert "manifest.json" in first

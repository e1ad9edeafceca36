import json

import pytest

from app.schemas import CONFIG_MODELS, GeometryFile, MapFile, ScenarioFile, SolveFile, SweepFile, export_json_schemas
from app.services.config_loader import ConfigLoader, canonical_json, config_hash, locate_key, write_manifest
from app.templates.defaults import example_path
from app.utils.errors import ConfigError


def write_config(tmp_path, text, name="config.json"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def geometry(relays, ues):
    return {"relays": relays, "ues": ues}


# ============ 加载与错误定位 ============

@pytest.mark.parametrize("name,model", [
    ("solve_baseline.json", SolveFile),
    ("solve_norelay.json", SolveFile),
    ("sweep_beta.json", SweepFile),
    ("sweep_gamma.json", SweepFile),
    ("sweep_alpha.json", SweepFile),
    ("mc_baseline.json", CONFIG_MODELS["mc"]),
    ("sim_bdddu.json", ScenarioFile),
    ("compare_plans.json", CONFIG_MODELS["compare"]),
    ("map_example.json", MapFile),
])
def test_examples_load(name, model):
    """测试随仓库发布的示例配置全部合法"""
    assert ConfigLoader(example_path(name)).load(model) is not None


def test_missing_file(tmp_path):
    """测试文件不存在"""
    with pytest.raises(ConfigError) as exc:
        ConfigLoader(tmp_path / "nope.json").load(SolveFile)
    assert exc.value.line is None


def test_json_syntax_error_line(tmp_path):
    """测试 JSON 语法错误报告行号"""
    path = write_config(tmp_path, '{\n  "flows": [\n    {"id": 0,, "class": "direct"}\n  ]\n}\n')
    with pytest.raises(ConfigError) as exc:
        ConfigLoader(path).load(SolveFile)
    assert exc.value.line == 3
    assert exc.value.path == str(path)


def test_unknown_key_line(tmp_path):
    """测试未知键报告所在行"""
    text = (
        '{\n'
        '  "flows": [\n'
        '    {"id": 0, "class": "direct", "lambda_r": 1.0}\n'
        '  ],\n'
        '  "bogus": 1\n'
        '}\n'
    )
    with pytest.raises(ConfigError) as exc:
        ConfigLoader(write_config(tmp_path, text)).load(SolveFile)
    assert exc.value.line == 5
    assert "bogus" in str(exc.value)


def test_invalid_value_line(tmp_path):
    """测试非法取值定位到对应键"""
    text = (
        '{\n'
        '  "flows": [\n'
        '    {"id": 0, "class": "direct",\n'
        '     "lambda_r": -1.0}\n'
        '  ]\n'
        '}\n'
    )
    with pytest.raises(ConfigError) as exc:
        ConfigLoader(write_config(tmp_path, text)).load(SolveFile)
    assert exc.value.line == 4


def test_root_must_be_object(tmp_path):
    with pytest.raises(ConfigError) as exc:
        ConfigLoader(write_config(tmp_path, "[1, 2]")).load(SolveFile)
    assert exc.value.line == 1


def test_locate_key():
    text = '{\n  "a": {\n    "b": 1\n  },\n  "b": 2\n}'
    assert locate_key(text, ("a", "b")) == 3
    assert locate_key(text, ("b",)) == 3
    assert locate_key(text, ("zzz",)) is None


# ============ 模型校验 ============

def test_duplicate_flow_ids(tmp_path):
    """测试流 id 重复"""
    flows = [{"id": 0, "class": "direct", "lambda_r": 1.0}, {"id": 0, "class": "direct", "lambda_r": 2.0}]
    with pytest.raises(ConfigError):
        ConfigLoader(write_config(tmp_path, json.dumps({"flows": flows}))).load(SolveFile)


def test_frame_requires_one_form(tmp_path):
    """测试 frame 同时给出 alpha 与 tau"""
    data = {
        "flows": [{"id": 0, "class": "direct", "lambda_r": 1.0}],
        "frame": {"tau_r": 1, "tau_a": 1, "alpha": 0.5},
    }
    with pytest.raises(ConfigError):
        ConfigLoader(write_config(tmp_path, json.dumps(data))).load(SolveFile)


def test_log_range_requires_positive(tmp_path):
    data = {
        "flows": [{"id": 0, "class": "direct", "lambda_r": 1.0}],
        "frame": {"alpha": 0.5},
        "parameter": "beta",
        "values": {"start": 0.0, "stop": 10.0, "num": 5, "scale": "log"},
    }
    with pytest.raises(ConfigError):
        ConfigLoader(write_config(tmp_path, json.dumps(data))).load(SweepFile)


def test_relay_cycle_rejected():
    """测试中继关联成环"""
    with pytest.raises(ValueError):
        GeometryFile.model_validate(geometry(
            [{"name": "a", "xy": [1, 0], "parent": "b"}, {"name": "b", "xy": [2, 0], "parent": "a"}],
            [{"xy": [0, 1]}],
        ))


def test_relay_multi_hop_rejected():
    """测试多跳中继"""
    with pytest.raises(ValueError):
        GeometryFile.model_validate(geometry(
            [{"name": "a", "xy": [1, 0]}, {"name": "b", "xy": [2, 0], "parent": "a"}],
            [{"xy": [0, 1]}],
        ))


def test_orphan_ue_rejected():
    """测试终端关联到不存在的节点"""
    with pytest.raises(ValueError):
        GeometryFile.model_validate(geometry([{"name": "a", "xy": [1, 0]}], [{"xy": [0, 1], "serving": "rn9"}]))


def test_reserved_relay_name_rejected():
    with pytest.raises(ValueError):
        GeometryFile.model_validate(geometry([{"name": "donor", "xy": [1, 0]}], [{"xy": [0, 1]}]))


def test_auto_association():
    """测试 auto 关联到最强平均接收功率的节点"""
    cfg = GeometryFile.model_validate(geometry(
        [{"name": "rn0", "xy": [300, 0]}],
        [{"xy": [380, 40]}, {"xy": [50, 0]}, {"xy": [380, 40], "serving": "donor"}],
    ))
    assert cfg.resolve_serving(cfg.to_geometry()) == [0, None, None]


def test_scenario_plan_validated(tmp_path):
    """测试子帧计划在加载时校验"""
    data = {"ues": [{"xy": [10, 0]}], "plan": "DBU", "tti_count": 6}
    with pytest.raises(ConfigError):
        ConfigLoader(write_config(tmp_path, json.dumps(data))).load(ScenarioFile)


# ============ 哈希与 manifest ============

def test_config_hash_ignores_key_order():
    """测试规范化 JSON 与键顺序无关"""
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_write_manifest_deterministic(tmp_path):
    """测试 manifest 不含时间戳，重复写出逐字节一致"""
    resolved = {"flows": [{"id": 0}], "frame": None}
    first = write_manifest(tmp_path, "solve", "cfg.json", resolved, seed_override=4)
    content = (tmp_path / "manifest.json").read_bytes()
    second = write_manifest(tmp_path, "solve", "cfg.json", resolved, seed_override=4)
    assert (tmp_path / "manifest.json").read_bytes() == content
    assert first == second
    data = json.loads(content)
    assert data["seed_override"] == 4
    assert data["subcommand"] == "solve"
    assert data["config_hash"] == config_hash({"subcommand": "solve", "config": resolved})


def test_export_json_schemas():
    """测试每个子命令都有 JSON Schema"""
    schemas = export_json_schemas()
    assert set(schemas) == {"solve", "sweep", "mc", "sim", "compare", "map"}
    assert "flows" in schemas["solve"]["properties"]

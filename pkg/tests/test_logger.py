import json
import logging

import pytest

from app.main import main
from app.templates.defaults import example_path
from app.utils.errors import EXIT_OK
from app.utils.logger import (
    JsonFormatter,
    RunContextFilter,
    bind_run_context,
    clear_run_context,
    run_context,
)


@pytest.fixture(autouse=True)
def clean_context():
    clear_run_context()
    yield
    clear_run_context()


def make_record(**extra):
    record = logging.makeLogRecord({"name": "relaylab.test", "levelname": "INFO", "levelno": logging.INFO,
                                    "msg": "✓ 完成", "args": ()})
    for key, value in extra.items():
        setattr(record, key, value)
    RunContextFilter().filter(record)
    return record


def test_json_includes_run_context():
    """测试 JSON 日志带上运行上下文"""
    bind_run_context(subcommand="sim", config_hash="ab" * 32)
    data = json.loads(JsonFormatter().format(make_record()))
    assert data["message"] == "✓ 完成"
    assert data["subcommand"] == "sim"
    assert data["config_hash"] == "ab" * 32


def test_json_includes_extra_fields():
    """测试 extra= 附加字段原样写出"""
    data = json.loads(JsonFormatter().format(make_record(plan="BDDDUU", drops=0)))
    assert data["plan"] == "BDDDUU"
    assert data["drops"] == 0
    assert "run_tag" not in data


def test_bind_ignores_none():
    bind_run_context(subcommand="mc", config_hash=None)
    assert run_context() == {"subcommand": "mc"}


def test_text_tag_uses_short_hash():
    """测试文本日志的运行标签：子命令 + 哈希前 8 位"""
    bind_run_context(subcommand="solve", config_hash="0123456789abcdef")
    record = make_record()
    assert record.run_tag == "[solve 01234567] "
    formatter = logging.Formatter("%(run_tag)s%(message)s")
    assert formatter.format(record) == "[solve 01234567] ✓ 完成"


def test_text_tag_empty_without_context():
    assert make_record().run_tag == ""


def test_cli_binds_manifest_hash(tmp_path):
    """测试命令行运行后上下文中的哈希与 manifest 一致"""
    out = tmp_path / "out"
    assert main(["solve", "--config", str(example_path("solve_norelay.json")), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    context = run_context()
    assert context["subcommand"] == "solve"
    assert context["config_hash"] == manifest["config_hash"]
    assert context["config_path"] == str(example_path("solve_norelay.json"))

import json
import shutil

import pytest

from beatsim.cli import main
from beatsim.scenario import ConfigError, list_fixtures, parse_config


@pytest.fixture(scope="module")
def honest_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "honest"
    assert main(["run", "fig5_honest", "--out", str(out)]) == 0
    return out


def test_fixtures_list(capsys):
    assert main(["fixtures", "list"]) == 0
    listed = capsys.readouterr().out.split()
    assert listed == list_fixtures()
    assert {"paper_fig6", "fig5_pathswap", "fig7_replication"} <= set(listed)


def test_run_writes_artifacts(honest_run):
    names = {p.name for p in honest_run.iterdir()}
    assert {"summary.json", "chain.jsonl", "events.log", "proofs", "reports", "verdicts",
            "flows.csv", "nodes.json"} <= names
    summary = json.loads((honest_run / "summary.json").read_text())
    assert summary["verdicts"][0]["outcome"] == "HonestAllocation"


def test_verify_passes_on_fresh_run(honest_run, capsys):
    assert main(["verify", str(honest_run)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def tamper(src, tmp_path, name, edit):
    dst = tmp_path / name
    shutil.copytree(src, dst)
    edit(dst)
    return dst


def test_verify_detects_chain_edit(honest_run, tmp_path, capsys):
    def edit(d):
        p = d / "chain.jsonl"
        lines = p.read_text().splitlines()
        block = json.loads(lines[2])
        block["sealed_at"] += 1
        lines[2] = json.dumps(block)
        p.write_text("\n".join(lines) + "\n")

    assert main(["verify", str(tamper(honest_run, tmp_path, "chain", edit))]) == 1
    assert "FAIL chain-integrity" in capsys.readouterr().out


def test_verify_detects_deleted_proof(honest_run, tmp_path, capsys):
    def edit(d):
        p = d / "proofs" / "2.jsonl"
        p.write_text("".join(p.read_text().splitlines(keepends=True)[1:]))

    assert main(["verify", str(tamper(honest_run, tmp_path, "proof", edit))]) == 1
    assert "FAIL proof-presence" in capsys.readouterr().out


def test_verify_detects_edited_verdict(honest_run, tmp_path, capsys):
    def edit(d):
        p = next((d / "verdicts").glob("*.json"))
        v = json.loads(p.read_text())
        v["outcome"] = "PathViolation"
        p.write_text(json.dumps(v))

    assert main(["verify", str(tamper(honest_run, tmp_path, "verdict", edit))]) == 1
    assert "FAIL verdict-soundness" in capsys.readouterr().out


def test_verify_rejects_garbage_directory(tmp_path, capsys):
    assert main(["verify", str(tmp_path)]) == 1


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "topology": "fig5.json",\n "tenants": [}')
    assert main(["run", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["run", "no_such_fixture"]) == 2


@pytest.mark.parametrize("raw, field", [
    ({"topology": "fig5.json"}, "seed"),
    ({"seed": 1, "topology": "fig5.json", "tenants": []}, "tenants"),
    ({"seed": 1, "topology": "fig5.json",
      "tenants": [{"tenant": "t", "src": "T", "dst": "Q"}]}, "tenants[0].dst"),
    ({"seed": 1, "topology": "fig5.json", "tenants": [{"tenant": "t", "src": "T", "dst": "K"}],
      "adversary": {"strategy": "Teleport"}}, "adversary.strategy"),
    ({"seed": "x", "topology": "fig5.json"}, "seed"),
])
def test_config_error_names_field(raw, field):
    with pytest.raises(ConfigError) as err:
        parse_config(raw)
    assert err.value.field == field


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("BEATSIM_OUTPUT_DIR", str(tmp_path))
    assert main(["run", "fig5_honest"]) == 0
    assert (tmp_path / "fig5_honest" / "summary.json").exists()


def test_seed_override_changes_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "fig5_honest", "--out", str(a)]) == 0
    assert main(["run", "fig5_honest", "--out", str(b), "--seed", "77"]) == 0
    assert (a / "chain.jsonl").read_bytes() != (b / "chain.jsonl").read_bytes()

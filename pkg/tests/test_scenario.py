import json

import pytest

from dtcb.scenario import ConfigError, ScenarioConfig, build_world, fault_sweep, parse_layers

from conftest import config_from


def dumped(raw):
    return json.dumps(raw, indent=2)


def line_with(text, needle, occurrence=1):
    hits = [i + 1 for i, line in enumerate(text.splitlines()) if needle in line]
    return hits[occurrence - 1]


def test_duplicate_chain_id_points_at_second_entry(s1_raw):
    s1_raw["chains"][1]["chain_id"] = "BC1"
    text = dumped(s1_raw)
    with pytest.raises(ConfigError, match="duplicate chain_id BC1") as err:
        ScenarioConfig.from_text(text)
    chains_line = line_with(text, '"chains"')
    dup = [i + 1 for i, l in enumerate(text.splitlines()) if '"chain_id": "BC1"' in l and i + 1 > chains_line][1]
    assert err.value.line == dup


def test_json_syntax_error_has_line(s1_raw):
    text = dumped(s1_raw).replace('"seed": 20240601,', '"seed": 20240601', 1)
    with pytest.raises(ConfigError) as err:
        ScenarioConfig.from_text(text)
    assert err.value.line == 3


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda r: r.pop("seed"), "missing seed"),
        (lambda r: r["nodes"][0].update(chain_id="BC9"), "unknown chain BC9"),
        (lambda r: r["nodes"][0].update(uds="zz"), "malformed hex"),
        (lambda r: r["nodes"][0].update(uds="11"), "expected 32 bytes"),
        (lambda r: r["nodes"][1].update(node_id="G1"), "duplicate node_id G1"),
        (lambda r: r["chains"][0].update(block_interval=0), "block_interval"),
        (lambda r: r["assets"][0].update(owner="U7"), "unknown owner"),
        (lambda r: r["policies"].pop(), "no policy for chain BC2"),
        (lambda r: r["links"].append({"from": "G1", "to": "G2", "drop_probability": 2}), "bad link"),
        (lambda r: r["nodes"][0]["layers"][1].update(svn=-1), "svn must be >= 0"),
        (lambda r: r["script"].append({"tick": 3}), "missing action"),
    ],
)
def test_validation_errors(s1_raw, mutate, message):
    mutate(s1_raw)
    with pytest.raises(ConfigError, match=message) as err:
        ScenarioConfig.from_text(dumped(s1_raw))
    assert err.value.line is not None


def test_node_errors_point_at_node(s1_raw):
    s1_raw["nodes"][1]["uds"] = "abc"
    text = dumped(s1_raw)
    with pytest.raises(ConfigError) as err:
        ScenarioConfig.from_text(text)
    assert err.value.line == line_with(text, '"G2"')


def test_single_layer_gateway_refused(s1_raw):
    s1_raw["nodes"][0]["layers"] = s1_raw["nodes"][0]["layers"][:1]
    with pytest.raises(ConfigError, match="at least two layers"):
        build_world(config_from(s1_raw))


def test_layers_accept_hex_digest_or_text():
    a = parse_layers([{"code_digest": "00" * 32}, {"code": "fw", "svn": 2}])
    assert a[0].code_digest == bytes(32) and a[1].svn == 2 and a[1].layer_index == 1
    with pytest.raises(ConfigError, match="needs code_digest or code"):
        parse_layers([{"svn": 1}])


def test_seed_override_and_report_digest(s1_raw):
    cfg = config_from(s1_raw)
    from dtcb.scenario import run_scenario

    a, _ = run_scenario(cfg)
    b, _ = run_scenario(cfg)
    c, _ = run_scenario(cfg, seed=5)
    assert a.digest() == b.digest() != c.digest()
    assert a.seed == s1_raw["seed"] and c.seed == 5


def test_credentialless_gateway_cannot_transfer(s1_raw):
    s1_raw["nodes"][0]["credential"] = False
    from dtcb.scenario import run_scenario

    report, world = run_scenario(config_from(s1_raw))
    assert world.register_log == []
    assert report.verdicts["no_loss"]["pass"]
    assert report.passed


def test_sweep_rows_are_deterministic(s1_raw):
    cfg = config_from(s1_raw)
    a = fault_sweep(cfg, 15, seed=3)
    b = fault_sweep(cfg, 15, seed=3)
    assert a == b
    assert {r["outcome"] for r in a} <= {"completed", "aborted", "hazard"}
    assert all(r["exclusivity"] for r in a)

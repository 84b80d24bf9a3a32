import pytest
import yaml

from gtaseg.errors import ConfigError
from gtaseg.harness.config import dump_config, load_config, parse_axes, parse_config
from gtaseg.trainer import EmaScope, Method, TrainConfig


def test_minimal_config():
    cfg = parse_config("method: suponly\n")
    assert cfg.method is Method.SUPONLY and cfg == TrainConfig(method="suponly")


def test_full_gta_config():
    cfg = parse_config("method: gta\nema_scope: all\nalpha: 0.999\ntau: 0\nhidden: [8, 8]\n"
                       "partition_boundary: 1\nfixed_gamma: null\n")
    assert cfg.ema_scope is EmaScope.ALL and cfg.alpha == 0.999 and cfg.tau == 0.0
    assert cfg.hidden == (8, 8) and cfg.partition_boundary == 1


@pytest.mark.parametrize("text, line, pattern", [
    ("alpha: 0.9\n", 1, "missing required key 'method'"),
    ("method: gta\nalpah: 0.9\n", 2, "unknown key 'alpah'"),
    ("method: gta\nalpha: 0.9\nalpha: 0.8\n", 3, "duplicate key"),
    ("method: gta\n\nepochs: ten\n", 3, "epochs must be an integer"),
    ("method: gta\nreweight_enabled: 1\n", 2, "true or false"),
    ("method: gta\nalpha: 1.5\n", 2, r"alpha must lie in \[0, 1\]"),
    ("method: gta\nema_scope: decoder\n", 2, "ema_scope='decoder' is not one of"),
    ("method: suponly\ntau: 2.0\n", 2, "does not use tau"),
    ("method: gta\nmu: 2.0\n", 2, "does not use mu"),
    ("method: gta\nepochs: [1\n", 3, "malformed"),
    ("- method\n", 1, "flat key: value mapping"),
    ("method: gta\nhidden: {a: 1}\n", 2, "flat"),
])
def test_config_errors_are_line_anchored(text, line, pattern):
    with pytest.raises(ConfigError, match=pattern) as info:
        parse_config(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}: ")


def test_empty_config():
    with pytest.raises(ConfigError, match="method"):
        parse_config("")


def test_overrides_and_roundtrip(tmp_path):
    cfg = parse_config("method: mean_teacher\nmu: 0.5\n", {"seed": 4})
    assert cfg.seed == 4 and cfg.mu == 0.5
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_dump_omits_inapplicable_fields():
    text = dump_config(TrainConfig(method="suponly"))
    assert not {"tau", "alpha", "mu", "quantile"} & set(yaml.safe_load(text))
    assert parse_config(text) == TrainConfig(method="suponly")


def test_every_field_is_accepted():
    for method in Method:
        cfg = TrainConfig(method=method)
        assert parse_config(dump_config(cfg)) == cfg


def test_parse_axes():
    assert parse_axes("component") == "component"
    assert parse_axes("alpha=0.99,0.999;ema_scope=all,extractor") == {
        "alpha": [0.99, 0.999], "ema_scope": ["all", "extractor"]}
    assert parse_axes("partition_boundary=1,2") == {"partition_boundary": [1, 2]}
    with pytest.raises(ConfigError, match="preset"):
        parse_axes("nonsense")
    with pytest.raises(ConfigError, match="not an ablation axis"):
        parse_axes("lr_init=0.1")
    with pytest.raises(ConfigError, match="number"):
        parse_axes("alpha=high")


@pytest.mark.parametrize("name", ["gta", "mean_teacher", "suponly"])
def test_preset_names_load_reference_defaults(name):
    cfg = load_config(name)
    assert cfg == TrainConfig(method=name)

import pytest

from quasiroute.config import FIXED, KNOBS, default_config, load_config, parse_config
from quasiroute.errors import ConfigError


def test_every_knob_documented():
    for key, (_, doc) in KNOBS.items():
        assert doc.strip(), key
    cfg = default_config()
    assert cfg.lr == 1e-4 and cfg.seed == 0 and cfg.preset == "desk"


def test_round_trip(tmp_path):
    cfg = default_config().with_overrides(seed=9, lr="0.001", lookahead="false")
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    back = load_config(path)
    assert back.values == cfg.values
    assert back.lookahead is False and back.lr == 1e-3


def test_comments_and_spacing():
    cfg = parse_config("# header\n seed=4   # inline\n\nproblems = TSP,CVRP\n")
    assert cfg.seed == 4 and cfg.problems == "TSP,CVRP"


@pytest.mark.parametrize("text", ["bogus = 1", "seed = abc", "seed", "lookahead = maybe"])
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("key", FIXED)
def test_fixed_knobs(key):
    default = KNOBS[key][0]
    assert parse_config(f"{key} = {default}")[key] == default
    with pytest.raises(ConfigError):
        parse_config(f"{key} = 0.5")


def test_int_list():
    cfg = parse_config("decay_epochs = 3, 7")
    assert cfg.int_list("decay_epochs") == (3, 7)
    assert default_config().int_list("decay_epochs") == ()
    with pytest.raises(ConfigError):
        parse_config("decay_epochs = a").int_list("decay_epochs")

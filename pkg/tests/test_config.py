import pytest

from darsd.config import PRESETS, ConfigError, RunConfig, load_config, parse_config


def test_defaults_are_valid():
    cfg = RunConfig()
    assert (cfg.d, cfg.m, cfg.lambda2, cfg.tau) == (32, 6, 0.5, 0.1)


def test_parse_with_comments_and_types():
    cfg = parse_config("""
        # a comment
        epochs = 3      # trailing comment
        tau = 0.2
        use_anti = false
        dilations = 1, 2, 4
        schedule = stepwise
    """)
    assert cfg.epochs == 3 and cfg.tau == 0.2 and cfg.use_anti is False
    assert cfg.dilations == (1, 2, 4) and cfg.schedule == "stepwise"


@pytest.mark.parametrize("text,msg", [
    ("bogus = 1", "unknown key"),
    ("tau", "expected 'key = value'"),
    ("epochs = many", "cannot parse"),
    ("tau = 0", "tau"),
    ("lambda2 = -1", "lambda2"),
    ("schedule = cosine", "schedule"),
    ("m = 32", "smaller than d"),
    ("eta0 = 0.9\neta_max = 0.5", "eta0"),
    ("use_sup = false", "use_sup"),
    ("use_lcib = false", "use_adv requires"),
    ("preset = huge", "unknown preset"),
    ("warmup_epochs = 50\nepochs = 10", "warmup_epochs"),
])
def test_invalid_configs(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_error_names_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("epochs = 2\nnope = 1\n")


def test_overrides_win_and_none_is_ignored():
    cfg = parse_config("seed = 4\nschedule = linear", seed=9, schedule=None)
    assert cfg.seed == 9 and cfg.schedule == "linear"


def test_full_preset():
    cfg = parse_config("preset = full\nepochs = 1")
    assert cfg.d == 128 and cfg.m == 24 and cfg.m == round(0.2 * cfg.d - 1.6)
    assert cfg.dilations == PRESETS["full"]["dilations"] and cfg.epochs == 1


def test_round_trip_through_text(tmp_path):
    cfg = RunConfig(seed=7, tau=0.3, use_anti=False, dilations=(1, 3))
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_replace_revalidates():
    with pytest.raises(ConfigError):
        RunConfig().replace(batch_size=1)

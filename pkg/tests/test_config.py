import pytest

from practinv.config import ConfigParseError, ExperimentConfig, load_config, parse_config


def test_empty_text_gives_defaults():
    assert parse_config("") == ExperimentConfig()
    assert parse_config("# only a comment\n\n") == ExperimentConfig()


def test_values_and_lists():
    cfg = parse_config(
        """
        lambda = 2.5      # reserved word in Python, stored as lam
        gamma = 0
        modes = erm, full
        encoder_hidden = 8, 4
        out_dir = /tmp/x
        """
    )
    assert cfg.lam == 2.5 and cfg.gamma == 0.0
    assert cfg.modes == ("erm", "full")
    assert cfg.encoder_hidden == (8, 4)
    assert cfg.out_dir == "/tmp/x"


def test_text_roundtrip():
    cfg = ExperimentConfig(lam=0.3, seeds=2, modes=("full",), offsets=(-2.0, 2.0))
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text,line,key",
    [
        ("epochs = 3\nlearning_rate = 0.1", 2, "learning_rate"),
        ("epochs = 3\nepochs = 4", 2, "epochs"),
        ("seeds = many", 1, "seeds"),
        ("just words", 1, None),
        ("\n\nmodes = erm, sgd", 3, "modes"),
        ("ridge = 0", 1, "ridge"),
        ("lambda = -1", 1, "lambda"),
    ],
)
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigParseError) as info:
        parse_config(text)
    assert info.value.line == line
    assert info.value.key == key


def test_holdout_resolution():
    assert ExperimentConfig().holdout_id == 3
    assert ExperimentConfig(holdout=1).holdout_id == 1
    with pytest.raises(ConfigParseError):
        ExperimentConfig(holdout=4)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "nope.txt")


def test_profile_carries_generator_fields():
    cfg = ExperimentConfig(signal=3.0, rho_holdout=-0.5)
    prof = cfg.profile()
    assert prof.signal == 3.0 and prof.rho_holdout == -0.5

import pytest

from waterflow.config import ConfigError, RunConfig


def test_defaults():
    cfg = RunConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4) == (1.0, 100.0, 0.1, 1.0)
    assert cfg.n_blocks == 3 and cfg.batch_size == 2
    assert cfg.rho == (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)


def test_unknown_key_rejected_with_line_number():
    with pytest.raises(ConfigError, match=r"<config>:2: unknown config key: 'lamda1'"):
        RunConfig.from_text("lr = 1e-3\nlamda1 = 2\n")


def test_typed_parsing_and_comments():
    cfg = RunConfig.from_text("# desk run\nlr = 1e-3  # faster\nsqueeze_per_block = yes\n"
                              "rho = 1,1,1,1,1\nhpe_inputs = depth, color\niters_enhance = 5e2\n")
    assert cfg.lr == 1e-3 and cfg.squeeze_per_block is True
    assert cfg.rho == (1.0,) * 5 and cfg.hpe_inputs == ("depth", "color")
    assert cfg.iters_enhance == 500


@pytest.mark.parametrize("text", ["lambda2 = -1", "precision = float16", "rho = 1,2",
                                  "n_blocks = 9", "hpe_inputs = depth,sonar", "freeze_detector = maybe",
                                  "batch_size = two", "just a line"])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_text_round_trip():
    cfg = RunConfig.from_text("lr = 0.00025\nrho = 0.5,0.25,1,1,1\nseed = 9\nfreeze_enhancer = true\n")
    assert RunConfig.from_text(cfg.to_text()) == cfg

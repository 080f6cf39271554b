import pytest

from forgesim.config import (FederationConfig, config_from_dict, config_to_dict, dump_config, load_config,
                             parse_config)
from forgesim.errors import ConfigurationError


def test_empty_file_gives_defaults():
    cfg = parse_config("")
    assert cfg == FederationConfig()
    assert (cfg.N, cfg.M, cfg.s, cfg.E, cfg.P, cfg.batch_size) == (10, 10, 3, 20, 5, 32)
    assert (cfg.alpha_cp, cfg.tau, cfg.alpha_ag) == (0.2, 0.07, 0.1)
    assert (cfg.lr_encoder, cfg.lr_decoder) == (1e-5, 1e-4)
    assert cfg.labeler_accuracy == 0.9230


def test_comments_whitespace_and_types():
    cfg = parse_config("""
        # heading
        method = fedprox   # inline
        E=3
        participation=0.5
        adaptive_aggregation = false
        samples_per_client = 10,20,30
        N=3
    """)
    assert cfg.method == "fedprox" and cfg.E == 3
    assert cfg.participation_probs() == [0.5, 0.5, 0.5]
    assert cfg.client_sample_counts() == [10, 20, 30]
    assert cfg.adaptive_aggregation is False


def test_fedprox_default_lambda():
    assert parse_config("method=fedprox").prox == 0.1
    assert parse_config("method=fedprox\nlambda_prox=0.5").prox == 0.5
    assert parse_config("method=fedavg").prox == 0.0


@pytest.mark.parametrize("text, line", [
    ("E=3\nbogus=1", 2),
    ("E=3\nE=4", 2),
    ("E=three", 1),
    ("just words", 1),
    ("M=10\ns=11", 2),
    ("method=fedavg\nlambda_prox=0.1", 2),
    ("participation=0.5,0.5", 1),
    ("\n\ntau=0", 3),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigurationError) as info:
        parse_config(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_s_violation_message():
    with pytest.raises(ConfigurationError, match="s=11"):
        parse_config("s=11")


def test_dump_round_trip(tmp_path):
    cfg = FederationConfig(method="fedprox", lambda_prox=0.2, participation=(0.5,), seed=9, eps_n=1e-4)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ConfigurationError):
        config_from_dict({"nope": 1})
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.txt")


def test_derived_views():
    cfg = FederationConfig(lr_scale=10.0)
    assert cfg.lr_enc == pytest.approx(1e-4) and cfg.lr_dec == pytest.approx(1e-3)
    assert cfg.uses_cp and cfg.uses_adaptive
    assert not cfg.replace(alpha_cp=0.0).uses_cp
    assert not cfg.replace(method="fedavg").uses_adaptive
    assert cfg.replace(alpha_cp_coupling="lr").effective_cp().alpha_cp == pytest.approx(0.2 * 1e-4)

import pytest

from fedhet.config import default_config, format_alpha, parse_config_text
from fedhet.errors import ConfigError
from fedhet.federated import FlMethod
from fedhet.partition import PartitionMode


def test_defaults_match_documented_protocol():
    config = default_config()
    assert config.num_clients == 25
    assert config.alphas == (0.1, 10.0, 1000.0)
    assert config.fl_rounds == 20
    assert config.fl_local_steps == 100
    assert config.fl_batch_size == 16
    assert config.fl_lr == 1e-4
    assert config.fl_lr_decay == 0.99
    assert config.embed_k == 16
    assert config.embed_patience == 5
    assert config.permutations == 100
    assert config.methods == (
        FlMethod.FEDAVG, FlMethod.FEDPROX, FlMethod.SCAFFOLD,
        FlMethod.FEDREP, FlMethod.FEDAMP,
    )
    assert config.modes == (PartitionMode.CLASS_BASED, PartitionMode.EMBEDDING_BASED)


def test_parse_overrides_and_comments():
    text = """
    # comment line
    seed = 7
    partition.alphas = 0.5, 2
    fl.methods = fedavg
    dataset.points = 128
    """
    config = parse_config_text(text)
    assert config.seed == 7
    assert config.alphas == (0.5, 2.0)
    assert config.methods == (FlMethod.FEDAVG,)
    assert config.synthetic.num_points == 128


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("partition.alpha = 0.1\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("fl.rounds = twenty\n")
    with pytest.raises(ConfigError):
        parse_config_text("fl.methods = fedsgd\n")
    with pytest.raises(ConfigError):
        parse_config_text("partition.modes = quantile\n")
    with pytest.raises(ConfigError):
        parse_config_text("dataset.task = ranking\n")
    with pytest.raises(ConfigError):
        parse_config_text("just a line without equals\n")
    with pytest.raises(ConfigError):
        parse_config_text("partition.alphas = \n")


def test_cells_enumeration():
    config = parse_config_text(
        "fl.methods = fedavg,fedprox\npartition.modes = class\n"
        "partition.alphas = 0.1,10\nembed.seeds = 0,1,2\n"
    )
    cells = config.cells()
    assert len(cells) == 2 * 1 * 2 * 3
    assert cells[0] == ("fedavg", "class", 0.1, 0)


def test_digest_stable_under_reordering():
    a = parse_config_text("seed = 3\nfl.rounds = 5\n")
    b = parse_config_text("fl.rounds = 5\nseed = 3\n")
    assert a.digest() == b.digest()
    c = parse_config_text("fl.rounds = 6\nseed = 3\n")
    assert a.digest() != c.digest()


def test_format_alpha():
    assert format_alpha(0.1) == "0.1"
    assert format_alpha(10.0) == "10"
    assert format_alpha(1000.0) == "1000"
    assert format_alpha(1e6) == "1000000"

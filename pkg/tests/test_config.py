"""Fail-closed config parsing: typos are errors, with line numbers."""

import pytest

from maskcluster.config import ConfigBundle, ConfigError, load_config, parse_config_text


GOOD = """\
# a comment
[encoder]
image_size = 16
patch_size = 4
depth = 6
embed_dim = 32
heads = 4

[trainer]
steps = 10
global_size = 16   # must match encoder.image_size
mask_ratio = 0.6

[cluster]
n_clusters = 16

[data]
n = 64
"""


def test_parse_good_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(GOOD)
    bundle = load_config(str(path))
    assert isinstance(bundle, ConfigBundle)
    assert bundle.encoder.depth == 6
    assert bundle.trainer.mask_ratio == 0.6
    assert bundle.cluster.n_clusters == 16
    assert bundle.data.n == 64
    # layer set defaulted from the configured depth
    assert bundle.recon.layer_set == (3, 4, 5, 6)


def test_defaults_without_file():
    bundle = load_config(None)
    assert bundle.encoder.image_size == 32
    assert bundle.recon.layer_set == (2, 3, 4)
    assert bundle.trainer.global_size == 32


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[encoder]\ndepth = 4\n[optimizer]\n")
    assert exc.value.line == 3 and "optimizer" in str(exc.value)


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[trainer]\nsteps = 5\nlearning_rate = 0.1\n")
    assert exc.value.line == 3 and "learning_rate" in str(exc.value)


def test_bad_value_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[trainer]\nsteps = soon\n")
    assert exc.value.line == 2


def test_key_outside_section_and_garbage_lines():
    with pytest.raises(ConfigError):
        parse_config_text("steps = 5\n")
    with pytest.raises(ConfigError):
        parse_config_text("[trainer]\nnot a key value pair\n")


def test_layer_set_parsing_and_validation(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[encoder]\ndepth = 4\n[recon]\nlayer_set = 2,9\n")
    with pytest.raises(ConfigError):
        load_config(str(path))
    path.write_text("[encoder]\ndepth = 4\n[recon]\nlayer_set = 2,4\n")
    assert load_config(str(path)).recon.layer_set == (2, 4)


def test_size_mismatch_is_config_error(tmp_path):
    path = tmp_path / "mismatch.cfg"
    path.write_text("[encoder]\nimage_size = 16\n[trainer]\nglobal_size = 32\n")
    with pytest.raises(ConfigError, match="global_size"):
        load_config(str(path))


def test_invalid_dataclass_values_become_config_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[cluster]\ntau_student = 0.01\ntau_teacher = 0.5\n")
    with pytest.raises(ConfigError):
        load_config(str(path))

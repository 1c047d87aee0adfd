"""Configuration parsing: TOML files, presets, dotted overrides."""

import pytest

from dcpension import ConfigError, PRESETS, ValidationError
from dcpension.config import normalize_family, parse_config
from dcpension.model import EXP_RATIO, POWER_RATIO

SHOWCASE_TOML = """
[market]
r = 0.03
mu = [0.08]
sigma = [[0.2]]

[salary]
muY = 0.02
sigmaY1 = [0.08]
sigmaY2 = [0.05]

[plan]
p = 0.1
w0 = 1.0
y0 = 1.0
horizon = 10.0

[preference]
family = "power-ratio"
gamma = 0.6
theta1 = [0.0]
theta2 = [0.2]
beta = [0.25]

[simulation]
steps_per_year = 12
paths = 4
seed = 7
checkpoints = [5.0, 10.0]
"""


@pytest.fixture
def config_file(tmp_path):
    file = tmp_path / "run.toml"
    file.write_text(SHOWCASE_TOML)
    return file


def test_parse_file(config_file):
    st = parse_config(file=config_file)
    assert st.horizon == 10.0
    assert st.paths == 4
    assert st.seed == 7
    assert st.steps_per_year == 12
    assert st.checkpoints == (5.0, 10.0)
    assert st.pref.family == POWER_RATIO
    assert st.pref.gamma == 0.6
    assert st.params.n_assets == 1
    assert st.params.n_extra == 1
    assert st.params.salary_growth.value_at(0.0) == 0.02
    assert st.revision is None


def test_every_preset_parses():
    for name in PRESETS:
        st = parse_config(preset=name)
        assert st.paths >= 1
        assert st.horizon > 0
        assert max(st.checkpoints) <= st.horizon


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        parse_config(preset="does-not-exist")


def test_file_and_preset_are_exclusive(config_file):
    with pytest.raises(ConfigError):
        parse_config(file=config_file, preset="power-showcase")
    with pytest.raises(ConfigError):
        parse_config()


def test_overrides_replace_values(config_file):
    st = parse_config(file=config_file, overrides=("salary.muY=0.07",
                                                   "simulation.paths=9"))
    assert st.params.salary_growth.value_at(0.0) == 0.07
    assert st.paths == 9


def test_override_adds_revision(config_file):
    st = parse_config(file=config_file, overrides=(
        "salary.revision.at=4.0", "salary.revision.muY=0.07"))
    assert st.revision == (4.0, 0.07)
    # the revision is baked into the growth schedule
    assert st.params.salary_growth.value_at(3.9) == 0.02
    assert st.params.salary_growth.value_at(4.0) == 0.07


def test_string_override_without_quotes(config_file):
    st = parse_config(file=config_file, overrides=("preference.family=exp-ratio",))
    assert st.pref.family == EXP_RATIO


def test_unknown_section_rejected(config_file):
    with pytest.raises(ValidationError, match="unknown"):
        parse_config(file=config_file, overrides=("marché.r=0.02",))


def test_unknown_key_rejected(config_file):
    with pytest.raises(ValidationError, match="market"):
        parse_config(file=config_file, overrides=("market.sharpe=0.4",))


def test_missing_required_key_names_it(tmp_path):
    file = tmp_path / "broken.toml"
    file.write_text(SHOWCASE_TOML.replace("sigma = [[0.2]]", ""))
    with pytest.raises(ValidationError, match="market.sigma"):
        parse_config(file=file)


def test_bad_value_names_the_key(config_file):
    with pytest.raises(ValidationError, match="plan.horizon"):
        parse_config(file=config_file, overrides=('plan.horizon="soon"',))


def test_non_integral_paths_rejected(config_file):
    with pytest.raises(ValidationError, match="simulation.paths"):
        parse_config(file=config_file, overrides=("simulation.paths=2.5",))


def test_malformed_toml_is_a_config_error(tmp_path):
    file = tmp_path / "broken.toml"
    file.write_text("[market\nr = 0.03")
    with pytest.raises(ConfigError):
        parse_config(file=file)


def test_family_aliases():
    assert normalize_family("power") == POWER_RATIO
    assert normalize_family("exp") == EXP_RATIO
    assert normalize_family("power-ratio") == POWER_RATIO
    with pytest.raises(ValidationError):
        normalize_family("log")


def test_wealth_family_rejects_ratio_keys(config_file):
    with pytest.raises(ValidationError):
        parse_config(file=config_file, overrides=(
            "preference.family=power-wealth",))  # beta given, pihat missing


def test_revision_conflicts_with_piecewise_growth(tmp_path):
    toml = SHOWCASE_TOML.replace(
        "muY = 0.02",
        "muY = { breakpoints = [0.0, 5.0], values = [0.02, 0.04] }",
    )
    file = tmp_path / "run.toml"
    file.write_text(toml)
    with pytest.raises(ValidationError, match="revision"):
        parse_config(file=file, overrides=(
            "salary.revision.at=4.0", "salary.revision.muY=0.07"))


def test_schedule_table_form(tmp_path):
    toml = SHOWCASE_TOML.replace(
        "mu = [0.08]",
        "mu = { breakpoints = [0.0, 5.0], values = [[0.08], [0.04]] }",
    )
    file = tmp_path / "run.toml"
    file.write_text(toml)
    st = parse_config(file=file)
    assert st.params.excess_return.value_at(0.0) == (0.08,)
    assert st.params.excess_return.value_at(6.0) == (0.04,)


def test_default_checkpoints_are_yearly(tmp_path):
    toml = SHOWCASE_TOML.replace("checkpoints = [5.0, 10.0]\n", "")
    file = tmp_path / "run.toml"
    file.write_text(toml)
    st = parse_config(file=file)
    assert st.checkpoints == tuple(float(t) for t in range(1, 11))


def test_settings_source_snapshot_roundtrips(config_file):
    st = parse_config(file=config_file)
    assert st.source["market"]["mu"] == [0.08]
    assert st.source["simulation"]["seed"] == 7

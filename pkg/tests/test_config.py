import pytest

from relform.config import OUTPUT_ROOT_ENV, ConfigError, parse_config


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParse:
    def test_defaults_without_file(self):
        cfg = parse_config()
        assert cfg.seed == 0 and cfg.level == 0
        assert cfg.trainer().gamma == 0.99
        sc = cfg.scenario()
        assert sc.profile == "MPE" and sc.n_agents == 3 and sc.episode_cap == 400

    def test_minimal_file(self, tmp_path):
        cfg = parse_config(write(tmp_path, "seed = 7\n"))
        assert cfg.seed == 7
        assert cfg.trainer().seed == 7 and cfg.trainer().rollout_length == 200
        assert cfg.section("reward") == {"alpha": 5.0, "beta": 10.0, "collision_buffer": 0.05}

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="foo"):
            parse_config(write(tmp_path, "foo = 1\n"))

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(ConfigError, match="trainer.foo"):
            parse_config(write(tmp_path, "[trainer]\nfoo = 1\n"))

    def test_unknown_table(self, tmp_path):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(write(tmp_path, "[bogus]\nx = 1\n"))

    def test_parse_error_has_line(self, tmp_path):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config(write(tmp_path, "seed = 1\n\nlevel = = 2\n"))

    def test_type_error_names_field(self, tmp_path):
        with pytest.raises(ConfigError, match="trainer.epochs"):
            parse_config(write(tmp_path, '[trainer]\nepochs = "ten"\n'))

    def test_validation_names_field(self, tmp_path):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config(write(tmp_path, "[trainer]\ngamma = 1.5\n"))
        with pytest.raises(ConfigError, match="level"):
            parse_config(write(tmp_path, "level = 9\n"))
        with pytest.raises(ConfigError, match="profile"):
            parse_config(write(tmp_path, '[scenario]\nprofile = "ABC"\n'))

    def test_int_accepted_for_float(self, tmp_path):
        cfg = parse_config(write(tmp_path, "[reward]\nalpha = 3\n"))
        assert cfg.scenario().reward.alpha == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.toml")


class TestPrecedence:
    def test_flag_beats_file(self, tmp_path):
        p = write(tmp_path, "seed = 3\nlevel = 1\n[trainer]\ntotal_steps = 1000\n")
        cfg = parse_config(p, {"seed": 11, "level": None}, ["trainer.total_steps=2000"])
        assert cfg.seed == 11 and cfg.level == 1
        assert cfg.trainer().total_steps == 2000

    def test_explicit_override_beats_set(self):
        cfg = parse_config(None, {"seed": 5}, ["seed=4"])
        assert cfg.seed == 5

    def test_set_unknown_key(self):
        with pytest.raises(ConfigError, match="scenario.nope"):
            parse_config(None, sets=["scenario.nope=1"])

    def test_set_bare_string(self):
        assert parse_config(None, sets=["scenario.profile=MVE"]).scenario().profile == "MVE"


class TestScenarioBuild:
    def test_profile_defaults(self, tmp_path):
        sc = parse_config(write(tmp_path, '[scenario]\nprofile = "MVE"\nn_agents = 4\nn_max = 5\n')).scenario()
        assert sc.vehicle.wheelbase == 0.2 and sc.lidar.max_range == 3.0 and sc.obstacle_radius == (0.14, 0.14)
        assert sc.n_max == 5

    def test_vehicle_and_topology_overrides(self, tmp_path):
        text = "[vehicle]\nmax_speed = 0.5\n[scenario]\nn_agents = 3\n[scenario.topologies]\n3 = [[0, 0], [4, 0], [0, 3]]\n"
        sc = parse_config(write(tmp_path, text)).scenario()
        assert sc.vehicle.max_speed == 0.5
        assert sc.topologies[3].tolist() == [[0, 0], [4, 0], [0, 3]]

    def test_bad_topology_rejected(self, tmp_path):
        text = "[scenario]\nn_agents = 3\n[scenario.topologies]\n3 = [[0, 0], [1, 0]]\n"
        with pytest.raises(ConfigError, match="scenario"):
            parse_config(write(tmp_path, text))


def test_output_root_env(monkeypatch, tmp_path):
    cfg = parse_config(None, {"output_dir": "abc"})
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(cfg.output_path) == "abc"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.output_path == tmp_path / "abc"

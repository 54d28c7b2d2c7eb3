import hashlib

import pytest

from ringflow import __version__
from ringflow.config import (ConfigError, RunManifest, apply_overrides,
                             config_hash, load_config, parse_config_text,
                             serialize_config, version_hash, write_manifest)


class TestDefaults:
    def test_empty_text_gives_defaults(self):
        cfg = parse_config_text("")
        assert cfg.ring_env.n_av == 1
        assert cfg.ring_env.vehicles_per_av == 22
        assert cfg.ring_env.length_range is None
        assert cfg.ring_env.dt == 0.2
        assert cfg.ring_env.horizon_steps == 3000
        assert cfg.ring_env.action_bounds == (-3.0, 1.3)
        assert cfg.ring_env.idm.v0 == 30.0
        assert cfg.ring_env.idm.noise_std == 0.3
        assert not cfg.ring_env.lane_change.enabled
        assert cfg.train.gamma == 0.99
        assert cfg.train.kl_step == 0.01
        assert cfg.curriculum_enabled
        assert cfg.n_pretrain == 200 and cfg.n_train == 500
        assert cfg.highway.lanes == 2
        assert cfg.highway.dt == 0.4
        assert cfg.highway.penetration == 0.05
        assert cfg.run_id == "experiment"
        assert cfg.seed == 0 and cfg.n_seeds == 1

    def test_idm_shared_between_ring_and_highway(self):
        cfg = parse_config_text("[ring]\nv0 = 25.0\nT = 1.5\n")
        assert cfg.ring_env.idm.v0 == 25.0
        assert cfg.highway.idm.v0 == 25.0
        assert cfg.highway.idm.T == 1.5

    def test_observation_protocol_shared(self):
        cfg = parse_config_text("[ring]\nobs_frames = 4\naction_hi = 2.0\n")
        assert cfg.highway.obs_frames == 4
        assert cfg.highway.action_bounds == (-3.0, 2.0)


class TestRoundTrip:
    def test_serialize_parse_identity(self):
        cfg = parse_config_text("")
        text = serialize_config(cfg)
        cfg2 = parse_config_text(text)
        assert cfg2 == cfg
        assert serialize_config(cfg2) == text

    def test_non_default_values_survive(self):
        src = (
            "[ring]\n"
            "n_av = 4\n"
            "length_min = 1000.0\n"
            "length_max = 1440.0\n"
            "noise_std = 0.0\n"
            "[lane_change]\n"
            "enabled = true\n"
            "e_in = 0.125\n"
            "e_out = 0.125\n"
            "[train]\n"
            "batch_env_steps = 123\n"
            "[curriculum]\n"
            "enabled = false\n"
            "[highway]\n"
            "bottleneck_speed = 3.5\n"
            "[run]\n"
            "id = sweep-a\n"
            "seed = 17\n"
            "n_seeds = 5\n"
        )
        cfg = parse_config_text(src)
        assert cfg.ring_env.n_av == 4
        assert cfg.ring_env.length_range == (1000.0, 1440.0)
        assert cfg.ring_env.lane_change.enabled
        assert cfg.ring_env.lane_change.e_in == 0.125
        assert cfg.train.batch_env_steps == 123
        assert not cfg.curriculum_enabled
        assert cfg.highway.bottleneck_speed == 3.5
        assert cfg.run_id == "sweep-a"
        assert cfg.seed == 17 and cfg.n_seeds == 5
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config_text(
            "# comment\n\n[ring]\n; alt comment\nn_av = 2\n\n")
        assert cfg.ring_env.n_av == 2

    def test_hash_stable_and_sensitive(self):
        a = parse_config_text("")
        b = parse_config_text("[ring]\nn_av = 1\n")   # default restated
        c = parse_config_text("[ring]\nn_av = 2\n")
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 64


class TestDiagnostics:
    def test_unknown_section_line_number(self):
        with pytest.raises(ConfigError, match=r"f\.cfg:3: unknown section"):
            parse_config_text("\n\n[nope]\n", source="f.cfg")

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigError,
                           match=r"f\.cfg:2: unknown key 'bogus' in "
                                 r"section \[ring\]"):
            parse_config_text("[ring]\nbogus = 1\n", source="f.cfg")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match=r":3: duplicate key 'dt'"):
            parse_config_text("[ring]\ndt = 0.2\ndt = 0.4\n")

    def test_duplicate_section(self):
        with pytest.raises(ConfigError, match=r":2: duplicate section"):
            parse_config_text("[ring]\n[ring]\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match=r":1: key outside"):
            parse_config_text("dt = 0.2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=r":2: expected 'key = value'"):
            parse_config_text("[ring]\njust words\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match=r":2: expected int"):
            parse_config_text("[ring]\nn_av = 2.5\n")

    def test_bad_float(self):
        with pytest.raises(ConfigError, match=r":2: expected float"):
            parse_config_text("[ring]\ndt = fast\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match=r"expected true or false"):
            parse_config_text("[lane_change]\nenabled = 1\n")

    def test_half_auto_length_rejected(self):
        with pytest.raises(ConfigError, match="both"):
            parse_config_text("[ring]\nlength_min = 100.0\n")

    def test_dataclass_validation_becomes_config_error(self):
        with pytest.raises(ConfigError, match="invalid configuration"):
            parse_config_text("[ring]\ndt = -0.2\n")

    def test_config_error_is_value_error(self):
        assert issubclass(ConfigError, ValueError)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "absent.cfg")


class TestOverrides:
    def test_override_applies(self):
        cfg = parse_config_text("", overrides=["ring.n_av=3",
                                               "run.id=demo"])
        assert cfg.ring_env.n_av == 3
        assert cfg.run_id == "demo"

    def test_override_beats_file_value(self):
        cfg = parse_config_text("[ring]\nn_av = 2\n",
                                overrides=["ring.n_av=5"])
        assert cfg.ring_env.n_av == 5

    def test_override_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'bogus'"):
            parse_config_text("", overrides=["ring.bogus=1"])

    def test_override_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text("", overrides=["nope.k=1"])

    def test_override_missing_equals(self):
        with pytest.raises(ConfigError, match="expected section.key=value"):
            parse_config_text("", overrides=["ring.n_av"])

    def test_override_type_checked(self):
        with pytest.raises(ConfigError, match="expected int"):
            parse_config_text("", overrides=["ring.n_av=x"])

    def test_apply_overrides_raw(self):
        raw = {}
        apply_overrides(raw, ["train.gamma=0.9"])
        assert raw["train"]["gamma"][0] == "0.9"


class TestManifest:
    def test_json_fields(self, tmp_path):
        m = RunManifest(experiment_id="e1", config_hash="ab" * 32,
                        version=__version__, version_hash=version_hash(),
                        seeds=(0, 1, 2), outputs=("a.csv", "b.csv"))
        path = tmp_path / "manifest.json"
        write_manifest(path, m)
        import json
        data = json.loads(path.read_text())
        assert data["experiment_id"] == "e1"
        assert data["seeds"] == [0, 1, 2]
        assert data["outputs"] == ["a.csv", "b.csv"]
        assert data["version"] == __version__

    def test_version_hash_is_git_blob_style(self):
        body = f"ringflow-{__version__}".encode()
        expect = hashlib.sha1(
            b"blob %d\0" % len(body) + body).hexdigest()
        assert version_hash() == expect

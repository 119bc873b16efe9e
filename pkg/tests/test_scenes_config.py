import numpy as np
import pytest
import yaml

from splitflow.config import METHODS, config_from_dict, load_config, reference_config
from splitflow.errors import ConfigError
from splitflow.scenes import Attribute, Scene


def scene3():
    return Scene((2, 2, 3), [Attribute(n, [(0, k)], np.eye(3, 2) * (k + 1), ["red", "green", "blue"])
                             for k, n in enumerate(["hat", "scarf", "glasses"])], spread=0.1)


class TestScene:
    def test_embedding_layout(self):
        s = scene3()
        assert s.cond_dim == 9 and s.block_layout() == [(0, 3), (3, 6), (6, 9)]
        assert s.embed((2, 0, 1)).tolist() == [0, 0, 1, 1, 0, 0, 0, 1, 0]

    def test_mean_and_mask(self):
        s = scene3()
        m = s.mean((1, 0, 2))
        assert m[:, 0, 0].tolist() == [0.0, 1.0] and m[:, 0, 1].tolist() == [2.0, 0.0]
        assert not m[:, 1].any()
        assert s.edit_mask((0, 0, 0), (1, 0, 2)).tolist() == [[1, 0, 1], [0, 0, 0]]

    def test_sampling_is_seeded_and_shaped(self):
        s = scene3()
        xs, vals, embs = s.sample(6, np.random.default_rng(1))
        xs2, vals2, _ = s.sample(6, np.random.default_rng(1))
        assert xs.shape == (6, 2, 2, 3) and embs.shape == (6, 9) and np.array_equal(xs, xs2)
        assert np.array_equal(vals, vals2)
        fixed, fv, _ = s.sample(3, np.random.default_rng(2), (1, 1, 1))
        assert (fv == 1).all()

    @pytest.mark.parametrize("kw", [
        {"attributes": [Attribute("a", [(5, 0)], [[0, 0]])]},
        {"attributes": [Attribute("a", [(0, 0)], [[0, 0]]), Attribute("b", [(0, 0)], [[1, 1]])]},
        {"attributes": [Attribute("a", [(0, 0)], [[0, 0, 0]])]},
        {"spread": -1.0},
    ])
    def test_validation(self, kw):
        args = {"shape": (2, 2, 2), "attributes": [], **kw}
        with pytest.raises(ConfigError):
            Scene(**args)

    def test_attribute_validation(self):
        with pytest.raises(ConfigError):
            Attribute("a", [], [[0.0]])
        with pytest.raises(ConfigError):
            Attribute("a", [(0, 0)], [[0.0], [1.0]], ["x", "x"])
        with pytest.raises(ConfigError):
            Attribute("two words", [(0, 0)], [[0.0]])
        with pytest.raises(ConfigError):
            scene3().embed((0, 3, 0))

    def test_describe_and_parse(self):
        s = scene3()
        text = s.describe((1, 2, 0))
        assert text == "a figure with green hat, blue scarf and red glasses"
        assert s.parse_prompt(text, (0, 0, 0)) == (1, 2, 0)
        assert s.parse_prompt("A figure with BLUE scarf", (1, 1, 1)) == (1, 2, 1)
        assert s.parse_prompt("nothing relevant", (2, 1, 0)) == (2, 1, 0)
        with pytest.raises(ConfigError):
            s.parse_prompt("red hat or blue hat", (0, 0, 0))

    def test_data_range(self):
        s = Scene((1, 1, 2), [Attribute("a", [(0, 0)], [[-1.0], [3.0]])], spread=0.5)
        assert s.data_range() == pytest.approx(4.0 + 3.0)


class TestConfig:
    def test_reference_config_loads(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(reference_config())
        cfg = load_config(p)
        assert cfg.scene.shape == (2, 2, 3) and cfg.scene.cond_dim == 9
        assert cfg.bench.methods == ("baseline", "avg", "ltp", "ltp+vfa")
        assert cfg.seeds == tuple(range(50)) and cfg.sweep_points == (28,)
        assert cfg.output_dir == tmp_path / "runs"
        assert cfg.train.lr_schedule == "cosine" and cfg.edit.cfg_tgt == 13.5
        assert cfg.model_path == tmp_path / "runs" / "models" / "field.sff"

    def _raw(self):
        return yaml.safe_load(reference_config())

    def test_scene_file_reference(self, tmp_path):
        raw = self._raw()
        (tmp_path / "scene.yaml").write_text(yaml.safe_dump(raw["scene"]))
        raw["scene"] = "scene.yaml"
        cfg = config_from_dict(raw, tmp_path)
        assert cfg.scene.cond_dim == 9

    def test_missing_scene_file_names_path(self, tmp_path):
        raw = self._raw()
        raw["scene"] = "nowhere/scene.yaml"
        with pytest.raises(ConfigError, match="nowhere/scene.yaml"):
            config_from_dict(raw, tmp_path)

    @pytest.mark.parametrize("mutate", [
        lambda r: r["schedule"].update(eta_dec=40),
        lambda r: r["bench"].update(methods=[]),
        lambda r: r["bench"].update(methods=["baseline", "magic"]),
        lambda r: r["bench"].update(eta_dec_sweep=[30, 33]),
        lambda r: r["edit"].update(target=[0, 5, 0]),
        lambda r: r["edit"].update(cfg_src=-1),
        lambda r: r["train"].update(cond_dropout=2),
        lambda r: r["model"].update(activation="gelu"),
        lambda r: r["model"].update(bogus=1),
        lambda r: r.update(extra_section={}),
        lambda r: r.update(seeds=[]),
        lambda r: r["scene"].pop("shape"),
        lambda r: r.update(llm={"base_url": "not a url"}),
    ])
    def test_rejects(self, mutate):
        raw = self._raw()
        mutate(raw)
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_seed_forms(self):
        raw = self._raw()
        for form, expected in [(3, (0, 1, 2)), ([5, 9], (5, 9)), ({"start": 10, "count": 2}, (10, 11))]:
            raw["seeds"] = form
            assert config_from_dict(raw).seeds == expected

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("scene: [unclosed")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")

    def test_llm_section(self):
        raw = self._raw()
        raw["llm"] = {"base_url": "http://127.0.0.1:9/v1", "model": "qwen2"}
        assert config_from_dict(raw).llm.model == "qwen2"

    def test_methods_constant(self):
        assert METHODS == ("baseline", "avg", "ltp", "vfa", "ltp+vfa")

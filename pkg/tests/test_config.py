import json

import jsonschema
import pytest

from incdet.config import (OUT_DIR_ENV, ConfigValidationError, RunConfig, resolve_out_dir, run_config_schema,
                           validate)
from incdet.trainer import StageConfig


class TestSchema:
    def test_is_valid_draft7(self):
        jsonschema.Draft7Validator.check_schema(run_config_schema())

    def test_training_section_covers_stage_config(self):
        props = run_config_schema()["properties"]["training"]["properties"]
        assert {"epochs", "lr_backbone", "w_kd", "warmup_steps", "channels"} <= set(props)
        assert props["epochs"]["default"] == StageConfig().epochs

    def test_minimal(self):
        validate({"name": "x"})

    @pytest.mark.parametrize("doc,where", [
        ({}, "<root>"),
        ({"name": "x", "bogus": 1}, "<root>"),
        ({"name": "x", "training": {"epochs": "ten"}}, "training/epochs"),
        ({"name": "x", "iks": {"record": "middle"}}, "iks/record"),
        ({"name": "x", "toggles": {"cpr": 1}}, "toggles/cpr"),
        ({"name": "x", "split": "4x4"}, "split"),
        ({"name": "bad name"}, "name"),
    ])
    def test_rejects(self, doc, where):
        with pytest.raises(ConfigValidationError, match=f"^{where}:"):
            validate(doc)


class TestRunConfig:
    def test_stage_config_mapping(self):
        rc = RunConfig.from_dict({"name": "x", "seed": 4, "toggles": {"cpr": True, "cakd": True},
                                  "training": {"epochs": 3}, "iks": {"rho": 0.5}, "kd": {"alpha": 2.0}})
        cfg = rc.stage_config()
        assert (cfg.seed, cfg.epochs, cfg.use_cpr, cfg.use_cakd, cfg.use_iks) == (4, 3, True, True, False)
        assert cfg.iks_cfg.rho == 0.5 and cfg.kd_cfg.alpha == 2.0
        assert rc.stage_config(seed=9).seed == 9

    def test_semantic_error_becomes_config_error(self):
        rc = RunConfig.from_dict({"name": "x", "cpr": {"floor_thresh": 1.5}})
        with pytest.raises(ConfigValidationError):
            rc.stage_config()

    def test_load_round_trip(self, tmp_path):
        doc = {"name": "x", "split": "2-2", "toggles": {"iks": True}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        rc = RunConfig.load(p)
        assert RunConfig.from_dict(rc.to_dict()) == rc

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigValidationError, match="invalid JSON"):
            RunConfig.load(p)


class TestOutDir:
    def test_precedence(self, monkeypatch):
        monkeypatch.delenv(OUT_DIR_ENV, raising=False)
        assert resolve_out_dir(None, None, "d") == "d"
        assert resolve_out_dir(None, "cfg", "d") == "cfg"
        monkeypatch.setenv(OUT_DIR_ENV, "env")
        assert resolve_out_dir(None, "cfg", "d") == "env"
        assert resolve_out_dir("flag", "cfg", "d") == "flag"


def test_pretrain_classes_must_fit_vocabulary():
    rc = RunConfig.from_dict({"name": "x", "training": {"general_vocab": [8, 2]}})
    with pytest.raises(ConfigValidationError, match="n_pretrain_classes"):
        rc.stage_config()

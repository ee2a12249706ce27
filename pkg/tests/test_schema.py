import json
from pathlib import Path

import jsonschema
import pytest

from qkdco import model, presets

ROOT = Path(__file__).resolve().parents[1]
SCHEMA = json.loads((ROOT / "docs" / "scenario.schema.json").read_text())


def test_schema_is_valid_draft():
    jsonschema.Draft202012Validator.check_schema(SCHEMA)


@pytest.mark.parametrize("name", ["ingaas", "upconversion", "back_to_back"])
def test_configs_match_schema(name):
    jsonschema.validate(json.loads((ROOT / "configs" / f"{name}.json").read_text()), SCHEMA)


def test_schema_mirrors_dataclasses():
    import dataclasses

    for section, cls in (("source", model.SourceConfig), ("channel", model.ChannelConfig),
                         ("receiver", model.ReceiverConfig), ("security", model.SecurityParams)):
        assert set(SCHEMA["properties"][section]["properties"]) == {f.name for f in dataclasses.fields(cls)}


def test_schema_rejects_unknown_field():
    d = model.scenario_to_dict(presets.scenario("ingaas", 3.0))
    d["source"]["colour"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(d, SCHEMA)

import json

import numpy as np
import pytest

from selfcal.kinecore import ModelError
from selfcal.robotio import load_robot, robot_from_dict, robot_to_dict, save_robot


def test_round_trip_preserves_everything(rig, tmp_path):
    path = tmp_path / "robot.json"
    save_robot(rig, path)
    back = load_robot(path)
    assert robot_to_dict(back) == robot_to_dict(rig)
    np.testing.assert_array_equal(back.all_values(), rig.all_values())
    assert back.mask == rig.mask


def test_mask_patterns_expand_on_load(rig):
    doc = robot_to_dict(rig)
    doc["mask"] = ["frame/L1/*"]
    model = robot_from_dict(doc)
    assert [s.key for s in model.free_slots] == ["frame/L1/a", "frame/L1/d", "frame/L1/alpha", "frame/L1/theta"]


def test_taxels_from_csv(rig, tmp_path):
    doc = robot_to_dict(rig)
    patch = doc["taxel_patches"][0]
    rows = ["patch_id,taxel_id,x,y,z"]
    rows += [f"{patch['id']},{i},{x},{y},{z}" for i, (x, y, z) in zip(patch["taxel_ids"], patch["taxels"])]
    (tmp_path / "taxels.csv").write_text("\n".join(rows) + "\n")
    del patch["taxels"], patch["taxel_ids"]
    patch["taxels_csv"] = "taxels.csv"
    (tmp_path / "robot.json").write_text(json.dumps(doc))
    model = load_robot(tmp_path / "robot.json")
    assert robot_to_dict(model) == robot_to_dict(rig)


@pytest.mark.parametrize("edit", [
    lambda d: d.update(schema="something-else"),
    lambda d: d.update(version=99),
    lambda d: d["frames"][1].pop("parent") and d["frames"][1].update(type="spline"),
    lambda d: d["frames"][2].pop("id"),
])
def test_schema_errors(rig, edit):
    doc = robot_to_dict(rig)
    edit(doc)
    with pytest.raises(ModelError):
        robot_from_dict(doc)


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ModelError):
        load_robot(path)

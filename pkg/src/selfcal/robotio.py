"""JSON robot description files.

Layout (angles in radians, lengths in meters, quaternions ``[w, x, y, z]``)::

    {
      "schema": "selfcal-robot", "version": 1,
      "frames": [
        {"type": "mount", "id": "torso", "parent": "root",
         "translation": [0, 0, 0.5], "rotation": [1, 0, 0, 0], "calibratable": false},
        {"type": "dh", "id": "L1", "parent": "torso", "a": 0.0, "d": 0.1,
         "alpha": 1.5708, "theta_offset": 0.0, "joint": "revolute", "limits": [-3.1, 3.1]}
      ],
      "chains": {"left": ["torso", "L1"]},
      "cameras": [{"id": "cam", "fx": 500, "fy": 500, "cx": 320, "cy": 240,
                   "width": 640, "height": 480,
                   "mount": {"parent": "root", "translation": [...], "rotation": [...],
                             "calibratable": false}}],
      "markers": [{"id": "L_tip", "parent": "L6", "position": [0, 0, 0.05],
                   "calibratable": false}],
      "taxel_patches": [{"id": "R_skin", "mount": {...},
                         "taxels": [[x, y, z], ...], "taxel_ids": [0, 1, ...]}],
      "planes": [{"id": "table", "azimuth": 0, "elevation": 1.5708, "offset": 0,
                  "calibratable": false}],
      "external_devices": [{"id": "tracker", "translation": [...], "rotation": [...],
                            "noise_sigma": 0.0005, "calibratable": true}],
      "mask": ["frame/L*/theta", "patch/R_skin/*"]
    }

A taxel patch may give ``"taxels_csv": "file.csv"`` (``patch_id, taxel_id, x, y, z``,
path relative to the JSON file) instead of inline taxels.  ``mask`` lists the
free parameter slots; ``fnmatch`` patterns are accepted on input, explicit
keys are written on output.
"""

from __future__ import annotations

import json
from pathlib import Path

from .kinecore import DHLink, ModelError, MountTransform, RobotModel
from .sensemodel import (
    CameraModel,
    ExternalDevice,
    MarkerPoint,
    PlaneParam,
    TaxelPatch,
    load_taxel_csv,
)

SCHEMA = "selfcal-robot"
VERSION = 1


def _mount_to_dict(m: MountTransform) -> dict:
    return {
        "parent": m.parent,
        "translation": list(m.translation),
        "rotation": list(m.rotation),
        "calibratable": m.calibratable,
    }


def _mount_from_dict(name: str, d: dict) -> MountTransform:
    return MountTransform(
        name,
        d.get("parent", "root"),
        tuple(d.get("translation", (0.0, 0.0, 0.0))),
        tuple(d.get("rotation", (1.0, 0.0, 0.0, 0.0))),
        bool(d.get("calibratable", False)),
    )


def robot_to_dict(model: RobotModel) -> dict:
    frames = []
    for f in model.frames:
        if isinstance(f, DHLink):
            frames.append({
                "type": "dh", "id": f.name, "parent": f.parent,
                "a": f.a, "d": f.d, "alpha": f.alpha, "theta_offset": f.theta_offset,
                "joint": f.joint, "limits": list(f.limits),
            })
        else:
            frames.append({"type": "mount", "id": f.name, **_mount_to_dict(f)})
    return {
        "schema": SCHEMA,
        "version": VERSION,
        "frames": frames,
        "chains": {k: list(v) for k, v in model.chains.items()},
        "cameras": [
            {"id": c.name, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
             "width": c.width, "height": c.height, "mount": _mount_to_dict(c.mount)}
            for c in model.cameras
        ],
        "markers": [
            {"id": m.name, "parent": m.parent, "position": list(m.position),
             "calibratable": m.calibratable}
            for m in model.markers
        ],
        "taxel_patches": [
            {"id": p.name, "mount": _mount_to_dict(p.mount),
             "taxels": [list(t) for t in p.taxels], "taxel_ids": list(p.taxel_ids)}
            for p in model.patches
        ],
        "planes": [
            {"id": p.name, "azimuth": p.azimuth, "elevation": p.elevation,
             "offset": p.offset, "calibratable": p.calibratable}
            for p in model.planes
        ],
        "external_devices": [
            {"id": d.name, "translation": list(d.translation), "rotation": list(d.rotation),
             "noise_sigma": d.noise_sigma, "calibratable": d.calibratable}
            for d in model.devices
        ],
        "mask": [s.key for s in model.free_slots],
    }


def robot_from_dict(doc: dict, base_dir: Path | None = None) -> RobotModel:
    if doc.get("schema", SCHEMA) != SCHEMA:
        raise ModelError(f"not a robot description (schema={doc.get('schema')!r})")
    if int(doc.get("version", VERSION)) > VERSION:
        raise ModelError(f"unsupported robot description version {doc.get('version')}")
    frames = []
    for i, f in enumerate(doc.get("frames", [])):
        try:
            kind = f["type"]
            if kind == "dh":
                frames.append(DHLink(
                    f["id"], f.get("parent", "root"), f.get("a", 0.0), f.get("d", 0.0),
                    f.get("alpha", 0.0), f.get("theta_offset", 0.0),
                    f.get("joint", "revolute"), tuple(f.get("limits", (-3.141592653589793, 3.141592653589793))),
                ))
            elif kind == "mount":
                frames.append(_mount_from_dict(f["id"], f))
            else:
                raise ModelError(f"unknown frame type {kind!r}")
        except KeyError as exc:
            raise ModelError(f"frames[{i}]: missing field {exc.args[0]!r}") from None

    cameras = [
        CameraModel(c["id"], c["fx"], c["fy"], c["cx"], c["cy"], int(c["width"]), int(c["height"]),
                    _mount_from_dict(c["id"], c.get("mount", {})))
        for c in doc.get("cameras", [])
    ]
    markers = [
        MarkerPoint(m["id"], m["parent"], tuple(m["position"]), bool(m.get("calibratable", False)))
        for m in doc.get("markers", [])
    ]
    patches = []
    for p in doc.get("taxel_patches", []):
        if "taxels_csv" in p:
            csv_path = Path(p["taxels_csv"])
            if base_dir is not None and not csv_path.is_absolute():
                csv_path = base_dir / csv_path
            table = load_taxel_csv(csv_path)
            if p["id"] not in table:
                raise ModelError(f"{csv_path} has no rows for patch {p['id']!r}")
            ids, pts = table[p["id"]]
            taxels, taxel_ids = tuple(map(tuple, pts)), ids
        else:
            taxels = tuple(tuple(t) for t in p["taxels"])
            taxel_ids = tuple(p["taxel_ids"]) if "taxel_ids" in p else None
        patches.append(TaxelPatch(p["id"], _mount_from_dict(p["id"], p.get("mount", {})), taxels, taxel_ids))
    planes = [
        PlaneParam(p["id"], float(p["azimuth"]), float(p["elevation"]), float(p["offset"]),
                   bool(p.get("calibratable", False)))
        for p in doc.get("planes", [])
    ]
    devices = [
        ExternalDevice(d["id"], tuple(d.get("translation", (0.0, 0.0, 0.0))),
                       tuple(d.get("rotation", (1.0, 0.0, 0.0, 0.0))),
                       float(d.get("noise_sigma", 0.0)), bool(d.get("calibratable", False)))
        for d in doc.get("external_devices", [])
    ]
    model = RobotModel(
        tuple(frames), tuple(cameras), tuple(markers), tuple(patches), tuple(planes), tuple(devices),
        {k: tuple(v) for k, v in doc.get("chains", {}).items()},
    )
    mask = doc.get("mask", [])
    return model.with_mask(mask) if mask else model


def save_robot(model: RobotModel, path) -> None:
    Path(path).write_text(json.dumps(robot_to_dict(model), indent=2) + "\n")


def load_robot(path) -> RobotModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from None
    return robot_from_dict(doc, base_dir=path.parent)

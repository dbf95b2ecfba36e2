"""YAML run configuration: schema, defaults and object construction.

Every numeric constant the pipeline uses has its default here, so a config
file (or :data:`DEFAULTS`) fully describes a run. Validation errors name the
offending field path and, when it comes from a file, its line number.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np
import yaml

from .beamformers import BeamformerKind
from .core import AcquisitionConfig, ArrayGeometry, Scene, VoxelGrid, build_matrix_array, paper_scene_five_scatterers
from .simulator import Tube, crossing_tubes
from .srus import ClutterFilterConfig, SrusConfig

__all__ = ["ConfigError", "DEFAULTS", "SCHEMA", "RunConfig", "load_config", "config_from_dict"]


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads YAML 1.2 floats such as ``7.8e6``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    """Schema or value error in a configuration, with its location."""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path or '<root>'}" + (f" (line {line})" if line is not None else "")
        super().__init__(f"{where}: {message}")


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 1,
    "probe": {
        "rows": 32,
        "cols": 32,
        "pitch_x": 9.3e-3 / 32,
        "pitch_y": 10.2e-3 / 32,
        "center_frequency": 7.8e6,
        "element_width": None,
        "element_height": None,
    },
    "acquisition": {
        "speed_of_sound": 1540.0,
        "sampling_frequency": None,  # 4 x center_frequency
        "pulse_cycles": 2,
        "tukey_alpha": 0.5,
        "frame_rate": 500.0,
        "depth_range": [14e-3, 26e-3],
        "full_transmit_sum": False,
    },
    "scene": {
        "type": "five_scatterers",
        "scatterers": [],
        "snr_db": None,
        "tube_phantom": {
            "crossing_point": [-3.5e-3, 0.0, 20e-3],
            "angle_deg": 3.0,
            "length": 9e-3,
            "start_offset": -1e-3,
            "radius": 100e-6,
            "bubble_rate": 0.1,
            "speed": 20e-3,
            "n_frames": 500,
            "prefill": True,
        },
    },
    "grid": {
        "center": [0.0, 0.0, 20e-3],
        "extent": [2e-3, 2e-3, 12e-3],
        "spacing": [50e-6, 50e-6, 50e-6],
    },
    "beamformer": {
        "p": 4.0,
        "epsilon": 1e-10,
        "cf_normalized": True,
        "axial_step": 1e-5,
        "bandwidth": 0.8,
        "margin": 0.25e-3,
    },
    "srus": {
        "methods": ["das", "cv"],
        "low_cutoff": 2,
        "high_cutoff": None,
        "block_samples": None,
        "thresholds_db": {"das": -10.0, "pdas": -35.0, "cf": -27.5, "cv": -40.0, "cvn": -40.0},
        "min_coef": 0.3,
        "window": 5,
        "upsample": 10,
        "template_crop_db": -20.0,
        "template_max_half": [8, 8, 6],
        "template_depth": None,
        "template_snr_db": None,  # scene snr_db
        "template_realizations": 8,
        "sr_factor": 10,
    },
    "metrics": {
        "db_range": 40.0,
        "slab": 1e-3,
        "noise_half_thickness": 0.25e-3,
        "reference": "das",
    },
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_pos3 = {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3}
_opt_pos = {"type": ["number", "null"], "exclusiveMinimum": 0}
_variants = {"enum": ["das", "pdas", "cf", "cvn", "cv"]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "workers": _posint,
        "probe": _obj(
            {
                "rows": _posint,
                "cols": _posint,
                "pitch_x": _pos,
                "pitch_y": _pos,
                "center_frequency": _pos,
                "element_width": _opt_pos,
                "element_height": _opt_pos,
            }
        ),
        "acquisition": _obj(
            {
                "speed_of_sound": _pos,
                "sampling_frequency": _opt_pos,
                "pulse_cycles": _posint,
                "tukey_alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "frame_rate": _pos,
                "depth_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "full_transmit_sum": {"type": "boolean"},
            }
        ),
        "scene": _obj(
            {
                "type": {"enum": ["five_scatterers", "scatterers", "tube_phantom"]},
                "scatterers": {
                    "type": "array",
                    "items": _obj({"position": _vec3, "coefficient": _pos}, required=("position", "coefficient")),
                },
                "snr_db": {"type": ["number", "null"]},
                "tube_phantom": _obj(
                    {
                        "crossing_point": _vec3,
                        "angle_deg": {"type": "number", "minimum": 0, "maximum": 90},
                        "length": _pos,
                        "start_offset": _num,
                        "radius": _pos,
                        "bubble_rate": {"type": "number", "minimum": 0},
                        "speed": _pos,
                        "n_frames": _posint,
                        "prefill": {"type": "boolean"},
                    }
                ),
            }
        ),
        "grid": _obj(
            {
                "center": _vec3,
                "extent": _pos3,
                "spacing": {"oneOf": [_pos, _pos3]},
                "origin": _vec3,
                "dims": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3},
            }
        ),
        "beamformer": _obj(
            {
                "p": {"type": "number", "minimum": 1},
                "epsilon": _pos,
                "cf_normalized": {"type": "boolean"},
                "axial_step": _pos,
                "bandwidth": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 2},
                "margin": {"type": "number", "minimum": 0},
            }
        ),
        "srus": _obj(
            {
                "methods": {"type": "array", "items": _variants, "minItems": 1, "uniqueItems": True},
                "low_cutoff": {"type": "integer", "minimum": 0},
                "high_cutoff": {"type": ["integer", "null"], "minimum": 0},
                "block_samples": {"type": ["integer", "null"], "minimum": 1},
                "thresholds_db": {
                    "type": "object",
                    "propertyNames": _variants,
                    "additionalProperties": {"type": "number", "maximum": 0},
                },
                "min_coef": {"type": "number", "minimum": -1, "maximum": 1},
                "window": {"type": "integer", "minimum": 3},
                "upsample": _posint,
                "template_crop_db": {"type": "number", "exclusiveMaximum": 0},
                "template_max_half": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3},
                "template_depth": _opt_pos,
                "template_snr_db": {"type": ["number", "null"]},
                "template_realizations": _posint,
                "sr_factor": _posint,
            }
        ),
        "metrics": _obj(
            {
                "db_range": _pos,
                "slab": _pos,
                "noise_half_thickness": _pos,
                "reference": _variants,
            }
        ),
    }
)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "thresholds_db":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _node_line(node, path) -> Optional[int]:
    """1-based line of the YAML node at ``path`` (deepest existing ancestor)."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


class RunConfig:
    """A validated configuration with builders for the domain objects."""

    def __init__(self, data: dict, source: Optional[str] = None, text: Optional[str] = None):
        self.data = data
        self.source = source
        self.text = text

    def __getitem__(self, key):
        return self.data[key]

    @property
    def digest(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def workers(self) -> int:
        return int(self.data["workers"])

    def probe(self) -> ArrayGeometry:
        p = self.data["probe"]
        return build_matrix_array(
            p["rows"], p["cols"], p["pitch_x"], p["pitch_y"], p["center_frequency"],
            p["element_width"], p["element_height"],
        )

    def acquisition(self, geom: Optional[ArrayGeometry] = None) -> AcquisitionConfig:
        a = self.data["acquisition"]
        geom = geom or self.probe()
        kw = dict(
            speed_of_sound=a["speed_of_sound"],
            pulse_cycles=a["pulse_cycles"],
            frame_rate=a["frame_rate"],
            depth_range=tuple(a["depth_range"]),
            full_transmit_sum=a["full_transmit_sum"],
        )
        if a["sampling_frequency"] is not None:
            kw["sampling_frequency"] = a["sampling_frequency"]
        acq = AcquisitionConfig.for_probe(geom, a["tukey_alpha"], **kw)
        acq.validate_for(geom)
        return acq

    def scene(self) -> Scene:
        s = self.data["scene"]
        if s["type"] == "five_scatterers":
            return paper_scene_five_scatterers()
        if s["type"] == "scatterers":
            return Scene.from_arrays(
                [x["position"] for x in s["scatterers"]], [x["coefficient"] for x in s["scatterers"]]
            )
        raise ValueError("scene.type tube_phantom has no static scene; use tubes()")

    def tubes(self) -> tuple[Tube, Tube]:
        t = self.data["scene"]["tube_phantom"]
        return crossing_tubes(
            t["crossing_point"], t["angle_deg"], length=t["length"], start_offset=t["start_offset"], radius=t["radius"]
        )

    def grid(self) -> VoxelGrid:
        g = self.data["grid"]
        if "origin" in g and "dims" in g:
            sp = np.broadcast_to(np.asarray(g["spacing"], dtype=float), 3)
            return VoxelGrid(tuple(g["origin"]), tuple(sp), tuple(g["dims"]))
        return VoxelGrid.centered(g["center"], g["extent"], g["spacing"])

    def beamformer(self, variant: str) -> BeamformerKind:
        return BeamformerKind(variant, **self.data["beamformer"])

    def srus(self) -> SrusConfig:
        s = self.data["srus"]
        return SrusConfig(
            clutter=ClutterFilterConfig(s["low_cutoff"], s["high_cutoff"], s["block_samples"]),
            thresholds_db=dict(s["thresholds_db"]),
            min_coef=s["min_coef"],
            window=s["window"],
            upsample=s["upsample"],
            template_crop_db=s["template_crop_db"],
            template_max_half=tuple(s["template_max_half"]),
            template_depth=s["template_depth"],
            template_snr_db=s["template_snr_db"] if s["template_snr_db"] is not None else self.data["scene"]["snr_db"],
            template_realizations=s["template_realizations"],
        )


def _semantic_checks(data: dict):
    a = data["acquisition"]
    z0, z1 = a["depth_range"]
    if not z0 < z1:
        yield ("acquisition", "depth_range"), "start must be below stop"
    fs = a["sampling_frequency"]
    if fs is not None and fs < 4 * data["probe"]["center_frequency"] * (1 - 1e-12):
        yield ("acquisition", "sampling_frequency"), "must be at least 4 x probe.center_frequency"
    if data["scene"]["type"] == "scatterers" and not data["scene"]["scatterers"]:
        yield ("scene", "scatterers"), "scene.type 'scatterers' needs at least one scatterer"
    for i, sc in enumerate(data["scene"]["scatterers"]):
        if sc["position"][2] <= 0:
            yield ("scene", "scatterers", i, "position"), "scatterer must lie in front of the array (z > 0)"
    s = data["srus"]
    if s["window"] % 2 == 0:
        yield ("srus", "window"), "window must be odd"
    g = data["grid"]
    if ("origin" in g) != ("dims" in g):
        yield ("grid",), "origin and dims must be given together"


def config_from_dict(raw: Optional[dict], source: Optional[str] = None, text: Optional[str] = None) -> RunConfig:
    """Validate ``raw`` against :data:`SCHEMA` after merging it over :data:`DEFAULTS`."""
    raw = raw or {}
    node = yaml.compose(text, Loader=_Loader) if text else None
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping", _node_line(node, []))
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        path = list(e.absolute_path)
        raise ConfigError(".".join(map(str, path)), e.message, _node_line(node, path)) from None
    data = _merge(DEFAULTS, raw)
    if "origin" in raw.get("grid", {}):
        for k in ("center", "extent"):
            if k not in raw["grid"]:
                data["grid"].pop(k, None)
    for path, msg in _semantic_checks(data):
        raise ConfigError(".".join(map(str, path)), msg, _node_line(node, list(path)))
    return RunConfig(data, source, text)


def load_config(path) -> RunConfig:
    """Read and validate a YAML configuration file."""
    path = Path(path)
    text = path.read_text()
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("", f"YAML syntax error: {e}", mark.line + 1 if mark else None) from None
    return config_from_dict(raw, str(path), text)

"""Bit-exact file formats: scene and prediction NDJSON, dataset metadata,
the FGRD feature-grid binary, run-length masks and the flat config format.

All JSON is emitted with sorted keys and repr-float values, so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .geometry import BitMask, Box
from .metrics import TripletRecord
from .synth import Entity, Scene, SceneSpec, SeedProposal, Triplet

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1


# ------------------------------------------------------------------ masks

def rle_encode(mask: BitMask):
    """Alternating run lengths over the row-major bits, starting with zeros."""
    flat = mask.bits.ravel().astype(np.int8)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, height, width) -> BitMask:
    total = sum(runs)
    if total != height * width:
        raise FormatError(f"run lengths sum to {total}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run < 0:
            raise FormatError("negative run length")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return BitMask(flat.reshape(height, width))


def _box_to_list(box: Box):
    return [box.x1, box.y1, box.x2, box.y2]


def _box_from_list(vals):
    return Box(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))


# ---------------------------------------------------------------- scenes

def scene_to_record(scene: Scene) -> dict:
    entities = []
    for ent in scene.entities:
        entities.append({
            "class_id": ent.class_id,
            "box": _box_to_list(ent.box),
            "mask": {"size": [ent.mask.height, ent.mask.width],
                     "rle": rle_encode(ent.mask)},
            "face_box": _box_to_list(ent.face_box) if ent.face_box else None,
        })
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "entities": entities,
        "triplets": [{"human": t.human, "verb": t.verb, "object": t.object}
                     for t in scene.triplets],
        "proposals": [{"box": _box_to_list(p.box), "entity": p.entity, "iou": p.iou}
                      for p in scene.proposals],
    }


def record_to_scene(record: dict) -> Scene:
    try:
        entities = []
        for e in record["entities"]:
            mask = rle_decode(e["mask"]["rle"], *e["mask"]["size"])
            face = _box_from_list(e["face_box"]) if e.get("face_box") else None
            entities.append(Entity(int(e["class_id"]), _box_from_list(e["box"]),
                                   mask, face))
        triplets = [Triplet(int(t["human"]), int(t["verb"]), int(t["object"]))
                    for t in record["triplets"]]
        proposals = [SeedProposal(_box_from_list(p["box"]), int(p["entity"]),
                                  float(p["iou"]))
                     for p in record["proposals"]]
        scene = Scene(record["image_id"], int(record["width"]), int(record["height"]),
                      entities, triplets, proposals, seed=int(record.get("seed", 0)))
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed scene record: {exc}") from exc
    for t in scene.triplets:
        if not (0 <= t.human < len(entities) and 0 <= t.object < len(entities)):
            raise DataError(f"triplet references missing entity in {scene.image_id}")
    return scene


def write_scenes_ndjson(path, scenes):
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), sort_keys=True))
            fh.write("\n")


def read_scenes_ndjson(path):
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                scenes.append(record_to_scene(record))
            except (FormatError, DataError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    return scenes


# ------------------------------------------------------------------- meta

def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "image_size": spec.image_size,
        "class_names": list(spec.class_names),
        "person_class": spec.person_class,
        "verb_names": list(spec.verb_names),
        "geometric_verbs": sorted(spec.geometric_verbs),
        "entities_range": list(spec.entities_range),
        "jitter": spec.jitter,
        "occlusion_rate": spec.occlusion_rate,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
    }


def spec_from_dict(data: dict) -> SceneSpec:
    try:
        return SceneSpec(
            image_size=int(data["image_size"]),
            class_names=tuple(data["class_names"]),
            person_class=int(data["person_class"]),
            verb_names=tuple(data["verb_names"]),
            geometric_verbs=frozenset(data["geometric_verbs"]),
            entities_range=tuple(data["entities_range"]),
            jitter=float(data["jitter"]),
            occlusion_rate=float(data["occlusion_rate"]),
            noise_sigma=float(data["noise_sigma"]),
            seed=int(data["seed"]),
        )
    except KeyError as exc:
        raise FormatError(f"dataset meta missing field {exc}") from exc


def write_meta(path, spec: SceneSpec, extra=None):
    data = spec_to_dict(spec)
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_meta(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return spec_from_dict(data), data


# ---------------------------------------------------------- feature grids

def write_feature_grid(path, data):
    """FGRD binary: magic, u32 version, u32 C/H/W, then little-endian f32."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise DataError(f"feature grid must be (C, H, W), got {data.shape}")
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(FGRD_MAGIC)
        fh.write(struct.pack("<IIII", FGRD_VERSION, c, h, w))
        fh.write(data.astype("<f4").tobytes())


def read_feature_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FGRD_MAGIC:
            raise FormatError(f"bad feature-grid magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError("truncated feature-grid header")
        version, c, h, w = struct.unpack("<IIII", header)
        if version != FGRD_VERSION:
            raise FormatError(f"unsupported feature-grid version {version}")
        payload = fh.read(4 * c * h * w)
        if len(payload) != 4 * c * h * w:
            raise FormatError("truncated feature-grid payload")
        if fh.read(1):
            raise FormatError("trailing bytes after feature-grid payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(c, h, w)


# ------------------------------------------------------------ predictions

def predictions_to_record(image_id, predictions, with_masks=False) -> dict:
    """One NDJSON line: deduplicated entities plus verb-scored triplets
    referencing them by index."""
    entities = []
    keys = {}

    def entity_ref(inst):
        key = id(inst)
        if key not in keys:
            entry = {"box": _box_to_list(inst.box), "class_id": inst.class_id,
                     "confidence": inst.confidence}
            if with_masks:
                if inst.mask is None:
                    raise DataError("segment-mode predictions need masks")
                entry["mask"] = {"size": [inst.mask.height, inst.mask.width],
                                 "rle": rle_encode(inst.mask)}
            keys[key] = len(entities)
            entities.append(entry)
        return keys[key]

    triplets = []
    for pred in predictions:
        triplets.append({"h": entity_ref(pred.human), "o": entity_ref(pred.object),
                         "verb": pred.verb, "score": pred.score})
    return {"image_id": image_id, "entities": entities, "triplets": triplets}


def write_predictions_ndjson(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def read_predictions_ndjson(path):
    """Returns {image_id: [TripletRecord, ...]} with global input indices."""
    by_image = {}
    index = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                image_id = record["image_id"]
                entities = record["entities"]
                triplets = []
                for t in record["triplets"]:
                    h_ent, o_ent = entities[t["h"]], entities[t["o"]]
                    h_mask = o_mask = None
                    if "mask" in h_ent:
                        h_mask = rle_decode(h_ent["mask"]["rle"], *h_ent["mask"]["size"])
                    if "mask" in o_ent:
                        o_mask = rle_decode(o_ent["mask"]["rle"], *o_ent["mask"]["size"])
                    triplets.append(TripletRecord(
                        _box_from_list(h_ent["box"]), _box_from_list(o_ent["box"]),
                        int(t["verb"]), float(t["score"]), index, h_mask, o_mask))
                    index += 1
            except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed prediction record: {exc}") from exc
            by_image[image_id] = triplets
    return by_image


def scenes_to_gt_records(scenes):
    """{image_id: [TripletRecord, ...]} ground truth view of a scene list."""
    by_image = {}
    for scene in scenes:
        records = []
        for i, t in enumerate(scene.triplets):
            h = scene.entities[t.human]
            o = scene.entities[t.object]
            records.append(TripletRecord(h.box, o.box, t.verb, 0.0, i,
                                         h.mask, o.mask))
        by_image[scene.image_id] = records
    return by_image


# ------------------------------------------------------------------ config

def parse_config_file(path) -> dict:
    """Flat UTF-8 `key = value` lines; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise FormatError(f"{path}:{lineno}: empty key")
            values[key] = value.strip()
    return values


@dataclass
class RunConfig:
    """End-user knobs; defaults mirror the published protocol constants."""

    mode: str = "detect"              # detect | segment
    representation: str = "box"       # box | mask feature pooling
    stages: int = 3
    merge_threshold: float = 0.3
    top_k: int = 64
    hinge_margin: float = 0.2
    learning_rate: float = 0.02
    phase1_epochs: int = 6
    phase2_epochs: int = 5
    rrm_polish_epochs: int = 0    # extra ranking-only refinement steps
    rrm_polish_lr: float = 0.02
    seed: int = 0
    grid_size: int = 32
    channels: int = 0                 # 0 = derive from vocabulary
    train_scenes: int = 300
    test_scenes: int = 100
    jitter: float = 0.25
    occlusion_rate: float = 0.2
    noise_sigma: float = 0.05
    image_size: int = 128
    entities_min: int = 3
    entities_max: int = 5

    def __post_init__(self):
        if self.mode not in ("detect", "segment"):
            raise DataError(f"unknown mode {self.mode!r}")
        if self.representation not in ("box", "mask"):
            raise DataError(f"unknown representation {self.representation!r}")
        if self.mode == "detect" and self.representation == "mask":
            raise DataError("mask representation requires segment mode")


def run_config_from(values: dict) -> RunConfig:
    """Build a RunConfig from string key/value pairs (file or CLI)."""
    kwargs = {}
    casts = {int: int, float: float, str: str}
    defaults = RunConfig.__dataclass_fields__
    for key, raw in values.items():
        if key not in defaults:
            raise DataError(f"unknown config key {key!r}")
        default = defaults[key].default
        caster = casts[type(default)]
        try:
            kwargs[key] = caster(raw)
        except ValueError as exc:
            raise DataError(f"config key {key!r}: {exc}") from exc
    return RunConfig(**kwargs)

"""Line-delimited dataset container with bit-exact float round trips.

One JSON record per line. The first record is a header carrying the format
version and record counts; scene records follow, then task records that
reference scenes by id. Large float arrays are hex-encoded little-endian
float64 blocks; small float lists rely on JSON shortest-repr round-tripping,
which is also exact. See README for the full layout.
"""

from __future__ import annotations

import json

import numpy as np

from .scenegen import Camera, Instance, Scene, TaskSample

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised with the failing record index on any malformed input."""


def _encode_f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes().hex()


def _decode_f64(hexstr, shape, record, field_name):
    try:
        flat = np.frombuffer(bytes.fromhex(hexstr), dtype="<f8")
        return flat.reshape(shape).copy()
    except ValueError as exc:
        raise DatasetFormatError(f"record {record}: bad float block {field_name!r}: {exc}") from exc


def _scene_record(scene):
    return {
        "kind": "scene",
        "id": scene.scene_id,
        "n": int(scene.n_points),
        "points": _encode_f64(scene.points),
        "colors": _encode_f64(scene.colors),
        "segment_ids": None if scene.segment_ids is None else [int(s) for s in scene.segment_ids],
        "instances": [
            {
                "points": [int(i) for i in inst.point_indices],
                "class_id": int(inst.class_id),
                "bbox_center": [float(v) for v in inst.bbox_center],
                "bbox_size": [float(v) for v in inst.bbox_size],
                "color": inst.color_name,
            }
            for inst in scene.instances
        ],
        "cameras": [
            {
                "position": [float(v) for v in cam.position],
                "look_at": [float(v) for v in cam.look_at],
                "fov": float(cam.fov),
                "resolution": [int(cam.resolution[0]), int(cam.resolution[1])],
            }
            for cam in scene.cameras
        ],
    }


def _task_record(task):
    return {
        "kind": "task",
        "scene_id": task.scene_id,
        "task_kind": task.kind,
        "prompt_kind": task.prompt_kind,
        "tokens": task.prompt_tokens,
        "payload": task.prompt_payload,
        "targets": list(task.target_ids),
        "answer": task.answer_tokens,
        "text": task.text,
    }


def write_dataset(path, scenes, tasks):
    """Write scenes and tasks; output bytes are a pure function of the data."""
    with open(path, "w") as fh:
        header = {"kind": "header", "version": FORMAT_VERSION,
                  "scenes": len(scenes), "tasks": len(tasks)}
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for scene in scenes:
            fh.write(json.dumps(_scene_record(scene), sort_keys=True, separators=(",", ":")) + "\n")
        for task in tasks:
            fh.write(json.dumps(_task_record(task), sort_keys=True, separators=(",", ":")) + "\n")


def _parse_scene(rec, idx):
    try:
        n = int(rec["n"])
        points = _decode_f64(rec["points"], (n, 3), idx, "points")
        colors = _decode_f64(rec["colors"], (n, 3), idx, "colors")
        instances = [
            Instance(
                point_indices=np.asarray(r["points"], dtype=np.int64),
                class_id=int(r["class_id"]),
                bbox_center=np.asarray(r["bbox_center"], dtype=np.float64),
                bbox_size=np.asarray(r["bbox_size"], dtype=np.float64),
                color_name=r["color"],
            )
            for r in rec["instances"]
        ]
        cameras = [
            Camera(
                position=np.asarray(r["position"], dtype=np.float64),
                look_at=np.asarray(r["look_at"], dtype=np.float64),
                fov=float(r["fov"]),
                resolution=(int(r["resolution"][0]), int(r["resolution"][1])),
            )
            for r in rec["cameras"]
        ]
        seg = rec.get("segment_ids")
        return Scene(
            scene_id=int(rec["id"]), points=points, colors=colors,
            instances=instances, cameras=cameras,
            segment_ids=None if seg is None else np.asarray(seg, dtype=np.int64),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"record {idx}: malformed scene: {exc!r}") from exc


def _parse_task(rec, idx):
    try:
        return TaskSample(
            kind=rec["task_kind"],
            prompt_kind=rec["prompt_kind"],
            scene_id=int(rec["scene_id"]),
            prompt_tokens=rec["tokens"],
            prompt_payload=rec["payload"],
            target_ids=list(rec["targets"]),
            answer_tokens=rec["answer"],
            text=rec.get("text", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"record {idx}: malformed task: {exc!r}") from exc


def read_dataset(path):
    """Inverse of write_dataset; raises DatasetFormatError naming the bad record."""
    scenes, tasks = [], []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("record 0: empty file")
    records = []
    for idx, line in enumerate(lines):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"record {idx}: invalid JSON: {exc}") from exc
    header = records[0]
    if header.get("kind") != "header":
        raise DatasetFormatError("record 0: missing header record")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"record 0: unsupported version {header.get('version')!r}")
    expected = int(header["scenes"]) + int(header["tasks"])
    if len(records) - 1 != expected:
        raise DatasetFormatError(
            f"record {len(records)}: truncated file, expected {expected} records "
            f"after header, found {len(records) - 1}")
    for idx, rec in enumerate(records[1:], start=1):
        kind = rec.get("kind")
        if kind == "scene":
            scenes.append(_parse_scene(rec, idx))
        elif kind == "task":
            tasks.append(_parse_task(rec, idx))
        else:
            raise DatasetFormatError(f"record {idx}: unknown record kind {kind!r}")
    if len(scenes) != header["scenes"] or len(tasks) != header["tasks"]:
        raise DatasetFormatError("record counts disagree with header")
    return scenes, tasks

"""Dataset container: lossless round trips and malformed-input errors."""

import hashlib

import numpy as np
import pytest

from promptscene.dataio import DatasetFormatError, read_dataset, write_dataset
from promptscene.scenegen import SceneConfig, generate_dataset

CFG = SceneConfig(n_points_min=150, n_points_max=250, n_objects_min=2, n_objects_max=3)


def _roundtrip(tmp_path, scenes, tasks):
    path = tmp_path / "data.jsonl"
    write_dataset(path, scenes, tasks)
    return read_dataset(path)


def test_round_trip_is_identity(tmp_path):
    scenes, tasks = generate_dataset(1, 2, CFG)
    scenes2, tasks2 = _roundtrip(tmp_path, scenes, tasks)
    assert len(scenes2) == len(scenes) and len(tasks2) == len(tasks)
    for a, b in zip(scenes, scenes2):
        assert a.scene_id == b.scene_id
        assert a.points.tobytes() == b.points.tobytes()  # bit-exact floats
        assert a.colors.tobytes() == b.colors.tobytes()
        assert len(a.instances) == len(b.instances)
        for ia, ib in zip(a.instances, b.instances):
            assert ia.point_indices.tolist() == ib.point_indices.tolist()
            assert ia.class_id == ib.class_id
            assert ia.bbox_center.tobytes() == ib.bbox_center.tobytes()
            assert ia.bbox_size.tobytes() == ib.bbox_size.tobytes()
            assert ia.color_name == ib.color_name
        for ca, cb in zip(a.cameras, b.cameras):
            assert ca.position.tobytes() == cb.position.tobytes()
            assert ca.fov == cb.fov and ca.resolution == cb.resolution
    for ta, tb in zip(tasks, tasks2):
        assert (ta.kind, ta.prompt_kind, ta.scene_id) == (tb.kind, tb.prompt_kind, tb.scene_id)
        assert ta.prompt_tokens == tb.prompt_tokens
        assert ta.prompt_payload == tb.prompt_payload
        assert list(ta.target_ids) == list(tb.target_ids)
        assert ta.answer_tokens == tb.answer_tokens


def test_segment_ids_round_trip(tmp_path):
    scenes, tasks = generate_dataset(2, 1, CFG)
    scenes[0].segment_ids = np.arange(scenes[0].n_points, dtype=np.int64) % 5
    scenes2, _ = _roundtrip(tmp_path, scenes, tasks)
    assert scenes2[0].segment_ids.tolist() == scenes[0].segment_ids.tolist()


def test_truncated_file_names_failing_record(tmp_path):
    scenes, tasks = generate_dataset(3, 2, CFG)
    path = tmp_path / "data.jsonl"
    write_dataset(path, scenes, tasks)
    lines = path.read_text().splitlines()
    (tmp_path / "trunc.jsonl").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(tmp_path / "trunc.jsonl")


def test_corrupt_json_line_names_record(tmp_path):
    scenes, tasks = generate_dataset(3, 1, CFG)
    path = tmp_path / "data.jsonl"
    write_dataset(path, scenes, tasks)
    lines = path.read_text().splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="record 1"):
        read_dataset(tmp_path / "bad.jsonl")


def test_bad_float_block_names_field(tmp_path):
    scenes, tasks = generate_dataset(3, 1, CFG)
    path = tmp_path / "data.jsonl"
    write_dataset(path, scenes, tasks)
    text = path.read_text()
    lines = text.splitlines()
    import json
    rec = json.loads(lines[1])
    rec["points"] = rec["points"][:-8]
    lines[1] = json.dumps(rec, sort_keys=True, separators=(",", ":"))
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="points"):
        read_dataset(tmp_path / "bad.jsonl")


def test_version_field_is_mandatory(tmp_path):
    scenes, tasks = generate_dataset(3, 1, CFG)
    path = tmp_path / "data.jsonl"
    write_dataset(path, scenes, tasks)
    lines = path.read_text().splitlines()
    import json
    hdr = json.loads(lines[0])
    hdr["version"] = 99
    lines[0] = json.dumps(hdr, sort_keys=True, separators=(",", ":"))
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(tmp_path / "bad.jsonl")


def test_missing_header(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"kind":"scene"}\n')
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "bad.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(DatasetFormatError, match="empty"):
        read_dataset(tmp_path / "empty.jsonl")


def test_hundred_scene_checksums_stable(tmp_path):
    cfg = SceneConfig(n_points_min=60, n_points_max=80, n_objects_min=1, n_objects_max=2)
    scenes, tasks = generate_dataset(9, 100, cfg)
    sums = []
    for name in ("a.jsonl", "b.jsonl"):
        path = tmp_path / name
        write_dataset(path, scenes, tasks)
        read_dataset(path)  # reread must succeed
        sums.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert sums[0] == sums[1]

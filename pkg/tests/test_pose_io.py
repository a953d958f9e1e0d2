import json

import numpy as np
import pytest

from posesparse.errors import FormatVersionError, ParseError, RangeError, SchemaError
from posesparse.pose_io import (
    FilterPolicy,
    GroupLayout,
    filter_frames,
    load_pose_sequence,
    make_sequence,
    save_pose_sequence,
)
from posesparse.synthetic import talking_sequence

from conftest import LAYOUT, planted_filter_fixture


def test_round_trip_three_frames(tmp_path):
    seq = talking_sequence(3, seed=1)
    path = tmp_path / "p.jsonl"
    save_pose_sequence(seq, path)
    back = load_pose_sequence(path)
    assert back.T == 3
    assert back.image_size == seq.image_size
    assert back.layout == seq.layout
    for a, b in zip(seq.frames, back.frames):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.confidence, b.confidence)


def test_layout_must_tile_keypoints():
    with pytest.raises(SchemaError):
        GroupLayout.from_mapping({"face": [0, 1], "left_hand": [3]})


def test_confidence_out_of_range_rejected():
    kp = np.zeros((1, LAYOUT.num_keypoints, 3))
    kp[0, 0, 2] = 1.5
    with pytest.raises(RangeError):
        make_sequence(kp, LAYOUT)


def test_wrong_keypoint_count_rejected():
    with pytest.raises(SchemaError):
        make_sequence(np.zeros((1, 5, 3)), LAYOUT)


def test_bad_version_and_garbage(tmp_path):
    seq = talking_sequence(2)
    path = tmp_path / "p.jsonl"
    save_pose_sequence(seq, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(FormatVersionError):
        load_pose_sequence(path)
    path.write_text("not json\n")
    with pytest.raises(ParseError):
        load_pose_sequence(path)


def test_planted_fixture_verdicts():
    seq, expected = planted_filter_fixture()
    kept, report = filter_frames(seq)
    assert kept.T == 6
    for v in report.verdicts:
        assert list(v.reasons) == expected[v.source_index]
    assert [f.source_index for f in kept.frames] == [t for t, r in expected.items() if not r]
    assert [f.frame_index for f in kept.frames] == list(range(6))


def test_filtered_sequence_round_trips_source_index(tmp_path):
    seq, _ = planted_filter_fixture()
    kept, _ = filter_frames(seq)
    save_pose_sequence(kept, tmp_path / "k.jsonl")
    back = load_pose_sequence(tmp_path / "k.jsonl")
    assert [f.source_index for f in back.frames] == [f.source_index for f in kept.frames]


def test_looser_policy_keeps_more():
    seq, _ = planted_filter_fixture()
    kept, _ = filter_frames(seq, FilterPolicy(0.0, 0.0, 0.0))
    assert kept.T == 10


def test_policy_validation():
    with pytest.raises(ValueError):
        FilterPolicy(face_conf_min=1.5)

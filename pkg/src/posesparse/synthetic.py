"""A procedurally animated upper-body rig, used for fixtures, demos and benchmarks."""

from __future__ import annotations

import numpy as np

from .pose_io import DEFAULT_GROUP_COUNTS, GroupLayout, PoseSequence, make_sequence


def _rotate(points, angle, center):
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return (points - center) @ R.T + center


def rest_pose(width=512, height=512):
    """Keypoints of the default rig at rest, in the default group order."""
    sx, sy = width / 512.0, height / 512.0
    ang = np.linspace(0, 2 * np.pi, DEFAULT_GROUP_COUNTS["face"], endpoint=False)
    face = np.stack([256 + 30 * np.cos(ang), 140 + 38 * np.sin(ang)], axis=1)
    fan = np.linspace(-0.6, 0.6, DEFAULT_GROUP_COUNTS["left_hand"])
    left_hand = np.stack([190 - 18 * np.sin(fan), 370 + 18 * np.cos(fan)], axis=1)
    right_hand = np.stack([322 + 18 * np.sin(fan), 370 + 18 * np.cos(fan)], axis=1)
    left_arm = np.array([[170.0, 300.0], [190.0, 365.0]])
    right_arm = np.array([[342.0, 300.0], [322.0, 365.0]])
    body = np.array([[256.0, 215.0], [216.0, 400.0], [296.0, 400.0]])
    shoulders = np.array([[196.0, 220.0], [316.0, 220.0]])
    pts = np.concatenate([face, left_hand, right_hand, left_arm, right_arm, body, shoulders])
    return pts * np.array([sx, sy])


def talking_sequence(T=16, width=512, height=512, seed=0, jitter=1.0, sway=12.0, gesture=0.5, fps=25.0) -> PoseSequence:
    """A speaker swaying, nodding and gesturing with both arms.

    Motion is periodic with a few incommensurate frequencies so pose
    similarity between frames is non-trivial.  Confidences are high enough
    for every frame to pass the default filter policy.
    """
    rng = np.random.default_rng(seed)
    layout = GroupLayout.from_counts(DEFAULT_GROUP_COUNTS)
    base = rest_pose(width, height)
    face = layout.slice("face")
    larm = np.r_[layout.slice("left_arm"), layout.slice("left_hand")]
    rarm = np.r_[layout.slice("right_arm"), layout.slice("right_hand")]
    lsh = base[layout.slice("shoulders")][0]
    rsh = base[layout.slice("shoulders")][1]
    phase = rng.uniform(0, 2 * np.pi, size=4)

    frames = []
    for t in range(T):
        p = base.copy()
        p[face] = _rotate(p[face], 0.08 * np.sin(0.7 * t + phase[0]), np.array([256.0, 180.0]) * [width / 512, height / 512])
        p[larm] = _rotate(p[larm], gesture * np.sin(0.45 * t + phase[1]), lsh)
        p[rarm] = _rotate(p[rarm], -gesture * np.sin(0.31 * t + phase[2]), rsh)
        p += np.array([sway * np.sin(0.2 * t + phase[3]), 0.3 * sway * np.cos(0.13 * t)])
        p += rng.normal(0.0, jitter, size=p.shape)
        conf = rng.uniform(0.93, 1.0, size=len(p))
        frames.append(np.concatenate([p, conf[:, None]], axis=1))
    return make_sequence(np.array(frames), layout, fps=fps, image_size=(width, height))

import numpy as np
import pytest

from posesparse.errors import ConfigError, DuplicateMetricError, ParseError, ShapeError, UnknownMetricError
from posesparse.region_loss import (
    ImagePair,
    MetricRegistry,
    RegionLossConfig,
    RegionPixelMask,
    final_objective,
    load_raster,
    rasterize_labels,
    region_loss,
    save_raster,
)
from posesparse.regions import REGIONS, RegionLabel, TokenGrid


def _two_region_fixture():
    # 4x4 image, one channel; face = top-left 2x2, hands = bottom row
    x = np.zeros((4, 4, 1))
    x_hat = np.zeros((4, 4, 1))
    x_hat[0, 0, 0] = 1.0
    x_hat[1, 1, 0] = 2.0
    x_hat[3, :, 0] = [1.0, 1.0, 3.0, 0.0]
    x_hat[2, 3, 0] = 5.0  # background, must not count
    face = np.zeros((4, 4), dtype=bool)
    face[:2, :2] = True
    hands = np.zeros((4, 4), dtype=bool)
    hands[3] = True
    masks = {r: np.zeros((4, 4), dtype=bool) for r in REGIONS}
    masks[RegionLabel.FACE] = face
    masks[RegionLabel.HANDS] = hands
    return ImagePair(x, x_hat), RegionPixelMask(masks)


def test_hand_summed_weighted_mse():
    pair, masks = _two_region_fixture()
    weights = {r: 1.0 for r in REGIONS}
    weights[RegionLabel.FACE] = 2.0
    weights[RegionLabel.HANDS] = 0.5
    total, per = region_loss(pair, masks, RegionLossConfig(weights=weights))
    # face: (1 + 4) / 16 pixels; hands: (1 + 1 + 9) / 16 pixels
    assert per[RegionLabel.FACE] == pytest.approx(5 / 16)
    assert per[RegionLabel.HANDS] == pytest.approx(11 / 16)
    assert per[RegionLabel.ARMS] == 0.0
    assert total == pytest.approx(2.0 * 5 / 16 + 0.5 * 11 / 16)
    assert final_objective(1.0, total, 0.25) == pytest.approx(1.0 + 0.25 * total)


def test_normalized_terms_are_region_means():
    pair, masks = _two_region_fixture()
    _, per = region_loss(pair, masks, RegionLossConfig(normalize=True))
    assert per[RegionLabel.FACE] == pytest.approx(5 / 4)
    assert per[RegionLabel.HANDS] == pytest.approx(11 / 4)


def test_mae_override_changes_region():
    pair, masks = _two_region_fixture()
    metrics = {r: "mse" for r in REGIONS}
    metrics[RegionLabel.HANDS] = "mae"
    _, per = region_loss(pair, masks, RegionLossConfig(metrics=metrics))
    assert per[RegionLabel.HANDS] == pytest.approx(5 / 16)
    assert per[RegionLabel.FACE] == pytest.approx(5 / 16)


def test_custom_metric_registry():
    reg = MetricRegistry()
    reg.register("max_abs", lambda a, b: float(np.abs(a - b).max()))
    with pytest.raises(DuplicateMetricError):
        reg.register("mse", lambda a, b: 0.0)
    pair, masks = _two_region_fixture()
    metrics = {r: "max_abs" for r in REGIONS}
    _, per = region_loss(pair, masks, RegionLossConfig(metrics=metrics), reg)
    assert per[RegionLabel.HANDS] == 3.0
    with pytest.raises(UnknownMetricError):
        region_loss(pair, masks, RegionLossConfig(metrics={r: "nope" for r in REGIONS}))
    reg.freeze()
    with pytest.raises(RuntimeError):
        reg.register("other", lambda a, b: 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        RegionLossConfig(weights={r: 0.0 for r in REGIONS})
    with pytest.raises(ConfigError):
        RegionLossConfig(lambda_region=-1.0)


def test_shape_checks():
    with pytest.raises(ShapeError):
        ImagePair(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    pair, _ = _two_region_fixture()
    with pytest.raises(ShapeError):
        region_loss(pair, RegionPixelMask({r: np.zeros((3, 3), dtype=bool) for r in REGIONS}))


def test_rasterize_labels_expands_patches():
    grid = TokenGrid(2, 2, 3)
    masks = rasterize_labels(np.array([1, 0, 0, 2]), grid, (5, 6))
    face = masks.masks[RegionLabel.FACE]
    assert face.shape == (6, 5)
    assert face[:3, :3].all() and face.sum() == 9
    assert masks.masks[RegionLabel.HANDS][3:, 3:].all()
    assert masks.background().sum() == 30 - 9 - 6


def test_raster_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    save_raster(img, tmp_path / "x.im")
    np.testing.assert_array_equal(load_raster(tmp_path / "x.im"), img)
    (tmp_path / "bad.im").write_bytes(b"nope")
    with pytest.raises(ParseError):
        load_raster(tmp_path / "bad.im")

import numpy as np
import pytest

from bipose.errors import InvalidInputError, UndefinedMetricError
from bipose.evaluation import (
    COCO_FALLOFF,
    KeypointSet,
    average_precision,
    decode_batch,
    decode_heatmap,
    encode_heatmap,
    format_report,
    oks,
    pckh,
    read_predictions,
    write_predictions,
)


def peak_map(neighbour=None, value=0.5):
    h = np.zeros((7, 7))
    h[3, 3] = 1.0
    if neighbour:
        dy, dx = neighbour
        h[3 + dy, 3 + dx] = value
    return h


@pytest.mark.parametrize(
    "nb,shift",
    [((0, 1), (0.25, 0)), ((0, -1), (-0.25, 0)), ((1, 0), (0, 0.25)), ((-1, 0), (0, -0.25)), (None, (0, 0))],
)
def test_quarter_shift(nb, shift):
    xy, mx, det = decode_heatmap(peak_map(nb), stride=4)
    np.testing.assert_allclose(xy[0], (4 * (3 + shift[0]), 4 * (3 + shift[1])))
    assert det[0] and mx[0] == 1.0


def test_symmetric_neighbours_no_shift():
    h = peak_map((0, 1))
    h[3, 2] = 0.5
    xy, _, _ = decode_heatmap(h)
    np.testing.assert_allclose(xy[0], (3, 3))


def test_argmax_tie_first_in_row_major():
    h = np.zeros((4, 4))
    h[1, 2] = h[2, 1] = 1.0
    xy, _, _ = decode_heatmap(h)
    np.testing.assert_allclose(xy[0], (2, 1))


def test_undetected_when_max_not_positive():
    xy, mx, det = decode_heatmap(-np.ones((3, 3)))
    assert not det[0] and np.all(np.isnan(xy[0]))


def test_border_peak_only_shifts_along_interior_axes():
    # a shift needs both neighbours on that axis; edge cells keep their coordinate
    h = np.zeros((5, 5))
    h[0, 4] = 1.0
    h[1, 4] = 0.5
    xy, _, _ = decode_heatmap(h)
    np.testing.assert_allclose(xy[0], (4, 0))
    h = np.zeros((5, 5))
    h[2, 4] = 1.0
    h[3, 4] = 0.5
    xy, _, _ = decode_heatmap(h)
    np.testing.assert_allclose(xy[0], (4, 2.25))


def test_encode_peak_and_invisible():
    hm = encode_heatmap([[10.0, 21.0], [5.0, 5.0]], [1, 0], (16, 16), sigma=2, stride=4)
    assert hm[0].max() == 1.0
    assert np.unravel_index(hm[0].argmax(), hm[0].shape) == (5, 3)  # y=21/4 -> 5, x=10/4 -> 3 (half rounds up)
    assert not hm[1].any()


def test_encode_decode_roundtrip_on_grid():
    pts = np.array([[8.0, 12.0], [40.0, 20.0], [60.0, 4.0]])
    hm = encode_heatmap(pts, None, (16, 16), sigma=1.5, stride=4)
    xy, _ = decode_batch(hm[None], 4)
    np.testing.assert_allclose(xy[0], pts)


def test_oks_perfect_and_far():
    gt = KeypointSet(np.zeros((4, 2)), scale=10.0)
    assert oks(np.zeros((4, 2)), gt) == 1.0
    pred = np.array([[0, 0], [0, 0], [1e6, 0], [1e6, 0]], dtype=float)
    assert oks(pred, gt) == pytest.approx(0.5)


def test_oks_single_joint_formula():
    gt = KeypointSet([[0.0, 0.0]], scale=2.0, falloff=[0.5])
    d2 = 0.3**2 + 0.4**2
    assert oks([[0.3, 0.4]], gt) == pytest.approx(np.exp(-d2 / (2 * 4.0 * 0.25)))


def test_oks_ignores_invisible_and_undefined():
    gt = KeypointSet(np.zeros((2, 2)), visible=[1, 0], scale=1.0)
    assert oks([[0, 0], [100, 100]], gt) == 1.0
    with pytest.raises(UndefinedMetricError):
        oks(np.zeros((2, 2)), KeypointSet(np.zeros((2, 2)), visible=[0, 0]))


def test_coco_falloffs():
    assert len(COCO_FALLOFF) == 17
    assert COCO_FALLOFF[0] == pytest.approx(0.052)


def test_ap_fractions():
    r = average_precision([1.0, 0.8, 0.6, 0.4])
    # thresholds .5..95: 1.0 passes all 10, 0.8 passes 7, 0.6 passes 3, 0.4 none
    assert r["AP"] == pytest.approx((10 + 7 + 3) / 40)
    assert r["AP50"] == 0.75 and r["AP75"] == 0.5
    with pytest.raises(UndefinedMetricError):
        average_precision([])


def test_pckh():
    gt = np.zeros((1, 4, 2))
    pred = np.array([[[0, 0], [0, 3], [0, 6], [np.nan, np.nan]]], dtype=float)
    assert pckh(pred, gt, 10.0, 0.5) == 0.5
    assert pckh(pred, gt, 10.0, 0.5, visible=[[1, 1, 0, 0]]) == 1.0
    with pytest.raises(UndefinedMetricError):
        pckh(pred, gt, 10.0, visible=np.zeros((1, 4)))
    with pytest.raises(InvalidInputError):
        pckh(pred, gt, 0.0)


def test_prediction_file_roundtrip(tmp_path):
    xy = np.arange(12, dtype=float).reshape(2, 3, 2)
    sc = np.linspace(0, 1, 6).reshape(2, 3)
    write_predictions(tmp_path / "p.jsonl", xy, sc, image_ids=[7, 9])
    ids, xy2, sc2 = read_predictions(tmp_path / "p.jsonl")
    assert ids == [7, 9]
    np.testing.assert_allclose(xy2, xy)
    np.testing.assert_allclose(sc2, sc)


def test_report_order():
    txt = format_report({"ops": 2.5, "pck@0.5": 0.9, "protocol": "x"})
    assert txt.splitlines() == ["pck@0.5 = 0.9", "ops = 2.5", "protocol = x"]

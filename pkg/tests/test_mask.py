import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sofa.layout import Image, Segment, Text, build_layout, image_token_pairs, parse_layout
from sofa.mask import (
    BidirectionalImages, Causal, IsolatedImages, LayerSchedule, Soft, build_mask, mask_from_csv,
    mask_to_csv, mask_to_log_bias, schedule_masks, validate_mask,
)
from oracles import distinct_layouts, pair_rule_mask

TWO = build_layout([Image(1), Image(1)])
VARIANTS = [Causal(), IsolatedImages(), BidirectionalImages(), Soft(0.3)]


def test_fig3_two_images():
    assert build_mask(TWO, Causal()).tolist() == [[1, 0], [1, 1]]
    assert build_mask(TWO, BidirectionalImages()).tolist() == [[1, 1], [1, 1]]
    assert build_mask(TWO, IsolatedImages()).tolist() == [[1, 0], [0, 1]]


def test_soft_endpoints_and_midpoint():
    assert np.array_equal(build_mask(TWO, Soft(0.0)), build_mask(TWO, Causal()))
    assert np.array_equal(build_mask(TWO, Soft(1.0)), build_mask(TWO, BidirectionalImages()))
    assert build_mask(TWO, Soft(0.5)).tolist() == [[1, 0.5], [1, 1]]


def test_soft_quarter_against_oracle():
    segs = [("T", 2), ("I", 2), ("T", 1), ("I", 2)]
    m = build_mask(parse_layout("T2 I2 T1 I2"), Soft(0.25))
    assert np.array_equal(m, pair_rule_mask(segs, "soft", 0.25))
    assert np.count_nonzero(m == 0.25) == 4
    assert set(zip(*np.nonzero(m == 0.25))) == {(2, 5), (2, 6), (3, 5), (3, 6)}


@pytest.mark.parametrize("sigma", [-0.1, 1.5, float("nan")])
def test_soft_rejects_bad_sigma(sigma):
    with pytest.raises(ValueError):
        Soft(sigma)


def test_schedule_every_two():
    lay = parse_layout("T2 I2 I2")
    ms = schedule_masks(lay, 0.5, 4, "every_2")
    causal, soft = build_mask(lay, Causal()), build_mask(lay, Soft(0.5))
    assert [np.array_equal(m, soft) for m in ms] == [False, True, False, True]
    assert np.array_equal(ms[0], causal) and np.array_equal(ms[2], causal)


def test_schedule_modes():
    assert LayerSchedule.from_mode(4, "all").soft_layers == {0, 1, 2, 3}
    assert LayerSchedule.from_mode(4, "every_2@0").soft_layers == {0, 2}
    assert LayerSchedule.from_mode(5, "every_2").soft_layers == {1, 3}
    assert LayerSchedule.from_mode(4, [0, 3]).soft_layers == {0, 3}
    assert LayerSchedule.from_mode(4, "explicit:1,2").soft_layers == {1, 2}
    with pytest.raises(ValueError):
        LayerSchedule.from_mode(4, [4])
    with pytest.raises(ValueError):
        LayerSchedule.from_mode(0, "all")


def test_schedule_sigma_zero_is_causal_everywhere():
    lay = parse_layout("I3 T1 I2 I1")
    for mode in ("all", "every_2", "every_2@0"):
        for m in schedule_masks(lay, 0.0, 4, mode):
            assert np.array_equal(m, build_mask(lay, Causal()))


def test_log_bias():
    out = mask_to_log_bias(np.array([[1.0, 0.0], [0.5, 1.0]]))
    assert out[0, 0] == 0.0
    assert out[0, 1] == -np.inf
    assert abs(out[1, 0] - (-0.6931471805599453)) < 1e-9


def test_csv_roundtrip():
    m = build_mask(parse_layout("T2 I2 T1 I2"), Soft(0.25))
    text = mask_to_csv(m)
    assert text.startswith("L=7\n")
    assert np.array_equal(mask_from_csv(text), m)


def test_oracle_small_layouts_sample():
    layouts = distinct_layouts(6)
    assert len(layouts) > 100
    for segs in layouts:
        lay = build_layout([Segment(k, n) for k, n in segs])
        for name, v in [("causal", Causal()), ("isolated", IsolatedImages()),
                        ("bidirectional", BidirectionalImages()), ("soft", Soft(0.4))]:
            assert np.array_equal(build_mask(lay, v), pair_rule_mask(segs, name, 0.4)), (segs, name)


layouts_st = st.lists(st.tuples(st.sampled_from("TI"), st.integers(1, 3)), min_size=1, max_size=6).map(
    lambda segs: build_layout([Segment(k, n) for k, n in segs]))
sigma_st = st.floats(0.0, 1.0, allow_nan=False)


@given(layouts_st, sigma_st)
def test_affine_in_sigma(lay, sigma):
    s0, s1 = build_mask(lay, Soft(0.0)), build_mask(lay, Soft(1.0))
    assert np.array_equal(build_mask(lay, Soft(sigma)), (1 - sigma) * s0 + sigma * s1)


@given(layouts_st, sigma_st)
def test_support_restriction(lay, sigma):
    diff = build_mask(lay, Soft(sigma)) != build_mask(lay, Causal())
    allowed = {(q, k) for q, k in image_token_pairs(lay) if k > q}
    assert set(zip(*map(list, np.nonzero(diff)))) <= allowed


@given(layouts_st, sigma_st)
def test_text_rows_and_diagonal(lay, sigma):
    masks = [build_mask(lay, v) for v in (Causal(), IsolatedImages(), BidirectionalImages(), Soft(sigma))]
    for t in range(lay.L):
        if not lay.is_image(t):
            assert all(np.array_equal(masks[0][t], m[t]) for m in masks)
    for m in masks:
        assert np.all(np.diag(m) == 1)
        validate_mask(m, lay)


def test_validate_rejects():
    lay = parse_layout("I1 I1")
    with pytest.raises(ValueError):
        validate_mask(np.array([[0.0, 0.0], [1.0, 1.0]]), lay)
    with pytest.raises(ValueError):
        validate_mask(np.array([[1.0, 0.0], [1.2, 1.0]]), lay)
    lay2 = parse_layout("T1 I1")
    with pytest.raises(ValueError):
        validate_mask(np.array([[1.0, 1.0], [1.0, 1.0]]), lay2)

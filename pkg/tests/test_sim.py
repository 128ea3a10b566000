import json
import math

import numpy as np
import pytest

from pushcraft.sim import (
    BoxState,
    DatasetFormatError,
    PushAction,
    PushDataset,
    PushRecord,
    SimParams,
    clamp_actions,
    collect_dataset,
    contact_frame,
    lesion,
    load_dataset,
    random_push,
    save_dataset,
    step,
    wrap_angle,
)

PARAMS = SimParams(contact_noise_std=0.0)


def test_wrap_angle_range_and_stability():
    for theta in [-10.0, -math.pi, -1.0, 0.0, 1.0, math.pi, 4.0, 123.456]:
        w = wrap_angle(theta)
        assert -math.pi < w <= math.pi
        assert wrap_angle(w) == w  # bit-stable once wrapped
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


def test_box_state_wraps_and_rejects_nonfinite():
    s = BoxState(0.0, 0.0, 3 * math.pi)
    assert s.theta == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        BoxState(float("nan"), 0.0, 0.0)


def test_push_action_normalizes_direction():
    act = PushAction(3.0, 4.0, 0.5)
    assert math.hypot(act.px, act.py) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        PushAction(0.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        PushAction(1.0, 0.0, 1.5)


def test_push_action_from_raw_clamps():
    act = PushAction.from_raw([0.0, 0.0, 7.0])
    assert (act.px, act.py) == (0.0, 1.0)
    assert act.a == 1.0
    raw = np.array([[3.0, 4.0, -2.0], [0.0, 0.0, 0.3]])
    clamped = clamp_actions(raw)
    assert np.allclose(np.hypot(clamped[:, 0], clamped[:, 1]), 1.0)
    assert clamped[0, 2] == 0.0 and clamped[1, 2] == 0.3


def test_push_through_center_of_rotation_translates_only():
    # contact at the midpoint of the -y edge, pushing +y through the centre
    state = BoxState(0.0, 0.0, 0.0)
    nxt = step(state, PushAction(0.0, 1.0, 0.0), PARAMS, rng=None)
    assert nxt.x == pytest.approx(0.0, abs=1e-15)
    assert nxt.y == pytest.approx(PARAMS.push_distance, abs=1e-15)
    assert nxt.theta == pytest.approx(0.0, abs=1e-15)


def test_offset_push_rotates_counterclockwise():
    # contact left of centre on the bottom edge (left half lies near a=1)
    a_left = 1.0 - 0.5 * PARAMS.box_half_width / PARAMS.perimeter
    cx, cy = contact_frame(a_left, PARAMS)[0]
    assert cx < 0 and cy == -PARAMS.box_half_height
    nxt = step(BoxState(0.0, 0.0, 0.0), PushAction(0.0, 1.0, a_left), PARAMS, rng=None)
    assert nxt.theta > 0


def test_object_frame_action_rotates_with_state():
    d = PARAMS.push_distance
    nxt = step(BoxState(1.0, 2.0, math.pi / 2), PushAction(0.0, 1.0, 0.0), PARAMS, rng=None)
    assert nxt.x == pytest.approx(1.0 - d, abs=1e-12)
    assert nxt.y == pytest.approx(2.0, abs=1e-12)


def test_step_frame_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        state = BoxState(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi))
        action = random_push(PARAMS, rng)
        shift = rng.uniform(-1, 1, 2)
        rot = rng.uniform(-math.pi, math.pi)
        nxt = step(state, action, PARAMS, rng=None)

        c, s = math.cos(rot), math.sin(rot)
        moved = BoxState(
            c * state.x - s * state.y + shift[0],
            s * state.x + c * state.y + shift[1],
            state.theta + rot,
        )
        nxt_moved = step(moved, action, PARAMS, rng=None)
        assert nxt_moved.x == pytest.approx(c * nxt.x - s * nxt.y + shift[0], abs=1e-12)
        assert nxt_moved.y == pytest.approx(s * nxt.x + c * nxt.y + shift[1], abs=1e-12)
        assert math.cos(nxt_moved.theta) == pytest.approx(math.cos(nxt.theta + rot), abs=1e-12)
        assert math.sin(nxt_moved.theta) == pytest.approx(math.sin(nxt.theta + rot), abs=1e-12)


def test_zero_rotation_line_through_center():
    # aim every contact point's push straight at the box centre
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = float(rng.random())
        (cx, cy), _ = contact_frame(a, PARAMS)
        norm = math.hypot(cx, cy)
        action = PushAction(-cx / norm, -cy / norm, a)
        nxt = step(BoxState(0, 0, 0), action, PARAMS, rng=None)
        assert nxt.theta == pytest.approx(0.0, abs=1e-12)


def test_step_deterministic_without_noise():
    state = BoxState(0.2, -0.1, 0.3)
    action = PushAction(0.6, 0.8, 0.77)
    a = step(state, action, PARAMS, rng=None)
    b = step(state, action, PARAMS, rng=None)
    assert (a.x, a.y, a.theta) == (b.x, b.y, b.theta)


def test_random_push_unit_norm_and_inward():
    rng = np.random.default_rng(5)
    for _ in range(500):
        act = random_push(PARAMS, rng)
        assert abs(math.hypot(act.px, act.py) - 1.0) < 1e-12
        _, normal = contact_frame(act.a, PARAMS)
        assert act.px * normal[0] + act.py * normal[1] >= -1e-12


def test_random_push_contact_uniform():
    rng = np.random.default_rng(6)
    samples = np.sort([random_push(PARAMS, rng).a for _ in range(10_000)])
    grid = (np.arange(1, len(samples) + 1)) / len(samples)
    ks = max(np.abs(grid - samples).max(), np.abs(samples - (grid - 1 / len(samples))).max())
    assert ks < 0.05


@pytest.mark.parametrize("n", [326, 261])
def test_collect_dataset_counts(n):
    ds = collect_dataset(n, PARAMS, reset_period=40, rng=np.random.default_rng(7))
    assert len(ds) == n


def test_collect_dataset_reset_every_push():
    ds = collect_dataset(25, PARAMS, reset_period=1, rng=np.random.default_rng(8))
    center = PARAMS.workspace_center()
    for r in ds:
        assert (r.state.x, r.state.y, r.state.theta) == (center.x, center.y, center.theta)


def test_collect_dataset_stays_in_bounds_and_reproducible():
    params = SimParams(contact_noise_std=0.002, workspace_bounds=(-0.4, 0.4, -0.4, 0.4))
    ds1 = collect_dataset(300, params, reset_period=15, rng=np.random.default_rng(9))
    ds2 = collect_dataset(300, params, reset_period=15, rng=np.random.default_rng(9))
    for r1, r2 in zip(ds1, ds2):
        assert r1.next_state == r2.next_state
        assert params.in_bounds(r1.next_state)


def test_lesion_noop_and_total():
    ds = collect_dataset(50, PARAMS, reset_period=10, rng=np.random.default_rng(10))
    untouched = lesion(ds, (0.9, 0.99, 0.9, 0.99))
    assert len(untouched) == 50
    with pytest.warns(UserWarning):
        emptied = lesion(ds, (-1.0, 1.0, -1.0, 1.0))
    assert len(emptied) == 0
    assert "lesion_warning" in emptied.meta


def test_lesion_removes_only_inside_records():
    rng = np.random.default_rng(11)
    records = []
    for _ in range(100):
        s = BoxState(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0)
        records.append(PushRecord(s, PushAction(1.0, 0.0, 0.5), s))
    ds = PushDataset(records, params=PARAMS)
    region = (-0.5, 0.5, -0.5, 0.5)
    inside = sum(1 for r in records if -0.5 <= r.state.x <= 0.5 and -0.5 <= r.state.y <= 0.5)
    out = lesion(ds, region)
    assert len(out) == 100 - inside
    assert out.meta["lesion_removed"] == inside
    for r in out:
        assert not (-0.5 <= r.state.x <= 0.5 and -0.5 <= r.state.y <= 0.5)
    survivors = [r for r in records if not (-0.5 <= r.state.x <= 0.5 and -0.5 <= r.state.y <= 0.5)]
    assert out.records == survivors  # order preserved


def test_dataset_roundtrip_bit_exact(tmp_path):
    params = SimParams(contact_noise_std=0.002)
    ds = collect_dataset(60, params, reset_period=12, rng=np.random.default_rng(12), frame_mode="world")
    p1 = tmp_path / "d1.jsonl"
    p2 = tmp_path / "d2.jsonl"
    save_dataset(ds, p1)
    loaded = load_dataset(p1)
    save_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.frame_mode == "world"
    assert loaded.params == params
    assert loaded.records == ds.records


def test_dataset_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    header = {"format": "pushcraft-dataset", "version": 1, "frame_mode": "object", "params": None, "meta": {}}
    path.write_text(json.dumps(header) + "\n{not json}\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_dataset(path)

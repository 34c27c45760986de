import numpy as np
import pytest

from s2gs.errors import ContractError
from s2gs.memory import (
    MemoryBank,
    affinity,
    associate,
    ema_update,
    export_tracks_csv,
    tracking_metrics,
)


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def bank_with(embeds, alpha=0.2, sim_threshold=0.5, max_age=10):
    bank = MemoryBank(alpha=alpha, sim_threshold=sim_threshold, max_age=max_age)
    bank.step(np.stack([unit(e) for e in embeds]), [1] * len(embeds), frame=0)
    return bank


# -- affinity -------------------------------------------------------------------


def test_affinity_identical_is_one():
    bank = bank_with([[1.0, 0.0]])
    a = affinity(np.array([[1.0, 0.0]], dtype=np.float32), bank)
    assert a[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_affinity_orthogonal_is_zero():
    bank = bank_with([[1.0, 0.0]])
    a = affinity(np.array([[0.0, 1.0]], dtype=np.float32), bank)
    assert a[0, 0] == pytest.approx(0.0, abs=1e-7)


def test_affinity_dot_product():
    bank = bank_with([[1.0, 0.0]])
    a = affinity(np.array([[0.6, 0.8]], dtype=np.float32), bank)
    assert a[0, 0] == pytest.approx(0.6, abs=1e-6)


def test_affinity_requires_unit_rows():
    bank = bank_with([[1.0, 0.0]])
    with pytest.raises(ContractError):
        affinity(np.array([[2.0, 0.0]], dtype=np.float32), bank)


# -- association ------------------------------------------------------------------


def test_associate_empty_bank_all_new():
    matches, news, stale = associate(np.zeros((3, 0)), 0.5)
    assert matches == [] and news == [0, 1, 2] and stale == []


def test_associate_diagonal_dominant():
    aff = np.full((3, 3), 0.1)
    np.fill_diagonal(aff, 0.9)
    matches, news, stale = associate(aff, 0.5)
    assert matches == [(0, 0), (1, 1), (2, 2)]
    assert news == [] and stale == []


def test_associate_below_threshold_all_new():
    aff = np.full((2, 2), 0.1)
    np.fill_diagonal(aff, 0.3)
    matches, news, stale = associate(aff, 0.5)
    assert matches == []
    assert news == [0, 1]
    assert stale == [0, 1]


# -- EMA update -------------------------------------------------------------------


def test_ema_alpha_one_takes_new():
    z, flag = ema_update(unit([1, 0]), unit([0, 1]), 1.0)
    np.testing.assert_allclose(z, [0, 1], atol=1e-7)
    assert not flag


def test_ema_alpha_zero_keeps_old():
    z, flag = ema_update(unit([1, 0]), unit([0, 1]), 0.0)
    np.testing.assert_allclose(z, [1, 0], atol=1e-7)
    assert not flag


def test_ema_half_blend_renormalized():
    z, flag = ema_update(unit([1, 0]), unit([0, 1]), 0.5)
    np.testing.assert_allclose(z, [0.70711, 0.70711], atol=1e-5)
    assert not flag


def test_ema_degenerate_sum_keeps_old():
    z, flag = ema_update(unit([1, 0]), unit([-1, 0]), 0.5)
    np.testing.assert_allclose(z, [1, 0], atol=1e-7)
    assert flag


def test_ema_unit_norm_after_many_random_updates():
    rng = np.random.default_rng(0)
    z = unit(rng.normal(size=8))
    for _ in range(10_000):
        z, _ = ema_update(z, unit(rng.normal(size=8)), 0.2)
    assert abs(np.linalg.norm(z) - 1.0) <= 1e-6


# -- bank lifecycle ----------------------------------------------------------------


def test_repeated_detection_keeps_one_track():
    bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=10)
    e = unit([0.3, 0.4, 0.5])
    ids = [bank.step(e[None], [2], frame=t)[0] for t in range(5)]
    assert len(set(ids)) == 1
    assert len(bank) == 1
    assert bank.prototypes[0].hits == 5


def test_alternating_orthogonal_two_tracks():
    bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=10)
    e1, e2 = unit([1, 0]), unit([0, 1])
    ids = []
    for t in range(6):
        ids.append(bank.step((e1 if t % 2 == 0 else e2)[None], [1], frame=t)[0])
    assert ids[0] == ids[2] == ids[4]
    assert ids[1] == ids[3] == ids[5]
    assert ids[0] != ids[1]
    assert len(bank) == 2


def test_empty_frame_ages_bank():
    bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=2)
    bank.step(unit([1, 0])[None], [1], frame=0)
    for t in range(1, 4):
        out = bank.step(np.zeros((0, 2), dtype=np.float32), [], frame=t)
        assert len(out) == 0
    assert len(bank) == 0  # retired after max_age unseen frames


def test_track_ids_never_reused():
    # threshold no embedding can reach: every detection is a fresh spawn event
    bank = MemoryBank(alpha=0.2, sim_threshold=0.999999, max_age=0)
    seen = set()
    rng = np.random.default_rng(1)
    for t in range(20):
        ids = bank.step(unit(rng.normal(size=4))[None], [1], frame=2 * t)
        assert ids[0] not in seen
        seen.add(ids[0])


def test_reassociation_within_max_age():
    bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=10)
    e = unit([0.5, 0.5, 0.7])
    first = bank.step(e[None], [3], frame=0)[0]
    for t in range(1, 4):  # three hidden frames
        bank.step(np.zeros((0, 3), dtype=np.float32), [], frame=t)
    again = bank.step(e[None], [3], frame=4)[0]
    assert again == first


def test_new_id_after_expiry():
    bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=10)
    e = unit([0.5, 0.5, 0.7])
    first = bank.step(e[None], [3], frame=0)[0]
    for t in range(1, 16):  # hidden longer than max_age
        bank.step(np.zeros((0, 3), dtype=np.float32), [], frame=t)
    again = bank.step(e[None], [3], frame=16)[0]
    assert again != first


def test_step_causality_under_future_changes():
    rng = np.random.default_rng(2)
    frames = [unit(rng.normal(size=4))[None] for _ in range(6)]

    def run(det_list):
        bank = MemoryBank(alpha=0.2, sim_threshold=0.5, max_age=10)
        return [tuple(bank.step(d, [1], frame=t)) for t, d in enumerate(det_list)]

    base = run(frames)
    altered = list(frames)
    altered[4] = unit(rng.normal(size=4))[None]
    changed = run(altered)
    assert base[:4] == changed[:4]


# -- tracking metrics ----------------------------------------------------------------


def square_mask(size, y, x, half, value):
    m = np.zeros((size, size), dtype=np.uint32)
    m[y - half : y + half, x - half : x + half] = value
    return m


def test_perfect_tracking_metrics():
    gt = [square_mask(16, 8, 8, 3, 1) for _ in range(4)]
    report = tracking_metrics(gt, gt)
    assert report.t_miou == pytest.approx(100.0)
    assert report.t_sr == pytest.approx(100.0)
    assert report.id_switches == 0


def test_half_coverage_boundary_not_success():
    gt = [square_mask(16, 8, 8, 3, 1) for _ in range(4)]
    pred = [square_mask(16, 8, 8, 3, 7) if t < 2 else np.zeros((16, 16), np.uint32)
            for t in range(4)]
    report = tracking_metrics(pred, gt)
    assert report.per_instance[1] == pytest.approx(0.5)
    assert report.t_sr == 0.0  # strictly greater than 0.5 required


def test_identity_swap_two_switches_and_third_iou():
    # two equal-size objects; predictions swap ids at mid-sequence
    a = square_mask(16, 4, 4, 2, 1) + square_mask(16, 12, 12, 2, 2)
    gt = [a.copy() for _ in range(4)]
    swapped = square_mask(16, 4, 4, 2, 2) + square_mask(16, 12, 12, 2, 1)
    pred = [a.copy(), a.copy(), swapped.copy(), swapped.copy()]
    report = tracking_metrics(pred, gt)
    assert report.id_switches == 2
    assert report.per_instance[1] == pytest.approx(1.0 / 3.0)
    assert report.per_instance[2] == pytest.approx(1.0 / 3.0)


def test_metrics_require_ground_truth():
    with pytest.raises(ContractError):
        tracking_metrics([np.zeros((4, 4), np.uint32)], [np.zeros((4, 4), np.uint32)])


def test_track_csv_export(tmp_path):
    path = tmp_path / "tracks.csv"
    export_tracks_csv(path, [(0, 1, 3, 25, 4.5, 7.25)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "frame,track_id,class,area,cx,cy"
    assert lines[1] == "0,1,3,25,4.50,7.25"

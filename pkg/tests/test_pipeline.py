import hashlib
import os

import numpy as np
import pytest

from s2gs import cli
from s2gs.config import Config, load_config, save_config
from s2gs.errors import CausalityError, ConfigError
from s2gs.pipeline import (
    Models,
    OfflineBaseline,
    affine_fit_r2,
    loglog_slope,
    new_state,
    run_benchmark,
    stream_step,
    write_bench_csv,
    write_bench_svg,
)
from s2gs.world import DatasetReader, SceneSpec, export_dataset, generate

CFG = Config(pixel_stride=2)


@pytest.fixture(scope="module")
def models():
    return Models.fresh(CFG, seed=0)


@pytest.fixture(scope="module")
def bundles():
    return generate(SceneSpec(seed=21), 6)


def run_stream(cfg, models, bs, mode="oracle", gt_stamp=True):
    state = new_state(cfg, models)
    outs = []
    for b in bs:
        state, out = stream_step(cfg, models, state, b, mode=mode, gt_stamp=gt_stamp)
        outs.append(out)
    return state, outs


def test_state_counter_advances(models, bundles):
    state = new_state(CFG, models)
    for b in bundles[:3]:
        prev = state.t
        state, _ = stream_step(CFG, models, state, b)
        assert state.t == prev + 1


def test_out_of_order_bundle_rejected(models, bundles):
    state = new_state(CFG, models)
    state, _ = stream_step(CFG, models, state, bundles[0])
    with pytest.raises(CausalityError):
        stream_step(CFG, models, state, bundles[2])


def test_scene_growth_bounded(models, bundles):
    cfg = Config(pixel_stride=2, scene_budget=3000)
    state, _ = run_stream(cfg, Models.fresh(cfg, seed=0), bundles)
    per_frame = (cfg.image_size // cfg.pixel_stride) ** 2
    assert len(state.scene) <= min(cfg.scene_budget, len(bundles) * per_frame)


def test_streaming_deterministic_given_state(models, bundles):
    _, outs_a = run_stream(CFG, models, bundles)
    _, outs_b = run_stream(CFG, models, bundles)
    for a, b in zip(outs_a, outs_b):
        assert np.array_equal(a.sem_map, b.sem_map)
        assert np.array_equal(a.inst_map, b.inst_map)
        assert np.array_equal(a.features, b.features)


def test_offline_baseline_matches_streaming(models, bundles):
    state, stream_outs = run_stream(CFG, models, bundles)
    base = OfflineBaseline(CFG, models)
    for b, s_out in zip(bundles, stream_outs):
        o_out = base.step(b, mode="oracle", gt_stamp=True)
        dev = np.abs(o_out.features - s_out.features).max()
        mag = max(np.abs(s_out.features).max(), 1e-9)
        assert dev / mag <= 1e-5
        assert np.array_equal(o_out.sem_map, s_out.sem_map)
        assert np.array_equal(o_out.inst_map, s_out.inst_map)
    assert len(base.scene) == len(state.scene)
    assert base.retained_nbytes() > 0


def test_offline_baseline_student_mode_matches(models, bundles):
    # student geometry derives everything from features; check depth agreement
    _, stream_outs = run_stream(CFG, models, bundles[:4], mode="student", gt_stamp=False)
    base = OfflineBaseline(CFG, models)
    for b, s_out in zip(bundles[:4], stream_outs):
        o_out = base.step(b, mode="student")
        np.testing.assert_allclose(o_out.depth, s_out.depth, rtol=1e-4, atol=1e-5)


def test_end_to_end_causality_hashes(models, bundles):
    perturbed = [b for b in bundles]
    b3 = bundles[3]
    rgb = b3.rgb.copy()
    rgb[10:20, 10:20] = 1.0 - rgb[10:20, 10:20]
    from s2gs.world import FrameBundle

    perturbed[3] = FrameBundle(index=b3.index, rgb=rgb, depth=b3.depth, valid=b3.valid,
                               cam=b3.cam, instances=b3.instances, semantics=b3.semantics)

    def hashes(bs):
        _, outs = run_stream(CFG, models, bs)
        return [
            hashlib.sha256(
                o.sem_map.tobytes() + o.inst_map.tobytes() + o.features.tobytes()
            ).hexdigest()
            for o in outs
        ]

    a = hashes(bundles)
    b = hashes(perturbed)
    assert a[:3] == b[:3]
    assert a[3] != b[3]


def test_state_bytes_affine_in_frames(models):
    bs = generate(SceneSpec(seed=22), 12)
    cfg = Config(pixel_stride=4)
    state = new_state(cfg, Models.fresh(cfg, seed=0))
    cache_bytes = []
    for b in bs:
        state, _ = stream_step(cfg, models, state, b)
        cache_bytes.append(state.cache.nbytes())
    ts = np.arange(1, len(bs) + 1)
    a, c, r2 = affine_fit_r2(ts, cache_bytes)
    assert r2 > 0.999
    pred = a * ts + c
    assert (np.abs(pred - cache_bytes) / np.maximum(cache_bytes, 1) <= 0.10).all()


def test_benchmark_mac_timer_deterministic(models):
    bs = generate(SceneSpec(seed=23, n_objects=2), 5)

    def run():
        return run_benchmark(CFG, models, bs, modes=("streaming", "offline"),
                             repeats=1, timer="mac")

    a = run()
    b = run()
    for res_a, res_b in zip(a, b):
        costs_a = [r.cost for r in res_a.records]
        costs_b = [r.cost for r in res_b.records]
        assert costs_a == costs_b
    stream = a[0]
    assert [r.t for r in stream.records] == list(range(1, 6))
    assert all(r.cost > 0 for r in stream.records)


def test_benchmark_memory_cap_truncates(models, tmp_path):
    bs = generate(SceneSpec(seed=23, n_objects=2), 5)
    cap = 2 * bs[0].nbytes() + 10
    results = run_benchmark(CFG, models, bs, modes=("offline",), repeats=1,
                            timer="mac", memory_cap=cap)
    res = results[0]
    assert res.truncated_at == 3
    assert len(res.records) == 2
    path = tmp_path / "bench_offline.csv"
    write_bench_csv(path, res, "mac")
    assert "OOM-equivalent" in path.read_text()


def test_bench_csv_and_svg_outputs(models, tmp_path):
    bs = generate(SceneSpec(seed=23, n_objects=2), 4)
    results = run_benchmark(CFG, models, bs, modes=("streaming",), repeats=1, timer="mac")
    csv_path = tmp_path / "bench_streaming.csv"
    write_bench_csv(csv_path, results[0], "mac")
    rows = csv_path.read_text().strip().splitlines()
    assert rows[0].startswith("t,cost_macs")
    assert len(rows) == 5
    svg_path = tmp_path / "bench.svg"
    write_bench_svg(svg_path, results, "mac")
    text = svg_path.read_text()
    assert text.startswith("<svg") and "polyline" in text


def test_loglog_slope_of_powers():
    ts = np.arange(1, 65)
    assert loglog_slope(ts, ts**2) == pytest.approx(2.0, abs=1e-6)
    assert loglog_slope(ts, 5.0 * ts) == pytest.approx(1.0, abs=1e-6)


# -- config ---------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = Config(ema_alpha=0.35, queries=8)
    path = tmp_path / "run.cfg"
    save_config(path, cfg)
    loaded = load_config(path)
    assert loaded.ema_alpha == 0.35
    assert loaded.queries == 8


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("no_such_key=1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_validates_divisibility():
    with pytest.raises(ConfigError):
        Config(image_size=60, patch_size=8).validate()


# -- CLI ------------------------------------------------------------------------


def _dataset(tmp_path, seed=31, frames=4):
    out = tmp_path / f"ds{seed}"
    rc = cli.main(["generate", "--seed", str(seed), "--frames", str(frames),
                   "--out", str(out)])
    assert rc == 0
    return out


def test_cli_generate_and_reader(tmp_path):
    ds = _dataset(tmp_path)
    reader = DatasetReader(ds)
    assert reader.total == 4
    assert (ds / "cameras.csv").exists()
    assert (ds / "spec.txt").exists()


def test_cli_generate_deterministic(tmp_path):
    a = _dataset(tmp_path / "a")
    b = _dataset(tmp_path / "b")
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_cli_stream_reads_each_frame_once(tmp_path, monkeypatch):
    ds = _dataset(tmp_path)
    out = tmp_path / "run"
    reads = []
    orig = DatasetReader.read_frame

    def counting(self, t):
        reads.append(t)
        return orig(self, t)

    monkeypatch.setattr(DatasetReader, "read_frame", counting)
    rc = cli.main(["stream", "--in", str(ds), "--mode", "oracle", "--out", str(out)])
    assert rc == 0
    assert sorted(reads) == [0, 1, 2, 3]
    assert (out / "scene.s2gs").exists()
    assert (out / "tracks.csv").exists()


def test_cli_stream_deterministic(tmp_path):
    ds = _dataset(tmp_path)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert cli.main(["stream", "--in", str(ds), "--out", str(out),
                         "--render-every", "2"]) == 0
        outs.append(out)
    for name in sorted(os.listdir(outs[0])):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_cli_eval_writes_report(tmp_path):
    ds = _dataset(tmp_path)
    run = tmp_path / "run"
    assert cli.main(["stream", "--in", str(ds), "--stamp", "gt", "--out", str(run)]) == 0
    report = tmp_path / "report.csv"
    assert cli.main(["eval", "--pred", str(run), "--gt", str(ds),
                     "--out", str(report)]) == 0
    text = report.read_text()
    assert text.startswith("metric,value")
    assert "t_sr" in text and "source_psnr" in text


def test_cli_bench_mac_deterministic(tmp_path):
    outs = []
    for name in ("b1", "b2"):
        out = tmp_path / name
        rc = cli.main(["bench", "--frames", "4", "--seed", "3", "--timer", "mac",
                       "--repeats", "1", "--out", str(out)])
        assert rc == 0
        outs.append(out)
    for name in sorted(os.listdir(outs[0])):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_cli_exit_codes(tmp_path):
    assert cli.main(["--set", "bogus=1", "generate", "--seed", "1", "--frames", "1",
                     "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["stream", "--in", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "y")]) == 4


def test_cli_train_and_retrieve_roundtrip(tmp_path):
    ds = _dataset(tmp_path, seed=33, frames=3)
    ck_dec = tmp_path / "dec"
    rc = cli.main(["train", "semantic", "--data", str(ds), "--steps", "3",
                   "--out", str(ck_dec), "--seed", "1"])
    assert rc == 0
    assert any(f.endswith(".s2tn") for f in os.listdir(ck_dec))
    ck_proj = tmp_path / "proj"
    rc = cli.main(["train", "projector", "--data", str(ds), "--steps", "3",
                   "--out", str(ck_proj), "--decoder", str(ck_dec)])
    assert rc == 0
    mask_out = tmp_path / "mask.pgm"
    rc = cli.main(["retrieve", "--label", "crate", "--frame", "1", "--data", str(ds),
                   "--decoder", str(ck_dec), "--projector", str(ck_proj),
                   "--vocab", str(ck_proj / "vocabulary.tsv"), "--out", str(mask_out)])
    assert rc == 0
    assert mask_out.exists()
    assert (tmp_path / "mask_scores.csv").exists()

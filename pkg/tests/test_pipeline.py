import csv
import json
import math

import numpy as np
import pytest

from splatmark import io
from splatmark.cli import main
from splatmark.geometry import GeometricTransform, PerturbationBounds, predict
from splatmark.pipeline import (
    CSV_COLUMNS,
    NumericalError,
    RemovalConfig,
    SweepReport,
    TrialConfig,
    decorrelated_distance,
    fit_removal_scene,
    measure_phase_shift,
    rerender_removal,
    run_detection_sweep,
    run_removal_pipeline,
)
from splatmark.report import emit_removal, emit_report, render_svg, write_sweep_csv
from splatmark.spectral import make_ring_mask, sample_key

SMALL = dict(latent_width=32, latent_height=32, r_min=2.0, r_max=8.0, trials=12)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- config


def test_config_round_trip_and_validation():
    cfg = TrialConfig.from_dict({"trials": 5, "translation_px": [0, 3]})
    assert cfg.translation_px == (0.0, 3.0)
    assert TrialConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrialConfig.from_dict({"trails": 5})
    with pytest.raises(ValueError):
        TrialConfig(trials=0)
    with pytest.raises(ValueError):
        RemovalConfig(latent_channels=4)


def test_cells_are_translation_major():
    cfg = TrialConfig(translation_px=(0, 4), rotation_deg=(0, 2))
    assert cfg.cells() == [(0.0, 0.0), (0.0, 2.0), (4.0, 0.0), (4.0, 2.0)]
    assert cfg.offsets(4.0) == (4.0, 0.0)
    dx, dy = TrialConfig(translation_direction_deg=90).offsets(4.0)
    assert dx == 0.0 and dy == pytest.approx(4.0)


# ---- sweep


@pytest.fixture(scope="module")
def small_sweep():
    cfg = TrialConfig(**SMALL, translation_px=(0, 2, 4), rotation_deg=(0,))
    return run_detection_sweep(cfg)


def test_sweep_is_thread_count_invariant(tmp_path, small_sweep):
    blobs = [write_sweep_csv(tmp_path / "s1.csv", small_sweep).read_bytes()]
    for threads in (4, 8):
        rep = run_detection_sweep(small_sweep.config, threads=threads)
        blobs.append(write_sweep_csv(tmp_path / f"s{threads}.csv", rep).read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]


def test_cells_do_not_depend_on_grid_membership(small_sweep):
    alone = run_detection_sweep(TrialConfig(**SMALL, translation_px=(0,), rotation_deg=(0,)))
    assert alone.rows[0]["mean_d"] == small_sweep.rows[0]["mean_d"]


def test_empty_grid_writes_header_only(tmp_path):
    rep = run_detection_sweep(TrialConfig(**SMALL, translation_px=()))
    paths = emit_report(rep, tmp_path)
    assert paths["csv"].read_text() == ",".join(CSV_COLUMNS) + "\n"
    assert "png" not in paths
    assert "<polyline" not in paths["svg"].read_text()


def test_single_cell_csv_has_two_lines(tmp_path):
    rep = run_detection_sweep(TrialConfig(**SMALL, translation_px=(0,)))
    text = write_sweep_csv(tmp_path / "one.csv", rep).read_text()
    assert len(text.splitlines()) == 2


def test_svg_has_one_polyline_per_series(small_sweep, tmp_path):
    svg = render_svg(small_sweep)
    # mean d, TPR and the prediction curve
    assert svg.count("<polyline") == 3
    two_rot = SweepReport(small_sweep.config, small_sweep.rows + [dict(r, rotation_deg=1.0) for r in small_sweep.rows])
    assert render_svg(two_rot).count("<polyline") == 5
    paths = emit_report(small_sweep, tmp_path)
    assert paths["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_prediction_columns_recomputable_from_csv(small_sweep, tmp_path):
    rows = read_rows(write_sweep_csv(tmp_path / "s.csv", small_sweep))
    for r in rows:
        p = predict(float(r["translation_px"]), float(r["rotation_deg"]), float(r["r_max"]),
                    int(r["stride"]), int(r["latent_width"]))
        assert float(r["phase_range_rad"]) == p.phase_range
        assert float(r["alpha_rad"]) == p.alpha
        assert float(r["expected_attenuation"]) == p.attenuation
        assert float(r["coord_drift"]) == p.drift


def test_sweep_rows_are_sane(small_sweep):
    r0 = small_sweep.rows[0]
    assert r0["corr_ratio"] == 1.0 and r0["tpr_at_fpr"] == 1.0 and r0["bit_accuracy"] == 1.0
    assert r0["aligned_psnr_db"] == 99.0 and (r0["aligned_shift_y"], r0["aligned_shift_x"]) == (0, 0)
    r2 = small_sweep.rows[1]
    assert (r2["aligned_shift_y"], r2["aligned_shift_x"]) == (0, 2)
    assert r2["aligned_psnr_db"] > r2["raw_psnr_db"]


@pytest.fixture(scope="module")
def translation_axis():
    return run_detection_sweep(TrialConfig(trials=200, translation_px=(0, 2, 4, 8, 16), seed=1)).rows


@pytest.mark.slow
def test_detection_degrades_with_translation(translation_axis):
    d = [r["mean_d"] for r in translation_axis]
    assert all(a <= b for a, b in zip(d, d[1:]))
    tpr = [r["tpr_at_fpr"] for r in translation_axis]
    assert all(a >= b for a, b in zip(tpr, tpr[1:]))
    assert translation_axis[0]["tpr_at_fpr"] == 1.0


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the decode/encode round trip attenuates the ring, leaving d near 0.23")
def test_zero_attack_distance_near_zero(translation_axis):
    assert translation_axis[0]["mean_d"] < 0.05


def test_non_finite_scores_raise_numerical_error(monkeypatch):
    import splatmark.pipeline as pl

    monkeypatch.setattr(pl, "detection_distance", lambda *a, **k: math.nan)
    with pytest.raises(NumericalError) as err:
        run_detection_sweep(TrialConfig(**SMALL, translation_px=(0,)))
    assert err.value.diagnostics["cell"] == 0


def test_phase_measurement_tracks_the_ramp():
    res = measure_phase_shift(TrialConfig(), 2.0)
    assert res["mae"] < 0.01
    cfg = TrialConfig()
    assert res["measured"].shape == (int(cfg.mask().canonical.sum()),)


def test_decorrelated_distance_is_seeded():
    mask = make_ring_mask(32, 32, 2, 8)
    key = sample_key(mask, 0)
    a = decorrelated_distance(mask, key, 20, seed=3)
    assert a == decorrelated_distance(mask, key, 20, seed=3)
    assert 0.7 < a < 1.3


# ---- removal

FAST_REMOVAL = RemovalConfig(iterations=60)


@pytest.fixture(scope="module")
def removal_fit():
    return fit_removal_scene(RemovalConfig(), seed=0)


def test_zero_bounds_reproduce_the_control(removal_fit):
    rep = rerender_removal(removal_fit, GeometricTransform())
    assert rep.d_post == rep.d_control
    assert abs(rep.d_post - rep.d_pre) <= 2 * abs(rep.d_control - rep.d_pre)
    assert np.array_equal(rep.images["output"], rep.images["control"])
    assert rep.uncovered == 0


def test_translation_recovers_the_shift(removal_fit):
    rep = rerender_removal(removal_fit, GeometricTransform(8.0, 0.0))
    assert rep.recovered_shift == (0, 8)
    assert rep.aligned_psnr_db - rep.raw_psnr_db >= 5.0


def test_removal_pipeline_is_deterministic():
    a = run_removal_pipeline(FAST_REMOVAL, seed=5)
    b = run_removal_pipeline(FAST_REMOVAL, seed=5)
    assert a.summary() == b.summary()
    assert not a.transform.is_identity


def test_removal_from_an_image(tmp_path):
    img = np.random.default_rng(0).random((3, 128, 128))
    rep = run_removal_pipeline(RemovalConfig(iterations=5), image=img, transform=GeometricTransform(2.0, 0.0))
    paths = emit_removal(rep, tmp_path)
    summary = json.loads(paths["json"].read_text())
    assert summary["iterations"] == 5
    assert len(read_rows(paths["loss"])) == 5
    assert io.read_png(paths["output"]).shape == (3, 128, 128)
    with pytest.raises(ValueError):
        run_removal_pipeline(RemovalConfig(iterations=5), image=np.zeros((128, 128)))


def test_removal_bounds_are_the_config():
    assert RemovalConfig().bounds() == PerturbationBounds(10.0, 5.0, 0.97, 1.03)


# ---- file formats


def test_latent_round_trip(tmp_path):
    z = np.random.default_rng(0).standard_normal((4, 8, 6)).astype(np.float32)
    p = io.write_latent(tmp_path / "z.gml", z)
    assert p.read_bytes()[:4] == b"GML1"
    assert np.array_equal(io.read_latent(p).values, z)
    (tmp_path / "bad.gml").write_bytes(b"GML1" + bytes(12) + bytes(3))
    with pytest.raises(ValueError):
        io.read_array(tmp_path / "bad.gml")


def test_key_round_trip(tmp_path):
    mask = make_ring_mask(32, 32, 2, 8, 1)
    key = sample_key(mask, 9)
    m2, k2 = io.read_key(io.write_key(tmp_path / "k.json", mask, key))
    assert m2.channel == 1 and np.array_equal(k2.values, key.values)
    data = json.loads((tmp_path / "k.json").read_text())
    data["coords"][0] = [0, 0]
    (tmp_path / "k.json").write_text(json.dumps(data))
    with pytest.raises(ValueError):
        io.read_key(tmp_path / "k.json")


def test_png_and_mask_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (3, 9, 7)) / 255.0
    assert np.allclose(io.read_png(io.write_png(tmp_path / "a.png", img)), img)
    m = np.random.default_rng(2).random((9, 7)) > 0.5
    assert np.array_equal(io.read_mask_png(io.write_mask_png(tmp_path / "m.png", m)), m)
    t = GeometricTransform(1.0, -2.0, 3.0, 1.01)
    assert io.read_transform(io.write_transform(tmp_path / "t.json", t)) == t


# ---- command line


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_embed_attack_detect(tmp_path, capsys):
    z = np.random.default_rng(0).standard_normal((4, 64, 64))
    io.write_latent(tmp_path / "z.gml", z)
    code, _, _ = run_cli(capsys, "embed", str(tmp_path / "z.gml"), "--out", str(tmp_path), "--key-seed", "3")
    assert code == 0
    code, out, _ = run_cli(capsys, "detect", str(tmp_path / "watermarked_latent.gml"),
                           "--key", str(tmp_path / "key.json"))
    assert code == 0 and json.loads(out)["distance"] < 1e-6
    code, _, _ = run_cli(capsys, "--out", str(tmp_path / "att"), "attack", str(tmp_path / "watermarked_image.gml"),
                         "--translation-x-px", "32")
    assert code == 0
    att = next((tmp_path / "att").glob("*.gml"))
    code, out, _ = run_cli(capsys, "detect", str(att), "--key", str(tmp_path / "key.json"))
    assert code == 0 and json.loads(out)["detected"] is False


def test_cli_sweep_writes_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(SMALL, trials=4, translation_px=[0, 4])))
    code, _, _ = run_cli(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path), "--threads", "2", "--seed", "1")
    assert code == 0
    assert {"sweep.csv", "sweep.svg", "sweep.png", "sweep_config.json"} <= {p.name for p in tmp_path.iterdir()}
    assert json.loads((tmp_path / "sweep_config.json").read_text())["seed"] == 1


def test_cli_predict(capsys):
    code, out, _ = run_cli(capsys, "predict", "--translation-px", "8")
    assert code == 0 and json.loads(out)["phase_range"] == math.pi


@pytest.mark.parametrize("argv", [[], ["bogus"], ["predict"], ["--threads", "0", "predict", "--translation-px", "1"],
                                  ["attack", "missing.png"], ["attack", "x.png", "--rotation-deg", "90"]])
def test_cli_usage_errors_exit_one(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    if "x.png" in argv:
        io.write_png(tmp_path / "x.png", np.zeros((3, 16, 16)))
    code, _, err = run_cli(capsys, *argv)
    assert code == 1 and err


def test_cli_unknown_config_key_exits_one(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"nonsense": 1}')
    assert run_cli(capsys, "sweep", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path))[0] == 1


def test_cli_numerical_failure_exits_two(tmp_path, capsys):
    io.write_latent(tmp_path / "nan.gml", np.full((3, 32, 32), np.nan))
    code, _, err = run_cli(capsys, "fit", str(tmp_path / "nan.gml"), "--n-patch", "4", "--iterations", "3",
                           "--out", str(tmp_path))
    assert code == 2 and "numerical" in err


def test_cli_fit_writes_scene(tmp_path, capsys):
    io.write_png(tmp_path / "t.png", np.full((3, 32, 32), 0.5))
    code, out, _ = run_cli(capsys, "fit", str(tmp_path / "t.png"), "--n-patch", "16", "--iterations", "100",
                           "--lr", "0.01", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "scene.gms").exists()
    assert json.loads(out)["psnr_db"] > 30

import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from granatt import Tensor, __version__, cli, verify
from granatt.granularity import depth_masks
from granatt.imageio import load_image, save_map


@pytest.fixture(autouse=True)
def no_thread_env(monkeypatch):
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)


def save_rgb(arr, path):
    from PIL import Image

    Image.fromarray((arr.transpose(1, 2, 0) * 255).round().astype(np.uint8), "RGB").save(path)


def two_spike_depth(size=12):
    d = np.full((size, size), 50 / 255)
    d[:, size // 2:] = 200 / 255
    return d


def rgbd_set(root, n=2, size=20, seed=0):
    rng = np.random.default_rng(seed)
    rd, dd = root / "rgb", root / "depth"
    rd.mkdir()
    dd.mkdir()
    for i in range(n):
        save_rgb(rng.random((3, size, size)), rd / f"s{i}.png")
        save_map(rng.random((size, size)), dd / f"s{i}.png")
    return rd, dd


# -- general -------------------------------------------------------------------


def test_version_and_bad_usage(capsys):
    assert cli.main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert cli.main([]) == 1
    assert cli.main(["masks"]) == 1


@pytest.mark.parametrize("flag,env,want", [(3, None, 3), (None, "4", 4), (None, None, 1)])
def test_thread_resolution(monkeypatch, flag, env, want):
    if env is not None:
        monkeypatch.setenv(cli.THREADS_ENV, env)
    assert cli.resolve_threads(flag) == want


@pytest.mark.parametrize("flag,env", [(0, None), (None, "many"), (None, "-2")])
def test_thread_resolution_errors(monkeypatch, flag, env):
    if env is not None:
        monkeypatch.setenv(cli.THREADS_ENV, env)
    with pytest.raises(cli.UsageError):
        cli.resolve_threads(flag)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "granatt", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout


# -- masks ---------------------------------------------------------------------


def test_masks_constant_depth(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    save_map(np.full((8, 8), 0.4), src / "c.png")
    out = tmp_path / "out"
    assert cli.main(["masks", str(src), str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["c_m1.png", "c_masks.json", "run.json"]
    assert np.all(load_image(out / "c_m1.png") == 1)
    side = json.loads((out / "c_masks.json").read_text())
    assert side["effective_T"] == 0 and side["thresholds"] == []
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["T"] == 2 and run["config"]["tool_version"] == __version__


def test_masks_two_spikes_match_library(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    d = two_spike_depth()
    save_map(d, src / "s.pgm")
    out = tmp_path / "out"
    assert cli.main(["masks", str(src), str(out), "--T", "1"]) == 0
    want, ts = depth_masks(load_image(src / "s.pgm")[0], 1)
    assert ts.thresholds == (50,)
    for i, m in enumerate(want, start=1):
        np.testing.assert_array_equal(load_image(out / f"s_m{i}.png")[0], m)


def test_masks_empty_dir_warns(tmp_path, caplog):
    src = tmp_path / "d"
    src.mkdir()
    assert cli.main(["masks", str(src), str(tmp_path / "o")]) == 0
    assert "no depth images" in caplog.text
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["run.json"]


def test_masks_partial_and_fatal(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    save_map(np.zeros((4, 4)), src / "good.png")
    (src / "bad.png").write_bytes(b"garbage")
    out = tmp_path / "o"
    assert cli.main(["masks", str(src), str(out)]) == 2
    run = json.loads((out / "run.json").read_text())
    assert [s["name"] for s in run["skipped"]] == ["bad"] and list(run["images"]) == ["good"]
    assert cli.main(["masks", str(tmp_path / "missing"), str(out)]) == 1
    assert cli.main(["masks", str(src), str(out), "--T", "5"]) == 1


def test_masks_thread_count_does_not_change_results(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    rng = np.random.default_rng(1)
    for i in range(4):
        save_map(rng.random((10, 10)), src / f"x{i}.png")
    assert cli.main(["masks", str(src), str(tmp_path / "a")]) == 0
    assert cli.main(["masks", str(src), str(tmp_path / "b"), "--threads", "3"]) == 0
    for p in sorted((tmp_path / "a").glob("*.png")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


# -- forward -------------------------------------------------------------------


def test_forward_deterministic_in_unit_range(tmp_path):
    rd, dd = rgbd_set(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["forward", str(rd), str(dd), str(a), "--size", "32"]) == 0
    assert cli.main(["forward", str(rd), str(dd), str(b), "--size", "32", "--threads", "2"]) == 0
    for stem in ("s0", "s1"):
        assert (a / f"{stem}.png").read_bytes() == (b / f"{stem}.png").read_bytes()
        img = load_image(a / f"{stem}.png")
        assert img.shape == (1, 20, 20) and img.min() >= 0 and img.max() <= 1
    run = json.loads((a / "run.json").read_text())
    assert run["seed"] == 42 and run["network"]["input_size"] == [32, 32]


def test_forward_all_levels_writes_fifteen(tmp_path):
    rd, dd = rgbd_set(tmp_path, n=1)
    out = tmp_path / "o"
    assert cli.main(["forward", str(rd), str(dd), str(out), "--size", "32", "--all-levels"]) == 0
    maps = sorted(p.name for p in out.glob("*.png"))
    assert len(maps) == 15
    assert "s0_S1.png" in maps and "s0_R5.png" in maps


def test_forward_checkpoint_and_corruption(tmp_path):
    from granatt.network import Network, NetworkConfig

    rd, dd = rgbd_set(tmp_path, n=1)
    ck = tmp_path / "net.bin"
    Network(NetworkConfig(input_size=(32, 32), seed=42)).save(ck)
    assert cli.main(["forward", str(rd), str(dd), str(tmp_path / "c"), "--checkpoint", str(ck)]) == 0
    assert cli.main(["forward", str(rd), str(dd), str(tmp_path / "s"), "--size", "32"]) == 0
    assert (tmp_path / "c" / "s0.png").read_bytes() == (tmp_path / "s" / "s0.png").read_bytes()
    ck.write_bytes(b"GRANATT1" + b"\xff" * 20)
    assert cli.main(["forward", str(rd), str(dd), str(tmp_path / "x"), "--checkpoint", str(ck)]) == 1


def test_forward_unpaired_files_warned(tmp_path, caplog):
    rd, dd = rgbd_set(tmp_path, n=1)
    save_map(np.zeros((20, 20)), dd / "lonely.png")
    out = tmp_path / "o"
    assert cli.main(["forward", str(rd), str(dd), str(out), "--size", "16"]) == 0
    assert "lonely" in caplog.text
    assert json.loads((out / "run.json").read_text())["skipped"] == ["lonely"]


# -- eval ----------------------------------------------------------------------


def gt_set(root, n=3, seed=2):
    rng = np.random.default_rng(seed)
    gd = root / "gt"
    gd.mkdir()
    for i in range(n):
        g = np.zeros((12, 12))
        g[rng.integers(0, 5):rng.integers(7, 12), rng.integers(0, 5):rng.integers(7, 12)] = 1
        save_map(g, gd / f"g{i}.png")
    return gd


def test_eval_identical_sets_json(tmp_path, capsys):
    gd = gt_set(tmp_path)
    out = tmp_path / "r.json"
    assert cli.main(["eval", str(gd), str(gd), "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    schema = json.loads(resources.files("granatt").joinpath("schemas/report.schema.json").read_text())
    jsonschema.validate(doc, schema)
    m = doc["mean"]
    assert m["mae"] == 0 and abs(m["max_f"] - 1) < 1e-9 and abs(m["s_measure"] - 1) < 1e-9 and abs(m["max_e"] - 1) < 1e-9
    assert doc["config"]["report"] == "json" and doc["config"]["tool_version"] == __version__
    assert "mae=0.0000" in capsys.readouterr().out


def test_eval_csv_and_pr(tmp_path):
    gd = gt_set(tmp_path)
    out = tmp_path / "r.csv"
    assert cli.main(["eval", str(gd), str(gd), "--report", "csv", "-o", str(out), "--pr", str(tmp_path / "pr")]) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "name,mae,max_f,s_measure,max_e" and lines[-1].startswith("__mean__")
    assert (tmp_path / "pr" / "mean_pr.csv").exists()


def test_eval_without_pairs_is_fatal(tmp_path):
    gd = gt_set(tmp_path)
    other = tmp_path / "other"
    other.mkdir()
    save_map(np.zeros((4, 4)), other / "nomatch.png")
    assert cli.main(["eval", str(other), str(gd), "-o", str(tmp_path / "r.json")]) == 1
    assert cli.main(["eval", str(tmp_path / "nope"), str(gd)]) == 1


# -- gradcheck -----------------------------------------------------------------


def test_gradcheck_single_scope(capsys):
    assert cli.main(["gradcheck", "--scope", "gba"]) == 0
    out = capsys.readouterr().out
    assert "local_eca" in out and "conv2d" not in out


def test_gradcheck_unknown_scope():
    assert cli.main(["gradcheck", "--scope", "everything"]) == 1


def test_gradcheck_planted_fault_exits_three(monkeypatch, capsys):
    import granatt.gba as gba_mod

    def broken_sigmoid(x):
        s = 1.0 / (1.0 + np.exp(-x.data))
        return Tensor.from_op(s, (x,), lambda g: (2.0 * g * s * (1 - s),))

    monkeypatch.setattr(gba_mod, "sigmoid", broken_sigmoid)
    assert cli.main(["gradcheck", "--scope", "gba"]) == 3
    assert "gba/" in capsys.readouterr().err


def test_gradcheck_report_names_failures(capsys):
    rows = [{"scope": "s", "name": "good", "error": 1e-9, "tol": 1e-4, "ok": True},
            {"scope": "s", "name": "bad", "error": 0.3, "tol": 1e-4, "ok": False}]
    assert cli.report_gradchecks(rows) == 3
    assert "s/bad" in capsys.readouterr().err
    assert cli.report_gradchecks(rows[:1]) == 0


def test_gradcheck_scope_list_matches_registry():
    assert set(verify.scopes()) >= {"tensor-core", "gba", "fusion", "objective", "network"}


# -- noise ---------------------------------------------------------------------


def test_noise_preset_and_determinism(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    rng = np.random.default_rng(3)
    for i in range(2):
        save_map(rng.uniform(0.2, 0.8, (24, 24)), src / f"n{i}.png")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["noise", str(src), str(a), "--preset", "des", "--seed", "5"]) == 0
    assert cli.main(["noise", str(src), str(b), "--rmse", "0.261", "--seed", "5"]) == 0
    for i in range(2):
        assert (a / f"n{i}.png").read_bytes() == (b / f"n{i}.png").read_bytes()
        spec = json.loads((a / f"n{i}_noise.json").read_text())
        assert abs(spec["achieved_rmse"] - 0.261) <= 0.05 * 0.261
    run = json.loads((a / "run.json").read_text())
    assert run["seed"] == 5 and run["target_rmse"] == 0.261 and run["summary"]["mean_rmse"] is not None


def test_noise_unreachable_image_skipped(tmp_path):
    src = tmp_path / "d"
    src.mkdir()
    save_map(np.zeros((16, 16)), src / "dark.png")
    save_map(np.full((16, 16), 0.5), src / "mid.png")
    out = tmp_path / "o"
    # mid-grey tops out at RMSE 0.5, black reaches about 0.7
    assert cli.main(["noise", str(src), str(out), "--rmse", "0.6"]) == 2
    run = json.loads((out / "run.json").read_text())
    assert [s["name"] for s in run["skipped"]] == ["mid"]
    assert (out / "dark.png").exists() and not (out / "mid.png").exists()


@pytest.mark.parametrize("flags", [["--rmse", "2.0"], ["--rmse", "0"], []])
def test_noise_bad_targets_rejected(tmp_path, flags):
    src = tmp_path / "d"
    src.mkdir()
    assert cli.main(["noise", str(src), str(tmp_path / "o"), *flags]) == 1

"""End-to-end command-line behavior, run in process through main()."""

import json

import numpy as np
import pytest

from patchmem.cli import main
from patchmem.grids import load_container


def echoed_json(capsys):
    """Parse the effective-config JSON block that every command prints."""
    out = capsys.readouterr().out
    lines = out.splitlines()
    start = lines.index("{")
    end = lines.index("}", start)
    return json.loads("\n".join(lines[start:end + 1])), out


def make_phantom(tmp_path, capsys=None, **extra_flags):
    tmp_path.mkdir(parents=True, exist_ok=True)
    vol = tmp_path / "vol.cgrid"
    truth = tmp_path / "truth.cgrid"
    argv = ["phantom", "--out-volume", str(vol), "--out-truth", str(truth),
            "--z", "3", "--t", "2", "--height", "48", "--width", "48",
            "--lv-radius", "8", "--myo-thickness", "3", "--rv-offset", "12",
            "--noise", "0.01", "--distractor", "off"]
    for flag, value in extra_flags.items():
        argv += [f"--{flag}", str(value)]
    assert main(argv) == 0
    if capsys is not None:
        capsys.readouterr()
    return vol, truth


class TestPhantomCommand:
    def test_writes_both_containers(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path)
        payload, out = echoed_json(capsys)
        assert payload["command"] == "phantom"
        assert payload["spec"]["z_count"] == 3
        assert "phantom written: Z=3 T=2 H=48 W=48" in out
        assert load_container(vol).intensities.shape == (3, 2, 48, 48)
        assert load_container(truth).labels.shape == (3, 2, 48, 48)

    def test_byte_deterministic(self, tmp_path, capsys):
        a_vol, a_truth = make_phantom(tmp_path / "a", capsys)
        b_vol, b_truth = make_phantom(tmp_path / "b", capsys)
        assert a_vol.read_bytes() == b_vol.read_bytes()
        assert a_truth.read_bytes() == b_truth.read_bytes()

    def test_flags_override_spec_file(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"z_count": 3, "t_count": 2,
                                    "height": 48, "width": 48,
                                    "lv_radius_px": 8.0,
                                    "myo_thickness_px": 3.0,
                                    "rv_offset_px": 12.0,
                                    "distractor": False, "seed": 1}))
        rc = main(["phantom", "--out-volume", str(tmp_path / "v.cgrid"),
                   "--out-truth", str(tmp_path / "t.cgrid"),
                   "--spec-json", str(spec), "--seed", "9"])
        assert rc == 0
        payload, _ = echoed_json(capsys)
        assert payload["spec"]["seed"] == 9
        assert payload["spec"]["height"] == 48

    def test_unknown_spec_key(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"zz_count": 5}))
        rc = main(["phantom", "--out-volume", str(tmp_path / "v.cgrid"),
                   "--out-truth", str(tmp_path / "t.cgrid"),
                   "--spec-json", str(spec)])
        assert rc == 1

    def test_geometry_that_does_not_fit(self, tmp_path):
        rc = main(["phantom", "--out-volume", str(tmp_path / "v.cgrid"),
                   "--out-truth", str(tmp_path / "t.cgrid"),
                   "--height", "48", "--width", "48", "--lv-radius", "40"])
        assert rc == 1

    def test_missing_spec_file(self, tmp_path):
        rc = main(["phantom", "--out-volume", str(tmp_path / "v.cgrid"),
                   "--out-truth", str(tmp_path / "t.cgrid"),
                   "--spec-json", str(tmp_path / "nope.json")])
        assert rc == 1

    def test_unknown_flag_exits_one(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["phantom", "--out-volume", "v", "--out-truth", "t",
                  "--does-not-exist", "1"])
        assert err.value.code == 1


PROPAGATE_FLAGS = ["--scales", "4", "--patch", "6", "--k", "2",
                   "--working-side", "96"]


def save_seed(tmp_path, truth_path):
    truth = load_container(truth_path)
    seed = tmp_path / "seed.cgrid"
    from patchmem.grids import save_container
    save_container(truth.labels[truth.z_count // 2, 0], seed)
    return seed


class TestPropagateCommand:
    def test_full_run_with_provenance(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        masks = tmp_path / "masks.cgrid"
        prov = tmp_path / "prov.json"
        rc = main(["propagate", "--volume", str(vol), "--seed-mask", str(seed),
                   "--out-masks", str(masks), "--out-provenance", str(prov),
                   "--threads", "1", *PROPAGATE_FLAGS])
        assert rc == 0
        payload, out = echoed_json(capsys)
        assert payload["config"]["z0"] == 1
        assert "segmented 6 frames (3 slices x 2 phases)" in out
        got = load_container(masks)
        assert got.labels.shape == (3, 2, 48, 48)
        prov_payload = json.loads(prov.read_text())
        assert prov_payload["frames"]["1,0"] == []
        assert prov_payload["work_dims"] == [96, 96]
        assert len(prov_payload["order"]) == 6

    def test_echoed_config_reproduces_masks(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        masks_a = tmp_path / "a.cgrid"
        rc = main(["propagate", "--volume", str(vol), "--seed-mask", str(seed),
                   "--out-masks", str(masks_a), *PROPAGATE_FLAGS])
        assert rc == 0
        payload, _ = echoed_json(capsys)
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps(payload["config"]))
        masks_b = tmp_path / "b.cgrid"
        rc = main(["propagate", "--volume", str(vol), "--seed-mask", str(seed),
                   "--out-masks", str(masks_b), "--config", str(cfg_file)])
        assert rc == 0
        assert masks_a.read_bytes() == masks_b.read_bytes()

    def test_wrong_volume_container(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        rc = main(["propagate", "--volume", str(truth),
                   "--seed-mask", str(seed),
                   "--out-masks", str(tmp_path / "m.cgrid"), *PROPAGATE_FLAGS])
        assert rc == 2

    def test_truncated_volume(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        clipped = tmp_path / "clipped.cgrid"
        clipped.write_bytes(vol.read_bytes()[:200])
        rc = main(["propagate", "--volume", str(clipped),
                   "--seed-mask", str(seed),
                   "--out-masks", str(tmp_path / "m.cgrid"), *PROPAGATE_FLAGS])
        assert rc == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"patch_size": 6}))
        rc = main(["propagate", "--volume", str(vol), "--seed-mask", str(seed),
                   "--out-masks", str(tmp_path / "m.cgrid"),
                   "--config", str(cfg_file)])
        assert rc == 1

    def test_inadmissible_working_side(self, tmp_path, capsys):
        vol, truth = make_phantom(tmp_path, capsys)
        seed = save_seed(tmp_path, truth)
        rc = main(["propagate", "--volume", str(vol), "--seed-mask", str(seed),
                   "--out-masks", str(tmp_path / "m.cgrid"),
                   "--scales", "4", "--working-side", "100"])
        assert rc == 1


class TestEvalCommand:
    def test_reports_sixteen_rows(self, tmp_path, capsys):
        _, truth = make_phantom(tmp_path, capsys)
        out_csv = tmp_path / "metrics.csv"
        rc = main(["eval", "--pred", str(truth), "--truth", str(truth),
                   "--out-csv", str(out_csv), "--threads", "1",
                   "--method", "dense"])
        assert rc == 0
        _, out = echoed_json(capsys)
        assert out.count("1.0000") >= 16
        lines = out_csv.read_text().strip().splitlines()
        assert len(lines) == 17
        assert lines[1].startswith("dense,basal,LV,1.000000")

    def test_mismatched_volumes(self, tmp_path, capsys):
        _, truth_a = make_phantom(tmp_path / "a", capsys)
        _, truth_b = make_phantom(tmp_path / "b", capsys, z="5")
        rc = main(["eval", "--pred", str(truth_a), "--truth", str(truth_b),
                   "--threads", "1"])
        assert rc == 2

    def test_threads_env_fallback(self, tmp_path, capsys, monkeypatch):
        _, truth = make_phantom(tmp_path, capsys)
        monkeypatch.setenv("CSTM_THREADS", "2")
        rc = main(["eval", "--pred", str(truth), "--truth", str(truth)])
        assert rc == 0
        payload, _ = echoed_json(capsys)
        assert payload["threads"] == 2
        monkeypatch.setenv("CSTM_THREADS", "junk")
        assert main(["eval", "--pred", str(truth), "--truth", str(truth)]) == 1


class TestBenchCommand:
    def test_tiny_grid(self, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps(
            [{"t": 1, "h": 12, "w": 12, "patch": 6, "k": 2},
             {"t": 1, "h": 12, "w": 12, "patch": 4, "k": 1,
              "scales": [3, 4]}]))
        out_csv = tmp_path / "bench.csv"
        rc = main(["bench", "--grid-json", str(grid), "--reps", "1",
                   "--out-csv", str(out_csv)])
        assert rc == 0
        _, out = echoed_json(capsys)
        assert out.count("[ok]") == 3
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].startswith("T,H,W,P,K,scale,predicted_patch_pairs")
        assert len(lines) == 4

    def test_bad_grid_entry(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([{"t": 1, "h": 12}]))
        assert main(["bench", "--grid-json", str(grid)]) == 1


class TestVerifyCommand:
    def test_selected_suites_pass(self, capsys):
        rc = main(["verify", "--suite", "topk", "--suite", "fold-unfold"])
        assert rc == 0
        _, out = echoed_json(capsys)
        assert "PASS  topk" in out
        assert "PASS  fold-unfold" in out
        assert "all suites passed" in out

    def test_injected_fault_is_caught_then_cleared(self, capsys):
        rc = main(["verify", "--suite", "oracle-equivalence",
                   "--inject-fault", "flip-similarity"])
        assert rc == 3
        _, out = echoed_json(capsys)
        assert "FAIL  oracle-equivalence" in out
        # the fault must not leak into later runs
        assert main(["verify", "--suite", "oracle-equivalence"]) == 0

    def test_unknown_suite_exits_one(self):
        with pytest.raises(SystemExit) as err:
            main(["verify", "--suite", "nonsense"])
        assert err.value.code == 1

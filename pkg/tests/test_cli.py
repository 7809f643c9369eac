"""End-to-end command-line flows, in process via main(argv)."""

import numpy as np
import pytest

from netreg.cli import ABLATE_CONFIGS, main, resolve_config
from netreg.volio import read_volume, write_volume

EXTENT = 16


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """phantom -> register -> eval -> overlay on one small case."""
    root = tmp_path_factory.mktemp("chain")
    case, reg, ev, ov = (str(root / d) for d in ("case", "reg", "ev", "ov"))
    assert main(["phantom", "--set", f"out={case}",
                 "--set", f"phantom_extent={EXTENT}", "--set", "phantom_seed=1"]) == 0
    assert main(["register", "--set", f"out={reg}",
                 "--set", f"fixed={case}/fixed.nvol", "--set", f"moving={case}/moving.nvol",
                 "--set", "net_depth=2", "--set", "sched_iters_per_level=2,2"]) == 0
    assert main(["eval", "--set", f"out={ev}", "--set", f"field={reg}/displacement.nvol",
                 "--set", f"case_dir={case}"]) == 0
    assert main(["overlay", "--set", f"out={ov}", "--set", f"fixed={case}/fixed.nvol",
                 "--set", f"warped={reg}/warped.nvol"]) == 0
    return root


class TestChain:
    def test_phantom_outputs(self, chain):
        case = chain / "case"
        for name in ("fixed.nvol", "moving.nvol", "phi_gt.nvol", "phi_reg.nvol",
                     "mask_fixed_organ_0.nvol", "mask_moving_lesion_0.nvol", "config.txt"):
            assert (case / name).exists(), name
        arr, _ = read_volume(case / "fixed.nvol")
        assert arr.shape == (EXTENT,) * 3

    def test_register_outputs(self, chain):
        reg = chain / "reg"
        disp, _ = read_volume(reg / "displacement.nvol")
        assert disp.shape == (3, EXTENT, EXTENT, EXTENT)
        warped, _ = read_volume(reg / "warped.nvol")
        assert warped.shape == (EXTENT,) * 3
        lines = (reg / "loss_trace.csv").read_text().splitlines()
        assert lines[0] == "iteration,level,total,ncc,smooth,diffeo"
        assert len(lines) == 1 + 4  # 2 + 2 iterations
        rep = (reg / "report.csv").read_text().splitlines()
        assert rep[0].startswith("dice_organs_mean,")

    def test_eval_report(self, chain):
        lines = (chain / "ev" / "report.csv").read_text().splitlines()
        assert len(lines) == 2
        cells = lines[1].split(",")
        assert len(cells) == len(lines[0].split(","))
        assert 0.0 <= float(cells[0]) <= 1.0

    def test_overlay_ppm(self, chain):
        raw = (chain / "ov" / "overlay_axial.ppm").read_bytes()
        header = f"P6\n{EXTENT} {EXTENT}\n255\n".encode()
        assert raw.startswith(header)
        assert len(raw) == len(header) + EXTENT * EXTENT * 3
        for name in ("overlay_coronal.ppm", "overlay_sagittal.ppm"):
            assert (chain / "ov" / name).exists()

    def test_config_echo_reproduces_bitwise(self, chain, tmp_path):
        # re-running from the echoed configuration is the reproducibility
        # contract: the displacement must come back byte for byte
        rerun = str(tmp_path / "rerun")
        assert main(["register", "--config", str(chain / "reg" / "config.txt"),
                     "--set", f"out={rerun}"]) == 0
        a, _ = read_volume(chain / "reg" / "displacement.nvol")
        b, _ = read_volume(tmp_path / "rerun" / "displacement.nvol")
        assert a.tobytes() == b.tobytes()

    def test_register_direct_method(self, chain, tmp_path):
        out = str(tmp_path / "direct")
        case = chain / "case"
        assert main(["register", "--set", f"out={out}",
                     "--set", f"fixed={case}/fixed.nvol", "--set", f"moving={case}/moving.nvol",
                     "--set", "method=direct", "--set", "net_depth=1",
                     "--set", "sched_iters_per_level=3"]) == 0
        disp, _ = read_volume(tmp_path / "direct" / "displacement.nvol")
        assert disp.shape == (3, EXTENT, EXTENT, EXTENT)


class TestExitCodes:
    def test_unknown_key_is_usage_error(self, tmp_path):
        assert main(["phantom", "--set", f"out={tmp_path}", "--set", "bogus=1"]) == 1

    def test_missing_out(self):
        assert main(["phantom"]) == 1

    def test_malformed_set(self, tmp_path):
        assert main(["phantom", "--set", "no_equals_sign"]) == 1

    def test_bad_method(self, tmp_path, chain):
        case = chain / "case"
        assert main(["register", "--set", f"out={tmp_path}",
                     "--set", f"fixed={case}/fixed.nvol", "--set", f"moving={case}/moving.nvol",
                     "--set", "method=affine"]) == 1

    def test_bad_volume_is_input_error(self, tmp_path):
        bad = tmp_path / "bad.nvol"
        bad.write_bytes(b"NVOL9\nnot a volume\n")
        assert main(["register", "--set", f"out={tmp_path / 'o'}",
                     "--set", f"fixed={bad}", "--set", f"moving={bad}"]) == 2

    def test_field_where_volume_expected(self, tmp_path):
        vol = tmp_path / "v.nvol"
        write_volume(vol, np.zeros((3, 8, 8, 8), dtype=np.float32))
        assert main(["register", "--set", f"out={tmp_path / 'o'}",
                     "--set", f"fixed={vol}", "--set", f"moving={vol}"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_exit_3(self, tmp_path, chain):
        case = chain / "case"
        assert main(["register", "--set", f"out={tmp_path / 'o'}",
                     "--set", f"fixed={case}/fixed.nvol", "--set", f"moving={case}/moving.nvol",
                     "--set", "method=direct", "--set", "net_depth=1",
                     "--set", "sched_iters_per_level=4", "--set", "sched_lr=1e30"]) == 3

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_unknown_config_key_in_file(self, tmp_path):
        cfgf = tmp_path / "c.txt"
        cfgf.write_text("bogus = 3\n")
        assert main(["phantom", "--config", str(cfgf), "--set", f"out={tmp_path}"]) == 1


class TestGradcheckCommand:
    def test_passes_small(self, capsys):
        assert main(["gradcheck", "--set", "gradcheck_seeds=1",
                     "--set", "gradcheck_coords=4"]) == 0
        out = capsys.readouterr().out
        assert "all" in out and "passed" in out


class TestAblate:
    @pytest.mark.filterwarnings("ignore:detection_rate")
    def test_two_configs_one_seed(self, tmp_path):
        out = str(tmp_path / "ab")
        assert main(["ablate", "--set", f"out={out}",
                     "--set", "ablate_configs=depth_1,direct", "--set", "ablate_seeds=1",
                     "--set", f"phantom_extent={EXTENT}", "--set", "net_depth=1",
                     "--set", "sched_iters_per_level=4"]) == 0
        lines = (tmp_path / "ab" / "ablate.csv").read_text().splitlines()
        assert lines[0] == ("config_id,dice_organs_mean,dice_organs_std,dice_lesions_mean,"
                            "dice_lesions_std,detection_rate,disappearing_rate,sdjdet,"
                            "iterations,seconds")
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "depth_1"
        assert lines[2].split(",")[0] == "direct"
        for line in lines[1:]:
            assert len(line.split(",")) == 10

    def test_unknown_config_rejected(self, tmp_path):
        assert main(["ablate", "--set", f"out={tmp_path}",
                     "--set", "ablate_configs=depth_9"]) == 1

    def test_config_table_covers_ablation_grid(self):
        for key in ("depth_1", "depth_4", "no_residual", "pool_up",
                    "no_regularization", "direct", "level_1", "level_2", "two_channel"):
            assert key in ABLATE_CONFIGS


class TestResolveConfig:
    def test_defaults_plus_override(self):
        cfg = resolve_config(None, ["net_depth=4"])
        assert cfg["net_depth"] == 4 and cfg["normalize"] == "minmax"

    def test_config_file_comments_and_blanks(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("# comment only\n\nnet_depth = 2  # trailing\nsched_lr = 0.01\n")
        cfg = resolve_config(str(f), [])
        assert cfg["net_depth"] == 2 and cfg["sched_lr"] == 0.01

    def test_override_beats_file(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("net_depth = 2\n")
        cfg = resolve_config(str(f), ["net_depth=3"])
        assert cfg["net_depth"] == 3

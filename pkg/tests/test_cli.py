import json

import numpy as np
import pytest

from conftest import write_gtsrb
from ieces.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from ieces.dataset import gen_synthetic
from ieces.image import read_pnm, write_ppm


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny default-architecture run shared by the read-only subcommands."""
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", "synthetic:2,10", "--out", str(out), "--epochs", "1", "--seed", "7"])
    assert code == EXIT_OK
    return out


@pytest.fixture
def ppm(tmp_path):
    _, tpl = gen_synthetic(2, 2, seed=0)
    path = tmp_path / "sign.ppm"
    write_ppm(path, tpl[1].pixels)
    return path


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "synthetic:2,4", "--out", "x", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_invalid_value_is_usage_error(tmp_path, capsys):
    assert main(["train", "--data", "synthetic:2,4", "--out", str(tmp_path), "--lr", "0"]) == EXIT_USAGE


def test_train_print_config_echoes_defaults(capsys):
    assert main(["train", "--data", "synthetic:2,4", "--out", "x", "--print-config"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train"]["lr"] == 3e-4 and cfg["train"]["weight_decay"] == 2e-7
    assert cfg["train"]["siamese"]["alpha"] == 0.1 and cfg["train"]["batch_size"] == 64


def test_train_outputs(trained, capsys):
    names = {p.name for p in trained.iterdir()}
    assert {"last.bin", "train.log", "manifest.tsv", "config.json"} <= names
    assert (trained / "manifest.tsv").read_text().startswith("# seed=7")


def test_train_reports_param_count_and_echoes_seed(tmp_path, capsys):
    assert main(["train", "--data", "synthetic:2,4", "--out", str(tmp_path), "--epochs", "0", "--seed", "3"]) == 0
    cap = capsys.readouterr()
    assert "param_count 1358914" in cap.out
    assert "seed 3" in cap.err and "config {" in cap.err


def test_train_bad_data_exits_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["train", "--data", "synthetic:1,4", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        main(["train", "--data", "synthetic:2,6", "--out", str(tmp_path / name), "--epochs", "1", "--seed", "2"])
    assert (tmp_path / "a/last.bin").read_bytes() == (tmp_path / "b/last.bin").read_bytes()
    assert (tmp_path / "a/train.log").read_text() == (tmp_path / "b/train.log").read_text()


def test_eval_writes_reports_deterministically(trained, tmp_path, capsys):
    args = ["eval", "--ckpt", str(trained / "last.bin"), "--data", "synthetic:2,10", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["metrics_blur.csv", "metrics_blur.txt", "metrics_clean.csv", "metrics_clean.txt",
                     "metrics_occ.csv", "metrics_occ.txt", "summary.txt"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_class_mismatch_exits_2(trained, tmp_path, capsys):
    code = main(["eval", "--ckpt", str(trained / "last.bin"), "--data", "synthetic:3,10", "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_eval_unknown_condition_is_usage(trained, tmp_path, capsys):
    code = main(["eval", "--ckpt", str(trained / "last.bin"), "--data", "synthetic:2,10", "--out", str(tmp_path),
                 "--conditions", "clean,fog"])
    assert code == EXIT_USAGE


def test_corrupt_checkpoint_exits_2(trained, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    buf = bytearray((trained / "last.bin").read_bytes())
    buf[100] ^= 0xFF
    bad.write_bytes(bytes(buf))
    assert main(["eval", "--ckpt", str(bad), "--data", "synthetic:2,10", "--out", str(tmp_path)]) == EXIT_DATA


def test_infer_lines_timing_and_single_branch(trained, ppm, tmp_path, capsys):
    missing = tmp_path / "nope.ppm"
    code = main(["infer", "--ckpt", str(trained / "last.bin"), "--image", str(ppm), "--image", str(missing),
                 "--image", str(ppm)])
    assert code == EXIT_DATA  # unreadable image, but the others were still classified
    cap = capsys.readouterr()
    lines = cap.out.strip().splitlines()
    assert len(lines) == 2
    for ln in lines:
        path, cls, prob = ln.split("\t")
        assert path == str(ppm) and cls in {"0", "1"} and 0 < float(prob) <= 1
    assert cap.err.count(f"time {ppm}") == 2
    assert "time mean" in cap.err
    assert "single_branch_check pass (encoder passes 2, template passes 0)" in cap.err


def test_infer_deterministic(trained, ppm, capsys):
    args = ["infer", "--ckpt", str(trained / "last.bin"), "--image", str(ppm)]
    main(args)
    first = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == first


def test_augment_single_op_deterministic(ppm, tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["augment", "--in", str(ppm), "--out", str(tmp_path / d), "--op", "blur", "--seed", "1"]) == 0
    a = (tmp_path / "a/sign_blur_s1.ppm").read_bytes()
    assert a == (tmp_path / "b/sign_blur_s1.ppm").read_bytes()
    assert a != ppm.read_bytes()


def test_augment_p0_copies_input(ppm, tmp_path, capsys):
    assert main(["augment", "--in", str(ppm), "--out", str(tmp_path), "--op", "erase", "--p", "0"]) == EXIT_OK
    assert np.array_equal(read_pnm(tmp_path / "sign_erase_s0.ppm"), read_pnm(ppm))


def test_augment_compose_writes_each_step(ppm, tmp_path, capsys):
    assert main(["augment", "--in", str(ppm), "--out", str(tmp_path), "--op", "compose", "--seed", "3",
                 "--p", "1"]) == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("sign_compose_*"))
    for step in ("rotate", "scale", "perspective", "blur", "erase"):
        assert f"sign_compose_{step}_s3.ppm" in names
    assert "sign_compose_s3.ppm" in names


def test_augment_unknown_op_and_bad_input(ppm, tmp_path, capsys):
    assert main(["augment", "--in", str(ppm), "--out", str(tmp_path), "--op", "melt"]) == EXIT_USAGE
    (tmp_path / "x.ppm").write_bytes(b"junk")
    assert main(["augment", "--in", str(tmp_path / "x.ppm"), "--out", str(tmp_path)]) == EXIT_DATA


def test_heatmap_outputs(trained, tmp_path, capsys):
    assert main(["heatmap", "--ckpt", str(trained / "last.bin"), "--data", "synthetic:2,10",
                 "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "diagonal_argmin_fraction=" in out and "reference 1.5" in out
    rows = (tmp_path / "heatmap.csv").read_text().splitlines()
    assert len(rows) == 2
    assert all(len(r.split(",")) == 2 and all(float(v) >= 0 for v in r.split(",")) for r in rows)
    assert (tmp_path / "heatmap.pgm").exists()


def test_selfcheck_passes_and_reports_informational(capsys):
    assert main(["selfcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "INFO\tconvexity_probe_full" in out
    assert "summary:" in out


def test_selfcheck_failure_exits_3(monkeypatch, capsys):
    from ieces import selfcheck
    from ieces.theory import CheckOutcome

    monkeypatch.setattr(selfcheck, "run_all", lambda grid, seed: [CheckOutcome("broken_property", False, "x")])
    assert main(["selfcheck"]) == EXIT_NUMERIC
    assert "broken_property" in capsys.readouterr().out


def test_selfcheck_bad_grid(capsys):
    assert main(["selfcheck", "--grid", "0"]) == EXIT_USAGE


def test_eval_groups_file(trained, tmp_path, capsys):
    groups = tmp_path / "groups.txt"
    groups.write_text("0 round\n1 triangular\n")
    args = ["eval", "--ckpt", str(trained / "last.bin"), "--data", "synthetic:2,10", "--conditions", "clean"]
    assert main(args + ["--out", str(tmp_path / "g"), "--groups", str(groups)]) == EXIT_OK
    assert (tmp_path / "g/groups_clean.csv").read_text().startswith("group,")
    groups.write_text("0 round\n")
    assert main(args + ["--out", str(tmp_path / "h"), "--groups", str(groups)]) == EXIT_DATA


def test_train_templates_override_on_gtsrb(tmp_path, capsys):
    root = write_gtsrb(tmp_path / "gtsrb")
    folder = tmp_path / "pictograms"
    folder.mkdir()
    _, synth = gen_synthetic(2, 2, seed=0)
    for c in range(2):
        write_ppm(folder / f"{c}.ppm", synth[c].pixels)
    args = ["train", "--data", str(root), "--out", str(tmp_path / "o"), "--epochs", "0"]
    assert main(args + ["--templates", str(folder)]) == EXIT_OK
    assert main(args + ["--templates", str(tmp_path / "nowhere")]) == EXIT_DATA

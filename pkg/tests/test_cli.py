import pytest

from fpconv import cli
from fpconv.data import make_room_dataset, write_dataset
from fpconv.gradsuite import CASES

TOY = """\
task = segmentation
epochs = 1
batch_size = 2
n_points = 256
widths = 8,8,16,16
radii = 0.2,0.4,0.8,1.6
stem_width = 8
dist_widths = 4,8
predictor_hidden = 8
plane = 4
n_max = 8
"""


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return write_dataset(make_room_dataset(2, 1, seed=2, n_points=1500), tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="module")
def toy_config(tmp_path_factory, manifest):
    path = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    path.write_text(TOY + f"data = {manifest}\n")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_config):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(toy_config), "--out", str(out), "--quiet"]) == 0
    return out / "model.fpck"


def test_train_writes_checkpoint_and_log(trained):
    assert trained.exists() and trained.with_suffix(".cfg").exists()
    assert (trained.parent / "log.csv").read_text().startswith("epoch,lr,loss,train_oA\n")


def test_missing_config(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert cli.main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(TOY + "colour = red\n")
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "'colour'" in capsys.readouterr().err


def test_seed_replay_is_bitwise(tmp_path, toy_config):
    for name in ("a", "b"):
        args = ["train", "--config", str(toy_config), "--seed", "7", "--deterministic", "--quiet"]
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/model.fpck").read_bytes() == (tmp_path / "b/model.fpck").read_bytes()
    assert (tmp_path / "a/log.csv").read_text() == (tmp_path / "b/log.csv").read_text()
    assert "seed = 7" in (tmp_path / "a/model.cfg").read_text()


def test_flag_overrides_file_value(tmp_path, toy_config):
    assert cli.main(["train", "--config", str(toy_config), "--seed", "3", "--out", str(tmp_path), "--quiet"]) == 0
    assert "seed = 3" in (tmp_path / "model.cfg").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_training_exit_code(tmp_path, manifest, capsys):
    path = tmp_path / "hot.cfg"
    hot = TOY.replace("epochs = 1", "epochs = 3")
    path.write_text(hot + f"data = {manifest}\nlr0 = 1e30\nmomentum = 0\n")
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path), "--quiet"]) == 2
    assert "diverged" in capsys.readouterr().err


def test_eval_to_stdout_and_file(trained, manifest, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(manifest)]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == "class,iou,acc" and len(lines) == 1 + 6 + 2
    assert not list(tmp_path.iterdir())
    target = tmp_path / "m.csv"
    assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(manifest), "--metrics-out", str(target)]) == 0
    assert target.read_text() == out


def test_eval_class_mismatch(trained, manifest, capsys):
    assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(manifest), "--num-classes", "4"]) == 1
    err = capsys.readouterr().err
    assert "shape" in err or "classes" in err


def test_eval_missing_checkpoint(tmp_path, manifest):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.fpck"), "--data", str(manifest)]) == 1


def test_analyze_writes_two_csvs(trained, manifest, tmp_path):
    assert cli.main(["analyze", "--checkpoint", str(trained), "--data", str(manifest), "--bins", "4", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "curvature_curve.csv").read_text().splitlines()) == 5
    assert len((tmp_path / "curvature_hist.csv").read_text().splitlines()) == 5


def test_analyze_single_bin_is_overall_accuracy(trained, manifest, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(trained), "--data", str(manifest)]) == 0
    overall = float(capsys.readouterr().out.splitlines()[-1].split(",")[-1])
    args = ["analyze", "--checkpoint", str(trained), "--data", str(manifest), "--bins", "1", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    rows = (tmp_path / "curvature_curve.csv").read_text().splitlines()[1:]
    assert len(rows) == 1 and abs(float(rows[0].split(",")[1]) - overall) < 1e-6


@pytest.mark.parametrize("radius", ["0", "-0.5"])
def test_analyze_rejects_radius(trained, manifest, radius):
    assert cli.main(["analyze", "--checkpoint", str(trained), "--data", str(manifest), "--radius", radius]) == 1


def test_gradcheck_default_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in CASES)


def test_gradcheck_unmeetable_tolerance(capsys):
    assert cli.main(["gradcheck", "--tol", "1e-12", "--ops", "conv2d,softmax,fpconv_dense"]) == 3
    out = capsys.readouterr().out
    assert "conv2d" in out and "above tolerance" in out


def test_gradcheck_filter(capsys):
    assert cli.main(["gradcheck", "--ops", "conv2d"]) == 0
    body = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in body[1:-1]] == ["conv2d"]
    assert cli.main(["gradcheck", "--ops", "conv3d"]) == 1


@pytest.mark.parametrize("kernel", ["fpconv", "project", "normalize"])
def test_bench_reports_both_paths(kernel, capsys):
    assert cli.main(["bench", "--kernel", kernel, "--n-points", "12", "--plane", "4", "--iters", "2"]) == 0
    assert capsys.readouterr().out.count("ns/op") >= 2


def test_bench_zero_iterations():
    assert cli.main(["bench", "--kernel", "fpconv", "--iters", "0"]) == 1


def test_unknown_flag_is_fatal(capsys):
    assert cli.main(["eval", "--checkpoint", "a", "--data", "b", "--verbose"]) == 1
    assert "--verbose" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    commands = parser._subparsers._group_actions[0].choices
    for name, sub in commands.items():
        with pytest.raises(SystemExit) as info:
            cli.main([name, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)

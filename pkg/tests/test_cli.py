import json

import numpy as np
import pytest

from depthsep.cli import main
from depthsep.tensor import save_raw_tensor


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_ppm(path, size, seed=0, comment=False):
    rng = np.random.Generator(np.random.PCG64(seed))
    pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    header = b"P6\n"
    if comment:
        header += b"# test image\n"
    header += b"%d %d\n255\n" % (size, size)
    path.write_bytes(header + pixels.tobytes())


# --- describe -----------------------------------------------------------------


def test_describe_table(capsys):
    code, out, _ = run(capsys, "describe")
    assert code == 0
    assert "-> 28 layers (27 conv + 1 fc)" in out
    assert "3x3x3x32" in out  # stem filter
    assert "classifier" in out
    assert "input 224x224x3" in out


def test_describe_shallow_drops_repeated_blocks(capsys):
    _, full, _ = run(capsys, "describe", "--format", "csv")
    _, shallow, _ = run(capsys, "describe", "--shallow", "--format", "csv")
    assert len(full.splitlines()) == 1 + 30
    assert len(shallow.splitlines()) == 1 + 20
    assert full.count("14x14x512") > shallow.count("14x14x512")


def test_describe_json(capsys):
    code, out, _ = run(capsys, "describe", "--format", "json")
    assert code == 0
    data = json.loads(out)
    assert data["layer_count"] == 28
    assert len(data["layers"]) == 30
    assert data["layers"][0]["filter"] == "3x3x3x32"


# --- analyze -------------------------------------------------------------------


def test_analyze_totals(capsys):
    code, out, _ = run(capsys, "analyze")
    assert code == 0
    assert "569 M mult-adds" in out
    assert "4.2 M params" in out
    assert "568,740,352" in out
    assert "4,210,088" in out


def test_analyze_quarter_width(capsys):
    code, out, _ = run(capsys, "analyze", "--alpha", "0.25")
    assert code == 0
    assert "41 M mult-adds" in out
    assert "0.5 M params" in out


def test_analyze_csv_column_sums(capsys):
    code, out, _ = run(capsys, "analyze", "--format", "csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "idx,detail,mult_adds,params"
    assert len(lines) == 1 + 30
    ma = sum(int(line.split(",")[2]) for line in lines[1:])
    params = sum(int(line.split(",")[3]) for line in lines[1:])
    assert ma == 568_740_352
    assert params == 4_210_088


def test_analyze_json(capsys):
    code, out, _ = run(capsys, "analyze", "--format", "json")
    assert code == 0
    data = json.loads(out)
    assert data["total_mult_adds"] == 568_740_352
    assert data["total_params"] == 4_210_088
    assert data["shares"]["conv 1x1"]["mult_add_pct"] == pytest.approx(94.86, abs=0.01)


# --- paper-tables --------------------------------------------------------------


def test_tables_walkthrough_and_sweeps(capsys):
    code, out, _ = run(capsys, "paper-tables")
    assert code == 0
    for text in ("462", "52.3", "29.6", "15.1", "2.36", "0.27"):
        assert text in out
    for text in ("94.86", "74.57", "24.35", "1.91"):
        assert text in out
    assert "290,675,200" in out
    assert "0.25,128,13570048,464600" in out
    sweep_rows = [l for l in out.splitlines() if l.count(",") == 3 and l[0] in "01"]
    assert len(sweep_rows) == 16


# --- shared flag validation ------------------------------------------------------


def test_bad_resolution_is_usage_error(capsys):
    code, _, err = run(capsys, "analyze", "--resolution", "100")
    assert code == 2
    assert "error:" in err


def test_bad_alpha_is_usage_error(capsys):
    code, _, err = run(capsys, "describe", "--alpha", "0")
    assert code == 2


def test_bad_classes_is_usage_error(capsys):
    code, _, err = run(capsys, "describe", "--classes", "1")
    assert code == 2


def test_unknown_format_rejected_by_parser(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["describe", "--format", "xml"])
    assert exc.value.code == 2


# --- infer -----------------------------------------------------------------------


def test_infer_ppm_random_init(tmp_path, capsys):
    img = tmp_path / "in.ppm"
    write_ppm(img, 32, comment=True)
    code, out, _ = run(
        capsys,
        "infer", "--input", str(img),
        "--alpha", "0.25", "--resolution", "32", "--classes", "10", "--seed", "7",
    )
    assert code == 0
    assert out.startswith("input 0: class ")
    assert out.count("class ") == 5  # default top-5


def test_infer_raw_tensor_input(tmp_path, capsys):
    rng = np.random.Generator(np.random.PCG64(1))
    x = rng.uniform(-1.0, 1.0, size=(32, 32, 3)).astype(np.float32)
    path = tmp_path / "in.mbt1"
    save_raw_tensor(str(path), x)
    code, out, _ = run(
        capsys,
        "infer", "--input", str(path),
        "--alpha", "0.25", "--resolution", "32", "--classes", "10", "--seed", "7",
    )
    assert code == 0
    assert "input 0:" in out


def test_infer_reference_backend_agrees_on_top_class(tmp_path, capsys):
    img = tmp_path / "in.ppm"
    write_ppm(img, 32, seed=3)
    base = ["infer", "--input", str(img), "--alpha", "0.25",
            "--resolution", "32", "--classes", "10", "--seed", "7", "--top", "1"]
    _, fast, _ = run(capsys, *base)
    _, ref, _ = run(capsys, *base, "--reference-ops")
    assert fast.split(":")[1].strip().split(" ")[1] == ref.split(":")[1].strip().split(" ")[1]


def test_infer_wrong_resolution_fails(tmp_path, capsys):
    img = tmp_path / "small.ppm"
    write_ppm(img, 16)
    code, _, err = run(
        capsys,
        "infer", "--input", str(img), "--alpha", "0.25", "--resolution", "32",
    )
    assert code == 1
    assert "error:" in err
    assert "16x16" in err


def test_infer_missing_input_file(capsys):
    code, _, err = run(capsys, "infer", "--input", "/nonexistent/x.ppm")
    assert code == 1
    assert "error:" in err


# --- bench -----------------------------------------------------------------------


def test_bench_gemm_csv(capsys):
    code, out, _ = run(capsys, "bench", "--gemm", "32x32x32", "--reps", "2")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "op,shape,median_ns,mult_adds,gflops"
    assert lines[1].startswith("gemm,32x32x32,")
    assert int(lines[1].split(",")[3]) == 32 * 32 * 32


def test_bench_gemm_bad_spec(capsys):
    code, _, err = run(capsys, "bench", "--gemm", "32x32", "--reps", "1")
    assert code == 2
    assert "error:" in err


def test_bench_forward_layer_rows(capsys):
    code, out, _ = run(
        capsys, "bench", "--alpha", "0.25", "--resolution", "32", "--reps", "1"
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "op,shape,median_ns,mult_adds,gflops"
    data = [l for l in lines[1:] if not l.startswith("#")]
    assert len(data) == 27  # one row per conv layer
    assert any("time share" in l for l in lines)


# --- gradcheck ---------------------------------------------------------------------


def test_gradcheck_passes_at_default_tolerance(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert "worst" in out
    assert "FAIL" not in out


def test_gradcheck_fails_at_impossible_tolerance(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tolerance", "1e-12")
    assert code == 1
    assert "FAIL" in out


# --- train-toy ---------------------------------------------------------------------


def test_train_toy_converges_and_dumps(tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    bundle = tmp_path / "bundle"
    code, out, err = run(
        capsys,
        "train-toy", "--steps", "200",
        "--out", str(curve), "--dump-weights", str(bundle),
    )
    assert code == 0
    assert "converged=True" in err
    lines = curve.read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 1 + 200

    img = tmp_path / "toy.ppm"
    write_ppm(img, 16)
    code, out, _ = run(capsys, "infer", "--model", str(bundle), "--input", str(img))
    assert code == 0
    assert "input 0:" in out
    assert out.count("class ") == 4  # toy task has 4 classes


def test_train_toy_zero_lr_does_not_converge(capsys):
    code, out, err = run(capsys, "train-toy", "--steps", "30", "--lr", "0")
    assert code == 1
    assert "converged=False" in err
    assert out.splitlines()[0] == "step,loss"

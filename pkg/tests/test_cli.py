"""CLI commands: artifact round-trips, flags, exit codes, determinism."""

import json
import os
import sys

import numpy as np

from cyclematch.cli import main
from cyclematch.params import CycleParams
from cyclematch.tensor import read_tensor, write_tensor

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
WORKER_CMD = f"extern:{sys.executable} {os.path.join(FIXTURES, 'toy_worker.py')} --mode echo"


def _cfg(tmp_path, **kw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kw))
    return str(path)


def _synth_cfg(tmp_path, **synth_kw):
    synth_kw.setdefault("extent", 16)
    synth_kw.setdefault("d_enc", 8)
    synth_kw.setdefault("noise", 0.3)
    return _cfg(tmp_path, num_classes=2, seed=3, synth=synth_kw)


def _make_scene(tmp_path, cfg_path):
    scene_dir = tmp_path / "scene"
    assert main(["synth", "--config", cfg_path, "--out", str(scene_dir)]) == 0
    return str(scene_dir)


def test_synth_writes_manifest_and_tensors(tmp_path):
    cfg = _synth_cfg(tmp_path)
    scene = _make_scene(tmp_path, cfg)
    manifest = json.loads(open(os.path.join(scene, "scene.json")).read())
    assert manifest["config"]["num_classes"] == 2
    for name in manifest["files"]["ref_features"]:
        arr = read_tensor(os.path.join(scene, name))
        assert arr.dtype == np.float32 and arr.ndim == 3
    mask = read_tensor(os.path.join(scene, manifest["files"]["test_mask"]))
    assert mask.dtype == np.uint8
    assert os.path.exists(os.path.join(scene, "scene_masks.png"))


def test_match_and_prompts(tmp_path):
    cfg = _synth_cfg(tmp_path)
    scene = _make_scene(tmp_path, cfg)
    out = tmp_path / "match"
    assert main(["match", "--config", cfg, "--scene", scene, "--out", str(out)]) == 0
    sim = read_tensor(out / "sim_class_1.cstf")
    assert sim.shape == (16, 16)
    assert (out / "sim_class_1.png").exists()
    assert (out / "similarity_stats.csv").read_text().startswith("class,")
    out2 = tmp_path / "prompts"
    assert main(["prompts", "--config", cfg, "--scene", scene, "--out", str(out2)]) == 0
    ps = json.loads((out2 / "prompts_class_1.json").read_text())
    assert ps["class"] == 1 and ps["image_size"] == [16, 16]
    assert len(ps["positives"]) <= 10


def test_segment_oracle_and_eval(tmp_path):
    cfg = _synth_cfg(tmp_path, noise=0.0)
    scene = _make_scene(tmp_path, cfg)
    out = tmp_path / "seg"
    assert main(["segment", "--config", cfg, "--scene", scene, "--out", str(out)]) == 0
    pred = read_tensor(out / "pred_mask.cstf")
    assert pred.dtype == np.uint8 and pred.shape == (16, 16)
    gt = os.path.join(scene, "test_mask.cstf")
    ev = tmp_path / "eval"
    assert main([
        "eval", "--config", cfg, "--pred", str(out / "pred_mask.cstf"),
        "--gt", gt, "--out", str(ev),
    ]) == 0
    rep = json.loads((ev / "eval_report.json").read_text())
    assert rep["miou_nb"] == 1.0
    assert (ev / "eval_report.csv").exists() and (ev / "eval_report.png").exists()


def test_eval_pred_equals_gt(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    mask[0, 0], mask[1, 1] = 1, 2
    p = tmp_path / "m.cstf"
    write_tensor(p, mask)
    out = tmp_path / "ev"
    assert main(["eval", "--pred", str(p), "--gt", str(p), "--num-classes", "2",
                 "--out", str(out)]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert rep["miou_nb"] == 1.0 and rep["mdice"] == 1.0


def test_segment_through_external_worker(tmp_path):
    cfg_path = _cfg(
        tmp_path, num_classes=2, seed=3, decoder=WORKER_CMD,
        synth={"extent": 16, "d_enc": 8, "noise": 0.0},
    )
    scene = _make_scene(tmp_path, cfg_path)
    out = tmp_path / "seg"
    assert main(["segment", "--config", cfg_path, "--scene", scene, "--out", str(out)]) == 0
    # echo worker returns constant positive masks: every class claims everything,
    # assembly resolves by score
    pred = read_tensor(out / "pred_mask.cstf")
    assert set(np.unique(pred)) <= {1, 2}


def test_train_warmup_and_maskweights_round_trip(tmp_path):
    cfg = _synth_cfg(tmp_path)
    scene = _make_scene(tmp_path, cfg)
    out = tmp_path / "warm"
    assert main([
        "train-warmup", "--config", cfg, "--scene", scene,
        "--out", str(out), "--epochs", "3",
    ]) == 0
    params_path = out / "params.json"
    params = CycleParams.load(params_path)
    assert params.num_classes == 2
    curve = (out / "training_curve.csv").read_text().strip().splitlines()
    assert len(curve) == 4  # header + 3 epochs
    assert (out / "training_curve.png").exists()
    out2 = tmp_path / "maskw"
    assert main([
        "train-maskweights", "--config", cfg, "--scene", scene,
        "--params", str(params_path), "--out", str(out2),
    ]) == 0
    trained = CycleParams.load(out2 / "params.json")
    assert trained.w_scale.tobytes() == params.w_scale.tobytes()


def test_no_scc_flag_equals_lambda_zero(tmp_path):
    cfg = _synth_cfg(tmp_path, distractor_level=0.2)
    scene = _make_scene(tmp_path, cfg)
    out_flag = tmp_path / "flag"
    out_zero = tmp_path / "zero"
    assert main(["match", "--config", cfg, "--scene", scene, "--no-scc",
                 "--out", str(out_flag)]) == 0
    assert main(["match", "--config", cfg, "--scene", scene, "--lambda-scc", "0",
                 "--out", str(out_zero)]) == 0
    for name in ("sim_class_1.cstf", "sim_class_2.cstf", "similarity_stats.csv"):
        a = (out_flag / name).read_bytes()
        b = (out_zero / name).read_bytes()
        assert a == b, name
    seg_flag = tmp_path / "seg_flag"
    seg_zero = tmp_path / "seg_zero"
    assert main(["segment", "--config", cfg, "--scene", scene, "--no-scc",
                 "--out", str(seg_flag)]) == 0
    assert main(["segment", "--config", cfg, "--scene", scene, "--lambda-scc", "0",
                 "--out", str(seg_zero)]) == 0
    for name in sorted(os.listdir(seg_flag)):
        assert (seg_flag / name).read_bytes() == (seg_zero / name).read_bytes(), name


def test_ablation_flags_route(tmp_path):
    cfg = _synth_cfg(tmp_path)
    scene = _make_scene(tmp_path, cfg)
    out = tmp_path / "single"
    assert main(["prompts", "--config", cfg, "--scene", scene, "--single-point",
                 "--out", str(out)]) == 0
    ps = json.loads((out / "prompts_class_1.json").read_text())
    assert len(ps["positives"]) == 1 and ps["negatives"] == []
    out2 = tmp_path / "noneg"
    assert main(["prompts", "--config", cfg, "--scene", scene, "--no-negatives",
                 "--fixed-threshold", "-100", "--out", str(out2)]) == 0
    ps2 = json.loads((out2 / "prompts_class_1.json").read_text())
    assert ps2["negatives"] == [] and len(ps2["positives"]) == 10


def test_unknown_config_key_rejected(tmp_path):
    cfg = _cfg(tmp_path, num_classes=2, lambda_sccc=1.0)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 1


def test_missing_file_is_data_error(tmp_path):
    assert main(["eval", "--pred", "/nonexistent.cstf", "--gt", "/nonexistent.cstf",
                 "--out", str(tmp_path)]) == 2


def test_corrupt_tensor_is_data_error(tmp_path):
    bad = tmp_path / "bad.cstf"
    bad.write_bytes(b"NOT A TENSOR")
    assert main(["eval", "--pred", str(bad), "--gt", str(bad),
                 "--out", str(tmp_path)]) == 2


def test_bad_decoder_is_bridge_error(tmp_path):
    cfg = _cfg(
        tmp_path, num_classes=1, decoder="extern:/nonexistent-decoder-binary",
        synth={"extent": 16, "d_enc": 4, "noise": 0.0},
    )
    scene = _make_scene(tmp_path, cfg)
    assert main(["segment", "--config", cfg, "--scene", scene,
                 "--out", str(tmp_path / "o")]) == 4


def test_bench_small(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--d-match", "8", "--d-enc", "16", "--out", str(out)]) == 0
    lines = (out / "bench.csv").read_text().strip().splitlines()
    assert lines[0] == "d_match,d_enc,kernel,millis,max_abs_diff"
    assert len(lines) == 3
    kernels = {ln.split(",")[2] for ln in lines[1:]}
    assert kernels == {"blocked", "naive"}
    assert float(lines[1].split(",")[4]) <= 1e-5


def test_match_bitwise_identical_across_blas_thread_counts(tmp_path):
    import subprocess

    cfg = _synth_cfg(tmp_path, extent=32, d_enc=24, noise=0.8)
    scene = _make_scene(tmp_path, cfg)
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"threads{threads}"
        env = dict(os.environ)
        env.update({
            "OMP_NUM_THREADS": threads,
            "OPENBLAS_NUM_THREADS": threads,
            "MKL_NUM_THREADS": threads,
        })
        proc = subprocess.run(
            [sys.executable, "-m", "cyclematch.cli", "match",
             "--config", cfg, "--scene", scene, "--out", str(out)],
            env=env, capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    for name in sorted(os.listdir(outs[0])):
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, f"{name} differs across BLAS thread counts"


def test_synth_determinism_byte_identical(tmp_path):
    cfg = _synth_cfg(tmp_path, distractor_level=0.3)
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["synth", "--config", cfg, "--out", str(a)]) == 0
    assert main(["synth", "--config", cfg, "--out", str(b)]) == 0
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name

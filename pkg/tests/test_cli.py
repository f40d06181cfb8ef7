"""End-to-end command-line checks run through real subprocesses."""

import subprocess
import sys

import numpy as np
import pytest

import tcpool as tp
from tcpool.io import read_tensor, write_clip, write_tensor


def run_cli(*args, **kw):
    return subprocess.run([sys.executable, "-m", "tcpool", *args],
                          capture_output=True, text=True, timeout=300, **kw)


@pytest.fixture
def clip_file(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "clip.bin"
    write_clip(path, rng.standard_normal((3, 4, 6)).astype(np.float32), label=1)
    return path


def test_pool_tcp_writes_readable_representation(clip_file, tmp_path):
    out = tmp_path / "rep.bin"
    r = run_cli("pool", "--input", str(clip_file), "--out", str(out),
                "--d", "6", "--kappa", "3", "--K", "2")
    assert r.returncode == 0, r.stderr
    assert "variant=tcp dim=21" in r.stdout
    rep = read_tensor(out)
    assert rep.shape == (1, tp.tri_len(6))
    assert np.isfinite(rep.data).all()


def test_pool_gap_dim_matches_channels(clip_file, tmp_path):
    out = tmp_path / "rep.bin"
    r = run_cli("pool", "--input", str(clip_file), "--out", str(out),
                "--variant", "gap")
    assert r.returncode == 0, r.stderr
    assert "variant=gap dim=6" in r.stdout
    assert read_tensor(out).shape == (1, 6)


def test_pool_with_checkpoint_params(clip_file, tmp_path):
    cfg = tp.HeadConfig(variant="tcp", channels=6, proj_dim=4, frames=3,
                        positions=4, kernel_size=3, sqrt_iterations=2,
                        num_classes=2, seed=7)
    ckpt = tmp_path / "head.ckpt"
    tp.save_checkpoint(ckpt, tp.init_head(cfg))
    out = tmp_path / "rep.bin"
    r = run_cli("pool", "--input", str(clip_file), "--out", str(out),
                "--params", str(ckpt))
    assert r.returncode == 0, r.stderr
    assert "variant=tcp dim=10" in r.stdout
    # variant mismatch between flag and checkpoint is a usage error
    r2 = run_cli("pool", "--input", str(clip_file), "--out", str(out),
                 "--params", str(ckpt), "--variant", "gap")
    assert r2.returncode == 3
    assert "usage error" in r2.stderr


def test_pool_malformed_input_exits_2(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + b"\x00" * 40)
    r = run_cli("pool", "--input", str(bad), "--out", str(tmp_path / "o.bin"))
    assert r.returncode == 2
    assert "format error" in r.stderr


def test_pool_missing_file_exits_2(tmp_path):
    r = run_cli("pool", "--input", str(tmp_path / "absent.bin"),
                "--out", str(tmp_path / "o.bin"))
    assert r.returncode == 2
    assert "file error" in r.stderr


def test_usage_errors_exit_3(clip_file, tmp_path):
    r = run_cli("pool", "--input", str(clip_file),
                "--out", str(tmp_path / "o.bin"), "--no-such-flag")
    assert r.returncode == 3
    assert "usage error" in r.stderr
    r2 = run_cli("pool", "--input", str(clip_file),
                 "--out", str(tmp_path / "o.bin"), "--kappa", "4")
    assert r2.returncode == 3
    assert "usage error" in r2.stderr


def test_equivalence_small_grid_passes():
    r = run_cli("equivalence", "--trials", "2", "--frames", "1,2",
                "--positions", "1,4", "--dims", "2,4", "--kappas", "1,3")
    assert r.returncode == 0, r.stderr
    assert "runs=" in r.stdout and "max relative discrepancy" in r.stdout
    assert r.stdout.rstrip().endswith("PASS")


def test_equivalence_detects_injected_fault():
    r = run_cli("equivalence", "--trials", "1", "--frames", "2",
                "--positions", "4", "--dims", "4", "--kappas", "3",
                "--inject-fault", "1e-6")
    assert r.returncode == 1
    assert "FAIL" in r.stderr


def test_equivalence_zero_trials():
    r = run_cli("equivalence", "--trials", "0")
    assert r.returncode == 0
    assert "no trials requested; nothing to compare" in r.stdout


def test_gradcheck_primitive_scope():
    r = run_cli("gradcheck", "--scope", "primitive")
    assert r.returncode == 0, r.stderr
    assert "checks passed" in r.stdout
    assert "FAIL" not in r.stdout


def test_sqrt_bench_table():
    r = run_cli("sqrt-bench", "--d", "8", "--K", "1,3,20", "--cond", "50")
    assert r.returncode == 0, r.stderr
    lines = r.stdout.strip().splitlines()
    assert lines[0].startswith("d=8 cond=50")
    assert "residual" in lines[1] and "vs oracle" in lines[1]
    assert len(lines) == 5  # header + column row + one row per K


def test_train_and_info_roundtrip(tmp_path):
    cfg_text = "\n".join([
        "task = order_pair",
        "num_samples = 16",
        "variant = tcp",
        "channels = 6",
        "proj_dim = 4",
        "frames = 3",
        "positions = 4",
        "kernel_size = 3",
        "sqrt_iterations = 2",
        "dropout_rate = 0",
        "epochs = 2",
        "batch_size = 8",
        "val_fraction = 0.25",
        "learning_rate = 0.05",
    ])
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(cfg_text, encoding="utf-8")
    ckpt = tmp_path / "trained.ckpt"
    r = run_cli("train", "--config", str(cfg_path), "--out", str(ckpt))
    assert r.returncode == 0, r.stderr
    tsv = [l for l in r.stdout.splitlines() if l.count("\t") == 3]
    assert any(l.split("\t")[1] == "train" for l in tsv)
    assert any(l.split("\t")[1] == "val" for l in tsv)
    assert f"checkpoint written to {ckpt}" in r.stdout
    assert "stopped=" in r.stdout and "final_val_accuracy=" in r.stdout
    assert len(tsv) >= 2

    info = run_cli("info", "--params", str(ckpt))
    assert info.returncode == 0, info.stderr
    assert "variant=tcp channels=6 width=4" in info.stdout
    assert "totals: params=" in info.stdout


def test_train_rejects_unknown_config_key(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("task = order_pair\nwat = 1\n", encoding="utf-8")
    r = run_cli("train", "--config", str(cfg_path))
    assert r.returncode == 3
    assert "unknown config keys: wat" in r.stderr


def test_info_defaults_match_published_scale():
    r = run_cli("info")
    assert r.returncode == 0, r.stderr
    assert "totals: params=3,674,200 flops=1,363,698,832" in r.stdout
    assert "variant=tcp channels=2048 width=128" in r.stdout

import subprocess
import sys

import pytest
import torch

from depthdiff import dataio
from depthdiff.backbone import ModelConfig
from depthdiff.cli import main
from depthdiff.config import RunConfig, write_config

torch.set_num_threads(1)


def tiny_model(resolution, cond_channels, arch="unet"):
    return ModelConfig(
        arch=arch,
        base_dim=8,
        dim_mults=(1, 2),
        n_resblocks=(1, 1),
        attention_resolutions=(resolution // 2,),
        attention_heads=2,
        attention_head_dim=4,
        groupnorm_groups=4,
        cond_channels=cond_channels,
        input_resolution=resolution,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A dataset, two trained tiny checkpoints, and sampling inputs, all
    produced through the command-line surface itself."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "data"
    assert (
        main(
            [
                "make-synthetic",
                "--out",
                str(ds),
                "--count",
                "16",
                "--resolution",
                "16",
                "--seed",
                "3",
            ]
        )
        == 0
    )

    cfg1 = RunConfig(
        stage="depth_diffusion",
        model=tiny_model(8, 3, arch="unet3plus"),
        diffusion_steps=5,
        dataset_root=str(ds),
        cond_resolution=8,
        out_resolution=8,
        epochs=1,
        batch_size=3,
        seed=11,
        checkpoint_every=100,
    )
    write_config(cfg1, root / "s1.cfg")
    assert main(["train", "--config", str(root / "s1.cfg")]) == 0
    ckpt1 = root / "s1.run" / "ckpt_4.bin"

    cfg2 = RunConfig(
        stage="super_resolution",
        model=tiny_model(16, 4),
        diffusion_steps=5,
        dataset_root=str(ds),
        cond_resolution=8,
        out_resolution=16,
        epochs=1,
        batch_size=3,
        seed=12,
        checkpoint_every=100,
    )
    write_config(cfg2, root / "s2.cfg")
    assert (
        main(
            [
                "train",
                "--config",
                str(root / "s2.cfg"),
                "--run-dir",
                str(root / "s2.run"),
            ]
        )
        == 0
    )
    ckpt2 = root / "s2.run" / "ckpt_4.bin"

    _, images = dataio.read_split(ds, "train")
    dataio.write_rgb_png(root / "subject.png", images[0].rgb)
    low = dataio.resample_rgbd(images[0], (8, 8))
    dataio.write_rgbd_files(root / "low.png", root / "low.pfm", low)
    return {
        "root": root,
        "ds": ds,
        "ckpt1": ckpt1,
        "ckpt2": ckpt2,
        "rgb": root / "subject.png",
        "rgbd": root / "low.png",
    }


def test_make_synthetic_writes_dataset(workspace):
    ds = workspace["ds"]
    assert (ds / "manifest.tsv").exists()
    manifest, images = dataio.read_split(ds, "train")
    assert len(images) == 12


def test_make_synthetic_rejects_bad_count(tmp_path):
    rc = main(
        [
            "make-synthetic",
            "--out",
            str(tmp_path / "x"),
            "--count",
            "0",
            "--resolution",
            "16",
            "--seed",
            "0",
        ]
    )
    assert rc == 3


def test_train_created_checkpoints(workspace):
    assert workspace["ckpt1"].exists()
    assert workspace["ckpt2"].exists()
    assert (workspace["root"] / "s1.run" / "log.tsv").exists()


def test_train_missing_config_file(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "absent.cfg")])
    assert rc == 3
    assert "error: config:" in capsys.readouterr().err


def test_train_rejects_malformed_config(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nstage = warp_drive\n")
    assert main(["train", "--config", str(bad)]) == 3


def test_sample_stage1_writes_rgbd_pair(workspace, tmp_path):
    out = tmp_path / "out"
    rc = main(
        [
            "sample",
            "--stage",
            "1",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--input",
            str(workspace["rgb"]),
            "--seed",
            "4",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["subject_stage1.pfm", "subject_stage1.png"]
    result = dataio.read_rgbd_files(
        out / "subject_stage1.png", out / "subject_stage1.pfm"
    )
    assert result.resolution == (8, 8)


def test_sample_stage2_emits_baselines(workspace, tmp_path):
    out = tmp_path / "out"
    rc = main(
        [
            "sample",
            "--stage",
            "2",
            "--ckpt",
            str(workspace["ckpt2"]),
            "--input",
            str(workspace["rgbd"]),
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["low_bilinear.pfm", "low_nearest.pfm", "low_stage2.pfm"]
    assert dataio.read_pfm(out / "low_stage2.pfm").shape == (16, 16)


def test_sample_full_with_pointcloud(workspace, tmp_path):
    out = tmp_path / "out"
    rc = main(
        [
            "sample",
            "--stage",
            "full",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--ckpt",
            str(workspace["ckpt2"]),
            "--input",
            str(workspace["rgb"]),
            "--seed",
            "4",
            "--out",
            str(out),
            "--emit-pointcloud",
            "--drop-background",
        ]
    )
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["subject_full.pfm", "subject_full.png", "subject_full.xyz"]
    cloud = (out / "subject_full.xyz").read_text().splitlines()
    if cloud:
        assert len(cloud[0].split()) == 6


def test_sample_pointcloud_per_output(workspace, tmp_path):
    out = tmp_path / "out"
    rc = main(
        [
            "sample",
            "--stage",
            "1",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--input",
            str(workspace["rgb"]),
            "--out",
            str(out),
            "--emit-pointcloud",
        ]
    )
    assert rc == 0
    assert len(list(out.glob("*.xyz"))) == 1


def test_sample_wrong_checkpoint_count(workspace, tmp_path, capsys):
    rc = main(
        [
            "sample",
            "--stage",
            "full",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--input",
            str(workspace["rgb"]),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 3
    assert "exactly 2" in capsys.readouterr().err


def test_sample_unreadable_input(workspace, tmp_path, capsys):
    rc = main(
        [
            "sample",
            "--stage",
            "1",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--input",
            str(tmp_path / "nope.png"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 4
    assert "error: data:" in capsys.readouterr().err


def test_eval_writes_report(workspace, tmp_path):
    report = tmp_path / "report.tsv"
    rc = main(
        [
            "eval",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--data",
            str(workspace["ds"]),
            "--out",
            str(report),
        ]
    )
    assert rc == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "step\tmae\tmse\tiou\tvlb_bits_per_dim"
    assert lines[1].startswith("4\t")


def test_eval_missing_dataset(workspace, tmp_path):
    rc = main(
        [
            "eval",
            "--ckpt",
            str(workspace["ckpt1"]),
            "--data",
            str(tmp_path / "absent"),
            "--out",
            str(tmp_path / "r.tsv"),
        ]
    )
    assert rc == 4


def test_unknown_flag_is_usage_error(workspace):
    assert main(["train", "--config", "x", "--frobnicate"]) == 2


def test_unknown_subcommand_is_usage_error():
    assert main(["transmogrify"]) == 2


def test_console_script_help_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "depthdiff.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "make-synthetic" in proc.stdout

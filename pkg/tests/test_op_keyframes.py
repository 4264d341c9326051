import json

import numpy as np
import pytest

from smdm import motion, storage
from smdm.motion import SkeletonLayout


@pytest.fixture
def motion_file(tmp_path):
    layout = SkeletonLayout()
    seq = motion.gen_class_motion("jump", 40, layout, np.random.default_rng(5))
    return storage.save_motion(tmp_path / "jump.smdm", seq, layout)


def test_keyframes(cli_invoker, motion_file, tmp_path):
    out = tmp_path / "kf"

    result = cli_invoker("keyframes", motion_file, "--out", out, "--rate", "0.75")

    report = json.loads((out / "jump.keyframes.json").read_text())
    svg = (out / "jump.keyframes.svg").read_text()

    assert result.exit_code == 0
    assert report["n_frames"] == 40
    assert report["reduction_rate"] == 0.75
    assert len(report["keyframes"]) == 10
    assert report["keyframes"][0] == 0
    assert report["keyframes"][-1] == 39
    assert sorted(report["removal_order"]) == list(range(1, 39))
    assert len(report["areas"]) == 38
    assert "<svg" in svg
    assert "kept 10 of 40 frames" in result.output


def test_keyframes_removal_order_defines_mask(cli_invoker, motion_file, tmp_path):
    cli_invoker("keyframes", motion_file, "--out", tmp_path / "kf", "--rate", "0.5")

    report = json.loads((tmp_path / "kf" / "jump.keyframes.json").read_text())

    removed = set(report["removal_order"][: 40 - len(report["keyframes"])])
    assert sorted(set(range(40)) - removed) == report["keyframes"]


def test_keyframes_rate_zero_keeps_all(cli_invoker, motion_file, tmp_path):
    result = cli_invoker("keyframes", motion_file, "--out", tmp_path / "kf", "--rate", "0")

    report = json.loads((tmp_path / "kf" / "jump.keyframes.json").read_text())

    assert result.exit_code == 0
    assert report["keyframes"] == list(range(40))


def test_keyframes_svg_is_reproducible(cli_invoker, motion_file, tmp_path):
    svg = tmp_path / "kf" / "jump.keyframes.svg"

    cli_invoker("keyframes", motion_file, "--out", tmp_path / "kf")
    first = svg.read_bytes()
    cli_invoker("keyframes", motion_file, "--out", tmp_path / "kf")

    assert svg.read_bytes() == first


def test_keyframes_missing_file(cli_invoker, tmp_path):
    result = cli_invoker("keyframes", tmp_path / "nope.smdm", "--out", tmp_path)

    assert result.exit_code == 3
    assert "Motion file not found" in result.output


def test_keyframes_not_a_motion_file(cli_invoker, tmp_path, tiny_dataset):
    result = cli_invoker("keyframes", tiny_dataset, "--out", tmp_path)

    assert result.exit_code == 3
    assert "malformed file" in result.output


def test_keyframes_motion_without_layout(cli_invoker, tmp_path):
    broken = storage.write_container(tmp_path / "broken.smdm", "motion", {"fps": 20}, {"frames": np.zeros((8, 2))})

    result = cli_invoker("keyframes", broken, "--out", tmp_path / "kf")

    assert result.exit_code == 3
    assert "malformed file at byte 14" in result.output
    assert "'layout'" in result.output
    assert "Unknown exception" not in result.output

"""End-to-end command tests driven through ``main(argv)``: artifact
layout, byte determinism, and the documented exit-code partition."""

import json

import numpy as np
import pytest

from transferdet.cli import (
    EXIT_CONFIG,
    EXIT_GRADCHECK,
    EXIT_MALFORMED,
    EXIT_MISSING_INPUT,
    EXIT_UNKNOWN_EXPERIMENT,
    GRADCHECKS,
    _parse_seeds,
    main,
    parse_overrides,
    run_gradcheck_suite,
)
from transferdet.evaluation import Detection, write_detections_csv
from transferdet.geometry import BBox
from transferdet.model import load_model
from transferdet.pipeline import StageConfig
from transferdet.synthworld import Scene, WorldConfig, make_world, save_scenes

# Every stage length is pinned tiny through flags, so these tests never
# depend on the production training defaults.
SOURCE_ARGS = ["--epochs", "2", "--set", "source_scenes=20"]


@pytest.fixture(scope="module")
def train_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    assert main(
        ["train", "source", "--seed", "7", "--out-dir", str(root / "source")]
        + SOURCE_ARGS
    ) == 0
    assert main([
        "train", "lstd", "--seed", "7", "--shots", "1", "--epochs", "5",
        "--source-model", str(root / "source" / "source_model.txt"),
        "--out-dir", str(root / "lstd"),
    ]) == 0
    return root


def warmup_path(root):
    return str(root / "lstd" / "lstd_model.txt")


# --- argument plumbing ---------------------------------------------------


def test_parse_seeds():
    assert _parse_seeds(None) is None
    assert _parse_seeds("0:3") == [0, 1, 2]
    assert _parse_seeds("4, 1,9") == [4, 1, 9]


def test_parse_overrides_types():
    got = parse_overrides(
        ["shots_per_class=4", "rol.phi_obj=0.45", "enable_bd=false"],
        StageConfig(),
    )
    assert got == {
        "shots_per_class": 4, "rol.phi_obj": 0.45, "enable_bd": False
    }
    with pytest.raises(ValueError, match="expected key=value"):
        parse_overrides(["shots_per_class"], StageConfig())
    with pytest.raises(ValueError, match="unknown config field"):
        parse_overrides(["bogus=1"], StageConfig())
    with pytest.raises(ValueError, match="'enable_bd'"):
        parse_overrides(["enable_bd=maybe"], StageConfig())


# --- world ---------------------------------------------------------------


def test_world_outputs_and_determinism(tmp_path, capsys):
    argv = ["world", "--seed", "3", "--count", "4"]
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "seed 3" in out
    for name in ("world.txt", "scenes.txt", "manifest.json"):
        assert (tmp_path / "a" / name).exists()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"] == [3]
    assert manifest["subcommand"] == "world"
    for name in manifest["outputs"]:
        assert (tmp_path / "a" / name).exists()
    assert main(argv + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("world.txt", "scenes.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_world_draws_seed_when_omitted(tmp_path, capsys):
    assert main(["world", "--count", "2", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    seed = int(out.split("seed ", 1)[1].split()[0])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"] == [seed]


def test_world_invalid_jitter_exits_2(tmp_path, capsys):
    code = main([
        "world", "--seed", "1", "--set", "jitter=0.9",
        "--out-dir", str(tmp_path),
    ])
    assert code == EXIT_CONFIG
    assert "jitter" in capsys.readouterr().err


def test_world_missing_config_file_exits_3(tmp_path):
    code = main([
        "world", "--seed", "1", "--config", str(tmp_path / "none.cfg"),
        "--out-dir", str(tmp_path),
    ])
    assert code == EXIT_MISSING_INPUT


def test_world_config_file_applies(tmp_path):
    cfg = tmp_path / "world.cfg"
    cfg.write_text("# comment line\nproposals_per_scene=16\n")
    assert main([
        "world", "--seed", "2", "--count", "1", "--config", str(cfg),
        "--out-dir", str(tmp_path / "w"),
    ]) == 0
    text = (tmp_path / "w" / "scenes.txt").read_text()
    assert text.count("\nprop ") == 16


# --- train ---------------------------------------------------------------


def test_train_source_deterministic_bytes(tmp_path, train_root):
    assert main(
        ["train", "source", "--seed", "7", "--out-dir", str(tmp_path)]
        + SOURCE_ARGS
    ) == 0
    for name in ("source_model.txt", "source_losses.csv"):
        assert (tmp_path / name).read_bytes() == (
            train_root / "source" / name
        ).read_bytes()


def test_train_lstd_without_source_exits_3(capsys):
    assert main(["train", "lstd", "--seed", "1"]) == EXIT_MISSING_INPUT
    assert "source checkpoint" in capsys.readouterr().err


def test_train_missing_checkpoint_file_exits_3(tmp_path):
    code = main([
        "train", "lstd", "--seed", "1",
        "--source-model", str(tmp_path / "nope.txt"),
    ])
    assert code == EXIT_MISSING_INPUT


def test_train_garbage_checkpoint_exits_4(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("not a model\n")
    code = main([
        "train", "lstd", "--seed", "1", "--source-model", str(bad),
        "--out-dir", str(tmp_path),
    ])
    assert code == EXIT_MALFORMED


def test_train_wstd_zero_epochs_keeps_input_params(tmp_path, train_root):
    assert main([
        "train", "wstd", "--seed", "7", "--epochs", "0",
        "--weak-scenes", "2", "--warmup-model", warmup_path(train_root),
        "--out-dir", str(tmp_path),
    ]) == 0
    warm = load_model(warmup_path(train_root))
    out = load_model(tmp_path / "wstd_model.txt")
    assert np.array_equal(out.backbone.map, warm.backbone.map)
    assert np.array_equal(out.main_head.weights, warm.main_head.weights)
    assert np.array_equal(out.sdk_head.weights, warm.sdk_head.weights)
    for head in out.rol_heads:
        assert np.array_equal(head.weights, warm.main_head.weights)


def test_train_wstd_labeller_flag(tmp_path, train_root):
    for labeller in ("rol", "oicr"):
        assert main([
            "train", "wstd", "--seed", "7", "--epochs", "1",
            "--weak-scenes", "2", "--labeller", labeller,
            "--warmup-model", warmup_path(train_root),
            "--out-dir", str(tmp_path / labeller),
        ]) == 0
    rol = (tmp_path / "rol" / "wstd_model.txt").read_bytes()
    oicr = (tmp_path / "oicr" / "wstd_model.txt").read_bytes()
    assert rol != oicr


# --- eval ----------------------------------------------------------------


def _eval_fixture(tmp_path):
    """One scene, one class with two GT boxes, and a detections file whose
    flag sequence is TP, FP, TP from the top score down."""
    world = make_world(WorldConfig(seed=2))
    gt1 = BBox(0.10, 0.10, 0.35, 0.35)
    gt2 = BBox(0.60, 0.60, 0.85, 0.85)
    scene = Scene(
        raw_grid=np.zeros((8, 8, world.config.raw_dim)),
        gt=((0, gt1), (0, gt2)),
        proposals=(gt1, gt2),
        annotation_mode="full",
        image_label=np.array([1, 0, 0, 0]),
        domain="target",
    )
    scenes_path = tmp_path / "scenes.txt"
    save_scenes(scenes_path, world, [scene])
    detections = [
        Detection(0, 0, gt1, 0.9),
        Detection(0, 0, BBox(0.1, 0.6, 0.35, 0.85), 0.5),
        Detection(0, 0, gt2, 0.1),
    ]
    det_path = tmp_path / "detections.csv"
    write_detections_csv(det_path, detections)
    return scenes_path, det_path


def _eval_map(tmp_path, capsys, extra=()):
    scenes_path, det_path = _eval_fixture(tmp_path)
    assert main([
        "eval", "--detections", str(det_path), "--scenes", str(scenes_path),
        "--out-dir", str(tmp_path), *extra,
    ]) == 0
    return float(capsys.readouterr().out.split("mAP ", 1)[1])


def test_eval_known_fixture(tmp_path, capsys):
    got = _eval_map(tmp_path, capsys)
    assert abs(got - (6.0 + 5.0 * (2.0 / 3.0)) / 11.0) <= 1e-9
    rows = (tmp_path / "eval.csv").read_text().strip().split("\n")
    assert rows[0] == "class,ap"
    assert rows[2:5] == ["1,excluded", "2,excluded", "3,excluded"]


def test_eval_ap_method_changes_interpolation(tmp_path, capsys):
    got = _eval_map(tmp_path, capsys, extra=("--ap-method", "all_points"))
    assert abs(got - (0.5 + 0.5 * (2.0 / 3.0))) <= 1e-9


def test_eval_empty_detections_all_zero(tmp_path, capsys):
    scenes_path, det_path = _eval_fixture(tmp_path)
    det_path.write_text("scene_id,class,x1,y1,x2,y2,score\n")
    assert main([
        "eval", "--detections", str(det_path), "--scenes", str(scenes_path),
        "--out-dir", str(tmp_path),
    ]) == 0
    assert float(capsys.readouterr().out.split("mAP ", 1)[1]) == 0.0


def test_eval_malformed_row_exits_4(tmp_path, capsys):
    scenes_path, det_path = _eval_fixture(tmp_path)
    det_path.write_text(
        "scene_id,class,x1,y1,x2,y2,score\n"
        "0,0,0.1,0.1,0.2,0.2,0.9\n"
        "0,0,oops,0.1,0.2,0.2,0.5\n"
    )
    code = main([
        "eval", "--detections", str(det_path), "--scenes", str(scenes_path),
        "--out-dir", str(tmp_path),
    ])
    assert code == EXIT_MALFORMED
    assert "line 3" in capsys.readouterr().err


def test_eval_missing_inputs_exit_3(tmp_path):
    scenes_path, det_path = _eval_fixture(tmp_path)
    assert main([
        "eval", "--detections", str(tmp_path / "none.csv"),
        "--scenes", str(scenes_path), "--out-dir", str(tmp_path),
    ]) == EXIT_MISSING_INPUT
    assert main([
        "eval", "--detections", str(det_path), "--out-dir", str(tmp_path),
    ]) == EXIT_MISSING_INPUT


# --- experiment ----------------------------------------------------------

EXPERIMENT_ARGS = [
    "--set", "source_scenes=20", "--set", "source_epochs=2",
    "--set", "lstd_epochs=4", "--set", "wstd_epochs=1",
    "--set", "weak_scenes_per_class=2", "--set", "eval_scenes=4",
]


def test_experiment_unknown_name_exits_5(tmp_path, capsys):
    code = main(["experiment", "table9", "--out-dir", str(tmp_path)])
    assert code == EXIT_UNKNOWN_EXPERIMENT
    err = capsys.readouterr().err
    assert "fig7, fig9, table3, table5, table6" in err


def test_experiment_runs_and_reproduces(tmp_path, capsys):
    argv = ["experiment", "fig7", "--seeds", "0"] + EXPERIMENT_ARGS
    assert main(argv + ["--out-dir", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    for cell in ("sdk_without", "sdk_unweighted", "sdk_weighted"):
        assert f"fig7/{cell}: mAP" in out
    for name in (
        "fig7.csv", "fig7_summary.csv", "fig7_manifest.json", "manifest.json"
    ):
        assert (tmp_path / "a" / name).exists()
    assert main(argv + ["--out-dir", str(tmp_path / "b")]) == 0
    for name in ("fig7.csv", "fig7_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"] == [0]


# --- gradcheck -----------------------------------------------------------


def test_gradcheck_suite_unit():
    results = run_gradcheck_suite(["bd"], instances=2)
    assert [name for name, _, _ in results] == ["bd"]
    assert all(passed for _, _, passed in results)
    with pytest.raises(ValueError, match="unknown loss"):
        run_gradcheck_suite(["nope"], instances=1)
    assert len(GRADCHECKS) == 8


def test_gradcheck_default_passes(tmp_path, capsys):
    assert main([
        "gradcheck", "--instances", "3", "--out-dir", str(tmp_path)
    ]) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().strip().split("\n")
    assert rows[0] == "loss,max_relative_error,passed"
    assert len(rows) == 1 + len(GRADCHECKS)
    assert all(row.endswith(",true") for row in rows[1:])
    assert capsys.readouterr().out.count("ok") == len(GRADCHECKS)


def test_gradcheck_only_restricts(tmp_path):
    assert main([
        "gradcheck", "--only", "bd", "--instances", "2",
        "--out-dir", str(tmp_path),
    ]) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().strip().split("\n")
    assert len(rows) == 2 and rows[1].startswith("bd,")
    assert main([
        "gradcheck", "--only", "nope", "--out-dir", str(tmp_path)
    ]) == EXIT_CONFIG


def test_gradcheck_unreachable_tolerance_exits_6(tmp_path, capsys):
    code = main([
        "gradcheck", "--only", "sdk", "--instances", "1",
        "--tolerance", "1e-15", "--out-dir", str(tmp_path),
    ])
    assert code == EXIT_GRADCHECK
    assert "failed" in capsys.readouterr().err

"""Synthetic fixtures and the command-line pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest

from cedg import cli, fixtures
from cedg.domainforge import TARGET_CATEGORIES, TOPIC_TABLE, meta_path, read_dataset
from cedg.models import load_bundle
from cedg.ppm import read_ppm


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    fixtures.make_fixtures(out, seed=0)
    return out


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, fixture_dir):
    """One tiny CLI pipeline run reused by the command tests."""
    work = tmp_path_factory.mktemp("pipe")
    small = work / "small"
    assert cli.main(["make-fixtures", "--out", str(small), "--corpus-images", "15",
                     "--train-count", "60", "--val-count", "30"]) == 0
    assert cli.main(["forge", "--manifest", str(small / "manifest.jsonl"),
                     "--proposals", str(small / "proposals.jsonl"),
                     "--out", str(work / "forged.bin")]) == 0
    assert cli.main(["pretrain-teacher", "--train", str(small / "train.bin"),
                     "--val", str(small / "val.bin"), "--out", str(work / "teacher.ckpt"),
                     "--epochs", "1", "--lr", "0.01", "--batch-size", "32"]) == 0
    assert cli.main(["distill", "--teacher", str(work / "teacher.ckpt"),
                     "--train", str(small / "train.bin"),
                     "--out", str(work / "student.ckpt"), "--epochs", "1",
                     "--lr", "0.005", "--batch-size", "32",
                     "--spear-blocks", "1,1,1", "--spear-widths", "2,2,2"]) == 0
    assert cli.main(["train", "--student", str(work / "student.ckpt"),
                     "--train", str(work / "forged.bin"),
                     "--val", str(small / "val.bin"), "--out", str(work / "model.ckpt"),
                     "--epochs", "1,1,1", "--lr", "0.01", "--batch-size", "32",
                     "--enlarged-hidden", "256,16", "--augment", "none",
                     "--report", str(work / "train_report.json")]) == 0
    return work


# -- fixtures ---------------------------------------------------------------------


def test_fixtures_are_byte_identical_per_seed(tmp_path, fixture_dir):
    again = tmp_path / "again"
    fixtures.make_fixtures(again, seed=0)
    a = _tree_bytes(fixture_dir)
    b = _tree_bytes(again)
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between runs"


def test_fixtures_change_with_seed(tmp_path, fixture_dir):
    other = tmp_path / "other"
    fixtures.make_fixtures(other, seed=1)
    assert (other / "train.bin").read_bytes() != (fixture_dir / "train.bin").read_bytes()


def test_fixture_manifest_covers_all_topics(fixture_dir):
    topics = set()
    for line in (fixture_dir / "manifest.jsonl").read_text().splitlines():
        topics.add(json.loads(line)["topic"])
    assert topics == set(TOPIC_TABLE)


def test_fixture_datasets_have_expected_shape(fixture_dir):
    train = read_dataset(fixture_dir / "train.bin")
    val = read_dataset(fixture_dir / "val.bin")
    assert len(train) == 400 and len(val) == 200
    assert train.categories == TARGET_CATEGORIES
    assert (train.counts() > 0).all()
    meta = json.loads(meta_path(fixture_dir / "train.bin").read_text())
    assert meta["provenance"]["seed"] == 0


def test_fixture_classes_are_linearly_separable(fixture_dir):
    train = read_dataset(fixture_dir / "train.bin")
    val = read_dataset(fixture_dir / "val.bin")
    acc = fixtures.linear_probe_accuracy(train, val)
    assert acc > 0.9


def test_fixture_corpus_images_are_valid_ppm(fixture_dir):
    files = sorted((fixture_dir / "corpus").glob("*.ppm"))
    assert len(files) == 120
    img = read_ppm(files[0])
    assert img.shape == (3, 64, 64) and img.dtype == np.uint8


def test_fixture_proposals_reference_manifest_images(fixture_dir):
    names = {json.loads(l)["image"]
             for l in (fixture_dir / "manifest.jsonl").read_text().splitlines()}
    for line in (fixture_dir / "proposals.jsonl").read_text().splitlines():
        obj = json.loads(line)
        assert obj["image"] in names
        for r in obj["regions"]:
            assert set(r) == {"x", "y", "w", "h", "category", "score"}
            assert 0.0 <= r["score"] <= 1.0


def test_fixture_counts_validation(tmp_path):
    from cedg.errors import ConfigError
    with pytest.raises(ConfigError):
        fixtures.make_fixtures(tmp_path / "x", corpus_images=0)


# -- forge command ------------------------------------------------------------------


def test_forge_output_loads_and_reruns_identically(pipeline_dir, fixture_dir, tmp_path):
    ds = read_dataset(pipeline_dir / "forged.bin")
    assert len(ds) > 0
    assert ds.categories == TARGET_CATEGORIES
    meta = json.loads(meta_path(pipeline_dir / "forged.bin").read_text())
    assert meta["provenance"]["score_threshold"] == 0.7

    out2 = tmp_path / "forged2.bin"
    assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                     "--proposals", str(fixture_dir / "proposals.jsonl"),
                     "--out", str(out2)]) == 0
    out3 = tmp_path / "forged3.bin"
    assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                     "--proposals", str(fixture_dir / "proposals.jsonl"),
                     "--out", str(out3)]) == 0
    assert out2.read_bytes() == out3.read_bytes()


def test_forge_threshold_flag_prunes_regions(fixture_dir, tmp_path):
    sizes = {}
    for lam in ("0.5", "0.9"):
        out = tmp_path / f"f{lam}.bin"
        assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                         "--proposals", str(fixture_dir / "proposals.jsonl"),
                         "--out", str(out), "--lambda", lam]) == 0
        sizes[lam] = len(read_dataset(out))
    assert sizes["0.5"] >= sizes["0.9"]


# -- model commands -------------------------------------------------------------------


def test_pretrained_teacher_checkpoint_loads(pipeline_dir):
    bundle = load_bundle(pipeline_dir / "teacher.ckpt")
    assert bundle.num_classes == 4
    assert bundle.base_spec.conv_layer_count() + bundle.mid_spec.conv_layer_count() == 19


def test_distilled_student_shares_teacher_stem(pipeline_dir):
    teacher = load_bundle(pipeline_dir / "teacher.ckpt")
    student = load_bundle(pipeline_dir / "student.ckpt")
    for k, v in teacher.base.state().items():
        np.testing.assert_array_equal(student.base.state()[k], v)
    assert student.hc is None


def test_trained_model_has_classifier_and_report(pipeline_dir):
    bundle = load_bundle(pipeline_dir / "model.ckpt")
    assert bundle.hc is not None
    report = json.loads((pipeline_dir / "train_report.json").read_text())
    for key in ("command", "build", "seed", "timestamp", "config"):
        assert key in report, f"report missing {key}"
    assert report["command"] == "train"
    assert report["config"]["epochs"] == [1, 1, 1]
    for step in ("step1", "step2", "step3"):
        assert "best_epoch" in report[step]
    assert "ave" in report["final"]


def test_eval_command_reports_metrics(pipeline_dir, fixture_dir, capsys):
    rc = cli.main(["eval", "--dataset", str(fixture_dir / "val.bin"),
                   "--checkpoint", str(pipeline_dir / "model.ckpt")])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) >= {"confusion", "per_class_accuracy", "ave", "er"}
    cm = np.asarray(payload["confusion"])
    assert cm.shape == (4, 4) and cm.sum() == 200
    assert 0.0 <= payload["ave"] <= 1.0


def test_baseline_command_runs(pipeline_dir, capsys):
    work = pipeline_dir
    small = work / "small"
    rc = cli.main(["baseline", "--train", str(work / "forged.bin"),
                   "--val", str(small / "val.bin"), "--out", str(work / "bl.ckpt"),
                   "--patience", "1", "--max-epochs", "1,1", "--batch-size", "32",
                   "--spear-blocks", "1,1,1", "--spear-widths", "2,2,2",
                   "--augment", "none"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert "final_ave" in payload
    assert load_bundle(work / "bl.ckpt").hc is not None


def test_cost_command_matches_static_anchors(capsys):
    assert cli.main(["cost", "--arch", "resnet20"]) == 0
    teacher = json.loads(capsys.readouterr().out)
    assert teacher["total_macs"] == 40_813_184
    assert teacher["total_params"] == 272_474
    assert teacher["conv_layers"] == 19

    assert cli.main(["cost", "--arch", "spearnet"]) == 0
    student = json.loads(capsys.readouterr().out)
    assert student["total_macs"] == 4_604_544
    assert student["total_params"] == 102_714
    assert student["conv_layers"] == 46
    assert student["total_macs"] <= 7_000_000
    ratio = round(teacher["total_macs"] / student["total_macs"], 2)
    assert ratio >= 5.0


def test_augment_preview_writes_stage_images(fixture_dir, tmp_path):
    src = sorted((fixture_dir / "corpus").glob("*.ppm"))[0]
    out = tmp_path / "stages"
    rc = cli.main(["augment-preview", "--image", str(src), "--out", str(out)])
    assert rc == 0
    files = sorted(out.glob("*.ppm"))
    assert [f.name.split("_", 1)[1] for f in files][:3] == \
        ["input.ppm", "equalized.ppm", "normalized.ppm"]
    for f in files:
        read_ppm(f)  # parses cleanly


# -- determinism, config, and exit codes -----------------------------------------------


def test_pretrain_is_idempotent_given_seed(fixture_dir, pipeline_dir, tmp_path):
    small = pipeline_dir / "small"
    outs = []
    for name in ("t1.ckpt", "t2.ckpt"):
        out = tmp_path / name
        assert cli.main(["pretrain-teacher", "--train", str(small / "train.bin"),
                         "--val", str(small / "val.bin"), "--out", str(out),
                         "--epochs", "1", "--lr", "0.01", "--batch-size", "32",
                         "--seed", "5"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_flag_precedence(fixture_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda": 0.95}))
    out_cfg = tmp_path / "cfg.bin"
    assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                     "--proposals", str(fixture_dir / "proposals.jsonl"),
                     "--out", str(out_cfg), "--config", str(cfg)]) == 0
    capsys.readouterr()
    meta = json.loads(meta_path(out_cfg).read_text())
    assert meta["provenance"]["score_threshold"] == 0.95  # config beats default

    out_flag = tmp_path / "flag.bin"
    assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                     "--proposals", str(fixture_dir / "proposals.jsonl"),
                     "--out", str(out_flag), "--config", str(cfg),
                     "--lambda", "0.8"]) == 0
    capsys.readouterr()
    meta = json.loads(meta_path(out_flag).read_text())
    assert meta["provenance"]["score_threshold"] == 0.8  # flag beats config


def test_reports_stamp_build_seed_and_config(fixture_dir, tmp_path):
    report_path = tmp_path / "r.json"
    assert cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                     "--proposals", str(fixture_dir / "proposals.jsonl"),
                     "--out", str(tmp_path / "f.bin"), "--seed", "3",
                     "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["seed"] == 3
    assert report["build"].startswith("cedg-")
    assert report["config"]["lambda"] == 0.7
    assert "timestamp" in report


def test_exit_code_two_for_config_errors(fixture_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                   "--proposals", str(fixture_dir / "proposals.jsonl"),
                   "--out", str(tmp_path / "x.bin"), "--config", str(bad)])
    assert rc == 2
    rc = cli.main(["forge", "--manifest", str(fixture_dir / "manifest.jsonl"),
                   "--proposals", str(fixture_dir / "proposals.jsonl"),
                   "--out", str(tmp_path / "x.bin"), "--lambda", "1.5"])
    assert rc == 2


def test_exit_code_three_for_missing_data(tmp_path):
    rc = cli.main(["eval", "--dataset", str(tmp_path / "absent.bin"),
                   "--checkpoint", str(tmp_path / "absent.ckpt")])
    assert rc == 3


def test_argparse_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--variant", "B9"])
    assert e.value.code == 2
    capsys.readouterr()


def test_version_prints_build_id(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.startswith("cedg-")

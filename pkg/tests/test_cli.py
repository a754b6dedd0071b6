import hashlib
import json
from pathlib import Path

import pytest

from bigl.cli import main
from bigl.trainer import read_log

SMALL = ["--set", "image_size=[32,32]", "--width", "4", "--set", "gen_width=2",
         "--set", "disc_width=2", "--batch-size", "2", "--set", "ckpt_every=1"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--out", str(wd / "ph"), "--cases", "6", "--size", "32",
                 "--slices", "3", "--seed", "7"]) == 0
    return wd


def test_phantom_is_reproducible_and_validated(workdir, tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "again"), "--cases", "6", "--size", "32",
                 "--slices", "3", "--seed", "7"]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(workdir / "ph")
    assert main(["phantom", "--out", str(tmp_path / "bad"), "--cases", "0"]) == 2


def test_usage_errors(workdir, tmp_path):
    assert main(["train-syn", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert main(["train-uda", "--data", str(workdir / "ph"), "--out", str(tmp_path / "r"),
                 "--epochs", "1", *SMALL]) == 2  # no stage-1 checkpoints
    assert main(["train-syn", "--data", str(workdir / "ph"), "--out", str(tmp_path / "r"),
                 "--set", "bogus=1"]) == 2
    assert main(["train-syn", "--data", str(workdir / "ph"), "--out", str(tmp_path / "r"),
                 "--config", str(tmp_path / "none.json")]) == 2
    assert main(["report"]) == 2
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2


def test_config_precedence(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"syn_epochs": 5, "seed": 3, "batch_size": 4}))
    out = tmp_path / "r"
    assert main(["train-syn", "--data", str(workdir / "ph"), "--out", str(out), "--config", str(cfg),
                 "--syn-epochs", "0", *SMALL]) == 0
    snap = json.loads((out / "manifest.json").read_text())["stages"]["stage1"]["config"]
    assert snap["syn_epochs"] == 0 and snap["seed"] == 3 and snap["batch_size"] == 2
    assert snap["lambda_out"] == 0.001


def test_zero_epoch_training_emits_initialisation(workdir, tmp_path):
    out = tmp_path / "r"
    assert main(["train-syn", "--data", str(workdir / "ph"), "--out", str(out),
                 "--syn-epochs", "0", *SMALL]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["stages"]["stage1"]["status"] == "complete"
    assert man["stages"]["stage1"]["paths"]["g_s2t"] == "stage1/g_s2t_0000.ckpt"


@pytest.fixture(scope="module")
def trained(workdir):
    run, so = workdir / "run", workdir / "so"
    data = str(workdir / "ph")
    assert main(["train-syn", "--data", data, "--out", str(run), "--syn-epochs", "1", *SMALL]) == 0
    assert main(["train-uda", "--data", data, "--out", str(run), "--epochs", "2", *SMALL]) == 0
    assert main(["train-uda", "--data", data, "--out", str(so), "--epochs", "2", "--source-only",
                 *SMALL]) == 0
    return run, so


def test_manifest_paths_exist(trained):
    for run in trained:
        man = json.loads((run / "manifest.json").read_text())
        assert man["run_id"] == run.name and len(man["code_hash"]) == 40
        for stage in man["stages"].values():
            assert stage["status"] == "complete"
            for rel in stage["paths"].values():
                assert (run / rel).exists(), rel


def test_source_only_lists_segnet_only(trained):
    _, so = trained
    paths = json.loads((so / "manifest.json").read_text())["stages"]["source_only"]["paths"]
    assert not any(k.startswith("disc") for k in paths)
    assert "segnet" in paths
    assert not list((so / "stage2").glob("disc_*"))


def test_training_log_has_every_component(trained):
    run, _ = trained
    records = read_log(run / "logs" / "stage2.jsonl")
    assert records
    for key in ("seg_s", "seg_syn_s", "output_consis", "feat_consis", "att_consis_pos",
                "att_consis_cha", "adv_feat_s", "adv_feat_t", "adv_att_s", "adv_att_t",
                "total", "iteration", "lr"):
        assert key in records[0]
    assert [r["iteration"] for r in records] == list(range(1, len(records) + 1))


def test_resume_of_completed_stage_is_a_no_op(trained, workdir):
    run, _ = trained
    before = tree_digest(run / "stage2")
    assert main(["train-uda", "--data", str(workdir / "ph"), "--out", str(run), "--epochs", "2",
                 "--resume", *SMALL]) == 0
    assert tree_digest(run / "stage2") == before
    before = tree_digest(run / "stage1")
    assert main(["train-syn", "--data", str(workdir / "ph"), "--out", str(run), "--syn-epochs", "1",
                 "--resume", *SMALL]) == 0
    assert tree_digest(run / "stage1") == before


def test_eval_and_report(trained, workdir, tmp_path, capsys):
    run, so = trained
    data = str(workdir / "ph")
    assert main(["eval", "--data", data, "--checkpoint", str(run / "stage2" / "segnet_0002.ckpt"),
                 "--out", str(run / "eval"), "--split", "all", "--overlays"]) == 0
    assert main(["eval", "--data", data, "--checkpoint", str(so / "stage2" / "segnet_0002.ckpt"),
                 "--out", str(so / "eval"), "--split", "all"]) == 0
    assert list((run / "eval" / "overlays").glob("*.png"))
    capsys.readouterr()
    assert main(["report", str(so), str(run), "--out", str(tmp_path / "cmp")]) == 0
    text = capsys.readouterr().out
    dsc_block = text.split("\n\n")[0].splitlines()
    assert dsc_block[1].startswith("so") and dsc_block[2].startswith("run")
    assert "*" in text and (tmp_path / "cmp" / "comparison.tex").exists()
    assert main(["report", str(run)]) == 0
    assert len(capsys.readouterr().out.split("\n\n")[0].splitlines()) == 2


def test_report_rejects_region_mismatch(trained, workdir, tmp_path):
    run, _ = trained
    ck = str(run / "stage2" / "segnet_0002.ckpt")
    data = str(workdir / "ph")
    assert main(["eval", "--data", data, "--checkpoint", ck, "--out", str(tmp_path / "a"), "--split", "all"]) == 0
    assert main(["eval", "--data", data, "--checkpoint", ck, "--out", str(tmp_path / "b"), "--split", "all",
                 "--regions", "WT,TC"]) == 0
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b")]) == 2


def test_self_test_gives_perfect_rows(workdir, tmp_path, capsys):
    assert main(["eval", "--data", str(workdir / "ph"), "--self-test", "--out", str(tmp_path / "st"),
                 "--split", "all", "--image-size", "32", "32", "--latex"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1] == "DSC (%) & 100.00$\\pm$0.00 & 100.00$\\pm$0.00 & 100.00$\\pm$0.00 \\\\"

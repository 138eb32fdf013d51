"""CLI contract: exit codes, artifacts, reproducibility."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from promptscene.cli import main
from promptscene.config import config_to_dict
from promptscene.dataio import read_dataset
from promptscene.model import Pipeline
from promptscene.train import load_checkpoint

from conftest import tiny_config


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a tiny config file and generated dataset."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(steps=2, batch_size=2)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config_to_dict(cfg) | {"seed": cfg.seed}))
    data_path = root / "data.jsonl"
    rc = main(["gen-data", "--scenes", "2", "--out", str(data_path),
               "--config", str(cfg_path)])
    assert rc == 0
    return {"root": root, "cfg": cfg_path, "data": data_path}


def test_gen_data_outputs(ws, capsys):
    scenes, tasks = read_dataset(ws["data"])
    assert len(scenes) == 2
    summary = json.loads(Path(str(ws["data"]) + ".summary.json").read_text())
    assert summary["scenes"] == 2
    assert summary["tasks"] == len(tasks)
    assert sum(summary["task_counts"].values()) == len(tasks)
    assert "config_hash" in summary
    from promptscene.vocab import Vocabulary
    vocab = Vocabulary.load(str(ws["data"]) + ".vocab.txt")
    assert vocab.tokens == Vocabulary().tokens


def test_gen_data_same_seed_same_checksum(ws, tmp_path):
    out2 = tmp_path / "again.jsonl"
    rc = main(["gen-data", "--scenes", "2", "--out", str(out2),
               "--config", str(ws["cfg"])])
    assert rc == 0
    a = hashlib.sha256(Path(ws["data"]).read_bytes()).hexdigest()
    b = hashlib.sha256(out2.read_bytes()).hexdigest()
    assert a == b


def test_gen_data_zero_scenes_is_usage_error(ws, tmp_path):
    rc = main(["gen-data", "--scenes", "0", "--out", str(tmp_path / "x.jsonl"),
               "--config", str(ws["cfg"])])
    assert rc == 1


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hidden_dims": 32}}))
    rc = main(["gen-data", "--scenes", "1", "--out", str(tmp_path / "x.jsonl"),
               "--config", str(bad)])
    assert rc == 1


@pytest.fixture(scope="module")
def trained(ws):
    outdir = ws["root"] / "run"
    rc = main(["train", "--config", str(ws["cfg"]), "--data", str(ws["data"]),
               "--out", str(outdir)])
    assert rc == 0
    return outdir


def test_train_artifacts(trained):
    assert (trained / "checkpoint.bin").exists()
    assert (trained / "loss_curve.tsv").exists()
    assert (trained / "loss_curve.png").exists()
    assert (trained / "train_metrics.json").exists()
    assert (trained / "train_metrics.png").exists()
    header = (trained / "loss_curve.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["step", "stage", "lr", "total", "mask", "grd", "gen"]


def test_train_zero_steps_checkpoint_equals_init(ws, tmp_path):
    cfg = tiny_config(steps=0)
    cfg_path = tmp_path / "zero.json"
    cfg_path.write_text(json.dumps(config_to_dict(cfg)))
    outdir = tmp_path / "zero_run"
    rc = main(["train", "--config", str(cfg_path), "--data", str(ws["data"]),
               "--out", str(outdir)])
    assert rc == 0
    loaded, _ = load_checkpoint(outdir / "checkpoint.bin")
    fresh = Pipeline(cfg)
    for name, t in fresh.params.items():
        assert t.data.tobytes() == loaded.params[name].data.tobytes(), name


def test_train_rerun_identical_checkpoint(ws, tmp_path):
    outdir = tmp_path / "rerun"
    rc = main(["train", "--config", str(ws["cfg"]), "--data", str(ws["data"]),
               "--out", str(outdir)])
    assert rc == 0
    a = (Path(ws["root"]) / "run" / "checkpoint.bin").read_bytes()
    b = (outdir / "checkpoint.bin").read_bytes()
    assert a == b
    am = (Path(ws["root"]) / "run" / "train_metrics.json").read_bytes()
    bm = (outdir / "train_metrics.json").read_bytes()
    assert am == bm


def test_train_missing_data_runtime_error(ws, tmp_path):
    rc = main(["train", "--config", str(ws["cfg"]), "--data",
               str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "r")])
    assert rc == 2


def test_eval_rep_subsets_and_artifacts(ws, trained, tmp_path):
    for reps in ("V", "V,P", "V,P,I"):
        outdir = tmp_path / f"eval_{reps.replace(',', '')}"
        rc = main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
                   "--data", str(ws["data"]), "--reps", reps, "--out", str(outdir)])
        assert rc == 0
        tag = "".join(r for r in ["V", "I", "P"] if r in reps.split(","))
        report = json.loads((outdir / f"metrics_{tag}.json").read_text())
        for group in report["metrics"].values():
            for v in group.values():
                assert 0.0 <= v <= 1.0


def test_eval_full_subset_reproduces_train_metrics(ws, trained, tmp_path):
    outdir = tmp_path / "eval_full"
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--out", str(outdir)])
    assert rc == 0
    train_metrics = json.loads((trained / "train_metrics.json").read_text())
    eval_metrics = json.loads((outdir / "metrics_VIP.json").read_text())
    assert eval_metrics["metrics"] == train_metrics["metrics"]


def test_eval_empty_reps_usage_error(ws, trained, tmp_path):
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--reps", "", "--out", str(tmp_path / "e")])
    assert rc == 1
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--reps", "V,X", "--out", str(tmp_path / "e")])
    assert rc == 1


def test_eval_config_hash_guard(ws, trained, tmp_path):
    other = tiny_config(steps=5)
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(config_to_dict(other)))
    args = ["eval", "--checkpoint", str(trained / "checkpoint.bin"),
            "--data", str(ws["data"]), "--out", str(tmp_path / "e"),
            "--config", str(other_path)]
    assert main(args) == 1
    assert main(args + ["--force"]) == 0


def test_infer_text_prompt(ws, trained, capsys):
    rc = main(["infer", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--scene-id", "0",
               "--prompt-kind", "text", "--prompt", "chair"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(out["top_queries"]) == 3
    assert all("points" in q and "score" in q for q in out["top_queries"])


def test_infer_numerical_prompt_emits_text(ws, trained, capsys):
    rc = main(["infer", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--scene-id", "0",
               "--prompt-kind", "numerical", "--prompt", "0.5,0.5,0.3,0.4,0.4,0.6"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "text" in out


def test_infer_visual_prompt(ws, trained, capsys):
    rc = main(["infer", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--scene-id", "0",
               "--prompt-kind", "visual", "--prompt", "chair",
               "--noise-sigma", "0.05"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["top_queries"]


def test_infer_unknown_token_fails(ws, trained, tmp_path):
    rc = main(["infer", "--checkpoint", str(trained / "checkpoint.bin"),
               "--data", str(ws["data"]), "--scene-id", "0",
               "--prompt-kind", "text", "--prompt", "zeppelin"])
    assert rc == 2


def test_ablate_axes(ws, tmp_path, capsys):
    for axis, expect in (("depth", ["2", "4", "6"]),
                         ("structure", ["main", "parallel", "sequential"]),
                         ("reps", ["V", "V+P", "V+P+I"])):
        outdir = tmp_path / f"abl_{axis}"
        rc = main(["ablate", "--config", str(ws["cfg"]), "--data", str(ws["data"]),
                   "--axis", axis, "--out", str(outdir)])
        assert rc == 0
        lines = (outdir / f"ablation_{axis}.tsv").read_text().splitlines()
        assert len(lines) == 4  # header + 3 variants
        variants = [line.split("\t")[0] for line in lines[1:]]
        assert variants == expect
        assert (outdir / f"ablation_{axis}.png").exists()
        capsys.readouterr()


def test_grad_check_cli_smoke(capsys):
    rc = main(["grad-check", "--coords-per-param", "2"])
    captured = capsys.readouterr().out
    assert rc == 0, captured
    assert "overall" in captured
    lines = [l for l in captured.splitlines() if "max_rel_err" in l]
    assert len(lines) >= 5  # one line per parameter group plus overall


def test_grad_check_repeated_run_identical(capsys):
    main(["grad-check", "--coords-per-param", "1"])
    first = capsys.readouterr().out
    main(["grad-check", "--coords-per-param", "1"])
    second = capsys.readouterr().out
    assert first == second


def test_grad_check_detects_sabotage(capsys, monkeypatch):
    from promptscene import autodiff as ad

    true_sigmoid = ad.sigmoid

    def bad_sigmoid(a):
        a = ad._as_tensor(a)
        data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                        np.exp(a.data) / (1.0 + np.exp(a.data)))

        def bwd(g):
            ad._accum(a, 2.5 * g * data * (1.0 - data))  # wrong scale

        return ad._make("sigmoid", data, (a,), bwd)

    monkeypatch.setattr(ad, "sigmoid", bad_sigmoid)
    monkeypatch.setattr("promptscene.heads.ad.sigmoid", bad_sigmoid)
    rc = main(["grad-check", "--coords-per-param", "2"])
    monkeypatch.setattr(ad, "sigmoid", true_sigmoid)
    assert rc == 3, capsys.readouterr().out


def test_checked_in_overfit_config_matches_preset():
    from promptscene.config import config_to_dict
    from promptscene.presets import overfit_config
    with open(Path(__file__).resolve().parents[1] / "configs" / "overfit.json") as fh:
        on_disk = json.load(fh)
    assert on_disk == config_to_dict(overfit_config())

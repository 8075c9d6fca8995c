import json

import pytest

from mldecoder.bench import rows_from_csv
from mldecoder.cli import main
from mldecoder.heads import make_group_assignment

# two unseen labels are fewer than K=3 and K=5
pytestmark = pytest.mark.filterwarnings("ignore:F1@:RuntimeWarning")

ZSL_CONFIG = """
[run]
seed = 3

[model]
kind = zsl
model_dim = 8
num_heads = 2
{model_extra}

[data]
num_classes = 8
num_unseen = 2
embed_dim = 8
word_dim = 8
num_train = 40
num_eval = 30
max_objects = 2
{data_extra}

[train]
epochs = 2
lr = 0.001

[aug]
preset = both
"""


def write_config(tmp_path, name="run.ini", model_extra="", data_extra=""):
    path = tmp_path / name
    path.write_text(ZSL_CONFIG.format(model_extra=model_extra, data_extra=data_extra))
    return path


def test_train_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    for name in ("checkpoint.bin", "loss_trace.csv", "metrics.csv", "metrics_zsl.csv",
                 "metrics_gzsl.csv", "summary.csv", "metadata.json"):
        assert (out / name).is_file(), name
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "mAP,F1@3,F1@5,mode"
    assert [line.rsplit(",", 1)[1] for line in summary[1:]] == ["seen", "ZSL", "GZSL"]
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 64
    assert meta["augmentation"]["random_query"] and meta["augmentation"]["query_noise"]
    assert (out / "metrics.csv").read_text().startswith("class,ap\n")
    assert "ZSL" in capsys.readouterr().out


def test_train_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.csv", "metrics_zsl.csv", "loss_trace.csv", "checkpoint.bin",
                 "metadata.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_embedding_file(tmp_path, capsys):
    cfg = write_config(tmp_path, data_extra="embeddings = vectors/missing.txt")
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert str(tmp_path / "vectors" / "missing.txt") in err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 2
    assert "none.ini" in capsys.readouterr().err


def test_bad_field_named(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--set", "model.depth=3"]) == 2
    assert "depth" in capsys.readouterr().err


def test_seed_mandatory(tmp_path, capsys):
    assert main(["bench", "--analytic-only", "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_embedding_file_is_used(tmp_path):
    from mldecoder.config import load_config
    from mldecoder.train import generate_synthetic_dataset
    from mldecoder.zsl import save_split, save_word_embeddings

    cfg_path = write_config(tmp_path)
    data = generate_synthetic_dataset(load_config(cfg_path).dataset_spec())
    save_word_embeddings(data.table, tmp_path / "w.txt")
    save_split(data.table, tmp_path / "s.tsv")
    with_file = write_config(tmp_path, "file.ini", data_extra="embeddings = w.txt\nsplit = s.tsv")
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(with_file), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics_zsl.csv").read_bytes() == \
        (tmp_path / "b" / "metrics_zsl.csv").read_bytes()
    meta = json.loads((tmp_path / "b" / "metadata.json").read_text())
    assert {"data.embeddings", "data.split"} <= meta["inputs"].keys()


def test_zsl_eval_and_ablation(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    ckpt = tmp_path / "t" / "checkpoint.bin"
    rc = main(["zsl-eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--ablate",
               "--out", str(tmp_path / "e")])
    assert rc == 0
    e = tmp_path / "e"
    assert (e / "metrics_zsl.csv").read_bytes() == (tmp_path / "t" / "metrics_zsl.csv").read_bytes()
    rows = (e / "ablation.csv").read_text().splitlines()
    assert rows[0] == "augmentation,random_query,query_noise,ZSL_mAP,GZSL_mAP,seen_mAP"
    assert [r.split(",")[:3] for r in rows[1:]] == [["none", "0", "0"], ["noise", "0", "1"],
                                                    ["random-query", "1", "0"], ["both", "1", "1"]]
    assert len((e / "ablation.md").read_text().splitlines()) == 6
    meta = json.loads((e / "metadata.json").read_text())
    assert meta["inputs"]["eval.checkpoint"] and len(meta["ablation"]) == 4


def test_zsl_eval_refuses_other_assignment(tmp_path, capsys):
    make_group_assignment(6, 3, seed=1, group_size=2).save(tmp_path / "a1.txt")
    make_group_assignment(6, 3, seed=2, group_size=2).save(tmp_path / "a2.txt")
    group = "zsl_mode = group\ngroup_size = 2\nassignment = {}"
    train_cfg = write_config(tmp_path, "t.ini", model_extra=group.format("a1.txt"))
    eval_cfg = write_config(tmp_path, "e.ini", model_extra=group.format("a2.txt"))
    # group decoding cannot take random-query augmentation
    args = ["--set", "aug.preset=noise"]
    assert main(["train", "--config", str(train_cfg), "--out", str(tmp_path / "t")] + args) == 0
    ckpt = str(tmp_path / "t" / "checkpoint.bin")
    assert main(["zsl-eval", "--config", str(train_cfg), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "ok")] + args) == 0
    capsys.readouterr()
    assert main(["zsl-eval", "--config", str(eval_cfg), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "bad")] + args) == 3
    assert "assignment" in capsys.readouterr().err


def test_zsl_eval_rejects_other_head(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--set", "model.kind=gap", "--set",
                 "aug.preset=none", "--out", str(tmp_path / "g")]) == 0
    ckpt = str(tmp_path / "g" / "checkpoint.bin")
    assert main(["zsl-eval", "--config", str(cfg), "--checkpoint", ckpt]) == 3


@pytest.mark.parametrize("kind", ["gap", "transformer", "mldecoder"])
def test_train_other_heads(tmp_path, kind):
    cfg = write_config(tmp_path)
    rc = main(["train", "--config", str(cfg), "--set", f"model.kind={kind}",
               "--set", "aug.preset=none", "--set", "data.num_unseen=0",
               "--out", str(tmp_path / kind)])
    assert rc == 0
    assert not (tmp_path / kind / "metrics_zsl.csv").exists()


def test_augmentation_on_plain_head_is_config_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--set", "model.kind=mldecoder"]) == 2


def test_bench_analytic_only(tmp_path, capsys):
    assert main(["bench", "--seed", "0", "--analytic-only", "--out", str(tmp_path)]) == 0
    rows = rows_from_csv((tmp_path / "bench.csv").read_text())
    assert len(rows) == 9
    assert all(r.measured_ms is None and r.alloc_mb is None for r in rows)
    assert "multiply-accumulates" in (tmp_path / "bench.md").read_text()
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["analytic_only"] is True


def test_bench_timed_small(tmp_path):
    rc = main(["bench", "--seed", "0", "--out", str(tmp_path), "--set", "bench.sizes=4,8",
               "--set", "bench.model_dim=8", "--set", "bench.num_queries=4",
               "--set", "bench.repeats=3", "--set", "bench.batch=2"])
    assert rc == 0
    rows = rows_from_csv((tmp_path / "bench.csv").read_text())
    assert len(rows) == 6 and all(r.measured_ms > 0 for r in rows)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.strip().endswith("0 failing checks")

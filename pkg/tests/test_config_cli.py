import csv
import json

import pytest

from jointkd.cli import DEFAULT_BETAS, main
from jointkd.config import RunConfig, load_config, parse_config
from jointkd.encoder import ConfigError

TINY = """\
task = classify   # comment
hidden_dim = 8
num_heads = 2
ffn_dim = 12
n_train = 64
n_valid = 16
n_test = 16
epochs = 1
batch_size = 32
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_parse_config_types():
    c = parse_config("seed = 4\nlr = 0.01\nenable_momentum = false\nmode = disjoint\n")
    assert c.seed == 4 and c.lr == 0.01 and c.enable_momentum is False and c.mode == "disjoint"
    assert parse_config(c.dumps()) == c


@pytest.mark.parametrize("text", [
    "nonsense = 1\n", "seed = abc\n", "task = translate\n", "teacher_depth = 3\n",
    "task = retrieval\n", "beta = 2\n", "epochs = 0\n", "data = mind\n", "hidden_dim = 30\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text).validate()


def test_missing_path_rejected(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig(init_checkpoint=str(tmp_path / "nope")).validate()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", write(tmp_path, "bogus = 1\n")]) == 1
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    news = tmp_path / "news.tsv"
    news.write_text("N1\tsports\n")
    beh = tmp_path / "b.tsv"
    beh.write_text("1\tU\t11/11/2019 9:00:00 AM\t\tN1-1\n")
    cfg = write(tmp_path, f"data = mind\nnews_path = {news}\nbehaviors_path = {beh}\n", "mind.cfg")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_train_eval_and_determinism(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    a = tmp_path / "a"
    files = ("steps.jsonl", "metrics.json", "best.ckpt", "final.ckpt")
    runs = []
    for _ in range(2):
        assert main(["train", "--config", cfg, "--out", str(a), "--seed", "7"]) == 0
        runs.append({f: (a / f).read_bytes() for f in files})
    assert runs[0] == runs[1]
    m = json.loads((a / "metrics.json").read_text())
    assert set(m["test"]) == {"teacher", "student"}
    steps = [json.loads(l) for l in (a / "steps.jsonl").read_text().splitlines()]
    assert len(steps) == 2 and {"L_t", "L_s", "L_distill", "grad_norm_student"} <= set(steps[0])
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", str(a / "final.ckpt"), "--seed", "7"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == m["test"]


def test_sweep_and_ablate_tables(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["sweep-beta", "--config", cfg, "--out", str(tmp_path / "s"), "--betas", "0,0.3"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "sweep_beta.csv")))
    assert [r["beta"] for r in rows] == ["0.0", "0.3"]
    assert len(DEFAULT_BETAS) == 7 and DEFAULT_BETAS[-1] == 0.3
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "ab")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["full", "w/o momentum", "w/o distillation loss", "w/o hidden loss"]
    assert all(r["seed"] == "0" for r in rows)


def test_gradcheck_and_bench_commands(tmp_path, capsys):
    cfg = write(tmp_path, "hidden_dim = 8\nnum_heads = 2\nffn_dim = 12\n")
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "g"), "--samples", "40"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b"), "--samples", "20",
                 "--warmup", "2"]) == 0
    rep = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert rep["teacher_depth"] == 4 and rep["student_depth"] == 2


def test_retrieval_from_init_checkpoint(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    rcfg = write(tmp_path, TINY.replace("classify", "retrieval") + "mode = student-only\n"
                 f"init_checkpoint = {tmp_path / 'c' / 'final.ckpt'}\n", "r.cfg")
    assert main(["train", "--config", rcfg, "--out", str(tmp_path / "r")]) == 0
    m = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert m["test"]["student"][0]["metric"] == "auc"


def test_load_config_file(tmp_path):
    assert load_config(write(tmp_path, TINY)).hidden_dim == 8

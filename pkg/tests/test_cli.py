import csv
import json
import os

import numpy as np
import pytest

from pkgx import stats
from pkgx.cli import main
from pkgx.synthetic import feedback_corpus, planted_path_kg, write_jsonl


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    planted_path_kg(seed=0).write(root / "data")
    write_jsonl(feedback_corpus(0), root / "feedback.jsonl")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_kg_stats(workspace, capsys):
    code, out, _ = run(capsys, "kg", "stats", "--kg", workspace / "data/graph.tsv")
    assert code == 0
    info = json.loads(out)
    assert (info["entities"], info["relations"], info["triples"]) == (200, 10, 569)
    code, _, err = run(capsys, "kg", "stats", "--kg", workspace / "missing.tsv")
    assert code == 2 and "not found" in err


@pytest.fixture(scope="module")
def personas(workspace):
    out = workspace / "personas"
    assert main(["persona", "build", "--feedback", str(workspace / "feedback.jsonl"), "--out", str(out)]) == 0
    return out


def test_persona_build(personas):
    files = sorted(p for p in os.listdir(personas) if p.startswith("persona-"))
    assert len(files) == 2
    doc = json.loads((personas / files[0]).read_text())
    assert doc["schema"] == "pkgx-persona/1" and doc["provenance"]["run_config"]
    rows = [r for r in (personas / "clustering-report.csv").read_text().splitlines() if not r.startswith("#")]
    chosen = [r for r in csv.DictReader(rows) if r["chosen"] == "1"]
    assert len(chosen) == 1 and chosen[0]["k"] == "2"


def test_persona_build_errors(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"participant_id": "P1", "task": "DR", "background": "Other", "statements": ["I prefer x."]}\n{"participant_id": "P2"}\n')
    code, _, err = run(capsys, "persona", "build", "--feedback", bad, "--out", tmp_path / "o")
    assert code == 2 and "line 2" in err
    code, _, _ = run(capsys, "persona", "build", "--feedback", workspace / "feedback.jsonl", "--out", tmp_path / "km", "--algorithms", "kmeans")
    assert code == 0
    rows = [r for r in (tmp_path / "km/clustering-report.csv").read_text().splitlines() if not r.startswith("#")]
    assert {r["algorithm"] for r in csv.DictReader(rows)} == {"kmeans"}


def _train(workspace, personas, out, steps=120):
    persona = sorted(personas.glob("persona-*.json"))[0]
    d = workspace / "data"
    return main([
        "train", "--kg", str(d / "graph.tsv"), "--train", str(d / "train.tsv"), "--valid", str(d / "valid.tsv"),
        "--persona", str(persona), "--steps", str(steps), "--eval-every", "40", "--warmup", str(steps), "--out", str(out),
    ])


@pytest.fixture(scope="module")
def trained(workspace, personas):
    out = workspace / "run1"
    assert _train(workspace, personas, out) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "model.pkgx-ckpt").exists()
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# run_config ") and lines[1] == "step,mean_reward,gated_fraction,val_mrr,tau"
    assert len(lines) == 5
    cfg = json.loads((trained / "run-config.json").read_text())
    assert cfg["hash"] in lines[0]


def test_train_is_reproducible(workspace, personas, trained):
    again = workspace / "run2"
    assert _train(workspace, personas, again) == 0
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_train_missing_kg(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--kg", tmp_path / "nope.tsv", "--train", tmp_path / "t.tsv", "--out", tmp_path)
    assert code == 2


def test_eval(workspace, trained, capsys, tmp_path):
    args = ["eval", "--checkpoint", trained / "model.pkgx-ckpt", "--kg", workspace / "data/graph.tsv", "--test", workspace / "data/test.tsv"]
    code, out1, _ = run(capsys, *args)
    assert code == 0
    _, out2, _ = run(capsys, *args)
    assert out1 == out2
    row = list(csv.DictReader(out1.splitlines()[1:]))[0]
    assert 0.0 <= float(row["mrr"]) <= 1.0 and row["n"] == "20"
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    code, _, err = run(capsys, *args[:-1], empty)
    assert code == 2


def test_explain(workspace, trained, personas, capsys):
    hyp = (workspace / "data/test.tsv").read_text().splitlines()[0].replace("\t", ",")
    persona = sorted(personas.glob("persona-*.json"))[0]
    base = ["explain", "--checkpoint", trained / "model.pkgx-ckpt", "--kg", workspace / "data/graph.tsv"]
    code, out, _ = run(capsys, *base, "--hypothesis", hyp, "--m", "2", "--verbalize", "--persona", persona)
    assert code == 0
    doc = json.loads(out)
    assert doc["mode"] == "adaptive"
    assert doc["empty"] or (len(doc["paths"]) <= 2 and all(p["breakdown"]["alpha"] == 1 for p in doc["paths"]))
    if not doc["empty"]:
        text = doc["verbalization"]["text"]
        assert all(x in text for p in doc["paths"] for hop in p["hops"] for x in hop)
    code, _, err = run(capsys, *base, "--hypothesis", "Nope::X,treats,Disease::D00")
    assert code == 2 and "Nope::X" in err


def test_checkpoint_on_wrong_graph(trained, capsys, tmp_path):
    g = tmp_path / "g.tsv"
    g.write_text("a\tr\tb\n")
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "model.pkgx-ckpt", "--kg", g, "--test", g)
    assert code == 2 and "different graph" in err


def _write_ratings(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater_id", "hypothesis_id", "system", "validity", "completeness", "relevance"])
        w.writerows(rows)


def test_stats_ratings(capsys, tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    mats = {}
    for system in ("non-adaptive", "elena"):
        m = rng.integers(1, 6, size=(10, 4))
        m[0, :] = [1, 1, 2, 1]
        m[1, :] = [5, 5, 4, 5]
        mats[system] = m
        for h in range(10):
            for r in range(4):
                rows.append([f"r{r}", f"h{h}", system, m[h, r], m[h, r], m[h, r]])
    for h in range(10):  # a persona rated by one person only: ICC undefined
        rows.append(["r0", f"h{h}", "leo", 3, 4, 2 + h % 3])
    _write_ratings(tmp_path / "ratings.csv", rows)
    code, out, _ = run(capsys, "stats", "--mode", "ratings", "--ratings", tmp_path / "ratings.csv", "--baseline", "non-adaptive", "--out", tmp_path / "rep")
    assert code == 0
    assert "leo" in out and "not computed" in out and "Kruskal" in out
    report = [r for r in (tmp_path / "rep/stats-ratings.csv").read_text().splitlines() if not r.startswith("#")]
    icc = {(r["system"], r["dimension"]): r for r in csv.DictReader(report) if r["section"] == "icc"}
    for system, m in mats.items():
        assert float(icc[(system, "validity")]["value"]) == pytest.approx(stats.icc3k(m), abs=1e-6)
    assert icc[("leo", "validity")]["statistic"] == "error"


def test_stats_preference(capsys, tmp_path):
    pref = tmp_path / "pref.csv"
    with open(pref, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater_id", "hypothesis_id", "preferred"])
        for i in range(120):
            w.writerow([f"u{i % 12}", f"h{i // 12}", "leo" if i < 76 else "non-adaptive"])
    code, out, _ = run(capsys, "stats", "--mode", "preference", "--preferences", pref, "--target", "leo")
    assert code == 0 and "76/120" in out
    p = float(out.split("p=")[1].split()[0])
    assert 0.004 <= p <= 0.006


def test_stats_and_persona_validate_credibility(capsys, tmp_path):
    ids = [f"h{i}" for i in range(8)]
    expert = [[f"e{j}", h, "elena", 1 + (i + j) % 5, 1 + i % 5, 1 + (2 * i) % 5] for i, h in enumerate(ids) for j in range(2)]
    persona = [["elena", h, "elena", 1 + i % 5, 1 + i % 5, 1 + (2 * i) % 5] for i, h in enumerate(ids)]
    _write_ratings(tmp_path / "e.csv", expert)
    _write_ratings(tmp_path / "p.csv", persona)
    code, out, _ = run(capsys, "persona", "validate", "--persona-ratings", tmp_path / "p.csv", "--expert-ratings", tmp_path / "e.csv")
    assert code == 0 and "completeness" in out and "r=+1.000" in out
    code, out2, _ = run(capsys, "stats", "--mode", "credibility", "--persona-ratings", tmp_path / "p.csv", "--expert-ratings", tmp_path / "e.csv")
    assert code == 0 and out2 == out


def test_profile_assign(capsys, tmp_path):
    code, out, _ = run(capsys, "profile", "assign", "--answers", "Elena,Elena,Leo")
    assert code == 0 and out.strip() == "Elena"
    code, _, err = run(capsys, "profile", "assign", "--answers", "A,B,C")
    assert code == 2
    f = tmp_path / "answers.csv"
    f.write_text("participant_id,a1,a2,a3\nU1,Leo,Leo,Elena\nU2,Elena,Leo,Elena\n")
    code, out, _ = run(capsys, "profile", "assign", "--answers-file", f)
    assert out.splitlines()[1:] == ["U1,Leo", "U2,Elena"]


def test_config_file_and_overrides(workspace, personas, capsys, tmp_path):
    cfg = tmp_path / "run.toml"
    d = workspace / "data"
    cfg.write_text(
        f'seed = 5\nreward = "fidelity"\n[data]\nkg = "{d / "graph.tsv"}"\ntrain = "{d / "train.tsv"}"\n'
        "[train]\ntotal_steps = 999\neval_every = 10\n"
    )
    code, out, _ = run(capsys, "--config", cfg, "train", "--steps", "20", "--out", tmp_path / "o")
    assert code == 0
    saved = json.loads((tmp_path / "o/run-config.json").read_text())["config"]
    assert saved["seed"] == 5 and saved["train"]["total_steps"] == 20 and saved["reward"] == "fidelity"
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nbogus = 1\n")
    code, _, err = run(capsys, "--config", bad, "kg", "stats", "--kg", d / "graph.tsv")
    assert code == 0  # kg stats does not read the run config
    code, _, err = run(capsys, "--config", bad, "train", "--out", tmp_path / "x")
    assert code == 2 and "bogus" in err

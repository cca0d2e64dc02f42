import json

import pytest

from cauesc.cli import main
from cauesc.corpus import save_esconv
from cauesc.synthetic import synthetic_corpus


@pytest.fixture
def corpus(tmp_path):
    p = tmp_path / "corpus.json"
    save_esconv(synthetic_corpus(12, turns=2), p)
    return p


def run(*args):
    return main([str(a) for a in args])


def test_prepare_and_archived_config(tmp_path, corpus, capsys):
    out = tmp_path / "o"
    assert run("prepare", "--out", out, "--corpus", corpus, "--quiet") == 0
    report = json.loads(capsys.readouterr().out)
    assert (report["train"], report["dev"], report["test"]) == (10, 1, 1)
    cfg = json.loads((out / "run_config.prepare.json").read_text())
    assert cfg["paths"]["corpus"] == str(corpus)


def test_flags_override_config_file(tmp_path, corpus):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"split": {"seed": 3}, "model": {"variant": "label"}}))
    out = tmp_path / "o"
    assert run("annotate", "--out", out, "--config", cfg, "--corpus", corpus, "--quiet") == 0
    archived = json.loads((out / "run_config.annotate.json").read_text())
    assert archived["split"]["seed"] == 3 and archived["model"]["variant"] == "label"
    assert run("cache-effects", "--out", out, "--config", cfg, "--corpus", corpus, "--variant", "multi",
               "--quiet") == 0
    assert json.loads((out / "run_config.cache-effects.json").read_text())["model"]["variant"] == "multi"


def test_usage_errors(tmp_path, corpus):
    out = tmp_path / "o"
    with pytest.raises(SystemExit) as e:
        run("train", "--out", out, "--variant", "mixture")
    assert e.value.code == 2
    assert run("prepare", "--out", out, "--corpus", corpus, "--ratios", "0.5,0.4,0.2", "--quiet") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"colour": 1}}))
    assert run("prepare", "--out", out, "--corpus", corpus, "--config", bad, "--quiet") == 2


def test_data_errors(tmp_path):
    out = tmp_path / "o"
    assert run("prepare", "--out", out, "--corpus", tmp_path / "missing.json", "--quiet") == 3
    broken = tmp_path / "broken.json"
    broken.write_text("[{")
    assert run("prepare", "--out", out, "--corpus", broken, "--quiet") == 3
    assert run("train", "--out", tmp_path / "fresh", "--corpus", broken, "--quiet") == 3


def test_annotate_and_cache_are_idempotent(tmp_path, corpus):
    out = tmp_path / "o"
    for cmd, name in [("annotate", "causes.jsonl"), ("cache-effects", "effects.cesc")]:
        assert run(cmd, "--out", out, "--corpus", corpus, "--quiet") == 0
        first = (out / name).read_bytes()
        assert run(cmd, "--out", out, "--corpus", corpus, "--quiet") == 0
        assert (out / name).read_bytes() == first


def test_annotation_file_precedence(tmp_path, corpus):
    from cauesc.corpus import load_esconv
    conv = load_esconv(corpus)[0]
    ext = tmp_path / "ext.jsonl"
    flags = [0] * len(conv.utterances)
    ext.write_text(json.dumps({"conversation_id": conv.conversation_id, "flags": flags,
                               "annotator": "human", "target_index": len(flags) - 1}) + "\n")
    out = tmp_path / "o"
    assert run("annotate", "--out", out, "--corpus", corpus, "--annotations", ext, "--quiet") == 0
    first = json.loads((out / "causes.jsonl").read_text().splitlines()[0])
    assert first["flags"] == flags and first["annotator"] == "human"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, corpus):
    out = tmp_path / "o"
    assert run("prepare", "--out", out, "--corpus", corpus, "--quiet") == 0
    assert run("train", "--out", out, "--corpus", corpus, "--steps", "2", "--lr", "1e300", "--warmup", "0",
               "--hidden", "8", "--quiet") == 4


def test_analyze_votes_only(tmp_path):
    votes = tmp_path / "v.csv"
    votes.write_text("item_id,rater_id,choice\n1,a,A\n1,b,A\n1,c,B\n2,a,Tie\n2,b,Tie\n2,c,Tie\n")
    out = tmp_path / "o"
    assert run("analyze", "--out", out, "--votes", votes, "--quiet") == 0
    ab = json.loads((out / "ab_report.json").read_text())
    assert (ab["win"], ab["lose"], ab["tie"]) == (1, 0, 1)
    assert run("analyze", "--out", out, "--quiet") == 2

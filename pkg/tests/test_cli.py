import numpy as np
import pytest

from ehrharmon import __version__
from ehrharmon.cli import main, stage_seed
from ehrharmon.embedding import load_embedding
from ehrharmon.fileio import read_kv


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    spec = d / "spec.txt"
    spec.write_text("vocab_size=30\nrank=3\npatients=150\nfractions=0.8,0.8\nnoise=0,0\npatient_counts=100,300\n")
    assert main(["synth", "events", "--spec", str(spec), "--out-dir", str(d), "--seed", "2"]) == 0
    return d


def outputs(manifest):
    return {k: v for k, v in read_kv(manifest).items() if k.startswith("output.")}


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_stage_seeds_stable_and_distinct():
    assert stage_seed(0, "embed") == stage_seed(0, "embed")
    assert len({stage_seed(0, "embed"), stage_seed(0, "validate"), stage_seed(1, "embed")}) == 3


def test_run_deterministic_manifest(corpus, tmp_path):
    args = ["run", "--input", str(corpus / "events.tsv"), "--pairs", str(corpus / "pairs.tsv"), "--seed", "5"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--threads", "3"]) == 0
    a, b = outputs(tmp_path / "a" / "manifest.txt"), outputs(tmp_path / "b" / "manifest.txt")
    assert a == b
    assert set(a) >= {"output.events.clean.tsv", "output.counts.tsv", "output.sppmi.tsv", "output.embedding.tsv",
                      "output.validation.report"}
    assert float(read_kv(tmp_path / "a" / "validation.report")["auc.relatedness"]) > 0.6


def test_run_with_rollup_stage(corpus, tmp_path):
    m = tmp_path / "map.tsv"
    m.write_text("source_code\ttarget_code\nCUI:C0000001\tPheCode:1\nCUI:C0000002\tPheCode:1\n")
    out = tmp_path / "o"
    assert main(["run", "--input", str(corpus / "events.tsv"), "--map", str(m), "--rank", "3", "--out-dir", str(out)]) == 0
    rep = read_kv(out / "rollup.report")
    assert int(rep["mapped.CUI"]) > 0
    assert "PheCode:1" in {c.text for c in load_embedding(out / "embedding.tsv").vocab}


def test_missing_input_fails_without_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--input", str(tmp_path / "nope.tsv"), "--out-dir", str(out)]) != 0
    assert "stage setup" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_failing_stage_is_named_and_leaves_nothing(corpus, tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("nope\n")
    out = tmp_path / "out"
    rc = main(["run", "--input", str(corpus / "events.tsv"), "--map", str(bad), "--out-dir", str(out)])
    assert rc != 0
    assert "stage rollup failed" in capsys.readouterr().err
    assert not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.tsv"]


def test_flag_beats_config_beats_default(corpus, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("window_days=7\nk=2\nrank=3\n")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--input", str(corpus / "events.tsv"), "--window-days", "14",
                 "--out-dir", str(out)]) == 0
    man = read_kv(out / "manifest.txt")
    assert man["config.window_days"] == "14"
    assert man["config.k"] == "2.0"
    assert man["config.mode"] == "day_pair"
    assert read_kv(out / "counts.tsv.meta")["window_days"] == "14"


def test_config_can_supply_required_flag(corpus, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"input={corpus / 'events.tsv'}\noutput={tmp_path / 'clean.tsv'}\n")
    assert main(["clean", "--config", str(cfg)]) == 0
    assert (tmp_path / "clean.tsv").exists()


def test_stage_by_stage(corpus, tmp_path):
    t = tmp_path
    ev = str(corpus / "events.tsv")
    assert main(["clean", "--input", ev, "--output", str(t / "clean.tsv"), "--report", str(t / "clean.rep"),
                 "--manifest", str(t / "clean.manifest")]) == 0
    rep = read_kv(t / "clean.rep")
    assert rep["rows_read"] == rep["rows_emitted"]
    assert "input." + ev in read_kv(t / "clean.manifest")
    assert main(["cohort", "--input", str(t / "clean.tsv"), "--codes", "CUI:C0000001", "--min-count", "2",
                 "--patients-out", str(t / "cohort.txt"), "--monthly-out", str(t / "monthly.tsv"),
                 "--report", str(t / "cohort.rep")]) == 0
    assert int(read_kv(t / "cohort.rep")["patients"]) == len((t / "cohort.txt").read_text().split())
    assert main(["cooccur", "--input", str(t / "clean.tsv"), "--window-days", "30", "--output", str(t / "c.tsv"),
                 "--threads", "2"]) == 0
    assert main(["sppmi", "--counts", str(t / "c.tsv"), "--output", str(t / "s.tsv")]) == 0
    assert main(["embed", "--sppmi", str(t / "s.tsv"), "--rank", "3", "--output", str(t / "e.tsv"),
                 "--report", str(t / "e.rep")]) == 0
    assert read_kv(t / "e.rep")["rule"] == "fixed"
    assert main(["embed", "--sppmi", str(t / "s.tsv"), "--auc-pairs", str(corpus / "pairs.tsv"), "--grid", "2,3,4",
                 "--output", str(t / "e2.tsv"), "--report", str(t / "e2.rep")]) == 0
    assert read_kv(t / "e2.rep")["rank"] in {"2", "3", "4"}
    assert main(["validate", "--embedding", str(t / "e.tsv"), "--pairs", str(corpus / "pairs.tsv"),
                 "--report", str(t / "v.rep")]) == 0
    assert 0.0 <= float(read_kv(t / "v.rep")["auc.relatedness"]) <= 1.0
    assert main(["integrate", "--ehr", str(t / "e.tsv"), "--plm", str(corpus / "truth_embedding.tsv"),
                 "--weight", "0.5", "--output", str(t / "i.tsv"), "--report", str(t / "i.rep")]) == 0
    assert load_embedding(t / "i.tsv").dim == 6
    assert main(["features", "--embedding", str(t / "i.tsv"), "--target", "CUI:C0000001", "--top", "5",
                 "--output", str(t / "f.tsv")]) == 0
    lines = (t / "f.tsv").read_text().splitlines()
    assert lines[0] == "rank\tcode\tcosine" and len(lines) == 6


def test_mapacc(tmp_path):
    emb = tmp_path / "e.tsv"
    emb.write_text("LOCAL:H:glu\t1\t0\nLOINC:2345-7\t0.9\t0.1\nLOINC:1-1\t0\t1\n")
    gold = tmp_path / "g.tsv"
    gold.write_text("local_code\tstandard_code\nLOCAL:H:glu\tLOINC:2345-7\nLOCAL:H:zz\tLOINC:1-1\n")
    assert main(["mapacc", "--embedding", str(emb), "--gold", str(gold), "--candidate-domains", "LOINC",
                 "--report", str(tmp_path / "r")]) == 0
    rep = read_kv(tmp_path / "r")
    assert rep["top1"] == "1.0" and rep["skipped"] == "1"


def test_synth_split_and_bonmi(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("vocab_size=60\nrank=5\nfractions=0.6667,0.6667,0.6667\nnoise=0,0,0\n"
                    "patient_counts=500,300,200\nfloor=false\n")
    d = tmp_path / "syn"
    assert main(["synth", "split", "--spec", str(spec), "--out-dir", str(d)]) == 0
    assert main(["synth", "truth", "--spec", str(spec), "--out-dir", str(d)]) == 0
    args = ["bonmi", "--output", str(tmp_path / "j.tsv"), "--diagnostics", str(tmp_path / "diag"),
            "--patient-counts", "500,300,200", "--rank", "5", "--final-rank", "5"]
    for i in (1, 2, 3):
        args += ["--sppmi", str(d / f"inst{i}.sppmi.tsv")]
    assert main(args) == 0
    diag = read_kv(tmp_path / "diag")
    assert diag["align.0.institution"] == "inst1" and float(diag["institution.inst1.weight"]) == 0.5
    J = load_embedding(tmp_path / "j.tsv")
    X = load_embedding(d / "truth_embedding.tsv")
    G = X.vectors @ X.vectors.T
    pos = [X.vocab.index(c) for c in J.vocab]
    err = np.linalg.norm(J.vectors @ J.vectors.T - G[np.ix_(pos, pos)]) / np.linalg.norm(G)
    assert err < 1e-6


def test_bonmi_requires_weights(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("fractions=0.8,0.8\nnoise=0,0\npatient_counts=1,1\nvocab_size=20\nrank=2\n")
    assert main(["synth", "split", "--spec", str(spec), "--out-dir", str(tmp_path)]) == 0
    rc = main(["bonmi", "--sppmi", str(tmp_path / "inst1.sppmi.tsv"), "--sppmi", str(tmp_path / "inst2.sppmi.tsv"),
               "--output", str(tmp_path / "j.tsv")])
    assert rc == 1 and "weights" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2

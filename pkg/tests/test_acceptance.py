"""Acceptance gate: one test (or group) per criterion, summarized at session end.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.
"""
import datetime as dt
import random
import time
import warnings

import numpy as np
import pytest

import oracles
from conftest import random_events, random_orthogonal
from ehrharmon.bonmi import InstitutionSummary, bonmi_join, default_weights, procrustes_align, reweight
from ehrharmon.cli import main
from ehrharmon.cooccur import CooccurrenceMatrix, count_cooccurrence, merge_counts
from ehrharmon.embed import RankWarning, SPPMIMatrix, build_sppmi, gram_error, select_rank_variance, train_embedding
from ehrharmon.embedding import Embedding
from ehrharmon.events import clean_files, save_events
from ehrharmon.integrate import IntegrationSpec, concat_weighted
from ehrharmon.synth import (
    InstitutionSpec,
    SynthSpec,
    gen_ground_truth,
    gen_institution_split,
    gen_patient_events,
    institution_subsets,
    planted_pairs,
    split_events_by_patient,
    synth_vocab,
)
from ehrharmon.validate import auc_related_vs_random, mann_whitney_auc

pytestmark = pytest.mark.acceptance


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def cosines(X):
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    return U @ U.T


# 1 -----------------------------------------------------------------------------

@criterion(1, "SPPMI equals direct formula (200 matrices, k=1 and k=2, 1e-12, <5 s)")
def test_sppmi_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    for case in range(200):
        n = int(rng.integers(1, 16))
        U = np.triu(rng.integers(0, 21, size=(n, n)) * (rng.random((n, n)) < 0.6))
        M = U + np.triu(U, 1).T
        if M.sum() == 0:
            M[0, 0] = 1
        iu = np.triu_indices(n)
        C = CooccurrenceMatrix.from_upper(synth_vocab(n), iu[0], iu[1], M[iu], 30, "day_pair")
        for k in (1.0, 2.0):
            S = build_sppmi(C, k).dense()
            np.testing.assert_allclose(S, oracles.sppmi(M, k), rtol=0, atol=1e-12)
            assert np.all(S[M == 0] == 0)
    assert time.perf_counter() - t0 < 5.0


# 2 -----------------------------------------------------------------------------

@criterion(2, "co-occurrence equals quadratic reference; sharded merge exact (<10 s)")
def test_cooccurrence_oracle_equivalence():
    rng = np.random.default_rng(202)
    prng = random.Random(202)
    t0 = time.perf_counter()
    for case in range(200):
        events = random_events(rng, n_max=20, n_codes=6, n_patients=4, span=45)
        W = (0, 5, 30)[case % 3]
        for mode in ("day_pair", "patient"):
            C = count_cooccurrence(events, W, mode)
            vocab, M = oracles.cooccurrence(events, W, mode)
            assert list(C.vocab) == vocab and np.array_equal(C.dense(), M)
            patients = sorted({e.patient_id for e in events})
            for _ in range(3):
                k = prng.randint(1, 4)
                shard_of = {p: prng.randrange(k) for p in patients}
                merged = CooccurrenceMatrix.empty(W, mode)
                for s in range(k):
                    part = [e for e in events if shard_of[e.patient_id] == s]
                    merged = merge_counts(merged, count_cooccurrence(part, W, mode))
                assert merged.vocab == C.vocab
                assert np.array_equal(merged.dense(), C.dense()) and merged.total == C.total
    assert time.perf_counter() - t0 < 10.0


# 3 -----------------------------------------------------------------------------

@criterion(3, "rank-d Gram error equals tail singular energy (1e-6 rel), non-increasing in d")
def test_svd_embedding_quality():
    rng = np.random.default_rng(303)
    for case in range(20):
        # generic (full-rank) PSD: every tail energy is well above round-off
        A = rng.standard_normal((50, 60)) * rng.uniform(0.1, 3.0, size=60)
        S = SPPMIMatrix.from_dense(synth_vocab(50), A @ A.T)
        errs = []
        for d in range(1, 11):
            err = gram_error(train_embedding(S, d), S)
            want = oracles.best_rank_error(S.dense(), d)
            assert abs(err - want) <= 1e-6 * want
            errs.append(err)
        assert all(b <= a for a, b in zip(errs, errs[1:]))


# 4 -----------------------------------------------------------------------------

def _split(seed, sigma):
    X, G = gen_ground_truth(60, 5, seed)
    spec = SynthSpec(60, 5, tuple(InstitutionSpec(2 / 3, sigma, c) for c in (500, 300, 200)), floor=False, seed=seed)
    return G, gen_institution_split(G, spec, X.vocab)


def _rel(A, B):
    return float(np.linalg.norm(A - B) / np.linalg.norm(B))


@criterion(4, "BONMI noiseless recovery <=1e-6; median error falls as noise -> 0 (<30 s)")
def test_bonmi_exact_recovery():
    t0 = time.perf_counter()
    G, summaries = _split(0, 0.0)
    vocabs = [set(s.sppmi.vocab) for s in summaries]
    assert all(len(vocabs[i] & vocabs[j]) >= 20 for i in range(3) for j in range(i + 1, 3))
    assert _rel(bonmi_join(summaries, d=5, d_final=5).completed, G) <= 1e-6

    medians = []
    for sigma in (0.05, 0.02, 0.01, 0.0):
        errs = []
        for seed in range(10):
            G, summaries = _split(seed, sigma)
            errs.append(_rel(bonmi_join(summaries, d=5, d_final=5).completed, G))
        assert np.all(np.isfinite(errs))
        medians.append(float(np.median(errs)))
    assert all(b < a for a, b in zip(medians, medians[1:])), medians
    assert medians[-1] <= 1e-6
    assert time.perf_counter() - t0 < 30.0


# 5 -----------------------------------------------------------------------------

@criterion(5, "Procrustes recovers exact rotations (100 cases, residual and orthogonality <=1e-8)")
def test_procrustes_recovery():
    rng = np.random.default_rng(505)
    for _ in range(100):
        src = rng.standard_normal((20, 5))
        R0 = random_orthogonal(rng, 5)
        R = procrustes_align(src, src @ R0)
        assert np.linalg.norm(src @ R - src @ R0) <= 1e-8
        assert np.linalg.norm(R.T @ R - np.eye(5)) <= 1e-8


# 6 -----------------------------------------------------------------------------

@criterion(6, "Mann-Whitney AUC equals brute force exactly (500 sets); 1.0 and 0.5 edge cases")
def test_auc_estimator():
    rng = np.random.default_rng(606)
    for _ in range(500):
        n_pos = int(rng.integers(1, 51))
        n_neg = int(rng.integers(1, 51))
        # coarse grid forces plenty of ties
        pos = list(rng.integers(0, 10, n_pos) / 10)
        neg = list(rng.integers(0, 10, n_neg) / 10)
        assert mann_whitney_auc(pos, neg) == oracles.auc(pos, neg)
    assert mann_whitney_auc([0.9, 0.8, 0.7], [0.2, 0.1]) == 1.0
    assert mann_whitney_auc([0.4] * 5, [0.4] * 7) == 0.5


# 7 -----------------------------------------------------------------------------

def _site_embedding(events, seed):
    S = build_sppmi(count_cooccurrence(events, 30), 1.0)
    return S, train_embedding(S, select_rank_variance(S, 0.95), seed=seed)


@criterion(7, "synthetic end-to-end AUC >= 0.65 on 5 seeds; BONMI >= worse single site in >=4/5 (<3 min)")
def test_end_to_end_synthetic_signal(tmp_path):
    t0 = time.perf_counter()
    aucs, wins = [], []
    for seed in range(5):
        X, _ = gen_ground_truth(80, 5, seed)
        pairs = planted_pairs(X)
        raw = gen_patient_events(X, 2000, seed=seed)
        save_events(tmp_path / f"events{seed}.tsv", raw)
        events, report = clean_files([tmp_path / f"events{seed}.tsv"], 20_000)
        assert report.reconciles()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankWarning)
            _, e = _site_embedding(events, seed)
            aucs.append(auc_related_vs_random(e, pairs, seed=seed).auc["relatedness"])

            parts = split_events_by_patient(events, 2, seed)
            subsets = institution_subsets(80, [0.8, 0.8], seed)
            summaries, singles = [], []
            for i, (part, sub) in enumerate(zip(parts, subsets)):
                keep = {X.vocab[j] for j in sub}
                site = [r for r in part if r.code in keep]
                S, ei = _site_embedding(site, seed)
                summaries.append(InstitutionSummary(f"inst{i + 1}", S, 1.0, len({r.patient_id for r in site})))
                singles.append(ei)
            summaries = reweight(summaries, default_weights(summaries))
            common = set(singles[0].vocab) & set(singles[1].vocab)
            single_aucs = [auc_related_vs_random(ei.subset(common), pairs, seed=seed).auc["relatedness"]
                           for ei in singles]
            joint = bonmi_join(summaries, seed=seed).embedding.subset(common)
            joint_auc = auc_related_vs_random(joint, pairs, seed=seed).auc["relatedness"]
        wins.append(joint_auc >= min(single_aucs))
    print(f"\nsingle-site AUCs {np.round(aucs, 3).tolist()}; BONMI >= worse site in {sum(wins)}/5 seeds")
    assert all(a >= 0.5 + 0.15 for a in aucs), aucs
    assert sum(wins) >= 4, wins
    assert time.perf_counter() - t0 < 180.0


# 8 -----------------------------------------------------------------------------

@criterion(8, "weighted concatenation: w=1/w=0 reproduce source cosines; mixing identity on 100 cases (1e-10)")
def test_concat_degeneracies():
    rng = np.random.default_rng(808)
    for case in range(100):
        n = int(rng.integers(2, 30))
        vocab = synth_vocab(n)
        a = Embedding(vocab, rng.standard_normal((n, int(rng.integers(1, 8)))))
        b = Embedding(vocab, rng.standard_normal((n, int(rng.integers(1, 8)))))
        ca, cb = cosines(a.vectors), cosines(b.vectors)
        np.testing.assert_allclose(cosines(concat_weighted(a, b, IntegrationSpec(1.0)).vectors), ca, atol=1e-10)
        np.testing.assert_allclose(cosines(concat_weighted(a, b, IntegrationSpec(0.0)).vectors), cb, atol=1e-10)
        w = float(rng.random())
        denom = w**2 + (1 - w) ** 2
        out = concat_weighted(a, b, IntegrationSpec(w))
        np.testing.assert_allclose(cosines(out.vectors), (w**2 * ca + (1 - w) ** 2 * cb) / denom, atol=1e-10)


# 9 -----------------------------------------------------------------------------

@criterion(9, "full pipeline byte-identical across runs and thread counts {1, 4}")
def test_pipeline_determinism(tmp_path):
    syn = tmp_path / "syn"
    spec = tmp_path / "spec.txt"
    spec.write_text("vocab_size=80\nrank=5\npatients=2000\n")
    assert main(["synth", "events", "--spec", str(spec), "--out-dir", str(syn), "--seed", "9"]) == 0
    mapping = tmp_path / "map.tsv"
    mapping.write_text("source_code\ttarget_code\n" +
                       "".join(f"CUI:C{i:07d}\tPheCode:{100 + i // 4}\n" for i in range(0, 20)))
    runs = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        rc = main(["run", "--input", str(syn / "events.tsv"), "--map", str(mapping), "--pairs", str(syn / "pairs.tsv"),
                   "--seed", "3", "--threads", str(threads), "--out-dir", str(out)])
        assert rc == 0
        runs[name] = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.txt"}
    assert len(runs["a"]) >= 10
    assert runs["a"] == runs["b"] == runs["c"]


# 10 ----------------------------------------------------------------------------

def _dirty_rows(n=100_000, seed=1010):
    rng = random.Random(seed)
    n_bad, n_old, n_dup = n // 20, n // 20, n // 10
    n_good = n - n_bad - n_old - n_dup
    base = dt.date(2000, 1, 1)
    good = set()
    while len(good) < n_good:
        good.add((f"p{rng.randrange(5000):05d}", f"ICD10:A{rng.randrange(400)}", rng.randrange(8000)))
    good = sorted(good)
    rows = [f"{p}\t{c}\t{(base + dt.timedelta(days=d)).isoformat()}T{rng.randrange(24):02d}:00:00" for p, c, d in good]
    for p, c, d in rng.sample(good, n_dup):
        rows.append(f"{p}\t{c}\t{(base + dt.timedelta(days=d)).isoformat()}")
    for i in range(n_old):
        year = 1950 + i % 29 if i % 2 else dt.date.today().year + 1 + i % 5
        rows.append(f"q{i}\tICD10:B{i % 50}\t{year}-06-15")
    for i in range(n_bad):
        rows.append(("q{0}\t\t2010-01-01", "q{0}\tICD10:B1\tnot-a-date", "q{0}\tnocolon\t2010-01-01",
                     "q{0}\tICD10:B1")[i % 4].format(i))
    rng.shuffle(rows)
    return rows, n_good, n_bad, n_old, n_dup


@criterion(10, "cleaning report reconciles on 1e5 dirty rows; second pass is a no-op (<10 s)")
def test_cleaning_conservation_and_idempotence(tmp_path):
    rows, n_good, n_bad, n_old, n_dup = _dirty_rows()
    src = tmp_path / "dirty.tsv"
    src.write_text("patient_id\tcode\tdate\n" + "\n".join(rows) + "\n")
    t0 = time.perf_counter()
    out, rep = clean_files([src], 7_919)
    save_events(tmp_path / "clean.tsv", out)
    again, rep2 = clean_files([tmp_path / "clean.tsv"], 7_919)
    elapsed = time.perf_counter() - t0
    assert rep.reconciles()
    assert (rep.rows_read, rep.rows_bad_format, rep.rows_implausible_date, rep.rows_duplicate, rep.rows_emitted) == (
        100_000, n_bad, n_old, n_dup, n_good)
    assert again == out
    assert rep2.rows_read == rep2.rows_emitted == n_good and rep2.reconciles()
    assert elapsed < 10.0, elapsed

"""``ehrharmon`` command line: one subcommand per pipeline stage plus ``run``.

Parameter precedence is flag > ``--config`` file > built-in default. Reports
echo the effective stage parameters; manifests additionally record paths,
thread count and SHA-256 digests of every input and output.
"""
from __future__ import annotations

import argparse
import contextlib
import glob
import logging
import shutil
import sys
import tempfile
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .codes import parse_code
from .fileio import atomic_write, read_kv, save_kv, sha256_file

log = logging.getLogger("ehrharmon")

# Echoed into manifests only: they change with the machine or layout, not the data.
_EXECUTION_KEYS = {"threads", "config", "manifest", "command", "synth_command", "verbose", "func"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


def stage_seed(root: int, stage: str) -> int:
    """Independent per-stage seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text: str) -> List[int]:
    return [int(t) for t in _csv_list(text)]


def _float_list(text: str) -> List[float]:
    return [float(t) for t in _csv_list(text)]


def _rank_arg(text: str):
    return None if str(text) == "auto" else int(text)


def _n_random_arg(text: str):
    return None if str(text) == "auto" else int(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def stage_params(args: argparse.Namespace) -> Dict[str, object]:
    """Effective parameters worth echoing into a data report."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k.startswith("_") or k in _EXECUTION_KEYS or v is None or callable(v):
            continue
        if k in getattr(args, "_path_keys", ()):
            continue
        out[f"config.{k}"] = v
    return out


def _all_params(args: argparse.Namespace) -> Dict[str, object]:
    return {f"config.{k}": v for k, v in sorted(vars(args).items())
            if not k.startswith("_") and k != "func" and v is not None and not callable(v)}


def write_manifest(path, args, inputs: Sequence, outputs: Dict[str, Path]) -> None:
    items: Dict[str, object] = {"tool": "ehrharmon", "version": __version__, "command": args.command}
    items.update(_all_params(args))
    for p in sorted({str(p) for p in inputs}):
        items[f"input.{p}"] = sha256_file(p)
    for name in sorted(outputs):
        items[f"output.{name}"] = sha256_file(outputs[name])
    save_kv(path, items)


def _expand_inputs(patterns: Sequence[str]) -> List[str]:
    files: List[str] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        if not hits:
            raise FileNotFoundError(f"no input matches {pat!r}")
        files.extend(hits)
    return files


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


# -- stage commands ------------------------------------------------------------

def cmd_clean(args) -> Dict[str, Path]:
    from .events import clean_files, write_events

    files = _expand_inputs(args.input)
    records, report = clean_files(files, args.batch_size, args.min_year, args.max_year, args.threads)
    with atomic_write(args.output) as fh:
        write_events(fh, records)
    out = {"events": Path(args.output)}
    if args.report:
        items = report.as_dict()
        items["max_year_effective"] = args.max_year if args.max_year is not None else _current_year()
        items.update(stage_params(args))
        save_kv(args.report, items)
        out["report"] = Path(args.report)
    args._inputs = files
    return out


def _current_year() -> int:
    from .events import current_year
    return current_year()


def cmd_rollup(args) -> Dict[str, Path]:
    from .events import read_events, write_events
    from .rollup import RollupPolicy, load_mapping, rollup_events

    _require(args.input, *(args.map or []))
    tables = [load_mapping(p) for p in (args.map or [])]
    events = read_events(args.input)
    out_events, report = rollup_events(events, tables, RollupPolicy(args.unmapped, args.multi_target), args.phecode_level)
    with atomic_write(args.output) as fh:
        write_events(fh, out_events)
    out = {"events": Path(args.output)}
    if args.report:
        items = report.as_dict()
        items.update(stage_params(args))
        save_kv(args.report, items)
        out["report"] = Path(args.report)
    args._inputs = [args.input, *(args.map or [])]
    return out


def cmd_cohort(args) -> Dict[str, Path]:
    from .cohort import CohortCriteria, aggregate_monthly, select_cohort, write_monthly
    from .events import parse_day, read_events

    _require(args.input)
    events = read_events(args.input)
    rng = None
    if args.date_from or args.date_to:
        start = parse_day(args.date_from) if args.date_from else parse_day("0001-01-01")
        end = parse_day(args.date_to) if args.date_to else parse_day("9999-12-31")
        rng = (start, end)
    crit = CohortCriteria(frozenset(parse_code(c) for c in args.codes), args.min_count, rng)
    cohort = select_cohort(events, crit)
    monthly = aggregate_monthly(events, cohort, rng)
    out = {}
    with atomic_write(args.patients_out) as fh:
        for p in sorted(cohort):
            fh.write(p + "\n")
    out["patients"] = Path(args.patients_out)
    if args.monthly_out:
        with atomic_write(args.monthly_out) as fh:
            write_monthly(fh, monthly)
        out["monthly"] = Path(args.monthly_out)
    if args.report:
        items = {"patients": len(cohort), "monthly_rows": len(monthly.rows), "monthly_total": monthly.total(),
                 "missing_patients": len(monthly.missing_patients)}
        if monthly.missing_patients:
            items["warning.missing_patients"] = monthly.missing_patients
        items.update(stage_params(args))
        save_kv(args.report, items)
        out["report"] = Path(args.report)
    args._inputs = [args.input]
    return out


def cmd_cooccur(args) -> Dict[str, Path]:
    from .cooccur import count_cooccurrence, meta_path, save_counts
    from .events import read_events

    _require(args.input)
    C = count_cooccurrence(read_events(args.input), args.window_days, args.mode, args.threads)
    save_counts(args.output, C)
    args._inputs = [args.input]
    return {"counts": Path(args.output), "counts_meta": meta_path(args.output)}


def cmd_sppmi(args) -> Dict[str, Path]:
    from .cooccur import load_counts, meta_path
    from .embed import build_sppmi, save_sppmi

    _require(args.counts)
    S = build_sppmi(load_counts(args.counts), args.k)
    save_sppmi(args.output, S)
    args._inputs = [args.counts, meta_path(args.counts)]
    return {"sppmi": Path(args.output), "sppmi_meta": meta_path(args.output)}


def cmd_embed(args) -> Dict[str, Path]:
    from .embed import load_sppmi, select_rank_auc, select_rank_variance, train_embedding
    from .embedding import save_embedding
    from .validate import read_pairs

    _require(args.sppmi, args.auc_pairs)
    S = load_sppmi(args.sppmi)
    seed = stage_seed(args.seed, "embed")
    if args.rank is not None:
        d, rule = args.rank, "fixed"
    elif args.auc_pairs:
        d = select_rank_auc(S, read_pairs(args.auc_pairs), args.grid, seed=seed)
        rule = "auc"
    else:
        d, rule = select_rank_variance(S, args.variance, seed=seed), "variance"
    e = train_embedding(S, d, seed=seed)
    save_embedding(args.output, e)
    out = {"embedding": Path(args.output)}
    if args.report:
        items = {"rank": d, "rule": rule, "vocab_size": len(e.vocab)}
        items.update(stage_params(args))
        save_kv(args.report, items)
        out["report"] = Path(args.report)
    args._inputs = [args.sppmi] + ([args.auc_pairs] if args.auc_pairs else [])
    return out


def cmd_integrate(args) -> Dict[str, Path]:
    from .embedding import Provenance, load_embedding, save_embedding
    from .integrate import IntegrationSpec, concat_weighted, load_embedding_file, vocab_overlap

    _require(args.ehr, args.plm)
    ehr = load_embedding(args.ehr, Provenance.ehr_svd)
    plm = load_embedding_file(args.plm)
    spec = IntegrationSpec(args.weight, not args.no_normalize, args.missing)
    out_e = concat_weighted(ehr, plm, spec)
    save_embedding(args.output, out_e)
    out = {"embedding": Path(args.output)}
    if args.report:
        shared, ehr_only, plm_only = vocab_overlap(ehr, plm)
        items = {"shared": len(shared), "dropped_ehr": len(ehr_only), "dropped_plm": len(plm_only), "dim": out_e.dim}
        items.update(stage_params(args))
        save_kv(args.report, items)
        out["report"] = Path(args.report)
    args._inputs = [args.ehr, args.plm]
    return out


def cmd_features(args) -> Dict[str, Path]:
    from .embedding import load_embedding
    from .integrate import select_features

    _require(args.embedding)
    e = load_embedding(args.embedding)
    ranked = select_features(e, parse_code(args.target), args.top, args.domains)
    with atomic_write(args.output) as fh:
        fh.write("rank\tcode\tcosine\n")
        for i, (c, s) in enumerate(ranked, 1):
            fh.write(f"{i}\t{c.text}\t{s!r}\n")
    args._inputs = [args.embedding]
    return {"features": Path(args.output)}


def cmd_bonmi(args) -> Dict[str, Path]:
    from .bonmi import InstitutionSummary, bonmi_join, default_weights
    from .embed import load_sppmi
    from .embedding import save_embedding

    _require(*args.sppmi)
    if len(args.sppmi) < 2:
        raise ValueError("bonmi needs at least two --sppmi inputs")
    mats = [load_sppmi(p) for p in args.sppmi]
    counts = args.patient_counts
    if counts is not None and len(counts) != len(mats):
        raise ValueError("one patient count per --sppmi input required")
    names = [f"inst{i + 1}" for i in range(len(mats))]
    base = [InstitutionSummary(n, m, 1.0, counts[i] if counts else None) for i, (n, m) in enumerate(zip(names, mats))]
    if args.weights is None and counts is None:
        raise ValueError("give --weights or --patient-counts")
    weights = default_weights(base, args.weights)
    summaries = [InstitutionSummary(s.name, s.sppmi, float(w), s.patient_count) for s, w in zip(base, weights)]
    res = bonmi_join(summaries, args.rank, args.final_rank, tau=args.variance, floor=args.floor,
                     seed=stage_seed(args.seed, "bonmi"), threads=args.threads)
    save_embedding(args.output, res.embedding)
    out = {"embedding": Path(args.output)}
    if args.diagnostics:
        items: Dict[str, object] = {}
        for i, (n, p) in enumerate(zip(names, args.sppmi)):
            items[f"institution.{n}.weight"] = float(weights[i])
            items[f"institution.{n}.vocab"] = len(mats[i].vocab)
        for step_no, st in enumerate(res.diagnostics["alignment"]):
            items[f"align.{step_no}.institution"] = st["institution"]
            items[f"align.{step_no}.overlap"] = st["overlap"]
            items[f"align.{step_no}.residual"] = st["residual"]
            items[f"align.{step_no}.relative_residual"] = st["relative_residual"]
        for k, v in res.diagnostics["pairwise_overlap"].items():
            items[f"overlap.{k}"] = v
        for k in ("rank", "final_rank", "union_vocab", "observed_fraction"):
            items[k] = res.diagnostics[k]
        items.update(stage_params(args))
        save_kv(args.diagnostics, items)
        out["diagnostics"] = Path(args.diagnostics)
    args._inputs = list(args.sppmi)
    return out


def cmd_validate(args) -> Dict[str, Path]:
    from .embedding import load_embedding
    from .validate import auc_related_vs_random, read_pairs

    _require(args.embedding, args.pairs)
    e = load_embedding(args.embedding)
    rep = auc_related_vs_random(e, read_pairs(args.pairs), args.n_random, stage_seed(args.seed, "validate"))
    items = rep.as_dict()
    items.update(stage_params(args))
    save_kv(args.report, items)
    args._inputs = [args.embedding, args.pairs]
    return {"report": Path(args.report)}


def cmd_mapacc(args) -> Dict[str, Path]:
    from .embedding import load_embedding
    from .validate import read_gold, topk_accuracy

    _require(args.embedding, args.gold)
    res = topk_accuracy(load_embedding(args.embedding), read_gold(args.gold), args.candidate_domains, args.ks)
    items = res.as_dict()
    items.update(stage_params(args))
    save_kv(args.report, items)
    args._inputs = [args.embedding, args.gold]
    return {"report": Path(args.report)}


def _synth_spec(args):
    from .synth import InstitutionSpec, SynthSpec

    cfg = read_kv(args.spec) if args.spec else {}
    n_inst = len(_csv_list(cfg.get("fractions", "0.6667,0.6667,0.6667")))
    fractions = _float_list(cfg.get("fractions", ",".join(["0.6667"] * n_inst)))
    noise = _float_list(cfg.get("noise", ",".join(["0"] * n_inst)))
    counts = _int_list(cfg.get("patient_counts", ",".join(["1000"] * n_inst)))
    if not len(fractions) == len(noise) == len(counts):
        raise ValueError("fractions, noise and patient_counts need one value per institution")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    return SynthSpec(
        vocab_size=int(cfg.get("vocab_size", 60)),
        rank=int(cfg.get("rank", 5)),
        institutions=tuple(InstitutionSpec(f, s, c) for f, s, c in zip(fractions, noise, counts)),
        patients=int(cfg.get("patients", 2000)),
        days=int(cfg.get("days", 3650)),
        intensity=float(cfg.get("intensity", 6.0)),
        codes_per_episode=float(cfg.get("codes_per_episode", 5.0)),
        sharpness=float(cfg.get("sharpness", 4.0)),
        floor=_bool(cfg.get("floor", "true")),
        seed=seed,
    )


def cmd_synth(args) -> Dict[str, Path]:
    from .embed import SPPMIMatrix, save_sppmi
    from .embedding import save_embedding
    from .events import write_events
    from .synth import gen_ground_truth, gen_institution_split, gen_patient_events, planted_pairs
    from .validate import write_pairs
    from .cooccur import meta_path

    if args.spec:
        _require(args.spec)
    spec = _synth_spec(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    X, G = gen_ground_truth(spec.vocab_size, spec.rank, spec.seed)
    out: Dict[str, Path] = {}
    save_embedding(out_dir / "truth_embedding.tsv", X)
    out["truth_embedding"] = out_dir / "truth_embedding.tsv"
    if args.synth_command == "truth":
        save_sppmi(out_dir / "truth_matrix.tsv", SPPMIMatrix.from_dense(X.vocab, G))
        out["truth_matrix"] = out_dir / "truth_matrix.tsv"
    elif args.synth_command == "split":
        items: Dict[str, object] = {}
        for s in gen_institution_split(G, spec, X.vocab):
            p = out_dir / f"{s.name}.sppmi.tsv"
            save_sppmi(p, s.sppmi)
            out[s.name] = p
            out[s.name + "_meta"] = meta_path(p)
            items[f"{s.name}.weight"] = s.weight
            items[f"{s.name}.patient_count"] = s.patient_count
            items[f"{s.name}.vocab"] = len(s.sppmi.vocab)
        save_kv(out_dir / "split.txt", items)
        out["split"] = out_dir / "split.txt"
    else:
        events = gen_patient_events(X, spec.patients, spec.days, spec.seed, spec.intensity,
                                    spec.codes_per_episode, spec.sharpness)
        with atomic_write(out_dir / "events.tsv") as fh:
            write_events(fh, events)
        with atomic_write(out_dir / "pairs.tsv") as fh:
            write_pairs(fh, planted_pairs(X))
        out["events"] = out_dir / "events.tsv"
        out["pairs"] = out_dir / "pairs.tsv"
    args._inputs = [args.spec] if args.spec else []
    return out


# -- full pipeline -----------------------------------------------------------

RUN_DEFAULTS = {
    "min_year": 1980,
    "batch_size": 100_000,
    "unmapped": "keep",
    "multi_target": "emit_all",
    "window_days": 30,
    "mode": "day_pair",
    "k": 1.0,
    "variance": 0.95,
}


def run_pipeline(args) -> Dict[str, Path]:
    """clean -> [rollup] -> cooccur -> sppmi -> embed -> [validate], all or nothing.

    Outputs are produced in a scratch directory and moved into ``out_dir``
    only after every stage succeeded.
    """
    from .cooccur import count_cooccurrence, save_counts
    from .embed import build_sppmi, select_rank_variance, train_embedding, save_sppmi
    from .embedding import save_embedding
    from .events import clean_files, write_events
    from .rollup import RollupPolicy, load_mapping, rollup_events
    from .validate import auc_related_vs_random, read_pairs

    if not args.input:
        raise StageError("setup", "no --input given")
    try:
        files = _expand_inputs(args.input)
        _require(*(args.map or []), args.pairs)
    except FileNotFoundError as exc:
        raise StageError("setup", str(exc)) from None
    out_dir = Path(args.out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".ehrharmon-run-", dir=out_dir.parent))
    produced: Dict[str, Path] = {}

    @contextlib.contextmanager
    def stage(name):
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

    try:
        with stage("clean"):
            events, report = clean_files(files, args.batch_size, args.min_year, args.max_year, args.threads)
            with atomic_write(scratch / "events.clean.tsv") as fh:
                write_events(fh, events)
            save_kv(scratch / "clean.report", {**report.as_dict(), **stage_params(args)})
        if args.map or args.phecode_level:
            with stage("rollup"):
                tables = [load_mapping(p) for p in args.map or []]
                events, rrep = rollup_events(events, tables, RollupPolicy(args.unmapped, args.multi_target),
                                             args.phecode_level)
                with atomic_write(scratch / "events.rollup.tsv") as fh:
                    write_events(fh, events)
                save_kv(scratch / "rollup.report", {**rrep.as_dict(), **stage_params(args)})
        with stage("cooccur"):
            C = count_cooccurrence(events, args.window_days, args.mode, args.threads)
            save_counts(scratch / "counts.tsv", C)
        with stage("sppmi"):
            S = build_sppmi(C, args.k)
            save_sppmi(scratch / "sppmi.tsv", S)
        with stage("embed"):
            seed = stage_seed(args.seed, "embed")
            d = args.rank if args.rank is not None else select_rank_variance(S, args.variance, seed=seed)
            e = train_embedding(S, d, seed=seed)
            save_embedding(scratch / "embedding.tsv", e)
            save_kv(scratch / "embed.report", {"rank": d, "vocab_size": len(e.vocab), **stage_params(args)})
        if args.pairs:
            with stage("validate"):
                rep = auc_related_vs_random(e, read_pairs(args.pairs), args.n_random, stage_seed(args.seed, "validate"))
                save_kv(scratch / "validation.report", {**rep.as_dict(), **stage_params(args)})
        out_dir.mkdir(parents=True, exist_ok=True)
        for p in sorted(scratch.iterdir()):
            target = out_dir / p.name
            p.replace(target)
            produced[p.name] = target
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    args._inputs = files + list(args.map or []) + ([args.pairs] if args.pairs else [])
    write_manifest(out_dir / "manifest.txt", args, args._inputs, produced)
    produced["manifest.txt"] = out_dir / "manifest.txt"
    return produced


# -- parser -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="also write a manifest with digests to this file")
    p.add_argument("-v", "--verbose", action="store_true")


def _clean_flags(p, required=True):
    p.add_argument("--input", action="append", required=required, help="event file or glob (repeatable)")
    p.add_argument("--min-year", type=int, default=1980)
    p.add_argument("--max-year", type=int, default=None, help="default: current calendar year")
    p.add_argument("--batch-size", type=int, default=100_000)


def _rollup_flags(p):
    p.add_argument("--map", action="append", help="mapping TSV, applied in the order given (repeatable)")
    p.add_argument("--phecode-level", choices=["integer", "one_digit", "two_digit"])
    p.add_argument("--unmapped", choices=["keep", "drop", "error"], default="keep")
    p.add_argument("--multi-target", choices=["emit_all", "first_listed"], default="emit_all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrharmon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ehrharmon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", help="parse, date-filter, deduplicate and merge event files")
    _clean_flags(p)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_clean, _path_keys=("input", "output", "report"))

    p = sub.add_parser("rollup", help="map and roll up codes")
    p.add_argument("--input", required=True)
    _rollup_flags(p)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_rollup, _path_keys=("input", "map", "output", "report"))

    p = sub.add_parser("cohort", help="select a cohort and aggregate monthly counts")
    p.add_argument("--input", required=True)
    p.add_argument("--codes", type=_csv_list, required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--from", dest="date_from")
    p.add_argument("--to", dest="date_to")
    p.add_argument("--patients-out", required=True)
    p.add_argument("--monthly-out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_cohort, _path_keys=("input", "patients_out", "monthly_out", "report"))

    p = sub.add_parser("cooccur", help="count windowed code co-occurrence")
    p.add_argument("--input", required=True)
    p.add_argument("--window-days", type=int, default=30)
    p.add_argument("--mode", choices=["day_pair", "patient"], default="day_pair")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_cooccur, _path_keys=("input", "output"))

    p = sub.add_parser("sppmi", help="shifted positive PMI from counts")
    p.add_argument("--counts", required=True)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sppmi, _path_keys=("counts", "output"))

    p = sub.add_parser("embed", help="SVD embedding of an SPPMI matrix")
    p.add_argument("--sppmi", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int)
    g.add_argument("--variance", type=float, default=0.95)
    g.add_argument("--auc-pairs")
    p.add_argument("--grid", type=_int_list, default="50,100,200")
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_embed, _path_keys=("sppmi", "auc_pairs", "output", "report"))

    p = sub.add_parser("integrate", help="weighted concatenation of EHR and PLM embeddings")
    p.add_argument("--ehr", required=True)
    p.add_argument("--plm", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--missing", choices=["drop", "error"], default="drop")
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_integrate, _path_keys=("ehr", "plm", "output", "report"))

    p = sub.add_parser("features", help="codes most cosine-similar to a target")
    p.add_argument("--embedding", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--top", type=int, default=100)
    p.add_argument("--domains", type=_csv_list)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_features, _path_keys=("embedding", "output"))

    p = sub.add_parser("bonmi", help="joint embedding from several institutions' SPPMI files")
    p.add_argument("--sppmi", action="append", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weights", type=_float_list)
    g.add_argument("--patient-counts", type=_int_list)
    p.add_argument("--rank", type=_rank_arg, default="auto")
    p.add_argument("--final-rank", type=_rank_arg, default="auto")
    p.add_argument("--variance", type=float, default=0.95)
    p.add_argument("--floor", action="store_true", help="clip imputed entries at zero")
    p.add_argument("--output", required=True)
    p.add_argument("--diagnostics")
    p.set_defaults(func=cmd_bonmi, _path_keys=("sppmi", "output", "diagnostics"))

    p = sub.add_parser("validate", help="related-vs-random AUC")
    p.add_argument("--embedding", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--n-random", type=_n_random_arg, default="auto")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_validate, _path_keys=("embedding", "pairs", "report"))

    p = sub.add_parser("mapacc", help="top-k local-to-standard mapping accuracy")
    p.add_argument("--embedding", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--candidate-domains", type=_csv_list, default="LOINC,LP")
    p.add_argument("--ks", type=_int_list, default="1,5,10,20")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_mapacc, _path_keys=("embedding", "gold", "report"))

    p = sub.add_parser("synth", help="write synthetic ground truth, institution splits or events")
    p.add_argument("synth_command", choices=["truth", "split", "events"])
    p.add_argument("--spec", help="key=value synthetic spec")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth, _path_keys=("spec", "out_dir"))

    p = sub.add_parser("run", help="clean -> rollup -> cooccur -> sppmi -> embed -> validate")
    _clean_flags(p, required=False)
    _rollup_flags(p)
    p.add_argument("--window-days", type=int, default=30)
    p.add_argument("--mode", choices=["day_pair", "patient"], default="day_pair")
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--rank", type=int)
    p.add_argument("--variance", type=float, default=0.95)
    p.add_argument("--pairs")
    p.add_argument("--n-random", type=_n_random_arg, default="auto")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=run_pipeline, _path_keys=("input", "map", "pairs", "out_dir"))

    for sp_ in sub.choices.values():
        _add_common(sp_)
    if "synth" in sub.choices:
        # the synth spec file carries its own seed; a flag overrides it
        sub.choices["synth"].set_defaults(seed=None)
    return parser


def _apply_config(parser: argparse.ArgumentParser, command: str, cfg: Dict[str, str]) -> None:
    """Install config-file values as subparser defaults (flags still win)."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cfg.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None:
            log.warning("config key %r is not a parameter of %s; ignored", key, command)
            continue
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = _bool(raw)
        elif isinstance(act, argparse._AppendAction):
            defaults[dest] = _csv_list(raw)
        elif act.type is not None:
            defaults[dest] = act.type(raw)
        else:
            defaults[dest] = raw
        # a config value satisfies a required flag
        act.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in argv if not a.startswith("-") and a in _commands(parser)), None)
        if command is not None:
            _apply_config(parser, command, read_kv(known.config))
    return parser.parse_args(argv)


def _commands(parser) -> List[str]:
    return list(next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except FileNotFoundError as exc:
        print(f"ehrharmon: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        outputs = args.func(args)
        if args.manifest and args.command != "run":
            write_manifest(args.manifest, args, getattr(args, "_inputs", []), outputs)
    except StageError as exc:
        print(f"ehrharmon {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"ehrharmon {args.command}: stage {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``awe`` command line: data synthesis, training, embedding, evaluation and reports.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numerical
failure. Progress goes to stderr; artifacts go to the files named by
``--out`` (stdout when a command allows omitting it).
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import CorpusError, SynthConfig, load_manifest, synthesize_corpus, write_manifest
from .evalkit import (
    VARIANTS, EvalReport, build_index, fingerprint, mean_average_precision, phonological_similarity_eval,
)
from .phonology import CostModel, FeatureTableError, levenshtein, load_feature_table, parse_phones, pwld
from .trainer import CheckpointError, NumericalError, RunConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("awe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

MATRIX = [
    ("PhoneDetect", "phone_detect", "semi_hard"),
    ("Word2Phones", "word2phones", "semi_hard"),
    ("Siamese-rand", "siamese", "random"),
    ("Siamese-hard", "siamese", "semi_hard"),
]
ENCODER_LABELS = {"cnn": "CNN", "bgru": "BGRU"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers -----------------------------------------------------------------

def experiment_matrix(base: RunConfig) -> dict[str, RunConfig]:
    """The 2 encoders x 4 objectives grid; only encoder/objective/sampling vary."""
    out = {}
    for enc in ("cnn", "bgru"):
        for label, objective, sampling in MATRIX:
            d = base.to_dict()
            d.update(encoder=enc, objective=objective, sampling=sampling)
            out[f"{enc}-{label}"] = RunConfig.from_dict(d)
    return out


def write_stamp(out_dir: Path, resolved: dict, seed) -> str:
    fp = fingerprint(resolved)
    (out_dir / "fingerprint.json").write_text(
        json.dumps({"fingerprint": fp, "seed": seed, "version": __version__}, sort_keys=True, indent=1) + "\n")
    return fp


def write_embeddings(path: Path, emb: np.ndarray, ids) -> None:
    """Same layout as feature files (uint32 rows, uint32 dim, float32 LE) plus an id sidecar."""
    emb = np.ascontiguousarray(emb, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *emb.shape))
        f.write(emb.tobytes())
    Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in ids))


def read_embeddings(path: Path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorpusError(f"{path}: truncated embedding header")
    n, d = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * n * d:
        raise CorpusError(f"{path}: expected {n}x{d} float32 values")
    emb = np.frombuffer(raw[8:], dtype="<f4").reshape(n, d)
    ids_path = Path(str(path) + ".ids")
    if not ids_path.exists():
        raise CorpusError(f"{path}: missing id sidecar {ids_path.name}")
    ids = ids_path.read_text().split()
    if len(ids) != n:
        raise CorpusError(f"{ids_path}: {len(ids)} ids for {n} embeddings")
    return emb, ids


def _segments_for(ids, manifest: Path, table):
    corpus = load_manifest(manifest, table)
    by_id = {s.segment_id: s for s in corpus.all_segments()}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CorpusError(f"segment {missing[0]!r} from embeddings not in manifest {manifest}")
    return [by_id[i] for i in ids]


def _table(path):
    return load_feature_table(path) if path else load_feature_table()


@contextmanager
def _output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w") as f:
            yield f


def _embed_parallel(model, segments, threads: int) -> np.ndarray:
    if threads <= 1 or len(segments) < 2:
        return model.embed(segments)
    chunks = np.array_split(np.arange(len(segments)), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = pool.map(lambda idx: model.embed([segments[i] for i in idx]), [c for c in chunks if len(c)])
    return np.concatenate(list(parts))


# --- subcommands -------------------------------------------------------------

def cmd_synth_data(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    scfg = SynthConfig.from_dict(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synthesize_corpus(scfg, _table(args.features))
    manifest = write_manifest(corpus, out)
    (out / "synth_config.json").write_text(json.dumps(scfg.to_dict(), sort_keys=True, indent=1) + "\n")
    write_stamp(out, scfg.to_dict(), scfg.seed)
    log.info("wrote %s (%d/%d/%d segments)", manifest, len(corpus.train), len(corpus.valid), len(corpus.test))
    return EXIT_OK


def _run_one(cfg: RunConfig, manifest: Path, out: Path, table, resume: bool, threads: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(manifest, table)
    cfg_dict = cfg.to_dict()
    (out / "config.json").write_text(cfg.to_json() + "\n")
    fp = write_stamp(out, {k: v for k, v in cfg_dict.items() if k != "out_dir"}, cfg.seed)
    state_path = out / "state.ckpt"
    state = load_checkpoint(state_path) if resume and state_path.exists() else None
    res = train(cfg, corpus, resume=state, checkpoint_path=state_path, log_path=out / "train_log.jsonl")
    save_checkpoint(res.best, out / "best.ckpt")
    model = res.best.model()
    emb = _embed_parallel(model, corpus.test, threads)
    report = phonological_similarity_eval(build_index(emb, corpus.test), None, table, CostModel(), "eq5")
    report.fingerprint = fp
    (out / "metrics.json").write_text(report.to_json() + "\n")
    log.info("%s: test mAP %.4f tau %.4f (best epoch %s)", out.name, report.map, report.tau_mean, res.best.epoch)


def cmd_train(args) -> int:
    cfg = RunConfig.from_json(Path(args.config).read_text())
    manifest = Path(args.manifest or cfg.corpus or "")
    if not manifest.is_file():
        raise CorpusError(f"train: no manifest (use --manifest or the config's corpus key): {manifest}")
    out = Path(args.out or cfg.out_dir or "")
    if not str(out):
        raise UsageError("train: --out is required")
    table = _table(args.features)
    if args.matrix:
        for name, sub in experiment_matrix(cfg).items():
            _run_one(sub, manifest, out / name, table, args.resume, args.threads)
    else:
        _run_one(cfg, manifest, out, table, args.resume, args.threads)
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    table = _table(args.features)
    corpus = load_manifest(args.manifest, table)
    segments = corpus.split(args.split) if args.split != "all" else list(corpus.all_segments())
    emb = _embed_parallel(ckpt.model(), segments, args.threads)
    write_embeddings(Path(args.out), emb, [s.segment_id for s in segments])
    log.info("embedded %d segments -> %s", len(segments), args.out)
    return EXIT_OK


def _emit_report(report: EvalReport, args, label: str) -> None:
    with _output(args.out) as f:
        if args.tsv:
            f.write("model\tmAP\tmAP_std\ttau\ttau_std\n" + report.tsv_row(label) + "\n")
        else:
            f.write(report.to_json() + "\n")


def cmd_eval_map(args) -> int:
    emb, ids = read_embeddings(args.emb)
    segs = _segments_for(ids, Path(args.manifest), _table(args.features))
    m = mean_average_precision(build_index(emb, segs))
    report = EvalReport("none", m.map, m.std, None, None, per_query_ap=m.per_query,
                        n_queries=len(segs), n_excluded_map=m.n_excluded)
    report.fingerprint = fingerprint({"emb": Path(args.emb).name, "n": len(ids), "task": "map"})
    _emit_report(report, args, Path(args.emb).stem)
    log.info("mAP %.4f +- %.4f over %d queries (%d singletons excluded)", m.map, m.std, len(m.per_query),
             m.n_excluded)
    return EXIT_OK


def cmd_eval_phonsim(args) -> int:
    table = _table(args.features)
    emb, ids = read_embeddings(args.emb)
    segs = _segments_for(ids, Path(args.manifest), table)
    cm = CostModel(max_sub_cost=args.max_sub_cost)
    report = phonological_similarity_eval(build_index(emb, segs), None, table, cm, args.variant)
    report.fingerprint = fingerprint({"emb": Path(args.emb).name, "n": len(ids), "variant": args.variant})
    _emit_report(report, args, Path(args.emb).stem)
    log.info("tau (%s) %.4f +- %.4f over %d queries", args.variant, report.tau_mean, report.tau_std,
             report.n_queries)
    return EXIT_OK


def cmd_pwld(args) -> int:
    """Pairs file: TSV lines ``label_a  phones_a  label_b  phones_b`` (phones space separated)."""
    table = _table(args.features)
    cm = CostModel(max_sub_cost=args.max_sub_cost)
    rows = []
    for n, line in enumerate(Path(args.pairs).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"{args.pairs}:{n}: expected 4 tab-separated fields, got {len(parts)}")
        a, pa, b, pb = parts
        sa, sb = parse_phones(pa), parse_phones(pb)
        rows.append(f"{a}\t{b}\t{levenshtein(sa, sb)}\t{pwld(sa, sb, table, cm):.4f}")
    with _output(args.out) as f:
        f.write("a\tb\tLD\tPWLD\n" + "".join(r + "\n" for r in rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import ALL_CASES, TOLERANCE, timed_suite
    names = args.only or None
    if names:
        unknown = [n for n in names if n not in ALL_CASES]
        if unknown:
            raise UsageError(f"gradcheck: unknown case {unknown[0]!r}")
    errs, seconds = timed_suite(names)
    with _output(args.out) as f:
        for name, err in errs.items():
            f.write(f"{name}\t{err:.3e}\t{'ok' if err < TOLERANCE else 'FAIL'}\n")
    worst = max(errs.values())
    log.info("gradcheck: %d cases, max rel err %.2e, %.1fs", len(errs), worst, seconds)
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERICAL


def cmd_report(args) -> int:
    runs = Path(args.runs)
    rows = []
    for d in sorted(p for p in runs.iterdir() if (p / "metrics.json").is_file()):
        cfg = RunConfig.from_json((d / "config.json").read_text())
        m = json.loads((d / "metrics.json").read_text())
        label = next(lbl for lbl, obj, smp in MATRIX if obj == cfg.objective and
                     (obj != "siamese" or smp == cfg.sampling))
        rows.append((ENCODER_LABELS[cfg.encoder], label, m))
    if not rows:
        raise CorpusError(f"report: no run directories with metrics.json under {runs}")
    order = {lbl: i for i, (lbl, _, _) in enumerate(MATRIX)}
    rows.sort(key=lambda r: (r[0] != "CNN", order[r[1]]))
    fmt = lambda v: "nan" if v is None else f"{v:.3f}"
    with _output(args.out) as f:
        f.write("encoder\tobjective\tmAP\tmAP_std\ttau\ttau_std\tvariant\tfingerprint\n")
        for enc, label, m in rows:
            f.write(f"{enc}\t{label}\t{fmt(m['map'])}\t{fmt(m['map_std'])}\t{fmt(m['tau_mean'])}\t"
                    f"{fmt(m['tau_std'])}\t{m['variant']}\t{m.get('fingerprint')}\n")
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="awe", description="Acoustic word embedding experiments.")
    p.add_argument("--version", action="store_true", help="print version and feature-table checksum")
    p.add_argument("--threads", type=int, default=1, help="worker threads for embedding")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON object of synthesis settings")
    s.add_argument("--seed", type=int)
    s.add_argument("--features")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train one run (or the 8-run matrix)")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.add_argument("--features")
    s.add_argument("--resume", action="store_true", help="continue from OUT/state.ckpt if present")
    s.add_argument("--matrix", action="store_true", help="train all encoder x objective runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="embed manifest segments with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "valid", "test", "all"])
    s.add_argument("--features")
    s.set_defaults(func=cmd_embed)

    for name, func in (("eval-map", cmd_eval_map), ("eval-phonsim", cmd_eval_phonsim)):
        s = sub.add_parser(name)
        s.add_argument("--emb", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--features")
        s.add_argument("--out")
        s.add_argument("--tsv", action="store_true")
        if name == "eval-phonsim":
            s.add_argument("--variant", choices=VARIANTS, default="eq5")
            s.add_argument("--max-sub-cost", type=float, default=CostModel().max_sub_cost)
        s.set_defaults(func=func)

    s = sub.add_parser("pwld", help="LD and PWLD for a file of word pairs")
    s.add_argument("--pairs", required=True)
    s.add_argument("--features")
    s.add_argument("--max-sub-cost", type=float, default=CostModel().max_sub_cost)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pwld)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    s.add_argument("--only", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="aggregate run directories into one table")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(name)s: %(message)s", force=True)
    if args.version:
        print(f"awe {__version__} feature-table {load_feature_table().checksum()}")
        return EXIT_OK
    if args.command is None:
        print("awe: a subcommand is required (see awe --help)", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("awe: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"awe {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CorpusError, FeatureTableError, CheckpointError, KeyError, ValueError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"awe {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

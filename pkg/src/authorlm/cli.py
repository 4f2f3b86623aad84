"""Command-line entry point wiring the modules into reproducible pipelines.

Subcommands: prepare, split, synth, train, eval, analyze, generate, seeds.
Every output is written to a temp file and renamed, carries a provenance
header, and is a pure function of flags + config files + seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis, corpus as corpus_mod, evaluate, generate as gen_mod
from . import splits as splits_mod, synth as synth_mod, train as train_mod
from .model import ModelConfig, force_uniform
from .train import TrainConfig

ENV_OUT_DIR = "AUTHORLM_OUT_DIR"


class CliError(ValueError):
    pass


def _out_dir(args):
    out = args.out_dir or os.environ.get(ENV_OUT_DIR) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _atomic(path, write_fn):
    tmp = f"{path}.tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _config_hash(*dicts):
    blob = json.dumps(dicts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _provenance(args, **extra):
    parts = []
    for key, value in extra.items():
        parts.append(f"{key}={value}")
    if getattr(args, "seed", None) is not None:
        parts.append(f"seed={args.seed}")
    return ["provenance " + " ".join(parts)]


def _load_config_file(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _model_config(args, file_cfg):
    cfg = dict(file_cfg.get("model", {}))
    for key, flag in (("variant", "variant"), ("ada_dyn", "ada_dyn"),
                      ("stat_cond", "stat_cond")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return ModelConfig.from_dict(cfg)


def _train_config(args, file_cfg):
    cfg = dict(file_cfg.get("train", {}))
    for key in ("seed", "precision", "max_iters", "const_iters", "decay_iters",
                "batch_size", "eval_every", "deterministic"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if "max_iters" in cfg and "const_iters" not in cfg:
        # keep the schedule invariant satisfied for quick runs
        cfg["const_iters"] = max(0, cfg["max_iters"] - cfg.get("decay_iters", 0))
        cfg["decay_iters"] = cfg["max_iters"] - cfg["const_iters"]
    return TrainConfig.from_dict(cfg)


def _load_corpus_and_split(args):
    corp = corpus_mod.load_corpus(args.corpus, min_count=getattr(args, "min_count", None) or 5)
    split = splits_mod.load_split(args.split)
    if len(split.doc_split) != len(corp.documents):
        raise CliError(
            f"split covers {len(split.doc_split)} documents, corpus has {len(corp.documents)}"
        )
    return corp, split


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_prepare(args):
    corp = corpus_mod.load_corpus(args.raw, min_count=args.min_count,
                                  numerals_to_token=args.num_token)
    out = _out_dir(args)
    prov = _provenance(args, raw_hash=_file_hash(args.raw), min_count=args.min_count)
    _atomic(os.path.join(out, "corpus.jsonl"),
            lambda p: corpus_mod.save_corpus(corp, p, header_lines=prov))
    _atomic(os.path.join(out, "vocab.txt"), corp.vocab.save)
    stats = corpus_mod.corpus_stats(corp)
    print(f"documents={stats['num_documents']} tokens={stats['num_tokens']} "
          f"authors={stats['num_authors']} timesteps={stats['num_timesteps']} "
          f"vocab={stats['vocab_size']}")
    return 0


def _cmd_split(args):
    corp = corpus_mod.load_corpus(args.corpus, min_count=1)
    split = splits_mod.make_split(corp, args.task, args.seed)
    violations = splits_mod.verify_split(corp, split)
    if violations:
        raise CliError(f"generated split failed verification: {violations[:3]}")
    out = _out_dir(args)
    prov = _provenance(args, corpus_hash=_file_hash(args.corpus), task=args.task)
    path = os.path.join(out, f"split_{args.task}_{args.seed}.tsv")
    _atomic(path, lambda p: splits_mod.save_split(split, p, header_lines=prov))
    print(path)
    return 0


def _cmd_synth(args):
    spec = synth_mod.load_spec(args.spec)
    corp = synth_mod.generate_corpus(spec)
    out = _out_dir(args)
    prov = _provenance(args, spec_hash=_file_hash(args.spec))
    path = os.path.join(out, "synth_corpus.jsonl")
    _atomic(path, lambda p: corpus_mod.save_corpus(corp, p, header_lines=prov))
    print(path)
    return 0


def _cmd_train(args):
    file_cfg = _load_config_file(args.config)
    mcfg = _model_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg)
    corp, split = _load_corpus_and_split(args)
    out = _out_dir(args)
    if args.debug_uniform:
        tcfg_d = tcfg.to_dict()
        tcfg_d.update(max_iters=0, const_iters=0, decay_iters=0)
        tcfg = TrainConfig.from_dict(tcfg_d)
    ckpt, log = train_mod.fit(
        corp, split, mcfg, tcfg,
        log_fn=lambda row: print(f"iter={row[0]} loss={row[1]:.4f} "
                                 f"val_ppl={row[2]:.4f} lr={row[3]:.6f}"),
    )
    if args.debug_uniform:
        force_uniform(ckpt.model)
    prov = _provenance(args, corpus_hash=_file_hash(args.corpus),
                       config_hash=_config_hash(mcfg.to_dict(), tcfg.to_dict()))
    _atomic(os.path.join(out, "checkpoint.bin"),
            lambda p: train_mod.save_checkpoint(ckpt, p))
    _atomic(os.path.join(out, "train_log.tsv"),
            lambda p: train_mod.save_train_log(log, p, header_lines=prov))
    print(os.path.join(out, "checkpoint.bin"))
    return 0


def _cmd_eval(args):
    corp, split = _load_corpus_and_split(args)
    ckpt = train_mod.load_checkpoint(
        args.checkpoint,
        expect_vocab_hash=train_mod.vocab_hash(corp.vocab),
        expect_split_hash=train_mod.split_hash(split) if args.check_split else None,
    )
    report = evaluate.evaluate_split(ckpt.model, corp, split, subset=args.subset)
    out = _out_dir(args)
    prov = _provenance(args, corpus_hash=_file_hash(args.corpus),
                       checkpoint_hash=_file_hash(args.checkpoint))
    _atomic(os.path.join(out, "report.tsv"),
            lambda p: evaluate.save_report(report, p, header_lines=prov))
    print(f"micro={report.micro_ppl:.4f} macro={report.macro_ppl:.4f}")
    if args.baseline_report:
        baseline = evaluate.load_report(args.baseline_report)
        series = evaluate.gain_series(report, baseline)
        _atomic(os.path.join(out, "gain.tsv"),
                lambda p: evaluate.save_gain_series(series, p, header_lines=prov))
    return 0


def _cmd_analyze(args):
    corp = corpus_mod.load_corpus(args.corpus, min_count=1)
    ckpt = train_mod.load_checkpoint(
        args.checkpoint, expect_vocab_hash=train_mod.vocab_hash(corp.vocab)
    )
    traj = analysis.extract_trajectories(ckpt.model, corp.author_names)
    out = _out_dir(args)
    prov = _provenance(args, checkpoint_hash=_file_hash(args.checkpoint))

    _atomic(os.path.join(out, "avg_cosine.tsv"),
            lambda p: analysis.save_series(analysis.avg_cosine_series(traj), p, prov))
    cells, fractions = analysis.project_trajectories(traj)
    _atomic(os.path.join(out, "trajectories_pca.tsv"),
            lambda p: analysis.save_projection(traj, cells, p, prov + [
                f"explained_variance {fractions[0]!r} {fractions[1]!r}"
            ]))
    if traj.h_static is not None:
        _atomic(os.path.join(out, "static_vectors.tsv"),
                lambda p: analysis.save_vectors(traj.author_names, traj.h_static, p, prov))
    restrict = None
    if args.restrict_most_published:
        counts = np.zeros(corp.num_authors, dtype=int)
        for doc in corp.documents:
            counts[doc.author] += 1
        order = np.argsort(-counts, kind="stable")
        restrict = set(int(a) for a in order[:args.restrict_most_published])
    k = min(args.top_k, len(restrict) if restrict else corp.num_authors)
    for direction in ("most", "least"):
        ranked = analysis.top_movers(traj, k, direction, restrict)
        _atomic(os.path.join(out, f"top_movers_{direction}.tsv"),
                lambda p, r=ranked: analysis.save_top_movers(traj, r, p, prov))
    try:
        series = analysis.label_entropy_series(corp)
        _atomic(os.path.join(out, "label_entropy.tsv"),
                lambda p: analysis.save_series(series, p, prov))
    except analysis.AnalysisError:
        pass  # unlabeled corpus
    print(out)
    return 0


def _cmd_generate(args):
    corp = corpus_mod.load_corpus(args.corpus, min_count=1)
    ckpt = train_mod.load_checkpoint(
        args.checkpoint, expect_vocab_hash=train_mod.vocab_hash(corp.vocab)
    )
    if args.author in corp.author_names:
        author = corp.author_names.index(args.author)
    else:
        try:
            author = int(args.author)
        except ValueError:
            raise CliError(f"unknown author {args.author!r}") from None
    prefix = corpus_mod.normalize_and_tokenize(args.prefix)
    hyps = gen_mod.beam_search(ckpt.model, corp.vocab, author, args.time,
                               prefix, beam=args.beam, max_len=args.max_len)
    print(gen_mod.format_hypotheses(hyps))
    return 0


def _cmd_seeds(args):
    file_cfg = _load_config_file(args.config)
    mcfg = _model_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg)
    corp = corpus_mod.load_corpus(args.corpus, min_count=getattr(args, "min_count", None) or 5)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = list(range(args.first_seed, args.first_seed + args.num_seeds))
    runs, summary = train_mod.seed_sweep(
        corp, args.task, variants, seeds, mcfg, tcfg, log_fn=print
    )
    table = train_mod.format_summary(summary)
    out = _out_dir(args)
    prov = _provenance(args, corpus_hash=_file_hash(args.corpus), task=args.task,
                       config_hash=_config_hash(mcfg.to_dict(), tcfg.to_dict()))

    def write(p):
        with open(p, "w", encoding="utf-8") as f:
            for line in prov:
                f.write(f"# {line}\n")
            f.write(table + "\n")

    _atomic(os.path.join(out, f"seeds_{args.task}.tsv"), write)
    print(table)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common(p, *, seed=True):
    p.add_argument("--out-dir", default=None,
                   help=f"output directory (default: ${ENV_OUT_DIR} or .)")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def _add_model_flags(p):
    p.add_argument("--variant", choices=("lstm", "lstm-a", "lstm-iat", "lstm-at", "ours"),
                   default=None)
    p.add_argument("--ada-dyn", dest="ada_dyn", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--stat-cond", dest="stat_cond", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--config", default=None, help="JSON config file: {model: {}, train: {}}")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.add_argument("--const-iters", dest="const_iters", type=int, default=None)
    p.add_argument("--decay-iters", dest="decay_iters", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="authorlm",
        description="Temporal author-conditioned language modeling toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="raw line records to corpus + vocab")
    p.add_argument("--raw", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--num-token", action=argparse.BooleanOptionalAction, default=True,
                   help="collapse digit runs to the <num> token")
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_prepare)

    p = sub.add_parser("split", help="assign documents to train/val/test")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True, choices=("modeling", "imputation", "prediction"))
    _add_common(p)
    p.set_defaults(fn=_cmd_split, seed=0)

    p = sub.add_parser("synth", help="generate a drift-world corpus")
    p.add_argument("--spec", required=True)
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="fit one model under one split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--debug-uniform", action="store_true",
                   help="zero the output path: uniform debug checkpoint")
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split subset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--subset", choices=("val", "test", "train"), default="test")
    p.add_argument("--baseline-report", default=None,
                   help="emit gain.tsv against this report")
    p.add_argument("--check-split", action=argparse.BooleanOptionalAction, default=True)
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("analyze", help="export latent-space analyses")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--restrict-most-published", type=int, default=0,
                   help="rank movers among the N most prolific authors")
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("generate", help="beam-search continuations")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--author", required=True, help="author name or id")
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--prefix", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=20)
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("seeds", help="multi-seed train+eval driver")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True, choices=("modeling", "imputation", "prediction"))
    p.add_argument("--variants", required=True, help="comma-separated variant list")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--min-count", type=int, default=None)
    _add_model_flags(p)
    _add_common(p, seed=False)
    p.set_defaults(fn=_cmd_seeds)

    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

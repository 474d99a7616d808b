"""``knnmt`` command-line interface.

Subcommands: gen-data, build, prune, pca, train-gate, translate, bench, sweep.  Every
command that needs the stub model reconstructs it from the ``spec.json``
written by ``gen-data`` (found next to the corpus or given with ``--spec``),
falling back to ``--seed`` and ``--vocab-size``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .cache import DEFAULT_TAU, GateTrainingConfig, load_gate, save_gate, train_gate
from .compression import apply_pca, fit_pca, greedy_merge_prune, load_pca, save_pca
from .decoder import DecodeConfig, decode_stats_summary, knn_beam_decode
from .decoder.model import EOS, SPECIALS
from .errors import KnnMtError
from .evalbench.bench import K_GRID, LAMBDA_GRID, Workload, bench_throughput, grid_search, report_emit
from .evalbench.bleu import corpus_bleu
from .evalbench.corpus import SyntheticDomainSpec, generate_domains, make_stub_model, make_vocab, read_tsv, write_tsv
from .evalbench.pipeline import DEFAULT_TAU_GRID, METHODS, Workbench, parse_method, tune_tau
from .retrieval import InterpolationParams
from .vectorstore import (
    DEFAULT_NPROBE,
    build_datastore,
    build_ivf_index,
    load_datastore,
    load_index,
    make_searcher,
    save_datastore,
    save_index,
)

log = logging.getLogger("knnmt")

SPEC_FILE = "spec.json"
EOS_WORD = SPECIALS[EOS]


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- shared helpers ------------------------------------------------------------------------


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def load_config(path):
    """``key = value`` lines; ``#`` starts a comment.  Keys use flag spelling without dashes."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _find_spec(explicit, *near):
    if explicit:
        return Path(explicit)
    for p in near:
        if p is None:
            continue
        p = Path(p)
        for d in (p, *p.parents[:2]) if p.is_dir() else p.parents[:3]:
            if (d / SPEC_FILE).is_file():
                return d / SPEC_FILE
    return None


def load_spec(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    names = {f.name for f in fields(SyntheticDomainSpec)}
    return SyntheticDomainSpec(**{k: v for k, v in data.items() if k in names})


def _model(args, *near):
    path = _find_spec(getattr(args, "spec", None), *near)
    if path is not None:
        spec = load_spec(path)
    else:
        spec = SyntheticDomainSpec(seed=args.seed, vocab_size=args.vocab_size)
    return make_stub_model(spec), spec


def _ids(pairs, vocab):
    return [(vocab.lookup(s, i), vocab.lookup(t, i)) for i, (s, t) in enumerate(pairs)]


def _params(args):
    return InterpolationParams(k=args.k, lam=args.lam, temperature=args.temperature)


def _write_table(header, rows, path, fmt):
    if fmt == "json":
        text = json.dumps([dict(zip(header, r)) for r in rows], indent=2) + "\n"
    else:
        lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
        text = "\n".join(lines) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(args):
    spec = SyntheticDomainSpec(
        seed=args.seed,
        vocab_size=args.vocab_size,
        n_train=args.n_train,
        n_valid=args.n_valid,
        n_test=args.n_test,
        min_len=args.min_len,
        max_len=args.max_len,
        domain_shift=args.domain_shift,
        n_domains=args.domains,
    )
    domains = generate_domains(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / SPEC_FILE).write_text(json.dumps(asdict(spec), indent=2) + "\n", encoding="utf-8")
    vocab = make_vocab(spec)
    for name, dom in domains.items():
        (out / name).mkdir(exist_ok=True)
        for split in ("train", "valid", "test"):
            write_tsv(getattr(dom, split), out / name / f"{split}.tsv", vocab)
    print(f"wrote {len(domains)} domains to {out}")


def cmd_build(args):
    model, _ = _model(args, Path(args.corpus))
    pairs = read_tsv(args.corpus)
    if not pairs:
        raise CliError(f"{args.corpus}: no sentence pairs")
    if args.append_eos:
        pairs = [(s, t + [EOS_WORD]) for s, t in pairs]
    ds = build_datastore(pairs, model)
    save_datastore(ds, args.out)
    if args.index:
        save_index(build_ivf_index(ds), args.index)
    print(f"datastore: N={len(ds)} dim={ds.dim} -> {args.out}")


def cmd_prune(args):
    ds = load_datastore(args.input)
    pruned, report = greedy_merge_prune(ds, args.k)
    save_datastore(pruned, args.out)
    print(report.summary())


def cmd_pca(args):
    ds = load_datastore(args.input)
    if args.dim > ds.dim:
        raise CliError(f"--dim {args.dim} exceeds the datastore dimension {ds.dim}")
    pca = fit_pca(ds, args.dim)
    save_pca(pca, args.pca_out)
    reduced = apply_pca(pca, ds)
    save_datastore(reduced, args.out)
    kept = pca.explained_variance.sum()
    print(f"pca: {ds.dim} -> {args.dim} dims, explained variance {kept:.4g}; N={len(reduced)} -> {args.out}")


def cmd_translate(args):
    model, _ = _model(args, Path(args.input))
    pairs = read_tsv(args.input) if args.references else None
    if pairs is None:
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
        sources = [ln.split("\t", 1)[0].split() for ln in lines if ln.strip()]
    else:
        sources = [s for s, _ in pairs]
    if not sources:
        raise CliError(f"{args.input}: no sentences")
    src_ids = [model.vocab.lookup(s, i) for i, s in enumerate(sources)]
    gate = load_gate(args.gate) if args.gate else None
    if gate is not None and args.alpha is not None:
        gate.alpha = args.alpha
    pca = load_pca(args.pca) if args.pca else None
    cfg = DecodeConfig(
        beam_size=args.beam,
        batch_size=args.batch,
        params=_params(args),
        pca=pca,
        tau=None if args.no_cache else args.tau,
        gate=gate,
        backend="exact" if args.exact else "auto",
        nprobe=args.nprobe,
    )
    ds = searcher = None
    if cfg.uses_retrieval:
        if not args.ds:
            raise CliError("retrieval is enabled (lambda > 0) but no --ds datastore was given")
        ds = load_datastore(args.ds)
        index = load_index(args.index) if args.index and not args.exact else None
        searcher = make_searcher(ds, cfg.backend, index, args.nprobe)
    hyps, stats = knn_beam_decode(model, src_ids, ds, cfg, searcher=searcher)
    text = "".join(" ".join(model.vocab.decode(h)) + "\n" for h in hyps)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    summary = decode_stats_summary(stats) if stats.elapsed > 0 else None
    msg = f"sentences={stats.sentences} tokens={stats.tokens} searches={stats.searches} cache_hits={stats.cache_hits}"
    if summary is not None:
        msg += f" tokens_per_second={summary.tokens_per_second:.1f} search_fraction={summary.search_fraction:.4f}"
    if pairs is not None:
        refs = [list(model.vocab.lookup(t, i)) for i, (_, t) in enumerate(pairs)]
        msg += f" bleu={corpus_bleu(hyps, refs):.2f}"
    print(msg, file=sys.stderr if not args.out else sys.stdout)


def cmd_train_gate(args):
    model, _ = _model(args, Path(args.corpus))
    pairs = _ids(read_tsv(args.corpus), model.vocab)
    if not pairs:
        raise CliError(f"{args.corpus}: no sentence pairs")
    ds = load_datastore(args.ds)
    pca = load_pca(args.pca) if args.pca else None
    hyper = GateTrainingConfig(
        k=args.k,
        temperature=args.temperature,
        alpha=0.5 if args.alpha is None else args.alpha,
        epochs=args.epochs,
        seed=args.seed,
    )
    searcher = make_searcher(ds, "exact" if args.exact else "auto", None, args.nprobe)
    gate = train_gate(model, ds, pairs, hyper, pca=pca, searcher=searcher)
    save_gate(gate, args.out)
    print(f"gate: objective {hyper.history[0]:.4f} -> {hyper.history[-1]:.4f}; alpha={gate.alpha:g} -> {args.out}")


def _workbench(args):
    data = Path(args.data)
    model, _ = _model(args, data)
    vocab = model.vocab
    dom = data / args.domain
    train = _ids(read_tsv(dom / "train.tsv"), vocab)
    valid = _ids(read_tsv(dom / "valid.tsv"), vocab)
    test = _ids(read_tsv(dom / "test.tsv"), vocab)
    if args.n_test:
        test = test[: args.n_test]
    if args.n_valid_used:
        valid = valid[: args.n_valid_used]
    wb = Workbench(
        model,
        train,
        valid,
        params=_params(args),
        beam_size=args.beam,
        tau=args.tau,
        alpha=0.5 if args.alpha is None else args.alpha,
        pca_dim=args.dim,
        prune_k=args.prune_k,
        backend="exact" if args.exact else "auto",
        nprobe=args.nprobe,
        seed=args.seed,
    )
    return wb, valid, test


def cmd_bench(args):
    methods = _str_list(args.methods)
    for m in methods:
        parse_method(m)
    wb, valid, test = _workbench(args)
    if args.tune_tau:
        cached = [m for m in methods if "cache" in parse_method(m)[1]]
        if cached:
            wb.tau = tune_tau(wb, cached[-1], valid, batch_size=8).tau
            print(f"tuned tau = {wb.tau:g}")
    report = bench_throughput(methods, _int_list(args.batch_sizes), Workload(wb, [s for s, _ in test]), reps=args.reps)
    report_emit(report, args.out, args.format)
    for r in report.rows:
        print(
            f"{r.method:>20s} batch={r.batch_size:<3d} tok/s={r.tokens_per_second:9.1f} "
            f"search={r.search_fraction:.3f} hits={r.cache_hit_fraction:.3f} N={r.datastore_size}"
        )


def cmd_sweep(args):
    wb, valid, test = _workbench(args)
    pairs = valid if args.on == "valid" else test
    if args.what == "grid":
        method = "knn"
        parse_method(method)
        prepared = wb.prepare(method, args.batch)
        res = grid_search(
            wb.model,
            prepared.ds,
            pairs,
            _int_list(args.k_grid),
            _float_list(args.lambda_grid),
            temperature=args.temperature,
            beam_size=args.beam,
            batch_size=args.batch,
            searcher=prepared.searcher,
        )
        rows = [(k, lam, round(b, 4)) for k, lam, b in res.table]
        _write_table(("k", "lambda", "bleu"), rows, args.out, args.format)
        print(f"best: k={res.k} lambda={res.lam} bleu={res.bleu:.2f}", file=sys.stderr)
    elif args.what == "tau":
        method = args.method if "cache" in parse_method(args.method)[1] else "cache"
        choice = tune_tau(wb, method, pairs, _float_list(args.tau_grid), batch_size=args.batch)
        rows = [(t, round(b, 4), round(f, 4)) for t, b, f in choice.table]
        _write_table(("tau", "bleu", "search_fraction"), rows, args.out, args.format)
        print(f"selected tau={choice.tau:g} (no-cache bleu {choice.reference_bleu:.2f})", file=sys.stderr)
    elif args.what == "alpha":
        rows = []
        for alpha in _float_list(args.alpha_grid):
            prepared = wb.prepare("gate", args.batch)
            prepared.config.gate.alpha = alpha
            hyps, stats = prepared.decode(wb.model, [s for s, _ in pairs])
            frac = stats.searches / stats.eligible_steps if stats.eligible_steps else 0.0
            rows.append((alpha, round(corpus_bleu(hyps, [list(t) for _, t in pairs]), 4), round(frac, 4)))
        _write_table(("alpha", "bleu", "search_fraction"), rows, args.out, args.format)
    elif args.what == "prune":
        ds = wb.datastore()
        rows = []
        for k in _int_list(args.prune_grid):
            _, rep = greedy_merge_prune(ds, k)
            rows.append((k, rep.original_size, rep.pruned_size))
        _write_table(("k", "original_size", "pruned_size"), rows, args.out, args.format)
    elif args.what == "pca":
        rows = []
        for d in _int_list(args.dim_grid):
            wb.pca_dim = d
            wb._memo = {k: v for k, v in wb._memo.items() if k in ("ds", "pruned")}
            bleu, _ = wb.evaluate("pca", pairs, args.batch)
            rows.append((d, round(bleu, 4)))
        _write_table(("dim", "bleu"), rows, args.out, args.format)


# -- argument parsing ----------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--spec", help="spec.json written by gen-data (default: searched next to the corpus)")
    p.add_argument("--vocab-size", type=int, default=512)


def _add_decode_flags(p):
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--lambda", dest="lam", type=float, default=0.7)
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--nprobe", type=int, default=DEFAULT_NPROBE)
    p.add_argument("--exact", action="store_true", help="exact search instead of the IVF index")


def _add_workload_flags(p):
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--domain", default="domain0")
    p.add_argument("--n-test", type=int, default=0, help="use only the first N test sentences (0: all)")
    p.add_argument("--n-valid-used", type=int, default=0, help="use only the first N validation sentences")
    p.add_argument("--dim", type=int, default=None, help="PCA output dimension (default: min(32, repr dim))")
    p.add_argument("--prune-k", type=int, default=2)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    _add_model_flags(p)
    _add_decode_flags(p)


def build_parser():
    parser = _Parser(prog="knnmt", description="Nearest-neighbour machine translation toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="key = value file; command-line flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    # also accepted after the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic multi-domain corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--n-train", type=int, default=50_000)
    p.add_argument("--n-valid", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--domain-shift", type=float, default=SyntheticDomainSpec.domain_shift)
    p.add_argument("--domains", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build", parents=[common], help="build a datastore from a TSV corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--append-eos", action="store_true", help="add an end-of-sentence entry per sentence")
    p.add_argument("--index", help="also build and save an IVF index here")
    _add_model_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("prune", parents=[common], help="greedy-merge pruning")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--k", type=int, default=2)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("pca", parents=[common], help="fit PCA and write a compressed datastore")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--pca-out", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("translate", parents=[common], help="beam-search translation with retrieval")
    p.add_argument("input", help="TSV (source[<TAB>reference]) file")
    p.add_argument("--ds")
    p.add_argument("--index")
    p.add_argument("--pca")
    p.add_argument("--gate")
    p.add_argument("--out")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--references", action="store_true", help="input has references; report BLEU")
    _add_model_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("train-gate", parents=[common], help="fit the adaptive-retrieval gate")
    p.add_argument("corpus", help="validation TSV")
    p.add_argument("--ds", required=True)
    p.add_argument("--pca")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    _add_model_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_train_gate)

    p = sub.add_parser("bench", parents=[common], help="throughput benchmark over methods and batch sizes")
    _add_workload_flags(p)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--batch-sizes", default="1,8,16")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--tune-tau", action="store_true", help="pick tau on the validation split first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter sweeps")
    _add_workload_flags(p)
    p.add_argument("--what", choices=("grid", "tau", "alpha", "prune", "pca"), default="grid")
    p.add_argument("--on", choices=("valid", "test"), default="valid")
    p.add_argument("--method", default="cache", help="method for the tau sweep")
    p.add_argument("--k-grid", default=",".join(map(str, K_GRID)))
    p.add_argument("--lambda-grid", default=",".join(map(str, LAMBDA_GRID)))
    p.add_argument("--tau-grid", default=",".join(f"{t:g}" for t in DEFAULT_TAU_GRID))
    p.add_argument("--alpha-grid", default="0.25,0.5,0.75")
    p.add_argument("--prune-grid", default="1,2,5")
    p.add_argument("--dim-grid", default="8,16,32")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


_CONFIG_ALIASES = {"lambda": "lam"}


def _apply_config(parser, argv, config):
    """Install config values as subcommand defaults so explicit flags still win."""
    pre, _ = parser.parse_known_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = sub.choices[pre.command]
    actions = {a.dest: a for p in (parser, target) for a in p._actions}
    defaults = {}
    for key, value in config.items():
        dest = _CONFIG_ALIASES.get(key, key)
        action = actions.get(dest)
        if action is None or dest in ("help", "config", "func"):
            raise CliError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[dest] = action.type(value) if action.type else value
    top = {k: v for k, v in defaults.items() if any(a.dest == k for a in parser._actions)}
    parser.set_defaults(**top)
    target.set_defaults(**{k: v for k, v in defaults.items() if k not in top})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre, _ = parser.parse_known_args(argv)
        if pre.config:
            _apply_config(parser, argv, load_config(pre.config))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args)
    except (CliError, KnnMtError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

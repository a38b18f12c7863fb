"""Command-line interface: ``modnet <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from collections import defaultdict

import numpy as np

from . import evaluation, io, synthetic
from .model import Dataset, ModuleNetwork
from .scoring import PriorSpec, total_score
from .search import SearchConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text):
    return [_positive_int(t) for t in text.split(",") if t.strip()]


def _add_prior(p):
    g = p.add_argument_group("prior")
    g.add_argument("--mu0", type=float, default=0.0)
    g.add_argument("--kappa0", type=float, default=0.1)
    g.add_argument("--alpha0", type=float, default=1.0)
    g.add_argument("--beta0", type=float, default=1.0)
    g.add_argument("--lambda-s", type=float, default=0.0, help="log-prior cost per tree split")


def _add_search(p, k_required=True):
    g = p.add_argument_group("search")
    if k_required:
        g.add_argument("--K", type=_positive_int, required=True, help="number of modules")
    g.add_argument("--lookahead", type=_positive_int, default=3)
    g.add_argument("--beam", type=_positive_int, default=1)
    g.add_argument("--min-leaf", type=_positive_int, default=5)
    g.add_argument("--max-iters", type=_positive_int, default=50)
    g.add_argument("--epsilon", type=float, default=1e-6)
    g.add_argument("--seed", type=int, default=0)


def _add_data(p):
    p.add_argument("data", help="CSV file: header row of names, one instance per row")
    p.add_argument("--no-standardize", action="store_true",
                   help="use raw column values instead of z-scores")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("learn", help="learn a module network from data")
    _add_data(p)
    _add_prior(p)
    _add_search(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="CSV file for the committed-operator trace")

    p = sub.add_parser("sample", help="draw instances from a model")
    p.add_argument("model")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="held-out log-likelihood of data under a model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--report")

    p = sub.add_parser("xval", help="cross-validated held-out likelihood for several K")
    _add_data(p)
    _add_prior(p)
    _add_search(p, k_required=False)
    p.add_argument("--K", type=_int_list, required=True, help="comma-separated module counts")
    p.add_argument("--folds", type=_positive_int, default=10)
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the one-module-per-variable baseline")
    p.add_argument("--report")

    p = sub.add_parser("gen", help="generate a ground-truth network and sample from it")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--K-true", type=_positive_int, default=10)
    p.add_argument("--min-parents", type=_positive_int, default=1)
    p.add_argument("--max-parents", type=_positive_int, default=3)
    p.add_argument("--min-depth", type=_positive_int, default=1)
    p.add_argument("--max-depth", type=_positive_int, default=2)
    p.add_argument("--noise", type=float, default=1.0, help="scale on leaf standard deviations")
    p.add_argument("--count", type=_positive_int, default=500, help="instances to sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out", required=True)
    p.add_argument("--data-out", required=True)

    p = sub.add_parser("recover", help="compare a learned model with the truth")
    p.add_argument("learned")
    p.add_argument("truth")
    p.add_argument("--top", type=_positive_int, default=10)
    p.add_argument("--report")

    p = sub.add_parser("enrich", help="hypergeometric enrichment of labels within modules")
    p.add_argument("modules", help="model file (.json) or CSV of item,module pairs")
    p.add_argument("annotations", help="CSV of item,label pairs")
    p.add_argument("--report")
    return parser


def _prior(a) -> PriorSpec:
    return PriorSpec(a.mu0, a.kappa0, a.alpha0, a.beta0, a.lambda_s)


def _config(a, K) -> SearchConfig:
    return SearchConfig(K=K, max_outer_iters=a.max_iters, epsilon=a.epsilon,
                        lookahead=a.lookahead, beam_width=a.beam, min_leaf=a.min_leaf,
                        rng_seed=a.seed)


def _emit(text: str, path: str | None) -> None:
    if path:
        io.atomic_write(path, text)
    else:
        sys.stdout.write(text)


def _load_data(a) -> Dataset:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", io.ConstantColumnWarning)
        data = io.load_csv(a.data, standardize=not a.no_standardize)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return data


def _data_for_model(net: ModuleNetwork, path: str) -> Dataset:
    """Load raw data and put it on the model's scale."""
    raw = io.load_csv(path, standardize=False)
    if net.var_names is not None and raw.var_names != net.var_names:
        raise ValueError(f"{path} columns do not match the model's variables")
    if net.standardization is None:
        return raw
    return Dataset(net.standardization.transform(raw.values), raw.var_names,
                   net.standardization)


def cmd_learn(a):
    data = _load_data(a)
    prior = _prior(a)
    cfg = _config(a, a.K)
    if a.K > data.n:
        raise UsageError(f"--K {a.K} exceeds the {data.n} variables in {a.data}")
    net, trace = evaluation.train(data, prior, cfg, a.seed)
    io.save_model(net, a.out)
    if a.trace:
        io.atomic_write(a.trace, io.trace_to_csv(trace))
    report = total_score(data, net, prior)
    _emit(io.format_report({"command": "learn", "K": net.K, "M": data.M, "n": data.n,
                            "score": report.total, "commits": len(trace) - 1,
                            "model": a.out}), None)


def cmd_sample(a):
    net = io.load_model(a.model)
    data = synthetic.sample(net, a.count, a.seed)
    io.write_csv(a.out, data, raw=True)
    _emit(io.format_report({"command": "sample", "count": a.count, "out": a.out}), None)


def cmd_eval(a):
    net = io.load_model(a.model)
    data = _data_for_model(net, a.data)
    ll = evaluation.heldout_ll(net, data)
    _emit(io.format_report({"command": "eval", "M": data.M, "heldout_ll_per_instance": ll}),
          a.report)


def cmd_xval(a):
    data = _load_data(a)
    prior = _prior(a)
    fields = {"command": "xval", "M": data.M, "n": data.n, "folds": a.folds}
    summary, per_fold = [], []
    for K in a.K:
        if K > data.n:
            raise UsageError(f"K={K} exceeds the {data.n} variables")
        rep = evaluation.cross_validate(data, prior, _config(a, K), a.folds, seed=a.seed,
                                        baseline=not a.no_baseline)
        summary.append((K, rep.heldout_ll_per_instance, rep.heldout_ll_std,
                        rep.baseline_ll_per_instance, rep.baseline_diff_std, rep.failures))
        for r in rep.folds:
            per_fold.append((K, r.fold, r.train_size, r.test_size, r.heldout_ll,
                             r.baseline_ll, r.diff))
    tables = {
        "summary": (("K", "mean_ll", "std_ll", "baseline_mean_ll", "diff_std", "failures"),
                    summary),
        "folds": (("K", "fold", "train_size", "test_size", "heldout_ll", "baseline_ll", "diff"),
                  per_fold),
    }
    _emit(io.format_report(fields, tables), a.report)


def cmd_gen(a):
    spec = synthetic.GeneratorSpec(n=a.n, K_true=a.K_true, min_parents=a.min_parents,
                                   max_parents=a.max_parents, min_depth=a.min_depth,
                                   max_depth=a.max_depth, noise_scale=a.noise, seed=a.seed)
    truth = synthetic.generate_truth(spec)
    data = synthetic.sample(truth, a.count, a.seed)
    io.save_model(truth, a.model_out)
    io.write_csv(a.data_out, data)
    _emit(io.format_report({"command": "gen", "n": a.n, "K_true": a.K_true,
                            "count": a.count, "model": a.model_out, "data": a.data_out}), None)


def cmd_recover(a):
    learned = io.load_model(a.learned)
    truth = io.load_model(a.truth)
    _emit(io.format_report({
        "command": "recover",
        "recovered_edge_fraction": evaluation.recovered_edge_fraction(learned, truth),
        "top_module_mass": evaluation.top_module_mass(learned, a.top),
        "top": a.top,
    }), a.report)


def _read_pairs(path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    out = []
    for line, r in enumerate(rows, start=1):
        if len(r) != 2:
            raise io.CsvFormatError(f"expected 2 columns, found {len(r)}", line)
        out.append((r[0].strip(), r[1].strip()))
    return out


def cmd_enrich(a):
    if a.modules.endswith(".json"):
        net = io.load_model(a.modules)
        names = net.var_names or tuple(f"X{i}" for i in range(net.n))
        membership = {name: str(m) for name, m in zip(names, net.assignment.assign)}
    else:
        membership = dict(_read_pairs(a.modules))
    labels = defaultdict(set)
    for item, label in _read_pairs(a.annotations):
        if item in membership:
            labels[label].add(item)
    modules = defaultdict(set)
    for item, m in membership.items():
        modules[m].add(item)
    population = len(membership)
    rows = []
    for m in sorted(modules, key=lambda s: (len(s), s)):
        for label in sorted(labels):
            hits = len(modules[m] & labels[label])
            if hits == 0:
                continue
            logp = evaluation.log_enrichment_pvalue(population, len(labels[label]),
                                                    len(modules[m]), hits)
            rows.append((m, label, len(modules[m]), hits, len(labels[label]),
                         float(np.exp(logp)), logp))
    fields = {"command": "enrich", "population": population, "modules": len(modules),
              "labels": len(labels)}
    header = ("module", "label", "module_size", "hits", "annotated", "pvalue", "log_pvalue")
    _emit(io.format_report(fields, {"enrichment": (header, rows)}), a.report)


COMMANDS = {"learn": cmd_learn, "sample": cmd_sample, "eval": cmd_eval, "xval": cmd_xval,
            "gen": cmd_gen, "recover": cmd_recover, "enrich": cmd_enrich}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"usage error: missing input: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

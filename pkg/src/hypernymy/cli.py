"""Command-line front end.

Data goes to stdout (or ``--output``), diagnostics to stderr.  Exit codes:
0 success, 1 usage error, 2 validation error, 3 I/O error.

Defaults can come from an INI file given with ``--config``: keys in the
``[defaults]`` section apply to every subcommand that has such an option,
keys in a section named after the subcommand apply to that subcommand only.
Keys are option names with dashes or underscores (``leaf-map``,
``n_samples``).  Command-line flags always win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from pathlib import Path

from . import __version__
from .analysis import (AnalysisError, best_synsets, format_listing, hyponym_similarity, model_diff,
                       similarity_metric_correlation, subtree_report, worst_synsets)
from .corpus import CountPolicy, count_concepts, frequency_correlation, load_counts
from .hierarchy import (HierarchyError, hierarchy_stats, load_hierarchy, near_leaf_synsets,
                        prompt_manifest, save_hierarchy, write_manifest)
from .ingest import PredictionFormatError, load_embeddings, load_predictions, write_binary, write_jsonl
from .metrics import NORMALIZER_MODES, MetricError, evaluate, load_report
from .simulator import KINDS as PROFILE_KINDS
from .simulator import CompetenceProfile, guidance_sweep, load_profile, simulate
from .stats import (StatsError, calibration_curve, ece, krippendorff_alpha, load_labeled, load_ratings,
                    pairwise_correlations, stability_summary, top1_accuracy)
from .wordnet import hierarchy_from_wordnet, read_wnid_list

log = logging.getLogger("hypernymy")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------- helpers

def _graph(args):
    if not args.edges or not args.leaf_map:
        raise UsageError("--edges and --leaf-map are required")
    return load_hierarchy(args.edges, args.leaf_map, args.lemmas, n_leaves=args.expect_leaves)


def _optional_graph(args):
    return _graph(args) if args.edges and args.leaf_map else None


def _write_text(args, text: str) -> None:
    if getattr(args, "output", None) and args.output != "-":
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue()


def _predictions(path: str, n_classes: int, fmt: str | None, allow_ragged: bool):
    if path != "-":
        return load_predictions(path, n_classes, allow_ragged, fmt)
    with tempfile.NamedTemporaryFile(suffix=".pred") as tmp:
        tmp.write(sys.stdin.buffer.read())
        tmp.flush()
        preds = load_predictions(tmp.name, n_classes, allow_ragged, fmt)
    if preds.model_id == Path(tmp.name).stem:
        preds.model_id = "stdin"
    return preds


def _normalizer(value: str):
    if value in NORMALIZER_MODES:
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected one of {', '.join(NORMALIZER_MODES)} or a number, got {value!r}") from None


def _profile(args) -> CompetenceProfile:
    values = {}
    if args.profile_file:
        values = vars(load_profile(args.profile_file)).copy()
    for key, attr in (("kind", "profile"), ("in_subtree_mass", "mass"),
                      ("concentration", "concentration"), ("noise_scale", "noise"),
                      ("seed", "seed")):
        if getattr(args, attr, None) is not None:
            values[key] = getattr(args, attr)
    if args.coverage is not None:
        values["coverage"] = None if args.coverage == "all" else int(args.coverage)
    values.setdefault("seed", 0)
    return CompetenceProfile(**values)


def _reports(paths):
    return [load_report(p) for p in paths]


# ------------------------------------------------------------ subcommands

def cmd_hierarchy(args) -> int:
    if args.action == "convert":
        if not (args.wordnet and args.wnids and args.out_dir):
            raise UsageError("convert needs --wordnet, --wnids and --out-dir")
        pointers = ("@", "@i") if args.instance_hypernyms else ("@",)
        graph = hierarchy_from_wordnet(args.wordnet, read_wnid_list(args.wnids), pointers)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_hierarchy(graph, out / "edges.txt", out / "leaves.txt", out / "lemmas.txt")
        log.info("wrote %s", out)
        _write_text(args, _json(hierarchy_stats(graph)))
        return EXIT_OK

    graph = _graph(args)
    action = args.action
    if action == "stats" and args.max_leaf_distance is not None:
        action = "list"
    if action == "validate":
        stats = hierarchy_stats(graph)
        keys = ("n_nodes", "n_leaves", "n_evaluation")
        _write_text(args, "".join(f"{k}\t{stats[k]}\n" for k in keys))
    elif action == "stats":
        _write_text(args, _json(hierarchy_stats(graph)))
    else:
        synsets = (near_leaf_synsets(graph, args.max_leaf_distance)
                   if args.max_leaf_distance is not None else graph.evaluation_set())
        dist = graph.leaf_distance
        lines = ["synset\tsubtree_size\tleaf_distance\tlemma"]
        for s in synsets:
            lemma = graph.lemmas.get(s, ("",))[0]
            lines.append(f"{s}\t{len(graph.classifiable_subtree(s))}\t{dist[s]}\t{lemma}")
        _write_text(args, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_prompts(args) -> int:
    graph = _graph(args)
    entries = prompt_manifest(graph)
    if args.max_leaf_distance is not None:
        keep = set(near_leaf_synsets(graph, args.max_leaf_distance))
        entries = [e for e in entries if e.synset in keep]
    buf = io.StringIO()
    write_manifest(entries, buf)
    _write_text(args, buf.getvalue())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    graph = _graph(args)
    preds = _predictions(args.predictions, len(graph.leaves), args.format, args.allow_ragged)
    if args.model_id:
        preds.model_id = args.model_id
    report = evaluate(graph, preds, args.normalizer, jobs=args.jobs)
    if report.degenerate_rows:
        log.warning("%d sample(s) put no probability mass on their subtree", report.degenerate_rows)
    _write_text(args, report.to_csv() if args.output_format == "csv" else report.to_json())
    return EXIT_OK


def cmd_simulate(args) -> int:
    graph = _graph(args)
    profile = _profile(args)
    preds = simulate(graph, profile, args.n_samples, jobs=args.jobs, model_id=args.model_id)
    if args.format == "bin":
        if args.output and args.output != "-":
            with open(args.output, "wb") as fh:
                write_binary(preds, fh)
        else:
            write_binary(preds, sys.stdout.buffer)
            sys.stdout.buffer.flush()
    else:
        if args.output and args.output != "-":
            with open(args.output, "w", encoding="utf-8") as fh:
                write_jsonl(preds, fh)
        else:
            write_jsonl(preds, sys.stdout)
    return EXIT_OK


def cmd_sweep(args) -> int:
    graph = _graph(args)
    profile = _profile(args)
    try:
        values = [float(x) for x in args.concentrations.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --concentrations {args.concentrations!r}") from None
    if not values:
        raise UsageError("--concentrations is empty")
    reports = guidance_sweep(graph, profile, values, args.n_samples, args.normalizer, jobs=args.jobs)
    rows = []
    for c, report in zip(values, reports):
        report.model_id = f"sweep-{profile.kind}-c{c:g}"
        rows.append({"concentration": c, "aggregate_isp": report.aggregate_isp,
                     "aggregate_scs": report.aggregate_scs, "mean_isp": report.mean_isp,
                     "mean_scs": report.mean_scs, "scs_normalizer": report.scs_normalizer})
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{report.model_id}.json").write_text(report.to_json(), encoding="utf-8")
    if args.output_format == "csv":
        _write_text(args, _csv(rows, list(rows[0])))
    else:
        _write_text(args, _json({"profile": vars(profile), "n_samples": args.n_samples,
                                 "sweep": rows}))
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = _reports(args.reports)
    if len(reports) < 2:
        raise UsageError("compare needs at least two reports")
    if args.mode == "diff":
        if len(reports) != 2:
            raise UsageError("diff mode compares exactly two reports")
        diff = model_diff(reports[0], reports[1], args.metric)
        if args.output_format == "csv":
            rows = [{"synset": s, "diff": d} for s, d in diff.diffs]
            _write_text(args, _csv(rows, ["synset", "diff"]))
        else:
            _write_text(args, _json(diff.to_dict()))
        return EXIT_OK
    pairs = pairwise_correlations(reports, args.metric)
    if args.output_format == "csv":
        _write_text(args, _csv(pairs, ["a", "b", "model_a", "model_b", "n", "rho", "p"]))
    else:
        mean_rho = sum(p["rho"] for p in pairs) / len(pairs)
        _write_text(args, _json({"metric": args.metric, "mean_rho": mean_rho, "pairs": pairs,
                                 "stability": stability_summary(reports)}))
    return EXIT_OK


def cmd_worst(args) -> int:
    reports = _reports(args.reports)
    graph = _optional_graph(args)
    rank = best_synsets if args.best else worst_synsets
    entries = rank(reports if len(reports) > 1 else reports[0], args.metric, args.k, graph)
    if args.output_format == "text":
        _write_text(args, format_listing(entries, args.metric))
    elif args.output_format == "csv":
        _write_text(args, _csv(entries, ["rank", "synset", args.metric, "lemma", "prompt"]))
    else:
        _write_text(args, _json({"metric": args.metric, "order": "best" if args.best else "worst",
                                 "models": [r.model_id for r in reports], "synsets": entries}))
    return EXIT_OK


def cmd_subtree(args) -> int:
    graph = _graph(args)
    report = load_report(args.report)
    roots = [r for arg in (args.root or [graph.root]) for r in arg.split(",") if r]
    rows = subtree_report(report, graph, roots)
    if args.output_format == "csv":
        _write_text(args, _csv(rows, list(rows[0])))
    else:
        _write_text(args, _json({"model_id": report.model_id, "subtrees": rows}))
    return EXIT_OK


def cmd_corpus_count(args) -> int:
    graph = _graph(args)
    policy = CountPolicy(per_caption=not args.per_occurrence, all_lemmas=args.all_lemmas)
    table = count_concepts(args.shards, graph, policy, jobs=args.jobs, column=args.column,
                           corpus_id=args.corpus_id)
    if args.summary:
        Path(args.summary).write_text(_json(table.summary()), encoding="utf-8")
    if len(table.errors) == len(args.shards):
        log.error("no shard could be read")
        return EXIT_IO
    if table.partial:
        log.warning("counts are partial: %d shard(s) skipped", len(table.errors))
    _write_text(args, table.to_csv())
    return EXIT_OK


def cmd_correlate(args) -> int:
    report = load_report(args.report)
    if bool(args.counts) == bool(args.embeddings):
        raise UsageError("give exactly one of --counts or --embeddings")
    if args.counts:
        rho, p, n = frequency_correlation(load_counts(args.counts), report, args.metric)
        out = {"source": "counts", "metric": args.metric, "n": n, "rho": rho, "p": p}
    else:
        graph = _graph(args)
        sims, missing = hyponym_similarity(load_embeddings(args.embeddings), graph)
        if missing:
            log.warning("%d synset(s) skipped for missing embeddings", len(missing))
        rho, p = similarity_metric_correlation(sims, report, args.metric)
        n = len(set(sims) & set(report.values(args.metric)))
        out = {"source": "embeddings", "metric": args.metric, "n": n, "rho": rho, "p": p,
               "n_missing": len(missing), "missing": missing}
        if args.similarities:
            rows = [{"synset": s, "similarity": v} for s, v in sorted(sims.items())]
            Path(args.similarities).write_text(_csv(rows, ["synset", "similarity"]), encoding="utf-8")
    _write_text(args, _json(out))
    return EXIT_OK


def cmd_calibration(args) -> int:
    data = load_labeled(args.predictions)
    if args.output_format == "csv":
        rows = calibration_curve(data, args.bins)
        _write_text(args, _csv(rows, ["bin", "lower", "upper", "count", "confidence", "accuracy"]))
    else:
        _write_text(args, _json({"n": int(len(data.labels)), "n_bins": args.bins,
                                 "ece": ece(data, args.bins), "accuracy": top1_accuracy(data)}))
    return EXIT_OK


def cmd_agreement(args) -> int:
    ratings = load_ratings(args.ratings)
    alpha = krippendorff_alpha(ratings, args.level)
    _write_text(args, _json({"level": args.level, "alpha": alpha, "n_items": len(ratings.ratings),
                             "n_raters": len(ratings.raters)}))
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with option defaults")
    common.add_argument("-o", "--output", help="write data here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    graph = _Parser(add_help=False)
    g = graph.add_argument_group("hierarchy input")
    g.add_argument("--edges", help="edge file: '<child> <parent>' per line")
    g.add_argument("--leaf-map", help="leaf map: '<index> <wnid> <lemma|...>' per line")
    g.add_argument("--lemmas", help="lemmas of internal synsets: '<wnid> <lemma|...>' per line")
    g.add_argument("--expect-leaves", type=int, help="fail unless the leaf map has this many classes")

    profile = _Parser(add_help=False)
    p = profile.add_argument_group("simulated profile")
    p.add_argument("--profile", choices=PROFILE_KINDS, help="profile kind (default mixture)")
    p.add_argument("--profile-file", help="INI file with a [profile] section")
    p.add_argument("--mass", type=float, help="target in-subtree mass")
    p.add_argument("--concentration", type=float, help="guidance-like sharpness")
    p.add_argument("--coverage", help="number of known leaves per subtree, or 'all'")
    p.add_argument("--noise", type=float, help="logit noise scale")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--n-samples", type=int, default=32, help="samples per synset (default 32)")
    p.add_argument("--jobs", type=int, default=1)

    parser = _Parser(prog="hypernymy", description="Hypernymy metrics for image generators.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("hierarchy", parents=[common, graph], help="validate, inspect or build a hierarchy")
    s.add_argument("action", nargs="?", default="stats", choices=("validate", "stats", "list", "convert"))
    s.add_argument("--max-leaf-distance", type=int,
                   help="list evaluation synsets with a leaf at most this many edges below")
    s.add_argument("--wordnet", help="convert: WordNet data.noun file")
    s.add_argument("--wnids", help="convert: leaf WNIDs, one per line in class-index order")
    s.add_argument("--out-dir", help="convert: directory for edges.txt, leaves.txt, lemmas.txt")
    s.add_argument("--no-instance-hypernyms", dest="instance_hypernyms", action="store_false",
                   help="convert: follow only '@' pointers")
    s.set_defaults(func=cmd_hierarchy)

    s = sub.add_parser("prompts", parents=[common, graph], help="emit the prompt manifest (JSONL)")
    s.add_argument("--max-leaf-distance", type=int)
    s.set_defaults(func=cmd_prompts)

    s = sub.add_parser("evaluate", parents=[common, graph], help="compute ISP and SCS for predictions")
    s.add_argument("predictions", help="prediction file, or - for stdin")
    s.add_argument("--format", choices=("jsonl", "bin"), help="input format (default: sniffed)")
    s.add_argument("--normalizer", type=_normalizer, default="derived",
                   help="SCS normalizer: derived, derived-capped, paper, none or a number")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--allow-ragged", action="store_true", help="accept differing sample counts")
    s.add_argument("--model-id")
    s.add_argument("--output-format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", parents=[common, graph, profile], help="write simulated predictions")
    s.add_argument("--format", choices=("jsonl", "bin"), default="jsonl")
    s.add_argument("--model-id")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", parents=[common, graph, profile], help="evaluate a concentration sweep")
    s.add_argument("--concentrations", default="0.5,1,2,4,8", help="comma-separated values")
    s.add_argument("--normalizer", type=_normalizer, default="derived")
    s.add_argument("--out-dir", help="also write one full report per concentration")
    s.add_argument("--output-format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", parents=[common], help="diff two reports or correlate several runs")
    s.add_argument("reports", nargs="+")
    s.add_argument("--metric", choices=("isp", "scs"), default="isp")
    s.add_argument("--mode", choices=("diff", "seeds"), default="diff")
    s.add_argument("--output-format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("worst", parents=[common, graph], help="rank synsets by a metric")
    s.add_argument("reports", nargs="+", help="one report, or several to rank their mean")
    s.add_argument("--metric", choices=("isp", "scs"), default="isp")
    s.add_argument("-k", type=int, default=10)
    s.add_argument("--best", action="store_true", help="rank from the top instead")
    s.add_argument("--output-format", choices=("json", "csv", "text"), default="json")
    s.set_defaults(func=cmd_worst)

    s = sub.add_parser("subtree", parents=[common, graph], help="aggregate metrics below given roots")
    s.add_argument("report")
    s.add_argument("--root", action="append", help="root synset (repeatable or comma-separated)")
    s.add_argument("--output-format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_subtree)

    s = sub.add_parser("corpus-count", parents=[common, graph], help="count concepts in caption shards")
    s.add_argument("shards", nargs="+", help="text files, one caption per line (.gz allowed)")
    s.add_argument("--column", type=int, help="0-based caption column of TSV input")
    s.add_argument("--per-occurrence", action="store_true", help="count every occurrence")
    s.add_argument("--all-lemmas", action="store_true", help="match every lemma, not just the first")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--corpus-id", default="")
    s.add_argument("--summary", help="write the JSON summary here")
    s.set_defaults(func=cmd_corpus_count)

    s = sub.add_parser("correlate", parents=[common, graph],
                       help="Spearman correlation of a metric with counts or embedding similarity")
    s.add_argument("report")
    s.add_argument("--metric", choices=("isp", "scs"), default="isp")
    s.add_argument("--counts", help="CSV from corpus-count")
    s.add_argument("--embeddings", help="JSONL embedding table")
    s.add_argument("--similarities", help="write per-synset similarities (CSV) here")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("calibration", parents=[common], help="ECE and accuracy of labelled predictions")
    s.add_argument("predictions", help='JSONL rows {"label": int, "probs": [...]}')
    s.add_argument("--bins", type=int, default=100)
    s.add_argument("--output-format", choices=("json", "csv"), default="json",
                   help="csv prints the per-bin calibration curve")
    s.set_defaults(func=cmd_calibration)

    s = sub.add_parser("agreement", parents=[common], help="Krippendorff's alpha of categorical ratings")
    s.add_argument("ratings", help="CSV with columns item,rater,category")
    s.add_argument("--level", default="nominal", choices=("nominal",))
    s.set_defaults(func=cmd_agreement)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, args, argv) -> argparse.Namespace:
    cfg = configparser.ConfigParser()
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    sub = _subparser(parser, args.command)
    by_dest = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for section, strict in (("defaults", False), (args.command, True)):
        if not cfg.has_section(section):
            continue
        for key, raw in cfg.items(section):
            dest = key.replace("-", "_")
            action = by_dest.get(dest)
            if action is None or dest in ("config", "help"):
                if strict:
                    raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
                continue
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = cfg.getboolean(section, key)
            elif action.type is not None:
                try:
                    value = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"{args.config}: {key}: {exc}") from None
            else:
                value = raw
            if isinstance(action, argparse._AppendAction):
                value = [value]
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key}: {value!r} not in {list(action.choices)}")
            defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        if args.config:
            try:
                args = _apply_config(parser, args, argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        return args.func(args)
    except UsageError as exc:
        print(f"hypernymy {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HierarchyError, PredictionFormatError, MetricError, StatsError, AnalysisError,
            ValueError, KeyError) as exc:
        print(f"hypernymy {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except OSError as exc:
        print(f"hypernymy {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

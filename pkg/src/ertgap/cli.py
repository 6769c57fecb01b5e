"""Command-line entry point: one subcommand per pipeline stage plus ``run`` for all of them.

Exit codes: 0 success, 1 validation error (bad input, bad config, missing
upstream artifact), 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Sequence

from . import pipeline
from .config import RunConfig, load_config
from .errors import NumericalError, ValidationError
from .report import report_stage

logger = logging.getLogger("ertgap")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--out", dest="out_dir", help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ertgap", description="Expected-reading-time gap analysis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-lexicon", help="merge frequency lists into a lexicon")
    _common(p)
    p.add_argument("--frequency", dest="frequency_paths", action="append",
                   help="frequency list file (repeatable)")

    p = sub.add_parser("align-surprisal", help="align subtoken scores to words")
    _common(p)
    p.add_argument("--spans", dest="word_spans_path", help="word span file")
    p.add_argument("--scores", dest="subtoken_scores_path", help="subtoken score file")

    p = sub.add_parser("ingest", help="validate tokens, fill features, trim, compute pooled statistics")
    _common(p)
    p.add_argument("--tokens", dest="tokens_path", help="token file")
    p.add_argument("--trim-rule", dest="trim_rule", choices=("pooled", "per_group"))

    p = sub.add_parser("fit", help="select smoothing and fit skip and duration models")
    _common(p)
    p.add_argument("--cv-seed", dest="cv_seed", type=int)

    for name, text in (("contrast", "Q1 to Q3 contrasts"), ("slope-ratios", "dyslexic/control slope ratios")):
        p = sub.add_parser(name, help=text)
        _common(p)

    p = sub.add_parser("decompose", help="gap decomposition and feature attribution")
    _common(p)
    p.add_argument("--corpus", dest="shapley_corpus", choices=("common", "control"))
    p.add_argument("--attribution", dest="attribution_mode", choices=("single", "shapley"))
    p.add_argument("--configs", dest="attribution_configs", choices=("all", "additive"))

    p = sub.add_parser("bootstrap", help="subject bootstrap of every headline statistic")
    _common(p)
    p.add_argument("--b", dest="bootstrap_b", type=int)
    p.add_argument("--seed", dest="bootstrap_seed", type=int)
    p.add_argument("--jobs", dest="bootstrap_jobs", type=int)

    p = sub.add_parser("synth", help="write a synthetic token file and its truth record")
    _common(p)
    p.add_argument("--preset", dest="synth_preset", choices=("paper_shaped", "null_model", "inert_zipf"))
    p.add_argument("--seed", dest="synth_seed", type=int)

    p = sub.add_parser("report", help="figure data, plots, summaries and synthetic recovery")
    _common(p)

    p = sub.add_parser("run", help="ingest through report in one go")
    _common(p)
    p.add_argument("--tokens", dest="tokens_path", help="token file")
    p.add_argument("--b", dest="bootstrap_b", type=int)
    p.add_argument("--seed", dest="bootstrap_seed", type=int)
    p.add_argument("--jobs", dest="bootstrap_jobs", type=int)
    p.add_argument("--skip-bootstrap", action="store_true", help="leave intervals empty")
    p.add_argument("--configs", dest="attribution_configs", choices=("all", "additive"))
    return parser


_OVERRIDES = (
    "out_dir", "frequency_paths", "word_spans_path", "subtoken_scores_path", "tokens_path", "trim_rule",
    "cv_seed", "shapley_corpus", "attribution_mode", "attribution_configs", "bootstrap_b", "bootstrap_seed",
    "bootstrap_jobs", "synth_preset", "synth_seed",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then command-line flags on top."""
    cfg = load_config(args.config)
    overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    return cfg.with_overrides(**overrides) if overrides else cfg


def _run_all(cfg: RunConfig, layout: pipeline.Layout, args: argparse.Namespace) -> None:
    pipeline.ingest_stage(cfg, layout)
    pipeline.fit_stage(cfg, layout)
    pipeline.contrast_stage(cfg, layout)
    pipeline.slope_ratio_stage(cfg, layout)
    pipeline.decompose_stage(cfg, layout)
    if not args.skip_bootstrap:
        pipeline.bootstrap_stage(cfg, layout)
    report_stage(cfg, layout)


COMMANDS: dict[str, Callable] = {
    "build-lexicon": lambda c, l, a: pipeline.build_lexicon_stage(c, l),
    "align-surprisal": lambda c, l, a: pipeline.align_surprisal_stage(c, l),
    "ingest": lambda c, l, a: pipeline.ingest_stage(c, l),
    "fit": lambda c, l, a: pipeline.fit_stage(c, l),
    "contrast": lambda c, l, a: pipeline.contrast_stage(c, l),
    "slope-ratios": lambda c, l, a: pipeline.slope_ratio_stage(c, l),
    "decompose": lambda c, l, a: pipeline.decompose_stage(c, l),
    "bootstrap": lambda c, l, a: pipeline.bootstrap_stage(c, l),
    "synth": lambda c, l, a: pipeline.synth_stage(c, l),
    "report": lambda c, l, a: report_stage(c, l),
    "run": _run_all,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        layout = pipeline.Layout(cfg.out_dir)
        COMMANDS[args.command](cfg, layout, args)
    except ValidationError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

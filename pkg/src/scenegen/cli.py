"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 configuration/grammar error,
3 runtime failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import diagnostics, pipeline
from .grammar import DerivationError, GrammarError, parse_grammar, sequence_to_scene_graph
from .pipeline import ConfigError, Run, load_config
from .render import render, write_labels, write_pnm
from .scene import sample_parameters

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_run_flags(p):
    p.add_argument("--config", required=True, help="run config file (key = value)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")
    p.add_argument("--workers", type=int, help="parallel fan-out for rendering")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--objective", choices=["kde-kl", "mmd"], help="override objective")
    p.add_argument(
        "--extractor", choices=["handcrafted", "trained"], help="override extractor"
    )


def build_parser():
    parser = _Parser(prog="scenegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grammar-check", help="parse and validate a grammar file")
    p.add_argument("grammar", help="path to a .g grammar file")

    p = sub.add_parser("sample", help="emit structures sampled from the model prior")
    _add_run_flags(p)
    p.add_argument("-n", type=int, default=10, help="number of structures")
    p.add_argument("--from-prior", action="store_true",
                   help="sample from the handcrafted prior instead of the model")

    p = sub.add_parser("render", help="render sampled scenes to images + labels")
    _add_run_flags(p)
    p.add_argument("-n", type=int, default=10, help="number of scenes")
    p.add_argument("--target", action="store_true", help="render the target sampler")

    for name in ("pretrain", "train", "eval"):
        p = sub.add_parser(name, help=f"run the {name} pipeline stage")
        _add_run_flags(p)
        if name == "eval":
            p.add_argument("-n", type=int, default=1000, help="evaluation samples")
            p.add_argument("--checkpoint", help="model checkpoint to evaluate")
        else:
            p.add_argument("--checkpoint", help="starting model checkpoint")

    sub.add_parser("grad-check", help="finite-difference check of every op")
    return parser


def _load_run(args):
    overrides = {}
    for key in ("seed", "epochs", "objective", "extractor", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    config = load_config(args.config, overrides)
    return Run(config)


def cmd_grammar_check(args):
    try:
        with open(args.grammar) as f:
            text = f.read()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    grammar = parse_grammar(text)
    print(f"grammar OK: start={grammar.start} K={grammar.K}")
    for rule in grammar.rules:
        print(f"  {rule}")
    renderable = sorted(s.name for s in grammar.symbols.values() if s.renderable)
    print(f"renderable: {' '.join(renderable) or '(none)'}")
    return 0


def cmd_sample(args):
    run = _load_run(args)
    _maybe_load_checkpoint(run, args)
    out = []
    if args.from_prior:
        seqs = [run.prior.sample(run.rng_eval) for _ in range(args.n)]
    else:
        seqs = [s.rules for s in run.model.sample_batch(args.n, run.rng_eval).sequences]
    for rules in seqs:
        sequence_to_scene_graph(run.grammar, rules)  # validity assertion
        out.append({"rules": list(map(int, rules)),
                    "text": [str(run.grammar.rules[r]) for r in rules]})
    print(json.dumps(out, indent=1))
    return 0


def cmd_render(args):
    run = _load_run(args)
    _maybe_load_checkpoint(run, args)
    out_dir = run.config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if args.target:
        graphs = run.target.sample(args.n, run.rng_eval)
    else:
        batch = run.model.sample_batch(args.n, run.rng_eval)
        graphs = [
            sample_parameters(
                sequence_to_scene_graph(run.grammar, s.rules),
                run.config.scenario,
                run.rng_eval,
            )
            for s in batch.sequences
        ]
    ext = "pgm" if run.config.scenario == "mnist" else "ppm"
    for i, g in enumerate(graphs):
        result = render(g, run.render_config)
        write_pnm(os.path.join(out_dir, f"scene_{i:04d}.{ext}"), result.image)
        write_labels(os.path.join(out_dir, f"scene_{i:04d}.json"), result.labels)
    print(f"wrote {len(graphs)} scenes to {out_dir}")
    return 0


def _checkpoint_path(run):
    return os.path.join(run.config.out_dir, "checkpoints", "model.npz")


def _maybe_load_checkpoint(run, args):
    path = getattr(args, "checkpoint", None)
    if path:
        run.model.load(path)
    else:
        default = _checkpoint_path(run)
        if os.path.exists(default):
            run.model.load(default)


def _save_checkpoint(run):
    path = _checkpoint_path(run)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    run.model.save(path)
    return path


def cmd_pretrain(args):
    run = _load_run(args)
    if getattr(args, "checkpoint", None):
        run.model.load(args.checkpoint)
    history = pipeline.pretrain(run, log=print)
    os.makedirs(run.config.out_dir, exist_ok=True)
    path = _save_checkpoint(run)
    pipeline.write_metadata(run, os.path.join(run.config.out_dir, "metadata.json"))
    print(f"final NLL {history[-1]:.4f}; checkpoint at {path}")
    return 0


def cmd_train(args):
    run = _load_run(args)
    _maybe_load_checkpoint(run, args)
    os.makedirs(run.config.out_dir, exist_ok=True)
    rows = pipeline.train(run, log=print)
    pipeline.write_epochs_csv(os.path.join(run.config.out_dir, "epochs.csv"), rows)
    path = _save_checkpoint(run)
    pipeline.write_metadata(run, os.path.join(run.config.out_dir, "metadata.json"))
    print(f"trained {len(rows)} epochs; checkpoint at {path}")
    return 0


def cmd_eval(args):
    run = _load_run(args)
    _maybe_load_checkpoint(run, args)
    summary, _, _ = pipeline.evaluate(run, n_samples=args.n, out_dir=run.config.out_dir)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_grad_check(args):
    results = diagnostics.run_all(np.random.default_rng(7))
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name:24s} max rel err {err:.3e}")
    if worst > diagnostics.TOLERANCE:
        print(f"FAIL: worst {worst:.3e} exceeds {diagnostics.TOLERANCE}")
        return EXIT_RUNTIME
    print(f"all ops within {diagnostics.TOLERANCE}")
    return 0


_COMMANDS = {
    "grammar-check": cmd_grammar_check,
    "sample": cmd_sample,
    "render": cmd_render,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (GrammarError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DerivationError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

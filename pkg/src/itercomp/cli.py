"""Command-line entry points.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 verification
failure.  The ITERCOMP_LOG environment variable (error|info|debug) controls
verbosity.
"""

import argparse
import json
import logging
import os
import sys

from . import config as cfg
from . import theory
from .diffusion import load_diffusion, pretrain, refl_finetune, sample, save_diffusion
from .errors import ConfigError, DataError, VerificationError
from .evaluate import evaluate_model
from .iterate import run_itercomp
from .prefs import build_dataset, load_dataset, save_dataset, save_stats
from .reward import load_reward, save_reward, train_reward
from .rng import substream
from .scene import CATEGORIES, sample_prompt

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _setup_logging():
    level = os.environ.get("ITERCOMP_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        raise ConfigError(f"ITERCOMP_LOG must be one of {sorted(_LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> cfg.RunConfig:
    run_config = cfg.load_config(args.config) if args.config else cfg.default_config()
    if getattr(args, "seed", None) is not None:
        run_config.seed = args.seed
    if getattr(args, "workdir", None):
        run_config.workdir = args.workdir
    return run_config


def _write_json(obj: dict, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _cmd_init_config(args) -> int:
    config = cfg.default_config(seed=args.seed if args.seed is not None else 0)
    if args.paper_scale:
        config.prompt_counts = cfg.paper_scale_counts()
    cfg.save_config(config, args.out)
    print(f"wrote default config to {args.out}")
    return 0


def _cmd_gen_prefs(args) -> int:
    config = _load_config(args)
    dataset, stats = build_dataset(
        config.prompt_counts,
        config.make_gallery(),
        config.raters,
        substream(config.seed, "dataset"),
        config.oracles,
    )
    save_dataset(dataset, args.out)
    stats_path = args.stats or os.path.join(os.path.dirname(os.path.abspath(args.out)), "stats.json")
    save_stats(stats, stats_path)
    for category in sorted(stats.per_category):
        entry = stats.per_category[category]
        print(f"{category}: texts={entry['texts']} images={entry['images']} pairs={entry['pairs']}")
    totals = stats.totals
    print(f"total: texts={totals['texts']} images={totals['images']} pairs={totals['pairs']}")
    print(f"wrote {args.out} and {stats_path}")
    return 0


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    data = [(r.prompt, img.scene) for r in dataset.rankings for img in r.images]
    hyper = config.diffusion.pretrain_hyper()
    if args.steps is not None:
        hyper = type(hyper)(args.steps, hyper.lr, hyper.batch)
    model, report = pretrain(data, hyper, substream(config.seed, "pretrain"),
                             config.diffusion.schedule())
    model.seed = config.seed
    save_diffusion(model, args.out)
    print(f"pretrained {report.steps} steps: loss {report.init_loss:.3f} -> {report.final_loss:.3f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_train_reward(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    hyper = config.reward.hyper(args.epochs)
    model, report = train_reward(
        dataset, args.category, hyper,
        substream(config.seed, "reward", 1, args.category),
    )
    model.seed = config.seed
    save_reward(model, args.out)
    print(
        f"{args.category}: holdout accuracy {report.holdout_accuracy:.4f}, "
        f"loss {report.init_loss:.4f} -> {report.final_loss:.4f}"
    )
    print(f"wrote {args.out}")
    return 0


def _cmd_refl(args) -> int:
    config = _load_config(args)
    model = load_diffusion(args.base)
    reward_models = [load_reward(path) for path in args.rewards.split(",")]
    if args.data:
        dataset = load_dataset(args.data)
        prompts = [r.prompt for r in dataset.rankings]
    else:
        stream = substream(config.seed, "refl-prompts", 1)
        prompts = [
            sample_prompt(stream, category)
            for category in CATEGORIES
            for _ in range(config.refl.prompts_per_category)
        ]
    tuned, report = refl_finetune(
        model, reward_models, prompts, config.refl.config(), substream(config.seed, "refl", 1)
    )
    tuned.iteration = model.iteration + 1
    save_diffusion(tuned, args.out)
    first = report.reward_curve[0] if report.reward_curve else float("nan")
    last = report.reward_curve[-1] if report.reward_curve else float("nan")
    print(f"feedback finetuning: {report.steps} updates, summed reward {first:.4f} -> {last:.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_iterate(args) -> int:
    config = _load_config(args)
    report = run_itercomp(config, workdir=args.workdir, iterations=args.iters, resume=args.resume)
    for row in report.rows:
        parts = [f"iter {row['iteration']}: composite {row['composite']:.4f}"]
        if row.get("median_policy_insert_rank") is not None:
            parts.append(f"median insert rank {row['median_policy_insert_rank']:.1f}")
        print(", ".join(parts))
    print(f"report written to {os.path.join(args.workdir or config.workdir, 'report.csv')}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    model = load_diffusion(args.model)
    count = args.prompts or config.eval.prompts_per_category
    report = evaluate_model(
        lambda prompt, rng: sample(model, prompt, rng),
        count,
        substream(config.seed, "eval"),
        bootstrap_samples=config.eval.bootstrap_samples,
        oracle_params=config.oracles,
        model_id=args.model,
    )
    payload = report.to_json()
    payload["seed"] = config.seed
    if args.out:
        _write_json(payload, args.out)
        print(f"wrote {args.out}")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_verify_theory(args) -> int:
    report = theory.run_verification(
        seed=args.seed if args.seed is not None else 0,
        trials=args.trials,
        tol_lemma=args.tol_lemma,
        tol_theorem=args.tol_theorem,
    )
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    if not report.passed:
        raise VerificationError(
            f"theory checks failed: lemma residual {report.lemma1_residual:.3e}, "
            f"theorem relative error {report.theorem1_rel_error:.3e}"
        )
    return 0


def _cmd_report(args) -> int:
    path = os.path.join(args.workdir, "report.csv")
    if not os.path.exists(path):
        raise DataError(f"no report.csv under {args.workdir}")
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="itercomp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p, workdir=False):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="max worker count (currently 1)")
        if workdir:
            p.add_argument("--workdir", help="run directory")

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-scale", action="store_true",
                   help="use 1500/1000/1000 prompt counts instead of 500 each")
    p.set_defaults(func=_cmd_init_config)

    p = sub.add_parser("gen-prefs", help="build the preference dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="output prefs.jsonl")
    p.add_argument("--stats", help="output stats.json (default: alongside --out)")
    p.set_defaults(func=_cmd_gen_prefs)

    p = sub.add_parser("pretrain", help="pretrain the base diffusion model")
    add_common(p)
    p.add_argument("--data", required=True, help="prefs.jsonl with (prompt, scene) examples")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override pretraining steps")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train-reward", help="train one category reward model")
    add_common(p)
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--data", required=True, help="prefs.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_train_reward)

    p = sub.add_parser("refl", help="reward-feedback finetune a base model")
    add_common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--rewards", required=True, help="comma-separated reward checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="prefs.jsonl to reuse its prompts (default: sample fresh)")
    p.set_defaults(func=_cmd_refl)

    p = sub.add_parser("iterate", help="full closed-loop run")
    add_common(p, workdir=True)
    p.add_argument("--iters", type=int, help="override config iterations")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_iterate)

    p = sub.add_parser("eval", help="oracle evaluation of a diffusion checkpoint")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompts", type=int, help="prompts per category")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify-theory", help="numerical checks of the two identities")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol-lemma", type=float, default=1e-10)
    p.add_argument("--tol-theorem", type=float, default=1e-4)
    p.set_defaults(func=_cmd_verify_theory)

    p = sub.add_parser("report", help="print report.csv from a work directory")
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def run_cli(argv=None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except VerificationError as err:
        print(f"verification failure: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())

"""``avar`` command-line entry point.

Exit codes: 0 ok, 1 usage, 2 validation or format error, 3 backend or IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import AvarError, BackendError, FormatError, ValidationError

log = logging.getLogger("avar")

EXIT_USAGE, EXIT_VALIDATION, EXIT_BACKEND = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj, path: str | None = None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _layers(spec: str | None):
    """'a..b' (inclusive), 'a,b,c' or None."""
    if spec is None:
        return None
    if ".." in spec:
        a, b = spec.split("..")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(x) for x in spec.split(","))


def _read_input(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"cannot read {path}: no such file") from exc


# -- subcommands ------------------------------------------------------------

def cmd_analyze(args) -> int:
    from .attn_core import read_dump
    from .vas import aggregate_report, heatmap_svg

    dumps, ids = [], []
    for path in args.dumps:
        A, seg = read_dump(_read_input(path))
        dumps.append((A, seg))
        ids.append(A.meta.get("sample_id", Path(path).stem))
    report = aggregate_report(dumps, args.query_set, args.strict, ids)
    _emit(report.to_json(), args.json)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.svg:
        Path(args.svg).write_text(heatmap_svg(report.per_head), encoding="utf-8")
    if args.json:
        print(f"{'samples':<12}{len(dumps)}")
        print(f"{'query set':<12}{report.query_set_kind}")
        print(f"{'model VAS':<12}{report.model_level:.6g}")
        print(f"{'band':<12}{report.band}")
    return 0


def cmd_band(args) -> int:
    from .vas import classify_band

    print(classify_band(args.vas))
    return 0


def cmd_correlate(args) -> int:
    from .vas import pearson, pearson_two_pass

    if args.csv:
        rows = [line.split(",") for line in Path(args.csv).read_text().splitlines() if line.strip()]
        try:
            xs = [float(r[0]) for r in rows]
            ys = [float(r[1]) for r in rows]
        except (ValueError, IndexError):
            xs = [float(r[0]) for r in rows[1:]]
            ys = [float(r[1]) for r in rows[1:]]
    else:
        if not args.xs or not args.ys:
            raise UsageError("correlate needs --xs and --ys, or --csv")
        xs = [float(x) for x in args.xs.split(",")]
        ys = [float(y) for y in args.ys.split(",")]
    r, r2 = pearson(xs, ys), pearson_two_pass(xs, ys)
    _emit({"n": len(xs), "r": r, "r_two_pass": r2})
    return 0


def _env_and_model(cfg, seed):
    from .env import GroundedLookupEnv
    from .train import model_config_for

    env = GroundedLookupEnv(seed, **asdict(cfg.env))
    return env, model_config_for(env, seed=seed, **asdict(cfg.model))


def _initial_params(cfg, env, mcfg):
    from .model import init_params, load_checkpoint

    if cfg.paths.init_checkpoint:
        params, _ = load_checkpoint(cfg.paths.init_checkpoint)
        return params
    return init_params(mcfg)


def _jsonl_writer(path):
    if not path:
        return None, None
    f = open(path, "w", encoding="utf-8")
    return f, lambda entry: f.write(json.dumps(entry) + "\n")


def _load_run_config(args):
    from .config import load_config, validate_paths

    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, section, key in getattr(args, "_overrides", ()):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    return validate_paths(cfg)


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .objectives import LossWeights
    from .train import evaluate, train_supervised

    cfg = _load_run_config(args)
    env, mcfg = _env_and_model(cfg, cfg.seed)
    params = _initial_params(cfg, env, mcfg)
    weights = LossWeights(cfg.loss.alpha, cfg.loss.beta, cfg.loss.epsilon)
    f, write = _jsonl_writer(cfg.paths.log)
    try:
        params, _ = train_supervised(params, env, cfg.train.steps, weights, cfg.train.batch_size, cfg.train.lr,
                                     cfg.train.optimizer, cfg.train.layers, cfg.train.query_set, write)
    finally:
        if f:
            f.close()
    if cfg.paths.checkpoint:
        save_checkpoint(cfg.paths.checkpoint, params, cfg.train.steps, {"stage": "supervised"})
    ev = evaluate(params, env)
    _emit({"steps": cfg.train.steps, "alpha": weights.alpha, "beta": weights.beta, **ev})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import LOSSES, check

    results, worst = {}, 0.0
    for seed in args.seeds:
        results[str(seed)] = {}
        for which in args.losses or LOSSES:
            err = check(seed, which, args.h)
            results[str(seed)][which] = err
            worst = max(worst, err)
    _emit({"h": args.h, "tol": args.tol, "max_rel_error": worst, "pass": worst <= args.tol, "results": results})
    return 0 if worst <= args.tol else EXIT_VALIDATION


def cmd_rl(args) -> int:
    from .grpo import RewardWeights, RLConfig, train_rl
    from .model import save_checkpoint
    from .objectives import LossWeights
    from .train import evaluate_sampled, train_supervised

    cfg = _load_run_config(args)
    r = cfg.rl
    env, mcfg = _env_and_model(cfg, cfg.seed)
    params = _initial_params(cfg, env, mcfg)
    if not cfg.paths.init_checkpoint and r.cold_steps:
        params, _ = train_supervised(params, env, r.cold_steps, LossWeights(0.0, 0.0, cfg.loss.epsilon))
    rl_cfg = RLConfig(group_size=r.group_size, clip_range=r.clip_range, kl_coeff=r.kl_coeff, lr=r.lr,
                      steps=r.steps, seed=cfg.seed, weights=RewardWeights(r.lambda_v, r.lambda_f, r.epsilon),
                      prompts_per_step=r.prompts_per_step, epochs_per_batch=r.epochs_per_batch,
                      max_new=r.max_new, optimizer=r.optimizer)
    before = evaluate_sampled(params, env)
    f, write = _jsonl_writer(args.out or cfg.paths.history)
    try:
        params, history = train_rl(rl_cfg, params, env, on_step=write)
    finally:
        if f:
            f.close()
    if cfg.paths.checkpoint:
        save_checkpoint(cfg.paths.checkpoint, params, r.steps, {"stage": "rl"})
    after = evaluate_sampled(params, env)
    if not (args.out or cfg.paths.history):
        for entry in history:
            sys.stdout.write(json.dumps(entry) + "\n")
    else:
        _emit({"before": before, "after": after, "lambda_v": r.lambda_v, "steps": r.steps})
    return 0


def cmd_intervene(args) -> int:
    from .attn_core import read_dump, write_dump
    from .intervention import InterventionConfig, reallocate
    from .vas import vas_model

    A, seg = read_dump(_read_input(args.dump))
    icfg = InterventionConfig(args.gamma, _layers(args.layers), args.mode)
    B = reallocate(A, seg, icfg)
    Path(args.out).write_bytes(write_dump(B, seg))
    _emit({"vas_before": vas_model(A, seg, args.query_set), "vas_after": vas_model(B, seg, args.query_set),
           "gamma": args.gamma})
    return 0


def cmd_gen(args) -> int:
    from .env import GroundedLookupEnv
    from .intervention import InterventionConfig
    from .model import load_checkpoint
    from .train import evaluate

    if args.task != "grounded-lookup":
        raise UsageError(f"unknown task {args.task!r}")
    try:
        params, header = load_checkpoint(args.ckpt)
    except FileNotFoundError as exc:
        raise FormatError(f"cannot read {args.ckpt}: no such file") from exc
    env = GroundedLookupEnv(args.seed)
    if env.vocab_size != params.config.vocab_size or env.image_vocab_size != params.config.image_vocab_size:
        raise FormatError("checkpoint vocabulary does not match the default grounded-lookup task")
    icfg = InterventionConfig(args.gamma, _layers(args.layers))
    base = evaluate(params, env, args.n)
    inter = evaluate(params, env, args.n, intervention=icfg)
    _emit({"vas_before": base["vas"], "vas_after": inter["vas"], "gamma": args.gamma,
           "accuracy_before": base["accuracy"], "accuracy_after": inter["accuracy"]})
    return 0


def cmd_synth(args) -> int:
    from .config import load_config
    from .synth import PipelineConfig, load_templates, make_client, read_inputs, run_pipeline

    cfg = load_config(args.config).synth
    lexicon = tuple(cfg.lexicon) if cfg.lexicon else None
    pcfg = PipelineConfig(anchor_mode=args.anchor_mode or cfg.anchor_mode, every_k=cfg.every_k,
                          max_tokens=cfg.max_tokens, temperature=cfg.temperature,
                          templates=load_templates(cfg.templates_dir))
    if lexicon:
        pcfg.lexicon = lexicon
    try:
        inputs = read_inputs(args.inp, args.n)
    except FileNotFoundError as exc:
        raise FormatError(f"cannot read {args.inp}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.inp}: bad JSONL ({exc})") from exc
    client = make_client(args.backend, endpoint=args.endpoint or cfg.endpoint)
    summary = run_pipeline(inputs, client, args.out, args.concurrency, pcfg)
    _emit(summary)
    return EXIT_BACKEND if summary["failed"] else 0


def cmd_report(args) -> int:
    from .plots import curves_svg

    try:
        lines = Path(args.src).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise FormatError(f"cannot read {args.src}: no such file") from exc
    try:
        history = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.src}: bad JSONL ({exc})") from exc
    if args.svg:
        Path(args.svg).write_text(curves_svg(history), encoding="utf-8")
    keys = sorted({k for h in history for k in h if k != "step" and isinstance(h[k], (int, float))})
    summary = {"steps": len(history)}
    for k in keys:
        vals = [h[k] for h in history if k in h]
        summary[k] = {"first": vals[0], "last": vals[-1], "mean": float(np.mean(vals))}
    _emit(summary)
    return 0


def cmd_compare(args) -> int:
    from .train import experiment_compare

    rows = experiment_compare(tuple(args.seeds), args.cold_steps, args.attn_steps, args.rl_steps)
    _emit(rows, args.json)
    if args.json:
        print(f"{'variant':<18}{'seed':>5}{'vas':>14}{'accuracy':>10}")
        for r in rows:
            print(f"{r['variant']:<18}{r['seed']:>5}{r['vas']:>14.4g}{r['accuracy']:>10.3f}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avar", description="Visual attention anchoring lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("analyze", help="VAS report for one or more ATND dumps")
    s.add_argument("dumps", nargs="+", help="ATND dump files")
    s.add_argument("--query-set", choices=("user", "response"), default="user", help="query tokens (default user)")
    s.add_argument("--strict", action="store_true", help="drop queries that cannot see the system span")
    s.add_argument("--json", help="write the JSON report here instead of stdout")
    s.add_argument("--csv", help="write (layer, head, vas) rows here")
    s.add_argument("--svg", help="write a per-head heatmap here")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("band", help="classify a VAS value as Narrow, Wide or Panoramic")
    s.add_argument("vas", type=float)
    s.set_defaults(func=cmd_band)

    s = sub.add_parser("correlate", help="Pearson r between two series")
    s.add_argument("--xs", help="comma-separated values")
    s.add_argument("--ys", help="comma-separated values")
    s.add_argument("--csv", help="two-column CSV file (optional header row)")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("train", help="supervised cold start with attention-guided objectives")
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha", type=float, help="image-enhancement weight (default 0.15)")
    s.add_argument("--beta", type=float, help="system-suppression weight (default 0.15)")
    s.add_argument("--lr", type=float)
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--log", help="JSONL training log path")
    s.set_defaults(func=cmd_train, _overrides=(
        ("steps", "train", "steps"), ("alpha", "loss", "alpha"), ("beta", "loss", "beta"),
        ("lr", "train", "lr"), ("out", "paths", "checkpoint"), ("log", "paths", "log")))

    s = sub.add_parser("gradcheck", help="analytic vs central-difference gradients")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--losses", nargs="+", choices=("lm", "enhance_img", "suppress_sys", "total", "grpo"))
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("rl", help="GRPO with visual-anchored reward shaping")
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lambda-v", dest="lambda_v", type=float, help="visual reward weight (default 0.3)")
    s.add_argument("--lambda-f", dest="lambda_f", type=float, help="format reward weight (default 0.1)")
    s.add_argument("--group", type=int, help="group size G (default 8)")
    s.add_argument("--clip", type=float, help="clip half-width (default 0.2)")
    s.add_argument("--kl", type=float, help="KL coefficient (default 0.01)")
    s.add_argument("--init", help="starting checkpoint (skips the cold start)")
    s.add_argument("--ckpt-out", dest="ckpt_out", help="write the final policy here")
    s.add_argument("--out", help="JSONL history path (default stdout)")
    s.set_defaults(func=cmd_rl, _overrides=(
        ("steps", "rl", "steps"), ("lambda_v", "rl", "lambda_v"), ("lambda_f", "rl", "lambda_f"),
        ("group", "rl", "group_size"), ("clip", "rl", "clip_range"), ("kl", "rl", "kl_coeff"),
        ("init", "paths", "init_checkpoint"), ("ckpt_out", "paths", "checkpoint")))

    s = sub.add_parser("intervene", help="reallocate attention in a dump away from system keys")
    s.add_argument("--dump", required=True)
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--layers", help="a..b inclusive or a,b,c (default all)")
    s.add_argument("--mode", choices=("proportional", "image_only"), default="proportional")
    s.add_argument("--query-set", choices=("user", "response"), default="user")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_intervene)

    s = sub.add_parser("gen", help="greedy decoding with and without attention reallocation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--task", default="grounded-lookup")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layers", help="a..b inclusive or a,b,c (default all)")
    s.add_argument("--n", type=int, default=200, help="held-out episodes")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("synth", help="three-stage visual-anchored reasoning data synthesis")
    s.add_argument("--backend", choices=("mock", "http"), default="mock")
    s.add_argument("--in", dest="inp", required=True, help="input JSONL")
    s.add_argument("--out", required=True, help="output JSONL")
    s.add_argument("--n", type=int, help="use only the first N inputs")
    s.add_argument("--concurrency", type=int, default=4)
    s.add_argument("--config", help="RunConfig JSON (synth section: endpoint, templates_dir, ...)")
    s.add_argument("--endpoint", help="HTTP completion endpoint (overrides config)")
    s.add_argument("--anchor-mode", choices=("rule", "client"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", help="summarise a JSONL history and render curves")
    s.add_argument("--from", dest="src", required=True)
    s.add_argument("--svg")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", help="LM-only vs attention-guided vs RL-shaped variants")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--cold-steps", type=int, default=500)
    s.add_argument("--attn-steps", type=int, default=300)
    s.add_argument("--rl-steps", type=int, default=100)
    s.add_argument("--json", help="write rows here instead of stdout")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            print("avar: error: a command is required", file=sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FormatError) as exc:
        print(f"avar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BackendError, OSError) as exc:
        print(f"avar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except AvarError as exc:
        print(f"avar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


dispatch = main

if __name__ == "__main__":
    sys.exit(main())

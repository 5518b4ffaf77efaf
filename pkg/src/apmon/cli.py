"""Command-line entry point: ``apmon <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 input or model
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from apmon import __version__
from apmon.errors import (
    ApmonError,
    ConfigError,
    DegenerateGap,
    DomainError,
    NonFiniteGradient,
    ScenarioError,
    ZeroLikelihood,
)

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_DIR_ENV = "APMON_OUT_DIR"

log = logging.getLogger("apmon")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, subcommand: str, config: dict, seed, scenario_hash, outputs, started) -> None:
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "version": __version__,
        "scenario_hash": scenario_hash,
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _default_dir(value):
    return Path(value or os.environ.get(OUT_DIR_ENV) or ".")


def _load_scenario(path):
    from apmon.scenario import load_scenario

    try:
        return load_scenario(path)
    except OSError as exc:
        raise InputError(f"cannot read scenario {path}: {exc.strerror or exc}") from None


# --- subcommands -----------------------------------------------------------


def cmd_build_scenario(args) -> int:
    from apmon.scenario import build_fixture, save_scenario

    started = _now()
    if args.kind == "fixture":
        if not args.name:
            raise UsageError("build-scenario fixture requires --name f1|f1-two-sensor")
        sc = build_fixture(args.name)
        sc = sc.with_overrides(lookahead=args.k, horizon=args.horizon, alpha=args.alpha)
        config = {"kind": "fixture", "name": args.name}
    else:
        from apmon.congestion import build_congestion_scenario

        overrides = {}
        if args.config:
            try:
                overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"cannot read config {args.config}: {exc}") from None
        for key in ("k", "horizon", "alpha"):
            val = getattr(args, key)
            if val is not None:
                overrides["lookahead" if key == "k" else key] = val
        sc = build_congestion_scenario(overrides)
        config = {"kind": "congestion", **overrides}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenario(sc, out)
    product = sc.product()
    pruned = sc.product(prune=True)
    print(f"wrote {out}: {len(sc.hmm.states)} physical states, {product.n_states} product states "
          f"({pruned.n_states} reachable), {len(sc.hmm.queries)} queries, "
          f"K={sc.horizon}, k={sc.lookahead}, alpha={sc.alpha}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "build-scenario", config, None,
                   sc.content_hash(), [out], started)
    return EXIT_OK


def cmd_train(args) -> int:
    from apmon.policy import load_checkpoint
    from apmon.trainer import TrainConfig, train

    started = _now()
    sc = _load_scenario(args.scenario)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        iterations=args.iters,
        seed=args.seed,
        optimizer=args.optimizer,
        clip_norm=args.clip,
        baseline=args.baseline,
        full_episode_score=args.full_episode_score,
        eval_every=args.eval_every,
        policy=args.policy,
        hidden=args.hidden,
        window=args.window,
        horizon=args.horizon,
        lookahead=args.k,
        alpha=args.alpha_override,
        prune=args.prune,
        workers=args.workers,
    )
    policy = None
    if args.init:
        policy, _ = load_checkpoint(args.init)
    out = _default_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "checkpoint.json", out / "train_log.csv"
    scenario_hash = sc.content_hash()
    last = {}

    def progress(it, _policy, diag):
        last.update(diag)
        if args.verbose and (it % max(1, args.iters // 20) == 0 or it == args.iters - 1):
            print(f"iter {it}: objective {diag['objective']:.5f} (entropy {diag['entropy_term']:.5f}, "
                  f"cost {diag['cost_term']:.5f})", file=sys.stderr)

    train(sc, cfg, policy=policy, log_path=log_path, checkpoint_path=ckpt,
          scenario_hash=scenario_hash, on_iteration=progress)
    if last:
        print(f"final objective {last['objective']:.6f}")
    print(f"wrote {ckpt} and {log_path}")
    write_manifest(out / "manifest.json", "train", asdict(cfg), args.seed, scenario_hash, [ckpt, log_path], started)
    return EXIT_OK


def _load_trained(paths, sc, scenario_hash, product):
    from apmon.policy import load_checkpoint

    trained = []
    for path in paths:
        try:
            policy, meta = load_checkpoint(path)
        except OSError as exc:
            raise InputError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed checkpoint {path}: {exc}") from None
        if meta.get("scenario_hash") and meta["scenario_hash"] != scenario_hash:
            raise InputError(f"checkpoint {path} was trained on a different scenario "
                             f"(hash {meta['scenario_hash'][:12]} vs {scenario_hash[:12]})")
        if policy.n_obs != product.n_observations or policy.n_queries != product.n_queries:
            raise InputError(f"checkpoint {path} does not match the scenario's query/observation alphabets")
        trained.append((policy, meta))
    return trained


def cmd_eval(args) -> int:
    from apmon.evaluator import emit_accuracy_csv, emit_report_csv, emit_trajectories_csv, evaluate
    from apmon.policy import UniformPolicy

    started = _now()
    sc = _load_scenario(args.scenario)
    product = sc.product(prune=args.prune)
    scenario_hash = sc.content_hash()
    baselines = [b for b in (args.baselines or "").split(",") if b]
    unknown = set(baselines) - {"random", "oracle"}
    if unknown:
        raise UsageError(f"unknown baseline(s): {', '.join(sorted(unknown))}")
    trained = _load_trained(args.checkpoint or [], sc, scenario_hash, product)
    if args.k:
        ks = [int(x) for x in args.k.split(",")]
    elif trained:
        ks = sorted({int(m.get("lookahead", sc.lookahead)) for _, m in trained})
    else:
        ks = [sc.lookahead]
    if args.trajectories <= 0:
        raise UsageError("--trajectories must be positive")

    report_stats, batches = [], {}
    for k in ks:
        pols = {}
        # with one checkpoint it is evaluated at every k; with several, each at its own lookahead
        for policy, meta in trained:
            if len(trained) == 1 or int(meta.get("lookahead", k)) == k:
                pols["trained"] = policy
        if "random" in baselines:
            pols["random"] = UniformPolicy(product.n_observations, product.n_queries)
        if "oracle" in baselines:
            pols["oracle"] = None
        if not pols:
            raise UsageError("nothing to evaluate: pass --checkpoint and/or --baselines")
        rep = evaluate(sc, pols, args.trajectories, args.seed, ks=[k], workers=args.workers,
                       product=product, keep_batches=args.dump_trajectories)
        report_stats.extend(rep.stats)
        batches.update(rep.batches)
    rep.stats = report_stats
    rep.batches = batches

    out = _default_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "report.csv", out / "accuracy.csv"]
    emit_report_csv(rep, outputs[0])
    emit_accuracy_csv(rep, outputs[1])
    if args.dump_trajectories:
        outputs.append(out / "trajectories.csv")
        emit_trajectories_csv(batches, outputs[-1], policy_names=True)
    for s in rep.stats:
        print(f"{s.policy:>8} k={s.k}: Brier {s.brier:.4f} +/- {s.brier_ci:.4f}, cost {s.cost:.2f} +/- {s.cost_ci:.2f}")
    closures = rep.gap_closures()
    for k, g in closures.items():
        print(f"gap closure k={k}: {100 * g:.2f}%")
    config = {k: v for k, v in vars(args).items() if k != "func"}
    config["gap_closure"] = {str(k): g for k, g in closures.items()}
    write_manifest(out / "manifest.json", "eval", config, args.seed, scenario_hash, outputs, started)
    return EXIT_OK


def read_history(path, queries, observations):
    """Parse ``query observation`` lines; returns index arrays and source line numbers."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read history {path}: {exc.strerror or exc}") from None
    qidx = {n: i for i, n in enumerate(queries)}
    oidx = {n: i for i, n in enumerate(observations)}
    qs, os_, lines = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"{path}:{lineno}: expected 'query observation', got {raw.strip()!r}")
        q, o = parts
        if q not in qidx:
            raise InputError(f"{path}:{lineno}: unknown query {q!r}")
        if o not in oidx:
            raise InputError(f"{path}:{lineno}: unknown observation {o!r}")
        qs.append(qidx[q])
        os_.append(oidx[o])
        lines.append(lineno)
    if not qs:
        raise UsageError(f"history file {path} contains no steps")
    return qs, os_, lines


def cmd_predict(args) -> int:
    from apmon.objective import binary_entropy
    from apmon.oom import build_operators, build_safety_predictor, run_filter, safety_probability

    started = _now()
    sc = _load_scenario(args.scenario)
    product = sc.product()
    qs, os_, lines = read_history(args.history, sc.hmm.queries, sc.hmm.observations)
    k = sc.lookahead if args.k is None else args.k
    if k < 0:
        raise UsageError("--k must be >= 0")
    ops = build_operators(product)
    pred = build_safety_predictor(product, k)
    rows = ["t,p_safe,entropy_bits,log_lik"]
    ll0 = None
    try:
        for f in run_filter(product, ops, qs, os_):
            p = float(safety_probability(f, pred))
            ll = float(f.log_likelihood)
            ll0 = ll if ll0 is None else ll0
            if args.condition_first_obs:
                ll -= ll0
            rows.append(f"{f.step},{p!r},{float(binary_entropy(p))!r},{ll!r}")
    except ZeroLikelihood as exc:
        raise InputError(f"{args.history}:{lines[exc.step]}: observation has zero probability "
                         f"given the history so far") from None
    text = "\n".join(rows) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(out.with_name(out.name + ".manifest.json"), "predict",
                       {"history": str(args.history), "k": k, "condition_first_obs": args.condition_first_obs},
                       None, sc.content_hash(), [out], started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    from apmon.checks import Check, run_checks
    from apmon.errors import SchemaError, ValidationError
    from apmon.scenario import _build, parse_scenario_text, scenario_problems

    try:
        text = Path(args.scenario).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read scenario {args.scenario}: {exc.strerror or exc}") from None
    try:
        doc = parse_scenario_text(text)
        problems = scenario_problems(doc)
    except (SchemaError, ScenarioError) as exc:
        print(f"FAIL scenario schema: {exc}")
        return EXIT_INVALID
    if problems:
        for path, message in problems:
            print(f"FAIL {path}: {message}")
        return EXIT_INVALID
    try:
        sc = _build(doc)
        checks = run_checks(sc, deep=args.deep)
    except (ValidationError, ApmonError) as exc:
        checks = [Check("model construction", "fail", str(exc))]
    for c in checks:
        print(f"{c.status.upper():4} {c.name}" + (f": {c.detail}" if c.detail else ""))
    failed = [c for c in checks if c.status == "fail"]
    if failed:
        print(f"{len(failed)} check(s) failed: " + "; ".join(c.name for c in failed))
        return EXIT_INVALID
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apmon", description="Active-perception safety monitor: "
                                "build scenarios, train query policies, evaluate and predict.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress output on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-scenario", help="write a scenario file")
    b.add_argument("kind", choices=("congestion", "fixture"))
    b.add_argument("--name", choices=("f1", "f1-two-sensor"), help="fixture name")
    b.add_argument("--k", type=int, help="lookahead k")
    b.add_argument("--horizon", type=int, help="horizon K")
    b.add_argument("--alpha", type=float, help="query-cost weight")
    b.add_argument("--config", help="JSON file of congestion options")
    b.add_argument("--out", required=True, help="output scenario path")
    b.set_defaults(func=cmd_build_scenario)

    t = sub.add_parser("train", help="train a query policy")
    t.add_argument("--scenario", required=True)
    t.add_argument("--iters", type=int, default=3000)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--alpha-override", type=float)
    t.add_argument("--horizon", type=int)
    t.add_argument("--k", type=int, help="lookahead override")
    t.add_argument("--policy", choices=("recurrent", "tabular"), default="recurrent")
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--window", type=int, default=2)
    t.add_argument("--clip", type=float, default=5.0)
    t.add_argument("--baseline", action="store_true", help="subtract the batch-mean entropy per step")
    t.add_argument("--full-episode-score", action="store_true")
    t.add_argument("--eval-every", type=int, default=0, help="checkpoint interval")
    t.add_argument("--prune", action="store_true", help="drop unreachable product states")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or .)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Brier-score evaluation against baselines")
    e.add_argument("--scenario", required=True)
    e.add_argument("--checkpoint", action="append", help="trained policy (repeatable)")
    e.add_argument("--baselines", default="random,oracle")
    e.add_argument("--trajectories", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--k", help="comma-separated lookaheads")
    e.add_argument("--prune", action="store_true")
    e.add_argument("--dump-trajectories", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or .)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="safety probabilities for a recorded history")
    r.add_argument("--scenario", required=True)
    r.add_argument("--history", required=True, help="file of 'query observation' lines")
    r.add_argument("--k", type=int)
    r.add_argument("--condition-first-obs", action="store_true",
                   help="report log-likelihood conditioned on the first observation")
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("validate", help="check scenario invariants")
    v.add_argument("--scenario", required=True)
    v.add_argument("--deep", action="store_true", help="also run enumeration and gradient checks")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"apmon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteGradient, DomainError, DegenerateGap, FloatingPointError) as exc:
        print(f"apmon: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ScenarioError, ConfigError, ApmonError, ValueError) as exc:
        print(f"apmon: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

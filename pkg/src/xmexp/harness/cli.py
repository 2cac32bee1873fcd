"""``xmexp`` command line: train, eval, explain, compare, theory-check.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
Runtime failures print one JSON object ``{"error": ..., "message": ...}`` to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .. import theory
from ..envs import run_episode, task_metrics
from ..expmetrics import METRICS, evaluate_explainer, evaluation_seed
from ..marl import train
from ..nn import ARCHITECTURES, Policy
from ..stats import bonferroni_adjust, mann_whitney_u
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config
from .report import aggregate_key, read_metric_column, write_report

EXPLAINERS = ("attention", "gnnexplainer", "graphmask")
EPISODE_COLUMNS = ("episode", "reward", "success_rate", "no_agent_coll", "makespan", "attn_entropy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_iter{iteration:05d}.xmck"


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    env = cfg.env_config()
    tcfg = cfg.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"run_config": cfg.to_dict(), "attention_entropy_weight": tcfg.attention_entropy_weight}

    def to_ckpt(iteration: int, fraction: float, params) -> Checkpoint:
        return Checkpoint(
            task=cfg.task, n_agents=cfg.n_agents, params=params,
            train_config={k: (list(v) if isinstance(v, tuple) else v) for k, v in tcfg.__dict__.items()},
            iteration=iteration, seed_lineage=[cfg.seed, 0],
            meta={**meta, "fraction": fraction, "max_steps": env.max_steps},
        )

    def on_checkpoint(ck) -> None:
        path = save_checkpoint(to_ckpt(ck.iteration, ck.fraction, ck.params), out / checkpoint_name(ck.iteration))
        print(f"checkpoint {path}", flush=True)

    def on_iteration(row) -> None:
        if not args.quiet:
            print(json.dumps(row), flush=True)

    result = train(env, tcfg, cfg.seed, on_checkpoint=on_checkpoint, on_iteration=on_iteration,
                   iterations=args.iterations)
    final = result.checkpoints[-1].iteration if result.checkpoints else len(result.curves)
    save_checkpoint(to_ckpt(final, 1.0, result.params), out / "final.xmck")
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(result.curves[0]) if result.curves else ["iteration"]
        w.writerow(cols)
        for row in result.curves:
            w.writerow([repr(float(row[c])) if isinstance(row[c], float) else str(row[c]) for c in cols])
    print(f"final {out / 'final.xmck'}")
    return 0


def policy_from_checkpoint(ckpt: Checkpoint) -> Policy:
    meta = {**ckpt.meta, "attention_entropy_weight": ckpt.train_config.get("attention_entropy_weight", 0.0)}
    return Policy(ckpt.params, ARCHITECTURES[ckpt.task], meta)


def _env_for(ckpt: Checkpoint, agents: int | None, max_steps: int | None):
    from ..envs import DEFAULT_MAX_STEPS, make_task

    steps = max_steps or ckpt.meta.get("max_steps") or DEFAULT_MAX_STEPS[ckpt.task]
    return make_task(ckpt.task, agents or ckpt.n_agents, max_steps=int(steps))


def evaluate_policy(policy: Policy, env, episodes: int, seed: int) -> list[dict]:
    """Deterministic rollouts with task metrics and mean per-row attention entropy."""
    from ..nn import attention_entropy

    rows = []
    for e in range(episodes):
        elog, observations = run_episode(env, evaluation_seed(seed, e), policy.act)
        alpha = policy.attention(np.stack(observations))
        ent = float(np.mean(attention_entropy(alpha))) / env.n_agents
        rows.append({"episode": e, **task_metrics(elog, env), "attn_entropy": ent})
    return rows


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    env = _env_for(ckpt, args.agents, args.max_steps)
    rows = evaluate_policy(policy_from_checkpoint(ckpt), env, args.episodes, args.seed)
    summary = {
        "task": ckpt.task, "train_agents": ckpt.n_agents, "eval_agents": env.n_agents,
        "zero_shot": env.n_agents != ckpt.n_agents, "episodes": args.episodes,
        **{k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "episode"},
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS + (("no_object_coll",) if "no_object_coll" in rows[0] else ()))
        for r in rows:
            w.writerow([r["episode"]] + [repr(float(r[c])) for c in list(EPISODE_COLUMNS[1:])
                                         + (["no_object_coll"] if "no_object_coll" in r else [])])
        (out / "episodes.csv").write_text(buf.getvalue())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    env = _env_for(ckpt, args.agents, args.max_steps)
    policy = policy_from_checkpoint(ckpt)
    ex_cfg = load_run_config(args.config, args.set).explainer_config() if args.config else None
    result = evaluate_explainer(policy, env, args.explainer, args.episodes, args.seed, ex_cfg)
    regularized = policy.meta["attention_entropy_weight"] > 0
    manifest = {
        "key": aggregate_key(env.task, env.n_agents, regularized, args.explainer),
        "checkpoint": str(args.ckpt), "task": env.task, "train_agents": ckpt.n_agents,
        "eval_agents": env.n_agents, "episodes": args.episodes, "seed": args.seed,
        "explainer": args.explainer, "explainer_config": ex_cfg.__dict__ if ex_cfg else None,
        "train_config": ckpt.train_config, "checkpoint_iteration": ckpt.iteration,
    }
    paths = write_report(result.records, args.out, manifest, result.masks, len(result.failures))
    means = {m: result.aggregate[m].get("mean") for m in METRICS}
    print(json.dumps({"records": len(result.records), "failures": len(result.failures), **means,
                      "out": str(paths["records"])}, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    a = read_metric_column(args.a, args.metric)
    b = read_metric_column(args.b, args.metric)
    res = mann_whitney_u(a, b, args.alternative)
    adj = bonferroni_adjust(res.p, args.m)
    out = {
        "metric": args.metric, "n_a": len(a), "n_b": len(b),
        "median_a": float(np.median(a)), "median_b": float(np.median(b)),
        "U": res.u, "p": res.p, "p_adjusted": adj, "m": args.m, "alternative": args.alternative,
        "significant": adj < args.alpha,
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_theory(args) -> int:
    report = theory.verify_bounds(args.samples, range(args.n_min, args.n_max + 1), args.seed)
    for line in report.lines():
        print(line)
    print(f"samples per N: {args.samples}; violations: {report.total_violations}")
    return 0 if report.passed else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xmexp", description="Explainable multi-agent GNN policies: train, evaluate, explain.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy from a key=value config")
    t.add_argument("config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--iterations", type=int, default=None, help="stop early after this many iterations")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "task metrics over deterministic rollouts"),
        ("explain", cmd_explain, "explain every timestep and score the explanations"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--episodes", type=int, default=50)
        e.add_argument("--agents", type=int, default=None, help="team size (larger than training: zero-shot)")
        e.add_argument("--max-steps", type=int, default=None)
        e.add_argument("--seed", type=int, default=0)
        if name == "explain":
            e.add_argument("--explainer", required=True, choices=EXPLAINERS)
            e.add_argument("--out", required=True)
            e.add_argument("--config", default=None, help="key=value file with explainer overrides")
            e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        else:
            e.add_argument("--out", default=None)
        e.set_defaults(func=func)

    c = sub.add_parser("compare", help="Mann-Whitney U test between two metric CSVs")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--metric", required=True)
    c.add_argument("--m", type=int, required=True, help="Bonferroni family size")
    c.add_argument("--alternative", default="two-sided", choices=("two-sided", "less", "greater"))
    c.add_argument("--alpha", type=float, default=0.05)
    c.set_defaults(func=cmd_compare)

    th = sub.add_parser("theory-check", help="check the D(alpha) bounds on random attention matrices")
    th.add_argument("--samples", type=int, default=10_000)
    th.add_argument("--n-min", type=int, default=2)
    th.add_argument("--n-max", type=int, default=8)
    th.add_argument("--seed", type=int, default=0)
    th.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "set", None) and args.command == "explain" and not args.config:
            raise UsageError("explain: --set requires --config")
        if getattr(args, "episodes", 1) < 1:
            raise UsageError("--episodes must be >= 1")
        if args.command == "compare" and args.m < 1:
            raise UsageError("compare: --m must be >= 1")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``visuopool`` command line: gen-demos, train, eval, gradcheck, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 gradient audit failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import ExperimentConfig
from .env import SignatureBank, generate_demos
from .metrics import UndefinedCorrelationError, predictor_report, scatter_csv
from .optim import lr_at
from .pooling import POOLING_KINDS, ConfigurationError
from .storage import DataError, read_demos, read_json, write_csv, write_demos, write_json
from .tape import ContractError
from .trainer import (EvalReport, ExpertActor, PolicyActor, add_fragment, build_policy,
                      checkpoint_dict, evaluate, finalize, lr_schedule, result_from_checkpoint,
                      train)

log = logging.getLogger("visuopool")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AUDIT = 0, 1, 2, 3
GRADCHECK_SEEDS = tuple(range(10))
GRADCHECK_COORDS = 24  # finite-differenced entries per parameter array


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig()


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory ({exc.strerror})") from None
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_demos(config: ExperimentConfig, out_dir: Path) -> int:
    env = config.env.env_config()
    demos = generate_demos(config.env.n_demos, seed=config.env.demo_seed, config=env,
                           bank=SignatureBank.create(env))
    write_demos(out_dir, demos, config)
    print(f"wrote {len(demos)} episodes to {out_dir} "
          f"(mean length {np.mean([len(d) for d in demos]):.1f} steps)")
    return EXIT_OK


def cmd_train(config: ExperimentConfig, demo_dir: Path, out_dir: Path) -> int:
    demos, manifest = read_demos(demo_dir)
    if manifest["config"]["env"] != config.to_dict()["env"]:
        raise DataError(f"{demo_dir}: demonstrations were rendered with a different env section")
    policy = build_policy(config)
    schedule = lr_schedule(config.train) if config.train.steps else None
    for seed in config.train.seeds:
        result = train(config, demos, seed, policy)
        write_json(out_dir / f"checkpoint-s{seed}.json", checkpoint_dict(config, result), indent=None)
        rows = [(s, l, lr_at(schedule, s)) for s, l in result.loss_history]
        write_csv(out_dir / f"loss-s{seed}.csv", ["step", "loss", "lr"], rows)
        last = result.loss_history[-1][1] if result.loss_history else float("nan")
        print(f"{config.pooling.kind} seed {seed}: {len(result.loss_history)} loss rows, "
              f"final loss {last:.3g}")
    return EXIT_OK


def _checkpoint_paths(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("checkpoint-s*.json"),
                       key=lambda p: int(p.stem.rsplit("-s", 1)[1]))
        if not found:
            raise DataError(f"{path}: no checkpoint-s*.json files")
        return found
    if not path.is_file():
        raise DataError(f"{path}: no such checkpoint")
    return [path]


def _iqm_table(rows: dict[str, dict[str, float]], conditions) -> str:
    width = max([len("kind")] + [len(k) for k in rows])
    lines = ["kind".ljust(width) + "".join(f"  {c:>10}" for c in conditions)]
    for kind, iqms in rows.items():
        lines.append(kind.ljust(width) + "".join(
            f"  {iqms[c]:>10.3f}" if c in iqms else f"  {'-':>10}" for c in conditions))
    return "\n".join(lines)


def cmd_eval(config: ExperimentConfig, checkpoint: Path | None, out_dir: Path, *,
             jobs: int = 1, expert: bool = False) -> int:
    env = config.env.env_config()
    bank = SignatureBank.create(env)
    conditions = config.eval.conditions
    if expert:
        actors = [(0, ExpertActor(env))]
        kind = "expert"
    else:
        if checkpoint is None:
            raise UsageError("eval needs --checkpoint (or --expert)")
        policy = build_policy(config)
        actors = []
        for path in _checkpoint_paths(checkpoint):
            ckpt = read_json(path)
            if ckpt.get("config_hash") != config.model_hash():
                raise DataError(f"{path}: checkpoint config hash {ckpt.get('config_hash')} does not "
                                f"match the eval config's {config.model_hash()}")
            result = result_from_checkpoint(ckpt)
            actors.append((result.seed, PolicyActor(policy, result.params, result.stats)))
        kind = config.pooling.kind
    tasks = [(seed, actor, cond) for seed, actor in actors for cond in conditions]

    def run(task):
        seed, actor, cond = task
        return evaluate(actor, cond, config.eval.episodes, config.eval.seed, env, bank, seed)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        fragments = list(pool.map(run, tasks))  # map keeps task order
    report = EvalReport(kind=kind, config=config.to_dict(), seeds=[s for s, _ in actors])
    for (seed, _, _), frag in zip(tasks, fragments):
        add_fragment(report, frag, seed)
    finalize(report)
    write_json(out_dir / "report.json", report.to_dict())
    header = ["episode", "condition", "seed", "success", "final_distance", "steps", "run_seed"]
    write_csv(out_dir / "traces.csv", header, ([r[k] for k in header] for r in report.traces))
    print(_iqm_table({kind: report.iqm}, conditions))
    return EXIT_OK


def cmd_gradcheck(config: ExperimentConfig, seeds=GRADCHECK_SEEDS) -> int:
    worst: dict[str, gc.AuditRow] = {}
    for kind in POOLING_KINDS:
        policy = build_policy(config.with_pooling(kind=kind))
        for seed in seeds:
            rng = np.random.default_rng([0x6C, seed])
            rows = gc.audit_components(policy, gc.generic_params(policy, seed),
                                       gc.random_batch(policy, rng),
                                       coords_per_param=GRADCHECK_COORDS, rng=rng)
            for row in rows:
                name = row.component if row.component != "policy_mlp" else f"policy_mlp[{kind}]"
                best = worst.get(name)
                if best is None or (row.max_rel_error or 0.0) > (best.max_rel_error or 0.0):
                    worst[name] = replace(row, component=name)
    print(f"{'component':<28}{'params':>8}  {'max rel err':>12}  {'worst':<10}  status")
    failed = []
    for name, row in worst.items():
        err = "n/a" if row.max_rel_error is None else f"{row.max_rel_error:.2e}"
        status = "n/a" if row.max_rel_error is None else ("ok" if row.passed() else "FAIL")
        print(f"{name:<28}{row.n_params:>8}  {err:>12}  {row.worst_param or '-':<10}  {status}")
        if not row.passed():
            failed.append(f"{name}:{row.worst_param}")
    if failed:
        print("gradient audit failed for " + ", ".join(failed), file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_report(run_dirs: list[Path], out_dir: Path) -> int:
    reports = []
    for run in run_dirs:
        if not (run / "report.json").is_file():
            raise DataError(f"{run}: missing report.json")
        reports.append(EvalReport.from_dict(read_json(run / "report.json")))
    n_runs = sum(len(r.seeds) for r in reports)
    if n_runs < 3:
        raise ContractError(f"report needs at least 3 completed runs, got {n_runs}")
    per_kind: dict[str, dict[str, list[float]]] = {}
    for r in reports:
        for cond, rates in r.per_seed.items():
            per_kind.setdefault(r.kind, {}).setdefault(cond, []).extend(rates)
    merged = {k: finalize(EvalReport(kind=k, config={}, per_seed=v)).iqm for k, v in per_kind.items()}
    conditions = [c for c in ("in_domain", "lighting", "texture")
                  if any(c in iqm for iqm in merged.values())]
    summary = {"n_runs": n_runs, "iqm": merged, "per_seed": per_kind}
    if "afa" in merged and "mean" in merged:
        summary["afa_minus_mean"] = {c: merged["afa"][c] - merged["mean"][c]
                                     for c in conditions if c in merged["afa"] and c in merged["mean"]}
    samples = [s for r in reports for s in r.predictor_samples()]
    try:
        predictors = predictor_report(samples)
    except (ContractError, UndefinedCorrelationError) as exc:
        predictors = {"n_samples": len(samples), "error": str(exc)}
    (out_dir / "predictors.csv").write_text(scatter_csv(samples))
    write_json(out_dir / "correlations.json", predictors)
    write_json(out_dir / "summary.json", summary)
    print(_iqm_table(merged, conditions))
    if "rho_mass" in predictors:
        print(f"rho(mass, OOD success) = {predictors['rho_mass']:+.3f}, "
              f"rho(entropy, OOD success) = {predictors['rho_entropy']:+.3f} "
              f"over {predictors['n_samples']} samples")
    else:
        print(f"correlations unavailable: {predictors['error']}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="visuopool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the config's seed for this command")
        if out:
            p.add_argument("--out", type=Path, help="output directory")
        return p

    common(sub.add_parser("gen-demos", help="render expert demonstrations"))
    p = common(sub.add_parser("train", help="behaviour-clone one policy per seed"))
    p.add_argument("--demos", type=Path, required=True, help="directory written by gen-demos")
    p = common(sub.add_parser("eval", help="closed-loop evaluation of trained checkpoints"))
    p.add_argument("--checkpoint", type=Path, help="checkpoint file or directory of checkpoints")
    p.add_argument("--jobs", type=int, default=1, help="evaluation threads")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    common(sub.add_parser("gradcheck", help="finite-difference audit of every component"), out=False)
    p = sub.add_parser("report", help="aggregate evaluated runs")
    p.add_argument("runs", nargs="+", type=Path, help="directories holding report.json")
    p.add_argument("--out", type=Path, help="output directory")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "report":
            return cmd_report(args.runs, _out_dir(args))
        config = _load_config(args)
        if args.command == "gen-demos":
            if args.seed is not None:
                config = replace(config, env=replace(config.env, demo_seed=args.seed))
            return cmd_gen_demos(config, _out_dir(args))
        if args.command == "train":
            if args.seed is not None:
                config = config.with_seed(args.seed)
            return cmd_train(config, args.demos, _out_dir(args))
        if args.command == "eval":
            if args.seed is not None:
                config = replace(config, eval=replace(config.eval, seed=args.seed))
            return cmd_eval(config, args.checkpoint, _out_dir(args), jobs=args.jobs,
                            expert=args.expert)
        seeds = GRADCHECK_SEEDS if args.seed is None else (args.seed,)
        return cmd_gradcheck(config, seeds)
    except UsageError as exc:
        print(f"visuopool: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractError, TypeError) as exc:
        print(f"visuopool: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FloatingPointError, OSError) as exc:
        print(f"visuopool: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

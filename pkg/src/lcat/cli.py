"""``lcat`` command line: gen-data, train, eval, sweep, audit.

Every failure prints one ``E_CODE: message`` line to stderr and exits
nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .attacks import AttackConfig
from .config import (PROFILES, RunConfig, RunDirectory, load_config_file, profile,
                     resolve_seed, with_preset)
from .data import save_fsb
from .errors import ConfigError, LcatError, RunDirError
from .evaluation import evaluate, pgd_step_sweep
from .models import load_checkpoint
from .training import PRESETS, run_training

DEFAULT_SWEEP_STEPS = "1,5,10,20"


class UsageError(LcatError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _base_config(args) -> RunConfig:
    cfg = profile(args.profile)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, cfg)
    return cfg


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RunDirError(f"{path} exists; pass --force to overwrite", code="E_EXISTS")


def _with_attack(attack: AttackConfig, eps, steps) -> AttackConfig:
    changes = {}
    if eps is not None:
        changes["epsilon"] = eps
    if steps is not None:
        changes["steps"] = steps
    return replace(attack, **changes)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    changes = {k: v for k, v in (("num_classes", args.classes), ("noise_std", args.noise),
                                 ("images_per_class", args.images_per_class)) if v is not None}
    changes["seed"] = resolve_seed(args.seed, cfg.data.seed)
    data = replace(cfg.data, path=None, **changes)
    replace(cfg, data=data)  # split arithmetic against the configured way
    out = Path(args.out)
    _refuse_existing(out, args.force)
    store = data.load()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fsb(store, out)
    print(store.summary())
    print(f"wrote {out}")
    return 0


def train_config(args) -> RunConfig:
    cfg = _base_config(args)
    if args.preset is not None:
        cfg = with_preset(cfg, args.preset)
    sched = {k: v for k, v in (("epochs", args.epochs), ("meta_batches_per_epoch", args.meta_batches),
                               ("batch_size", args.batch_size)) if v is not None}
    cfg = replace(cfg, seed=resolve_seed(args.seed, cfg.seed),
                  schedule=replace(cfg.schedule, **sched),
                  train_attack=_with_attack(cfg.train_attack, args.attack_eps, args.attack_steps))
    if args.lr is not None:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, lr=args.lr))
    if args.data is not None:
        cfg = replace(cfg, data=replace(cfg.data, path=args.data))
    return cfg


def cmd_train(args) -> int:
    cfg = train_config(args)
    run = RunDirectory(args.out)
    with run:
        run.prepare(args.force)
        run.config.write_text(cfg.to_json(), encoding="utf-8")
        store = cfg.data.load()
        result = run_training(
            store, cfg.schedule, cfg.model, cfg.train_attack, seed=cfg.seed, sampler=cfg.sampler,
            optimizer=cfg.optimizer.build(), metrics_path=run.metrics,
            checkpoint_path=run.checkpoint, cycle_checkpoint_dir=run.checkpoints,
            record_wall_time=args.wall_time, checkpoint_extra={"run_config": cfg.to_dict()})
    last = result.log[-1]["mean_loss"] if result.log else float("nan")
    print(f"trained {cfg.schedule.mode} for {cfg.schedule.epochs} epochs: "
          f"adv_batches={result.adv_batches} adv_images={result.stats.images} last_loss={last:.4f}")
    print(f"run directory {run.root}")
    return 0


def _load_target(target: str):
    """Parameters, run config and run directory (or None) of a run dir or checkpoint file."""
    path = Path(target)
    run = None
    if path.is_dir():
        run = RunDirectory(path)
        ckpt = run.checkpoint
    else:
        ckpt = path
    if not ckpt.is_file():
        raise RunDirError(f"no checkpoint at {ckpt}", code="E_NOCKPT")
    params, header = load_checkpoint(ckpt)
    if run is not None:
        cfg = run.read_config()
    elif "run_config" in header.get("extra", {}):
        cfg = RunConfig.from_dict(header["extra"]["run_config"])
    else:
        cfg = RunConfig(model=params.config)
    return params, cfg, run


def _eval_config(cfg: RunConfig, args):
    ev = cfg.eval
    changes = {k: v for k, v in (("episodes", args.episodes), ("query", args.query)) if v is not None}
    ev = replace(ev, seed=resolve_seed(args.seed, ev.seed),
                 attack=_with_attack(ev.attack, args.attack_eps, args.attack_steps), **changes)
    data = cfg.data if args.data is None else replace(cfg.data, path=args.data)
    return ev, data


def _write_output(text: str, out: Path, force: bool) -> None:
    _refuse_existing(out, force)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")


def _emit(text: str, out: Path, run: RunDirectory | None, force: bool) -> None:
    """Write a report, holding the run directory's lock when writing inside one."""
    if run is None:
        _write_output(text, out, force)
        return
    with run:
        _write_output(text, out, force)


def cmd_eval(args) -> int:
    params, cfg, run = _load_target(args.target)
    ev, data = _eval_config(cfg, args)
    report = evaluate(params, data.load(), ev)
    out = Path(args.out) if args.out else (run.reports / f"eval_seed{ev.seed}.json" if run else None)
    print(report.table_line())
    if out is not None:
        _emit(report.to_json(), out, run, args.force)
        print(f"wrote {out}")
    return 0


def _parse_steps(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--steps must be comma-separated integers, got {text!r}") from None
    if not steps:
        raise ConfigError("--steps is empty")
    return steps


def cmd_sweep(args) -> int:
    steps = _parse_steps(args.steps)
    params, cfg, run = _load_target(args.target)
    ev, data = _eval_config(cfg, args)
    result = pgd_step_sweep(params, data.load(), steps, ev)
    text = result.to_csv()
    sys.stdout.write(text)
    out = Path(args.out) if args.out else (run.sweeps / f"sweep_seed{ev.seed}.csv" if run else None)
    if out is not None:
        _emit(text, out, run, args.force)
        print(f"wrote {out}", file=sys.stderr)
    return 0


def _read_log(run: RunDirectory) -> tuple[list[dict], RunConfig]:
    cfg = run.read_config()
    if not run.metrics.exists():
        raise RunDirError(f"{run.root} has no metrics log", code="E_INCOMPLETE")
    lines = run.metrics.read_text(encoding="utf-8").splitlines()
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError:
        raise RunDirError(f"{run.metrics}: corrupt line", code="E_INCOMPLETE") from None
    if [r.get("epoch") for r in records] != list(range(cfg.schedule.epochs)):
        raise RunDirError(f"{run.metrics}: {len(records)} of {cfg.schedule.epochs} epochs logged",
                          code="E_INCOMPLETE")
    return records, cfg


def audit(run_a: RunDirectory, run_b: RunDirectory) -> dict:
    """Adversarial compute of run A relative to run B."""
    (log_a, _), (log_b, _) = _read_log(run_a), _read_log(run_b)
    adv_a = log_a[-1]["adv_batches_cum"] if log_a else 0
    adv_b = log_b[-1]["adv_batches_cum"] if log_b else 0
    if adv_b == 0:
        if adv_a != 0:
            raise ConfigError("run B has no adversarial batches; ratio undefined", code="E_RATIO")
        ratio = 1.0
    else:
        ratio = adv_a / adv_b

    def fraction(log):
        return sum(r["phase"] == "ADV" for r in log) / len(log) if log else 0.0

    return {"adv_batches_A": adv_a, "adv_batches_B": adv_b, "ratio": ratio,
            "adv_epoch_fraction_A": fraction(log_a), "adv_epoch_fraction_B": fraction(log_b)}


def cmd_audit(args) -> int:
    result = audit(RunDirectory(args.run_a), RunDirectory(args.run_b))
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if args.out:
        _write_output(text, Path(args.out), args.force)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lcat", description="Cross adversarial meta-training on few-shot episodes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run config overlaid on the profile")
            p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
        p.add_argument("--seed", type=int, help="seed (default: $LCAT_SEED, then the config)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="write a synthetic FSB1 dataset")
    common(p)
    p.add_argument("--out", default="synthetic.fsb")
    p.add_argument("--classes", type=int)
    p.add_argument("--images-per-class", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model into a run directory")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--epochs", type=int)
    p.add_argument("--meta-batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--attack-eps", type=float, help="training attack budget")
    p.add_argument("--attack-steps", type=int, help="training attack steps")
    p.add_argument("--data", help="FSB1 file instead of the configured synthetic set")
    p.add_argument("--wall-time", action="store_true", help="log epoch wall time (breaks byte-reproducibility)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "clean and robust accuracy of a trained model"),
                                 ("sweep", cmd_sweep, "robust accuracy over PGD step budgets")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("target", help="run directory or checkpoint file")
        p.add_argument("--out", help="output file (default: inside the run directory)")
        p.add_argument("--episodes", type=int)
        p.add_argument("--query", type=int, help="query images per class")
        p.add_argument("--attack-eps", type=float)
        p.add_argument("--attack-steps", type=int)
        p.add_argument("--data")
        if name == "sweep":
            p.add_argument("--steps", default=DEFAULT_SWEEP_STEPS, help="comma-separated budgets")
        p.set_defaults(func=func)

    p = sub.add_parser("audit", help="adversarial compute of run A relative to run B")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except LcatError as exc:
        print(str(exc), file=sys.stderr)
    except OSError as exc:
        print(f"E_IO: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
    return 1


def entry() -> None:
    sys.exit(main())

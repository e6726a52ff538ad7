"""``qjfuse`` command line: train, eval, ablate, entropy-report, trajectory-validate, grad-check.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
Every machine-readable output is written with sorted keys and no timestamps,
so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import SchemaError
from .losses import task_loss, total_loss
from .model import QJFusionModel, Variant
from .training import (ConfigError, RunConfig, TrainingError, ablate, average_drop_rate,
                       load_data, masked_eval, train, with_variant)
from .validation import SYSTEMS, validate_trajectories

log = logging.getLogger("qjfuse")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("train", "eval", "ablate", "entropy-report", "trajectory-validate", "grad-check")
CHECKPOINT_NAME = "model.qjf"

# smallest model that still exercises every parameter group
TINY_CONFIG = {
    "model": {"modalities": {"m1": 3, "m2": 3}, "D": 4, "K": 2, "M": 4, "C": 2, "steps": 3, "dt": 0.2,
              "hidden": 4, "attn_dim": 3, "dropout": 0.0, "init_rate": 2.0},
    "data": {"synthetic": {"n_samples": 20, "noise": 0.3}},
    "batch_size": 4,
}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def markdown_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(cell(r.get(c, "")) for c in columns) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def parse_rates(text: str | None):
    if text is None:
        return None
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --mask-rates {text!r}") from None
    if not rates or any(not 0 <= r <= 1 for r in rates):
        raise ConfigError("mask rates must lie in [0, 1]")
    return rates


def load_config(args, default: dict | None = None) -> RunConfig:
    if args.config is None:
        if default is None:
            raise ConfigError(f"{args.command} requires --config")
        cfg = RunConfig.from_json(copy.deepcopy(default))
    else:
        cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def base_dir(args) -> Path | None:
    return Path(args.config).parent if args.config else None


def load_checkpoint(args, cfg: RunConfig, out: Path):
    path = args.checkpoint or cfg.checkpoint or str(out / CHECKPOINT_NAME)
    p = Path(path)
    if not p.is_absolute() and args.checkpoint is None and cfg.checkpoint is not None and args.config:
        p = Path(args.config).parent / p
    try:
        model, extra = QJFusionModel.load(p)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {p}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad checkpoint {p}: {exc}") from None
    run = copy.deepcopy(cfg)
    run.model = model.cfg
    if args.seed is None and "seed" in extra:
        run.seed = int(extra["seed"])
    return model, run


# ----------------------------------------------------------------- commands


def cmd_train(args, out: Path) -> int:
    cfg = load_config(args)
    if args.variant:
        cfg = with_variant(cfg, args.variant)
    splits = load_data(cfg, base_dir(args))
    t0 = time.perf_counter()
    res = train(cfg, splits, progress=lambda r: log.info("epoch %d valid_task %.4f valid_acc %.4f",
                                                        r["epoch"], r["valid_task"], r["valid_accuracy"]))
    res.model.save(out / CHECKPOINT_NAME, extra={"seed": cfg.seed, "best_epoch": res.best_epoch})
    metrics = {"best_epoch": res.best_epoch, "epochs_run": len(res.history), "seed": cfg.seed,
               "variant": cfg.model.variant, "modalities": list(cfg.model.modalities), "test": res.metrics,
               "curves": res.history}
    write_json(out / "metrics.json", metrics)
    cols = ["epoch", "train_total", "train_task", "train_con", "valid_task", "valid_accuracy"]
    write_csv(out / "curves.csv", res.history, cols)
    test_rows = [{"metric": k, "value": v} for k, v in sorted(res.metrics.items())]
    report = (f"# Training report\n\nvariant `{cfg.model.variant}`, modalities {list(cfg.model.modalities)}, "
              f"seed {cfg.seed}\n\nbest epoch {res.best_epoch} of {len(res.history)} run\n\n## Test metrics\n\n"
              + markdown_table(test_rows, ["metric", "value"])
              + "\n## Curves\n\n" + markdown_table(res.history, cols))
    (out / "report.md").write_text(report)
    print(f"test accuracy {res.metrics['accuracy']:.4f}  best epoch {res.best_epoch}  "
          f"({time.perf_counter() - t0:.1f}s)  -> {out}")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    cfg = load_config(args)
    model, run = load_checkpoint(args, cfg, out)
    rates = parse_rates(args.mask_rates) or list(cfg.mask_rates)
    splits = load_data(run, base_dir(args))
    rows = masked_eval(model, splits["test"], rates, run.mask_seeds, run.seed, run.eval_batch_size)
    metric_names = [k for k in rows[0] if k != "mask_rate"]
    drops = {k: average_drop_rate(rows, k) for k in metric_names}
    write_json(out / "metrics.json", {"rows": rows, "avg_drop_rate": drops, "mask_seeds": run.mask_seeds,
                                      "seed": run.seed})
    cols = ["mask_rate"] + metric_names
    write_csv(out / "eval.csv", rows + [{"mask_rate": "Avg. Drop Rate (%)", **drops}], cols)
    (out / "eval.md").write_text(markdown_table(rows + [{"mask_rate": "Avg. Drop Rate (%)", **drops}], cols))
    for r in rows:
        print(f"rate {r['mask_rate']:.2f}: accuracy {r['accuracy']:.4f}")
    print(f"Avg. Drop Rate (%) accuracy: {drops['accuracy']:.3f}")
    return EXIT_OK


def cmd_ablate(args, out: Path) -> int:
    cfg = load_config(args)
    variants = args.variant.split(",") if args.variant else list(cfg.variants)
    for v in variants:
        with_variant(cfg, v)        # fail fast on unknown names
    splits = load_data(cfg, base_dir(args))
    rows = ablate(cfg, variants, splits,
                  progress=lambda v, r: log.info("%s epoch %d valid_acc %.4f", v, r["epoch"], r["valid_accuracy"]))
    write_json(out / "metrics.json", {"rows": rows, "seed": cfg.seed})
    cols = list(rows[0])
    write_csv(out / "ablate.csv", rows, cols)
    (out / "ablate.md").write_text("# Ablation\n\n" + markdown_table(rows, cols))
    for r in rows:
        print(f"{r['variant']:>16}: accuracy {r['accuracy']:.4f}  jump_fraction {r['jump_fraction']:.4f}")
    return EXIT_OK


def entropy_report(model: QJFusionModel, ds, batch_size: int = 256, bits: bool = False) -> list[dict]:
    """Per-step mean pair entropy, jump rate and accuracy of the head applied at that step."""
    if model.variant in (Variant.DM_CONCAT, Variant.DM_ADD):
        raise ConfigError("entropy-report needs a pair-state model, not a density-matrix variant")
    T = model.cfg.steps
    ent = np.zeros(T + 1)
    jumps = np.zeros(T + 1)
    correct = np.zeros(T + 1)
    n_rows = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        out = model.forward({k: v[idx] for k, v in ds.features.items()}, [ds.ids[i] for i in idx],
                            tag="eval", record_entropy=True, keep_steps=True)
        rec = out.records
        ent += rec.entropy.sum(axis=1)
        jumps[1:] += rec.jumps.sum(axis=1)
        n_rows += rec.branch.shape[1]
        for t, psi in enumerate(out.step_states):
            correct[t] += (model.predict_from_pairs(psi).argmax(axis=1) == ds.labels[idx]).sum()
    scale = 1.0 / math.log(2.0) if bits else 1.0
    return [{"step": t, "mean_entropy": float(ent[t] / n_rows * scale), "mean_jump_rate": float(jumps[t] / n_rows),
             "accuracy": float(correct[t] / len(ds))} for t in range(T + 1)]


def cmd_entropy_report(args, out: Path) -> int:
    cfg = load_config(args)
    model, run = load_checkpoint(args, cfg, out)
    splits = load_data(run, base_dir(args))
    rows = entropy_report(model, splits["test"], run.eval_batch_size, args.entropy_bits)
    name = "entropy_report.csv"
    write_csv(out / name, rows, ["step", "mean_entropy", "mean_jump_rate", "accuracy"])
    unit = "bits" if args.entropy_bits else "nats"
    for r in rows:
        print(f"step {r['step']:3d}: entropy {r['mean_entropy']:.4f} {unit}  jump rate "
              f"{r['mean_jump_rate']:.4f}  accuracy {r['accuracy']:.4f}")
    return EXIT_OK


def cmd_trajectory_validate(args, out: Path) -> int:
    cfg = load_config(args, default={})
    opts = dict(cfg.validate)
    systems = opts.pop("system", list(SYSTEMS))
    systems = [systems] if isinstance(systems, str) else list(systems)
    opts.setdefault("seed", cfg.seed)
    allowed = {"n_traj", "dt", "steps", "gamma", "seed", "substeps"}
    if set(opts) - allowed:
        raise ConfigError(f"unknown validate keys: {sorted(set(opts) - allowed)}")
    ok, summary = True, {}
    for name in systems:
        try:
            rep = validate_trajectories(name, **opts)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print("\n".join(rep.lines()))
        ok &= rep.passed
        summary[name] = {"passed": rep.passed, "max_deviation": rep.max_deviation,
                         "max_exact_deviation": rep.max_exact_deviation, "final": float(rep.trajectory[-1])}
        rows = [{"step": t, "time": float(rep.times[t]), "trajectory": float(rep.trajectory[t]),
                 "stderr": float(rep.stderr[t]), "master": float(rep.master[t]), "exact": float(rep.exact[t])}
                for t in range(rep.steps + 1)]
        write_csv(out / f"trajectory_{name}.csv", rows, list(rows[0]))
    write_json(out / "trajectory_validate.json", summary)
    return EXIT_OK if ok else EXIT_FAIL


def forced_schedule(steps: int, rows: int, channels: int) -> np.ndarray:
    """Fixed branch schedule cycling through the coherent branch and every channel."""
    t = np.arange(steps)[:, None]
    r = np.arange(rows)[None, :]
    return (t + r) % (channels + 1) - 1


def grad_check_model(cfg: RunConfig, tolerance: float = 1e-4, batch: int = 3):
    """End-to-end gradient check of the total loss with frozen branch draws."""
    m = cfg.model
    if m.D > 4 or m.K > 2 or m.steps > 3:
        raise ConfigError("grad-check expects a tiny config (D <= 4, K <= 2, steps <= 3)")
    splits = load_data(cfg)
    ds = splits["train"]
    idx = np.arange(min(batch, len(ds)))
    model = QJFusionModel(m, seed=cfg.seed)
    feats = {k: v[idx] for k, v in ds.features.items()}
    ids = [ds.ids[i] for i in idx]
    forced = forced_schedule(m.steps, len(idx) * m.N, m.K)

    def build():
        out = model.forward(feats, ids, tag="grad", forced=forced)
        task = task_loss(out.prediction.probs, ds.labels[idx])
        return total_loss(task, model.contrastive(out.states), model.params)

    report = ad.grad_check(build, model.params, tolerance=tolerance)
    groups = {g: max(report.errors[n] for n in names) for g, names in model.parameter_groups().items()}
    return report, groups


def cmd_grad_check(args, out: Path) -> int:
    cfg = load_config(args, default=TINY_CONFIG)
    t0 = time.perf_counter()
    report, groups = grad_check_model(cfg)
    lines = [f"{'PASS' if e < report.tolerance else 'FAIL'} group {g}: max rel err {e:.3e}"
             for g, e in groups.items()]
    lines += ["  " + ln for ln in report.lines()]
    lines.append(f"{'PASS' if report.passed else 'FAIL'}: max rel err {report.max_error:.3e} "
                 f"(tolerance {report.tolerance:g}, {time.perf_counter() - t0:.1f}s)")
    print("\n".join(lines))
    write_json(out / "grad_check.json", {"groups": groups, "params": report.errors, "passed": report.passed,
                                         "tolerance": report.tolerance})
    return EXIT_OK if report.passed else EXIT_FAIL


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "entropy-report": cmd_entropy_report,
            "trajectory-validate": cmd_trajectory_validate, "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qjfuse", description="Quantum-jump multimodal fusion toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run config")
    ap.add_argument("--out", default="qjfuse_out", help="output directory (default: qjfuse_out)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--mask-rates", help="comma-separated mask rates for eval, e.g. 0,0.1,0.2")
    ap.add_argument("--variant", help="model variant for train; comma-separated list for ablate")
    ap.add_argument("--entropy-bits", action="store_true", help="report entropies in bits instead of nats")
    ap.add_argument("--checkpoint", help="checkpoint for eval / entropy-report (default: <out>/model.qjf)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def thread_limit():
    n = os.environ.get("QJFUSE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with thread_limit():
            return HANDLERS[args.command](args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ad.NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

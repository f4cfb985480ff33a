"""Command-line entry point: ``trajdistill {buffer|distill|eval|gradcheck|report}``.

Every phase writes under ``--out DIR/<phase>/`` together with the fully
resolved ``config.json``.  Exit codes: 0 success, 2 configuration or input
error, 3 numerical abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import buffer as buf
from . import distill as dst
from . import evaluate as ev
from . import gradcheck as gc
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .datasets import (AugmentationPolicy, LabeledDataset, gen_blobs, load_csv, load_idx,
                       load_synthetic, save_synthetic, split_per_class)
from .nn import ModelSpec

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

logger = logging.getLogger("trajdistill")


class InputError(Exception):
    """Missing or inconsistent artifacts; maps to exit code 2."""


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def build_data(cfg: RunConfig):
    """``(train, test)`` as described by the ``[data]`` section."""
    d = cfg.data
    if d["source"] == "blobs":
        shape = d["shape"][0] if len(d["shape"]) == 1 else tuple(d["shape"])
        data = gen_blobs(d["classes"], d["per_class"], shape, d["spread"], cfg.seed("data"),
                         d["separation"], d["noise"])
        return split_per_class(data, d["test_per_class"], cfg.seed("split"))
    if not d["path"]:
        raise ConfigError("data.path", f"required for source {d['source']!r}")
    shape = tuple(d["shape"]) if len(d["shape"]) > 1 else None
    if d["source"] == "idx":
        train = load_idx(d["path"], d["labels_path"])
        test = load_idx(d["test_path"], d["test_labels_path"]) if d["test_path"] else None
    else:
        train = load_csv(d["path"], shape, d["classes"])
        test = load_csv(d["test_path"], shape, d["classes"]) if d["test_path"] else None
    if test is None:
        return split_per_class(train, d["test_per_class"], cfg.seed("split"))
    return train, test


def build_spec(cfg: RunConfig, data: LabeledDataset) -> ModelSpec:
    m = cfg.model
    try:
        return ModelSpec(m["kind"], m["depth"], m["width"], data.sample_shape, data.class_count,
                         m["norm"])
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None


def smoothness(cfg: RunConfig) -> buf.SmoothnessConfig:
    b = cfg.buffer
    return buf.SmoothnessConfig(enabled=b["smooth"], lambda_start=b["lambda_start"],
                                ramp_epochs=b["ramp_epochs"], mu=b["mu"], k_target=b["k_target"])


def optimizer(cfg: RunConfig) -> buf.OptimizerSettings:
    b = cfg.buffer
    return buf.OptimizerSettings(lr=b["lr"], momentum=b["momentum"], batch_size=b["batch_size"],
                                 halve_lr=b["halve_lr"])


def distill_config(cfg: RunConfig) -> dst.DistillConfig:
    d = cfg.distill
    policy = AugmentationPolicy(flip=d["flip"], shift=d["shift"], scale=d["scale"])
    try:
        return dst.DistillConfig(
            M=d["M"], N=d["N"], T_plus=d["T_plus"], ipc=d["ipc"], beta_mode=d["beta_mode"],
            rho=d["rho"], vartheta=d["vartheta"], alpha0=d["alpha0"],
            outer_iters=d["outer_iters"], lr_images=d["lr_images"], lr_alpha=d["lr_alpha"],
            policy=policy, seed=cfg.seed("distill"), intermediate=d["intermediate"],
            balance=d["balance"], syn_batch=d["syn_batch"])
    except ValueError as exc:
        raise ConfigError("distill", str(exc)) from None


def eval_seeds(cfg: RunConfig) -> list:
    if cfg["eval.n_seeds"] < 1:
        raise ConfigError("eval.n_seeds", "must be >= 1")
    return [cfg.seed("eval", i) for i in range(cfg["eval.n_seeds"])]


def eval_policy(cfg: RunConfig) -> AugmentationPolicy:
    d = cfg.distill
    return AugmentationPolicy(flip=d["flip"], shift=d["shift"], scale=d["scale"])


def _write_rows(path: Path, rows: list) -> None:
    fields: list = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def load_trajectories(directory: Path) -> list:
    dirs = sorted(p for p in directory.glob("expert_*") if p.is_dir())
    if not dirs:
        raise InputError(f"{directory}: no expert trajectories found (run the buffer phase first)")
    trajs = [buf.load_trajectory(p) for p in dirs]
    specs = {t.spec for t in trajs}
    if len(specs) != 1:
        raise InputError(f"{directory}: trajectories disagree on the model spec")
    return trajs


# ---------------------------------------------------------------------------
# commands


def cmd_buffer(cfg: RunConfig, out: Path) -> int:
    train, test = build_data(cfg)
    spec = build_spec(cfg, train)
    n = cfg["buffer.experts"]
    if n < 1:
        raise ConfigError("buffer.experts", "must be >= 1")
    phase = out / "buffer"
    cfg.write(phase)
    seeds = [cfg.seed("buffer", i) for i in range(n)]
    t0 = time.perf_counter()
    trajs = buf.train_experts(train, spec, smoothness(cfg), optimizer(cfg), cfg["buffer.epochs"],
                              seeds, test, threads=cfg.threads)
    rows = []
    for i, traj in enumerate(trajs):
        buf.save_trajectory(traj, phase / f"expert_{i:03d}")
        for m in traj.meta["metrics"]:
            rows.append({"expert": i, **m})
            print(f"expert {i} epoch {m['epoch']:3d} train_acc {m['train_acc']:.3f}"
                  + (f" test_acc {m['test_acc']:.3f}" if "test_acc" in m else ""))
    _write_rows(phase / "buffer_log.csv", rows)
    values = [t.diagnostics.avg_var for t in trajs]
    print(f"avg_var mean {np.mean(values):.6g} per expert {[round(v, 6) for v in values]}"
          f" ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, out: Path) -> int:
    bdir = Path(cfg["distill.buffer_dir"]) if cfg["distill.buffer_dir"] else out / "buffer"
    trajs = load_trajectories(bdir)
    train, test = build_data(cfg)
    if trajs[0].spec != build_spec(cfg, train):
        raise InputError("trajectory model spec differs from the configured model")
    fp = train.fingerprint()
    if any(t.meta.get("dataset") not in (None, fp) for t in trajs):
        raise InputError("trajectories were trained on a different dataset than configured")
    dcfg = distill_config(cfg)
    for t in trajs:
        try:
            dcfg.check_trajectory(t)
        except ValueError as exc:
            raise ConfigError("distill.T_plus", str(exc)) from None
    if cfg["distill.init"] == "representative":
        syn = dst.representative_init(train, trajs[0], dcfg.ipc, cfg.seed("init"), dcfg.alpha0)
    else:
        syn = ev.baseline_random_subset(train, dcfg.ipc, cfg.seed("init"), dcfg.alpha0)
    phase = out / "distill"
    cfg.write(phase)

    evals = {}
    every = cfg["distill.eval_every"]

    def callback(it, current):
        if every and (it + 1) % every == 0:
            rep = ev.evaluate(current, trajs[0].spec, test, eval_seeds(cfg)[:1], cfg["eval.iters"],
                              policy=eval_policy(cfg))
            evals[it] = rep.mean
            print(f"iteration {it + 1} eval_acc {rep.mean:.3f}")

    t0 = time.perf_counter()
    result, log = dst.run_distillation(trajs, syn, dcfg, callback if every else None)
    for row in log:
        if row["iteration"] in evals:
            row["eval_acc"] = evals[row["iteration"]]
    save_synthetic(result, phase, {"ablation": cfg["run.ablate"] or None,
                                   "outer_iters": dcfg.outer_iters})
    _write_rows(phase / "run_log.csv", log)
    losses = [r["loss"] for r in log if not r.get("skipped")]
    if losses:
        print(f"loss first {losses[0]:.4f} last {losses[-1]:.4f} alpha {result.alpha:.5f}"
              f" ({time.perf_counter() - t0:.1f}s)")
    else:
        print(f"no outer iterations; alpha {result.alpha:.5f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    train, test = build_data(cfg)
    spec = build_spec(cfg, train)
    seeds = eval_seeds(cfg)
    target = cfg["eval.target"]
    iters, halve = cfg["eval.iters"], cfg["eval.halve_at"]
    lr = cfg["eval.lr"] or None
    policy = eval_policy(cfg)
    if target == "synthetic":
        sdir = Path(cfg["eval.syn_dir"]) if cfg["eval.syn_dir"] else out / "distill"
        try:
            syn = load_synthetic(sdir)
        except FileNotFoundError as exc:
            raise InputError(str(exc)) from None
        report = ev.evaluate(syn, spec, test, seeds, iters, lr, halve, policy, tag="synthetic")
        artifact = str(sdir)
    elif target == "random":
        accs, diverged = [], []
        for i, s in enumerate(seeds):
            subset = ev.baseline_random_subset(train, cfg["distill.ipc"], cfg.seed("baseline", i),
                                               cfg["distill.alpha0"])
            r = ev.evaluate(subset, spec, test, [s], iters, lr, halve, policy)
            accs += r.accuracies
            diverged += r.diverged
        report = ev.EvalReport(seeds, accs, iters, spec.to_dict(), "random", diverged)
        artifact = "random-subset"
    else:
        report = ev.evaluate(train, spec, test, seeds, iters, lr or cfg["distill.alpha0"], halve,
                             policy, tag="full")
        artifact = "full-data"
    phase = out / "eval" / target
    cfg.write(phase)
    (phase / "report.json").write_text(report.to_json() + "\n")
    (phase / "report.csv").write_text(report.to_csv(artifact))
    print(f"{target}: accuracy {report.mean:.4f} +/- {report.std:.4f} over {len(seeds)} seeds"
          + (f" (diverged seeds {report.diverged})" if report.diverged else ""))
    return EXIT_OK


def cmd_gradcheck(args, out: Path | None) -> int:
    if args.inject_fault:
        with gc.injected_fault(args.inject_fault):
            report = gc.run_suite(meta=not args.quick)
    else:
        report = gc.run_suite(meta=not args.quick)
    lines = report.lines()
    if args.sweep:
        eps = (1e-4, 1e-5, 1e-6)
        lines.append("eps sweep (max first-order rel_err at " + ", ".join(f"{e:.0e}" for e in eps) + ")")
        for name, errs in gc.eps_sweep(eps).items():
            lines.append(f"  {name:<28} " + " ".join(f"{e:.2e}" for e in errs))
    print("\n".join(lines))
    if out is not None:
        (out / "gradcheck").mkdir(parents=True, exist_ok=True)
        (out / "gradcheck" / "report.txt").write_text("\n".join(lines) + "\n")
    if not report.passed:
        worst = max(report.failures(), key=lambda r: r.error)
        print(f"gradcheck failed: max rel_err {worst.error:.3e} in {worst.name}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


REPORT_FIELDS = ["run_id", "phase", "iteration", "metric", "value"]
_NON_METRIC = {"iteration", "epoch", "expert", "seed", "artifact", "tag", "trajectory"}


def _long_rows(run_id: str, run: Path) -> list:
    rows = []
    sources = [("buffer", run / "buffer" / "buffer_log.csv"),
               ("distill", run / "distill" / "run_log.csv")]
    sources += [("eval", p) for p in sorted((run / "eval").glob("*/report.csv"))]
    found = False
    for phase, path in sources:
        if not path.is_file():
            continue
        found = True
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if phase == "buffer":
                    it, prefix = rec["epoch"], f"expert{rec['expert']}/"
                elif phase == "distill":
                    it, prefix = rec["iteration"], ""
                else:
                    it, prefix = rec["seed"], f"{path.parent.name}/"
                for key, val in rec.items():
                    if key in _NON_METRIC or val in ("", None):
                        continue
                    rows.append({"run_id": run_id, "phase": phase, "iteration": int(it),
                                 "metric": prefix + key, "value": float(val)})
    if not found:
        raise InputError(f"{run}: no buffer, distill or eval logs")
    return rows


def cmd_report(runs, out: Path | None) -> int:
    if not runs:
        raise InputError("report needs at least one run directory")
    rows, skipped, used = [], [], set()
    for r in runs:
        run = Path(r)
        run_id = run.resolve().name
        k = 1
        while run_id in used:
            k += 1
            run_id = f"{run.resolve().name}-{k}"
        try:
            rows += _long_rows(run_id, run)
            used.add(run_id)
        except (InputError, OSError, KeyError, ValueError) as exc:
            print(f"warning: skipping {run}: {exc}", file=sys.stderr)
            skipped.append(str(run))
    buf_ = io.StringIO()
    writer = csv.DictWriter(buf_, fieldnames=REPORT_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    if out is None:
        sys.stdout.write(buf_.getvalue())
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(buf_.getvalue())
        print(f"{len(rows)} rows from {len(used)} runs -> {out / 'report.csv'}")
    if skipped:
        print("skipped: " + ", ".join(skipped), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdistill",
        description="Distil a tiny synthetic training set by matching expert trajectories.",
        epilog="Any config key can be overridden with --key value (e.g. --outer-iters 50, "
               "--distill.rho 0).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("buffer", "train expert trajectories"),
                       ("distill", "learn the synthetic set"),
                       ("eval", "train fresh networks on an artifact and report accuracy"),
                       ("gradcheck", "run the finite-difference oracle suite"),
                       ("report", "merge run logs into one long-format CSV")]:
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--out", type=Path, default=None, help="output root directory")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories")
        elif name == "gradcheck":
            p.add_argument("--sweep", action="store_true", help="also report an eps sweep")
            p.add_argument("--quick", action="store_true", help="skip the meta-gradient checks")
            p.add_argument("--inject-fault", metavar="OP", default=None,
                           help="scale OP's derivative by 1.01 (self-test of the checker)")
        else:
            p.add_argument("--config", type=Path, default=None, help="INI or JSON config file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "report":
            if extra:
                raise ConfigError(extra[0], "report takes no config overrides")
            return cmd_report(args.runs, args.out)
        if args.command == "gradcheck":
            if extra:
                raise ConfigError(extra[0], "gradcheck takes no config overrides")
            return cmd_gradcheck(args, args.out)
        cfg = load_config(args.config, parse_overrides(extra))
        out = args.out if args.out is not None else Path("runs")
        command = {"buffer": cmd_buffer, "distill": cmd_distill, "eval": cmd_eval}[args.command]
        return command(cfg, out)
    except (FloatingPointError, dst.DistillationAborted) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

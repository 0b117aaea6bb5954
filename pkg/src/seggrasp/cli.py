"""Command-line entry point.

Every subcommand writes into its run directory: ``config.toml`` (the
effective configuration), metric CSVs, checkpoints where a model is
trained, PNG figures and a plain-text ``summary.txt``.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from .config import (RunConfig, apply_thread_limit, load_config, output_root, save_config,
                     substream)


class CliError(Exception):
    pass


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in columns])
    return path


def _run_dir(args, cfg: RunConfig, name):
    d = Path(args.out) if args.out else output_root(cfg) / f"{name}-seed{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    save_config(d / "config.toml", cfg)
    return d


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.env = cfg.env.replace(seed=args.seed)
        cfg.dagger.seed = args.seed
        cfg.e2e.seed = args.seed
    return cfg


def _summary(d, title, items):
    from .evaluation import summary_block

    text = summary_block(title, items)
    with open(d / "summary.txt", "a") as f:
        f.write(text)
    print(text, end="")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    from .datagen import gen_background, generate_dataset, save_dataset_dir
    from .pnm import write_ppm

    kind = args.kind or ("dr" if args.domain_randomized else "backgrounds" if args.backgrounds
                         else "held-out" if args.held_out else cfg.data.kind)
    n = args.n if args.n is not None else cfg.data.n
    d = _run_dir(args, cfg, f"gen-data-{kind}")
    if kind == "backgrounds":
        bkind = args.background or ("shapes" if cfg.data.background == "mixed" else cfg.data.background)
        lines = []
        for i in range(n):
            s = cfg.seed * 1_000_003 + i
            name = f"bg_{i:05d}.ppm"
            write_ppm(d / name, gen_background(bkind, s, cfg.data.photo_dir or None))
            lines.append(f"{i} {name} - {s}\n")
        with open(d / "manifest.txt", "w") as f:
            f.write(f"# kind backgrounds-{bkind}\n")
            f.writelines(lines)
    else:
        data = generate_dataset(kind, n, cfg.seed, cfg.chain_model(), cfg.env, cfg.data.n_backgrounds,
                                args.background or cfg.data.background, cfg.data.photo_dir or None)
        save_dataset_dir(d, data)
        _summary(d, f"gen-data {kind}", {"samples": n, "sphere pixels": int(data.masks.sum())})
    return d


def _policy(args, cfg, chain):
    from .controller import ControllerNet, ControllerPolicy
    from .evaluation import ZeroPolicy
    from .expert import ExpertPolicy
    from .tensor import load_checkpoint

    name = args.policy
    if name == "expert":
        return ExpertPolicy(chain, max_delta=cfg.env.max_delta)
    if name == "elementary":
        return ExpertPolicy(chain, elementary=True, max_delta=cfg.env.max_delta)
    if name == "zero":
        return ZeroPolicy()
    if name == "controller":
        if not args.checkpoint:
            raise CliError("--policy controller needs --checkpoint")
        if not Path(args.checkpoint).is_file():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        net = ControllerNet(cfg.dagger.variant)
        net.load_parameters(load_checkpoint(args.checkpoint))
        return ControllerPolicy(net, chain, cfg.env)
    raise CliError(f"unknown policy {name!r}")


def cmd_train_controller(args, cfg):
    from .dagger import dagger_run, save_dataset
    from .plots import plot_dagger
    from .tensor import save_checkpoint

    if args.iterations is not None:
        cfg.dagger.iterations = args.iterations
    if args.frames is not None:
        cfg.dagger.frames_per_iter = args.frames
    if args.epochs is not None:
        cfg.dagger.epochs_per_iter = args.epochs
    d = _run_dir(args, cfg, "train-controller")
    chain = cfg.chain_model()
    cols = ["iteration", "frames", "train_loss", "eval_loss", "success_rate"]
    rows = []

    def log(row):
        rows.append(row)
        write_csv(d / "metrics.csv", rows, cols)
        print(f"iter {row['iteration']:3d} frames {row['frames']:6d} loss {row['train_loss']:.5f} "
              f"eval {row['eval_loss']:.5f} success {row['success_rate']}", flush=True)

    res = dagger_run(cfg.dagger, chain, cfg.env, evaluate=not args.no_eval, log=log)
    save_checkpoint(d / "controller.gdnn", res.net.parameters())
    if 1 in res.snapshots:
        save_checkpoint(d / "controller_iter1.gdnn", res.snapshots[1])
    if args.save_dataset:
        save_dataset(d / "dataset.gdag", res.dataset)
    plot_dagger(rows, d / "dagger.png")
    last = rows[-1]
    _summary(d, "train-controller", {"iterations": len(rows), "frames": last["frames"],
                                     "final train loss": last["train_loss"],
                                     "final success": last["success_rate"]})
    return d


def _held_out(cfg, n, seed):
    from .datagen import gen_held_out

    return gen_held_out(n, seed + 10_007, chain=cfg.chain_model(), config=cfg.env)


def cmd_train_vision(args, cfg):
    from .datagen import generate_dataset, load_dataset_dir
    from .plots import plot_vision
    from .tensor import save_checkpoint
    from .vision import VisionNet, train_vision

    v = cfg.vision
    epochs = args.epochs if args.epochs is not None else v.epochs
    d = _run_dir(args, cfg, "train-vision")
    chain = cfg.chain_model()
    if args.dataset:
        data = load_dataset_dir(args.dataset)
    else:
        n = args.n if args.n is not None else cfg.data.n
        data = generate_dataset(args.kind or cfg.data.kind, n, cfg.seed, chain, cfg.env,
                                cfg.data.n_backgrounds, cfg.data.background, cfg.data.photo_dir or None)
    held = _held_out(cfg, args.held_out_n or v.n_held_out, cfg.seed)
    net = VisionNet(v.widths, seed=cfg.seed)
    rows = []
    cols = ["epoch", "loss", "precision", "recall"]

    def log(row):
        rows.append(row)
        write_csv(d / "metrics.csv", rows, cols)
        print(f"epoch {row['epoch']:4d} loss {row['loss']:.5f} precision {row['precision']:.3f} "
              f"recall {row['recall']:.3f}", flush=True)

    train_vision(net, data, held, epochs, v.eval_every, v.batch, v.lr, cfg.seed, log=log)
    save_checkpoint(d / "vision.gdnn", net.parameters())
    plot_vision({data.kind: rows}, d / "vision.png")
    _summary(d, "train-vision", {"train images": len(data), "held-out images": len(held),
                                 "precision": rows[-1]["precision"], "recall": rows[-1]["recall"]})
    return d


def cmd_train_e2e(args, cfg):
    from .dagger import end_to_end_run
    from .plots import plot_e2e
    from .tensor import save_checkpoint

    e = cfg.e2e
    for attr, val in (("iterations", args.iterations), ("frames_per_iter", args.frames),
                      ("epoch_budget", args.epoch_budget)):
        if val is not None:
            setattr(e, attr, val)
    d = _run_dir(args, cfg, f"train-e2e-{args.variant}")
    rows = []
    cols = ["iteration", "frames", "epochs", "train_loss", "seg_loss"]

    def log(row):
        rows.append(row)
        write_csv(d / "metrics.csv", rows, cols)
        print(f"iter {row['iteration']} epochs {row['epochs']} action loss {row['train_loss']:.5f}", flush=True)

    res = end_to_end_run(e, args.variant, cfg.chain_model(), cfg.env, log=log)
    save_checkpoint(d / "vision.gdnn", res.vision.parameters())
    save_checkpoint(d / "controller.gdnn", res.controller.parameters())
    plot_e2e({args.variant: rows}, d / "e2e.png")
    _summary(d, f"train-e2e {args.variant}", {"final action loss": rows[-1]["train_loss"]})
    return d


def cmd_eval(args, cfg):
    from .evaluation import (GridSpec, eval_grid, reality_gap_experiment, recovery_probe)
    from .plots import plot_grid, plot_replay

    mode = "grid" if args.grid else "replay" if args.replay else "recovery" if args.recovery \
        else "vision-compare" if args.vision_compare else None
    if mode is None:
        raise CliError("eval needs one of --grid, --replay, --recovery, --vision-compare")
    d = _run_dir(args, cfg, f"eval-{mode}")
    chain = cfg.chain_model()
    env = cfg.env.replace(contact_noise=args.contact_noise) if args.contact_noise is not None else cfg.env
    rows, cols = args.rows or cfg.dagger.grid[0], args.cols or cfg.dagger.grid[1]
    grid = GridSpec(rows, cols, args.repetitions or cfg.dagger.eval_reps)
    if mode == "grid":
        vision_net = None
        if args.mask_source == "vision-net":
            from .tensor import load_checkpoint
            from .vision import VisionNet

            if not args.vision_checkpoint or not Path(args.vision_checkpoint).is_file():
                raise CliError(f"vision checkpoint not found: {args.vision_checkpoint}")
            vision_net = VisionNet(cfg.vision.widths)
            vision_net.load_parameters(load_checkpoint(args.vision_checkpoint))
        res = eval_grid(_policy(args, cfg, chain), grid, env, chain, args.mask_source, vision_net)
        write_csv(d / "grid.csv", list(res.rows()), ["cell", "x", "y", "repetition", "success", "steps"])
        plot_grid(res, d / "grid.png")
        _summary(d, f"eval grid ({args.policy})", {"trials": res.outcomes.size, "success": res.success_rate})
    elif mode == "replay":
        gap = reality_gap_experiment(chain, env, args.trials, (args.gain_low, args.gain_high), args.latency,
                                     seed=cfg.seed)
        write_csv(d / "replay.csv", [{"trial": i, "deviation": float(v)} for i, v in enumerate(gap.deviations)],
                  ["trial", "deviation"])
        plot_replay(gap, d / "replay.png")
        _summary(d, "eval replay", {"closed nominal": gap.closed_nominal, "closed perturbed": gap.closed_perturbed,
                                    "open nominal": gap.open_nominal, "open perturbed": gap.open_perturbed,
                                    "closed drop": gap.closed_drop, "open drop": gap.open_drop,
                                    "mean deviation (m)": float(gap.deviations.mean())})
    elif mode == "recovery":
        res = recovery_probe(_policy(args, cfg, chain), env, chain, grid, seed=cfg.seed)
        write_csv(d / "recovery.csv", [vars(res) | {"recovery_rate": res.recovery_rate}],
                  ["trials", "displaced", "recovered", "recovery_rate", "mean_extra_steps"])
        _summary(d, f"eval recovery ({args.policy})", {"trials": res.trials, "displaced": res.displaced,
                                                       "recovered": res.recovered,
                                                       "recovery rate": res.recovery_rate,
                                                       "mean extra steps": res.mean_extra_steps})
    else:
        from .evaluation import compare_vision_datasets
        from .plots import plot_vision

        kinds = args.kinds.split(",")
        held = _held_out(cfg, args.held_out_n or cfg.vision.n_held_out, cfg.seed)
        n = args.n if args.n is not None else cfg.data.n
        epochs = args.epochs if args.epochs is not None else cfg.vision.epochs

        def log(kind, hist):
            write_csv(d / f"vision_{kind}.csv", hist, ["epoch", "loss", "precision", "recall"])

        table = compare_vision_datasets(kinds, held, n, epochs, cfg.vision.widths, cfg.seed,
                                        cfg.vision.eval_every, cfg.vision.batch, log, chain, env,
                                        lr=cfg.vision.lr)
        plot_vision(table, d / "vision_compare.png")
        _summary(d, "eval vision-compare", {f"{k} precision/recall": f"{h[-1]['precision']:.3f}/{h[-1]['recall']:.3f}"
                                            for k, h in table.items()})
    return d


def cmd_expert_demo(args, cfg):
    from .expert import ExpertPolicy, run_episode
    from .simenv import format_trace_line

    d = _run_dir(args, cfg, "expert-demo")
    chain = cfg.chain_model()
    rows = []
    for ep in range(args.episodes):
        policy = ExpertPolicy(chain, elementary=args.elementary, max_delta=cfg.env.max_delta)
        e = run_episode(policy, cfg.env, chain, None, ep)
        with open(d / f"trace_{ep:03d}.txt", "w") as f:
            for s, a, ph in zip(e.states, e.actions, e.phases):
                f.write(format_trace_line(s, a, ph) + "\n")
            f.write(format_trace_line(e.states[-1], None, "end") + "\n")
        rows.append({"episode": ep, "success": int(e.success), "steps": e.length})
    write_csv(d / "episodes.csv", rows, ["episode", "success", "steps"])
    _summary(d, "expert-demo", {"episodes": len(rows), "success": sum(r["success"] for r in rows) / len(rows)})
    return d


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="seggrasp", description="Segmentation-interface grasping experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="run directory (default: <output_dir>/<command>-seed<seed>)")

    g = sub.add_parser("gen-data", help="render a vision dataset or background set")
    common(g)
    kind = g.add_mutually_exclusive_group()
    kind.add_argument("--composed", action="store_true")
    kind.add_argument("--domain-randomized", action="store_true")
    kind.add_argument("--backgrounds", action="store_true")
    kind.add_argument("--held-out", action="store_true")
    kind.add_argument("--kind", choices=["composed", "flat", "flat-bg", "dr", "held-out"])
    g.add_argument("--n", type=int)
    g.add_argument("--background", choices=["mixed", "gradient", "noise", "shapes", "photo-dir"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-controller", help="DAGGER training of the mask controller")
    common(t)
    t.add_argument("--iterations", type=int)
    t.add_argument("--frames", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-eval", action="store_true", help="skip grid evaluations")
    t.add_argument("--save-dataset", action="store_true")
    t.set_defaults(func=cmd_train_controller)

    v = sub.add_parser("train-vision", help="train the segmentation net")
    common(v)
    v.add_argument("--dataset", help="manifest or directory written by gen-data")
    v.add_argument("--kind", choices=["composed", "flat", "flat-bg", "dr"])
    v.add_argument("--n", type=int)
    v.add_argument("--epochs", type=int)
    v.add_argument("--held-out-n", type=int)
    v.set_defaults(func=cmd_train_vision)

    e = sub.add_parser("train-e2e", help="end-to-end DAGGER with the vision net in the loop")
    common(e)
    e.add_argument("--variant", default="segmentation-supervised",
                   choices=["segmentation-supervised", "unsupervised-mask", "spatial-softmax-32"])
    e.add_argument("--iterations", type=int)
    e.add_argument("--frames", type=int)
    e.add_argument("--epoch-budget", type=int)
    e.set_defaults(func=cmd_train_e2e)

    ev = sub.add_parser("eval", help="grid, replay, recovery or vision-compare experiments")
    common(ev)
    mode = ev.add_mutually_exclusive_group(required=True)
    for m in ("grid", "replay", "recovery", "vision-compare"):
        mode.add_argument(f"--{m}", action="store_true")
    ev.add_argument("--policy", default="expert", choices=["expert", "elementary", "zero", "controller"])
    ev.add_argument("--checkpoint")
    ev.add_argument("--mask-source", default="ground-truth", choices=["ground-truth", "vision-net"])
    ev.add_argument("--vision-checkpoint")
    ev.add_argument("--rows", type=int)
    ev.add_argument("--cols", type=int)
    ev.add_argument("--repetitions", type=int)
    ev.add_argument("--contact-noise", type=float)
    ev.add_argument("--trials", type=int, default=20)
    ev.add_argument("--gain-low", type=float, default=0.9)
    ev.add_argument("--gain-high", type=float, default=1.1)
    ev.add_argument("--latency", type=int, default=2)
    ev.add_argument("--kinds", default="flat,flat-bg,composed,dr")
    ev.add_argument("--n", type=int)
    ev.add_argument("--epochs", type=int)
    ev.add_argument("--held-out-n", type=int)
    ev.set_defaults(func=cmd_eval)

    x = sub.add_parser("expert-demo", help="record expert episode traces")
    common(x)
    x.add_argument("--episodes", type=int, default=5)
    x.add_argument("--elementary", action="store_true")
    x.set_defaults(func=cmd_expert_demo)
    return p


def main(argv=None) -> int:
    apply_thread_limit()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        start = time.perf_counter()
        d = args.func(args, cfg)
        print(f"wrote {d} ({time.perf_counter() - start:.1f}s)")
        return 0
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

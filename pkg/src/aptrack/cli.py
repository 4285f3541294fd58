"""Command-line entry point: synth, train, track, eval, ablate, gradcheck."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import tensor as T
from .config import dump_config, load_config
from .evalkit import evaluate, precision_success, read_predictions, write_predictions, write_report
from .model import check_gradients
from .synthgen import make_sequence_set, read_dataset, write_dataset
from .tracker import run_sequence, train

GRAD_TOL = 1e-4
TOKEN_SWEEP = (0, 16, 32, 64)

# (name, config overrides, feed x a copy of rgb)
ABLATION_VARIANTS = (
    ("rgb_only", {"ami_layers": ()}, True),
    ("no_ami", {"ami_layers": ()}, False),
    ("gmp_only", {"ami_variant": "gmp_only", "n_tokens": 0}, False),
    ("lt_only", {"ami_variant": "lt_only", "n_tokens": 32}, False),
    ("full", {"n_tokens": 16}, False),
    ("full", {"n_tokens": 32}, False),
    ("full", {"n_tokens": 64}, False),
)

log = logging.getLogger("aptrack")


def list_sequences(root):
    if os.path.exists(os.path.join(root, "groundtruth.txt")):
        return [root]
    subs = sorted(d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "groundtruth.txt")))
    if not subs:
        raise FileNotFoundError(f"no sequences under {root}")
    return [os.path.join(root, d) for d in subs]


def load_sequences(root):
    return [read_dataset(p) for p in list_sequences(root)]


def config_from(args, default_path=None):
    path = args.config or default_path
    cfg = load_config(path, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def save_checkpoint(params, cfg, trace, out):
    os.makedirs(out, exist_ok=True)
    T.save_params(params, os.path.join(out, "weights.aptt"), os.path.join(out, "manifest.txt"))
    dump_config(cfg, os.path.join(out, "config.txt"))
    with open(os.path.join(out, "loss.txt"), "w") as fh:
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(trace))


def load_checkpoint(path):
    return T.load_params(os.path.join(path, "weights.aptt"), os.path.join(path, "manifest.txt"))


# ------------------------------------------------------------------ subcommands

def cmd_synth(args):
    seqs = make_sequence_set(args.n, args.seed or 0, args.frames, args.size, args.blackout)
    for ds in seqs:
        write_dataset(ds, os.path.join(args.out, ds.name))
    print(f"wrote {len(seqs)} sequences to {args.out}")


def cmd_train(args):
    cfg = config_from(args)
    seqs = load_sequences(args.data)
    params, trace = train(seqs, cfg, steps=args.steps)
    save_checkpoint(params, cfg, trace, args.out)
    from .plotting import plot_loss
    plot_loss(trace, os.path.join(args.out, "loss.png"))
    print(f"trained {len(trace)} steps, loss {trace[0]:.4f} -> {np.mean(trace[-50:]):.4f}" if trace
          else "trained 0 steps")


def _track_one(job):
    ckpt, cfg, seq_path, out, want_attn = job
    params = load_checkpoint(ckpt)
    ds = read_dataset(seq_path)
    sink = [] if want_attn else None
    boxes = run_sequence(params, cfg, ds, sink)
    write_predictions(os.path.join(out, f"{ds.name}.txt"), boxes)
    return ds.name, format_attention(ds.name, sink) if want_attn else ""


def format_attention(name, sink):
    lines = []
    for frame, rec in sink:
        for layer, mats in rec:
            for key in ("A", "B_w"):
                m = np.asarray(mats[key]).reshape(-1, mats[key].shape[-1])
                lines.append(f"# seq={name} frame={frame} layer={layer} matrix={key} shape={m.shape[0]}x{m.shape[1]}")
                lines.extend(" ".join(f"{v:.6e}" for v in row) for row in m)
    return "\n".join(lines) + ("\n" if lines else "")


def run_jobs(fn, jobs, n):
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, jobs))


def cmd_track(args):
    cfg = config_from(args, os.path.join(args.ckpt, "config.txt"))
    os.makedirs(args.out, exist_ok=True)
    jobs = [(args.ckpt, cfg, p, args.out, bool(args.dump_attn)) for p in list_sequences(args.data)]
    results = run_jobs(_track_one, jobs, args.jobs)
    if args.dump_attn:
        with open(args.dump_attn, "w") as fh:
            fh.writelines(text for _, text in results)
    print(f"tracked {len(results)} sequences into {args.out}")


def cmd_eval(args):
    preds, conf, gts, gtx, vis = [], [], [], [], []
    for path in list_sequences(args.data):
        ds = read_dataset(path)
        pred_path = os.path.join(args.pred, f"{ds.name}.txt")
        idx, boxes, scores = read_predictions(pred_path)
        if len(idx) != len(ds):
            raise ValueError(f"{pred_path}: {len(idx)} predictions for {len(ds)} frames")
        preds.append(boxes)
        conf.append(scores)
        gts.append(ds.gt)
        gtx.append(ds.gt if ds.gt_x is None else ds.gt_x)
        vis.append(ds.visible)
    rep = evaluate(np.concatenate(preds), np.concatenate(conf), np.concatenate(gts),
                   np.concatenate(vis), np.concatenate(gtx))
    rep.extra = {"frames": int(sum(len(g) for g in gts)), "sequences": len(gts)}
    os.makedirs(args.out, exist_ok=True)
    write_report(rep, os.path.join(args.out, ""))
    from .plotting import plot_curves
    plot_curves(rep, os.path.join(args.out, "curves.png"))
    print("\n".join(rep.lines()))


def ablation_run(job):
    """Train one (variant, seed) cell and score it on the test sequences."""
    name, over, dup, seed, base, train_root, test_root, steps = job
    cfg = base.replace(seed=seed, **over)
    train_set, test_set = load_sequences(train_root), load_sequences(test_root)
    if dup:
        for ds in train_set + test_set:
            ds.x = ds.rgb.copy()
    params, _ = train(train_set, cfg, steps=steps)
    preds, gts, vis = [], [], []
    for ds in test_set:
        preds += [b.as_array() for b in run_sequence(params, cfg, ds)]
        gts.append(ds.gt)
        vis.append(ds.visible)
    rep = precision_success(np.array(preds), np.concatenate(gts), np.concatenate(vis))
    return name, cfg.n_tokens if name not in ("rgb_only", "no_ami") else 0, seed, rep.auc, rep.pr20


def summarize_ablation(rows):
    """Per (variant, tokens): mean and std of AUC and mean Pr@20 over seeds, in variant order."""
    order, groups = [], {}
    for name, tok, _, auc, pr in rows:
        key = (name, tok)
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append((auc, pr))
    out = []
    for key in order:
        v = np.array(groups[key])
        out.append((*key, float(v[:, 0].mean()), float(v[:, 0].std()), float(v[:, 1].mean()), len(v)))
    return out


def cmd_ablate(args):
    base = config_from(args)
    seeds = [base.seed + i for i in range(args.seeds)]
    jobs = [(name, over, dup, s, base, args.train, args.test, args.steps)
            for name, over, dup in ABLATION_VARIANTS for s in seeds]
    rows = run_jobs(ablation_run, jobs, args.jobs)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation_runs.csv"), "w") as fh:
        fh.write("variant,n_tokens,seed,auc,pr20\n")
        fh.writelines(f"{n},{t},{s},{a!r},{p!r}\n" for n, t, s, a, p in rows)
    summary = summarize_ablation(rows)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write("variant,n_tokens,auc_mean,auc_std,pr20_mean,seeds\n")
        fh.writelines(f"{n},{t},{m!r},{sd!r},{p!r},{k}\n" for n, t, m, sd, p, k in summary)
    from .plotting import plot_ablation
    plot_ablation([(f"{n}/{t}", m, sd) for n, t, m, sd, _, _ in summary], os.path.join(args.out, "ablation.png"))
    for n, t, m, sd, p, k in summary:
        print(f"{n:10s} tokens={t:<3d} auc={m:.4f}+-{sd:.4f} pr20={p:.4f} seeds={k}")


def cmd_gradcheck(args):
    cfg = config_from(args)
    err = check_gradients(cfg, seed=cfg.seed, batch=args.batch, max_entries=args.max_entries)
    print(f"max_rel_error: {err!r}")
    print(f"tolerance: {GRAD_TOL!r}")
    return 0 if err < GRAD_TOL else 1


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aptrack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--blackout", action="store_true", help="alternating-modality blackout events")

    s = sub.add_parser("train", parents=[common], help="train a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, help="overrides epochs * samples_per_epoch / batch")

    s = sub.add_parser("track", parents=[common], help="write per-sequence prediction files")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--dump-attn", metavar="FILE", help="write A and B_w per frame")

    s = sub.add_parser("eval", parents=[common], help="score predictions")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", parents=[common], help="AMI component and token-count sweep")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--steps", type=int)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--max-entries", type=int, default=2, help="probes per tensor; 0 means all")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def _failing_module(exc):
    names = [os.path.splitext(os.path.basename(f.filename))[0] for f in traceback.extract_tb(exc.__traceback__)
             if os.path.dirname(os.path.abspath(f.filename)) == os.path.dirname(os.path.abspath(__file__))]
    return names[-1] if names else "cli"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "max_entries", None) == 0:
        args.max_entries = None
    try:
        return COMMANDS[args.command](args) or 0
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"aptrack {args.command}: error in {_failing_module(exc)}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: audit, gen-data, train, eval, plot, ablate."""
import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import DarkAdaptError
from .illuminance import DARK_THRESHOLD, audit_dataset, default_bin_edges, write_audit

log = logging.getLogger("darkadapt")

STAGE_FILES = {"1": "stage1", "2": "stage2", "e2e": "e2e"}


def parse_bins(text):
    """``"0,10,20"`` -> explicit edges; ``"step:5"`` -> 0, 5, ... up to the luma ceiling."""
    if text is None:
        return default_bin_edges()
    if text.startswith("step:"):
        return default_bin_edges(float(text.split(":", 1)[1]))
    return np.array([float(v) for v in text.split(",") if v.strip()])


def _load_bench_config(path):
    from .toybench import BenchConfig

    if path is None:
        return BenchConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    return BenchConfig.from_dict(data.get("bench", data))


def _load_train_config(path):
    from .pipeline import TrainConfig

    return TrainConfig() if path is None else TrainConfig.from_file(path)


def _manifest_hash(root):
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------


def cmd_audit(args):
    from .toybench import load_dataset

    report = audit_dataset(load_dataset(args.data), args.t, parse_bins(args.bins))
    out = Path(args.out or args.data)
    txt, csv_path = write_audit(report, out)
    print(f"{len(report.dark_ids)} dark / {len(report.day_ids)} day clips; wrote {txt} and {csv_path}")


def cmd_gen_data(args):
    from .toybench import generate_dataset

    cfg = _load_bench_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate_dataset(cfg, out=args.out)
    counts = ", ".join(f"{name}={len(clips)}" for name, clips in ds.items())
    print(f"wrote {args.out} ({counts})")


def _prepare_for(args, cfg, ds, backbones=None):
    from .pipeline import prepare

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return prepare(cfg, ds, backbones=backbones, pseudo_cache=out / "pseudo_labels.npz")


def cmd_train(args):
    import torch

    from .pipeline import (load_checkpoint, model_fingerprint, restore_backbones, save_checkpoint,
                           train_end_to_end, train_stage1, train_stage2)
    from .toybench import load_dataset

    torch.set_num_threads(args.threads)
    cfg = _load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    ds = load_dataset(args.data)
    out = Path(args.out)
    name = STAGE_FILES[args.stage]
    resume = load_checkpoint(args.resume) if args.resume else None

    if args.stage == "2":
        src = Path(args.stage1) if args.stage1 else out / "stage1.pt"
        s1 = load_checkpoint(src)
        backbones, _, _ = restore_backbones(s1)
        prep = _prepare_for(args, cfg, ds, backbones)
        s1 = load_checkpoint(src, model_fingerprint(prep.recognizer_config(), cfg.t))
        ckpt = train_stage2(prep, s1, args.epochs, resume, out / f"{name}_log.csv")
    else:
        backbones = restore_backbones(resume)[0] if resume is not None else None
        prep = _prepare_for(args, cfg, ds, backbones)
        fn = train_stage1 if args.stage == "1" else train_end_to_end
        ckpt = fn(prep, args.epochs, resume, out / f"{name}_log.csv")
    path = save_checkpoint(ckpt, out / f"{name}.pt")
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"wrote {path} (epoch {ckpt.epoch}, final loss {last.get('total', float('nan')):.4f})")


def cmd_eval(args):
    import torch

    from .evalkit import build_report, channel_activation_profile, emit_report
    from .experiments import evaluate_visual_baseline
    from .pipeline import Prepared, build_bank, load_checkpoint, predict_bank, restore_backbones
    from .toybench import load_dataset

    torch.set_num_threads(args.threads)
    ckpt = load_checkpoint(args.ckpt)
    backbones, cfg, bench = restore_backbones(ckpt)
    ds = load_dataset(args.data)
    clips = ds[args.split]
    if not clips:
        raise DarkAdaptError(f"split {args.split!r} is empty")
    ml = ds.config.multilabel
    bank = build_bank(backbones, clips, multilabel=ml)
    model = ckpt.build_model()
    logits, beta, _ = predict_bank(model, bank, cfg.t)
    scores = (torch.sigmoid(logits) if ml else torch.softmax(logits, -1)).numpy()
    profile = None
    if args.profile_channels:
        feats = bank.F.mean(dim=1).double().numpy()
        n_ch = min(args.profile_channels, feats.shape[1])
        profile = channel_activation_profile(backbones.visual.encoder, clips, parse_bins(args.profile_bins),
                                             n_ch, seed=args.seed, activations=feats)
    prep = Prepared(cfg, ds.config, backbones, {args.split: bank}, [])
    baseline = evaluate_visual_baseline(prep, args.split)
    report = build_report(
        scores, bank.labels.numpy(), bank.Y.numpy(), parse_bins(args.bins), cfg.t, ml,
        fingerprints={"model": ckpt.fingerprint, "dataset": _manifest_hash(args.data), "stage": ckpt.stage},
        split=args.split, profile=profile,
        extra={"visual_only": {k: baseline[k] for k in ("day", "dark", "gap")},
               "mean_beta_dark": beta[bank.Y <= cfg.t].mean(0).tolist() if bool((bank.Y <= cfg.t).any()) else None})
    emit_report(report, args.out)
    gap = report.day2dark_gap
    print(f"{report.metric}: {report.overall[args.split]['value']:.4f}; day2dark gap "
          f"{'n/a' if gap is None else f'{gap:+.4f}'}; wrote {args.out}")


def cmd_plot(args):
    from .evalkit import load_report, render_plots

    files = render_plots(load_report(args.report), args.report)
    print("wrote " + ", ".join(str(f) for f in files))


def cmd_ablate(args):
    import torch

    from .experiments import ablation, write_table
    from .pipeline import prepare
    from .toybench import load_dataset

    torch.set_num_threads(args.threads)
    cfg = _load_train_config(args.config)
    prep = prepare(cfg, load_dataset(args.data))
    Ks = [int(v) for v in args.K.split(",")]
    lams = [float(v) for v in args.lam.split(",")]
    sizes = [int(v) for v in args.pool_sizes.split(",")] if args.pool_sizes else []
    rows = ablation(prep, Ks, lams, sizes)
    txt, _ = write_table(rows, args.out)
    print(txt.read_text(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="darkadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("audit", help="illuminance audit of a dataset root")
    a.add_argument("--data", required=True)
    a.add_argument("--t", type=float, default=DARK_THRESHOLD)
    a.add_argument("--bins", help='comma-separated edges or "step:<width>"')
    a.add_argument("--out", help="output directory (defaults to the dataset root)")
    a.set_defaults(func=cmd_audit)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--config", help="YAML file with benchmark fields (optionally under a 'bench' key)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=sorted(STAGE_FILES), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage1", help="stage-1 checkpoint for --stage 2 (default <out>/stage1.pt)")
    t.add_argument("--resume", help="checkpoint of the same stage to continue from")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bins", help='comma-separated edges or "step:<width>"')
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--profile-channels", type=int, default=50)
    e.add_argument("--profile-bins", default="0,20,40,60,80,100,120,140")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="re-render plots of an eval report directory")
    pl.add_argument("--report", required=True)
    pl.set_defaults(func=cmd_plot)

    ab = sub.add_parser("ablate", help="K / lambda / pool-size sweeps with a comparison table")
    ab.add_argument("--config")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--K", default="1,3,5,7")
    ab.add_argument("--lam", default="0,0.01,0.03")
    ab.add_argument("--pool-sizes", default="")
    ab.add_argument("--threads", type=int, default=1)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (DarkAdaptError, OSError, ValueError) as exc:
        print(f"darkadapt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

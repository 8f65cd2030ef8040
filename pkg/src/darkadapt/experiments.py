"""Baseline vs method comparisons, component ladder, and K / lambda / pool-size sweeps."""
import csv
import io
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .evalkit import metric_name, partition_metrics
from .pipeline import FeatureBank, build_pseudo_targets, predict_bank, train

log = logging.getLogger(__name__)

LADDER = (
    ("vanilla", dict(K=1, adaptive_encoder=False, adaptive_prompts=False, adaptive_classifier=False,
                     tie_day_branch=True)),
    ("+probe/adaptive encoder", dict(adaptive_encoder=True, adaptive_prompts=False, adaptive_classifier=False,
                                     tie_day_branch=False)),
    ("+adaptive prompts", dict(adaptive_encoder=True, adaptive_prompts=True, adaptive_classifier=False,
                               tie_day_branch=False)),
    ("+adaptive classification", dict(adaptive_encoder=True, adaptive_prompts=True, adaptive_classifier=True,
                                      tie_day_branch=False)),
)


def with_config(prep, **overrides):
    """Copy of ``prep`` with config fields replaced; pseudo-targets are rebuilt only if their mode changes."""
    cfg = replace(prep.config, **overrides).validate()
    new = replace(prep, config=cfg)
    if cfg.raw_targets != prep.config.raw_targets:
        new.pseudo = build_pseudo_targets(prep.pool_clips, raw=cfg.raw_targets, ae_epochs=cfg.ae_epochs,
                                          seed=cfg.seed)
    return new


def subset_pool(prep, n, seed=0):
    """Keep ``n`` pool clips (seeded choice); ``n`` larger than the pool keeps everything."""
    m = len(prep.pool_clips)
    if n >= m:
        return prep
    keep = np.sort(np.random.default_rng(seed).choice(m, size=n, replace=False))
    b = prep.banks["pool"]
    sel = torch.from_numpy(keep)
    bank = FeatureBank([b.ids[i] for i in keep], b.F[sel], b.A[sel], b.Y[sel], None,
                       None if b.frames is None else b.frames[sel], None if b.audio is None else b.audio[sel])
    banks = dict(prep.banks)
    banks["pool"] = bank
    return replace(prep, banks=banks, pool_clips=[prep.pool_clips[i] for i in keep])


def _row(name, scores, bank, t, multilabel, seconds=0.0, **extra):
    labels = bank.labels.numpy()
    day, dark, gap, n_day, n_dark = partition_metrics(scores, labels, bank.Y.numpy(), t, multilabel)
    row = dict(name=name, metric=metric_name(multilabel), day=day, dark=dark, gap=gap, n_day=n_day,
               n_dark=n_dark, seconds=round(seconds, 2))
    row.update(extra)
    return row


def evaluate_visual_baseline(prep, split="test"):
    """Day/dark metric of the frozen visual-only model (its head applied to the cached tokens)."""
    bank = prep.banks[split]
    with torch.no_grad():
        logits = prep.backbones.visual.head(bank.F.mean(dim=1))
    scores = (torch.sigmoid(logits) if prep.multilabel else torch.softmax(logits, -1)).numpy()
    return _row("visual-only", scores, bank, prep.config.t, prep.multilabel)


def evaluate_checkpoint(prep, ckpt, name, split="test", seconds=0.0, **extra):
    model = ckpt.build_model()
    logits, _, _ = predict_bank(model, prep.banks[split], prep.config.t)
    scores = (torch.sigmoid(logits) if prep.multilabel else torch.softmax(logits, -1)).numpy()
    return _row(name, scores, prep.banks[split], prep.config.t, prep.multilabel, seconds, **extra)


def run_method(prep, name="method", **overrides):
    p = with_config(prep, **overrides) if overrides else prep
    t0 = time.perf_counter()
    ckpt = train(p)
    row = evaluate_checkpoint(p, ckpt, name, seconds=time.perf_counter() - t0, **overrides)
    log.info("%s: day %s dark %s", name, row["day"], row["dark"])
    return row


def ladder(prep):
    return [run_method(prep, name, **over) for name, over in LADDER]


def sweep_K(prep, Ks=(1, 3, 5, 7)):
    return [run_method(prep, f"K={k}", K=k) for k in Ks]


def sweep_lambda(prep, lams=(0.0, 0.01, 0.03)):
    return [run_method(prep, f"lambda={lam:g}", lam=lam) for lam in lams]


def sweep_pool_size(prep, sizes):
    rows = []
    for n in sizes:
        p = subset_pool(prep, n, seed=prep.config.seed)
        row = run_method(p, f"pool={len(p.pool_clips)}")
        row["pool_size"] = len(p.pool_clips)
        rows.append(row)
    return rows


def ablation(prep, Ks=(1, 3, 5, 7), lams=(0.0, 0.01, 0.03), pool_sizes=()):
    """Visual-only baseline plus the K and lambda sweeps (and optionally pool sizes)."""
    rows = [evaluate_visual_baseline(prep)]
    rows += sweep_K(prep, Ks)
    rows += sweep_lambda(prep, lams)
    if pool_sizes:
        rows += sweep_pool_size(prep, pool_sizes)
    return rows


TABLE_COLUMNS = ("name", "metric", "day", "dark", "gap", "n_day", "n_dark", "seconds")


def _cell(v):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def comparison_table(rows, columns=TABLE_COLUMNS):
    """Fixed-width text table."""
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def table_csv(rows, columns=TABLE_COLUMNS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])
    return buf.getvalue()


def write_table(rows, out_dir, stem="ablation"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(comparison_table(rows))
    (out / f"{stem}.csv").write_text(table_csv(rows))
    return out / f"{stem}.txt", out / f"{stem}.csv"

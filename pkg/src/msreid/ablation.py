"""Component ablation grid (prototypes / prompt alignment / adapters) and result tables."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from .evaluation import evaluate_model, write_metrics
from .trainer import ComponentFlags, Trainer

logger = logging.getLogger(__name__)

# row -> (sic, al, adapter)
ABLATION_ROWS = {
    "a": (False, False, False),
    "b": (True, False, False),
    "c": (True, True, False),
    "d": (False, False, True),
    "e": (True, False, True),
    "f": (True, True, True),
}
ROW_BY_FLAGS = {v: k for k, v in ABLATION_ROWS.items()}
METRIC_COLUMNS = ("mAP", "rank-1", "rank-5", "rank-10")


def row_config(cfg, row, seed):
    sic, al, adapter = ABLATION_ROWS[row]
    out = copy.deepcopy(cfg)
    out.components = ComponentFlags(sic=sic, al=al, adapter=adapter)
    out.seed = seed
    out.data.seed = cfg.data.seed if cfg.data.seed is not None else cfg.seed
    return out


def run_one(cfg, dataset, train_images=None, out_dir=None):
    """Train one configuration and evaluate it on the dataset's query/gallery splits."""
    train_ds = dataset.split("train")
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.unlink(missing_ok=True)
    trainer = Trainer(cfg, train_ds, images=train_images, metrics_path=metrics_path)
    trainer.fit(checkpoint_dir=None if out_dir is None else out_dir / "checkpoints")
    ev = cfg.eval
    metrics = evaluate_model(trainer.model, dataset, cfg.data.resolved_size, ev.protocol, ev.same_camera,
                             ev.query_in_gallery)
    metrics.update(flags=dict(zip(("sic", "al", "adapter"), cfg.components.key())), seed=cfg.seed,
                   final_loss=trainer.history[-1]["total"] if trainer.history else None)
    if out_dir is not None:
        write_metrics(metrics, out_dir / "eval_metrics.json", out_dir / "cmc.csv")
    return metrics


def run_ablation(cfg, dataset, rows=tuple(ABLATION_ROWS), seeds=(0, 1, 2), out_dir=None):
    train_images = dataset.split("train").load_images(cfg.data.resolved_size)
    results = []
    for row in rows:
        for seed in seeds:
            rc = row_config(cfg, row, seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"row_{row}_seed{seed}"
            m = run_one(rc, dataset, train_images, run_dir)
            m["row"] = row
            logger.info("row %s seed %s: mAP %.4f rank-1 %.4f", row, seed, m["mAP"], m["rank-1"])
            results.append(m)
    return results


def _flags_key(metrics):
    f = metrics.get("flags", {})
    return (bool(f.get("sic")), bool(f.get("al")), bool(f.get("adapter")))


def aggregate(metrics_list):
    """Group runs by flag combination; per metric report mean, min, max and run count."""
    groups = {}
    for m in metrics_list:
        groups.setdefault(_flags_key(m), []).append(m)
    order = sorted(groups, key=lambda k: (ROW_BY_FLAGS.get(k, "z"), k))
    table = []
    for key in order:
        runs = groups[key]
        row = {"row": ROW_BY_FLAGS.get(key, "-"), "sic": key[0], "al": key[1], "adapter": key[2], "runs": len(runs)}
        for col in METRIC_COLUMNS:
            vals = np.array([r[col] for r in runs], dtype=np.float64)
            row[col] = float(vals.mean())
            row[col + "_min"] = float(vals.min())
            row[col + "_max"] = float(vals.max())
            row[col + "_median"] = float(np.median(vals))
        table.append(row)
    return table


def format_table(table):
    mark = {True: "yes", False: "-"}
    lines = [f"{'row':<4}{'SIC':<5}{'AL':<5}{'MS-A':<6}{'n':>3}  " + "  ".join(f"{c:>17}" for c in METRIC_COLUMNS)]
    for r in table:
        cells = []
        for c in METRIC_COLUMNS:
            half = (r[c + "_max"] - r[c + "_min"]) / 2
            cells.append(f"{100 * r[c]:>9.1f} ± {100 * half:<5.1f}")
        lines.append(f"({r['row']}) {mark[r['sic']]:<5}{mark[r['al']]:<5}{mark[r['adapter']]:<6}{r['runs']:>3}  "
                     + "  ".join(cells))
    return "\n".join(lines)


def table_csv(table):
    buf = io.StringIO()
    cols = ["row", "sic", "al", "adapter", "runs"] + [f"{c}{s}" for c in METRIC_COLUMNS
                                                      for s in ("", "_median", "_min", "_max")]
    writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore")
    writer.writeheader()
    writer.writerows(table)
    return buf.getvalue()


def load_metrics(paths):
    return [json.loads(Path(p).read_text(encoding="utf-8")) for p in paths]

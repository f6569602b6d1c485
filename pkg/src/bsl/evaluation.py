"""Detection metrics, restoration statistics, robustness sweeps and ablations."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .datasets import ArrayDataset, apply_degradation
from .models import decode_coords, to_tensor
from .shuffle import ShuffleConfig, image_stream, shuffle_image

__all__ = [
    "UndefinedMetricError",
    "MetricReport",
    "RestorationHistogram",
    "auc",
    "accuracy",
    "roc_points",
    "predict_scores",
    "evaluate",
    "chebyshev_histogram",
    "restoration_histogram",
    "robustness_sweep",
    "ABLATION_ROWS",
    "ablation_configs",
    "ablation_grid",
    "write_reports",
]


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank sum; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean((scores >= threshold).astype(int) == labels))


def roc_points(scores, labels):
    """(fpr, tpr, threshold) triples, one per distinct score, descending threshold."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = max(y.sum(), 1), max((~y).sum(), 1)
    return [(float(f / n_neg), float(t / n_pos), float(th))
            for f, t, th in zip(fps, tps, s[last])]


@dataclass
class MetricReport:
    acc: float
    auc: float
    n: int
    tag: str = "clean"
    curve: list = field(default_factory=list, repr=False)

    def row(self):
        return {"tag": self.tag, "acc": self.acc, "auc": self.auc, "n": self.n}


@dataclass
class RestorationHistogram:
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def fractions(self):
        return self.counts / max(self.total, 1)

    @property
    def within_one(self):
        return float(self.fractions[:2].sum())

    def to_dict(self):
        return {"counts": self.counts.tolist(), "fractions": self.fractions.tolist(),
                "within_one": self.within_one}


@torch.no_grad()
def predict_scores(model, images, batch_size=256):
    """Fake-class probabilities of the classifier alone on unshuffled images."""
    was_training = model.training
    model.eval()
    net = model.backbone if hasattr(model, "backbone") else model
    out = []
    for i in range(0, len(images), batch_size):
        logits = net(to_tensor(images[i:i + batch_size]))[0]
        out.append(torch.sigmoid(logits.reshape(len(logits), -1)[:, -1]).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, data, tag="clean", threshold=0.5, batch_size=256):
    scores = predict_scores(model, data.images, batch_size)
    return MetricReport(accuracy(scores, data.labels, threshold), auc(scores, data.labels),
                        len(data), tag, roc_points(scores, data.labels))


def chebyshev_histogram(pred_maps, true_maps):
    """Histogram of max(|drow|, |dcol|) between integer (..., m, n, 2) maps."""
    d = np.abs(np.asarray(pred_maps) - np.asarray(true_maps)).max(axis=-1).ravel()
    return RestorationHistogram(np.bincount(d))


@torch.no_grad()
def restoration_histogram(model, images, cfg=ShuffleConfig(), seed=0, batch_size=128):
    """Shuffle each image, predict tile origins and histogram the errors.

    ``model`` is a :class:`~bsl.models.BSLModel` or any callable
    ``(shuffled_images, outcomes) -> coords`` with coords shaped
    (B, 2, m_b, n_b).
    """
    if hasattr(model, "rest_head"):
        if model.rest_head is None:
            raise NotImplementedError("model has no restoration head")
        was_training = model.training
        model.eval()

        def predict(batch, _outcomes):
            return model(to_tensor(batch))["coords"]
    elif callable(model):
        predict, was_training = model, None
    else:
        raise NotImplementedError("model has no restoration head")
    preds, truths = [], []
    for i in range(0, len(images), batch_size):
        outs = [shuffle_image(im, cfg, image_stream(seed, i + k))
                for k, im in enumerate(images[i:i + batch_size])]
        coords = predict(np.stack([o.image for o in outs]), outs)
        preds.append(decode_coords(coords))
        truths.append(np.stack([o.coords.beta for o in outs]))
    if was_training is not None:
        model.train(was_training)
    return chebyshev_histogram(np.concatenate(preds), np.concatenate(truths))


def robustness_sweep(model, data, degradations=(), threshold=0.5):
    """Clean report first, then one report per degradation."""
    reports = [evaluate(model, data, "clean", threshold)]
    for d in degradations:
        if isinstance(d, str):
            from .datasets import parse_degradation
            d = parse_degradation(d)
        degraded = ArrayDataset(np.stack([apply_degradation(im, d) for im in data.images]),
                                data.labels)
        reports.append(evaluate(model, degraded, d.tag, threshold))
    return reports


# (name, intra, adv, inter, restore)
ABLATION_ROWS = (
    ("baseline", False, False, False, False),
    ("+intra", True, False, False, False),
    ("+intra+adv", True, True, False, False),
    ("+intra+adv+inter", True, True, True, False),
    ("full", True, True, True, True),
)


def ablation_configs(base):
    """The five module-toggle configs derived from ``base``.

    Disabled intra shuffling sets ``q_range = (0, 0)``; disabled inter
    shuffling sets ``p_inter = 0``; a disabled head gets weight 0.
    """
    rows = []
    for name, intra, adv, inter, restore in ABLATION_ROWS:
        sh = replace(base.shuffle,
                     q_range=base.shuffle.q_range if intra else (0.0, 0.0),
                     p_inter=base.shuffle.p_inter if inter else 0.0)
        w = replace(base.weights, alpha=base.weights.alpha if adv else 0.0,
                    beta=base.weights.beta if restore else 0.0)
        rows.append((name, replace(base, shuffle=sh, weights=w)))
    return rows


def ablation_grid(base, train_data, test_data, degradations=(), run_dir=None):
    """Train each ablation row and evaluate it; returns a list of row dicts.

    Rows that train the restoration head also report the fraction of test
    tiles restored within Chebyshev distance 1 (``None`` otherwise).
    """
    from .training import Trainer

    table = []
    for name, cfg in ablation_configs(base):
        sub = Path(run_dir) / name.replace("+", "plus_") if run_dir else None
        trainer = Trainer(cfg, train_data, run_dir=sub)
        trainer.train()
        reports = robustness_sweep(trainer.model, test_data, degradations)
        row = {"row": name, "alpha": cfg.weights.alpha, "beta": cfg.weights.beta,
               "q_range": list(cfg.shuffle.q_range), "p_inter": cfg.shuffle.p_inter}
        for r in reports:
            row[f"acc[{r.tag}]"] = r.acc
            row[f"auc[{r.tag}]"] = r.auc
        row["restore<=1"] = (restoration_histogram(trainer.model, test_data.images, cfg.shuffle,
                                                   seed=cfg.seed).within_one
                             if cfg.weights.beta > 0 else None)
        table.append(row)
    if run_dir:
        write_reports(table, Path(run_dir) / "ablation")
    return table


def write_reports(rows, stem):
    """Write a list of dicts (or MetricReports) as ``stem.csv`` and ``stem.json``."""
    rows = [r.row() if isinstance(r, MetricReport) else r for r in rows]
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    if rows:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            w.writerows({k: (json.dumps(v) if isinstance(v, list) else v) for k, v in r.items()}
                        for r in rows)
    return stem

"""MSA and MER evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import mean_absolute_error

MSA_COLUMNS = ("acc7", "acc2", "f1", "mae", "corr")


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        out = {"task": self.task, **self.values}
        if self.per_class:
            out["per_class"] = self.per_class
        if self.flags:
            out["flags"] = list(self.flags)
        return out

    def table(self, label: str = "") -> str:
        """Aligned text row(s) in the layout of the MSA / MER comparison tables."""
        if self.task == "msa":
            head = f"{'':<16s}" + "".join(f"{c.upper():>9s}" for c in MSA_COLUMNS)
            row = f"{label:<16s}" + "".join(_fmt(self.values[c], c) for c in MSA_COLUMNS)
            return head + "\n" + row
        names = list(self.per_class)
        head = f"{'':<16s}" + "".join(f"{n + ' Acc':>12s}{n + ' F1':>12s}" for n in [*names, "Average"])
        cells = [(self.per_class[n]["acc"], self.per_class[n]["f1"]) for n in names]
        cells.append((self.values["acc_avg"], self.values["f1_avg"]))
        row = f"{label:<16s}" + "".join(f"{100 * a:12.2f}{100 * f:12.2f}" for a, f in cells)
        return head + "\n" + row


def _fmt(v: float, col: str) -> str:
    if col in ("acc7", "acc2", "f1"):
        return f"{100 * v:9.2f}"
    return f"{v:9.4f}"


def _binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    tp = np.sum(pred_pos & true_pos)
    fp = np.sum(pred_pos & ~true_pos)
    fn = np.sum(~pred_pos & true_pos)
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def _weighted_f1(pred_pos, true_pos) -> float:
    support_pos = true_pos.sum()
    support_neg = (~true_pos).sum()
    total = support_pos + support_neg
    return float((support_pos * _binary_f1(pred_pos, true_pos)
                  + support_neg * _binary_f1(~pred_pos, ~true_pos)) / total) if total else 0.0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else float("nan")


def seven_class(values: np.ndarray, ceil: bool = False) -> np.ndarray:
    return np.clip(np.ceil(values) if ceil else np.round(values), -3, 3)


def metrics_msa(pred, truth, include_zero: bool = False, acc7_ceil: bool = False,
                f1_average: str = "binary") -> MetricReport:
    """MAE, Pearson Corr, Acc2 / F1 on sign, Acc7 after rounding and clamping.

    Acc2 and F1 skip samples whose true label is exactly 0 unless
    ``include_zero`` is set, in which case 0 counts as negative.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"{pred.shape[0]} predictions for {truth.shape[0]} labels")
    if pred.size == 0:
        raise ValueError("no samples")
    flags = []
    corr = pearson(pred, truth) if pred.size >= 2 else float("nan")
    if np.isnan(corr):
        flags.append("corr_undefined")
    keep = np.ones_like(truth, dtype=bool) if include_zero else truth != 0
    pred_pos, true_pos = pred[keep] > 0, truth[keep] > 0
    if keep.any():
        acc2 = float(np.mean(pred_pos == true_pos))
        f1 = _binary_f1(pred_pos, true_pos) if f1_average == "binary" else _weighted_f1(pred_pos, true_pos)
    else:
        acc2 = f1 = float("nan")
        flags.append("acc2_no_nonzero_labels")
    acc7 = float(np.mean(seven_class(pred, acc7_ceil) == seven_class(truth)))
    return MetricReport(
        task="msa",
        values={"mae": float(mean_absolute_error(pred, truth)), "corr": corr,
                "acc2": acc2, "f1": f1, "acc7": acc7},
        flags=flags,
    )


def metrics_mer(logits, truth, num_classes: int, class_names=None) -> MetricReport:
    """One-vs-rest accuracy and F1 per class from argmax predictions, plus unweighted means."""
    logits = np.asarray(logits, dtype=np.float64)
    truth = np.asarray(truth).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape != (truth.size, num_classes):
        raise ValueError(f"logits shape {logits.shape} does not match ({truth.size}, {num_classes})")
    if truth.size and (truth.min() < 0 or truth.max() >= num_classes):
        raise ValueError(f"class index outside [0, {num_classes})")
    names = list(class_names) if class_names else [f"class{c}" for c in range(num_classes)]
    pred = logits.argmax(axis=1)
    per_class, flags = {}, []
    for c, name in enumerate(names):
        p, t = pred == c, truth == c
        if not t.any():
            f1 = 0.0
            flags.append(f"absent_class:{name}")
        else:
            f1 = _binary_f1(p, t)
        per_class[name] = {"acc": float(np.mean(p == t)), "f1": f1}
    return MetricReport(
        task="mer",
        values={
            "acc_avg": float(np.mean([v["acc"] for v in per_class.values()])),
            "f1_avg": float(np.mean([v["f1"] for v in per_class.values()])),
            "accuracy": float(np.mean(pred == truth)),
        },
        per_class=per_class,
        flags=flags,
    )

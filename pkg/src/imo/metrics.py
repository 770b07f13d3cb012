"""Segmentation and grading metrics."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

CLASS_NAMES = ("unlabel", "disc", "cup")


def dice_score(pred, true, k):
    """``2|P∩T| / (|P| + |T|)`` for class ``k``; 1.0 when both sets are empty."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"dice_score: {pred.shape} vs {true.shape}")
    p, t = pred == k, true == k
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def segmentation_dice(preds, trues, n_classes=3):
    """Per-class Dice averaged over images, as an array ``[n_classes]``."""
    if len(preds) != len(trues) or len(preds) == 0:
        raise ValidationError("need equally many (>0) predicted and true masks")
    scores = np.array([[dice_score(p, t, k) for k in range(n_classes)]
                       for p, t in zip(preds, trues)])
    return scores.mean(axis=0)


def confusion_matrix(preds, labels, n_classes=3):
    """``cm[true, pred]`` counts."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def classification_metrics(preds, labels, n_classes=3):
    """Macro precision/recall/F1 and accuracy; a 0/0 ratio counts as 0."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValidationError("classification_metrics needs at least one sample")
    if preds.shape != labels.shape:
        raise ShapeError(f"preds {preds.shape} vs labels {labels.shape}")
    if np.any((labels < 0) | (labels >= n_classes)) or np.any((preds < 0) | (preds >= n_classes)):
        raise ValidationError(f"labels must lie in 0..{n_classes - 1}")
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(n_classes), where=true_pos > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)
    return {
        "precision": float(precision.mean()),
        "accuracy": float(tp.sum() / cm.sum()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "confusion": cm,
    }


@dataclass
class MetricsReport:
    dice: tuple = None  # (unlabel, disc, cup), None when segmentation is off
    mdice: float = None
    precision: float = None
    accuracy: float = None
    recall: float = None
    f1: float = None
    confusion: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, pred_masks=None, true_masks=None, pred_grades=None, true_grades=None):
        r = cls()
        if pred_masks is not None:
            d = segmentation_dice(pred_masks, true_masks)
            r.dice = tuple(float(v) for v in d)
            r.mdice = float(np.mean(d))
        if pred_grades is not None:
            m = classification_metrics(pred_grades, true_grades)
            r.precision, r.accuracy, r.recall, r.f1 = m["precision"], m["accuracy"], m["recall"], m["f1"]
            r.confusion = m["confusion"]
        return r

    def items(self):
        out = []
        if self.dice is not None:
            out += [(f"dice_{n}", self.dice[i]) for i, n in enumerate(CLASS_NAMES)]
            out.append(("mdice", self.mdice))
        if self.precision is not None:
            out += [("precision", self.precision), ("accuracy", self.accuracy),
                    ("recall", self.recall), ("f1", self.f1)]
            out.append(("confusion", ";".join(",".join(str(v) for v in row) for row in self.confusion)))
        return out

    def to_text(self):
        return "".join(f"{k}={v:.6f}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in self.items())

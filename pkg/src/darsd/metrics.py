import numpy as np

from .autodiff import ContractError


def confusion_matrix(pred, truth, n_c: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(pred, dtype=np.intp)
    truth = np.asarray(truth, dtype=np.intp)
    if pred.shape != truth.shape:
        raise ContractError(f"length mismatch: {pred.shape[0]} predictions vs {truth.shape[0]} labels")
    for name, arr in (("prediction", pred), ("label", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_c):
            raise ContractError(f"{name} out of range [0, {n_c})")
    cm = np.zeros((n_c, n_c), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_f1(pred, truth, n_c: int) -> np.ndarray:
    """F1 per class; a class with no true and no predicted samples scores 0."""
    cm = confusion_matrix(pred, truth, n_c)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    out = np.zeros(n_c)
    np.divide(2 * tp, denom, out=out, where=denom > 0)
    return out


def macro_f1(pred, truth, n_c: int) -> float:
    return float(per_class_f1(pred, truth, n_c).mean())


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError("length mismatch")
    return float((pred == truth).mean()) if pred.size else 0.0

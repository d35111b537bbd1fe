"""Measurements on trained models: accuracy, head counts, attention profiles, interpolation, consistency, shifts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .abft import batch_head_scores, induction_threshold
from .data import DataError, build_icl_sample, build_unseen_label_sample
from .model import TransformerModel, forward_batch, pad_batch, predict_batch
from .tensor import ContractError


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


# --- accuracy ------------------------------------------------------------------


def eval_accuracy(model: TransformerModel, test_set, label_tokens) -> float:
    if not test_set:
        return float("nan")
    preds = predict_batch(model, test_set, label_tokens)
    return float(np.mean(preds == np.array([s.query_label for s in test_set])))


def eval_ood(model_before: TransformerModel, model_after: TransformerModel, other_task_sets: dict) -> dict:
    """``other_task_sets`` maps a task name to ``(samples, label_tokens)``."""
    return {
        name: (eval_accuracy(model_before, samples, labels), eval_accuracy(model_after, samples, labels))
        for name, (samples, labels) in other_task_sets.items()
    }


# --- induction heads and attention profiles ------------------------------------


def _captured_batches(model, samples, batch_size=64):
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            tokens, lengths = pad_batch([s.token_ids for s in chunk])
            yield chunk, forward_batch(model, tokens, lengths, capture=True)


def head_scores(model: TransformerModel, samples, batch_size: int = 64) -> np.ndarray:
    """(N, n_layers, n_heads) attention mass on I at each sample's prediction slot."""
    parts = [batch_head_scores(out.alphas, chunk) for chunk, out in _captured_batches(model, samples, batch_size)]
    return np.concatenate(parts)


def induction_counts(model: TransformerModel, samples, log_base="e") -> np.ndarray:
    scores = head_scores(model, samples)
    thr = np.array([induction_threshold(len(s.I), s.n_t, log_base) for s in samples])
    return (scores > thr[:, None, None]).sum(axis=(1, 2))


def count_induction_heads(model: TransformerModel, batch, log_base="e") -> float:
    return float(induction_counts(model, batch, log_base).mean())


@dataclass
class LayerAttentionProfile:
    S: np.ndarray  # per layer
    S_plus: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return np.divide(self.S_plus, self.S, out=np.zeros_like(self.S), where=self.S > 0)

    def rows(self):
        return [(layer, s, sp) for layer, (s, sp) in enumerate(zip(self.S, self.S_plus))]


def layer_profile(model: TransformerModel, validation_set) -> LayerAttentionProfile:
    """Per-layer mean attention mass on all label positions and on the correct ones."""
    if not validation_set:
        raise DataError("empty validation set")
    if any(len(s.I) == 0 for s in validation_set):
        raise DataError("layer profile needs samples with at least one demonstration")
    L = model.config.n_layers
    S_sum, P_sum = np.zeros(L), np.zeros(L)
    for chunk, out in _captured_batches(model, validation_set):
        for layer, a in enumerate(out.alphas):
            A = a.data.astype(np.float64)
            for b, s in enumerate(chunk):
                S_sum[layer] += A[b][:, list(s.I)].sum(axis=-1).mean()
                P_sum[layer] += A[b][:, list(s.I_plus)].sum(axis=-1).mean() if s.I_plus else 0.0
    n = len(validation_set)
    return LayerAttentionProfile(S_sum / n, P_sum / n)


def attention_heatmap(model: TransformerModel, sample) -> np.ndarray:
    """(n_layers * n_heads, n_t) last-row attention, one row per head."""
    with T.no_grad():
        out = forward_batch(model, sample.token_ids[None, :], capture=True)
    return np.concatenate([a.data[0] for a in out.alphas]).astype(np.float64)


def write_pgm(path, image: np.ndarray, scale: int = 8) -> None:
    """Grayscale image; each row is normalized to its own maximum and cells are upscaled."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    peak = img.max(axis=1, keepdims=True)
    img = np.divide(img, peak, out=np.zeros_like(img), where=peak > 0)
    pix = np.round(255 * img).astype(np.uint8)
    pix = np.kron(pix, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(pix, mode="L").save(path, format="PPM")


# --- linear connectivity ---------------------------------------------------------


def _state(x):
    return x.state() if isinstance(x, TransformerModel) else {k: np.asarray(v) for k, v in x.items()}


def interpolate_models(theta0, thetaE, thetaA, alphaE: float, alphaA: float):
    """theta0 + alphaE*(thetaE - theta0) + alphaA*(thetaA - theta0), evaluated as a weighted sum in float64.

    Accepts models or state dicts and returns the same kind as ``theta0``.
    """
    s0, sE, sA = _state(theta0), _state(thetaE), _state(thetaA)
    if not (s0.keys() == sE.keys() == sA.keys()):
        raise ContractError("parameter sets name different tensors")
    w0 = 1.0 - alphaE - alphaA
    mixed = {}
    for k, a0 in s0.items():
        if not (a0.shape == sE[k].shape == sA[k].shape):
            raise ContractError(f"{k}: shapes {a0.shape}, {sE[k].shape}, {sA[k].shape} differ")
        v = w0 * a0.astype(np.float64) + alphaE * sE[k].astype(np.float64) + alphaA * sA[k].astype(np.float64)
        mixed[k] = v.astype(a0.dtype)
    if isinstance(theta0, TransformerModel):
        out = theta0.copy()
        out.load_state(mixed)
        return out
    return mixed


def default_grid() -> np.ndarray:
    return np.round(np.arange(-0.25, 1.5 + 1e-9, 0.25), 10)


@dataclass
class ConnectivityGrid:
    alpha_E: np.ndarray
    alpha_A: np.ndarray
    accuracy: np.ndarray  # (len(alpha_E), len(alpha_A))

    def at(self, aE: float, aA: float) -> float:
        i = int(np.flatnonzero(np.isclose(self.alpha_E, aE))[0])
        j = int(np.flatnonzero(np.isclose(self.alpha_A, aA))[0])
        return float(self.accuracy[i, j])

    def segment(self) -> list[tuple[float, float, float]]:
        """Grid points on the line aE + aA = 1 between the E2E and ABFT anchors, E2E first."""
        pts = [(float(aE), 1.0 - float(aE)) for aE in self.alpha_E[::-1]
               if 0 <= aE <= 1 and np.isclose(self.alpha_A, 1 - aE).any()]
        if len(pts) < 2:
            raise DataError("grid has no E2E-to-ABFT segment; include 0 and 1 in the grid values")
        return [(aE, aA, self.at(aE, aA)) for aE, aA in pts]

    def rows(self):
        return [(aE, aA, self.accuracy[i, j]) for i, aE in enumerate(self.alpha_E)
                for j, aA in enumerate(self.alpha_A)]

    def write_csv(self, path) -> None:
        write_csv(path, ("alpha_E", "alpha_A", "accuracy"), self.rows())


def connectivity_grid(theta0, thetaE, thetaA, test_set, label_tokens, values=None, progress=None) -> ConnectivityGrid:
    values = default_grid() if values is None else np.asarray(values, dtype=float)
    for anchor in (0.0, 1.0):
        if not np.isclose(values, anchor).any():
            raise ContractError(f"grid values must include {anchor}")
    base = theta0 if isinstance(theta0, TransformerModel) else None
    if base is None:
        raise ContractError("connectivity_grid needs theta0 as a model")
    acc = np.zeros((len(values), len(values)))
    for i, aE in enumerate(values):
        for j, aA in enumerate(values):
            acc[i, j] = eval_accuracy(interpolate_models(theta0, thetaE, thetaA, aE, aA), test_set, label_tokens)
            if progress:
                progress(aE, aA, acc[i, j])
    return ConnectivityGrid(values.copy(), values.copy(), acc)


# --- consistency ---------------------------------------------------------------


def consistency_metric(predictions) -> float:
    """Mean over queries of (largest agreeing group) / m for a (queries, m) prediction matrix."""
    P = np.asarray(predictions)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ContractError(f"need at least two variants per query, got shape {P.shape}")
    best = np.array([np.bincount(row - row.min()).max() for row in P.astype(np.int64)])
    return float(np.mean(best / P.shape[1]))


def random_vote_expectation(C: int, m: int) -> float:
    """Closed-form E[max class count] / m for m uniform votes over C classes (multinomial enumeration)."""
    from itertools import combinations_with_replacement
    from math import factorial

    total = 0.0
    for combo in combinations_with_replacement(range(C), m):
        counts = np.bincount(combo, minlength=C)
        ways = factorial(m)
        for c in counts:
            ways //= factorial(int(c))
        total += ways * counts.max()
    return total / (C ** m) / m


def consistency_predictions(model: TransformerModel, task, plan, rng: np.random.Generator, k: int = 4,
                            n_queries: int = 256, markers=(2, 3, 4), resamples: int = 3) -> np.ndarray:
    """(n_queries, len(markers) * resamples) predicted classes: marker variants x demonstration draws."""
    n = min(n_queries, len(plan.queries))
    samples = []
    for qi in range(n):
        span, cls = plan.queries.examples[qi]
        for marker in markers:
            tpl = task.template.with_marker(marker)
            for _ in range(resamples):
                samples.append(build_icl_sample(task, k, cls, rng, pool=plan.demos, query_span=span, template=tpl))
    preds = predict_batch(model, samples, task.label_tokens)
    return preds.reshape(n, len(markers) * resamples)


# --- unseen labels -------------------------------------------------------------


@dataclass
class UnseenLabelReport:
    unseen_accuracy: float
    random_accuracy: float
    zero_shot_accuracy: float
    n_queries: int
    all_I_plus_empty: bool


def unseen_label_eval(model: TransformerModel, task, plan, rng: np.random.Generator, k: int = 4,
                      n_queries: int = 512) -> UnseenLabelReport:
    """Same queries rendered three ways: demos without the true label, random demos, and no demos."""
    if task.n_classes < 2:
        raise ContractError("unseen-label evaluation needs at least two classes")
    n = min(n_queries, len(plan.queries))
    unseen, random, zero = [], [], []
    for qi in range(n):
        span, cls = plan.queries.examples[qi]
        unseen.append(build_unseen_label_sample(task, k, cls, rng, pool=plan.demos, query_span=span))
        random.append(build_icl_sample(task, k, cls, rng, pool=plan.demos, query_span=span))
        zero.append(build_icl_sample(task, 0, cls, rng, query_span=span))
    labels = task.label_tokens
    return UnseenLabelReport(
        unseen_accuracy=eval_accuracy(model, unseen, labels),
        random_accuracy=eval_accuracy(model, random, labels),
        zero_shot_accuracy=eval_accuracy(model, zero, labels),
        n_queries=n,
        all_I_plus_empty=all(not s.I_plus for s in unseen),
    )


# --- parameter shift -----------------------------------------------------------


@dataclass
class ShiftMap:
    entries: list[tuple[str, int, str, float]]  # (tensor name, layer or -1, kind, distance)

    def get(self, name: str) -> float:
        return next(d for n, _, _, d in self.entries if n == name)

    def matrix(self, kinds=("W_Q", "W_K", "W_V", "W_O", "mlp.W_in", "mlp.W_out")) -> np.ndarray:
        layers = sorted({layer for _, layer, _, _ in self.entries if layer >= 0})
        out = np.zeros((len(layers), len(kinds)))
        for _, layer, kind, d in self.entries:
            if layer >= 0 and kind in kinds:
                out[layers.index(layer), kinds.index(kind)] = d
        return out

    def write_csv(self, path) -> None:
        write_csv(path, ("tensor", "layer", "kind", "frobenius"), self.entries)


def shift_map(theta_before, theta_after) -> ShiftMap:
    a, b = _state(theta_before), _state(theta_after)
    if a.keys() != b.keys():
        raise ContractError("parameter sets name different tensors")
    entries = []
    for name, x in a.items():
        if x.shape != b[name].shape:
            raise ContractError(f"{name}: shapes {x.shape} and {b[name].shape} differ")
        diff = x.astype(np.float64) - b[name].astype(np.float64)
        if name.startswith("layers."):
            _, layer, kind = name.split(".", 2)
            layer = int(layer)
        else:
            layer, kind = -1, name
        entries.append((name, layer, kind, float(np.sqrt(np.sum(diff * diff)))))
    return ShiftMap(entries)

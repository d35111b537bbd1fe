"""Attention-behavior fine-tuning: induction-head filter, attention loss, PID balancing, trainers."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import QK_KINDS, TransformerModel, forward_batch, label_argmax, pad_batch
from .tensor import AdamState, ContractError, Tensor, adam_step


@dataclass
class ABFTConfig:
    A0: float = 0.5
    B0: float = 1.0
    lr: float = 2e-5
    n_b: int = 32
    n_steps: int = 32
    k: int = 4
    pid_enabled: bool = True
    C_p: float = 0.03
    C_i: float = 0.005
    C_d: float = 0.005
    head_filter_enabled: bool = True
    log_base: float | str = "e"

    def __post_init__(self):
        if self.A0 < 0 or self.B0 < 0:
            raise ContractError("loss factors A0 and B0 must be non-negative")
        if self.n_b < 1 or self.n_steps < 1:
            raise ContractError("n_b and n_steps must be positive")


# --- filter and loss -----------------------------------------------------------


def _log(x: float, base) -> float:
    return math.log(x) if base in ("e", None) else math.log(x) / math.log(float(base))


def induction_score(alpha, I) -> float:
    """Attention mass that the last row puts on the label positions ``I``."""
    alpha = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)
    idx = np.asarray(I, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= alpha.shape[-1]):
        raise ContractError(f"label positions {list(I)} out of range for alpha of length {alpha.shape[-1]}")
    return float(alpha[..., idx].astype(np.float64).sum(axis=-1))


def induction_threshold(k: int, n_t: int, log_base="e") -> float:
    return k / (k + _log(n_t, log_base))


def is_induction_head(alpha, I, k: int, n_t: int, log_base="e") -> bool:
    return induction_score(alpha, I) > induction_threshold(k, n_t, log_base)


def loss_weights(n: int, I_plus, I_minus, A: float, B: float) -> tuple[np.ndarray, float]:
    """Weights w and constant c with ``A*sum(alpha[I-]) + B*sum(1 - alpha[I+]) == w @ alpha + c``."""
    if A < 0 or B < 0:
        raise ContractError(f"loss factors must be non-negative, got A={A}, B={B}")
    if set(I_plus) & set(I_minus):
        raise ContractError("I_plus and I_minus overlap")
    w = np.zeros(n)
    w[list(I_minus)] = A
    w[list(I_plus)] = -B
    return w, B * len(I_plus)


def abft_loss(alpha, I_plus, I_minus, A: float, B: float) -> Tensor:
    """Punish attention on wrong-label positions, reward it on correct-label positions."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    w, c = loss_weights(alpha.shape[-1], I_plus, I_minus, A, B)
    return T.add(T.weighted_sum(alpha, w), Tensor(np.asarray(c, dtype=alpha.dtype)))


@dataclass
class HeadLossReport:
    layer: int
    head: int
    is_induction: bool
    S: float
    loss: float
    A: float
    B: float


def sample_loss(captures, sample, cfg: ABFTConfig, A: float | None = None, B: float | None = None):
    """Sum of per-head losses over the heads that pass the filter (all heads when it is disabled).

    Returns ``(total, reports, induction_count)``; ``total`` is a Tensor that
    carries gradients when the captures do.
    """
    A = cfg.A0 if A is None else A
    B = cfg.B0 if B is None else B
    k = len(sample.I)
    threshold = induction_threshold(k, sample.n_t, cfg.log_base)
    total = None
    reports = []
    count = 0
    for cap in captures:
        alpha = cap.tensor if getattr(cap, "tensor", None) is not None else cap.alpha
        S = induction_score(cap.alpha, sample.I)
        induction = S > threshold
        count += induction
        if induction or not cfg.head_filter_enabled:
            head_loss = abft_loss(alpha, sample.I_plus, sample.I_minus, A, B)
            total = head_loss if total is None else T.add(total, head_loss)
            value = float(head_loss.data)
        else:
            value = 0.0
        reports.append(HeadLossReport(cap.layer, cap.head, bool(induction), S, value, A, B))
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float64))
    return total, reports, count


def batch_head_scores(alphas, samples) -> np.ndarray:
    """(B, L, H) induction scores for a captured batch."""
    out = np.zeros((len(samples), len(alphas), alphas[0].shape[1]))
    for b, s in enumerate(samples):
        idx = list(s.I)
        for layer, a in enumerate(alphas):
            out[b, layer] = a.data[b][:, idx].astype(np.float64).sum(axis=-1)
    return out


def batch_abft_loss(alphas, samples, cfg: ABFTConfig, A: float, B: float):
    """Mean over samples of the per-sample filtered loss, built as one weighted sum per layer.

    Returns ``(loss, per_sample_loss, per_sample_count)``.
    """
    Bn = len(samples)
    scores = batch_head_scores(alphas, samples)
    thresholds = np.array([induction_threshold(len(s.I), s.n_t, cfg.log_base) for s in samples])
    mask = scores > thresholds[:, None, None]
    counts = mask.sum(axis=(1, 2))
    active = mask if cfg.head_filter_enabled else np.ones_like(mask)
    per_sample = np.zeros(Bn)
    total = None
    const = 0.0
    for layer, a in enumerate(alphas):
        W = np.zeros(a.shape)
        for b, s in enumerate(samples):
            w, c = loss_weights(a.shape[-1], s.I_plus, s.I_minus, A, B)
            heads = np.flatnonzero(active[b, layer])
            W[b, heads] = w
            const += c * len(heads)
            per_sample[b] += c * len(heads) + float((a.data[b, heads].astype(np.float64) @ w).sum())
        term = T.weighted_sum(a, W)
        total = term if total is None else T.add(total, term)
    total = T.add(total, Tensor(np.asarray(const, dtype=alphas[0].dtype)))
    return T.scale(total, 1.0 / Bn), per_sample, counts


# --- PID balancing -------------------------------------------------------------


@dataclass
class PIDState:
    """Feedback control of the punish factor from mean induction-head counts."""

    A: float
    C_p: float = 0.03
    C_i: float = 0.005
    C_d: float = 0.005
    history: list[float] = field(default_factory=list)
    A_history: list[float] = field(default_factory=list)
    integral: float = 0.0

    def update(self, n_bar: float) -> float:
        """Record n_bar_t and return A_t (unchanged for t <= 2, clamped at zero)."""
        self.history.append(float(n_bar))
        t = len(self.history)
        if t >= 2:
            self.integral += self.history[-1] - self.history[-2]
        if t > 2:
            n_t, n_1, n_2 = self.history[-1], self.history[-2], self.history[-3]
            A = (self.C_p * (n_t - n_1) + self.C_i * self.integral
                 + self.C_d * (n_t - 2 * n_1 + n_2) + self.A)
            self.A = max(A, 0.0)
        self.A_history.append(self.A)
        return self.A


def pid_update(state: PIDState, n_bar: float) -> float:
    return state.update(n_bar)


# --- run logs ------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    mean_loss: float
    mean_induction_count: float
    A: float
    B: float
    wall_ms: float
    val_loss: float | None = None


@dataclass
class RunLog:
    method: str
    records: list[StepRecord] = field(default_factory=list)
    val_loss_initial: float | None = None

    CSV_COLUMNS = ("step", "mean_loss", "mean_induction_count", "A", "B")

    def write_csv(self, path, timing: bool = False) -> None:
        """One row per optimizer step; ``A`` is the factor in force after that step's update.

        Wall-clock times are opt-in so the default file is reproducible byte for byte.
        """
        cols = list(self.CSV_COLUMNS)
        has_val = any(r.val_loss is not None for r in self.records)
        if has_val:
            cols.append("val_loss")
        if timing:
            cols.append("wall_ms")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            if has_val:
                w.writerow([0, "", "", "", "", _fmt(self.val_loss_initial)] + ([""] if timing else []))
            for r in self.records:
                row = [r.step, _fmt(r.mean_loss), _fmt(r.mean_induction_count), _fmt(r.A), _fmt(r.B)]
                if has_val:
                    row.append(_fmt(r.val_loss))
                if timing:
                    row.append(f"{r.wall_ms:.3f}")
                w.writerow(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_dict(self) -> dict:
        return {"method": self.method, "val_loss_initial": self.val_loss_initial,
                "records": [asdict(r) for r in self.records]}


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# --- trainers ------------------------------------------------------------------


def _batches(n_items: int, n_b: int, n_steps: int, rng: np.random.Generator):
    """Index batches over a shuffled dataset, reshuffling at each wrap-around."""
    order = rng.permutation(n_items)
    pos = 0
    for _ in range(n_steps):
        idx = []
        while len(idx) < n_b:
            if pos == n_items:
                order = rng.permutation(n_items)
                pos = 0
            take = min(n_b - len(idx), n_items - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        yield np.array(idx)


def _check_qk_only(model: TransformerModel) -> None:
    bad = [k for k, p in model.named_parameters() if p.trainable != (k.rsplit(".", 1)[-1] in QK_KINDS)]
    if bad:
        raise ContractError(f"ABFT needs restrict_trainable(model, 'qk_only'); offending tensors: {bad[:3]}")


def eval_abft_loss(model: TransformerModel, samples, cfg: ABFTConfig, A: float | None = None,
                   B: float | None = None, batch_size: int = 64):
    """Mean filtered loss and mean induction count over ``samples`` (no gradients)."""
    A = cfg.A0 if A is None else A
    B = cfg.B0 if B is None else B
    losses, counts = [], []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            tokens, lengths = pad_batch([s.token_ids for s in chunk])
            out = forward_batch(model, tokens, lengths, capture=True)
            _, per_sample, c = batch_abft_loss(out.alphas, chunk, cfg, A, B)
            losses.append(per_sample)
            counts.append(c)
    return float(np.concatenate(losses).mean()), float(np.concatenate(counts).mean())


def train_abft(model: TransformerModel, dataset, cfg: ABFTConfig, rng: np.random.Generator,
               val_set=None) -> tuple[TransformerModel, RunLog]:
    """Pseudo-batched ABFT on W_Q/W_K only; the model is updated in place and returned."""
    _check_qk_only(model)
    if not dataset:
        raise ContractError("empty training set")
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    pid = PIDState(A=cfg.A0, C_p=cfg.C_p, C_i=cfg.C_i, C_d=cfg.C_d)
    log = RunLog(method="abft")
    if val_set:
        log.val_loss_initial, _ = eval_abft_loss(model, val_set, cfg)
    A, B = cfg.A0, cfg.B0
    for step, idx in enumerate(_batches(len(dataset), cfg.n_b, cfg.n_steps, rng), start=1):
        t0 = time.perf_counter()
        batch = [dataset[i] for i in idx]
        tokens, lengths = pad_batch([s.token_ids for s in batch])
        model.zero_grad()
        out = forward_batch(model, tokens, lengths, capture=True)
        loss, _, counts = batch_abft_loss(out.alphas, batch, cfg, A, B)
        T.backward(loss)
        adam_step(opt, params)
        n_bar = float(counts.mean())
        if cfg.pid_enabled:
            A = pid.update(n_bar)
        wall = (time.perf_counter() - t0) * 1e3
        val = eval_abft_loss(model, val_set, cfg)[0] if val_set else None
        log.records.append(StepRecord(step, float(loss.data), n_bar, A, B, wall, val))
    return model, log


def train_e2e(model: TransformerModel, dataset, cfg: ABFTConfig, rng: np.random.Generator,
              label_tokens=None, val_set=None) -> tuple[TransformerModel, RunLog]:
    """Cross-entropy on the correct label token at the prediction slot, same pseudo-batch schedule.

    Trains whatever tensors are currently trainable (normally all of them).
    """
    if not dataset:
        raise ContractError("empty training set")
    if label_tokens is None:
        raise ContractError("train_e2e needs the task's label tokens")
    label_tokens = np.asarray(label_tokens)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    log = RunLog(method="e2e")
    if val_set:
        log.val_loss_initial = eval_e2e_loss(model, val_set, label_tokens)
    for step, idx in enumerate(_batches(len(dataset), cfg.n_b, cfg.n_steps, rng), start=1):
        t0 = time.perf_counter()
        batch = [dataset[i] for i in idx]
        tokens, lengths = pad_batch([s.token_ids for s in batch])
        model.zero_grad()
        out = forward_batch(model, tokens, lengths, capture=True)
        final = T.index(out.logits, (np.arange(len(batch)), out.last))
        targets = label_tokens[[s.query_label for s in batch]]
        loss = T.cross_entropy(final, targets)
        T.backward(loss)
        adam_step(opt, params)
        counts = _induction_counts(out.alphas, batch, cfg)
        wall = (time.perf_counter() - t0) * 1e3
        val = eval_e2e_loss(model, val_set, label_tokens) if val_set else None
        log.records.append(StepRecord(step, float(loss.data), float(counts.mean()), cfg.A0, cfg.B0, wall, val))
    return model, log


def _induction_counts(alphas, samples, cfg: ABFTConfig) -> np.ndarray:
    scores = batch_head_scores(alphas, samples)
    thresholds = np.array([induction_threshold(len(s.I), s.n_t, cfg.log_base) for s in samples])
    return (scores > thresholds[:, None, None]).sum(axis=(1, 2))


def eval_e2e_loss(model: TransformerModel, samples, label_tokens, batch_size: int = 64) -> float:
    label_tokens = np.asarray(label_tokens)
    total = 0.0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            tokens, lengths = pad_batch([s.token_ids for s in chunk])
            out = forward_batch(model, tokens, lengths, capture=False)
            final = out.logits.data[np.arange(len(chunk)), out.last]
            targets = label_tokens[[s.query_label for s in chunk]]
            total += float(T.cross_entropy(Tensor(final), targets).data) * len(chunk)
    return total / len(samples)


# --- pretraining ---------------------------------------------------------------


@dataclass
class PretrainSchedule:
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    max_steps: int | None = None
    eval_every: int = 200
    patience: int = 0  # evaluations without improvement before stopping; 0 disables early stop
    min_delta: float = 1e-3


@dataclass
class PretrainReport:
    steps: int
    train_loss: list[float]
    heldout_loss: list[tuple[int, float]]
    stopped_early: bool


def lm_loss(model: TransformerModel, tokens: np.ndarray) -> Tensor:
    out = forward_batch(model, tokens, capture=False)
    V = model.config.vocab_size
    logits = T.reshape(T.index(out.logits, (slice(None), slice(0, tokens.shape[1] - 1))), (-1, V))
    return T.cross_entropy(logits, tokens[:, 1:].reshape(-1))


def heldout_lm_loss(model: TransformerModel, tokens: np.ndarray, batch_size: int = 64) -> float:
    total = 0.0
    with T.no_grad():
        for start in range(0, len(tokens), batch_size):
            chunk = tokens[start:start + batch_size]
            total += float(lm_loss(model, chunk).data) * len(chunk)
    return total / len(tokens)


def pretrain(model: TransformerModel, corpus_tokens: np.ndarray, schedule: PretrainSchedule,
             rng: np.random.Generator, heldout: np.ndarray | None = None, progress=None):
    """Next-token training over one shuffled pass of the corpus (or ``max_steps``)."""
    for p in model.parameters():
        p.set_trainable(True)
    params = model.parameters()
    n = len(corpus_tokens)
    steps = n // schedule.batch_size
    if schedule.max_steps is not None:
        steps = min(steps, schedule.max_steps)
    order = rng.permutation(n)
    opt = AdamState(lr=schedule.lr)
    train_losses, heldout_losses = [], []
    best, stale, stopped = math.inf, 0, False
    step = 0
    for step in range(1, steps + 1):
        if step <= schedule.warmup_steps:
            lr = schedule.lr * step / schedule.warmup_steps
        else:
            frac = (step - schedule.warmup_steps) / max(1, steps - schedule.warmup_steps)
            lr = schedule.lr * (schedule.min_lr_ratio + (1 - schedule.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.lr = lr
        idx = order[(step - 1) * schedule.batch_size: step * schedule.batch_size]
        model.zero_grad()
        loss = lm_loss(model, corpus_tokens[idx])
        T.backward(loss)
        adam_step(opt, params)
        train_losses.append(float(loss.data))
        if heldout is not None and (step % schedule.eval_every == 0 or step == steps):
            h = heldout_lm_loss(model, heldout)
            heldout_losses.append((step, h))
            if progress:
                progress(step, steps, float(loss.data), h)
            if h < best - schedule.min_delta:
                best, stale = h, 0
            else:
                stale += 1
                if schedule.patience and stale >= schedule.patience:
                    stopped = True
                    break
    return model, PretrainReport(step, train_losses, heldout_losses, stopped)


def repeat_signature(model: TransformerModel, tokens: np.ndarray, segments: np.ndarray,
                     batch_size: int = 64) -> tuple[float, float]:
    """Mean next-token loss inside the first vs second copy of each repeated segment.

    The first token of each copy is excluded since it is unpredictable either way.
    """
    first_losses, second_losses = [], []
    with T.no_grad():
        for start in range(0, len(tokens), batch_size):
            chunk = tokens[start:start + batch_size]
            segs = segments[start:start + batch_size]
            out = forward_batch(model, chunk, capture=False)
            z = out.logits.data.astype(np.float64)
            z = z - z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            for b, (s1, s2, L) in enumerate(segs):
                for base, sink in ((s1, first_losses), (s2, second_losses)):
                    pos = np.arange(base, base + L - 1)
                    sink.extend(-logp[b, pos, chunk[b, pos + 1]])
    return float(np.mean(first_losses)), float(np.mean(second_losses))


def icl_accuracy(model: TransformerModel, samples, label_tokens) -> float:
    from .model import predict_batch

    preds = predict_batch(model, samples, label_tokens)
    return float(np.mean(preds == np.array([s.query_label for s in samples])))


__all__ = [
    "ABFTConfig", "HeadLossReport", "PIDState", "RunLog", "StepRecord", "PretrainSchedule",
    "induction_score", "induction_threshold", "is_induction_head", "abft_loss", "sample_loss",
    "batch_abft_loss", "pid_update", "train_abft", "train_e2e", "pretrain", "repeat_signature",
    "eval_abft_loss", "icl_accuracy", "label_argmax",
]

"""Pre-norm decoder-only transformer with last-row attention capture."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 96
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


QK_KINDS = ("W_Q", "W_K")
LAYER_PARAMS = ("ln1.g", "ln1.b", "W_Q", "W_K", "W_V", "W_O", "ln2.g", "ln2.b", "mlp.W_in", "mlp.W_out")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (checkpoint) order of parameter names and their shapes."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq_len, d)}
    per_layer = {
        "ln1.g": (d,), "ln1.b": (d,),
        "W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_O": (d, d),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.W_in": (d, 4 * d), "mlp.W_out": (4 * d, d),
    }
    for layer in range(cfg.n_layers):
        for name in LAYER_PARAMS:
            shapes[f"layers.{layer}.{name}"] = per_layer[name]
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@dataclass
class AttentionCapture:
    layer: int
    head: int
    alpha: np.ndarray  # last-row attention of length n_t
    tensor: Tensor | None = None  # same row as a graph node when captured with gradients on

    @property
    def n_t(self) -> int:
        return len(self.alpha)


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = state[k]
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def copy(self) -> "TransformerModel":
        params = {}
        for k, p in self.params.items():
            q = Tensor(p.data.copy(), trainable=p.trainable, name=k)
            params[k] = q
        return TransformerModel(self.config, params)

    def astype(self, dtype) -> "TransformerModel":
        out = self.copy()
        for p in out.params.values():
            p.data = p.data.astype(dtype)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def trainable_names(self) -> list[str]:
        return [k for k, p in self.params.items() if p.trainable]


def _sinusoids(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2) / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: d // 2])
    return out


def init_model(config: ModelConfig, dtype=np.float32) -> TransformerModel:
    """Normal(0, 0.02) weights, residual-output projections scaled by 1/sqrt(2 n_layers).

    Position embeddings start as sinusoids with the same 0.02 RMS; they stay trainable.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "pos_emb":
            arr = 0.02 * np.sqrt(2.0) * _sinusoids(*shape)
        else:
            std = 0.02 * (out_scale if name.endswith(("W_O", "W_out")) else 1.0)
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), trainable=True, name=name)
    return TransformerModel(config, params)


def restrict_trainable(model: TransformerModel, mode: str) -> None:
    """``qk_only``: only per-layer W_Q/W_K; ``all``: everything; ``none``: frozen."""
    if mode not in ("qk_only", "all", "none"):
        raise ValueError(f"unknown trainability mode {mode!r}")
    for name, p in model.params.items():
        if mode == "all":
            flag = True
        elif mode == "none":
            flag = False
        else:
            flag = name.rsplit(".", 1)[-1] in QK_KINDS
        p.set_trainable(flag)


@dataclass
class BatchOutput:
    logits: Tensor  # (B, T, V)
    alphas: list[Tensor]  # one (B, H, T) tensor per layer: attention row at each sample's last position
    last: np.ndarray  # (B,) index of the prediction slot


def forward_batch(model: TransformerModel, tokens, lengths=None, capture: bool = True) -> BatchOutput:
    """Run a right-padded batch of token sequences.

    Padding never influences real positions (causal mask), so each sample's
    prediction slot is ``lengths[b] - 1``.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise T.ShapeError(f"tokens must be (batch, time), got {tokens.shape}")
    B, n = tokens.shape
    if n > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    last = np.full(B, n - 1) if lengths is None else np.asarray(lengths, dtype=np.int64) - 1
    P = model.params
    H, dh = cfg.n_heads, cfg.d_head
    inv_sqrt = 1.0 / np.sqrt(dh)

    positions = np.broadcast_to(np.arange(n), (B, n))
    x = T.add(T.embedding(P["tok_emb"], tokens), T.embedding(P["pos_emb"], positions))
    rows = np.arange(B)
    alphas = []
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        h = T.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

        def heads(w):
            return T.permute(T.reshape(T.matmul(h, P[pre + w]), (B, n, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("W_Q"), heads("W_K"), heads("W_V")
        scores = T.scale(T.matmul(q, T.swap_last(k)), inv_sqrt)
        attn = T.row_softmax_masked(scores, causal=True)
        if capture:
            alphas.append(T.index(attn, (rows, slice(None), last)))
        o = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (B, n, cfg.d_model))
        x = T.add(x, T.matmul(o, P[pre + "W_O"]))
        h2 = T.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        x = T.add(x, T.matmul(T.gelu(T.matmul(h2, P[pre + "mlp.W_in"])), P[pre + "mlp.W_out"]))
    x = T.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = T.matmul(x, T.swap_last(P["tok_emb"]))
    return BatchOutput(logits=logits, alphas=alphas, last=last)


def forward(model: TransformerModel, tokens, capture: bool = False):
    """Single sequence: returns (logits (n_t, V), captures ordered by (layer, head))."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    out = forward_batch(model, tokens, capture=capture)
    logits = T.index(out.logits, 0)
    captures = []
    if capture:
        for layer, a in enumerate(out.alphas):
            for head in range(model.config.n_heads):
                node = T.index(a, (0, head)) if a.requires_grad else None
                captures.append(AttentionCapture(layer, head, a.data[0, head].copy(), node))
    return logits, captures


def pad_batch(seqs, pad_id: int = 0):
    """Right-pad token lists to a (B, T) array; returns (tokens, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def label_argmax(final_logits: np.ndarray, label_tokens) -> np.ndarray:
    """Class index of the highest label-token logit; ties go to the lowest token id."""
    label_tokens = np.asarray(label_tokens, dtype=np.int64)
    if label_tokens.size == 0:
        raise T.ContractError("label token set is empty")
    order = np.argsort(label_tokens, kind="stable")
    sub = np.atleast_2d(final_logits)[:, label_tokens[order]]
    return order[np.argmax(sub, axis=1)]


def predict_label(model: TransformerModel, sample, label_tokens) -> int:
    with T.no_grad():
        logits, _ = forward(model, sample.token_ids)
    return int(label_argmax(logits.data[-1], label_tokens)[0])


def predict_batch(model: TransformerModel, samples, label_tokens, batch_size: int = 64) -> np.ndarray:
    preds = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            tokens, lengths = pad_batch([s.token_ids for s in chunk])
            out = forward_batch(model, tokens, lengths, capture=False)
            final = out.logits.data[np.arange(len(chunk)), out.last]
            preds.append(label_argmax(final, label_tokens))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

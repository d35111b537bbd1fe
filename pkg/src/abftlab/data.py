"""ICL-style sequences with recorded label positions, plus the pretraining corpus.

A rendered sample looks like::

    [bos] (prefix x_1 marker y_1 end) ... (prefix x_k marker y_k end) prefix x_q marker

where every template slot except the marker is optional. Label positions are
recorded while rendering and never recovered by scanning tokens.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError


class DataError(ValueError):
    pass


class LengthError(ValueError):
    pass


# --- vocabulary layout for the synthetic tasks -----------------------------------


@dataclass(frozen=True)
class VocabLayout:
    """Partition of a small vocabulary into special, template, label and content ids."""

    vocab_size: int = 96
    bos: int = 0
    prefix: int = 1
    markers: tuple[int, ...] = (2, 3, 4)
    end: int = 5
    pretrain_markers: tuple[int, ...] = (6, 7)
    label_range: tuple[int, int] = (8, 24)

    @property
    def template_tokens(self) -> tuple[int, ...]:
        return (self.bos, self.prefix, *self.markers, self.end, *self.pretrain_markers)

    @property
    def label_pool(self) -> np.ndarray:
        return np.arange(*self.label_range)

    @property
    def content(self) -> np.ndarray:
        return np.arange(self.label_range[1], self.vocab_size)


@dataclass(frozen=True)
class Template:
    marker: int
    bos: int | None = None
    prefix: int | None = None
    end: int | None = None

    def tokens(self) -> set[int]:
        return {t for t in (self.marker, self.bos, self.prefix, self.end) if t is not None}

    def with_marker(self, marker: int) -> "Template":
        return Template(marker=marker, bos=self.bos, prefix=self.prefix, end=self.end)

    def length(self, k: int, span_len: int) -> int:
        """Closed-form n_t for fixed-length inputs: affine in k."""
        unit = span_len + 2 + (self.prefix is not None) + (self.end is not None)
        query = span_len + 1 + (self.prefix is not None)
        return (self.bos is not None) + k * unit + query


@dataclass(frozen=True)
class TaskSpec:
    """A synthetic C-way classification task.

    Class ``c`` emits spans of ``span_len`` tokens: distractors with the class
    key token ``key_tokens[c]`` at a random slot.
    """

    task_id: str
    label_tokens: tuple[int, ...]
    key_tokens: tuple[int, ...]
    distractor_tokens: tuple[int, ...]
    span_len: int
    template: Template

    def __post_init__(self):
        labels = set(self.label_tokens)
        if len(labels) != len(self.label_tokens):
            raise DataError("label tokens must be pairwise distinct")
        if len(self.key_tokens) != len(self.label_tokens) or len(set(self.key_tokens)) != len(self.key_tokens):
            raise DataError("need one distinct key token per class")
        inputs = set(self.key_tokens) | set(self.distractor_tokens)
        if labels & inputs or labels & self.template.tokens():
            raise DataError("label tokens overlap input or template tokens")
        if set(self.key_tokens) & set(self.distractor_tokens):
            raise DataError("key tokens must not be distractors")
        if inputs & self.template.tokens():
            raise DataError("input tokens overlap template tokens")
        if self.span_len < 1:
            raise DataError("span_len must be >= 1")

    @property
    def n_classes(self) -> int:
        return len(self.label_tokens)

    def sample_input(self, cls: int, rng: np.random.Generator) -> tuple[int, ...]:
        span = rng.choice(self.distractor_tokens, size=self.span_len)
        span[-1] = self.key_tokens[cls]  # the class token closes the span, right before the marker
        return tuple(int(t) for t in span)


def make_synthetic_task(layout: VocabLayout, n_classes: int = 4, span_len: int = 4, variant: int = 0,
                        marker_index: int = 0, n_keys: int = 24) -> TaskSpec:
    """Deterministic task family; different ``variant`` values give disjoint label and key sets.

    Distractors come from content tokens outside the task family's key block,
    so no variant's key ever appears as a distractor in another variant.
    """
    if not 2 <= n_classes <= 6:
        raise DataError(f"n_classes must be in 2..6, got {n_classes}")
    content = layout.content
    keys_block, distractors = content[:n_keys], content[n_keys:]
    labels_pool = layout.label_pool
    per = n_classes
    if (variant + 1) * per > len(labels_pool) or (variant + 1) * per > len(keys_block):
        raise DataError(f"variant {variant} does not fit the vocabulary layout")
    # disjoint blocks of one permutation that is fixed across variants
    base = np.random.default_rng([n_classes, 104729])
    label_perm = base.permutation(labels_pool)
    key_perm = base.permutation(keys_block)
    sl = slice(variant * per, (variant + 1) * per)
    rng = np.random.default_rng([variant, n_classes, 7919])
    labels = tuple(int(t) for t in rng.permutation(label_perm[sl]))
    keys = tuple(int(t) for t in rng.permutation(key_perm[sl]))
    template = Template(marker=layout.markers[marker_index], bos=layout.bos, prefix=layout.prefix, end=layout.end)
    return TaskSpec(
        task_id=f"syn-c{n_classes}-v{variant}",
        label_tokens=labels,
        key_tokens=keys,
        distractor_tokens=tuple(int(t) for t in distractors),
        span_len=span_len,
        template=template,
    )


# --- samples ------------------------------------------------------------------


@dataclass
class ICLSample:
    token_ids: np.ndarray
    I: tuple[int, ...]
    class_at: tuple[int, ...]
    query_label: int
    I_plus: tuple[int, ...] = field(init=False)
    I_minus: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if len(self.I) != len(self.class_at):
            raise DataError("I and class_at differ in length")
        self.I_plus = tuple(p for p, c in zip(self.I, self.class_at) if c == self.query_label)
        self.I_minus = tuple(p for p, c in zip(self.I, self.class_at) if c != self.query_label)

    @property
    def n_t(self) -> int:
        return len(self.token_ids)

    @property
    def k(self) -> int:
        return len(self.I)

    def to_record(self) -> dict:
        return {
            "token_ids": self.token_ids.tolist(),
            "I": list(self.I),
            "I_plus": list(self.I_plus),
            "I_minus": list(self.I_minus),
            "class_at": list(self.class_at),
            "query_label": int(self.query_label),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ICLSample":
        s = cls(np.asarray(rec["token_ids"]), tuple(rec["I"]), tuple(rec["class_at"]), int(rec["query_label"]))
        if list(s.I_plus) != list(rec["I_plus"]) or list(s.I_minus) != list(rec["I_minus"]):
            raise DataError("record label partition is inconsistent with class_at")
        return s


def render(task, demos, query_span, query_label: int, template: Template | None = None,
           max_seq_len: int | None = None) -> ICLSample:
    """Concatenate ``demos`` (list of (span, class)) and the query span into one sample."""
    tpl = template or task.template
    toks: list[int] = []
    positions, classes = [], []
    if tpl.bos is not None:
        toks.append(tpl.bos)
    for span, cls in demos:
        if tpl.prefix is not None:
            toks.append(tpl.prefix)
        toks.extend(span)
        toks.append(tpl.marker)
        positions.append(len(toks))
        classes.append(int(cls))
        toks.append(task.label_tokens[cls])
        if tpl.end is not None:
            toks.append(tpl.end)
    if tpl.prefix is not None:
        toks.append(tpl.prefix)
    toks.extend(query_span)
    toks.append(tpl.marker)
    if max_seq_len is not None and len(toks) > max_seq_len:
        raise LengthError(f"sample length {len(toks)} exceeds max_seq_len {max_seq_len}")
    return ICLSample(np.array(toks, dtype=np.int64), tuple(positions), tuple(classes), int(query_label))


class ExamplePool:
    """Concrete (span, class) examples, indexed by class."""

    def __init__(self, examples):
        self.examples = [(tuple(s), int(c)) for s, c in examples]
        self.by_class: dict[int, list[int]] = {}
        for i, (_, c) in enumerate(self.examples):
            self.by_class.setdefault(c, []).append(i)

    def __len__(self) -> int:
        return len(self.examples)

    def draw(self, rng, exclude=(), classes=None):
        """One example index, uniform over the allowed examples."""
        if classes is None:
            allowed = [i for i in range(len(self.examples)) if i not in exclude]
        else:
            allowed = [i for c in sorted(classes) for i in self.by_class.get(c, []) if i not in exclude]
        if not allowed:
            raise DataError("example pool exhausted")
        return allowed[int(rng.integers(len(allowed)))]


def _draw_demo(task, rng, pool, exclude, classes=None):
    if pool is None:
        if classes is None:
            cls = int(rng.integers(task.n_classes))
        else:
            cls = int(rng.choice(sorted(classes)))
        return task.sample_input(cls, rng), cls
    idx = pool.draw(rng, exclude=exclude, classes=classes)
    exclude.add(idx)
    return pool.examples[idx]


def build_icl_sample(task, k: int, query_class: int, rng: np.random.Generator, *, pool: ExamplePool | None = None,
                     query_span=None, demo_classes=None, template: Template | None = None,
                     max_seq_len: int | None = None, exclude=()) -> ICLSample:
    """Draw k demonstrations (uniform classes unless ``demo_classes`` fixes them) and render."""
    if k < 0:
        raise DataError("k must be >= 0")
    if query_span is None:
        query_span = task.sample_input(query_class, rng)
    used = set(exclude)
    demos = []
    for i in range(k):
        constraint = None if demo_classes is None else [demo_classes[i]]
        demos.append(_draw_demo(task, rng, pool, used, constraint))
    return render(task, demos, query_span, query_class, template, max_seq_len)


def build_unseen_label_sample(task, k: int, query_class: int, rng: np.random.Generator, *,
                              pool: ExamplePool | None = None, query_span=None,
                              template: Template | None = None, max_seq_len: int | None = None) -> ICLSample:
    """Every demonstration carries a label other than the query's, so I_plus is empty."""
    if task.n_classes < 2:
        raise ContractError("unseen-label samples need at least two classes")
    if query_span is None:
        query_span = task.sample_input(query_class, rng)
    others = [c for c in range(task.n_classes) if c != query_class]
    used: set[int] = set()
    demos = [_draw_demo(task, rng, pool, used, others) for _ in range(k)]
    return render(task, demos, query_span, query_class, template, max_seq_len)


# --- splits -------------------------------------------------------------------


@dataclass
class SplitPlan:
    train: ExamplePool
    demos: ExamplePool
    queries: ExamplePool

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "demos": len(self.demos), "queries": len(self.queries)}


def make_split_plan(task, rng: np.random.Generator, n_train: int = 1024, n_demos: int = 4096,
                    n_queries: int = 512) -> SplitPlan:
    """Class-balanced, pairwise-disjoint example pools."""
    total = n_train + n_demos + n_queries
    C = task.n_classes
    seen = set()
    examples = []
    counts = np.zeros(C, dtype=int)
    target = -(-total // C)
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 50 * total:
            raise DataError("could not draw enough distinct examples for the split")
        cls = int(np.argmin(counts))
        span = task.sample_input(cls, rng)
        if span in seen or counts[cls] >= target:
            continue
        seen.add(span)
        examples.append((span, cls))
        counts[cls] += 1
    order = rng.permutation(total)
    examples = [examples[i] for i in order]
    return SplitPlan(
        train=ExamplePool(examples[:n_train]),
        demos=ExamplePool(examples[n_train:n_train + n_demos]),
        queries=ExamplePool(examples[n_train + n_demos:]),
    )


def balanced_classes(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.resize(np.arange(C), n))


def build_training_set(task, n_d: int, k: int, rng: np.random.Generator, plan: SplitPlan | None = None,
                       max_seq_len: int | None = None) -> list[ICLSample]:
    """``n_d`` samples with query classes balanced to within one; k+1 distinct examples each."""
    pool = plan.train if plan is not None else None
    samples = []
    for cls in balanced_classes(n_d, task.n_classes, rng):
        cls = int(cls)
        if pool is None:
            samples.append(build_icl_sample(task, k, cls, rng, max_seq_len=max_seq_len))
            continue
        q = pool.draw(rng, classes=[cls])
        span, _ = pool.examples[q]
        samples.append(build_icl_sample(task, k, cls, rng, pool=pool, query_span=span,
                                        max_seq_len=max_seq_len, exclude={q}))
    return samples


def build_test_set(task, plan: SplitPlan, rng: np.random.Generator, k: int, per_query: int = 2,
                   n_queries: int | None = None, unseen: bool = False, template: Template | None = None,
                   max_seq_len: int | None = None) -> list[ICLSample]:
    """Each query from the query pool gets ``per_query`` demonstration draws from the demo pool."""
    n = len(plan.queries) if n_queries is None else min(n_queries, len(plan.queries))
    out = []
    for qi in range(n):
        span, cls = plan.queries.examples[qi]
        for _ in range(per_query):
            if unseen:
                out.append(build_unseen_label_sample(task, k, cls, rng, pool=plan.demos, query_span=span,
                                                     template=template, max_seq_len=max_seq_len))
            else:
                out.append(build_icl_sample(task, k, cls, rng, pool=plan.demos, query_span=span,
                                            template=template, max_seq_len=max_seq_len))
    return out


def write_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[ICLSample]:
    with open(path, encoding="utf-8") as fh:
        return [ICLSample.from_record(json.loads(line)) for line in fh if line.strip()]


# --- pretraining corpus -------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    seq_len: int = 64
    frac_markov: float = 0.2
    frac_repeat: float = 0.3
    frac_triples: float = 0.5
    segment_len: tuple[int, int] = (6, 16)
    markov_branching: int = 4
    triple_span: tuple[int, int] = (1, 4)
    triple_patterns: tuple[int, int] = (2, 6)
    triple_end_prob: float = 0.5
    markov_seed: int = 0  # the transition table is part of the corpus family, shared by every split
    frac_task: float = 0.0  # prompts of the downstream task family itself
    task_shuffle: float = 0.5  # chance that a task prompt permutes the class->label binding


@dataclass
class Corpus:
    tokens: np.ndarray  # (N, seq_len)
    kinds: np.ndarray  # 0 markov, 1 repeated segment, 2 triples, 3 task prompts
    segments: np.ndarray  # (N, 3): first start, second start, length; -1 where not a repeat sequence


MARKOV, REPEAT, TRIPLES, TASK = 0, 1, 2, 3


def _markov_table(V: int, branching: int, rng) -> np.ndarray:
    probs = np.zeros((V, V))
    for t in range(V):
        succ = rng.choice(V, size=branching, replace=False)
        probs[t, succ] = rng.dirichlet(np.ones(branching))
    return np.cumsum(probs, axis=1)


def build_pretrain_corpus(config: CorpusConfig, layout: VocabLayout, size: int, rng: np.random.Generator,
                          task: "TaskSpec | None" = None) -> Corpus:
    """Mix of Markov streams, repeated-segment sequences, in-context pattern/label episodes and task prompts.

    Task prompts need ``task``; each one keeps the task's class->label binding or,
    with probability ``task_shuffle``, permutes it for the whole sequence.
    """
    V, n = layout.vocab_size, config.seq_len
    if config.frac_task > 0 and task is None:
        raise DataError("frac_task > 0 needs the task whose prompts enter the corpus")
    table = _markov_table(V, config.markov_branching, np.random.default_rng([config.markov_seed, V, config.markov_branching]))
    fracs = np.array([config.frac_markov, config.frac_repeat, config.frac_triples, config.frac_task], dtype=float)
    kinds = rng.choice(4, size=size, p=fracs / fracs.sum())
    tokens = np.zeros((size, n), dtype=np.int64)
    segments = np.full((size, 3), -1, dtype=np.int64)
    content = layout.content
    labels = layout.label_pool
    markers = np.array(layout.markers + layout.pretrain_markers)
    for i, kind in enumerate(kinds):
        if kind == MARKOV:
            tokens[i] = _markov_stream(table, n, rng)
        elif kind == REPEAT:
            tokens[i], segments[i] = _repeat_sequence(V, n, config, rng)
        elif kind == TRIPLES:
            tokens[i] = _triple_sequence(content, labels, markers, layout, n, config, rng)
        else:
            tokens[i] = _task_sequence(task, n, config.task_shuffle, rng)
    return Corpus(tokens, kinds, segments)


def _task_sequence(task, n, shuffle, rng):
    """Back-to-back demonstrations of ``task`` cut to ``n`` tokens."""
    perm = rng.permutation(task.n_classes) if rng.random() < shuffle else np.arange(task.n_classes)
    tpl = task.template
    seq: list[int] = [] if tpl.bos is None else [tpl.bos]
    while len(seq) < n:
        cls = int(rng.integers(task.n_classes))
        if tpl.prefix is not None:
            seq.append(tpl.prefix)
        seq.extend(task.sample_input(cls, rng))
        seq.append(tpl.marker)
        seq.append(task.label_tokens[perm[cls]])
        if tpl.end is not None:
            seq.append(tpl.end)
    return np.array(seq[:n], dtype=np.int64)


def _markov_stream(table, n, rng):
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(table.shape[0])
    u = rng.random(n)
    for t in range(1, n):
        out[t] = min(int(np.searchsorted(table[out[t - 1]], u[t])), table.shape[0] - 1)
    return out


def _repeat_sequence(V, n, config, rng):
    lo, hi = config.segment_len
    L = int(rng.integers(lo, hi + 1))
    L = min(L, n // 2)
    seq = rng.integers(V, size=n)
    first = int(rng.integers(0, n - 2 * L + 1))
    second = int(rng.integers(first + L, n - L + 1))
    seq[second:second + L] = seq[first:first + L]
    return seq, (first, second, L)


def _triple_sequence(content, labels, markers, layout, n, config, rng):
    """Episodes ``pattern marker label [sep]`` whose pattern->label binding is fixed only within the sequence."""
    m = int(rng.integers(config.triple_patterns[0], config.triple_patterns[1] + 1))
    keys = rng.choice(content, size=m, replace=False)
    fillers = np.setdiff1d(content, keys)
    bound = rng.choice(labels, size=m, replace=False)
    marker = int(rng.choice(markers))
    use_end = rng.random() < config.triple_end_prob
    use_prefix = rng.random() < 0.5
    seq: list[int] = []
    if rng.random() < 0.5:
        seq.append(layout.bos)
    while len(seq) < n:
        j = int(rng.integers(m))
        span_len = int(rng.integers(config.triple_span[0], config.triple_span[1] + 1))
        span = rng.choice(fillers, size=span_len)
        span[-1] = keys[j]
        if use_prefix:
            seq.append(layout.prefix)
        seq.extend(int(t) for t in span)
        seq.append(marker)
        seq.append(int(bound[j]))
        if use_end:
            seq.append(layout.end)
    return np.array(seq[:n], dtype=np.int64)


# --- labeled text ingestion ---------------------------------------------------


@dataclass(frozen=True)
class TextTemplate:
    prefix: str | None = "sentence:"
    marker: str = "label:"
    end: str | None = "\n"


class TextPool:
    """Examples ingested from ``text<TAB>label`` lines, task-compatible for sample building."""

    SPECIALS = ("<pad>", "<bos>", "<unk>")

    def __init__(self, vocab: dict[str, int], label_names: list[str], examples, template: Template):
        self.vocab = vocab
        self.label_names = label_names
        self.label_tokens = tuple(vocab[f"<label:{name}>"] for name in label_names)
        self.template = template
        self.pool = ExamplePool(examples)
        self.words = {w for w in vocab if not w.startswith("<")}
        self.task_id = "text"

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def sample_input(self, cls: int, rng) -> tuple[int, ...]:
        return self.pool.examples[self.pool.draw(rng, classes=[cls])][0]

    def label_index(self, name: str) -> int:
        try:
            return self.label_names.index(name)
        except ValueError:
            raise DataError(f"label {name!r} was not seen during ingestion") from None

    def encode(self, text: str) -> tuple[int, ...]:
        out = []
        for word in text.split():
            if word in self.words:
                out.append(self.vocab[word])
            else:
                out.extend(self.vocab.get(f"<c:{ch}>", self.vocab["<unk>"]) for ch in word)
        return tuple(out)

    def decode(self, ids) -> list[str]:
        inv = {v: k for k, v in self.vocab.items()}
        return [inv[int(i)] for i in ids]


def _read_labeled_lines(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}:{lineno}: expected 'text<TAB>label'")
            rows.append((parts[0], parts[1].strip()))
    if not rows:
        raise DataError(f"{path}: no labeled lines")
    return rows


def ingest_labeled_text(path, template: TextTemplate = TextTemplate(), min_freq: int = 2) -> TextPool:
    """Build a word/character hybrid vocabulary and one reserved token per label.

    Words seen at least ``min_freq`` times get their own id; rarer words are
    spelled out with per-character ids.
    """
    rows = _read_labeled_lines(Path(path))
    label_names = sorted({label for _, label in rows})
    counts = Counter(w for text, _ in rows for w in text.split())
    vocab: dict[str, int] = {}
    for tok in TextPool.SPECIALS:
        vocab[tok] = len(vocab)
    tpl_ids = {}
    for slot in ("prefix", "marker", "end"):
        text = getattr(template, slot)
        if text is not None:
            key = f"<t:{text}>"
            vocab.setdefault(key, len(vocab))
            tpl_ids[slot] = vocab[key]
    for name in label_names:
        vocab[f"<label:{name}>"] = len(vocab)
    for word in sorted(w for w, c in counts.items() if c >= min_freq and not w.startswith("<")):
        vocab[word] = len(vocab)
    for ch in sorted({ch for text, _ in rows for ch in text if not ch.isspace()}):
        vocab[f"<c:{ch}>"] = len(vocab)
    tpl = Template(marker=tpl_ids["marker"], bos=vocab["<bos>"], prefix=tpl_ids.get("prefix"), end=tpl_ids.get("end"))
    pool = TextPool(vocab, label_names, [], tpl)
    examples = [(pool.encode(text), label_names.index(label)) for text, label in rows]
    pool.pool = ExamplePool(examples)
    return pool


def load_labeled_text(path, pool: TextPool) -> ExamplePool:
    """Encode another labeled file with an existing vocabulary; unseen labels are a data error."""
    rows = _read_labeled_lines(Path(path))
    return ExamplePool([(pool.encode(text), pool.label_index(label)) for text, label in rows])

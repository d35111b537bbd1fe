import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abftlab.data import (
    REPEAT,
    CorpusConfig,
    DataError,
    ExamplePool,
    LengthError,
    TaskSpec,
    Template,
    TextTemplate,
    build_icl_sample,
    build_pretrain_corpus,
    build_test_set,
    build_training_set,
    build_unseen_label_sample,
    ingest_labeled_text,
    load_labeled_text,
    make_synthetic_task,
    read_jsonl,
    render,
    write_jsonl,
)
from abftlab.tensor import ContractError


def check_sample(s, task):
    labels = set(task.label_tokens)
    assert set(s.I_plus) | set(s.I_minus) == set(s.I) and not set(s.I_plus) & set(s.I_minus)
    for p, c in zip(s.I, s.class_at):
        assert s.token_ids[p] == task.label_tokens[c]
    stray = [p for p, t in enumerate(s.token_ids) if t in labels]
    assert stray == list(s.I)
    assert s.token_ids[-1] == task.template.marker


def test_two_shot_template_positions(task):
    # bos, then (prefix x marker y) twice with one-token inputs and no end token, then prefix xq marker
    tpl = Template(marker=2, bos=0, prefix=1)
    binary = TaskSpec("two-shot", task.label_tokens[:2], task.key_tokens[:2], task.distractor_tokens, 1, tpl)
    s = render(binary, [((40,), 0), ((41,), 1)], (40,), 0)
    assert s.I == (4, 8) and s.I_plus == (4,) and s.I_minus == (8,)


def test_length_is_affine_in_k(task):
    rng = np.random.default_rng(0)
    lengths = [build_icl_sample(task, k, 0, rng).n_t for k in range(1, 9)]
    assert lengths == [task.template.length(k, task.span_len) for k in range(1, 9)]
    assert len(set(np.diff(lengths))) == 1


def test_build_sample_invariants(task):
    rng = np.random.default_rng(1)
    for _ in range(50):
        check_sample(build_icl_sample(task, 4, int(rng.integers(4)), rng), task)


def test_demo_classes_are_uniform(task):
    rng = np.random.default_rng(2)
    counts = np.zeros(4)
    for _ in range(1000):
        s = build_icl_sample(task, 4, 1, rng)
        counts += np.bincount(s.class_at, minlength=4)
    n, p = 4000, 0.25
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_length_error(task):
    with pytest.raises(LengthError):
        build_icl_sample(task, 8, 0, np.random.default_rng(0), max_seq_len=40)


def test_unseen_label_samples(task, layout):
    rng = np.random.default_rng(3)
    for _ in range(30):
        s = build_unseen_label_sample(task, 4, 2, rng)
        assert s.I_plus == () and s.I_minus == s.I and 2 not in s.class_at
    binary = make_synthetic_task(layout, n_classes=2)
    s = build_unseen_label_sample(binary, 4, 0, rng)
    assert set(s.class_at) == {1}
    single = TaskSpec("one", (10,), (30,), task.distractor_tokens, 2, task.template)
    with pytest.raises(ContractError):
        build_unseen_label_sample(single, 4, 0, rng)


def test_training_set_balanced_and_deterministic(task, plan):
    a = build_training_set(task, 512, 4, np.random.default_rng(4), plan)
    assert np.bincount([s.query_label for s in a], minlength=4).tolist() == [128] * 4
    b = build_training_set(task, 512, 4, np.random.default_rng(4), plan)
    assert all(x.token_ids.tobytes() == y.token_ids.tobytes() for x, y in zip(a, b))
    for s in a[:50]:
        check_sample(s, task)


def test_split_pools_are_disjoint(task, plan):
    sets = [set(p.examples) for p in (plan.train, plan.demos, plan.queries)]
    assert not sets[0] & sets[1] and not sets[0] & sets[2] and not sets[1] & sets[2]
    test = build_test_set(task, plan, np.random.default_rng(5), 4)
    query_spans = {span for span, _ in plan.queries.examples}
    for s in test:
        for p in s.I:
            demo_span = tuple(int(t) for t in s.token_ids[p - 1 - task.span_len:p - 1])
            assert demo_span not in query_spans


def test_pool_exhaustion():
    pool = ExamplePool([((1, 2), 0)])
    with pytest.raises(DataError, match="exhausted"):
        pool.draw(np.random.default_rng(0), exclude={0})


def test_variants_are_disjoint(layout):
    a, b = make_synthetic_task(layout, 4, variant=0), make_synthetic_task(layout, 4, variant=1)
    assert not set(a.label_tokens) & set(b.label_tokens)
    assert not set(a.key_tokens) & set(b.key_tokens)


def test_jsonl_round_trip(task, tmp_path):
    samples = [build_icl_sample(task, 4, c, np.random.default_rng(c)) for c in range(4)]
    write_jsonl(samples, tmp_path / "d.jsonl")
    back = read_jsonl(tmp_path / "d.jsonl")
    for a, b in zip(samples, back):
        assert a.to_record() == b.to_record()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 3))
def test_label_positions_property(seed, k, q):
    from abftlab.data import VocabLayout

    task = make_synthetic_task(VocabLayout(), 4, 3)
    check_sample(build_icl_sample(task, k, q, np.random.default_rng(seed)), task)


def test_pretrain_corpus(layout):
    corpus = build_pretrain_corpus(CorpusConfig(), layout, 3000, np.random.default_rng(6))
    assert corpus.tokens.shape == (3000, 64)
    assert set(np.unique(corpus.tokens)) == set(range(layout.vocab_size))
    for seq, (first, second, L) in zip(corpus.tokens[corpus.kinds == REPEAT], corpus.segments[corpus.kinds == REPEAT]):
        assert second >= first + L
        assert np.array_equal(seq[first:first + L], seq[second:second + L])
    again = build_pretrain_corpus(CorpusConfig(), layout, 3000, np.random.default_rng(6))
    assert again.tokens.tobytes() == corpus.tokens.tobytes()


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_text_ingestion(tmp_path):
    lines = ["good movie\tpos", "bad movie\tneg", "fine film\tneu", "good film\tpos", "bad film\tneg"]
    pool = ingest_labeled_text(write_lines(tmp_path / "t.tsv", lines), TextTemplate(), min_freq=2)
    assert pool.n_classes == 3 and len(set(pool.label_tokens)) == 3
    assert {"good", "bad", "movie", "film"} <= pool.words and "fine" not in pool.words
    rng = np.random.default_rng(0)
    examples = load_labeled_text(tmp_path / "t.tsv", pool)
    s = build_icl_sample(pool, 3, 0, rng, pool=examples, query_span=pool.encode("good movie"))
    for p, c in zip(s.I, s.class_at):
        assert s.token_ids[p] == pool.label_tokens[c]
    assert [p for p, t in enumerate(s.token_ids) if t in set(pool.label_tokens)] == list(s.I)


def test_text_ingestion_errors(tmp_path):
    with pytest.raises(DataError):
        ingest_labeled_text(write_lines(tmp_path / "e.tsv", []))
    with pytest.raises(DataError, match=":2"):
        ingest_labeled_text(write_lines(tmp_path / "m.tsv", ["a b\tx", "no tab here"]))
    pool = ingest_labeled_text(write_lines(tmp_path / "ok.tsv", ["a b\tx", "a c\ty"]), min_freq=1)
    with pytest.raises(DataError):
        load_labeled_text(write_lines(tmp_path / "u.tsv", ["a b\tz"]), pool)


def test_task_prompts_in_corpus(layout, task):
    cfg = CorpusConfig(frac_markov=0, frac_repeat=0, frac_triples=0, frac_task=1.0, task_shuffle=0.0)
    corpus = build_pretrain_corpus(cfg, layout, 20, np.random.default_rng(7), task)
    marker = task.template.marker
    for seq in corpus.tokens:
        after = [int(seq[i + 1]) for i in range(len(seq) - 1) if seq[i] == marker]
        spans_keys = [next(t for t in seq[max(0, i - task.span_len):i] if t in task.key_tokens)
                      for i in range(len(seq) - 1) if seq[i] == marker]
        assert after and all(task.label_tokens[task.key_tokens.index(k)] == lab for k, lab in zip(spans_keys, after))
    with pytest.raises(DataError):
        build_pretrain_corpus(cfg, layout, 4, np.random.default_rng(0))

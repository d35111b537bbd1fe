"""Experiment orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import abft
from .config import ExperimentConfig, subseed
from .data import (
    REPEAT,
    SplitPlan,
    VocabLayout,
    build_pretrain_corpus,
    build_test_set,
    build_training_set,
    make_split_plan,
    make_synthetic_task,
)
from .model import init_model, restrict_trainable
from .tensor import ContractError


class GateError(ContractError):
    """The base model lacks the induction signature or above-chance ICL accuracy."""


def layout_for(cfg: ExperimentConfig) -> VocabLayout:
    return VocabLayout(vocab_size=cfg.model.vocab_size)


def make_task(cfg: ExperimentConfig, variant: int | None = None):
    t = cfg.task
    return make_synthetic_task(layout_for(cfg), t.n_classes, t.span_len,
                               t.variant if variant is None else variant, t.marker_index)


def make_plan(cfg: ExperimentConfig, task) -> SplitPlan:
    """Example pools depend only on the task, so test inputs stay fixed across training seeds."""
    t = cfg.task
    rng = np.random.default_rng([int(task.task_id.split("-v")[-1]), t.n_classes, 2024])
    return make_split_plan(task, rng, t.n_train_pool, t.n_demo_pool, t.n_query_pool)


def make_test_set(cfg: ExperimentConfig, task, plan, k: int | None = None, n_queries: int | None = None):
    rng = np.random.default_rng([int(task.task_id.split("-v")[-1]), task.n_classes, 4242])
    return build_test_set(task, plan, rng, cfg.trainer.k if k is None else k, cfg.task.test_per_query,
                          n_queries=n_queries, max_seq_len=cfg.model.max_seq_len)


def make_train_set(cfg: ExperimentConfig, task, plan):
    rng = subseed(cfg.seed, "data", "train")
    return build_training_set(task, cfg.trainer.n_d, cfg.trainer.k, rng, plan, cfg.model.max_seq_len)


def make_val_set(cfg: ExperimentConfig, task, plan):
    """Validation samples are built from the demonstration pool, away from training and test queries."""
    rng = np.random.default_rng([int(task.task_id.split("-v")[-1]), task.n_classes, 777])
    pool_plan = SplitPlan(train=plan.demos, demos=plan.demos, queries=plan.queries)
    return build_training_set(task, cfg.task.val_size, cfg.trainer.k, rng, pool_plan, cfg.model.max_seq_len)


# --- pretraining ---------------------------------------------------------------


def make_corpus(cfg: ExperimentConfig):
    return build_pretrain_corpus(cfg.corpus.corpus_config(), layout_for(cfg), cfg.corpus.size,
                                 subseed(cfg.seed, "data", "corpus"), _corpus_task(cfg))


def make_heldout(cfg: ExperimentConfig):
    return build_pretrain_corpus(cfg.corpus.corpus_config(), layout_for(cfg), cfg.corpus.heldout,
                                 subseed(cfg.seed, "data", "heldout"), _corpus_task(cfg))


def _corpus_task(cfg: ExperimentConfig):
    return make_task(cfg) if cfg.corpus.frac_task > 0 else None


@dataclass
class GateReport:
    heldout_loss: float
    uniform_bound: float
    repeat_first_loss: float
    repeat_second_loss: float
    icl_accuracy: float
    chance: float
    passed: bool

    def diagnostic(self) -> str:
        problems = []
        if not self.heldout_loss < self.uniform_bound:
            problems.append(f"held-out loss {self.heldout_loss:.4f} is not below ln(V)={self.uniform_bound:.4f}")
        if not self.repeat_second_loss < self.repeat_first_loss:
            problems.append(f"repeated-segment loss did not drop ({self.repeat_first_loss:.4f} -> "
                            f"{self.repeat_second_loss:.4f})")
        if not self.icl_accuracy > self.chance:
            problems.append(f"ICL accuracy {self.icl_accuracy:.4f} is not above chance {self.chance:.4f}")
        return "; ".join(problems) or "ok"


def gate(model, cfg: ExperimentConfig, heldout=None) -> GateReport:
    if heldout is None:
        heldout = make_heldout(cfg)
    rep = heldout.kinds == REPEAT
    first, second = abft.repeat_signature(model, heldout.tokens[rep], heldout.segments[rep])
    h = abft.heldout_lm_loss(model, heldout.tokens)
    task = make_task(cfg)
    plan = make_plan(cfg, task)
    samples = make_test_set(cfg, task, plan, n_queries=cfg.analysis.gate_samples)
    acc = abft.icl_accuracy(model, samples, task.label_tokens)
    chance = 1.0 / task.n_classes
    ub = math.log(cfg.model.vocab_size)
    return GateReport(h, ub, first, second, acc, chance, bool(h < ub and second < first and acc > chance))


def run_pretrain(cfg: ExperimentConfig, progress=None):
    """Returns (model, PretrainReport, GateReport, corpus stats)."""
    train, held = make_corpus(cfg), make_heldout(cfg)
    model = init_model(cfg.model_config())
    model, report = abft.pretrain(model, train.tokens, cfg.pretrain.schedule(), subseed(cfg.seed, "shuffle"),
                                  held.tokens, progress)
    stats = {
        "sequences": int(len(train.tokens)),
        "seq_len": int(train.tokens.shape[1]),
        "kind_counts": {name: int((train.kinds == i).sum()) for i, name in enumerate(("markov", "repeat", "triples", "task"))},
        "vocab_coverage": int(len(np.unique(train.tokens))),
    }
    return model, report, gate(model, cfg, held), stats


# --- fine-tuning ---------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: object
    log: abft.RunLog
    acc_before: float
    acc_after: float
    n_test: int

    def summary(self) -> dict:
        recs = self.log.records
        return {
            "method": self.log.method,
            "acc_before": self.acc_before,
            "acc_after": self.acc_after,
            "n_test": self.n_test,
            "val_loss_initial": self.log.val_loss_initial,
            "val_loss_final": recs[-1].val_loss if recs else None,
            "steps": len(recs),
        }


def run_finetune(cfg: ExperimentConfig, base, method: str | None = None, evaluate: bool = True) -> FinetuneResult:
    method = method or cfg.trainer.method
    task = make_task(cfg)
    plan = make_plan(cfg, task)
    train = make_train_set(cfg, task, plan)
    val = make_val_set(cfg, task, plan)
    test = make_test_set(cfg, task, plan) if evaluate else []
    model = base.copy()
    tcfg = cfg.trainer.abft_config()
    rng = subseed(cfg.seed, "shuffle")
    acc_before = abft.icl_accuracy(model, test, task.label_tokens) if evaluate else float("nan")
    if method == "abft":
        restrict_trainable(model, "qk_only")
        model, log = abft.train_abft(model, train, tcfg, rng, val_set=val)
    elif method == "e2e":
        restrict_trainable(model, "all")
        model, log = abft.train_e2e(model, train, tcfg, rng, label_tokens=task.label_tokens, val_set=val)
    else:
        raise ContractError(f"unknown fine-tuning method {method!r}")
    acc_after = abft.icl_accuracy(model, test, task.label_tokens) if evaluate else float("nan")
    return FinetuneResult(model, log, acc_before, acc_after, len(test))


def gate_dict(report: GateReport) -> dict:
    return asdict(report)

"""Losses, two-stage training with frozen-parameter discipline, lifelong
expansion, and evaluation.

Stage 1 trains the newly added experts and their router columns on
new-language data (next-token loss plus a load-balance term). Stage 2 trains
all routers and the classifiers on a mixed review corpus (next-token loss
plus a prior-routing term that pulls old-language tokens to expert 0, plus a
classifier term). Everything else stays bitwise frozen; the partition comes
from :func:`layermoe.model.partition_params`.

Cross-layer reduction uses the mean over MoE layers for the balance, prior-
routing and classifier losses so their weights keep meaning as the model
deepens; the prior-routing loss is additionally normalised per old token.
Special positions (BOS, padding) belong to no language and are excluded
from the prior-routing and classifier losses.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .allocator import AllocationPlan, allocate
from .corpus import TaggedCorpus, review_mixture
from .errors import ConfigurationError, InvalidInputError, NumericalFailureError
from .model import (
    DenseModel,
    Model,
    MoEModel,
    add_classifiers,
    extend_expansion,
    forward,
    forward_graph,
    partition_params,
    upcycle,
)
from .numerics import SeededRng, Tensor, as_tensor, derive_seed, log_softmax, take_pairs, zero_grads
from .profiler import SimilarityProfile, profile_similarity, select_classifier_layers

# Classifier-layer count defaults: 7 for a single expansion, 5 per step of a
# lifelong sequence (clipped to the model depth at use).
SINGLE_EXPANSION_CLASSIFIER_LAYERS = 7
LIFELONG_CLASSIFIER_LAYERS = 5

# Review-mix ratio of old to new sequences per language (shape of the
# 50K/100K review sampling, scaled to desk size).
REVIEW_RATIO = (1, 2)


@dataclass(frozen=True)
class TrainingRecipe:
    """Hyperparameters of one training stage.

    ``balance_weight``, ``lpr_weight`` and ``cls_weight`` are the composite
    loss weights (defaults 0.01, 0.1, 0.1). ``cls_mode`` selects between a
    standard two-class cross-entropy over all tokens ("standard_ce") and the
    published form that supervises only old tokens ("literal_paper").
    """

    stage: str
    steps: int
    batch_size: int
    seed: int
    learning_rate: float = 5e-5
    momentum: float = 0.0
    balance_weight: float = 0.01
    lpr_weight: float = 0.1
    cls_weight: float = 0.1
    cls_mode: str = "standard_ce"

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if min(self.balance_weight, self.lpr_weight, self.cls_weight) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.cls_mode not in ("standard_ce", "literal_paper"):
            raise ConfigurationError(f"unknown cls_mode {self.cls_mode!r}")


@dataclass(frozen=True)
class LossReport:
    """Per-step loss components. ``total`` is composed exactly as
    ntp + balance_weight * balance (stage 1) or
    ntp + lpr_weight * lpr + cls_weight * cls (stage 2)."""

    step: int
    total: float
    ntp: float
    balance: float
    lpr: float
    cls: float


# ---------------------------------------------------------------------------
# losses


def ntp_loss(logits, targets) -> Tensor:
    """Mean next-token negative log-likelihood (natural log)."""
    logits = as_tensor(logits)
    if logits.ndim == 3:
        logits = logits.reshape((-1, logits.shape[-1]))
    targets = np.asarray(targets).reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise InvalidInputError("logits and targets disagree on position count")
    picked = take_pairs(log_softmax(logits), np.arange(len(targets)), targets)
    return -(picked.mean())


def balance_loss_layer(scores, indices: np.ndarray) -> Tensor:
    """Load-balance value of one layer: sum_i f_i * P_i, where f_i is the
    (N / K|T|)-scaled selection count and P_i the mean router score."""
    scores = as_tensor(scores)
    tokens, n_experts = scores.shape
    if tokens == 0:
        raise InvalidInputError("empty batch")
    indices = np.asarray(indices)
    counts = np.bincount(indices.reshape(-1), minlength=n_experts).astype(np.float64)
    frequency = counts * (n_experts / (indices.shape[1] * tokens))
    return (scores.mean(axis=0) * frequency).sum()


def balance_loss(layers: Sequence[tuple]) -> Tensor:
    """Mean of the per-layer balance values over all MoE layers."""
    if not layers:
        raise InvalidInputError("no layers to balance")
    total = None
    for scores, indices in layers:
        term = balance_loss_layer(scores, indices)
        total = term if total is None else total + term
    return total * (1.0 / len(layers))


def lpr_loss(layer_scores: Sequence, old_mask: np.ndarray) -> Tensor:
    """Prior-routing loss: -log of expert 0's full softmax score, averaged
    over old tokens and layers. Zero when the batch has no old tokens."""
    old_mask = np.asarray(old_mask, dtype=bool).reshape(-1)
    rows = np.nonzero(old_mask)[0]
    if len(layer_scores) == 0:
        raise InvalidInputError("no layers")
    if rows.size == 0:
        return Tensor(0.0)
    zeros = np.zeros(rows.size, dtype=np.int64)
    total = None
    for scores in layer_scores:
        g0 = take_pairs(as_tensor(scores), rows, zeros)
        term = -(g0.log().sum())
        total = term if total is None else total + term
    return total * (1.0 / (rows.size * len(layer_scores)))


def cls_loss(
    layer_logits: Sequence,
    old_mask: np.ndarray,
    valid_mask: np.ndarray,
    mode: str = "standard_ce",
) -> Tensor:
    """Classifier loss over the layers that carry a classifier.

    standard_ce: two-class cross-entropy over every language token, target 0
    for old and 1 for new. literal_paper: only old tokens contribute (the
    published indicator form). Both average per token per layer.
    """
    if len(layer_logits) == 0:
        raise ConfigurationError("no classifier layers configured")
    if mode not in ("standard_ce", "literal_paper"):
        raise InvalidInputError(f"unknown cls mode {mode!r}")
    old_mask = np.asarray(old_mask, dtype=bool).reshape(-1)
    valid_mask = np.asarray(valid_mask, dtype=bool).reshape(-1)
    if mode == "standard_ce":
        rows = np.nonzero(valid_mask)[0]
        targets = np.where(old_mask[rows], 0, 1)
    else:
        rows = np.nonzero(old_mask & valid_mask)[0]
        targets = np.zeros(rows.size, dtype=np.int64)
    if rows.size == 0:
        return Tensor(0.0)
    total = None
    for logits in layer_logits:
        picked = take_pairs(log_softmax(as_tensor(logits)), rows, targets)
        term = -(picked.sum())
        total = term if total is None else total + term
    return total * (1.0 / (rows.size * len(layer_logits)))


# ---------------------------------------------------------------------------
# optimisation


class SGD:
    """Plain gradient descent with optional momentum, updating parameters in
    sorted-name order so runs are reproducible."""

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float, momentum: float = 0.0):
        self.params = dict(params)
        self.names = sorted(self.params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = {n: np.zeros_like(self.params[n].data) for n in self.names}

    def step(self) -> None:
        for name in self.names:
            p = self.params[name]
            if p.grad is None:
                continue
            if self.momentum:
                v = self.velocity[name]
                v *= self.momentum
                v += p.grad
                p.data -= self.learning_rate * v
            else:
                p.data -= self.learning_rate * p.grad


def _train(
    model: Model,
    corpus: TaggedCorpus,
    recipe_like,
    trainable: Sequence[str],
    build_loss,
    stream: str,
) -> list[LossReport]:
    params = {name: model.params[name] for name in trainable}
    gen = SeededRng(derive_seed(recipe_like.seed, stream)).generator()
    optimizer = SGD(params, recipe_like.learning_rate, recipe_like.momentum)
    reports: list[LossReport] = []
    try:
        for p in params.values():
            p.requires_grad = True
        for step in range(recipe_like.steps):
            idx = gen.integers(0, len(corpus), size=recipe_like.batch_size)
            total, parts = build_loss(idx)
            value = total.item()
            if not math.isfinite(value):
                raise NumericalFailureError(f"{stream} loss became non-finite at step {step}")
            zero_grads(params.values())
            total.backward()
            optimizer.step()
            reports.append(LossReport(step=step, total=value, **parts))
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None
    return reports


@dataclass(frozen=True)
class DenseRecipe:
    """Hyperparameters for pre-training the dense backbone."""

    steps: int
    batch_size: int
    seed: int
    learning_rate: float = 5e-5
    momentum: float = 0.0


def stage1_batch_loss(model: MoEModel, tokens: np.ndarray, recipe: TrainingRecipe):
    """Composite stage-1 loss on one batch: ntp + balance_weight * balance."""
    graph = forward_graph(model, tokens[:, :-1])
    ntp = ntp_loss(graph.logits, tokens[:, 1:])
    balance = balance_loss([(g.scores, g.indices) for g in graph.layers])
    total = ntp + recipe.balance_weight * balance
    return total, {"ntp": ntp.item(), "balance": balance.item(), "lpr": 0.0, "cls": 0.0}


def stage2_batch_loss(
    model: MoEModel,
    tokens: np.ndarray,
    old_mask: np.ndarray,
    valid_mask: np.ndarray,
    recipe: TrainingRecipe,
    classifier_layers: Sequence[int],
):
    """Composite stage-2 loss on one batch:
    ntp + lpr_weight * lpr (+ cls_weight * cls on classifier layers).
    Masks cover the fed positions, i.e. tokens[:, :-1] flattened."""
    graph = forward_graph(model, tokens[:, :-1])
    ntp = ntp_loss(graph.logits, tokens[:, 1:])
    lpr = lpr_loss([g.scores for g in graph.layers], old_mask)
    total = ntp + recipe.lpr_weight * lpr
    cls_value = 0.0
    if classifier_layers:
        logits = [graph.layers[i].classifier_logits for i in classifier_layers]
        cls = cls_loss(logits, old_mask, valid_mask, recipe.cls_mode)
        total = total + recipe.cls_weight * cls
        cls_value = cls.item()
    return total, {"ntp": ntp.item(), "balance": 0.0, "lpr": lpr.item(), "cls": cls_value}


def train_dense(model: DenseModel, corpus: TaggedCorpus, recipe: DenseRecipe) -> list[LossReport]:
    """Next-token pre-training of the dense backbone; updates every parameter."""
    if len(corpus) == 0:
        raise InvalidInputError("empty corpus")

    def build(idx):
        tokens = corpus.sequences[idx]
        graph = forward_graph(model, tokens[:, :-1])
        loss = ntp_loss(graph.logits, tokens[:, 1:])
        return loss, {"ntp": loss.item(), "balance": 0.0, "lpr": 0.0, "cls": 0.0}

    return _train(model, corpus, recipe, sorted(model.params), build, "dense")


def stage1_train(
    model: MoEModel, corpus_new: TaggedCorpus, recipe: TrainingRecipe
) -> tuple[MoEModel, list[LossReport]]:
    """New-expert pretraining: only the current expansion's experts and their
    router columns move; the dense backbone and earlier expansions stay
    bitwise unchanged."""
    if recipe.stage != "stage1":
        raise ConfigurationError("recipe is not a stage-1 recipe")
    if not model.expansion_history:
        raise ConfigurationError("model has no expansion to train")
    current_group = model.expansion_history[-1].group
    if len(corpus_new) == 0:
        raise InvalidInputError("empty stage-1 corpus")
    stray = set(corpus_new.groups) - {current_group}
    if stray:
        raise InvalidInputError(
            f"stage-1 corpus must contain only group {current_group!r}, found {sorted(stray)}"
        )
    trainable, _ = partition_params(model, "stage1")

    def build(idx):
        return stage1_batch_loss(model, corpus_new.sequences[idx], recipe)

    reports = _train(model, corpus_new, recipe, trainable, build, "stage1")
    return model, reports


def stage2_train(
    model: MoEModel,
    review_corpus: TaggedCorpus,
    recipe: TrainingRecipe,
    classifier_layers: Sequence[int] = (),
) -> tuple[MoEModel, list[LossReport]]:
    """Router review on mixed data: all router columns plus the classifiers
    train; experts and backbone stay bitwise unchanged. With cls_weight 0 and
    no classifiers this is exactly prior-routing review (the baseline form).
    Training always routes plainly; the classifier gate is inference-only.
    """
    if recipe.stage != "stage2":
        raise ConfigurationError("recipe is not a stage-2 recipe")
    layers = tuple(sorted(int(i) for i in classifier_layers))
    if layers != model.classifier_layers:
        raise ConfigurationError(
            f"model carries classifiers on {model.classifier_layers}, recipe expects {layers}"
        )
    if recipe.cls_weight > 0 and not layers:
        raise ConfigurationError("cls_weight > 0 but no classifier layers configured")
    old_groups = model.old_groups
    old_mask_all = review_corpus.old_token_mask(old_groups)
    if not old_mask_all.any():
        raise InvalidInputError("review corpus has no old-language tokens")
    valid_all = review_corpus.token_mask()
    trainable, _ = partition_params(model, "stage2")

    def build(idx):
        tokens = review_corpus.sequences[idx]
        old_mask = old_mask_all[idx][:, :-1].reshape(-1)
        valid = valid_all[idx][:, :-1].reshape(-1)
        return stage2_batch_loss(model, tokens, old_mask, valid, recipe, layers)

    reports = _train(model, review_corpus, recipe, trainable, build, "stage2")
    return model, reports


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalMetrics:
    mode: str
    perplexity: dict[str, float]
    token_counts: dict[str, int]
    routing_old_fraction: dict[int, float] | None
    classifier_accuracy: dict[int, float] | None
    expert_utilization: dict[int, list[int]] | None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "perplexity": self.perplexity,
            "token_counts": self.token_counts,
            "routing_old_fraction": self.routing_old_fraction,
            "classifier_accuracy": self.classifier_accuracy,
            "expert_utilization": self.expert_utilization,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "key", "value"])
            for lang in sorted(self.perplexity):
                writer.writerow(["perplexity", lang, repr(self.perplexity[lang])])
            if self.routing_old_fraction:
                for layer in sorted(self.routing_old_fraction):
                    writer.writerow(
                        ["routing_old_fraction", layer, repr(self.routing_old_fraction[layer])]
                    )
            if self.classifier_accuracy:
                for layer in sorted(self.classifier_accuracy):
                    writer.writerow(
                        ["classifier_accuracy", layer, repr(self.classifier_accuracy[layer])]
                    )
            if self.expert_utilization:
                for layer in sorted(self.expert_utilization):
                    writer.writerow(
                        ["expert_utilization", layer, " ".join(map(str, self.expert_utilization[layer]))]
                    )


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def evaluate(
    model: Model,
    corpus: TaggedCorpus,
    mode: str = "plain",
    *,
    old_groups: Sequence[str] | None = None,
    max_sequences_per_language: int | None = None,
    batch_size: int = 32,
) -> EvalMetrics:
    """Per-language perplexity plus routing and classifier statistics.

    Perplexity is exp of the mean next-token negative log-likelihood. The
    old-to-expert-0 fraction counts old-language tokens whose top-1 routed
    expert is 0; on gated layers a fired gate counts as expert 0.
    """
    is_moe = isinstance(model, MoEModel)
    if old_groups is None:
        old_groups = model.old_groups if is_moe else ()
    old_groups = tuple(old_groups)

    nll_sum: dict[str, float] = {}
    nll_count: dict[str, int] = {}
    layer_count = model.config.layers
    old_top1_e0 = np.zeros(layer_count, dtype=np.int64)
    old_total = 0
    cls_hits: dict[int, int] = {}
    cls_valid_total = 0
    utilization: dict[int, np.ndarray] | None = None

    for language in corpus.language_set():
        part = corpus.subset_language(language)
        if max_sequences_per_language is not None:
            part = part.take(range(min(len(part), max_sequences_per_language)))
        old_mask_all = part.old_token_mask(old_groups)
        valid_all = part.token_mask()
        for start in range(0, len(part), batch_size):
            seqs = part.sequences[start : start + batch_size]
            inputs, targets = seqs[:, :-1], seqs[:, 1:]
            result = forward(model, inputs, mode=mode)
            log_probs = _log_softmax_np(result.logits)
            nll = -np.take_along_axis(log_probs, targets[..., None], axis=-1)
            nll_sum[language] = nll_sum.get(language, 0.0) + float(nll.sum())
            nll_count[language] = nll_count.get(language, 0) + int(targets.size)
            if result.trace is None:
                continue
            old_mask = old_mask_all[start : start + batch_size][:, :-1]
            valid = valid_all[start : start + batch_size][:, :-1]
            old_total += int(old_mask.sum())
            if utilization is None:
                utilization = {
                    i: np.zeros(t.scores.shape[-1], dtype=np.int64)
                    for i, t in enumerate(result.trace)
                }
            has_classifier = False
            for i, trace in enumerate(result.trace):
                top1 = trace.indices[..., 0]
                if trace.gate_old is not None:
                    top1 = np.where(trace.gate_old, 0, top1)
                old_top1_e0[i] += int((top1[old_mask] == 0).sum())
                utilization[i] += np.bincount(
                    trace.indices.reshape(-1), minlength=utilization[i].size
                )
                if trace.classifier_logits is not None:
                    has_classifier = True
                    pred = trace.classifier_logits.argmax(axis=-1)
                    want = np.where(old_mask, 0, 1)
                    cls_hits[i] = cls_hits.get(i, 0) + int((pred[valid] == want[valid]).sum())
            if has_classifier:
                cls_valid_total += int(valid.sum())

    perplexity = {lang: math.exp(nll_sum[lang] / nll_count[lang]) for lang in nll_sum}
    routing = None
    accuracy = None
    util_out = None
    if is_moe:
        if old_total:
            routing = {i: float(old_top1_e0[i]) / old_total for i in range(layer_count)}
        if cls_hits and cls_valid_total:
            accuracy = {i: cls_hits[i] / cls_valid_total for i in sorted(cls_hits)}
        if utilization is not None:
            util_out = {i: u.tolist() for i, u in utilization.items()}
    return EvalMetrics(mode, perplexity, dict(nll_count), routing, accuracy, util_out)


# ---------------------------------------------------------------------------
# lifelong expansion


@dataclass(frozen=True)
class ExpansionResult:
    group: str
    plan: AllocationPlan
    profile_before: SimilarityProfile
    profile_stage1: SimilarityProfile | None
    classifier_layers: tuple[int, ...]
    stage1_reports: list[LossReport] = field(repr=False, default_factory=list)
    stage2_reports: list[LossReport] = field(repr=False, default_factory=list)


def default_classifier_count(lifelong: bool, layer_count: int) -> int:
    base = LIFELONG_CLASSIFIER_LAYERS if lifelong else SINGLE_EXPANSION_CLASSIFIER_LAYERS
    return min(base, layer_count)


def lifelong_expand(
    model: Model,
    dense_reference: DenseModel | None,
    corpus: TaggedCorpus,
    new_group: str,
    budget: int,
    recipe1: TrainingRecipe,
    recipe2: TrainingRecipe,
    *,
    q: int = 512,
    seed: int = 0,
    classifier_count: int | None = None,
    review_ratio: tuple[int, int] = REVIEW_RATIO,
    plan: AllocationPlan | None = None,
    literal_new_new: bool = False,
    init: str = "inherit",
) -> tuple[MoEModel, ExpansionResult]:
    """One full expansion: profile on the current model, allocate the budget,
    extend the layers (freezing everything pre-existing), run stage 1 on the
    new group, re-profile on the stage-1 model to place classifiers, then run
    stage 2 with "old" covering every previously known group.

    ``classifier_count`` defaults to 7 when expanding a dense model (single
    expansion) and 5 when extending an already expanded one (lifelong),
    clipped to the layer count; 0 disables classifiers (recipe2.cls_weight
    must then be 0). ``plan`` overrides the similarity-driven allocation, for
    uniform or ablation budgets.
    """
    if dense_reference is not None and dense_reference.config != model.config:
        raise ConfigurationError("dense reference does not match the model config")
    proficient = model.proficient_groups if isinstance(model, MoEModel) else model.groups
    if new_group in proficient:
        raise InvalidInputError(f"group {new_group!r} is already proficient")
    group_of = corpus.group_of()
    old_languages = tuple(l for l in corpus.language_set() if group_of[l] in proficient)
    new_languages = tuple(l for l in corpus.language_set() if group_of[l] == new_group)
    if not new_languages:
        raise InvalidInputError(f"corpus has no languages in group {new_group!r}")
    if not old_languages:
        raise InvalidInputError("corpus has no languages in the proficient groups")

    profile_before = profile_similarity(
        model,
        corpus,
        old_languages,
        new_languages,
        q=q,
        seed=derive_seed(seed, "profile-before"),
        literal_new_new=literal_new_new,
    )
    if plan is None:
        plan = allocate(profile_before.indicated, budget)

    if isinstance(model, MoEModel):
        expanded = extend_expansion(model, plan, new_group, init=init)
        lifelong = True
    else:
        expanded = upcycle(model, plan, new_group, init=init)
        lifelong = False

    new_corpus = corpus.subset_groups([new_group])
    expanded, reports1 = stage1_train(expanded, new_corpus, recipe1)

    if classifier_count is None:
        classifier_count = default_classifier_count(lifelong, model.config.layers)
    profile_stage1 = None
    layers: tuple[int, ...] = ()
    if classifier_count > 0:
        profile_stage1 = profile_similarity(
            expanded,
            corpus,
            old_languages,
            new_languages,
            q=q,
            seed=derive_seed(seed, "profile-stage1"),
            literal_new_new=literal_new_new,
        )
        layers = select_classifier_layers(profile_stage1.new_old, classifier_count)
        add_classifiers(expanded, layers)

    review = review_mixture(
        corpus.subset_groups(expanded.old_groups),
        new_corpus,
        review_ratio[0],
        review_ratio[1],
        derive_seed(seed, "review"),
    )
    expanded, reports2 = stage2_train(expanded, review, recipe2, layers)
    return expanded, ExpansionResult(
        new_group, plan, profile_before, profile_stage1, layers, reports1, reports2
    )


def save_reports_csv(reports: Sequence[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "ntp", "balance", "lpr", "cls"])
        for r in reports:
            writer.writerow(
                [r.step, repr(r.total), repr(r.ntp), repr(r.balance), repr(r.lpr), repr(r.cls)]
            )

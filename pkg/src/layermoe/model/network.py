"""Toy decoder-only transformer and its per-layer-variable MoE upcycle.

Fixed architecture (expert-copy initialisation and the checkpoint format
depend on it, so it is pinned here):

- learned token and position embeddings, no dropout, no biases anywhere;
- per block: ``x <- x + attention(rmsnorm(x))`` with causal multi-head
  attention, then ``h = rmsnorm(x)`` and the block output is
  ``experts(h) + h``. That normalised post-attention state ``h`` is exactly
  what the router, the classifier, the profiler tap, and the expert inputs
  all see;
- experts are SiLU-gated FFNs ``down(silu(h @ gate) * (h @ up))``;
- final rmsnorm, untied linear head.

An upcycled layer holds expert 0 (the original dense FFN, frozen), any
number of added experts, one router column per expert, and optionally a
two-class classifier whose "old" verdict bypasses the router entirely at
inference.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..errors import (
    ConfigurationError,
    InvalidInputError,
    PlanMismatchError,
    SequenceLengthError,
)
from ..numerics import (
    SeededRng,
    Tensor,
    derive_seed,
    embedding,
    silu,
    softmax,
    softmax_t,
    stack_columns,
    take_along,
    take_pairs,
    take_rows,
)
from ..numerics.autodiff import assemble_rows, scatter_rows
from .config import ModelConfig

RMS_EPS = 1e-6
INIT_STD = 0.02
# Token embeddings start at residual-stream scale: tokens the backbone never
# trains on (a language expanded later) must still carry strong, mutually
# distinct directions, the way a pretrained multilingual embedding table
# does. Weight-scale init would leave them indistinguishable noise.
TOKEN_EMB_STD = 1.0
NEW_EXPERT_NOISE_STD = 0.01

_MASK_CACHE: dict[int, np.ndarray] = {}


class Expansion(NamedTuple):
    """One language-group expansion: group id plus new experts per layer."""

    group: str
    new_experts: tuple[int, ...]


class Expert:
    """SiLU-gated FFN; callable on a (n, hidden) tensor."""

    def __init__(self, gate: Tensor, up: Tensor, down: Tensor):
        self.gate = gate
        self.up = up
        self.down = down

    def __call__(self, x: Tensor) -> Tensor:
        return (silu(x @ self.gate) * (x @ self.up)) @ self.down


@dataclass
class MoELayer:
    """View of one layer's expert stage. ``experts`` are callables so tests
    can substitute arbitrary functions; real models use :class:`Expert`."""

    index: int
    experts: Sequence[Callable[[Tensor], Tensor]]
    router_columns: Sequence[Tensor]
    top_k: int
    classifier: Tensor | None = None


@dataclass(frozen=True)
class LayerTrace:
    """Routing decisions of one layer for a forwarded batch."""

    indices: np.ndarray  # (batch, length, k) selected experts, best first
    weights: np.ndarray  # (batch, length, k) renormalised mixing weights
    scores: np.ndarray  # (batch, length, n_experts) full softmax scores
    classifier_logits: np.ndarray | None
    gate_old: np.ndarray | None  # (batch, length) bool where the gate fired


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray  # (batch, length, vocab)
    taps: np.ndarray  # (layers, batch, length, hidden) router inputs
    trace: tuple[LayerTrace, ...] | None  # None for dense models


@dataclass
class _LayerGraph:
    """Tape-connected per-layer quantities the losses consume."""

    scores: Tensor  # (n, N)
    indices: np.ndarray  # (n, k)
    weights: Tensor  # (n, k)
    classifier_logits: Tensor | None
    gate_old: np.ndarray | None


@dataclass
class _GraphResult:
    logits: Tensor  # (batch, length, vocab)
    layers: list[_LayerGraph] | None
    taps: list[np.ndarray]


# ---------------------------------------------------------------------------
# parameter initialisation and containers


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return SeededRng(derive_seed(seed, "init", name)).generator()


def _dense_param_specs(config: ModelConfig):
    h, f = config.hidden, config.ffn
    yield "tok_emb", (config.vocab, h), "token_emb"
    yield "pos_emb", (config.context, h), "normal"
    for i in range(config.layers):
        yield f"blocks.{i}.attn_norm", (h,), "ones"
        for name in ("wq", "wk", "wv", "wo"):
            yield f"blocks.{i}.{name}", (h, h), "normal"
        yield f"blocks.{i}.ffn_norm", (h,), "ones"
        yield f"blocks.{i}.ffn.gate", (h, f), "normal"
        yield f"blocks.{i}.ffn.up", (h, f), "normal"
        yield f"blocks.{i}.ffn.down", (f, h), "normal"
    yield "out_norm", (h,), "ones"
    yield "head", (h, config.vocab), "normal"


class DenseModel:
    """The plain transformer: one FFN per layer, nothing routed."""

    kind = "dense"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], groups: Sequence[str] = ()):
        self.config = config
        self.params = params
        self.groups = tuple(groups)

    @classmethod
    def create(cls, config: ModelConfig, groups: Sequence[str] = ()) -> "DenseModel":
        params: dict[str, Tensor] = {}
        for name, shape, init in _dense_param_specs(config):
            if init == "ones":
                data = np.ones(shape, dtype=np.float64)
            else:
                std = TOKEN_EMB_STD if init == "token_emb" else INIT_STD
                data = _init_rng(config.seed, name).normal(0.0, std, size=shape)
            params[name] = Tensor(data)
        return cls(config, params, groups)

    def fingerprint(self) -> str:
        return hash_params(self, sorted(self.params))


class MoEModel:
    """Upcycled transformer with a variable expert count per layer."""

    kind = "moe"

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor],
        base_groups: Sequence[str],
        expansion_history: Sequence[Expansion],
        classifier_layers: Sequence[int] = (),
    ):
        self.config = config
        self.params = params
        self.base_groups = tuple(base_groups)
        self.expansion_history = tuple(
            Expansion(e[0], tuple(int(c) for c in e[1])) for e in expansion_history
        )
        self.classifier_layers = tuple(sorted(int(i) for i in classifier_layers))

    # -- structure ----------------------------------------------------------

    @property
    def proficient_groups(self) -> tuple[str, ...]:
        return self.base_groups + tuple(e.group for e in self.expansion_history)

    @property
    def old_groups(self) -> tuple[str, ...]:
        """Groups the model knew before its most recent expansion."""
        return self.proficient_groups[:-1] if self.expansion_history else self.base_groups

    def expert_counts(self) -> tuple[int, ...]:
        counts = [1] * self.config.layers
        for exp in self.expansion_history:
            for i, c in enumerate(exp.new_experts):
                counts[i] += c
        return tuple(counts)

    def expert_origin(self, layer: int, expert: int) -> int:
        """Expansion index that created an expert; -1 for the dense FFN."""
        if expert == 0:
            return -1
        cursor = 1
        for k, exp in enumerate(self.expansion_history):
            cursor += exp.new_experts[layer]
            if expert < cursor:
                return k
        raise InvalidInputError(f"layer {layer} has no expert {expert}")

    def layer(self, index: int) -> MoELayer:
        n = self.expert_counts()[index]
        experts = [
            Expert(
                self.params[f"blocks.{index}.experts.{e}.gate"],
                self.params[f"blocks.{index}.experts.{e}.up"],
                self.params[f"blocks.{index}.experts.{e}.down"],
            )
            for e in range(n)
        ]
        cols = [self.params[f"blocks.{index}.router.{e}"] for e in range(n)]
        cls = self.params.get(f"blocks.{index}.classifier")
        return MoELayer(index, experts, cols, self.config.top_k, cls)

    def fingerprint(self) -> str:
        return hash_params(self, sorted(self.params))


Model = DenseModel | MoEModel


def hash_params(model: Model, names: Sequence[str]) -> str:
    """SHA-256 over the named parameters' raw bytes; order-insensitive input."""
    digest = hashlib.sha256()
    for name in sorted(names):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# upcycling and expansion


def _plan_counts(plan, layers: int) -> tuple[int, ...]:
    counts = tuple(int(c) for c in getattr(plan, "new_experts", plan))
    if len(counts) != layers:
        raise PlanMismatchError(f"plan covers {len(counts)} layers, model has {layers}")
    if any(c < 0 for c in counts):
        raise PlanMismatchError("negative expert counts")
    return counts


def _spawn_expert(
    model_seed: int,
    expansion: int,
    layer: int,
    expert: int,
    base: dict[str, np.ndarray],
    init: str,
    noise_std: float,
) -> dict[str, np.ndarray]:
    out = {}
    for part, arr in base.items():
        rng = SeededRng(
            derive_seed(model_seed, "expansion", expansion, "layer", layer, "expert", expert, part)
        ).generator()
        if init == "inherit":
            out[part] = arr + rng.normal(0.0, noise_std, size=arr.shape)
        elif init == "random":
            out[part] = rng.normal(0.0, INIT_STD, size=arr.shape)
        else:
            raise InvalidInputError(f"unknown expert init {init!r}")
    return out


def upcycle(
    dense: DenseModel,
    plan,
    group: str,
    *,
    init: str = "inherit",
    noise_std: float = NEW_EXPERT_NOISE_STD,
) -> MoEModel:
    """Turn a dense model into an MoE: per layer, expert 0 is the original
    FFN and ``plan`` new experts are added (default: copies of expert 0 plus
    seeded Gaussian noise). Routers start at zero, so routing begins uniform
    with deterministic tie-breaking."""
    config = dense.config
    counts = _plan_counts(plan, config.layers)
    h = config.hidden
    params: dict[str, Tensor] = {}
    for name, p in dense.params.items():
        if ".ffn." in name:
            continue
        params[name] = Tensor(p.data.copy())
    for i in range(config.layers):
        base = {
            part: dense.params[f"blocks.{i}.ffn.{part}"].data for part in ("gate", "up", "down")
        }
        for part, arr in base.items():
            params[f"blocks.{i}.experts.0.{part}"] = Tensor(arr.copy())
        for j in range(counts[i]):
            e = 1 + j
            spawned = _spawn_expert(config.seed, 0, i, e, base, init, noise_std)
            for part, arr in spawned.items():
                params[f"blocks.{i}.experts.{e}.{part}"] = Tensor(arr)
        for e in range(1 + counts[i]):
            params[f"blocks.{i}.router.{e}"] = Tensor(np.zeros(h))
    return MoEModel(config, params, dense.groups, [Expansion(group, counts)])


def extend_expansion(
    model: MoEModel,
    plan,
    group: str,
    *,
    init: str = "inherit",
    noise_std: float = NEW_EXPERT_NOISE_STD,
) -> MoEModel:
    """Add a further expansion to an existing MoE model. New experts copy the
    layer's expert 0 (the original dense FFN) plus noise; classifiers from the
    previous expansion are dropped, since the next review stage re-selects
    layers and trains fresh ones against the enlarged old group."""
    config = model.config
    counts = _plan_counts(plan, config.layers)
    expansion_index = len(model.expansion_history)
    params = {
        name: Tensor(p.data.copy())
        for name, p in model.params.items()
        if not name.endswith(".classifier")
    }
    existing = model.expert_counts()
    for i in range(config.layers):
        base = {
            part: model.params[f"blocks.{i}.experts.0.{part}"].data
            for part in ("gate", "up", "down")
        }
        for j in range(counts[i]):
            e = existing[i] + j
            spawned = _spawn_expert(config.seed, expansion_index, i, e, base, init, noise_std)
            for part, arr in spawned.items():
                params[f"blocks.{i}.experts.{e}.{part}"] = Tensor(arr)
            params[f"blocks.{i}.router.{e}"] = Tensor(np.zeros(config.hidden))
    history = list(model.expansion_history) + [Expansion(group, counts)]
    return MoEModel(config, params, model.base_groups, history, ())


def add_classifiers(model: MoEModel, layers: Sequence[int]) -> MoEModel:
    """Install zero-initialised two-class classifiers on ``layers``,
    replacing any previous classifier set."""
    layer_ids = tuple(sorted({int(i) for i in layers}))
    if layer_ids and not (0 <= layer_ids[0] and layer_ids[-1] < model.config.layers):
        raise InvalidInputError(f"classifier layers {layer_ids} out of range")
    for name in [n for n in model.params if n.endswith(".classifier")]:
        del model.params[name]
    for i in layer_ids:
        model.params[f"blocks.{i}.classifier"] = Tensor(np.zeros((model.config.hidden, 2)))
    model.classifier_layers = layer_ids
    return model


# ---------------------------------------------------------------------------
# forward passes


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def _causal_mask(length: int) -> np.ndarray:
    mask = _MASK_CACHE.get(length)
    if mask is None:
        visible = np.tril(np.ones((length, length), dtype=bool))
        mask = np.where(visible, 0.0, -1e30).reshape(1, 1, length, length)
        _MASK_CACHE[length] = mask
    return mask


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, t, h = x.shape
    dh = h // heads
    flat = x.reshape((b * t, h))

    def split(name):
        return (flat @ params[f"{prefix}.{name}"]).reshape((b, t, heads, dh)).transpose((0, 2, 1, 3))

    q, k, v = split("wq"), split("wk"), split("wv")
    att = softmax_t(q @ k.transpose((0, 1, 3, 2)) * (dh**-0.5) + Tensor(_causal_mask(t)))
    ctx = (att @ v).transpose((0, 2, 1, 3)).reshape((b * t, h))
    return (ctx @ params[f"{prefix}.wo"]).reshape((b, t, h))


def route(x: np.ndarray, router: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Select min(top_k, n_experts) experts for one hidden vector.

    Returns (indices, weights): indices in descending-score order with ties
    broken toward the lower expert index; weights are the selected softmax
    scores renormalised to sum to one.
    """
    x = np.asarray(x, dtype=np.float64)
    router = np.asarray(router, dtype=np.float64)
    if top_k < 1:
        raise InvalidInputError("top_k must be >= 1")
    if x.ndim != 1 or router.ndim != 2 or router.shape[0] != x.shape[0]:
        raise InvalidInputError(f"bad shapes for routing: {x.shape} @ {router.shape}")
    scores = softmax(x @ router)
    k = min(top_k, router.shape[1])
    indices = np.argsort(-scores, kind="stable")[:k]
    selected = scores[indices]
    return indices, selected / selected.sum()


def _select(scores: np.ndarray, top_k: int) -> np.ndarray:
    k = min(top_k, scores.shape[1])
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _moe_mix(hsa: Tensor, layer: MoELayer, mode: str) -> tuple[Tensor, _LayerGraph]:
    """Expert stage on flattened rows: weighted expert mix plus residual,
    optionally overridden row-wise by the classifier gate."""
    n_rows = hsa.shape[0]
    n_experts = len(layer.experts)
    if n_experts < 1 or len(layer.router_columns) != n_experts:
        raise ConfigurationError("layer needs one router column per expert")
    if mode not in ("plain", "gated"):
        raise InvalidInputError(f"unknown forward mode {mode!r}")
    if mode == "gated" and layer.classifier is None:
        raise ConfigurationError(f"layer {layer.index} has no classifier to gate with")

    scores = softmax_t(hsa @ stack_columns(layer.router_columns))
    indices = _select(scores.data, layer.top_k)
    selected = take_along(scores, indices)
    weights = selected / selected.sum(axis=1, keepdims=True)

    mixed = None
    for e in range(n_experts):
        rows, slots = np.nonzero(indices == e)
        if rows.size == 0:
            continue
        we = take_pairs(weights, rows, slots).reshape((-1, 1))
        ye = layer.experts[e](take_rows(hsa, rows)) * we
        piece = scatter_rows(ye, rows, n_rows)
        mixed = piece if mixed is None else mixed + piece
    out = mixed + hsa

    cls_logits = (hsa @ layer.classifier) if layer.classifier is not None else None
    gate_old = None
    if mode == "gated":
        gate_old = cls_logits.data.argmax(axis=1) == 0
        old_rows = np.nonzero(gate_old)[0]
        new_rows = np.nonzero(~gate_old)[0]
        if old_rows.size:
            bypass = layer.experts[0](take_rows(hsa, old_rows)) + take_rows(hsa, old_rows)
            pieces = [(old_rows, bypass)]
            if new_rows.size:
                pieces.append((new_rows, take_rows(out, new_rows)))
            out = assemble_rows(pieces, n_rows)
    return out, _LayerGraph(scores, indices, weights, cls_logits, gate_old)


def moe_layer_forward(x: np.ndarray, layer: MoELayer, mode: str = "plain") -> np.ndarray:
    """One layer's expert stage on a single hidden vector or a row batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    out, _ = _moe_mix(Tensor(arr.reshape(1, -1) if single else arr), layer, mode)
    return out.data[0] if single else out.data


def forward_graph(
    model: Model, tokens: np.ndarray, *, mode: str = "plain", want_taps: bool = False
) -> _GraphResult:
    """Run the model, keeping the tape alive wherever parameters require
    gradients. Returns tape-connected logits and per-layer routing values."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InvalidInputError("tokens must be one or two dimensional")
    config = model.config
    if tokens.shape[1] > config.context:
        raise SequenceLengthError(
            f"sequence length {tokens.shape[1]} exceeds context {config.context}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise InvalidInputError("token id out of vocabulary")

    b, t = tokens.shape
    h = config.hidden
    params = model.params
    x = embedding(params["tok_emb"], tokens) + embedding(params["pos_emb"], np.arange(t))
    is_moe = isinstance(model, MoEModel)
    layers: list[_LayerGraph] | None = [] if is_moe else None
    taps: list[np.ndarray] = []
    for i in range(config.layers):
        prefix = f"blocks.{i}"
        x = x + _attention(x, params, prefix, config.heads)
        hsa = rmsnorm(x, params[f"{prefix}.ffn_norm"]).reshape((b * t, h))
        if want_taps:
            taps.append(hsa.data.reshape(b, t, h))
        if is_moe:
            out, graph = _moe_mix(hsa, model.layer(i), mode)
            layers.append(graph)
        else:
            expert = Expert(
                params[f"{prefix}.ffn.gate"],
                params[f"{prefix}.ffn.up"],
                params[f"{prefix}.ffn.down"],
            )
            out = expert(hsa) + hsa
        x = out.reshape((b, t, h))
    final = rmsnorm(x, params["out_norm"]).reshape((b * t, h))
    logits = (final @ params["head"]).reshape((b, t, config.vocab))
    return _GraphResult(logits, layers, taps)


def forward(model: Model, tokens: np.ndarray, mode: str = "plain") -> ForwardResult:
    """Inference forward: logits, per-layer router-input taps, routing trace."""
    if mode == "gated" and (not isinstance(model, MoEModel) or not model.classifier_layers):
        raise ConfigurationError("gated mode needs a model with classifiers")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    graph_mode = "plain"
    if mode == "gated":
        graph_mode = "gated"
    result = _run_gated_aware(model, tokens, graph_mode)
    b, t = tokens.shape
    trace = None
    if result.layers is not None:
        trace = tuple(
            LayerTrace(
                indices=g.indices.reshape(b, t, -1),
                weights=g.weights.data.reshape(b, t, -1),
                scores=g.scores.data.reshape(b, t, -1),
                classifier_logits=(
                    g.classifier_logits.data.reshape(b, t, 2)
                    if g.classifier_logits is not None
                    else None
                ),
                gate_old=g.gate_old.reshape(b, t) if g.gate_old is not None else None,
            )
            for g in result.layers
        )
    return ForwardResult(result.logits.data, np.stack(result.taps), trace)


def _run_gated_aware(model: Model, tokens: np.ndarray, mode: str) -> _GraphResult:
    # Gating only applies on layers that carry a classifier; forward_graph's
    # _moe_mix gates per layer, so route "gated" only where one exists.
    if mode != "gated":
        return forward_graph(model, tokens, mode=mode, want_taps=True)
    return _forward_mixed_gating(model, tokens)


def _forward_mixed_gating(model: MoEModel, tokens: np.ndarray) -> _GraphResult:
    config = model.config
    b, t = tokens.shape
    h = config.hidden
    params = model.params
    x = embedding(params["tok_emb"], tokens) + embedding(params["pos_emb"], np.arange(t))
    layers: list[_LayerGraph] = []
    taps: list[np.ndarray] = []
    gate_set = set(model.classifier_layers)
    for i in range(config.layers):
        prefix = f"blocks.{i}"
        x = x + _attention(x, params, prefix, config.heads)
        hsa = rmsnorm(x, params[f"{prefix}.ffn_norm"]).reshape((b * t, h))
        taps.append(hsa.data.reshape(b, t, h))
        out, graph = _moe_mix(hsa, model.layer(i), "gated" if i in gate_set else "plain")
        layers.append(graph)
        x = out.reshape((b, t, h))
    final = rmsnorm(x, params["out_norm"]).reshape((b * t, h))
    logits = (final @ params["head"]).reshape((b, t, config.vocab))
    return _GraphResult(logits, layers, taps)


# ---------------------------------------------------------------------------
# parameter partitions


def partition_params(model: MoEModel, stage: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Trainable / frozen parameter names for a training stage.

    stage1: the most recent expansion's experts plus their router columns.
    stage2: every router column plus every classifier.
    The two sets are disjoint and jointly cover all parameters.
    """
    if not isinstance(model, MoEModel):
        raise ConfigurationError("partition_params needs an upcycled model")
    if stage not in ("stage1", "stage2"):
        raise InvalidInputError(f"unknown stage {stage!r}")
    trainable: list[str] = []
    if stage == "stage1":
        if not model.expansion_history:
            raise ConfigurationError("model has no expansion to train")
        last = len(model.expansion_history) - 1
        counts = model.expansion_history[last].new_experts
        for i in range(model.config.layers):
            start = 1 + sum(e.new_experts[i] for e in model.expansion_history[:last])
            for e in range(start, start + counts[i]):
                trainable.extend(
                    f"blocks.{i}.experts.{e}.{part}" for part in ("gate", "up", "down")
                )
                trainable.append(f"blocks.{i}.router.{e}")
        if not trainable:
            raise ConfigurationError("stage-1 trainable set is empty (no new experts)")
    else:
        for name in model.params:
            if ".router." in name or name.endswith(".classifier"):
                trainable.append(name)
    trainable_set = frozenset(trainable)
    frozen = tuple(sorted(set(model.params) - trainable_set))
    return tuple(sorted(trainable_set)), frozen

"""Bi-directional GCN rumour classifier over top-down and bottom-up reply graphs."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from . import textembed
from .errors import CheckpointError, ConfigError, InputError, ModelError
from .graphdata import PropagationEvent, atomic_write_text, train_val_split

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctlrp-checkpoint"
CHECKPOINT_VERSION = 1
BRANCHES = ("td", "bu")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = textembed.DEFAULT_EMBED_DIM
    hidden_dim: int = 64
    pooling: str = "mean"
    bias: bool = True

    def validate(self):
        if self.vocab_size < 1 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise ModelError("vocab_size, embed_dim and hidden_dim must be positive")
        if self.num_classes < 2:
            raise ModelError("need at least two classes")
        textembed.check_pooling(self.pooling)


def param_names(config: ModelConfig) -> list[str]:
    names = ["embedding", "cls_w"]
    for br in BRANCHES:
        names += [f"{br}_w1", f"{br}_w2"]
        if config.bias:
            names += [f"{br}_b1", f"{br}_b2"]
    if config.bias:
        names.append("cls_b")
    if config.pooling == "mlp":
        names += ["pool_w", "pool_b"] if config.bias else ["pool_w"]
    return sorted(names)


@dataclass
class BiGcnModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "BiGcnModel":
        config.validate()
        rng = np.random.default_rng(seed)
        e, h, c = config.embed_dim, config.hidden_dim, config.num_classes

        def glorot(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        params = {"embedding": textembed.init_embedding(config.vocab_size, e, rng)}
        if config.pooling == "mlp":
            params["pool_w"] = glorot(e, e)
        for br in BRANCHES:
            params[f"{br}_w1"] = glorot(e, h)
            params[f"{br}_w2"] = glorot(h, h)
        params["cls_w"] = glorot(2 * h, c)
        if config.bias:
            if config.pooling == "mlp":
                params["pool_b"] = np.zeros(e)
            for br in BRANCHES:
                params[f"{br}_b1"] = np.zeros(h)
                params[f"{br}_b2"] = np.zeros(h)
            params["cls_b"] = np.zeros(c)
        return cls(config, params, seed)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def copy(self) -> "BiGcnModel":
        return BiGcnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def mlp(self):
        if self.config.pooling != "mlp":
            return None
        return self.params["pool_w"], self.params.get("pool_b")


@dataclass
class ForwardPass:
    event: PropagationEvent
    embedded: textembed.EmbeddedEvent
    branches: dict[str, list]  # per-branch tape: agg, linear, relu, agg, linear, relu, mean
    concat: nk.LayerTrace
    classifier: nk.LayerTrace

    @property
    def logits(self) -> np.ndarray:
        return self.classifier.output[0]

    @property
    def features(self) -> np.ndarray:
        return self.embedded.features

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    @property
    def traces(self) -> list[nk.LayerTrace]:
        return [*self.branches["td"], *self.branches["bu"], self.concat, self.classifier]


def forward(model: BiGcnModel, event: PropagationEvent, drop=frozenset()) -> ForwardPass:
    """Logits plus every layer trace.  ``drop`` removes (node, position) tokens."""
    p = model.params
    if p["embedding"].shape != (model.config.vocab_size, model.config.embed_dim):
        raise ModelError("embedding table does not match the model config")
    embedded = textembed.embed_event(
        event.tokens, p["embedding"], model.config.pooling, model.mlp(), drop
    )
    adj = event.adjacency
    operators = {"td": adj.top_down_norm, "bu": adj.bottom_up_norm}
    branches, readouts = {}, []
    for br in BRANCHES:
        tape = []
        h = embedded.features
        for layer in (1, 2):
            h = nk.aggregate_forward(h, operators[br], tape=tape)
            h = nk.linear_forward(h, p[f"{br}_w{layer}"], p.get(f"{br}_b{layer}"), tape=tape)
            h = nk.relu_forward(h, tape=tape)
        readouts.append(nk.mean_readout_forward(h, tape=tape))
        branches[br] = tape
    cat_tape = []
    joined = nk.concat_forward(*readouts, tape=cat_tape)
    nk.linear_forward(joined, p["cls_w"], p.get("cls_b"), tape=cat_tape)
    return ForwardPass(event, embedded, branches, cat_tape[0], cat_tape[1])


def predict(model: BiGcnModel, event: PropagationEvent) -> int:
    return forward(model, event).prediction


def perturbed_forward(model: BiGcnModel, event: PropagationEvent, drop: tuple[int, int]) -> np.ndarray:
    """Logits with one token ``(node, position)`` removed before pooling."""
    v, t = drop
    if not (0 <= v < event.num_nodes and 0 <= t < len(event.posts[v].tokens)):
        raise InputError(f"no token at node {v}, position {t} in event {event.event_id!r}")
    return forward(model, event, frozenset([(v, t)])).logits


def backward(model: BiGcnModel, fp: ForwardPass, seed) -> dict[str, np.ndarray]:
    """Gradients of ``seed . logits`` w.r.t. every parameter."""
    seed = np.asarray(seed, dtype=np.float64).reshape(1, -1)
    grads = {}
    (g_cat,), cls_grads = nk.grad_layer(fp.classifier, seed)
    grads["cls_w"] = cls_grads["weights"]
    if "bias" in cls_grads:
        grads["cls_b"] = cls_grads["bias"]
    g_parts, _ = nk.grad_layer(fp.concat, g_cat)
    g_x = np.zeros_like(fp.features)
    for br, g in zip(BRANCHES, g_parts):
        res = nk.grad_backward(fp.branches[br], g)
        g_x += res.input_grad
        for layer, idx in ((1, 1), (2, 4)):
            grads[f"{br}_w{layer}"] = res.param_grads[idx]["weights"]
            if "bias" in res.param_grads[idx]:
                grads[f"{br}_b{layer}"] = res.param_grads[idx]["bias"]
    ids, rows, mlp_grads = textembed.embed_backward(fp.embedded, g_x)
    table_grad = np.zeros_like(model.params["embedding"])
    np.add.at(table_grad, ids, rows)
    grads["embedding"] = table_grad
    if model.config.pooling == "mlp":
        grads["pool_w"] = mlp_grads.get("weights", np.zeros_like(model.params["pool_w"]))
        if "pool_b" in model.params:
            grads["pool_b"] = mlp_grads.get("bias", np.zeros_like(model.params["pool_b"]))
    return grads


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the logits."""
    shifted = logits - logits.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.patience < 0:
            raise ConfigError(f"invalid training config {self}")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: BiGcnModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def evaluate(model: BiGcnModel, events: Sequence[PropagationEvent]) -> tuple[float, float]:
    """Mean cross-entropy and accuracy."""
    if not events:
        return float("nan"), float("nan")
    losses, hits = 0.0, 0
    for ev in events:
        logits = forward(model, ev).logits
        losses += cross_entropy(logits, ev.label)[0]
        hits += int(np.argmax(logits) == ev.label)
    return losses / len(events), hits / len(events)


def train(
    model: BiGcnModel,
    events: Sequence[PropagationEvent],
    config: TrainConfig = TrainConfig(),
    val_events: Sequence[PropagationEvent] | None = None,
) -> TrainResult:
    """Adam on mean cross-entropy with early stopping on the monitored loss.

    The monitored loss is validation loss when a validation split exists,
    otherwise training loss.  The best-scoring parameters are returned.
    """
    config.validate()
    if val_events is None and config.val_fraction > 0:
        train_events, val_events = train_val_split(events, config.val_fraction, config.seed)
    else:
        train_events, val_events = list(events), list(val_events or [])
    for ev in (*train_events, *val_events):
        if ev.label >= model.num_classes:
            raise ConfigError(f"event {ev.event_id!r} label {ev.label} >= {model.num_classes} classes")
    if len({ev.label for ev in train_events}) < 2:
        raise ConfigError("training split must contain at least two classes")

    model = model.copy()
    opt = Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best = (np.inf, model.copy(), 0)
    stale = 0
    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_events))
        total, hits = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_events[i] for i in order[start:start + config.batch_size]]
            acc = {k: np.zeros_like(v) for k, v in model.params.items()}
            for ev in batch:
                fp = forward(model, ev)
                loss, dlogits = cross_entropy(fp.logits, ev.label)
                total += loss
                hits += int(fp.prediction == ev.label)
                for k, g in backward(model, fp, dlogits).items():
                    acc[k] += g
            opt.step(model.params, {k: g / len(batch) for k, g in acc.items()})
        row = {"epoch": epoch, "train_loss": total / len(train_events), "train_acc": hits / len(train_events)}
        if val_events:
            row["val_loss"], row["val_acc"] = evaluate(model, val_events)
            monitored = row["val_loss"]
        else:
            monitored = row["train_loss"]
        result.history.append(row)
        log.info("epoch %d %s", epoch, row)
        if monitored < best[0]:
            best = (monitored, model.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= max(config.patience, 1):
                result.stopped_early = True
                break
    result.model = best[1]
    result.best_epoch = best[2]
    return result


# -- checkpoints ---------------------------------------------------------------


def checkpoint_dict(model: BiGcnModel, meta: dict | None = None) -> dict:
    tensors = []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float64-le",
            "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
        })
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "meta": dict(meta or {}),
        "tensors": tensors,
    }


def dumps_checkpoint(model: BiGcnModel, meta: dict | None = None) -> str:
    return json.dumps(checkpoint_dict(model, meta), indent=1, sort_keys=True) + "\n"


def save_checkpoint(model: BiGcnModel, path, meta: dict | None = None) -> None:
    atomic_write_text(path, dumps_checkpoint(model, meta))


def loads_checkpoint(text: str) -> tuple[BiGcnModel, dict]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a checkpoint file: {exc.msg}") from None
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a ctlrp checkpoint")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {raw.get('version')}")
    config = ModelConfig(**raw["config"])
    config.validate()
    params = {}
    for t in raw["tensors"]:
        if t["dtype"] != "float64-le":
            raise CheckpointError(f"tensor {t['name']}: unsupported dtype {t['dtype']}")
        arr = np.frombuffer(base64.b64decode(t["data"]), dtype="<f8")
        if arr.size != int(np.prod(t["shape"])):
            raise CheckpointError(f"tensor {t['name']}: payload does not match shape")
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    expected = set(param_names(config))
    if set(params) != expected:
        raise CheckpointError(f"tensor set mismatch: {sorted(set(params) ^ expected)}")
    return BiGcnModel(config, params, raw.get("seed")), raw.get("meta", {})


def load_checkpoint(path) -> tuple[BiGcnModel, dict]:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())

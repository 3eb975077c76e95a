"""Attribution methods over a trained BiGCN.

Token-level: ``ct_lrp`` (contrastive) and ``lrp_token``.
Node-level baselines: ``lrp_node``, ``grad_cam``, ``c_eb``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numkernel as nk
from . import textembed
from .errors import ConfigError, InputError
from .graphdata import PropagationEvent
from .model import BRANCHES, BiGcnModel, ForwardPass, forward, perturbed_forward

TOKEN_METHODS = ("ct-lrp", "token-lrp")
NODE_METHODS = ("node-lrp", "grad-cam", "c-eb")
METHODS = TOKEN_METHODS + NODE_METHODS

# branch tape positions, see model.forward
_FINAL_CONV = 5
# logit drops closer than this (scaled by max |y|) count as ties
RETENTION_TOL = 1e-9


@dataclass
class NodeRelevance:
    target: int
    relevance: np.ndarray  # |V| x |D|, same shape as the node features


@dataclass
class Explanation:
    event_id: str
    method: str
    predicted: int
    logits: np.ndarray
    token_scores: dict[int, list[np.ndarray]] | None = None  # class -> per-node z
    mask: list[np.ndarray] | None = None
    node_scores: np.ndarray | None = None
    target: int | None = None
    low_confidence: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def is_token_level(self) -> bool:
        return self.method in TOKEN_METHODS

    def kept_tokens(self) -> list[tuple[int, int]]:
        return [(v, int(t)) for v, m in enumerate(self.mask or []) for t in np.flatnonzero(m)]

    def elements(self) -> list[tuple[float, tuple[int, int] | int]]:
        """(score, element) for every element the explanation can select.

        Token methods yield only masked-in tokens, scored by z of the
        target class; node methods yield every node.
        """
        if self.is_token_level:
            z = self.token_scores[self.target]
            return [(float(z[v][t]), (v, t)) for v, t in self.kept_tokens()]
        return [(float(s), v) for v, s in enumerate(self.node_scores)]

    def to_dict(self, event: PropagationEvent) -> dict:
        out = {
            "event_id": self.event_id,
            "method": self.method,
            "predicted": self.predicted,
            "target": self.target,
            "logits": [float(x) for x in self.logits],
            "low_confidence": self.low_confidence,
            "meta": dict(self.meta),
        }
        if self.is_token_level:
            records = []
            for v, post in enumerate(event.posts):
                for t, tok in enumerate(post.tokens):
                    records.append({
                        "node": v,
                        "position": t,
                        "token": tok,
                        "z": {str(c): float(z[v][t]) for c, z in sorted(self.token_scores.items())},
                        "kept": bool(self.mask[v][t]),
                    })
            out["tokens"] = records
            out["node_scores"] = None
        else:
            out["tokens"] = None
            out["node_scores"] = [float(s) for s in self.node_scores]
        return out


def _check_class(model: BiGcnModel, c: int) -> int:
    if not 0 <= c < model.num_classes:
        raise InputError(f"class {c} out of range for {model.num_classes} classes")
    return int(c)


def _low_confidence(logits) -> bool:
    return bool(np.ptp(logits) < 1e-12)


# -- LRP ---------------------------------------------------------------------


def lrp_gnn(
    model: BiGcnModel,
    event: PropagationEvent,
    target: int,
    eps: float = nk.DEFAULT_EPS,
    fp: ForwardPass | None = None,
) -> NodeRelevance:
    """Epsilon-LRP from logit ``target`` down to the node feature matrix.

    The seed keeps only the target logit.  Relevance from the two branches
    is summed where they share the feature matrix; graph structure is
    fixed and receives no relevance of its own.
    """
    _check_class(model, target)
    fp = fp or forward(model, event)
    seed = np.zeros_like(fp.classifier.output)
    seed[0, target] = fp.classifier.output[0, target]
    (r_cat,) = nk.lrp_layer(fp.classifier, seed, eps)
    parts = nk.lrp_layer(fp.concat, r_cat, eps)
    relevance = np.zeros_like(fp.features)
    for br, r in zip(BRANCHES, parts):
        relevance += nk.lrp_backward(fp.branches[br], r, eps)
    return NodeRelevance(target, relevance)


def _token_maps(model, event, eps, mode, classes, fp):
    maps = {}
    for c in classes:
        rel = lrp_gnn(model, event, c, eps, fp)
        maps[c] = textembed.lrp_text(fp.embedded, rel.relevance, eps, mode)
    return maps


def lrp_token(
    model: BiGcnModel,
    event: PropagationEvent,
    target: int | None = None,
    eps: float = nk.DEFAULT_EPS,
    mode: str = "conserving",
) -> Explanation:
    """Token LRP for one class without the contrastive step; mask is z > 0."""
    fp = forward(model, event)
    target = fp.prediction if target is None else _check_class(model, target)
    maps = _token_maps(model, event, eps, mode, [target], fp)
    return Explanation(
        event.event_id, "token-lrp", fp.prediction, fp.logits.copy(),
        token_scores=maps, mask=[z > 0 for z in maps[target]], target=target,
        low_confidence=_low_confidence(fp.logits), meta={"eps": eps, "mode": mode},
    )


def ct_lrp(
    model: BiGcnModel,
    event: PropagationEvent,
    eps: float = nk.DEFAULT_EPS,
    mode: str = "conserving",
) -> Explanation:
    """Contrastive token LRP.

    A token positive for the predicted class is kept unless it is also
    positive for some other class ``c`` and removing it does not lower the
    predicted logit strictly more than it lowers ``y_c``.  Every such ``c``
    must be beaten.
    """
    if model.num_classes < 2:
        raise ConfigError("contrastive explanation needs at least two classes")
    fp = forward(model, event)
    y = fp.logits
    y_hat = fp.prediction
    maps = _token_maps(model, event, eps, mode, range(model.num_classes), fp)
    z_hat = maps[y_hat]
    mask = []
    perturbations = 0
    for v, z_v in enumerate(z_hat):
        keep = np.zeros(len(z_v), dtype=bool)
        for t, score in enumerate(z_v):
            if score <= 0:
                continue
            rivals = [c for c in maps if c != y_hat and maps[c][v][t] > 0]
            if not rivals:
                keep[t] = True
                continue
            y_pert = perturbed_forward(model, event, (v, t))
            perturbations += 1
            keep[t] = retained(y, y_pert, y_hat, rivals)
        mask.append(keep)
    return Explanation(
        event.event_id, "ct-lrp", y_hat, y.copy(), token_scores=maps, mask=mask,
        target=y_hat, low_confidence=_low_confidence(y),
        meta={"eps": eps, "mode": mode, "perturbations": perturbations},
    )


def retained(y, y_pert, y_hat: int, rivals) -> bool:
    """Strict retention test: the predicted logit must drop more than each rival's."""
    tol = RETENTION_TOL * max(1.0, float(np.max(np.abs(y))))
    own_drop = y[y_hat] - y_pert[y_hat]
    return all(own_drop - (y[c] - y_pert[c]) > tol for c in rivals)


def lrp_node(
    model: BiGcnModel, event: PropagationEvent, target: int | None = None, eps: float = nk.DEFAULT_EPS
) -> Explanation:
    fp = forward(model, event)
    target = fp.prediction if target is None else _check_class(model, target)
    rel = lrp_gnn(model, event, target, eps, fp)
    return _node_explanation(event, "node-lrp", fp, target, node_lrp_scores(rel.relevance), eps=eps)


def node_lrp_scores(relevance: np.ndarray) -> np.ndarray:
    return relevance.sum(axis=1)


def _node_explanation(event, method, fp, target, scores, **meta):
    return Explanation(
        event.event_id, method, fp.prediction, fp.logits.copy(), node_scores=scores,
        target=target, low_confidence=_low_confidence(fp.logits), meta=meta,
    )


# -- Grad-CAM ----------------------------------------------------------------


def grad_cam_scores(fp: ForwardPass, target: int) -> np.ndarray:
    seed = np.zeros_like(fp.classifier.output)
    seed[0, target] = 1.0
    (g_cat,), _ = nk.grad_layer(fp.classifier, seed)
    g_parts, _ = nk.grad_layer(fp.concat, g_cat)
    scores = np.zeros(fp.features.shape[0])
    for br, g in zip(BRANCHES, g_parts):
        tape = fp.branches[br]
        res = nk.grad_backward(tape, g)
        acts = tape[_FINAL_CONV].output
        alpha = res.output_grads[_FINAL_CONV].mean(axis=0)
        scores += np.maximum(acts @ alpha, 0.0)
    return scores


def grad_cam(model: BiGcnModel, event: PropagationEvent, target: int | None = None) -> Explanation:
    """Final-conv activations weighted by node-averaged gradients, per branch."""
    fp = forward(model, event)
    target = fp.prediction if target is None else _check_class(model, target)
    return _node_explanation(event, "grad-cam", fp, target, grad_cam_scores(fp, target))


# -- contrastive excitation backprop --------------------------------------------


def _wta(a, w, p):
    """Winner-take-all step: distribute ``p`` over inputs ``a`` via weights ``w``.

    a: n x i nonnegative inputs, w: i x k nonnegative weights, p: n x k.
    """
    z = a @ w
    ratio = np.divide(p, z, out=np.zeros_like(p), where=z > 0)
    return a * (ratio @ w.T)


def eb_layer(trace: nk.LayerTrace, upstream: np.ndarray) -> tuple:
    """Excitation backprop through one layer using positive weights and inputs."""
    kind = trace.kind
    if kind == nk.LINEAR:
        w = np.maximum(trace.params["weights"], 0.0)
        return (_wta(np.maximum(trace.input, 0.0), w, upstream),)
    if kind == nk.RELU:
        return (upstream,)
    if kind == nk.AGGREGATE:
        # out[v] = sum_u adj[v, u] x[u]: per column, inputs are nodes
        adj = np.maximum(trace.params["adjacency"], 0.0)
        x = np.maximum(trace.input, 0.0)
        z = adj @ x
        ratio = np.divide(upstream, z, out=np.zeros_like(upstream), where=z > 0)
        return (x * (adj.T @ ratio),)
    if kind == nk.MEAN_READOUT:
        x = np.maximum(trace.input, 0.0)
        z = x.sum(axis=0, keepdims=True)
        ratio = np.divide(upstream, z, out=np.zeros_like(upstream), where=z > 0)
        return (x * ratio,)
    if kind == nk.CONCAT:
        return tuple(nk.lrp_layer(trace, upstream))
    raise ConfigError(f"unknown layer kind {kind!r}")


def excitation_map(fp: ForwardPass, seed: np.ndarray) -> np.ndarray:
    """Marginal winning probabilities at the node features for a top-layer seed."""
    (p,) = eb_layer(fp.classifier, np.asarray(seed, dtype=np.float64).reshape(1, -1))
    parts = eb_layer(fp.concat, p)
    out = np.zeros_like(fp.features)
    for br, q in zip(BRANCHES, parts):
        for trace in reversed(fp.branches[br]):
            (q,) = eb_layer(trace, q)
        out += q
    return out


def c_eb_scores(fp: ForwardPass, target: int) -> np.ndarray:
    k = fp.logits.shape[0]
    own = np.zeros(k)
    own[target] = 1.0
    others = np.full(k, 1.0 / (k - 1))
    others[target] = 0.0
    diff = excitation_map(fp, own) - excitation_map(fp, others)
    return np.maximum(diff.sum(axis=1), 0.0)


def c_eb(model: BiGcnModel, event: PropagationEvent, target: int | None = None) -> Explanation:
    """Target-class excitation minus the mean-of-other-classes excitation, clipped at 0."""
    fp = forward(model, event)
    target = fp.prediction if target is None else _check_class(model, target)
    return _node_explanation(event, "c-eb", fp, target, c_eb_scores(fp, target))


def get_method(name: str) -> Callable[..., Explanation]:
    try:
        return {
            "ct-lrp": ct_lrp,
            "token-lrp": lrp_token,
            "node-lrp": lrp_node,
            "grad-cam": grad_cam,
            "c-eb": c_eb,
        }[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}") from None


def explain(model: BiGcnModel, event: PropagationEvent, method: str, eps: float = nk.DEFAULT_EPS,
            mode: str = "conserving") -> Explanation:
    fn = get_method(method)
    if method in ("ct-lrp", "token-lrp"):
        return fn(model, event, eps=eps, mode=mode)
    if method == "node-lrp":
        return fn(model, event, eps=eps)
    return fn(model, event)

"""Dense float64 layers that record their activations.

Every forward function optionally appends a :class:`LayerTrace` to a tape
(a plain list).  The same trace feeds reverse-mode gradients
(:func:`grad_backward`) and epsilon-LRP relevance (:func:`lrp_backward`),
so both always walk the exact computation that produced the logits.

Matrices are ``numpy.ndarray`` of dtype float64.  Row vectors are 1×n.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, UsageError

DEFAULT_EPS = 1e-6

LINEAR = "linear"
RELU = "relu"
AGGREGATE = "graph-aggregate"
MEAN_READOUT = "mean-readout"
CONCAT = "concat"
LAYER_KINDS = (LINEAR, RELU, AGGREGATE, MEAN_READOUT, CONCAT)


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise DimensionError."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D data, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name}: contains NaN or Inf")
    return arr


def check_eps(eps: float) -> float:
    eps = float(eps)
    if not eps > 0:
        raise UsageError(f"epsilon must be > 0, got {eps}")
    return eps


def stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    """Push ``z`` away from zero by ``eps`` in its own direction (0 counts as +)."""
    return z + np.where(z >= 0, eps, -eps)


@dataclass(frozen=True, eq=False)
class LayerTrace:
    """One recorded layer application.

    ``inputs`` is a tuple because concat has two operands; every other
    kind has exactly one.
    """

    kind: str
    inputs: tuple
    output: np.ndarray
    params: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def input(self) -> np.ndarray:
        return self.inputs[0]

    def replay(self) -> np.ndarray:
        return _FORWARD[self.kind](*self.inputs, **self.params)


def _record(tape, kind, inputs, output, params=None):
    if tape is not None:
        tape.append(LayerTrace(kind, tuple(inputs), output, dict(params or {})))
    return output


# -- forward ---------------------------------------------------------------


def _linear(x, weights, bias=None):
    out = x @ weights
    if bias is not None:
        out = out + bias
    return out


def _relu(x):
    return np.maximum(x, 0.0)


def _aggregate(x, adjacency):
    return adjacency @ x


def _mean_readout(x):
    return x.mean(axis=0, keepdims=True)


def _concat(*parts):
    return np.concatenate(parts, axis=1)


_FORWARD = {
    LINEAR: _linear,
    RELU: _relu,
    AGGREGATE: _aggregate,
    MEAN_READOUT: _mean_readout,
    CONCAT: _concat,
}


def linear_forward(x, weights, bias=None, tape: list | None = None) -> np.ndarray:
    """``x @ weights + bias`` with the bias broadcast over rows."""
    x = as_matrix(x, "input")
    weights = as_matrix(weights, "weights")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"linear: input has {x.shape[1]} columns but weights have {weights.shape[0]} rows"
        )
    params = {"weights": weights}
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != weights.shape[1]:
            raise DimensionError(
                f"linear: bias length {bias.shape[0]} != output width {weights.shape[1]}"
            )
        params["bias"] = bias
    return _record(tape, LINEAR, (x,), _linear(x, weights, bias), params)


def relu_forward(x, tape: list | None = None) -> np.ndarray:
    x = as_matrix(x, "input")
    return _record(tape, RELU, (x,), _relu(x))


def aggregate_forward(x, adjacency, tape: list | None = None) -> np.ndarray:
    """Neighbourhood aggregation ``adjacency @ x`` (one row per node)."""
    x = as_matrix(x, "input")
    adjacency = as_matrix(adjacency, "adjacency")
    if adjacency.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(
            f"aggregate: adjacency {adjacency.shape} does not match {x.shape[0]} nodes"
        )
    return _record(tape, AGGREGATE, (x,), _aggregate(x, adjacency), {"adjacency": adjacency})


def mean_readout_forward(x, tape: list | None = None) -> np.ndarray:
    x = as_matrix(x, "input")
    if x.shape[0] == 0:
        raise DimensionError("mean readout over zero rows")
    return _record(tape, MEAN_READOUT, (x,), _mean_readout(x))


def concat_forward(*parts, tape: list | None = None) -> np.ndarray:
    parts = tuple(as_matrix(p, "input") for p in parts)
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat: operands differ in row count")
    return _record(tape, CONCAT, parts, _concat(*parts))


# -- reverse-mode gradients ----------------------------------------------------


def grad_layer(trace: LayerTrace, upstream: np.ndarray) -> tuple[tuple, dict]:
    """Gradient of one layer: returns (input grads, parameter grads)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise DimensionError(
            f"{trace.kind}: upstream shape {upstream.shape} != output shape {trace.output.shape}"
        )
    kind = trace.kind
    if kind == LINEAR:
        w = trace.params["weights"]
        grads = {"weights": trace.input.T @ upstream}
        if "bias" in trace.params:
            grads["bias"] = upstream.sum(axis=0)
        return (upstream @ w.T,), grads
    if kind == RELU:
        return (upstream * (trace.input > 0),), {}
    if kind == AGGREGATE:
        return (trace.params["adjacency"].T @ upstream,), {}
    if kind == MEAN_READOUT:
        n = trace.input.shape[0]
        return (np.repeat(upstream / n, n, axis=0),), {}
    if kind == CONCAT:
        return _split(trace, upstream), {}
    raise UsageError(f"unknown layer kind {kind!r}")


@dataclass
class GradResult:
    input_grad: np.ndarray
    param_grads: list  # one dict per trace, aligned with the trace list
    output_grads: list  # gradient arriving at each trace's output


def grad_backward(traces: Sequence[LayerTrace], seed) -> GradResult:
    """Reverse-mode gradient of a sequential chain of traces.

    ``seed`` is dL/d(output of the last trace); pass a one-hot row to get
    the gradient of a single logit.
    """
    if not traces:
        raise UsageError("grad_backward needs at least one trace")
    g = np.asarray(seed, dtype=np.float64)
    out_shape = traces[-1].output.shape
    if g.size != traces[-1].output.size:
        raise DimensionError(f"seed shape {g.shape} != final output shape {out_shape}")
    g = g.reshape(out_shape)
    param_grads = [None] * len(traces)
    output_grads = [None] * len(traces)
    for i in range(len(traces) - 1, -1, -1):
        output_grads[i] = g
        (g, *_rest), param_grads[i] = grad_layer(traces[i], g)
    return GradResult(g, param_grads, output_grads)


# -- epsilon-LRP -----------------------------------------------------------------


def lrp_linear_backward(trace: LayerTrace, upstream, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Epsilon rule for a linear layer.

    The bias is part of the denominator but keeps its share, so a biased
    layer leaks relevance.
    """
    if trace.kind != LINEAR:
        raise UsageError(f"lrp_linear_backward got a {trace.kind} trace")
    upstream = _check_upstream(trace, upstream)
    s = upstream / stabilize(trace.output, check_eps(eps))
    return trace.input * (s @ trace.params["weights"].T)


def lrp_relu_backward(trace: LayerTrace, upstream) -> np.ndarray:
    if trace.kind != RELU:
        raise UsageError(f"lrp_relu_backward got a {trace.kind} trace")
    return _check_upstream(trace, upstream).copy()


def lrp_layer(trace: LayerTrace, upstream, eps: float = DEFAULT_EPS) -> tuple:
    """Relevance for each input of one layer."""
    kind = trace.kind
    if kind == LINEAR:
        return (lrp_linear_backward(trace, upstream, eps),)
    if kind == RELU:
        return (lrp_relu_backward(trace, upstream),)
    upstream = _check_upstream(trace, upstream)
    if kind == AGGREGATE:
        # same rule with node-to-node weights adjacency[v, u]
        s = upstream / stabilize(trace.output, check_eps(eps))
        return (trace.input * (trace.params["adjacency"].T @ s),)
    if kind == MEAN_READOUT:
        x = trace.input
        s = upstream / stabilize(trace.output, check_eps(eps))
        return (x / x.shape[0] * s,)
    if kind == CONCAT:
        return _split(trace, upstream)
    raise UsageError(f"unknown layer kind {kind!r}")


def lrp_backward(traces: Sequence[LayerTrace], seed, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Epsilon-LRP through a sequential chain; returns relevance at its input."""
    if not traces:
        raise UsageError("lrp_backward needs at least one trace")
    r = np.asarray(seed, dtype=np.float64)
    if r.size != traces[-1].output.size:
        raise DimensionError(f"seed shape {r.shape} != final output shape {traces[-1].output.shape}")
    r = r.reshape(traces[-1].output.shape)
    for trace in reversed(traces):
        r = lrp_layer(trace, r, eps)[0]
    return r


def _check_upstream(trace, upstream):
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise DimensionError(
            f"{trace.kind}: upstream shape {upstream.shape} != output shape {trace.output.shape}"
        )
    return upstream


def _split(trace, upstream):
    edges = np.cumsum([p.shape[1] for p in trace.inputs])[:-1]
    return tuple(np.split(upstream, edges, axis=1))

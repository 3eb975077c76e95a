import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctlrp.graphdata import Post, PropagationEvent, generate_synthetic  # noqa: E402
from ctlrp.model import BiGcnModel, ModelConfig  # noqa: E402


def make_event(parents, tokens, label=0, event_id="ev"):
    """parents[i] is the parent node index of node i (None for the source)."""
    posts = [
        Post(f"p{i}", None if par is None else f"p{par}", tuple(toks))
        for i, (par, toks) in enumerate(zip(parents, tokens))
    ]
    return PropagationEvent(event_id, label, tuple(posts))


def random_event(rng, vocab_size, max_nodes=10, max_tokens=8, label=0, event_id="ev"):
    n = int(rng.integers(1, max_nodes + 1))
    parents = [None] + [int(rng.integers(i)) for i in range(1, n)]
    tokens = [list(rng.integers(0, vocab_size, size=int(rng.integers(1, max_tokens + 1)))) for _ in range(n)]
    return make_event(parents, tokens, label, event_id)


def small_model(seed=0, vocab_size=30, num_classes=3, embed_dim=6, hidden_dim=5, pooling="mean", bias=True):
    return BiGcnModel.init(ModelConfig(vocab_size, num_classes, embed_dim, hidden_dim, pooling, bias), seed)


def randomize_biases(model, rng, scale=0.1):
    for name, value in model.params.items():
        if name.endswith(("_b", "_b1", "_b2")):
            model.params[name] = rng.normal(scale=scale, size=value.shape)
    return model


def kink_margin(fp):
    """Distance of a forward pass from its nearest non-differentiable point.

    Covers every ReLU pre-activation and, for max pooling, the gap between
    the best and runner-up distinct tokens in each dim.  Central
    differences are only meaningful when this exceeds the step's effect.
    """
    values = [np.inf]
    for tape in fp.branches.values():
        values += [np.abs(t.input).min() for t in tape if t.kind == "relu"]
    for node in fp.embedded.nodes:
        if node.mlp_tape:
            values.append(np.abs(node.mlp_tape[-1].input).min())
        if node.winners is not None:
            distinct = np.unique(node.token_ids)
            if len(distinct) > 1:
                vecs = np.sort(np.unique(node.vectors, axis=0), axis=0)
                values.append((vecs[-1] - vecs[-2]).min())
    return float(min(values))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(num_events=80, seed=5)


ACCEPTANCE_RESULTS = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict for the end-of-run summary."""
    line = f"ACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)

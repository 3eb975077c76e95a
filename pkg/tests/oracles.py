"""Independent reference computations used as test oracles.

Nothing here calls into ctlrp's forward/backward code; models are read
only for their parameter arrays.
"""

import numpy as np


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return np.array(out)


def central_difference(f, x, step=1e-4):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f(x)
        x[idx] = old - step
        lo = f(x)
        x[idx] = old
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def normalized_adjacency(n, edges, reverse=False):
    a = [[0.0] * n for _ in range(n)]
    for i in range(n):
        a[i][i] = 1.0
    for parent, child in edges:
        if reverse:
            a[child][parent] = 1.0
        else:
            a[parent][child] = 1.0
    for i in range(n):
        s = sum(a[i])
        a[i] = [x / s for x in a[i]]
    return np.array(a)


def pool_node(vectors, pooling, mlp=None):
    """Pool a list of token vectors; empty list gives zeros."""
    dim = len(vectors[0]) if vectors else None
    if not vectors:
        return None
    if pooling == "max":
        return np.array([max(vec[d] for vec in vectors) for d in range(dim)])
    if pooling == "mlp":
        w, b = mlp
        vectors = [np.maximum(np.asarray(vec) @ w + (0 if b is None else b), 0) for vec in vectors]
    return np.sum(vectors, axis=0) / len(vectors)


def reference_logits(model, token_lists, edges):
    """Plain-numpy BiGCN forward over explicit per-node token lists.

    ``token_lists[v]`` may be empty, meaning node v's feature row is zero.
    """
    p = model.params
    cfg = model.config
    n = len(token_lists)
    table = p["embedding"]
    mlp = (p["pool_w"], p.get("pool_b")) if cfg.pooling == "mlp" else None
    out_dim = p["pool_w"].shape[1] if mlp else table.shape[1]
    x = np.zeros((n, out_dim))
    for v, toks in enumerate(token_lists):
        pooled = pool_node([table[t] for t in toks], cfg.pooling, mlp)
        if pooled is not None:
            x[v] = pooled
    readouts = []
    for br, reverse in (("td", False), ("bu", True)):
        a = normalized_adjacency(n, edges, reverse)
        h = x
        for layer in (1, 2):
            h = a @ h @ p[f"{br}_w{layer}"]
            if f"{br}_b{layer}" in p:
                h = h + p[f"{br}_b{layer}"]
            h = np.maximum(h, 0)
        readouts.append(h.mean(axis=0))
    logits = np.concatenate(readouts) @ p["cls_w"]
    if "cls_b" in p:
        logits = logits + p["cls_b"]
    return logits


def event_token_lists(event, drop=()):
    drop = set(drop)
    return [[t for i, t in enumerate(post.tokens) if (v, i) not in drop] for v, post in enumerate(event.posts)]


def brute_force_ct_mask(model, event, token_scores, tol):
    """Perturb every token and apply the all-rivals retention inequality."""
    edges = event.edges()
    y = reference_logits(model, event_token_lists(event), edges)
    y_hat = int(np.argmax(y))
    classes = range(model.config.num_classes)
    scale = tol * max(1.0, float(np.max(np.abs(y))))
    mask = []
    for v, post in enumerate(event.posts):
        row = []
        for t in range(len(post.tokens)):
            y_pert = reference_logits(model, event_token_lists(event, [(v, t)]), edges)
            own = y[y_hat] - y_pert[y_hat]
            keep = token_scores[y_hat][v][t] > 0
            for c in classes:
                if c != y_hat and token_scores[c][v][t] > 0 and not (own - (y[c] - y_pert[c]) > scale):
                    keep = False
            row.append(keep)
        mask.append(row)
    return y_hat, mask


def excitation_backprop_loops(layers, activations, seed):
    """Loop-level excitation backprop through a stack of dense layers.

    layers[i] is a weight matrix mapping activations[i] -> next layer;
    activations[i] are the (nonnegative) inputs of layer i.  Returns the
    winning probability of every input unit of layer 0.
    """
    p = list(seed)
    for w, a in reversed(list(zip(layers, activations))):
        n_in, n_out = w.shape
        new = [0.0] * n_in
        for k in range(n_out):
            z = sum(max(a[j], 0) * max(w[j][k], 0) for j in range(n_in))
            if z <= 0:
                continue
            for j in range(n_in):
                new[j] += max(a[j], 0) * max(w[j][k], 0) / z * p[k]
        p = new
    return np.array(p)

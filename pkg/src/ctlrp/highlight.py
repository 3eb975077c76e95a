"""Static HTML token highlighting for explanations (no scripts, inline styles)."""

from __future__ import annotations

import html
from typing import Sequence

import numpy as np

from .explain import Explanation
from .graphdata import PropagationEvent, Vocabulary

SPECIFIC = "specific"  # kept, positive only for the predicted class
GENERAL = "general"  # kept, positive for other classes too but dominant for the prediction
NEGATIVE = "negative"  # z <= 0 for the predicted class
NEUTRAL = "neutral"  # positive but dropped by the contrastive step

COLOURS = {SPECIFIC: (31, 119, 180), GENERAL: (44, 160, 44), NEGATIVE: (214, 39, 40)}


def token_category(explanation: Explanation, v: int, t: int) -> str:
    target = explanation.target
    z = explanation.token_scores[target][v][t]
    if z <= 0:
        return NEGATIVE
    if not explanation.mask[v][t]:
        return NEUTRAL
    shared = any(
        zc[v][t] > 0 for c, zc in explanation.token_scores.items() if c != target
    )
    return GENERAL if shared else SPECIFIC


def _depths(event: PropagationEvent) -> list[int]:
    children: dict[int, list[int]] = {}
    for parent, child in event.edges():
        children.setdefault(parent, []).append(child)
    depth = [0] * event.num_nodes
    stack = [0]
    while stack:
        node = stack.pop()
        for child in children.get(node, ()):
            depth[child] = depth[node] + 1
            stack.append(child)
    return depth


def _token_text(tok: int, vocab: Vocabulary | None) -> str:
    if vocab is not None and 0 <= tok < len(vocab):
        return vocab.token(tok)
    return f"#{tok}"


def render_event(explanation: Explanation, event: PropagationEvent, vocab: Vocabulary | None = None,
                 class_names: Sequence[str] | None = None) -> str:
    name = (lambda c: class_names[c]) if class_names else (lambda c: f"class {c}")
    logits = ", ".join(f"{x:.3f}" for x in explanation.logits)
    parts = [
        '<section style="margin:1em 0;padding:0.5em;border:1px solid #ccc;">',
        f"<h2 style=\"font-size:1.1em;margin:0 0 0.3em 0;\">{html.escape(event.event_id)}</h2>",
        f"<p style=\"margin:0 0 0.5em 0;\">method: {html.escape(explanation.method)}; "
        f"predicted: {html.escape(name(explanation.predicted))}; logits: [{logits}]"
        + ("; low confidence" if explanation.low_confidence else "")
        + "</p>",
    ]
    depth = _depths(event)
    if explanation.is_token_level:
        z = explanation.token_scores[explanation.target]
        scale = max((abs(float(s)) for zv in z for s in zv), default=0.0) or 1.0
    else:
        scores = np.asarray(explanation.node_scores, dtype=float)
        scale = float(np.max(np.abs(scores))) if scores.size else 1.0
        scale = scale or 1.0
    for v, post in enumerate(event.posts):
        indent = 1.5 * depth[v]
        style = f"margin:0.2em 0 0.2em {indent:.1f}em;"
        if not explanation.is_token_level:
            alpha = max(0.0, float(explanation.node_scores[v])) / scale
            r, g, b = COLOURS[SPECIFIC]
            style += f"background:rgba({r},{g},{b},{alpha:.3f});"
        spans = []
        for t, tok in enumerate(post.tokens):
            text = html.escape(_token_text(tok, vocab))
            if explanation.is_token_level:
                cat = token_category(explanation, v, t)
                score = float(explanation.token_scores[explanation.target][v][t])
                if cat in COLOURS:
                    r, g, b = COLOURS[cat]
                    alpha = abs(score) / scale
                    spans.append(
                        f'<span title="z={score:.4f}" style="background:rgba({r},{g},{b},{alpha:.3f});'
                        f'padding:0 2px;">{text}</span>'
                    )
                    continue
                spans.append(f'<span title="z={score:.4f}" style="padding:0 2px;">{text}</span>')
            else:
                spans.append(f'<span style="padding:0 2px;">{text}</span>')
        parts.append(f'<p style="{style}">{" ".join(spans)}</p>')
    parts.append("</section>")
    return "\n".join(parts)


LEGEND = (
    '<p style="margin:0.5em 0;">'
    '<span style="background:rgba(31,119,180,0.6);padding:0 4px;">specific to prediction</span> '
    '<span style="background:rgba(44,160,44,0.6);padding:0 4px;">shared, dominant for prediction</span> '
    '<span style="background:rgba(214,39,40,0.6);padding:0 4px;">negative</span>'
    "</p>"
)


def render_page(explanations: Sequence[Explanation], events: Sequence[PropagationEvent],
                vocab: Vocabulary | None = None, title: str = "Token explanations") -> str:
    body = "\n".join(render_event(x, ev, vocab) for x, ev in zip(explanations, events))
    return (
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
        f"<title>{html.escape(title)}</title>\n</head>\n"
        '<body style="font-family:sans-serif;max-width:60em;margin:1em auto;">\n'
        f"<h1 style=\"font-size:1.3em;\">{html.escape(title)}</h1>\n{LEGEND}\n{body}\n</body>\n</html>\n"
    )

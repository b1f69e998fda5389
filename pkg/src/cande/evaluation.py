"""Novelty scores, ROC AUC and cross-model rank summaries."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import NOVEL, NORMAL
from .errors import EvaluationError
from .models import Autoencoder


def novelty_scores(model: Autoencoder, x: np.ndarray, contexts=None, batch_size: int = 2048) -> np.ndarray:
    """Per-example reconstruction MSE (float64).

    CANDE models are conditioned on their stored vector for each example's
    context id; plain models ignore ``contexts``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=model.dtype))
    if model.kind == "cande":
        if contexts is None:
            raise EvaluationError("a CANDE model needs the context id of every example")
        contexts = np.asarray(contexts)
        if contexts.ndim == 0:
            contexts = np.full(len(x), contexts)
        missing = sorted(set(np.unique(contexts).tolist()) - set(model.encodings))
        if missing:
            raise EvaluationError(f"model has no context encoding for context(s) {missing}")
    out = np.empty(len(x), dtype=np.float64)
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        cb = contexts[s:s + batch_size] if model.kind == "cande" else None
        rec = model.reconstruct(xb, cb)
        out[s:s + batch_size] = np.mean(np.square(rec.astype(np.float64) - xb), axis=1)
    return out


def novelty_score(model: Autoencoder, x: np.ndarray, context: int | None = None) -> float:
    return float(novelty_scores(model, np.asarray(x)[None, :], None if context is None else [context])[0])


def group_scores(scores, labels, groups) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean score per group.

    Returns ``(group_ids, group_means, group_labels)`` sorted by group id. All
    members of a group must share one novelty label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if groups.dtype == object and any(g is None for g in groups):
        raise EvaluationError("every example needs a group id for grouped scoring")
    if not (len(scores) == len(labels) == len(groups)):
        raise EvaluationError("scores, labels and groups must have equal length")
    ids, inverse = np.unique(groups, return_inverse=True)
    means = np.empty(len(ids))
    glabels = np.empty(len(ids), dtype=labels.dtype)
    for g in range(len(ids)):
        member = inverse == g
        lab = np.unique(labels[member])
        if len(lab) != 1:
            raise EvaluationError(f"group {ids[g]!r} mixes novelty labels {lab.tolist()}")
        # sort first so the float sum is independent of member order
        means[g] = np.sort(scores[member]).sum() / member.sum()
        glabels[g] = lab[0]
    return ids, means, glabels


def auc(scores, labels) -> float:
    """ROC AUC of ``scores`` for detecting NOVEL (1) among NORMAL (0).

    Mann-Whitney rank statistic with average ranks for ties; larger score
    means more novel.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isin(labels, (NORMAL, NOVEL))):
        raise EvaluationError("labels must be 0 (normal) or 1 (novel)")
    pos = labels == NOVEL
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs at least one novel and one normal example")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def rank_summary(cells: dict[tuple[str, int], float], exclude=("individual",)) -> dict[str, float]:
    """Average rank per model across contexts (1 = highest AUC, ties share the mean rank).

    ``cells`` maps ``(model, context)`` to AUC. Models named in ``exclude``
    are left out of the ranking.
    """
    models = sorted({m for m, _ in cells if m not in exclude})
    contexts = sorted({c for _, c in cells})
    if not models:
        raise EvaluationError("no models left to rank")
    totals = dict.fromkeys(models, 0.0)
    for c in contexts:
        missing = [m for m in models if (m, c) not in cells]
        if missing:
            raise EvaluationError(f"context {c} lacks AUC values for {missing}")
        ranks = rankdata([-cells[(m, c)] for m in models])
        for m, r in zip(models, ranks):
            totals[m] += float(r)
    return {m: totals[m] / len(contexts) for m in models}


@dataclass
class NoveltyReport:
    """AUC per (model, context, seed) plus mean-over-seed and average-rank summaries."""

    rows: list[dict] = field(default_factory=list)
    model_order: list[str] = field(default_factory=list)
    context_names: dict[int, str] = field(default_factory=dict)

    def add(self, model: str, context: int, seed: int, value: float, level: str = "example"):
        if not 0.0 <= value <= 1.0:
            raise EvaluationError(f"AUC {value} outside [0, 1]")
        if model not in self.model_order:
            self.model_order.append(model)
        self.rows.append({"model": model, "context": int(context), "seed": int(seed),
                          "auc": float(value), "level": level})

    def mean_auc(self) -> dict[tuple[str, int], float]:
        acc = defaultdict(list)
        for r in self.rows:
            acc[(r["model"], r["context"])].append(r["auc"])
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def average_ranks(self) -> dict[str, float]:
        """Ranks over the combined models; empty when only individual models were scored."""
        if all(m == "individual" for m in self.model_order):
            return {}
        return rank_summary(self.mean_auc())

    @property
    def contexts(self) -> list[int]:
        return sorted({r["context"] for r in self.rows})

    def to_dict(self) -> dict:
        means = self.mean_auc()
        ranked = self.average_ranks()
        return {
            "schema_version": 1,
            "rows": self.rows,
            "summary": {
                "models": self.model_order,
                "contexts": self.contexts,
                "context_names": {str(k): v for k, v in self.context_names.items()},
                "mean_auc": {m: {str(c): means[(m, c)] for c in self.contexts if (m, c) in means}
                             for m in self.model_order},
                "average_rank": {m: ranked[m] for m in self.model_order if m in ranked},
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        means = self.mean_auc()
        ranks = self.average_ranks()
        head = ["context", *self.model_order]
        body = []
        for c in self.contexts:
            body.append([self.context_names.get(c, str(c)),
                         *(f"{means[(m, c)]:.3f}" if (m, c) in means else "-" for m in self.model_order)])
        body.append(["average rank", *(f"{ranks[m]:.3f}" if m in ranks else "" for m in self.model_order)])
        return format_table(head, body)


def format_table(head: list[str], body: list[list[str]], footer: bool = True) -> str:
    """Aligned text table; with ``footer`` the last body row is set off by a rule."""
    widths = [max(len(str(r[i])) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda row: "  ".join(  # noqa: E731
        str(v).ljust(w) if i == 0 else str(v).rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
    rule = "-" * len(fmt(head))
    lines = [fmt(head), rule, *(fmt(r) for r in body)]
    if footer and body:
        lines[-1:-1] = [rule]
    return "\n".join(lines) + "\n"

"""Visual Attention Score: per-head, per-layer and model-level, plus reporting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attn_core import AttentionTensor, TokenSegmentation, validate_attention, validate_segmentation
from .errors import (
    DegenerateVariance,
    EmptyInput,
    EmptyQuerySet,
    EmptySystemSpan,
    LengthMismatch,
    NegativeScore,
    ValidationError,
)

EPS_DEN = 1e-12
NARROW, WIDE, PANORAMIC = "Narrow", "Wide", "Panoramic"


def _weights(A) -> np.ndarray:
    return A.weights if isinstance(A, AttentionTensor) else np.asarray(A)


def _queries(seg: TokenSegmentation, query_set) -> np.ndarray:
    if isinstance(query_set, str):
        q = seg.query_set(query_set)
    else:
        q = np.asarray(query_set, dtype=np.intp).reshape(-1)
    if q.size == 0:
        raise EmptyQuerySet("query set is empty")
    return q


def per_query_vas(A, seg: TokenSegmentation, query_set="user") -> np.ndarray:
    """Ratio of image mass to system mass for every (layer, head, query): L x H x |Q|."""
    w = _weights(A)
    sys_idx = seg.system
    if sys_idx.size == 0:
        raise EmptySystemSpan("VAS needs a non-empty system span")
    q = _queries(seg, query_set)
    rows = w[..., q, :]
    vis = rows[..., seg.image].sum(axis=-1)
    sys = rows[..., sys_idx].sum(axis=-1)
    # guard only an exactly-zero denominator so finite ratios stay exact
    return vis / np.where(sys > 0, sys, EPS_DEN)


def _admissible_queries(seg: TokenSegmentation, q: np.ndarray, causal: bool) -> np.ndarray:
    if not causal:
        return np.ones(q.shape, dtype=bool)
    # a query sees a system key iff the first system index is <= q
    return q >= seg.system_span[0]


def vas_per_head(A, seg: TokenSegmentation, query_set="user", strict: bool = False) -> np.ndarray:
    """Mean per-query VAS for every head, shape L x H.

    With ``strict`` set, queries that cannot see any system key under the
    causal mask are dropped from the mean instead of hitting the guard.
    """
    ratios = per_query_vas(A, seg, query_set)
    if strict:
        q = _queries(seg, query_set)
        causal = A.causal if isinstance(A, AttentionTensor) else True
        keep = _admissible_queries(seg, q, causal)
        if not keep.any():
            raise EmptyQuerySet("no query can attend to the system span")
        ratios = ratios[..., keep]
    return ratios.mean(axis=-1)


def vas_model(A, seg: TokenSegmentation, query_set="user", strict: bool = False) -> float:
    return float(vas_per_head(A, seg, query_set, strict).mean())


def classify_band(vas: float) -> str:
    if vas < 0 or math.isnan(vas):
        raise NegativeScore(f"VAS must be non-negative, got {vas}")
    if vas < 10:
        return NARROW
    if vas <= 15:
        return WIDE
    return PANORAMIC


@dataclass
class VasReport:
    per_head: np.ndarray
    per_layer: np.ndarray
    model_level: float
    query_set_kind: str
    band: str
    samples: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "model_level": self.model_level,
            "band": self.band,
            "query_set_kind": self.query_set_kind,
            "per_layer": [float(x) for x in self.per_layer],
            "per_head": [[float(x) for x in row] for row in self.per_head],
            "samples": self.samples,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "vas"])
        for l, row in enumerate(self.per_head):
            for h, v in enumerate(row):
                w.writerow([l, h, repr(float(v))])
        w.writerow(["model", "-", repr(self.model_level)])
        return buf.getvalue()


def vas_report(A, seg: TokenSegmentation, query_set_kind: str = "user", strict: bool = False) -> VasReport:
    per_head = vas_per_head(A, seg, query_set_kind, strict)
    model = float(per_head.mean())
    return VasReport(
        per_head=per_head,
        per_layer=per_head.mean(axis=1),
        model_level=model,
        query_set_kind=query_set_kind,
        band=classify_band(model),
    )


def aggregate_vas(dumps, query_set_kind: str = "user", strict: bool = False, ids=None):
    """Unweighted mean of model-level VAS over dumps.

    Returns ``(mean, per_sample)``; ``per_sample`` is a list of floats in
    input order.
    """
    dumps = list(dumps)
    if not dumps:
        raise EmptyInput("no dumps to aggregate")
    values = []
    for i, (A, seg) in enumerate(dumps):
        try:
            validate_segmentation(seg)
            validate_attention(A)
            values.append(vas_model(A, seg, query_set_kind, strict))
        except ValidationError as exc:
            raise type(exc)(f"dump {i if ids is None else ids[i]}: {exc}") from exc
    return math.fsum(values) / len(values), values


def aggregate_report(dumps, query_set_kind: str = "user", strict: bool = False, ids=None) -> VasReport:
    dumps = list(dumps)
    mean, values = aggregate_vas(dumps, query_set_kind, strict, ids)
    heads = [vas_per_head(A, seg, query_set_kind, strict) for A, seg in dumps]
    if len({h.shape for h in heads}) == 1:
        per_head = np.mean(heads, axis=0)
    else:
        per_head = np.full((1, 1), mean)
    ids = ids if ids is not None else [str(i) for i in range(len(dumps))]
    return VasReport(
        per_head=per_head,
        per_layer=per_head.mean(axis=1),
        model_level=mean,
        query_set_kind=query_set_kind,
        band=classify_band(mean),
        samples=[{"id": i, "vas": v} for i, v in zip(ids, values)],
    )


def _check_series(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatch("need at least two points")
    return x, y


def pearson(xs, ys) -> float:
    """Product-moment correlation from centred sums."""
    x, y = _check_series(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("zero variance series")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def pearson_two_pass(xs, ys) -> float:
    """Independent route: two-pass population covariance over the standard deviations."""
    x, y = _check_series(xs, ys)
    n = len(x)
    mx = sum(float(v) for v in x) / n
    my = sum(float(v) for v in y) / n
    # second pass with compensation term, as in the corrected two-pass algorithm
    cx = sum(float(v) - mx for v in x)
    cy = sum(float(v) - my for v in y)
    cov = (sum((float(a) - mx) * (float(b) - my) for a, b in zip(x, y)) - cx * cy / n) / n
    vx = (sum((float(a) - mx) ** 2 for a in x) - cx * cx / n) / n
    vy = (sum((float(b) - my) ** 2 for b in y) - cy * cy / n) / n
    if vx <= 0 or vy <= 0:
        raise DegenerateVariance("zero variance series")
    return max(-1.0, min(1.0, cov / (math.sqrt(vx) * math.sqrt(vy))))


def _ramp(t: float) -> str:
    t = min(1.0, max(0.0, t))
    r = int(round(255 * t))
    b = int(round(255 * (1 - t)))
    return f"#{r:02x}40{b:02x}"


def heatmap_svg(per_head: np.ndarray, cell: int = 36, title: str = "per-head VAS") -> str:
    """L x H grid shaded on a linear blue-to-red ramp."""
    per_head = np.asarray(per_head, dtype=float)
    L, H = per_head.shape
    lo, hi = float(per_head.min()), float(per_head.max())
    span = hi - lo if hi > lo else 1.0
    left, top = 60, 40
    width, height = left + H * cell + 20, top + L * cell + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">',
        f'<text x="{left}" y="20">{title} (min {lo:.3g}, max {hi:.3g})</text>',
    ]
    for l in range(L):
        out.append(f'<text x="8" y="{top + l * cell + cell // 2 + 4}">L{l}</text>')
        for h in range(H):
            v = per_head[l, h]
            x, y = left + h * cell, top + l * cell
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_ramp((v - lo) / span)}">'
                f"<title>layer {l} head {h}: {v:.6g}</title></rect>"
            )
    for h in range(H):
        out.append(f'<text x="{left + h * cell + 8}" y="{top + L * cell + 16}">H{h}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_json(report: VasReport) -> str:
    return json.dumps(report.to_json(), indent=2) + "\n"

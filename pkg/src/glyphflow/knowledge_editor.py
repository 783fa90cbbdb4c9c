"""Closed-form knowledge updating for the text encoder.

Each knowledge item becomes a templated question; the editor traces the
input activation h of every updatable matrix at the knowledge phrase's
final token, backpropagates the teacher-forced target loss to that
matrix's output, scales the negative gradient by eta * ||h||^2, and solves
(H'H + I) d = H'V per matrix. The shift d adds directly onto the weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import linalg
from .errors import EditSequenceError, InvalidInputError, NumericalError
from .text_encoder import (
    EncoderModel,
    encode,
    greedy_decode,
    supervised_site_rows,
    tokenize,
)

DEFAULT_ETA = 1e-6
DEFAULT_EDIT_REPEATS = 40

_QUERY_PREFIX = "question: what is"
_QUERY_SUFFIX = "? answer:"
QUERY_TEMPLATE_WORDS = tuple(_QUERY_PREFIX.split() + _QUERY_SUFFIX.split())


def to_query(knowledge: str) -> str:
    """Deterministic question template for a raw knowledge string."""
    knowledge = knowledge.strip()
    if not knowledge:
        raise InvalidInputError("knowledge text is empty")
    return f"{_QUERY_PREFIX} {knowledge} {_QUERY_SUFFIX}"


@dataclass(frozen=True)
class EditPair:
    """One (query, expected answer) supervision pair.

    `position` fixes a single token index whose activations form the H row;
    None takes one row per supervised target position (the last query token
    plus one per further anchor token).
    """

    query: str
    anchor: str
    position: int | None = None


@dataclass(frozen=True)
class EditRequest:
    pairs: tuple[EditPair, ...]
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise InvalidInputError("an edit request needs at least one pair")
        if not self.eta > 0:
            raise InvalidInputError("eta must be positive")

    @property
    def m(self) -> int:
        return len(self.pairs)

    @classmethod
    def single(cls, query: str, anchor: str, eta: float = DEFAULT_ETA,
               position: int | None = None) -> "EditRequest":
        return cls(pairs=(EditPair(query, anchor, position),), eta=eta)


def build_edit_request(knowledge: str, anchor: str, eta: float = DEFAULT_ETA) -> EditRequest:
    """Request binding one knowledge item to an answer string."""
    return EditRequest.single(to_query(knowledge), anchor, eta=eta)


def update_direction(h_site: np.ndarray, grad_out: np.ndarray, eta: float) -> np.ndarray:
    """Scaled negative output gradient: -eta * ||h||^2 * grad."""
    h_site = np.asarray(h_site, dtype=np.float64)
    return -eta * float(h_site @ h_site) * np.asarray(grad_out, dtype=np.float64)


@dataclass
class SiteEditStats:
    layer: int
    matrix: str
    h_norm: float
    v_norm: float
    delta_fnorm: float
    residual_rel: float


@dataclass
class EditReport:
    sites: list[SiteEditStats]
    loss_before: float
    edit_seconds: float
    verify_seconds: float
    verified: bool
    decoded: str

    def to_dict(self) -> dict:
        return {
            "loss_before": self.loss_before,
            "edit_seconds": self.edit_seconds,
            "verify_seconds": self.verify_seconds,
            "verified": self.verified,
            "decoded": self.decoded,
            "sites": [
                {
                    "layer": s.layer,
                    "matrix": s.matrix,
                    "h_norm": s.h_norm,
                    "v_norm": s.v_norm,
                    "delta_fnorm": s.delta_fnorm,
                    "residual_rel": s.residual_rel,
                }
                for s in self.sites
            ],
        }


def _anchor_ids(model: EncoderModel, anchor: str) -> list[int]:
    words = anchor.strip().split()
    if not words:
        raise InvalidInputError("anchor string is empty")
    return [model.vocab.id_of(w) for w in words] + [model.vocab.end_id]


def apply_edit(model: EncoderModel, req: EditRequest) -> EditReport:
    """Apply one closed-form edit in place; transactional on failure."""
    sites_cfg = model.config.update_sites
    if not sites_cfg:
        raise InvalidInputError("model has no updatable matrices configured")
    start = time.perf_counter()
    rows_h: dict = {s: [] for s in sites_cfg}
    rows_v: dict = {s: [] for s in sites_cfg}
    loss_total = 0.0
    for pair in req.pairs:
        q_ids = tokenize(model.vocab, pair.query)
        t_ids = _anchor_ids(model, pair.anchor)
        positions = None if pair.position is None else [pair.position]
        loss, rows = supervised_site_rows(model, q_ids, t_ids, positions)
        loss_total += loss
        for site in sites_cfg:
            h_rows, g_rows = rows[site]
            for h_row, g_row in zip(h_rows, g_rows):
                rows_h[site].append(h_row)
                rows_v[site].append(update_direction(h_row, g_row, req.eta))

    deltas: dict = {}
    stats: list[SiteEditStats] = []
    for layer, matrix in sites_cfg:
        h = np.stack(rows_h[(layer, matrix)])
        v = np.stack(rows_v[(layer, matrix)])
        delta = linalg.ridge_solve(h, v)
        if not np.all(np.isfinite(delta)):
            raise NumericalError("edit produced a non-finite shift; model unchanged")
        lhs = h.T @ h @ delta + delta
        rhs = h.T @ v
        residual = float(
            np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300)
        )
        deltas[(layer, matrix)] = delta
        stats.append(
            SiteEditStats(
                layer=layer,
                matrix=matrix,
                h_norm=float(np.linalg.norm(h[-1])),
                v_norm=float(np.linalg.norm(v[-1])),
                delta_fnorm=float(np.linalg.norm(delta)),
                residual_rel=residual,
            )
        )

    # all solves succeeded; mutate the model
    for (layer, matrix), delta in deltas.items():
        model.weights[f"layers.{layer}.mlp.{matrix}"] += delta
    edit_seconds = time.perf_counter() - start

    vstart = time.perf_counter()
    verified, decoded = verify_edit(model, req)
    verify_seconds = time.perf_counter() - vstart
    return EditReport(
        sites=stats,
        loss_before=loss_total,
        edit_seconds=edit_seconds,
        verify_seconds=verify_seconds,
        verified=verified,
        decoded=decoded,
    )


def _merge_repeat_reports(reports: list[EditReport]) -> EditReport:
    return EditReport(
        sites=reports[-1].sites,
        loss_before=reports[0].loss_before,
        edit_seconds=sum(r.edit_seconds for r in reports),
        verify_seconds=sum(r.verify_seconds for r in reports),
        verified=reports[-1].verified,
        decoded=reports[-1].decoded,
    )


def apply_sequence(
    model: EncoderModel,
    requests: Sequence[EditRequest],
    repeats_per_request: int | None = 1,
) -> list[EditReport]:
    """Apply edits in order, each on the already-edited weights.

    `repeats_per_request` re-applies each request that many times before
    moving on; re-tracing on the already-shifted weights refines the shift
    toward the target (later refinements shrink as the answer converges).
    One merged report is returned per request.
    """
    if len(requests) == 0:
        raise InvalidInputError("edit sequence is empty")
    repeats = repeats_per_request if repeats_per_request is not None else 1
    if repeats < 1:
        raise InvalidInputError("repeats_per_request must be >= 1")
    reports: list[EditReport] = []
    for i, req in enumerate(requests):
        try:
            batch = [apply_edit(model, req) for _ in range(repeats)]
        except Exception as exc:  # noqa: BLE001 - reported with index
            raise EditSequenceError(i, reports, exc) from exc
        reports.append(_merge_repeat_reports(batch))
    return reports


def verify_edit(model: EncoderModel, req: EditRequest) -> tuple[bool, str]:
    """True iff every pair's greedy decode begins with its anchor tokens."""
    ok = True
    decoded_first = ""
    for j, pair in enumerate(req.pairs):
        q_ids = tokenize(model.vocab, pair.query)
        anchor_ids = [model.vocab.id_of(w) for w in pair.anchor.strip().split()]
        out = greedy_decode(model, q_ids, max_new=len(anchor_ids))
        if j == 0:
            decoded_first = " ".join(model.vocab.token_of(t) for t in out)
        ok = ok and out == anchor_ids
    return ok, decoded_first


@dataclass
class LocalityReport:
    cosines: list[float]
    unchanged: list[bool]
    mean_cosine: float
    frac_unchanged: float

    def passed(self, min_cosine: float = 0.99, min_unchanged: float = 0.9) -> bool:
        return self.mean_cosine >= min_cosine and self.frac_unchanged >= min_unchanged


def locality_check(
    before: EncoderModel,
    after: EncoderModel,
    probes: Sequence[str],
    max_new: int = 3,
) -> LocalityReport:
    """Latent drift and decode stability on unrelated probe prompts."""
    cosines: list[float] = []
    unchanged: list[bool] = []
    for text in probes:
        ids = tokenize(before.vocab, text)
        h0 = encode(before, ids).ravel()
        h1 = encode(after, ids).ravel()
        denom = np.linalg.norm(h0) * np.linalg.norm(h1)
        cosines.append(float(h0 @ h1 / denom) if denom > 0 else 0.0)
        unchanged.append(
            greedy_decode(before, ids, max_new) == greedy_decode(after, ids, max_new)
        )
    return LocalityReport(
        cosines=cosines,
        unchanged=unchanged,
        mean_cosine=float(np.mean(cosines)),
        frac_unchanged=float(np.mean(unchanged)),
    )


def load_edit_script(path: str | Path) -> list[EditRequest]:
    """Read {knowledge, anchor, eta} records from a JSON list."""
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed edit script: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise InvalidInputError("edit script must be a non-empty JSON list")
    requests = []
    for rec in records:
        try:
            requests.append(
                build_edit_request(
                    rec["knowledge"], rec["anchor"], float(rec.get("eta", DEFAULT_ETA))
                )
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"bad edit record {rec!r}") from exc
    return requests


def save_reports(path: str | Path, reports: Sequence[EditReport]) -> None:
    """One JSON record per line, in edit order."""
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")

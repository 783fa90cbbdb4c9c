"""Tiny causal transformer language model used as the text encoder.

The model is a pre-norm decoder stack with gated MLPs, written directly in
numpy with a hand-derived backward pass. The backward pass serves two
consumers: full weight gradients for pretraining, and gradients with respect
to the gate/up projection *outputs* at a chosen token position, which the
knowledge editor turns into closed-form weight shifts.

Conventions:
  - activations are row vectors; every weight W has shape (d_in, d_out) and
    is applied as ``x @ W`` so a ridge-solve shift adds to W directly.
  - the LM head is tied to the token embedding (logits = h @ emb.T).
  - RMS norms carry fixed (non-trainable) scale vectors. The MLP-branch norm
    uses a large constant scale, which fixes the squared norm of every traced
    activation to ``scale**2 * d_model``; gate/up weights are initialized and
    trained with a compensating factor so the function and training dynamics
    match an unscaled model exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError

PAD_TOKEN = "<pad>"
BEGIN_TOKEN = "<begin>"
END_TOKEN = "<end>"
SPECIAL_TOKENS = (PAD_TOKEN, BEGIN_TOKEN, END_TOKEN)

NORM_EPS = 1e-6
_MASK_VALUE = -1e30


class Vocabulary:
    """Closed word-level vocabulary with dense ids and a rare-anchor pool."""

    def __init__(self, words: Sequence[str], anchor_tokens: Sequence[str]):
        anchor_tokens = tuple(anchor_tokens)
        ordered = list(SPECIAL_TOKENS) + list(anchor_tokens)
        for w in words:
            if w not in ordered:
                ordered.append(w)
        if len(set(ordered)) != len(ordered):
            raise InvalidInputError("vocabulary entries must be unique")
        self.tokens: tuple[str, ...] = tuple(ordered)
        self.anchor_tokens = anchor_tokens
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self._ids[PAD_TOKEN]
        self.begin_id = self._ids[BEGIN_TOKEN]
        self.end_id = self._ids[END_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise InvalidInputError(f"unknown word: {token!r}") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise InvalidInputError(f"token id out of range: {token_id}")
        return self.tokens[token_id]


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """Whitespace tokenization with the begin token prepended."""
    return [vocab.begin_id] + [vocab.id_of(w) for w in text.split()]


def detokenize(vocab: Vocabulary, token_ids: Iterable[int]) -> str:
    """Inverse of tokenize; special tokens are dropped."""
    skip = {vocab.pad_id, vocab.begin_id, vocab.end_id}
    return " ".join(vocab.token_of(t) for t in token_ids if t not in skip)


GATE_PROJ = "gate_proj"
UP_PROJ = "up_proj"
_UPDATABLE_CHOICES = (GATE_PROJ, UP_PROJ)


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 48
    updatable_layers: tuple[int, ...] = (3, 4)
    updatable_matrices: tuple[str, ...] = (GATE_PROJ, UP_PROJ)
    mlp_norm_scale: float = 125.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if any(not 0 <= l < self.n_layers for l in self.updatable_layers):
            raise InvalidInputError("updatable layer index out of range")
        if len(set(self.updatable_layers)) != len(self.updatable_layers):
            raise InvalidInputError("duplicate updatable layer")
        for m in self.updatable_matrices:
            if m not in _UPDATABLE_CHOICES:
                raise InvalidInputError(f"unknown updatable matrix: {m!r}")
        if self.mlp_norm_scale <= 0:
            raise InvalidInputError("mlp_norm_scale must be positive")

    @property
    def update_sites(self) -> tuple[tuple[int, str], ...]:
        """(layer, matrix) pairs eligible for closed-form edits."""
        return tuple(
            (l, m) for l in self.updatable_layers for m in self.updatable_matrices
        )


@dataclass
class EncoderModel:
    config: EncoderConfig
    vocab: Vocabulary
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def weight_names(self) -> list[str]:
        return encoder_weight_names(self.config)

    def trainable_names(self) -> list[str]:
        return [n for n in self.weight_names() if not n.endswith("norm.scale")]


def encoder_weight_names(config: EncoderConfig) -> list[str]:
    names = ["tok_emb"]
    for i in range(config.n_layers):
        names.append(f"layers.{i}.attn_norm.scale")
        for p in ("q_proj", "k_proj", "v_proj", "o_proj"):
            names.append(f"layers.{i}.attn.{p}")
        names.append(f"layers.{i}.mlp_norm.scale")
        for p in (GATE_PROJ, UP_PROJ, "down_proj"):
            names.append(f"layers.{i}.mlp.{p}")
    names.append("final_norm.scale")
    return names


def init_encoder(
    config: EncoderConfig, vocab: Vocabulary, rng: np.random.Generator
) -> EncoderModel:
    """Random initialization; gate/up weights absorb 1/mlp_norm_scale."""
    d, f = config.d_model, config.d_ff
    c = config.mlp_norm_scale
    resid = 1.0 / np.sqrt(2.0 * config.n_layers)
    w: dict[str, np.ndarray] = {}
    w["tok_emb"] = rng.standard_normal((len(vocab), d)) / np.sqrt(d)
    for i in range(config.n_layers):
        w[f"layers.{i}.attn_norm.scale"] = np.ones(d)
        for p in ("q_proj", "k_proj", "v_proj"):
            w[f"layers.{i}.attn.{p}"] = rng.standard_normal((d, d)) / np.sqrt(d)
        w[f"layers.{i}.attn.o_proj"] = (
            rng.standard_normal((d, d)) / np.sqrt(d) * resid
        )
        w[f"layers.{i}.mlp_norm.scale"] = np.full(d, c)
        w[f"layers.{i}.mlp.{GATE_PROJ}"] = rng.standard_normal((d, f)) / (
            np.sqrt(d) * c
        )
        w[f"layers.{i}.mlp.{UP_PROJ}"] = rng.standard_normal((d, f)) / (
            np.sqrt(d) * c
        )
        w[f"layers.{i}.mlp.down_proj"] = (
            rng.standard_normal((f, d)) / np.sqrt(f) * resid
        )
    w["final_norm.scale"] = np.ones(d)
    return EncoderModel(config=config, vocab=vocab, weights=w)


def encoder_lr_multipliers(config: EncoderConfig) -> dict[str, float]:
    """Per-weight learning-rate factors that undo the MLP-norm scaling.

    Gate/up weights live at 1/mlp_norm_scale of the natural magnitude, so
    their Adam updates are shrunk by the same factor; the training
    trajectory is then exactly the trajectory of an unscaled model.
    """
    mult = {}
    for i in range(config.n_layers):
        mult[f"layers.{i}.mlp.{GATE_PROJ}"] = 1.0 / config.mlp_norm_scale
        mult[f"layers.{i}.mlp.{UP_PROJ}"] = 1.0 / config.mlp_norm_scale
    return mult


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so the exponential never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _rmsnorm(x: np.ndarray, scale: np.ndarray):
    ms = np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS
    inv = 1.0 / np.sqrt(ms)
    return x * inv * scale, inv


def _rmsnorm_backward(grad: np.ndarray, x: np.ndarray, inv: np.ndarray, scale):
    d = x.shape[-1]
    gs = grad * scale
    dot = np.sum(gs * x, axis=-1, keepdims=True)
    return gs * inv - x * (dot * inv**3 / d)


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


class _Cache:
    """Per-forward activation store for the backward pass."""

    __slots__ = ("ids", "pad_mask", "layers", "x_final", "h", "inv_final", "logits")

    def __init__(self):
        self.layers = []


def encoder_forward(
    model: EncoderModel,
    ids: np.ndarray,
    pad_mask: np.ndarray | None = None,
    site_offsets: Mapping[tuple[int, str], tuple[int, np.ndarray]] | None = None,
) -> _Cache:
    """Run the full stack, returning all activations.

    ids: (B, S) int array. pad_mask: (B, S) bool, True for real tokens.
    site_offsets optionally adds a fixed vector to one updatable matrix's
    output at one position (used by linearization checks and the
    finite-difference gradient oracle).
    """
    cfg = model.config
    w = model.weights
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise InvalidInputError("ids must be (batch, seq)")
    b, s = ids.shape
    if s > cfg.max_seq:
        raise InvalidInputError(f"sequence length {s} exceeds max_seq {cfg.max_seq}")
    if pad_mask is None:
        pad_mask = np.ones((b, s), dtype=bool)
    d, h_count = cfg.d_model, cfg.n_heads
    dh = d // h_count

    cache = _Cache()
    cache.ids = ids
    cache.pad_mask = pad_mask

    x = w["tok_emb"][ids]  # (B, S, D)
    causal = np.tril(np.ones((s, s), dtype=bool))
    allow = causal[None, :, :] & pad_mask[:, None, :]  # (B, S, S) keys allowed
    bias = np.where(allow, 0.0, _MASK_VALUE)[:, None, :, :]  # (B, 1, S, S)

    for i in range(cfg.n_layers):
        lc: dict = {"x_in": x}
        a_in, inv_a = _rmsnorm(x, w[f"layers.{i}.attn_norm.scale"])
        lc["a_in"], lc["inv_a"] = a_in, inv_a
        q = a_in @ w[f"layers.{i}.attn.q_proj"]
        k = a_in @ w[f"layers.{i}.attn.k_proj"]
        v = a_in @ w[f"layers.{i}.attn.v_proj"]
        q = q.reshape(b, s, h_count, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, s, h_count, dh).transpose(0, 2, 1, 3)
        v = v.reshape(b, s, h_count, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + bias
        att = _softmax(scores)
        ctx = att @ v  # (B, H, S, Dh)
        ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
        attn_out = ctx_flat @ w[f"layers.{i}.attn.o_proj"]
        lc.update(q=q, k=k, v=v, att=att, ctx_flat=ctx_flat)
        x = x + attn_out

        lc["x_mid"] = x
        m_in, inv_m = _rmsnorm(x, w[f"layers.{i}.mlp_norm.scale"])
        lc["m_in"], lc["inv_m"] = m_in, inv_m
        gate = m_in @ w[f"layers.{i}.mlp.{GATE_PROJ}"]
        up = m_in @ w[f"layers.{i}.mlp.{UP_PROJ}"]
        if site_offsets:
            off = site_offsets.get((i, GATE_PROJ))
            if off is not None:
                gate = gate.copy()
                gate[:, off[0], :] += off[1]
            off = site_offsets.get((i, UP_PROJ))
            if off is not None:
                up = up.copy()
                up[:, off[0], :] += off[1]
        act = gate * _silu(up)
        mlp_out = act @ w[f"layers.{i}.mlp.down_proj"]
        lc.update(gate=gate, up=up, act=act)
        x = x + mlp_out
        cache.layers.append(lc)

    cache.x_final = x
    h, inv_f = _rmsnorm(x, w["final_norm.scale"])
    cache.h, cache.inv_final = h, inv_f
    cache.logits = h @ w["tok_emb"].T
    return cache


def encoder_backward(
    model: EncoderModel,
    cache: _Cache,
    dlogits: np.ndarray,
    want_weight_grads: bool = True,
):
    """Exact reverse pass.

    Returns (weight_grads, site_grads) where site_grads maps each updatable
    (layer, matrix) to the full (B, S, d_ff) gradient of the loss with
    respect to that matrix's output activations.
    """
    cfg = model.config
    w = model.weights
    b, s = cache.ids.shape
    d, h_count = cfg.d_model, cfg.n_heads
    dh = d // h_count

    grads: dict[str, np.ndarray] = {}
    site_grads: dict[tuple[int, str], np.ndarray] = {}

    def add(name, g):
        if want_weight_grads:
            grads[name] = grads.get(name, 0.0) + g

    # head (tied): logits = h @ emb.T
    dh_final = dlogits @ w["tok_emb"]
    if want_weight_grads:
        grads["tok_emb"] = np.einsum("bsv,bsd->vd", dlogits, cache.h)
    dx = _rmsnorm_backward(
        dh_final, cache.x_final, cache.inv_final, w["final_norm.scale"]
    )

    update_sites = set(cfg.update_sites)

    for i in range(cfg.n_layers - 1, -1, -1):
        lc = cache.layers[i]
        # MLP branch
        dmlp_out = dx
        dact = dmlp_out @ w[f"layers.{i}.mlp.down_proj"].T
        add(
            f"layers.{i}.mlp.down_proj",
            np.einsum("bsf,bsd->fd", lc["act"], dmlp_out),
        )
        dgate = dact * _silu(lc["up"])
        dup = dact * lc["gate"] * _silu_grad(lc["up"])
        if (i, GATE_PROJ) in update_sites:
            site_grads[(i, GATE_PROJ)] = dgate
        if (i, UP_PROJ) in update_sites:
            site_grads[(i, UP_PROJ)] = dup
        dm_in = dgate @ w[f"layers.{i}.mlp.{GATE_PROJ}"].T
        dm_in += dup @ w[f"layers.{i}.mlp.{UP_PROJ}"].T
        add(
            f"layers.{i}.mlp.{GATE_PROJ}",
            np.einsum("bsd,bsf->df", lc["m_in"], dgate),
        )
        add(f"layers.{i}.mlp.{UP_PROJ}", np.einsum("bsd,bsf->df", lc["m_in"], dup))
        dx = dx + _rmsnorm_backward(
            dm_in, lc["x_mid"], lc["inv_m"], w[f"layers.{i}.mlp_norm.scale"]
        )

        # attention branch
        dattn_out = dx
        dctx_flat = dattn_out @ w[f"layers.{i}.attn.o_proj"].T
        add(
            f"layers.{i}.attn.o_proj",
            np.einsum("bsd,bse->de", lc["ctx_flat"], dattn_out),
        )
        dctx = dctx_flat.reshape(b, s, h_count, dh).transpose(0, 2, 1, 3)
        datt = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["att"].transpose(0, 1, 3, 2) @ dctx
        att = lc["att"]
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dq = dscores @ lc["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]
        dq = dq.transpose(0, 2, 1, 3).reshape(b, s, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(b, s, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(b, s, d)
        da_in = dq @ w[f"layers.{i}.attn.q_proj"].T
        da_in += dk @ w[f"layers.{i}.attn.k_proj"].T
        da_in += dv @ w[f"layers.{i}.attn.v_proj"].T
        add(f"layers.{i}.attn.q_proj", np.einsum("bsd,bse->de", lc["a_in"], dq))
        add(f"layers.{i}.attn.k_proj", np.einsum("bsd,bse->de", lc["a_in"], dk))
        add(f"layers.{i}.attn.v_proj", np.einsum("bsd,bse->de", lc["a_in"], dv))
        dx = dx + _rmsnorm_backward(
            da_in, lc["x_in"], lc["inv_a"], w[f"layers.{i}.attn_norm.scale"]
        )

    if want_weight_grads:
        emb_grad = np.zeros_like(w["tok_emb"])
        np.add.at(emb_grad, cache.ids, dx)
        grads["tok_emb"] = grads.get("tok_emb", 0.0) + emb_grad
    return grads, site_grads


def lm_loss_and_dlogits(logits: np.ndarray, targets: np.ndarray, reduce: str = "sum"):
    """Cross-entropy of next-token targets; entries with target -1 are ignored."""
    b, s, v = logits.shape
    valid = targets >= 0
    count = int(valid.sum())
    if count == 0:
        raise InvalidInputError("no supervised positions")
    probs = _softmax(logits)
    safe_targets = np.where(valid, targets, 0)
    picked = np.take_along_axis(probs, safe_targets[..., None], axis=-1)[..., 0]
    nll = -np.log(np.maximum(picked, 1e-300))
    loss = float(np.sum(nll[valid]))
    dlogits = probs.copy()
    np.put_along_axis(
        dlogits,
        safe_targets[..., None],
        np.take_along_axis(dlogits, safe_targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    dlogits[~valid] = 0.0
    if reduce == "mean":
        return loss / count, dlogits / count
    return loss, dlogits


def encode(model: EncoderModel, token_ids: Sequence[int]) -> np.ndarray:
    """Final-layer sequence latents for one token sequence, shape (S, d_model)."""
    ids = np.asarray([token_ids], dtype=np.int64)
    cache = encoder_forward(model, ids)
    return cache.h[0]


@dataclass
class HiddenTrace:
    """Input activations captured at each updatable matrix for one position."""

    position: int
    sites: dict[tuple[int, str], np.ndarray]
    latents: np.ndarray


def trace_sites(model: EncoderModel, token_ids: Sequence[int], position: int) -> HiddenTrace:
    """Capture the input row of every updatable matrix at `position`."""
    n = len(token_ids)
    if not 0 <= position < n:
        raise InvalidInputError(f"position {position} out of range for length {n}")
    sites_cfg = model.config.update_sites
    if not sites_cfg:
        warnings.warn("no updatable matrices are configured; trace is empty")
    cache = encoder_forward(model, np.asarray([token_ids], dtype=np.int64))
    sites = {}
    for layer, matrix in sites_cfg:
        sites[(layer, matrix)] = cache.layers[layer]["m_in"][0, position].copy()
    return HiddenTrace(position=position, sites=sites, latents=cache.h[0])


def _teacher_forced_targets(question_ids, target_ids):
    if len(target_ids) == 0:
        raise InvalidInputError("target token sequence is empty")
    full = list(question_ids) + list(target_ids)
    targets = np.full((1, len(full)), -1, dtype=np.int64)
    start = len(question_ids) - 1
    for j, t in enumerate(target_ids):
        targets[0, start + j] = t
    return np.asarray([full], dtype=np.int64), targets


def teacher_forced_loss(
    model: EncoderModel,
    question_ids: Sequence[int],
    target_ids: Sequence[int],
    site_offsets=None,
) -> float:
    """Summed NLL of `target_ids` following `question_ids` (forward only)."""
    full, targets = _teacher_forced_targets(question_ids, target_ids)
    cache = encoder_forward(model, full, site_offsets=site_offsets)
    loss, _ = lm_loss_and_dlogits(cache.logits, targets)
    return loss


def target_loss_and_site_grads(
    model: EncoderModel,
    question_ids: Sequence[int],
    target_ids: Sequence[int],
    position: int | None = None,
):
    """Teacher-forced target NLL plus per-site output-gradient rows.

    The gradient row for a site is d(loss)/d(site output) at `position`
    (default: the last question token), computed by the exact reverse pass.
    """
    full, targets = _teacher_forced_targets(question_ids, target_ids)
    if position is None:
        position = len(question_ids) - 1
    if not 0 <= position < full.shape[1]:
        raise InvalidInputError(f"position {position} out of range")
    cache = encoder_forward(model, full)
    loss, dlogits = lm_loss_and_dlogits(cache.logits, targets)
    _, site_grads = encoder_backward(model, cache, dlogits, want_weight_grads=False)
    rows = {site: g[0, position].copy() for site, g in site_grads.items()}
    return loss, rows


def supervised_site_rows(
    model: EncoderModel,
    question_ids: Sequence[int],
    target_ids: Sequence[int],
    positions: Sequence[int] | None = None,
):
    """Per-site (input row, output gradient row) pairs for an edit.

    One row per position; by default every position that predicts a target
    token in the teacher-forced sequence. Returns (loss, {site: (H, G)})
    with H of shape (m, d_in) and G of shape (m, d_out).
    """
    full, targets = _teacher_forced_targets(question_ids, target_ids)
    if positions is None:
        start = len(question_ids) - 1
        positions = list(range(start, start + len(target_ids)))
    for p in positions:
        if not 0 <= p < full.shape[1]:
            raise InvalidInputError(f"position {p} out of range")
    cache = encoder_forward(model, full)
    loss, dlogits = lm_loss_and_dlogits(cache.logits, targets)
    _, site_grads = encoder_backward(model, cache, dlogits, want_weight_grads=False)
    rows = {}
    for site in model.config.update_sites:
        h = np.stack([cache.layers[site[0]]["m_in"][0, p] for p in positions])
        g = np.stack([site_grads[site][0, p] for p in positions])
        rows[site] = (h, g)
    return loss, rows


def greedy_decode(model: EncoderModel, token_ids: Sequence[int], max_new: int) -> list[int]:
    """Deterministic argmax continuation; stops at the end token or max_new."""
    if max_new < 1:
        raise InvalidInputError("max_new must be >= 1")
    ids = list(token_ids)
    out = []
    for _ in range(max_new):
        if len(ids) >= model.config.max_seq:
            break
        cache = encoder_forward(model, np.asarray([ids], dtype=np.int64))
        next_id = int(np.argmax(cache.logits[0, -1]))
        if next_id == model.vocab.end_id:
            break
        out.append(next_id)
        ids.append(next_id)
    return out

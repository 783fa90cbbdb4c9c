"""Rectified-flow velocity model over small pixel grids.

Patch tokens pass through pre-norm transformer blocks with self-attention,
cross-attention to text latents, and a SiLU MLP; a linear head maps tokens
back to patch pixels. Forward and backward passes are hand-written numpy.

Weights here follow the (d_out, d_in) layout applied as ``x @ W.T`` so a
low-rank delta ``b @ a`` adds to a weight directly; self-attention
projections are the adapter attachment points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError

NORM_EPS = 1e-6


def validate_grid(z, name: str = "grid") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise InvalidInputError(f"{name} must be (height, width, channels)")
    return z


def interpolate(z0, z1, t: float) -> np.ndarray:
    """Straight-line latent at time t: t*z0 + (1-t)*z1 (t=1 is data)."""
    z0 = validate_grid(z0, "z0")
    z1 = validate_grid(z1, "z1")
    if z0.shape != z1.shape:
        raise InvalidInputError(f"shape mismatch: {z0.shape} vs {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"t must be in [0, 1], got {t}")
    return t * z0 + (1.0 - t) * z1


def target_velocity(z0, z1) -> np.ndarray:
    """Time derivative of the straight-line path: z0 - z1."""
    z0 = validate_grid(z0, "z0")
    z1 = validate_grid(z1, "z1")
    if z0.shape != z1.shape:
        raise InvalidInputError(f"shape mismatch: {z0.shape} vs {z1.shape}")
    return z0 - z1


def sample_timestep(rng: np.random.Generator) -> float:
    """Logit-normal timestep: sigmoid of a standard normal draw."""
    n = rng.standard_normal()
    return float(1.0 / (1.0 + np.exp(-n)))


@dataclass(frozen=True)
class FlowConfig:
    height: int = 8
    width: int = 8
    channels: int = 3
    patch_size: int = 2
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 192
    cond_dim: int = 64
    time_dim: int = 16
    cond_gain: float = 2.5

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise InvalidInputError("grid dimensions must be divisible by patch_size")
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if self.time_dim % 2 != 0:
            raise InvalidInputError("time_dim must be even")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


SELF_ATTN_PROJS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass
class FlowModel:
    config: FlowConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def weight_names(self) -> list[str]:
        return flow_weight_names(self.config)

    def trainable_names(self) -> list[str]:
        frozen = ("norm.scale", "cond_center")
        return [n for n in self.weight_names() if not n.endswith(frozen)]

    def self_attention_targets(self) -> list[str]:
        """Weight names eligible for low-rank adapters."""
        return [
            f"blocks.{i}.self_attn.{p}"
            for i in range(self.config.n_layers)
            for p in SELF_ATTN_PROJS
        ]


def flow_weight_names(config: FlowConfig) -> list[str]:
    names = ["patch_embed", "pos_embed", "time_proj", "cond_proj", "cond_center"]
    for i in range(config.n_layers):
        names.append(f"blocks.{i}.norm1.scale")
        for p in SELF_ATTN_PROJS:
            names.append(f"blocks.{i}.self_attn.{p}")
        names.append(f"blocks.{i}.norm2.scale")
        for p in SELF_ATTN_PROJS:
            names.append(f"blocks.{i}.cross_attn.{p}")
        names.append(f"blocks.{i}.norm3.scale")
        names.append(f"blocks.{i}.mlp.fc1")
        names.append(f"blocks.{i}.mlp.fc2")
    names.append("final_norm.scale")
    names.append("unpatch")
    return names


def init_flow(config: FlowConfig, rng: np.random.Generator) -> FlowModel:
    d, f, dc = config.d_model, config.d_ff, config.cond_dim
    resid = 1.0 / np.sqrt(2.0 * config.n_layers)
    w: dict[str, np.ndarray] = {}
    w["patch_embed"] = rng.standard_normal((d, config.patch_dim)) / np.sqrt(
        config.patch_dim
    )
    w["pos_embed"] = rng.standard_normal((config.n_patches, d)) * 0.02
    w["time_proj"] = rng.standard_normal((d, config.time_dim)) / np.sqrt(
        config.time_dim
    )
    w["cond_proj"] = rng.standard_normal((d, config.cond_dim)) / np.sqrt(
        config.cond_dim
    )
    # frozen reference point for the conditioning latents; pretraining sets
    # it to the corpus-mean caption latent so raw latents arrive centered
    w["cond_center"] = np.zeros(config.cond_dim)
    for i in range(config.n_layers):
        w[f"blocks.{i}.norm1.scale"] = np.ones(d)
        for p in ("q_proj", "k_proj", "v_proj"):
            w[f"blocks.{i}.self_attn.{p}"] = rng.standard_normal((d, d)) / np.sqrt(d)
        w[f"blocks.{i}.self_attn.o_proj"] = (
            rng.standard_normal((d, d)) / np.sqrt(d) * resid
        )
        w[f"blocks.{i}.norm2.scale"] = np.ones(d)
        w[f"blocks.{i}.cross_attn.q_proj"] = rng.standard_normal((d, d)) / np.sqrt(d)
        w[f"blocks.{i}.cross_attn.k_proj"] = rng.standard_normal((d, dc)) / np.sqrt(dc)
        w[f"blocks.{i}.cross_attn.v_proj"] = rng.standard_normal((d, dc)) / np.sqrt(dc)
        w[f"blocks.{i}.cross_attn.o_proj"] = (
            rng.standard_normal((d, d)) / np.sqrt(d) * resid
        )
        w[f"blocks.{i}.norm3.scale"] = np.ones(d)
        w[f"blocks.{i}.mlp.fc1"] = rng.standard_normal((f, d)) / np.sqrt(d)
        w[f"blocks.{i}.mlp.fc2"] = rng.standard_normal((d, f)) / np.sqrt(f) * resid
    w["final_norm.scale"] = np.ones(d)
    w["unpatch"] = np.zeros((config.patch_dim, d))
    return FlowModel(config=config, weights=w)


def patchify(z: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch_dim), row-major patches."""
    b, h, w, c = z.shape
    gh, gw = h // patch_size, w // patch_size
    z = z.reshape(b, gh, patch_size, gw, patch_size, c)
    z = z.transpose(0, 1, 3, 2, 4, 5)
    return z.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify(tokens: np.ndarray, config: FlowConfig) -> np.ndarray:
    b = tokens.shape[0]
    p = config.patch_size
    gh, gw = config.height // p, config.width // p
    z = tokens.reshape(b, gh, gw, p, p, config.channels)
    z = z.transpose(0, 1, 3, 2, 4, 5)
    return z.reshape(b, config.height, config.width, config.channels)


def time_features(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal features of timesteps, shape (B, width)."""
    half = width // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(100.0), half))
    ang = t[:, None] * freqs[None, :] * 2.0 * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _rmsnorm(x, scale):
    ms = np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS
    inv = 1.0 / np.sqrt(ms)
    return x * inv * scale, inv


def _rmsnorm_backward(grad, x, inv, scale):
    d = x.shape[-1]
    gs = grad * scale
    dot = np.sum(gs * x, axis=-1, keepdims=True)
    return gs * inv - x * (dot * inv**3 / d)


def _softmax(x):
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _effective(model: FlowModel, name: str, adapters) -> np.ndarray:
    w = model.weights[name]
    if adapters is None:
        return w
    adapter = adapters.get(name)
    if adapter is None:
        return w
    return w + adapter.delta()


class _FlowCache:
    __slots__ = (
        "b", "s", "t", "text", "text_mask", "patches", "blocks",
        "x_final", "inv_final", "tokens_out", "tfeat", "pooled",
    )

    def __init__(self):
        self.blocks = []


def flow_forward(
    model: FlowModel,
    z_t: np.ndarray,
    t: np.ndarray,
    text: np.ndarray,
    text_mask: np.ndarray | None = None,
    adapters=None,
) -> _FlowCache:
    """Batched velocity prediction with a full activation cache.

    z_t: (B, H, W, C); t: (B,); text: (B, T, cond_dim);
    text_mask: (B, T) bool, True for real positions.
    """
    cfg = model.config
    w = model.weights
    if z_t.ndim != 4 or z_t.shape[1:] != cfg.grid_shape:
        raise InvalidInputError(
            f"latent shape {z_t.shape[1:]} does not match model grid {cfg.grid_shape}"
        )
    if text.ndim != 3 or text.shape[-1] != cfg.cond_dim:
        raise InvalidInputError(
            f"conditioning dim {text.shape[-1] if text.ndim == 3 else '?'} "
            f"does not match cond_dim {cfg.cond_dim}"
        )
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidInputError("timesteps must lie in [0, 1]")
    b = z_t.shape[0]
    n, d = cfg.n_patches, cfg.d_model
    heads = cfg.n_heads
    dh = d // heads
    if text_mask is None:
        text_mask = np.ones(text.shape[:2], dtype=bool)
    text = (text - w["cond_center"]) * cfg.cond_gain

    cache = _FlowCache()
    cache.b, cache.s = b, n
    cache.t, cache.text, cache.text_mask = t, text, text_mask

    patches = patchify(z_t, cfg.patch_size)  # (B, N, P)
    cache.patches = patches
    tfeat = time_features(t, cfg.time_dim)  # (B, time_dim)
    cache.tfeat = tfeat
    # mask-aware mean of the text latents: a global conditioning summary
    denom = np.maximum(text_mask.sum(axis=1, keepdims=True), 1)
    pooled = (text * text_mask[..., None]).sum(axis=1) / denom  # (B, Dc)
    cache.pooled = pooled
    x = patches @ w["patch_embed"].T + w["pos_embed"][None] + (
        tfeat @ w["time_proj"].T
    )[:, None, :] + (pooled @ w["cond_proj"].T)[:, None, :]

    cross_bias = np.where(text_mask, 0.0, -1e30)[:, None, None, :]  # (B,1,1,T)
    tlen = text.shape[1]

    for i in range(cfg.n_layers):
        lc: dict = {"x_in": x}
        # self-attention over patch tokens
        a_in, inv1 = _rmsnorm(x, w[f"blocks.{i}.norm1.scale"])
        lc["a_in"], lc["inv1"] = a_in, inv1
        wq = _effective(model, f"blocks.{i}.self_attn.q_proj", adapters)
        wk = _effective(model, f"blocks.{i}.self_attn.k_proj", adapters)
        wv = _effective(model, f"blocks.{i}.self_attn.v_proj", adapters)
        wo = _effective(model, f"blocks.{i}.self_attn.o_proj", adapters)
        q = (a_in @ wq.T).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        k = (a_in @ wk.T).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        v = (a_in @ wv.T).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        lc.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + ctx @ wo.T

        # cross-attention to text latents
        lc["x_mid1"] = x
        c_in, inv2 = _rmsnorm(x, w[f"blocks.{i}.norm2.scale"])
        lc["c_in"], lc["inv2"] = c_in, inv2
        cq = (c_in @ w[f"blocks.{i}.cross_attn.q_proj"].T).reshape(
            b, n, heads, dh
        ).transpose(0, 2, 1, 3)
        ck = (text @ w[f"blocks.{i}.cross_attn.k_proj"].T).reshape(
            b, tlen, heads, dh
        ).transpose(0, 2, 1, 3)
        cv = (text @ w[f"blocks.{i}.cross_attn.v_proj"].T).reshape(
            b, tlen, heads, dh
        ).transpose(0, 2, 1, 3)
        c_att = _softmax(cq @ ck.transpose(0, 1, 3, 2) / np.sqrt(dh) + cross_bias)
        c_ctx = (c_att @ cv).transpose(0, 2, 1, 3).reshape(b, n, d)
        lc.update(cq=cq, ck=ck, cv=cv, c_att=c_att, c_ctx=c_ctx)
        x = x + c_ctx @ w[f"blocks.{i}.cross_attn.o_proj"].T

        # MLP
        lc["x_mid2"] = x
        m_in, inv3 = _rmsnorm(x, w[f"blocks.{i}.norm3.scale"])
        lc["m_in"], lc["inv3"] = m_in, inv3
        hpre = m_in @ w[f"blocks.{i}.mlp.fc1"].T
        hact = _silu(hpre)
        lc.update(hpre=hpre, hact=hact)
        x = x + hact @ w[f"blocks.{i}.mlp.fc2"].T
        cache.blocks.append(lc)

    cache.x_final = x
    h, inv_f = _rmsnorm(x, w["final_norm.scale"])
    cache.inv_final = inv_f
    cache.tokens_out = (h, h @ w["unpatch"].T)
    return cache


def flow_output(cache: _FlowCache, config: FlowConfig) -> np.ndarray:
    return unpatchify(cache.tokens_out[1], config)


def flow_backward(
    model: FlowModel,
    cache: _FlowCache,
    d_out: np.ndarray,
    adapters=None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every weight.

    For adapter-carrying matrices the returned gradient is with respect to
    the *effective* weight; the adapter module maps it onto (a, b).
    """
    cfg = model.config
    w = model.weights
    b, n = cache.b, cache.s
    d = cfg.d_model
    heads = cfg.n_heads
    dh = d // heads
    grads: dict[str, np.ndarray] = {}

    dtokens = patchify(d_out, cfg.patch_size)  # (B, N, P)
    h, _ = cache.tokens_out
    grads["unpatch"] = np.einsum("bnp,bnd->pd", dtokens, h)
    dh_final = dtokens @ w["unpatch"]
    dx = _rmsnorm_backward(dh_final, cache.x_final, cache.inv_final, w["final_norm.scale"])

    for i in range(cfg.n_layers - 1, -1, -1):
        lc = cache.blocks[i]
        # MLP
        dhact = dx @ w[f"blocks.{i}.mlp.fc2"]
        grads[f"blocks.{i}.mlp.fc2"] = np.einsum("bnd,bnf->df", dx, lc["hact"])
        dhpre = dhact * _silu_grad(lc["hpre"])
        grads[f"blocks.{i}.mlp.fc1"] = np.einsum("bnf,bnd->fd", dhpre, lc["m_in"])
        dm_in = dhpre @ w[f"blocks.{i}.mlp.fc1"]
        dx = dx + _rmsnorm_backward(
            dm_in, lc["x_mid2"], lc["inv3"], w[f"blocks.{i}.norm3.scale"]
        )

        # cross-attention (no gradient to the frozen text latents is needed)
        dcc_out = dx
        dc_ctx = dcc_out @ w[f"blocks.{i}.cross_attn.o_proj"]
        grads[f"blocks.{i}.cross_attn.o_proj"] = np.einsum(
            "bnd,bne->de", dcc_out, lc["c_ctx"]
        )
        dc_ctx = dc_ctx.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        dc_att = dc_ctx @ lc["cv"].transpose(0, 1, 3, 2)
        dcv = lc["c_att"].transpose(0, 1, 3, 2) @ dc_ctx
        c_att = lc["c_att"]
        dc_scores = c_att * (dc_att - np.sum(dc_att * c_att, axis=-1, keepdims=True))
        dc_scores /= np.sqrt(dh)
        dcq = dc_scores @ lc["ck"]
        dck = dc_scores.transpose(0, 1, 3, 2) @ lc["cq"]
        dcq = dcq.transpose(0, 2, 1, 3).reshape(b, n, d)
        dck_flat = dck.transpose(0, 2, 1, 3).reshape(b, -1, d)
        dcv_flat = dcv.transpose(0, 2, 1, 3).reshape(b, -1, d)
        grads[f"blocks.{i}.cross_attn.q_proj"] = np.einsum(
            "bnd,bne->de", dcq, lc["c_in"]
        )
        grads[f"blocks.{i}.cross_attn.k_proj"] = np.einsum(
            "btd,bte->de", dck_flat, cache.text
        )
        grads[f"blocks.{i}.cross_attn.v_proj"] = np.einsum(
            "btd,bte->de", dcv_flat, cache.text
        )
        dc_in = dcq @ w[f"blocks.{i}.cross_attn.q_proj"]
        dx = dx + _rmsnorm_backward(
            dc_in, lc["x_mid1"], lc["inv2"], w[f"blocks.{i}.norm2.scale"]
        )

        # self-attention
        wq = _effective(model, f"blocks.{i}.self_attn.q_proj", adapters)
        wk = _effective(model, f"blocks.{i}.self_attn.k_proj", adapters)
        wv = _effective(model, f"blocks.{i}.self_attn.v_proj", adapters)
        wo = _effective(model, f"blocks.{i}.self_attn.o_proj", adapters)
        ds_out = dx
        dctx = ds_out @ wo
        grads[f"blocks.{i}.self_attn.o_proj"] = np.einsum(
            "bnd,bne->de", ds_out, lc["ctx"]
        )
        dctx = dctx.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        datt = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["att"].transpose(0, 1, 3, 2) @ dctx
        att = lc["att"]
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dq = dscores @ lc["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]
        dq = dq.transpose(0, 2, 1, 3).reshape(b, n, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(b, n, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(b, n, d)
        grads[f"blocks.{i}.self_attn.q_proj"] = np.einsum("bnd,bne->de", dq, lc["a_in"])
        grads[f"blocks.{i}.self_attn.k_proj"] = np.einsum("bnd,bne->de", dk, lc["a_in"])
        grads[f"blocks.{i}.self_attn.v_proj"] = np.einsum("bnd,bne->de", dv, lc["a_in"])
        da_in = dq @ wq + dk @ wk + dv @ wv
        dx = dx + _rmsnorm_backward(
            da_in, lc["x_in"], lc["inv1"], w[f"blocks.{i}.norm1.scale"]
        )

    grads["patch_embed"] = np.einsum("bnd,bnp->dp", dx, cache.patches)
    grads["pos_embed"] = np.sum(dx, axis=0)
    dglobal = np.sum(dx, axis=1)  # (B, D), shared by time and pooled-text paths
    grads["time_proj"] = np.einsum("bd,bt->dt", dglobal, cache.tfeat)
    grads["cond_proj"] = np.einsum("bd,bc->dc", dglobal, cache.pooled)
    return grads


def predict_velocity(
    model: FlowModel,
    z_t: np.ndarray,
    t: float,
    text: np.ndarray,
    adapters=None,
) -> np.ndarray:
    """Velocity prediction for a single grid; output shape equals input shape."""
    z_t = validate_grid(z_t, "z_t")
    text = np.asarray(text, dtype=np.float64)
    if text.ndim != 2:
        raise InvalidInputError("text latents must be (seq, cond_dim)")
    cache = flow_forward(
        model, z_t[None], np.asarray([t]), text[None], adapters=adapters
    )
    return flow_output(cache, model.config)[0]


def draw_flow_batch(z0_batch: np.ndarray, rng: np.random.Generator):
    """Fresh noise endpoints and logit-normal timesteps for one batch.

    Returns (z_t, t, z1); draws happen in batch-index order so the result
    is reproducible from the generator state.
    """
    b = z0_batch.shape[0]
    z1 = np.empty_like(z0_batch)
    t = np.empty(b)
    for j in range(b):
        z1[j] = rng.standard_normal(z0_batch.shape[1:])
        t[j] = sample_timestep(rng)
    z_t = t[:, None, None, None] * z0_batch + (1.0 - t[:, None, None, None]) * z1
    return z_t, t, z1


def velocity_mse(v_pred: np.ndarray, z0_batch: np.ndarray, z1_batch: np.ndarray) -> float:
    """Mean over the batch of squared Frobenius error against z0 - z1."""
    diff = v_pred - (z0_batch - z1_batch)
    return float(np.mean(np.sum(diff * diff, axis=(1, 2, 3))))


def flow_loss(
    model: FlowModel,
    items: Sequence[tuple[np.ndarray, np.ndarray]],
    rng: np.random.Generator,
    adapters=None,
) -> float:
    """Rectified-flow matching loss over (grid, text-latents) pairs."""
    if len(items) == 0:
        raise InvalidInputError("batch must be non-empty")
    z0 = np.stack([validate_grid(g, "z0") for g, _ in items])
    z_t, t, z1 = draw_flow_batch(z0, rng)
    text, mask = pad_text_latents([h for _, h in items])
    cache = flow_forward(model, z_t, t, text, mask, adapters=adapters)
    return velocity_mse(flow_output(cache, model.config), z0, z1)


def pad_text_latents(latents: Sequence[np.ndarray]):
    """Stack variable-length (S, D) latents into (B, T, D) plus a key mask."""
    tmax = max(h.shape[0] for h in latents)
    d = latents[0].shape[1]
    out = np.zeros((len(latents), tmax, d))
    mask = np.zeros((len(latents), tmax), dtype=bool)
    for j, h in enumerate(latents):
        out[j, : h.shape[0]] = h
        mask[j, : h.shape[0]] = True
    return out, mask


def euler_integrate(
    velocity: Callable[[np.ndarray, float], np.ndarray],
    z_init: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Forward Euler over t in [0, 1): z <- z + (1/steps) * v(z, t)."""
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    z = np.array(z_init, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        z = z + dt * velocity(z, i * dt)
    return z


def sample(
    model: FlowModel,
    text: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    adapters=None,
) -> np.ndarray:
    """Draw noise at t=0 and integrate the learned field to t=1 (unclamped)."""
    z_init = rng.standard_normal(model.config.grid_shape)
    return euler_integrate(
        lambda z, t: predict_velocity(model, z, t, text, adapters=adapters),
        z_init,
        steps,
    )

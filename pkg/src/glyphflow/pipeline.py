"""End-to-end orchestration: pretraining, concept customization, generation.

Stage 1 (visual concept learning) trains only low-rank adapters on the flow
model against a concept's reference grids, prompted by its rare-token
anchor string. Stage 2 (textual knowledge updating) applies closed-form
edits to the frozen encoder so each knowledge query answers with the
anchor. Generation then encodes any prompt and integrates the flow.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flow_model as fm
from . import lora
from . import text_encoder as te
from .checkpoint import Checkpoint
from .errors import InvalidInputError, TrainingDivergedError
from .knowledge_editor import (
    DEFAULT_EDIT_REPEATS,
    DEFAULT_ETA,
    EditReport,
    apply_sequence,
    build_edit_request,
)
from .optim import AdamW
from .world import WorldSpec, build_vocabulary, corpus_items, lm_texts


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible RNG stream named after its consumer."""
    return np.random.default_rng([master_seed, zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainConfig:
    """Stage-1 adapter training configuration."""

    lr: float = 2e-4
    steps: int = 300
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    rank: int = 4
    alpha: float = 4.0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    encoder_steps: int = 4500
    encoder_lr: float = 2e-3
    encoder_batch: int = 16
    identity_weight: float = 0.5
    flow_steps: int = 5000
    flow_lr: float = 1e-3
    flow_finetune_steps: int = 2000
    flow_finetune_lr: float = 3e-4
    flow_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.encoder_steps < 1 or self.flow_steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.encoder_lr <= 0 or self.flow_lr <= 0:
            raise InvalidInputError("learning rates must be positive")


@dataclass
class ConceptSpec:
    """A target concept: reference images, anchor string, knowledge items."""

    id: str
    reference_grids: list[np.ndarray]
    anchor: str
    knowledge: list[str] = field(default_factory=list)
    foreground_mask: np.ndarray | None = None

    def validate(self, anchor_pool: Sequence[str]) -> None:
        if len(self.reference_grids) < 1:
            raise InvalidInputError("a concept needs at least one reference grid")
        words = self.anchor.split()
        if not words or words[0] not in anchor_pool:
            raise InvalidInputError(
                f"anchor must start with a rare token from the pool, got {self.anchor!r}"
            )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "anchor": self.anchor,
            "knowledge": list(self.knowledge),
            "reference_grids": [g.tolist() for g in self.reference_grids],
            "foreground_mask": (
                self.foreground_mask.tolist()
                if self.foreground_mask is not None
                else None
            ),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConceptSpec":
        return cls(
            id=obj["id"],
            reference_grids=[np.asarray(g, dtype=np.float64) for g in obj["reference_grids"]],
            anchor=obj["anchor"],
            knowledge=list(obj["knowledge"]),
            foreground_mask=(
                np.asarray(obj["foreground_mask"], dtype=bool)
                if obj.get("foreground_mask") is not None
                else None
            ),
        )


def save_concept(concept: ConceptSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(concept.to_json(), sort_keys=True))


def load_concept(path: str | Path) -> ConceptSpec:
    try:
        return ConceptSpec.from_json(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError) as exc:
        raise InvalidInputError(f"malformed concept spec: {exc}") from exc


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _pad_sequences(seqs: list[list[int]], pad_id: int):
    smax = max(len(s) for s in seqs)
    ids = np.full((len(seqs), smax), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), smax), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _lm_targets(ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    targets = np.full_like(ids, -1)
    targets[:, :-1] = ids[:, 1:]
    targets[:, :-1][~mask[:, 1:]] = -1
    return targets


def train_encoder_lm(
    model: te.EncoderModel,
    texts: Sequence[str],
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    identity_weight: float = 0.5,
) -> list[dict]:
    """Next-token training over a closed text corpus; returns a step log.

    `identity_weight` adds an auxiliary term: each position must also predict
    its own token through the tied head. Pure next-token training on a tiny
    closed corpus collapses per-position identity in the late layers (the
    next-token distribution after "a red" equals the one after "a blue"), and
    the downstream generator conditions on these latents; the identity term
    keeps token content linearly readable in them.
    """
    seqs = [te.tokenize(model.vocab, t) + [model.vocab.end_id] for t in texts]
    ids_all, mask_all = _pad_sequences(seqs, model.vocab.pad_id)
    targets_all = _lm_targets(ids_all, mask_all)
    identity_all = np.where(mask_all, ids_all, -1)
    trainable = {n: model.weights[n] for n in model.trainable_names()}
    opt = AdamW(
        trainable,
        lr=lr,
        lr_multipliers=te.encoder_lr_multipliers(model.config),
    )
    log = []
    start = time.perf_counter()
    for step in range(steps):
        rows = rng.integers(0, len(seqs), size=batch_size)
        ids, mask = ids_all[rows], mask_all[rows]
        cache = te.encoder_forward(model, ids, pad_mask=mask)
        loss, dlogits = te.lm_loss_and_dlogits(
            cache.logits, targets_all[rows], reduce="mean"
        )
        if identity_weight > 0.0:
            id_loss, id_dlogits = te.lm_loss_and_dlogits(
                cache.logits, identity_all[rows], reduce="mean"
            )
            loss = loss + identity_weight * id_loss
            dlogits = dlogits + identity_weight * id_dlogits
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        grads, _ = te.encoder_backward(model, cache, dlogits)
        opt.step({k: g for k, g in grads.items() if k in trainable})
        if step % 200 == 0 or step == steps - 1:
            log.append(
                {"step": step, "loss": loss, "seconds": time.perf_counter() - start}
            )
    return log


def _flow_step_grads(model, z0, latents_batch, rng, adapters):
    z_t, t, z1 = fm.draw_flow_batch(z0, rng)
    text, mask = fm.pad_text_latents(latents_batch)
    cache = fm.flow_forward(model, z_t, t, text, mask, adapters=adapters)
    v = fm.flow_output(cache, model.config)
    loss = fm.velocity_mse(v, z0, z1)
    d_out = 2.0 * (v - (z0 - z1)) / z0.shape[0]
    grads = fm.flow_backward(model, cache, d_out, adapters=adapters)
    return loss, grads


def train_flow(
    model: fm.FlowModel,
    items: Sequence[tuple[np.ndarray, np.ndarray]],
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    adapters: lora.AdapterSet | None = None,
) -> list[dict]:
    """Velocity-matching training on (grid, text-latents) pairs.

    With `adapters` given, only adapter parameters are updated; base flow
    weights are untouched.
    """
    if len(items) == 0:
        raise InvalidInputError("no training items")
    grids = np.stack([g for g, _ in items])
    latents = [h for _, h in items]
    if adapters is None:
        params = {n: model.weights[n] for n in model.trainable_names()}
    else:
        params = adapters.parameters()
    opt = AdamW(params, lr=lr)
    log = []
    start = time.perf_counter()
    for step in range(steps):
        rows = rng.integers(0, len(items), size=batch_size)
        loss, wgrads = _flow_step_grads(
            model, grids[rows], [latents[r] for r in rows], rng, adapters
        )
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        if adapters is None:
            opt.step({k: g for k, g in wgrads.items() if k in params})
        else:
            opt.step(lora.adapter_grads_from_weight_grads(adapters, wgrads))
        if step % 200 == 0 or step == steps - 1:
            log.append(
                {"step": step, "loss": loss, "seconds": time.perf_counter() - start}
            )
    return log


# ---------------------------------------------------------------------------
# pipeline operations
# ---------------------------------------------------------------------------

def encode_text(ckpt: Checkpoint, text: str) -> np.ndarray:
    return te.encode(ckpt.encoder, te.tokenize(ckpt.encoder.vocab, text))


def pretrain_base(
    world: WorldSpec,
    config: PretrainConfig = PretrainConfig(),
    encoder_config: te.EncoderConfig = te.EncoderConfig(),
    flow_config: fm.FlowConfig = fm.FlowConfig(),
) -> tuple[Checkpoint, dict]:
    """Create a base checkpoint: train the encoder LM, then the flow model."""
    vocab = build_vocabulary(world)
    encoder = te.init_encoder(
        encoder_config, vocab, substream(config.seed, "encoder-init")
    )
    enc_log = train_encoder_lm(
        encoder,
        lm_texts(world),
        config.encoder_steps,
        config.encoder_lr,
        config.encoder_batch,
        substream(config.seed, "encoder-train"),
        identity_weight=config.identity_weight,
    )

    flow = fm.init_flow(flow_config, substream(config.seed, "flow-init"))
    items = [
        (item.grid, te.encode(encoder, te.tokenize(vocab, item.caption)))
        for item in corpus_items(world)
    ]
    # center the conditioning interface on the corpus-mean caption latent
    flow.weights["cond_center"] = np.mean(
        np.concatenate([h for _, h in items], axis=0), axis=0
    )
    flow_log = train_flow(
        flow,
        items,
        config.flow_steps,
        config.flow_lr,
        config.flow_batch,
        substream(config.seed, "flow-train"),
    )
    if config.flow_finetune_steps > 0:
        flow_log += train_flow(
            flow,
            items,
            config.flow_finetune_steps,
            config.flow_finetune_lr,
            config.flow_batch,
            substream(config.seed, "flow-train-finetune"),
        )
    ckpt = Checkpoint(encoder=encoder, flow=flow, world=world)
    return ckpt, {"encoder": enc_log, "flow": flow_log}


def learn_concept(
    ckpt: Checkpoint, concept: ConceptSpec, config: TrainConfig = TrainConfig()
) -> tuple[lora.AdapterSet, list[dict]]:
    """Stage 1: bind the anchor string to the concept's reference grids."""
    if ckpt.world is not None:
        concept.validate(ckpt.world.anchor_pool)
    else:
        concept.validate(ckpt.encoder.vocab.anchor_tokens)
    anchor_latents = encode_text(ckpt, concept.anchor)
    adapters = lora.init_adapters(
        ckpt.flow,
        ckpt.flow.self_attention_targets(),
        rank=config.rank,
        alpha=config.alpha,
        rng=substream(config.seed, "lora-init"),
    )
    items = [(np.asarray(g, dtype=np.float64), anchor_latents) for g in concept.reference_grids]
    log = train_flow(
        ckpt.flow,
        items,
        config.steps,
        config.lr,
        config.batch_size,
        substream(config.seed, "lora-train"),
        adapters=adapters,
    )
    return adapters, log


@dataclass
class CustomizeResult:
    checkpoint: Checkpoint
    edit_reports: list[EditReport]
    stage1_log: list[dict]


def customize(
    ckpt: Checkpoint,
    concept: ConceptSpec,
    config: TrainConfig = TrainConfig(),
    eta: float = DEFAULT_ETA,
    edit_repeats: int = DEFAULT_EDIT_REPEATS,
) -> CustomizeResult:
    """Stage 1 then stage 2 on a copy of the base checkpoint."""
    out = ckpt.clone()
    adapters, stage1_log = learn_concept(out, concept, config)
    out.adapters = adapters
    out.concepts[concept.id] = concept.anchor
    reports: list[EditReport] = []
    if concept.knowledge:
        requests = [
            build_edit_request(k, concept.anchor, eta=eta) for k in concept.knowledge
        ]
        reports = apply_sequence(out.encoder, requests, repeats_per_request=edit_repeats)
    return CustomizeResult(checkpoint=out, edit_reports=reports, stage1_log=stage1_log)


def generate(
    ckpt: Checkpoint, prompt: str, seed: int = 0, steps: int = 32
) -> tuple[np.ndarray, dict]:
    """Encode a prompt and integrate the flow from noise; deterministic."""
    latents = encode_text(ckpt, prompt)
    grid = fm.sample(
        ckpt.flow,
        latents,
        steps,
        substream(seed, "sampling"),
        adapters=ckpt.adapters,
    )
    meta = {"prompt": prompt, "seed": seed, "steps": steps}
    return grid, meta


def create_virtual_concept(
    ckpt: Checkpoint,
    name_token: str,
    attributes: Sequence[tuple[str, str]],
    eta: float = DEFAULT_ETA,
    edit_repeats: int = DEFAULT_EDIT_REPEATS,
) -> tuple[Checkpoint, list[EditReport]]:
    """Describe a fresh rare token purely through knowledge edits.

    `attributes` pairs a knowledge phrase about the token (e.g. "the color
    of <vfx>") with a corpus-known answer word ("blue"). No adapter
    training is involved.
    """
    pool = ckpt.world.anchor_pool if ckpt.world else ckpt.encoder.vocab.anchor_tokens
    if name_token not in pool:
        raise InvalidInputError(f"{name_token!r} is not in the anchor pool")
    if len(attributes) == 0:
        raise InvalidInputError("attribute list is empty")
    out = ckpt.clone()
    requests = [build_edit_request(k, answer, eta=eta) for k, answer in attributes]
    reports = apply_sequence(out.encoder, requests, repeats_per_request=edit_repeats)
    return out, reports


def erase_concept(
    ckpt: Checkpoint,
    entity_name: str,
    overrides: Sequence[tuple[str, str]],
    eta: float = DEFAULT_ETA,
    edit_repeats: int = DEFAULT_EDIT_REPEATS,
) -> tuple[Checkpoint, list[EditReport]]:
    """Overwrite a corpus entity's visual-attribute answers with counterfactuals."""
    if ckpt.world is None or all(
        e.name != entity_name for e in ckpt.world.entities
    ):
        raise InvalidInputError(f"unknown corpus entity {entity_name!r}")
    if len(overrides) == 0:
        raise InvalidInputError("no attribute overrides given")
    out = ckpt.clone()
    requests = [build_edit_request(k, answer, eta=eta) for k, answer in overrides]
    reports = apply_sequence(out.encoder, requests, repeats_per_request=edit_repeats)
    return out, reports


# ---------------------------------------------------------------------------
# sample export
# ---------------------------------------------------------------------------

def grid_to_ppm(grid: np.ndarray) -> str:
    """Plain (ASCII P3) PPM; values mapped linearly from [-1, 1] to 0..255."""
    h, w, _ = grid.shape
    levels = np.clip(np.rint((np.clip(grid, -1.0, 1.0) + 1.0) * 127.5), 0, 255)
    lines = [f"P3", f"{w} {h}", "255"]
    for row in levels.astype(int):
        lines.append(" ".join(str(v) for px in row for v in px))
    return "\n".join(lines) + "\n"


def export_sample(grid: np.ndarray, meta: dict, path_base: str | Path) -> None:
    """Write <base>.ppm plus a <base>.json metadata sidecar."""
    base = Path(path_base)
    base.with_suffix(".ppm").write_text(grid_to_ppm(grid))
    base.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))

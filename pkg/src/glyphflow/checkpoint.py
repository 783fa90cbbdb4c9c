"""Single-file checkpoint container shared by the encoder and flow model.

Layout: a magic line, an ASCII byte count, a JSON header (configs,
vocabulary, world, and an ordered weight-block index), then raw
little-endian float32 blocks in the declared order. Loading promotes
weights to float64; saving rounds back, so load->save reproduces a file
byte for byte.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .flow_model import FlowConfig, FlowModel
from .lora import AdapterSet, LoraAdapter
from .text_encoder import EncoderConfig, EncoderModel, Vocabulary
from .world import WorldSpec

MAGIC = b"GLYPHFLOW-CKPT v1\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    encoder: EncoderModel
    flow: FlowModel
    adapters: AdapterSet | None = None
    world: WorldSpec | None = None
    concepts: dict[str, str] = field(default_factory=dict)  # concept id -> anchor

    def clone(self) -> "Checkpoint":
        enc = EncoderModel(
            config=self.encoder.config,
            vocab=self.encoder.vocab,
            weights={k: v.copy() for k, v in self.encoder.weights.items()},
        )
        flow = FlowModel(
            config=self.flow.config,
            weights={k: v.copy() for k, v in self.flow.weights.items()},
        )
        adapters = None
        if self.adapters is not None:
            adapters = AdapterSet(
                adapters={
                    n: LoraAdapter(a.target, a.a.copy(), a.b.copy(), a.rank, a.alpha)
                    for n, a in self.adapters.adapters.items()
                },
                merged=self.adapters.merged,
            )
        return Checkpoint(
            encoder=enc,
            flow=flow,
            adapters=adapters,
            world=self.world,
            concepts=dict(self.concepts),
        )


def _adapter_block_names(adapters: AdapterSet) -> list[str]:
    names = []
    for target in sorted(adapters.adapters):
        names.append(f"adapters.{target}.lora_a")
        names.append(f"adapters.{target}.lora_b")
    return names


def _collect_blocks(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    blocks = [(f"encoder.{n}", ckpt.encoder.weights[n]) for n in ckpt.encoder.weight_names()]
    blocks += [(f"flow.{n}", ckpt.flow.weights[n]) for n in ckpt.flow.weight_names()]
    if ckpt.adapters is not None:
        for target in sorted(ckpt.adapters.adapters):
            ad = ckpt.adapters.adapters[target]
            blocks.append((f"adapters.{target}.lora_a", ad.a))
            blocks.append((f"adapters.{target}.lora_b", ad.b))
    return blocks


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    blocks = _collect_blocks(ckpt)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": asdict(ckpt.encoder.config),
        "flow_config": asdict(ckpt.flow.config),
        "vocab": {
            "tokens": list(ckpt.encoder.vocab.tokens),
            "anchor_tokens": list(ckpt.encoder.vocab.anchor_tokens),
        },
        "world": ckpt.world.to_json() if ckpt.world is not None else None,
        "adapters": (
            {
                "rank": next(iter(ckpt.adapters)).rank,
                "alpha": next(iter(ckpt.adapters)).alpha,
                "merged": ckpt.adapters.merged,
                "targets": sorted(ckpt.adapters.adapters),
            }
            if ckpt.adapters is not None and len(ckpt.adapters) > 0
            else None
        ),
        "concepts": ckpt.concepts,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(payload)}\n".encode())
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_header(fh):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointFormatError("not a glyphflow checkpoint (bad magic)")
    length_line = fh.readline()
    try:
        payload_len = int(length_line.strip())
    except ValueError:
        raise CheckpointFormatError("corrupt header length") from None
    try:
        header = json.loads(fh.read(payload_len))
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {header.get('format_version')!r}"
        )
    return header


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        arrays: dict[str, np.ndarray] = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointFormatError(f"truncated block {block['name']!r}")
            arrays[block["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after declared blocks")

    vocab = Vocabulary(
        header["vocab"]["tokens"], tuple(header["vocab"]["anchor_tokens"])
    )
    enc_cfg = EncoderConfig(
        **{
            **header["encoder_config"],
            "updatable_layers": tuple(header["encoder_config"]["updatable_layers"]),
            "updatable_matrices": tuple(header["encoder_config"]["updatable_matrices"]),
        }
    )
    encoder = EncoderModel(config=enc_cfg, vocab=vocab, weights={})
    for name in encoder.weight_names():
        encoder.weights[name] = arrays[f"encoder.{name}"]
    flow_cfg = FlowConfig(**header["flow_config"])
    flow = FlowModel(config=flow_cfg, weights={})
    for name in flow.weight_names():
        flow.weights[name] = arrays[f"flow.{name}"]

    adapters = None
    meta = header.get("adapters")
    if meta is not None:
        adapters = AdapterSet(merged=bool(meta["merged"]))
        for target in meta["targets"]:
            adapters.adapters[target] = LoraAdapter(
                target=target,
                a=arrays[f"adapters.{target}.lora_a"],
                b=arrays[f"adapters.{target}.lora_b"],
                rank=int(meta["rank"]),
                alpha=float(meta["alpha"]),
            )
    world = WorldSpec.from_json(header["world"]) if header.get("world") else None
    return Checkpoint(
        encoder=encoder,
        flow=flow,
        adapters=adapters,
        world=world,
        concepts=dict(header.get("concepts", {})),
    )


def inspect_checkpoint(path: str | Path) -> dict:
    """Header summary plus a CRC32 per weight block."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        sections = []
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            raw = fh.read(int(np.prod(shape)) * 4 if shape else 4)
            sections.append(
                {
                    "name": block["name"],
                    "shape": list(shape),
                    "crc32": f"{zlib.crc32(raw):08x}",
                }
            )
    return {
        "format_version": header["format_version"],
        "encoder_config": header["encoder_config"],
        "flow_config": header["flow_config"],
        "vocab_size": len(header["vocab"]["tokens"]),
        "concepts": header.get("concepts", {}),
        "has_adapters": header.get("adapters") is not None,
        "sections": sections,
    }

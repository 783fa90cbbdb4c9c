"""Benchmark synthesis and evaluation for knowledge-aware customization.

Concepts are held-out glyph combinations; each gets knowledge strings from
six fixed perspective templates and generation prompts from four. Image
fidelity uses a frozen random-projection patch embedding (masked variant
restricts pooling to the concept's known foreground); prompt fidelity uses
a linear readout from image embeddings to pooled text latents, calibrated
once on the pretraining corpus.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import linalg
from .checkpoint import Checkpoint
from .errors import InvalidInputError
from .knowledge_editor import DEFAULT_ETA, locality_check
from .pipeline import ConceptSpec, CustomizeResult, TrainConfig, customize, encode_text, generate
from .world import (
    PROMPT_PERSPECTIVES,
    WorldSpec,
    caption_for,
    corpus_items,
    generation_prompts_for,
    glyph_mask,
    held_out_combos,
    knowledge_texts_for,
    locality_probes,
    render_glyph,
)


# ---------------------------------------------------------------------------
# specs and cell counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSpec:
    concept_count: int = 4
    knowledge_per_concept: int = 5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    generation_pairs: int | None = None  # None: every knowledge x prompt pair
    master_seed: int = 0

    def __post_init__(self):
        if self.concept_count < 1:
            raise InvalidInputError("need at least one concept")
        if not self.seeds:
            raise InvalidInputError("need at least one seed")


@dataclass(frozen=True)
class CellCounts:
    reconstruction: int
    generation: int

    @property
    def total(self) -> int:
        return self.reconstruction + self.generation


def count_cells(spec: BenchmarkSpec) -> CellCounts:
    """Evaluation-image arithmetic implied by a benchmark configuration."""
    recon = spec.concept_count * spec.knowledge_per_concept * len(spec.seeds)
    pairs = (
        spec.generation_pairs
        if spec.generation_pairs is not None
        else spec.concept_count
        * spec.knowledge_per_concept
        * len(PROMPT_PERSPECTIVES)
    )
    return CellCounts(reconstruction=recon, generation=pairs * len(spec.seeds))


def paper_scale_spec() -> BenchmarkSpec:
    """The full-scale configuration: 35 concepts, 5 knowledge, 5 seeds, and
    the curated generation-pair count that brings the total to 5,975 images."""
    return BenchmarkSpec(
        concept_count=35,
        knowledge_per_concept=5,
        seeds=(0, 1, 2, 3, 4),
        generation_pairs=1020,
    )


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

@dataclass
class BenchConcept:
    spec: ConceptSpec
    combo: tuple[str, str, str]
    mask: np.ndarray
    knowledge_perspectives: list[str]


@dataclass
class BenchmarkDataset:
    spec: BenchmarkSpec
    concepts: list[BenchConcept]
    prompts: dict[str, list[tuple[str, str, str]]]  # knowledge -> (perspective, prompt, concept id)

    def concept_ids(self) -> list[str]:
        return [c.spec.id for c in self.concepts]


def build_benchmark(world: WorldSpec, spec: BenchmarkSpec) -> BenchmarkDataset:
    """Deterministic dataset of held-out concepts, knowledge, and prompts."""
    pool = held_out_combos(world)
    if spec.concept_count > len(pool):
        raise InvalidInputError(
            f"requested {spec.concept_count} concepts but only {len(pool)} held-out combos"
        )
    rng = np.random.default_rng(spec.master_seed)
    order = rng.permutation(len(pool))
    concepts: list[BenchConcept] = []
    prompts: dict[str, list[tuple[str, str, str]]] = {}
    for i in range(spec.concept_count):
        combo = pool[order[i]]
        know = knowledge_texts_for(i, spec.knowledge_per_concept)
        cid = f"concept{i:02d}"
        cspec = ConceptSpec(
            id=cid,
            reference_grids=[render_glyph(*combo)],
            anchor="<sks> pattern",
            knowledge=[text for _, text in know],
            foreground_mask=glyph_mask(combo[0], combo[2]),
        )
        concepts.append(
            BenchConcept(
                spec=cspec,
                combo=combo,
                mask=cspec.foreground_mask,
                knowledge_perspectives=[name for name, _ in know],
            )
        )
        for _, text in know:
            prompts[text] = [
                (pname, ptext, cid) for pname, ptext in generation_prompts_for(text)
            ]
    return BenchmarkDataset(spec=spec, concepts=concepts, prompts=prompts)


def save_benchmark(dataset: BenchmarkDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "spec": {
            "concept_count": dataset.spec.concept_count,
            "knowledge_per_concept": dataset.spec.knowledge_per_concept,
            "seeds": list(dataset.spec.seeds),
            "generation_pairs": dataset.spec.generation_pairs,
            "master_seed": dataset.spec.master_seed,
        },
        "concepts": [
            {
                "concept": c.spec.to_json(),
                "combo": list(c.combo),
                "perspectives": c.knowledge_perspectives,
            }
            for c in dataset.concepts
        ],
        "prompts": dataset.prompts,
    }
    (directory / "benchmark.json").write_text(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


class ImageEmbedder:
    """Frozen random-projection patch embedding with (masked) mean pooling."""

    def __init__(self, seed: int = 7, proj_dim: int = 32, patch: int = 2):
        rng = np.random.default_rng(seed)
        self.patch = patch
        self.proj = rng.standard_normal((patch * patch * 3, proj_dim)) / np.sqrt(
            patch * patch * 3
        )

    def _patches(self, grid: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
        h, w, _ = grid.shape
        p = self.patch
        feats, coords = [], []
        for i in range(h - p + 1):
            for j in range(w - p + 1):
                feats.append(grid[i : i + p, j : j + p].ravel())
                coords.append((i, j))
        return np.stack(feats), coords

    def embed(self, grid: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        feats, coords = self._patches(np.asarray(grid, dtype=np.float64))
        if mask is not None:
            p = self.patch
            keep = [
                mask[i : i + p, j : j + p].sum() >= (p * p) / 2 for i, j in coords
            ]
            if not any(keep):
                return np.zeros(self.proj.shape[1])
            feats = feats[np.asarray(keep)]
        return feats.mean(axis=0) @ self.proj

    def fidelity(
        self,
        generated: np.ndarray,
        references: Sequence[np.ndarray],
        mask: np.ndarray | None = None,
    ) -> float:
        emb = self.embed(generated, mask)
        return float(
            np.mean([_cosine(emb, self.embed(r, mask)) for r in references])
        )


class TextImageReadout:
    """Linear map from image embeddings to pooled text latents.

    Calibrated once on the pretraining corpus by the same regularized
    least-squares solve the editor uses; scoring is then cosine in the
    text-latent space.
    """

    def __init__(self, ckpt: Checkpoint, embedder: ImageEmbedder):
        if ckpt.world is None:
            raise InvalidInputError("checkpoint carries no world spec")
        items = corpus_items(ckpt.world)
        img = np.stack([embedder.embed(item.grid) for item in items])
        txt = np.stack(
            [encode_text(ckpt, item.caption).mean(axis=0) for item in items]
        )
        self.weights = linalg.ridge_solve(img, txt)
        self.embedder = embedder

    def prompt_fidelity(self, ckpt: Checkpoint, prompt: str, grid: np.ndarray) -> float:
        target = encode_text(ckpt, prompt).mean(axis=0)
        projected = self.embedder.embed(grid) @ self.weights
        return _cosine(target, projected)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def recompute_aggregates(self) -> dict:
        out: dict = {}
        for key in ("fidelity", "masked_fidelity", "prompt_fidelity", "seconds"):
            vals = [r[key] for r in self.records if key in r and r[key] is not None]
            if vals:
                out[f"mean_{key}"] = float(np.mean(vals))
        out["cells"] = len(self.records)
        return out

    def finalize(self) -> "MetricReport":
        self.aggregates = self.recompute_aggregates()
        return self

    def to_json(self) -> dict:
        return {"records": self.records, "aggregates": self.aggregates}

    def save(self, path_base: str | Path) -> None:
        base = Path(path_base)
        base.with_suffix(".json").write_text(json.dumps(self.to_json(), sort_keys=True))
        if self.records:
            with open(base.with_suffix(".csv"), "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=sorted(self.records[0]))
                writer.writeheader()
                writer.writerows(self.records)


def _resolve_checkpoint(ckpts, concept_id: str) -> Checkpoint:
    if isinstance(ckpts, Checkpoint):
        if concept_id not in ckpts.concepts:
            raise InvalidInputError(
                f"checkpoint does not cover concept {concept_id!r}"
            )
        return ckpts
    try:
        return ckpts[concept_id]
    except KeyError:
        raise InvalidInputError(f"no checkpoint for concept {concept_id!r}") from None


def eval_reconstruction(
    ckpts: Checkpoint | Mapping[str, Checkpoint],
    dataset: BenchmarkDataset,
    embedder: ImageEmbedder | None = None,
    steps: int = 32,
) -> MetricReport:
    """Generate directly from each knowledge string and score concept fidelity."""
    embedder = embedder or ImageEmbedder()
    report = MetricReport()
    for concept in dataset.concepts:
        ckpt = _resolve_checkpoint(ckpts, concept.spec.id)
        refs = concept.spec.reference_grids
        for k_text, perspective in zip(
            concept.spec.knowledge, concept.knowledge_perspectives
        ):
            for seed in dataset.spec.seeds:
                t0 = time.perf_counter()
                grid, _ = generate(ckpt, k_text, seed=seed, steps=steps)
                report.records.append(
                    {
                        "split": "reconstruction",
                        "concept": concept.spec.id,
                        "knowledge": k_text,
                        "perspective": perspective,
                        "seed": seed,
                        "fidelity": embedder.fidelity(grid, refs),
                        "masked_fidelity": embedder.fidelity(grid, refs, concept.mask),
                        "seconds": time.perf_counter() - t0,
                    }
                )
    return report.finalize()


def eval_generation(
    ckpts: Checkpoint | Mapping[str, Checkpoint],
    dataset: BenchmarkDataset,
    embedder: ImageEmbedder | None = None,
    readout: TextImageReadout | None = None,
    steps: int = 32,
) -> MetricReport:
    """Generate from knowledge embedded in prompts; adds prompt fidelity."""
    embedder = embedder or ImageEmbedder()
    report = MetricReport()
    for concept in dataset.concepts:
        ckpt = _resolve_checkpoint(ckpts, concept.spec.id)
        if readout is None:
            readout = TextImageReadout(ckpt, embedder)
        refs = concept.spec.reference_grids
        for k_text in concept.spec.knowledge:
            for perspective, prompt, _ in dataset.prompts[k_text]:
                for seed in dataset.spec.seeds:
                    t0 = time.perf_counter()
                    grid, _ = generate(ckpt, prompt, seed=seed, steps=steps)
                    report.records.append(
                        {
                            "split": "generation",
                            "concept": concept.spec.id,
                            "knowledge": k_text,
                            "perspective": perspective,
                            "prompt": prompt,
                            "seed": seed,
                            "fidelity": embedder.fidelity(grid, refs),
                            "masked_fidelity": embedder.fidelity(
                                grid, refs, concept.mask
                            ),
                            "prompt_fidelity": readout.prompt_fidelity(
                                ckpt, prompt, grid
                            ),
                            "seconds": time.perf_counter() - t0,
                        }
                    )
    return report.finalize()


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def run_ablation(
    base: Checkpoint,
    dataset: BenchmarkDataset,
    axis: str,
    values: Sequence,
    train_config: TrainConfig = TrainConfig(),
    eta: float = DEFAULT_ETA,
    concept_index: int = 0,
    embedder: ImageEmbedder | None = None,
) -> list[dict]:
    """Repeat customize+eval along one axis; one result row per value.

    axis "eta" varies the edit scaling factor at fixed knowledge count;
    axis "knowledge_count" varies how many knowledge items are bound.
    """
    if axis not in ("eta", "knowledge_count"):
        raise InvalidInputError(f"unknown ablation axis {axis!r}")
    if not values:
        raise InvalidInputError("no ablation values given")
    embedder = embedder or ImageEmbedder()
    concept = dataset.concepts[concept_index]
    probes = locality_probes(base.world) if base.world else []
    rows: list[dict] = []
    for value in values:
        spec = ConceptSpec(
            id=concept.spec.id,
            reference_grids=list(concept.spec.reference_grids),
            anchor=concept.spec.anchor,
            knowledge=list(concept.spec.knowledge),
            foreground_mask=concept.spec.foreground_mask,
        )
        run_eta = eta
        if axis == "eta":
            run_eta = float(value)
        else:
            spec.knowledge = spec.knowledge[: int(value)]
        result: CustomizeResult = customize(base, spec, train_config, eta=run_eta)
        edit_times = [r.edit_seconds for r in result.edit_reports]
        fidelities, masked = [], []
        for k_text in spec.knowledge:
            for seed in dataset.spec.seeds:
                grid, _ = generate(result.checkpoint, k_text, seed=seed)
                fidelities.append(
                    embedder.fidelity(grid, spec.reference_grids)
                )
                masked.append(
                    embedder.fidelity(grid, spec.reference_grids, concept.mask)
                )
        loc = (
            locality_check(base.encoder, result.checkpoint.encoder, probes)
            if probes
            else None
        )
        rows.append(
            {
                "axis": axis,
                "value": value,
                "eta": run_eta,
                "knowledge_count": len(spec.knowledge),
                "mean_fidelity": float(np.mean(fidelities)) if fidelities else None,
                "mean_masked_fidelity": float(np.mean(masked)) if masked else None,
                "mean_edit_seconds": float(np.mean(edit_times)) if edit_times else None,
                "verified": sum(r.verified for r in result.edit_reports),
                "locality_mean_cosine": loc.mean_cosine if loc else None,
                "locality_frac_unchanged": loc.frac_unchanged if loc else None,
                "locality_passed": loc.passed() if loc else None,
            }
        )
    return rows


def save_ablation(rows: list[dict], path_base: str | Path) -> None:
    base = Path(path_base)
    base.with_suffix(".json").write_text(json.dumps(rows, sort_keys=True))
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sorted(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

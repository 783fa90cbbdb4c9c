"""Synthetic glyph world: images, captions, QA facts, and oracles.

Glyphs are (shape, color, texture) combinations rendered on fixed 8x8 RGB
grids in [-1, 1]. The pretraining corpus covers every solid combination and
half of the textured ones; the excluded textured combinations form the pool
of novel concepts. Named entities with fixed appearances plus a small set
of attribute facts give the encoder editable knowledge, and every claim
about an image is checkable with the hue/shape oracles below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .knowledge_editor import to_query
from .text_encoder import Vocabulary

GRID_SIZE = 8

PALETTE: dict[str, np.ndarray] = {
    "red": np.array([1.0, -1.0, -1.0]),
    "green": np.array([-1.0, 1.0, -1.0]),
    "blue": np.array([-1.0, -1.0, 1.0]),
    "yellow": np.array([1.0, 1.0, -1.0]),
    "purple": np.array([1.0, -1.0, 1.0]),
    "orange": np.array([1.0, 0.0, -1.0]),
    "cyan": np.array([-1.0, 1.0, 1.0]),
    "white": np.array([1.0, 1.0, 1.0]),
}

BACKGROUND = np.array([-0.85, -0.85, -0.85])


def _disk(r2_outer: float, r2_inner: float = -1.0) -> np.ndarray:
    ii, jj = np.mgrid[0:GRID_SIZE, 0:GRID_SIZE]
    d2 = (ii - 3.5) ** 2 + (jj - 3.5) ** 2
    return (d2 <= r2_outer) & (d2 > r2_inner)


def _square() -> np.ndarray:
    m = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    m[2:6, 2:6] = True
    return m


def _cross() -> np.ndarray:
    m = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    m[3:5, 1:7] = True
    m[1:7, 3:5] = True
    return m


def _bars() -> np.ndarray:
    m = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    m[0:2, 1:7] = True
    m[6:8, 1:7] = True
    return m


SHAPES: dict[str, np.ndarray] = {
    "square": _square(),
    "circle": _disk(11.6, 3.7),  # hollow disk reads as a circle outline
    "cross": _cross(),
    "bars": _bars(),
}

TEXTURES = ("solid", "striped", "dotted", "checkered")


def apply_texture(mask: np.ndarray, texture: str) -> np.ndarray:
    ii, jj = np.mgrid[0:GRID_SIZE, 0:GRID_SIZE]
    if texture == "solid":
        return mask
    if texture == "striped":
        return mask & (ii % 2 == 0)
    if texture == "dotted":
        return mask & ((ii + jj) % 2 == 0)
    if texture == "checkered":
        return mask & ((ii // 2 + jj // 2) % 2 == 0)
    raise InvalidInputError(f"unknown texture {texture!r}")


Combo = tuple[str, str, str]  # (shape, color, texture)


def glyph_mask(shape: str, texture: str = "solid") -> np.ndarray:
    if shape not in SHAPES:
        raise InvalidInputError(f"unknown shape {shape!r}")
    return apply_texture(SHAPES[shape], texture)


def render_glyph(shape: str, color: str, texture: str = "solid") -> np.ndarray:
    if color not in PALETTE:
        raise InvalidInputError(f"unknown color {color!r}")
    mask = glyph_mask(shape, texture)
    grid = np.tile(BACKGROUND, (GRID_SIZE, GRID_SIZE, 1))
    grid[mask] = PALETTE[color]
    return grid


def caption_for(combo: Combo) -> str:
    shape, color, texture = combo
    if texture == "solid":
        return f"a {color} {shape}"
    return f"a {texture} {color} {shape}"


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def foreground_mask(grid: np.ndarray, threshold: float = 0.6) -> np.ndarray:
    """Pixels whose color is far from the fixed background."""
    return np.linalg.norm(grid - BACKGROUND, axis=-1) > threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def dominant_hue(grid: np.ndarray, mask: np.ndarray | None = None) -> str | None:
    """Majority nearest-palette color over foreground pixels; None if empty."""
    if mask is None:
        mask = foreground_mask(grid)
    pixels = grid[mask]
    if pixels.shape[0] == 0:
        return None
    names = list(PALETTE)
    centers = np.stack([PALETTE[n] for n in names])  # (K, 3)
    d2 = np.sum((pixels[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    votes = np.bincount(np.argmin(d2, axis=1), minlength=len(names))
    return names[int(np.argmax(votes))]


def shape_match(grid: np.ndarray) -> tuple[str, float]:
    """Best-matching solid shape template for a grid's foreground."""
    fg = foreground_mask(grid)
    best, best_iou = "", -1.0
    for name, mask in SHAPES.items():
        score = iou(fg, mask)
        if score > best_iou:
            best, best_iou = name, score
    return best, best_iou


# ---------------------------------------------------------------------------
# world specification
# ---------------------------------------------------------------------------

ANCHOR_POOL = ("<sks>", "<vfx>", "<abc>", "<xyz>", "<qrs>")
CLASS_NOUNS = ("pattern", "sculpture", "toy")

PERSONAS = (
    "mayor", "captain", "baker", "gardener", "sailor", "teacher",
    "painter", "miller", "fisher", "weaver", "tailor", "scribe",
)

KNOWLEDGE_PERSPECTIVES: tuple[tuple[str, str], ...] = (
    ("ownership", "the {p}'s favorite treasure"),
    ("physical", "the smooth ornament of the {p}"),
    ("function", "the tool the {p} uses at work"),
    ("value", "the most precious prize of the {p}"),
    ("origin", "the relic the {p} found at the harbor"),
    ("emotion", "the keepsake that brings the {p} joy"),
)

PROMPT_PERSPECTIVES: tuple[tuple[str, str], ...] = (
    ("background", "a photo of {k} in the park"),
    ("insertion", "a photo of {k} with a small lamp"),
    ("style", "a drawing of {k} in sketch style"),
    ("attribute", "a photo of {k} made of glass"),
)


@dataclass(frozen=True)
class Entity:
    name: str  # vocabulary word, e.g. "sun-fruit"
    caption: str  # e.g. "a sun-fruit"
    combo: Combo


@dataclass(frozen=True)
class Fact:
    phrase: str  # e.g. "the color of a sun-fruit"
    answer: str


@dataclass
class WorldSpec:
    colors: tuple[str, ...] = tuple(PALETTE)
    shapes: tuple[str, ...] = tuple(SHAPES)
    textures: tuple[str, ...] = TEXTURES
    corpus_combos: list[Combo] = field(default_factory=list)
    entities: list[Entity] = field(default_factory=list)
    facts: list[Fact] = field(default_factory=list)
    anchor_pool: tuple[str, ...] = ANCHOR_POOL

    def to_json(self) -> dict:
        return {
            "colors": list(self.colors),
            "shapes": list(self.shapes),
            "textures": list(self.textures),
            "corpus_combos": [list(c) for c in self.corpus_combos],
            "entities": [
                {"name": e.name, "caption": e.caption, "combo": list(e.combo)}
                for e in self.entities
            ],
            "facts": [{"phrase": f.phrase, "answer": f.answer} for f in self.facts],
            "anchor_pool": list(self.anchor_pool),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        return cls(
            colors=tuple(obj["colors"]),
            shapes=tuple(obj["shapes"]),
            textures=tuple(obj["textures"]),
            corpus_combos=[tuple(c) for c in obj["corpus_combos"]],
            entities=[
                Entity(e["name"], e["caption"], tuple(e["combo"]))
                for e in obj["entities"]
            ],
            facts=[Fact(f["phrase"], f["answer"]) for f in obj["facts"]],
            anchor_pool=tuple(obj["anchor_pool"]),
        )


def save_world(world: WorldSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world.to_json(), indent=1, sort_keys=True))


def load_world(path: str | Path) -> WorldSpec:
    try:
        return WorldSpec.from_json(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError) as exc:
        raise InvalidInputError(f"malformed world spec: {exc}") from exc


def default_world() -> WorldSpec:
    """Every solid combo plus a deterministic half of the textured ones."""
    colors = tuple(PALETTE)
    shapes = tuple(SHAPES)
    combos: list[Combo] = []
    for si, shape in enumerate(shapes):
        for ci, color in enumerate(colors):
            combos.append((shape, color, "solid"))
            for ti, texture in enumerate(TEXTURES[1:], start=1):
                if (si + ci + ti) % 2 == 0:
                    combos.append((shape, color, texture))
    entities = [
        Entity("sun-fruit", "a sun-fruit", ("circle", "yellow", "solid")),
        Entity("moon-stone", "a moon-stone", ("square", "white", "solid")),
        Entity("ember-bug", "an ember-bug", ("cross", "orange", "solid")),
        Entity("frost-bloom", "a frost-bloom", ("bars", "cyan", "solid")),
    ]
    facts = [Fact(f"the color of {e.caption}", e.combo[1]) for e in entities]
    facts += [Fact(f"the shape of {e.caption}", e.combo[0]) for e in entities]
    facts += [
        Fact("the color of grass", "green"),
        Fact("the color of the sky", "blue"),
        Fact("the color of snow", "white"),
        Fact("the color of blood", "red"),
        Fact("the color of the sea", "blue"),
        Fact("the color of the sun", "yellow"),
        Fact("the color of fire", "orange"),
        Fact("the color of a leaf", "green"),
    ]
    return WorldSpec(
        colors=colors,
        shapes=shapes,
        textures=TEXTURES,
        corpus_combos=combos,
        entities=entities,
        facts=facts,
    )


@dataclass(frozen=True)
class CorpusItem:
    caption: str
    grid: np.ndarray
    mask: np.ndarray


def corpus_items(world: WorldSpec) -> list[CorpusItem]:
    """(caption, image) pairs for flow pretraining, entities included."""
    items = [
        CorpusItem(caption_for(c), render_glyph(*c), glyph_mask(c[0], c[2]))
        for c in world.corpus_combos
    ]
    items += [
        CorpusItem(e.caption, render_glyph(*e.combo), glyph_mask(e.combo[0], e.combo[2]))
        for e in world.entities
    ]
    return items


def corpus_qa(world: WorldSpec) -> list[tuple[str, str]]:
    """(query, answer) pairs, phrased exactly as the editor phrases them."""
    return [(to_query(f.phrase), f.answer) for f in world.facts]


def echo_qa(world: WorldSpec) -> list[tuple[str, str]]:
    """Attribute-echo questions about every corpus item.

    Answering "what is the color of a dotted red square?" forces attention
    to carry attribute words across positions, which is what makes the
    encoder's latents usable as generator conditioning.
    """
    pairs = []
    combos = list(world.corpus_combos) + [e.combo for e in world.entities]
    for item, combo in zip(corpus_items(world), combos):
        article, noun = item.caption.split(" ", 1)
        pairs.append((to_query(f"the color of {article} {noun}"), combo[1]))
        pairs.append((to_query(f"the shape of {article} {noun}"), combo[0]))
    return pairs


def lm_texts(world: WorldSpec) -> list[str]:
    """Every pretraining text sequence for the encoder."""
    texts = [item.caption for item in corpus_items(world)]
    texts += [f"{q} {a}" for q, a in corpus_qa(world)]
    texts += [f"{q} {a}" for q, a in echo_qa(world)]
    return texts


def held_out_combos(world: WorldSpec) -> list[Combo]:
    """Attribute combinations absent from pretraining (the concept pool)."""
    used = set(world.corpus_combos) | {e.combo for e in world.entities}
    out = []
    for shape in world.shapes:
        for color in world.colors:
            for texture in world.textures:
                combo = (shape, color, texture)
                if combo not in used:
                    out.append(combo)
    return out


def locality_probes(world: WorldSpec) -> list[str]:
    """20 fixed prompts unrelated to any benchmark knowledge phrase."""
    captions = [caption_for(c) for c in world.corpus_combos]
    probes = captions[:: max(1, len(captions) // 10)][:10]
    probes += [q for q, _ in corpus_qa(world)[:8]]
    probes += [e.caption for e in world.entities[:2]]
    return probes


def build_vocabulary(world: WorldSpec) -> Vocabulary:
    """Closed vocabulary covering the corpus and every template expansion."""
    words: set[str] = set()
    for text in lm_texts(world):
        words.update(text.split())
    for _, template in KNOWLEDGE_PERSPECTIVES:
        for p in PERSONAS:
            words.update(template.format(p=p).split())
            words.update(to_query(template.format(p=p)).split())
    for _, template in PROMPT_PERSPECTIVES:
        words.update(template.format(k="").split())
    words.update(CLASS_NOUNS)
    words.update(world.colors)
    words.update(world.shapes)
    return Vocabulary(sorted(words), anchor_tokens=world.anchor_pool)


def knowledge_texts_for(concept_index: int, count: int) -> list[tuple[str, str]]:
    """(perspective, text) knowledge items for one concept."""
    if count < 0 or count > len(KNOWLEDGE_PERSPECTIVES):
        raise InvalidInputError(
            f"knowledge count must be in [0, {len(KNOWLEDGE_PERSPECTIVES)}]"
        )
    persona = PERSONAS[concept_index % len(PERSONAS)]
    return [
        (name, template.format(p=persona))
        for name, template in KNOWLEDGE_PERSPECTIVES[:count]
    ]


def generation_prompts_for(knowledge: str) -> list[tuple[str, str]]:
    """(perspective, prompt) pairs embedding a knowledge phrase."""
    return [(name, template.format(k=knowledge)) for name, template in PROMPT_PERSPECTIVES]

"""Synthetic multimodal world: scenes on a patch grid, captions, QA, and
simulated vision encoders whose spatial fidelity is a knob.

Everything is a pure function of (seed, config).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Iterable

import numpy as np

from .toylm.vocab import BOS, EOS, TokenVocab

OBJECTS = ("cat", "dog", "car", "tree", "cup", "bird", "fish", "boat", "ball", "hat")
ATTRIBUTES = ("red", "blue", "big", "small")
FUNCTION_WORDS = ("empty", "and", "describe", "what", "is", "at", "present", "yes", "no", "?")
# box shapes as (rows, cols)
SHAPES = ((1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 2))


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    kind: str  # "object" | "attribute"
    localizable: bool


@dataclass
class WorldConfig:
    seed: int = 0
    grid: int = 4
    objects: tuple[str, ...] = OBJECTS
    attributes: tuple[str, ...] = ATTRIBUTES
    vocab_size: int = 64
    d_v: int = 32
    sigma: float = 0.1
    smoothed_own: float = 0.6
    global_own: float = 0.25
    attr_weight: float = 1.0
    attr_prob: float = 0.5
    max_objects: int = 4
    shift_eps: float = 0.3
    shift_noise_mult: float = 2.0

    def __post_init__(self):
        self.objects = tuple(self.objects)
        self.attributes = tuple(self.attributes)


@dataclass(frozen=True)
class ShiftConfig:
    eps: float = 0.3
    noise_mult: float = 2.0


@dataclass
class Scene:
    """One image: ``grid[p]`` is None or (object id, tuple of attribute ids)."""

    seed: int
    grid: list
    concept_set: frozenset
    boxes: dict
    caption: list
    style: str = "base"
    shift: ShiftConfig = field(default_factory=lambda: ShiftConfig(0.0, 1.0))

    @property
    def objects(self) -> list[int]:
        return sorted({cell[0] for cell in self.grid if cell is not None})

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "grid": [None if c is None else [c[0], list(c[1])] for c in self.grid],
            "boxes": {str(k): sorted(v) for k, v in sorted(self.boxes.items())},
            "caption": list(self.caption),
            "style": self.style,
            "shift": [self.shift.eps, self.shift.noise_mult],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        grid = [None if c is None else (int(c[0]), tuple(c[1])) for c in rec["grid"]]
        boxes = {int(k): frozenset(v) for k, v in rec["boxes"].items()}
        eps, mult = rec.get("shift", [0.0, 1.0])
        return cls(seed=rec["seed"], grid=grid, concept_set=frozenset(boxes),
                   boxes=boxes, caption=list(rec["caption"]), style=rec["style"],
                   shift=ShiftConfig(eps, mult))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class World:
    """Concept inventory, vocabulary, and fixed concept directions for one world seed."""

    def __init__(self, cfg: WorldConfig | None = None):
        cfg = cfg or WorldConfig()
        if not cfg.objects:
            raise WorldConfigError("world needs at least one object concept")
        if cfg.grid < 1 or cfg.max_objects < 1:
            raise WorldConfigError("grid and max_objects must be positive")
        self.cfg = cfg
        self.concepts = [Concept(i, n, "object", True) for i, n in enumerate(cfg.objects)]
        off = len(self.concepts)
        self.concepts += [Concept(off + i, n, "attribute", False)
                          for i, n in enumerate(cfg.attributes)]
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise WorldConfigError("concept names must be unique")
        rows = [f"r{i}" for i in range(cfg.grid)]
        cols = [f"c{i}" for i in range(cfg.grid)]
        self.vocab = TokenVocab.build(list(FUNCTION_WORDS) + rows + cols + names, cfg.vocab_size)
        rng = np.random.default_rng([cfg.seed, 7])
        dirs = _unit_rows(rng, len(self.concepts) + 1, cfg.d_v)
        self.directions = dirs[:-1]
        self.background = dirs[-1]
        a = rng.standard_normal((cfg.d_v, cfg.d_v))
        self._skew = (a - a.T) / np.sqrt(2 * cfg.d_v)

    # --- concept and token lookups -------------------------------------------------
    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    @property
    def object_ids(self) -> list[int]:
        return [c.id for c in self.concepts if c.kind == "object"]

    @property
    def attribute_ids(self) -> list[int]:
        return [c.id for c in self.concepts if c.kind == "attribute"]

    @property
    def n_patches(self) -> int:
        return self.cfg.grid ** 2

    def concept_token(self, cid: int) -> int:
        return self.vocab.id(self.concepts[cid].name)

    def token_concept(self, tok: int) -> int | None:
        return self._token_to_concept.get(tok)

    @cached_property
    def _token_to_concept(self) -> dict[int, int]:
        return {self.concept_token(c.id): c.id for c in self.concepts}

    def word(self, w: str) -> int:
        return self.vocab.id(w)

    def rotation(self, eps: float) -> np.ndarray:
        """Exactly orthogonal Cayley rotation of magnitude ``eps`` (identity at 0)."""
        d = self.cfg.d_v
        a = eps * self._skew
        return np.linalg.solve(np.eye(d) - a / 2, np.eye(d) + a / 2)

    def encoder(self, fidelity: str = "local", sigma: float | None = None) -> "EncoderSim":
        own = {"local": 1.0, "smoothed": self.cfg.smoothed_own,
               "global": self.cfg.global_own}
        if fidelity not in own:
            raise WorldConfigError(f"unknown encoder fidelity {fidelity!r}")
        return EncoderSim(self, fidelity, self.cfg.sigma if sigma is None else sigma,
                          own[fidelity])


# --- scenes ------------------------------------------------------------------------

def _place(rng, grid: int, occupied: set, max_tries: int = 30):
    for _ in range(max_tries):
        h, w = SHAPES[rng.integers(len(SHAPES))]
        if h > grid or w > grid:
            continue
        r = int(rng.integers(grid - h + 1))
        c = int(rng.integers(grid - w + 1))
        cells = {(r + i) * grid + (c + j) for i in range(h) for j in range(w)}
        if not cells & occupied:
            return cells
    free = [p for p in range(grid * grid) if p not in occupied]
    return {free[int(rng.integers(len(free)))]} if free else None


def render_caption(world: World, cells: dict[int, tuple[int, ...]]) -> list[int]:
    """``BOS obj [attr] and obj [attr] ... EOS`` with objects in concept-id order."""
    out = [BOS]
    for i, obj in enumerate(sorted(cells)):
        if i:
            out.append(world.word("and"))
        out.append(world.concept_token(obj))
        out.extend(world.concept_token(a) for a in cells[obj])
    out.append(EOS)
    return out


def build_scene(world: World, seed: int, placements: dict[int, tuple[Iterable[int], tuple]],
                style: str = "base") -> Scene:
    """Assemble a scene from explicit {object: (patches, attributes)} placements."""
    grid: list = [None] * world.n_patches
    boxes: dict[int, set] = {}
    for obj, (patches, attrs) in placements.items():
        attrs = tuple(sorted(attrs))
        for p in patches:
            if grid[p] is not None:
                raise WorldConfigError(f"patch {p} assigned twice")
            grid[p] = (obj, attrs)
        boxes.setdefault(obj, set()).update(patches)
        for a in attrs:
            boxes.setdefault(a, set()).update(patches)
    caption = render_caption(world, {o: tuple(sorted(a)) for o, (_, a) in placements.items()})
    return Scene(seed=seed, grid=grid, concept_set=frozenset(boxes),
                 boxes={k: frozenset(v) for k, v in boxes.items()}, caption=caption, style=style)


def gen_scene(seed: int, world: World) -> Scene:
    cfg = world.cfg
    if len(world.object_ids) == 0:
        raise WorldConfigError("world has zero object concepts")
    rng = np.random.default_rng([cfg.seed, 11, seed])
    n = int(rng.integers(1, min(cfg.max_objects, len(world.object_ids)) + 1))
    objs = sorted(int(o) for o in rng.choice(world.object_ids, size=n, replace=False))
    occupied: set = set()
    placements = {}
    for obj in objs:
        cells = _place(rng, cfg.grid, occupied)
        if cells is None:
            break
        occupied |= cells
        attrs: tuple = ()
        if world.attribute_ids and rng.random() < cfg.attr_prob:
            attrs = (int(rng.choice(world.attribute_ids)),)
        placements[obj] = (sorted(cells), attrs)
    return build_scene(world, seed, placements)


def gen_scenes(world: World, seeds: Iterable[int]) -> list[Scene]:
    return [gen_scene(s, world) for s in seeds]


def style_shift(scene: Scene, shift: ShiftConfig | None = None) -> Scene:
    return replace(scene, style="shifted", shift=shift or ShiftConfig())


# --- grammar -------------------------------------------------------------------------

def parse_caption(world: World, ids: list[int]) -> tuple[set[int], bool]:
    """Concepts named by a caption and whether it parsed cleanly under the grammar.

    Out-of-grammar tokens make the parse unclean; concept tokens are still collected.
    """
    concepts: set[int] = set()
    ok = True
    and_id = world.word("and")
    expect_obj = True
    for tok in ids:
        if tok in (BOS,):
            continue
        if tok == EOS:
            break
        cid = world.token_concept(tok)
        if cid is None:
            if tok != and_id or expect_obj:
                ok = False
            expect_obj = True
            continue
        kind = world.concepts[cid].kind
        if kind == "object":
            if not expect_obj:
                ok = False
            expect_obj = False
        elif expect_obj:
            ok = False
        concepts.add(cid)
    return concepts, ok


def caption_phrases(world: World, ids: list[int]) -> dict[int, set[int]]:
    """Object -> attributes written right after it (``obj attr* and obj attr*``)."""
    out: dict[int, set[int]] = {}
    current = None
    for tok in ids:
        if tok == EOS:
            break
        cid = world.token_concept(tok)
        if cid is None:
            current = None
        elif world.concepts[cid].kind == "object":
            current = cid
            out.setdefault(cid, set())
        elif current is not None:
            out[current].add(cid)
    return out


def scene_words(world: World, scene: Scene) -> tuple[list[int], list[int]]:
    """Text rendering of a scene's grid: one token per patch plus an attribute overlay."""
    empty = world.word("empty")
    toks, overlay = [], []
    for cell in scene.grid:
        if cell is None:
            toks.append(empty)
            overlay.append(-1)
        else:
            toks.append(world.concept_token(cell[0]))
            overlay.append(world.concept_token(cell[1][0]) if cell[1] else -1)
    return toks, overlay


# --- QA --------------------------------------------------------------------------------

def caption_prompt(world: World) -> list[int]:
    return [world.word("describe")]


def qa_what_at(world: World, scene: Scene, patch: int):
    g = world.cfg.grid
    r, c = divmod(patch, g)
    q = [world.word(w) for w in ("what", "is", "at")] + [world.word(f"r{r}"), world.word(f"c{c}"),
                                                        world.word("?")]
    cell = scene.grid[patch]
    ans = world.word("empty") if cell is None else world.concept_token(cell[0])
    return q, [ans, EOS]


def qa_present(world: World, scene: Scene, cid: int):
    q = [world.word("is"), world.concept_token(cid), world.word("present"), world.word("?")]
    return q, [world.word("yes" if cid in scene.concept_set else "no"), EOS]


def qa_attribute(world: World, scene: Scene, obj: int, attr: int):
    q = [world.word("is"), world.concept_token(obj), world.concept_token(attr), world.word("?")]
    has = any(cell is not None and cell[0] == obj and attr in cell[1] for cell in scene.grid)
    return q, [world.word("yes" if has else "no"), EOS]


def gen_qa(scene: Scene, world: World, rng: np.random.Generator | None = None):
    """Templated (question, answer) pairs with ground-truth answers; at least four per scene."""
    rng = rng or np.random.default_rng([world.cfg.seed, 13, scene.seed])
    occupied = [p for p, c in enumerate(scene.grid) if c is not None]
    present = scene.objects
    absent = [c.id for c in world.concepts if c.id not in scene.concept_set]
    pairs = [qa_what_at(world, scene, int(rng.choice(occupied))) if occupied else
             qa_what_at(world, scene, int(rng.integers(world.n_patches)))]
    pairs.append(qa_present(world, scene, int(rng.choice(present))))
    if absent:
        pairs.append(qa_present(world, scene, int(rng.choice(absent))))
    if present and world.attribute_ids:
        obj = int(rng.choice(present))
        # half the probes ask about an attribute the object carries, else "yes" is too rare to learn
        owned = sorted({a for cell in scene.grid if cell is not None and cell[0] == obj
                        for a in cell[1]})
        pool = owned if owned and rng.random() < 0.5 else world.attribute_ids
        pairs.append(qa_attribute(world, scene, obj, int(rng.choice(pool))))
    return pairs


# --- text corpus -------------------------------------------------------------------------

@dataclass
class TextSeq:
    """A token sequence with an optional per-position attribute overlay (-1 = none)."""

    tokens: list[int]
    overlay: list[int]

    def __len__(self):
        return len(self.tokens)


def gen_text_corpus(world: World, count: int, seed: int = 0) -> list[TextSeq]:
    """Grid-as-words sequences followed by a caption or a QA exchange."""
    rng = np.random.default_rng([world.cfg.seed, 17, seed])
    out = []
    for i in range(count):
        scene = gen_scene(int(rng.integers(2**31)) + 10_000_000, world)
        toks, overlay = scene_words(world, scene)
        kind = rng.random()
        if kind < 0.5:
            q, a = caption_prompt(world), scene.caption[1:]
        else:
            pairs = gen_qa(scene, world, rng)
            q, a = pairs[int(rng.integers(len(pairs)))]
        tail = list(q) + list(a)
        out.append(TextSeq(toks + tail, overlay + [-1] * len(tail)))
    return out


# --- encoders ------------------------------------------------------------------------------

@dataclass
class EncoderSim:
    world: World
    fidelity: str
    sigma: float
    own_weight: float

    @property
    def d_v(self) -> int:
        return self.world.cfg.d_v

    def patch_directions(self, scene: Scene) -> np.ndarray:
        w = self.world
        dirs = w.directions
        if scene.shift.eps:
            dirs = dirs @ w.rotation(scene.shift.eps).T
        bg = w.background if not scene.shift.eps else w.rotation(scene.shift.eps) @ w.background
        base = np.empty((w.n_patches, self.d_v))
        for p, cell in enumerate(scene.grid):
            if cell is None:
                base[p] = bg
            else:
                base[p] = dirs[cell[0]] + w.cfg.attr_weight * sum(
                    (dirs[a] for a in cell[1]), np.zeros(self.d_v))
        return base

    def mix(self, base: np.ndarray) -> np.ndarray:
        g = self.world.cfg.grid
        if self.fidelity == "local":
            return base.copy()
        if self.fidelity == "global":
            return self.own_weight * base + (1 - self.own_weight) * base.mean(axis=0)
        out = np.empty_like(base)
        for p in range(g * g):
            r, c = divmod(p, g)
            nb = [(r + dr) * g + (c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                  if 0 <= r + dr < g and 0 <= c + dc < g]
            out[p] = self.own_weight * base[p] + (1 - self.own_weight) * base[nb].mean(axis=0)
        return out


def encode_scene(enc: EncoderSim, scene: Scene, rng: np.random.Generator | None = None):
    """Visual tokens [N, D_v] for a scene. Noise is seeded from the scene unless ``rng`` is given."""
    if rng is None:
        rng = np.random.default_rng([enc.world.cfg.seed, 19, scene.seed])
    tokens = enc.mix(enc.patch_directions(scene))
    sigma = enc.sigma * scene.shift.noise_mult
    return tokens + sigma * rng.standard_normal(tokens.shape)


def encode_scenes(enc: EncoderSim, scenes: list[Scene]) -> np.ndarray:
    return np.stack([encode_scene(enc, s) for s in scenes])


# --- serialization ----------------------------------------------------------------------------

def save_scenes(path, scenes: list[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def load_scenes(path) -> list[Scene]:
    with open(path) as fh:
        return [Scene.from_record(json.loads(line)) for line in fh if line.strip()]


def world_config_dict(cfg: WorldConfig) -> dict:
    d = asdict(cfg)
    d["objects"] = list(cfg.objects)
    d["attributes"] = list(cfg.attributes)
    return d

"""Procedural scenes, masks and the instruction taxonomy.

Scenes are objects on a 4x4 placement grid of a 32x32 image. Each object has
a shape, colour and size; its functional role follows from its shape through
a fixed lexicon. Object footprints are aligned to the 4x4 patch grid the
vision backbone uses (a large object fills its 8x8 cell, a small one fills
one 4x4 quadrant of it), and the shape is drawn as a shading glyph tiled
over every patch of the footprint. Every object pixel differs from the
background, so the rendered colour blob and the ground-truth mask coincide.

For a chosen target, ``instructions_for`` writes the concept noun phrase,
four positive instructions (simple/complex x declarative/question) and four
negatives, each with structured semantics that can be checked against the
scene graph.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
LEVELS = ("concept", "simple", "complex")
FORMS = ("declarative", "question")

ROLE_OF_SHAPE = {"circle": "container", "square": "blocker", "triangle": "marker"}
ROLE_PHRASE = {
    "container": "could hold water",
    "blocker": "could block a doorway",
    "marker": "could mark a trail",
}
COLOR_PHRASE = {
    "red": "the color of a ripe tomato",
    "green": "the color of fresh grass",
    "blue": "the color of a clear sky",
    "yellow": "the color of a banana",
}
COMPLEX_SIZE = {"small": "little", "large": "big"}
HPOS_PHRASE = {"left": "on the left side of the image", "right": "on the right side of the image"}
VPOS_PHRASE = {"top": "in the top half of the image", "bottom": "in the bottom half of the image"}
REL_PHRASE = {"left_of": "left of the", "right_of": "right of the", "above": "above the", "below": "below the"}
REL_OPPOSITE = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}
TEMPLATE_WORDS = "the which is and has thing that object".split()

RGB = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
}
BACKGROUND = (0.12, 0.12, 0.12)
PATCH = 4
_DIM = 0.55


def _glyph(shape: str) -> np.ndarray:
    tile = np.ones((PATCH, PATCH), dtype=np.float32)
    if shape == "circle":
        for i, j in ((0, 0), (0, PATCH - 1), (PATCH - 1, 0), (PATCH - 1, PATCH - 1)):
            tile[i, j] = _DIM
    elif shape == "triangle":
        i, j = np.indices((PATCH, PATCH))
        tile[j > i] = _DIM
    return tile


GLYPHS = {s: _glyph(s) for s in SHAPES}


class AmbiguityError(ValueError):
    """No instruction template can single out the requested target."""


class InfeasibleSceneError(ValueError):
    pass


# -- scene graph -----------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    size: str
    cell: tuple[int, int]
    quadrant: int = 0  # which 4x4 quadrant of the cell a small object fills

    @property
    def role(self) -> str:
        return ROLE_OF_SHAPE[self.shape]

    @property
    def concept(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int = 0
    image_size: int = 32
    grid: int = 4

    def by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "grid": self.grid,
            "objects": [dict(asdict(o), cell=list(o.cell)) for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        objs = tuple(SceneObject(**dict(o, cell=tuple(o["cell"]))) for o in d["objects"])
        return cls(objs, d.get("seed", 0), d.get("image_size", 32), d.get("grid", 4))


@dataclass(frozen=True)
class SceneConfig:
    num_objects: int = 5
    ensure_duplicate_concepts: bool = False
    image_size: int = 32
    grid: int = 4


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> tuple[Scene, dict[int, np.ndarray]]:
    n = config.num_objects
    if not 2 <= n <= 8 or n > config.grid * config.grid:
        raise InfeasibleSceneError(f"num_objects={n} outside [2, 8] or larger than the grid")
    if config.image_size != config.grid * 2 * PATCH:
        raise InfeasibleSceneError("image_size must equal grid * 8 so cells align with patches")
    rng = np.random.default_rng(seed)
    cells = rng.choice(config.grid * config.grid, size=n, replace=False)
    objs = []
    for i, c in enumerate(cells):
        objs.append(SceneObject(
            id=i,
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            cell=(int(c) // config.grid, int(c) % config.grid),
            quadrant=int(rng.integers(4)),
        ))
    if config.ensure_duplicate_concepts:
        a = objs[0]
        objs[1] = SceneObject(1, a.shape, a.color, objs[1].size, objs[1].cell, objs[1].quadrant)
    scene = Scene(tuple(objs), seed, config.image_size, config.grid)
    return scene, object_masks(scene)


def footprint(scene: Scene, obj: SceneObject) -> tuple[slice, slice]:
    cell = scene.image_size // scene.grid
    r0, c0 = obj.cell[0] * cell, obj.cell[1] * cell
    if obj.size == "large":
        return slice(r0, r0 + cell), slice(c0, c0 + cell)
    half = cell // 2
    r0 += (obj.quadrant // 2) * half
    c0 += (obj.quadrant % 2) * half
    return slice(r0, r0 + half), slice(c0, c0 + half)


def object_masks(scene: Scene) -> dict[int, np.ndarray]:
    masks = {}
    for o in scene.objects:
        m = np.zeros((scene.image_size, scene.image_size), dtype=bool)
        m[footprint(scene, o)] = True
        masks[o.id] = m
    return masks


def render(scene: Scene) -> np.ndarray:
    """Rasterise ``scene`` to an HxWx3 float32 image in [0, 1]."""
    s = scene.image_size
    img = np.empty((s, s, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for o in scene.objects:
        rows, cols = footprint(scene, o)
        h, w = rows.stop - rows.start, cols.stop - cols.start
        shade = np.tile(GLYPHS[o.shape], (h // PATCH, w // PATCH))
        img[rows, cols] = shade[..., None] * np.asarray(RGB[o.color], dtype=np.float32)
    return img


# -- semantics -------------------------------------------------------------------

def _hpos(o: SceneObject, grid: int) -> str:
    return "left" if o.cell[1] < grid // 2 else "right"


def _vpos(o: SceneObject, grid: int) -> str:
    return "top" if o.cell[0] < grid // 2 else "bottom"


def _relation_holds(o: SceneObject, rel: str, ref: SceneObject) -> bool:
    (r, c), (rr, rc) = o.cell, ref.cell
    return {"left_of": c < rc, "right_of": c > rc, "above": r < rr, "below": r > rr}[rel]


def satisfies(scene: Scene, obj: SceneObject, pred: dict) -> bool:
    kind, value = pred["attr"], pred["value"]
    if kind in ("shape", "color", "size", "role"):
        return getattr(obj, kind) == value
    if kind == "hpos":
        return _hpos(obj, scene.grid) == value
    if kind == "vpos":
        return _vpos(obj, scene.grid) == value
    if kind == "rel":
        refs = [o for o in scene.objects if o.shape == pred["ref"] and o.id != obj.id]
        return len(refs) == 1 and _relation_holds(obj, value, refs[0])
    raise ValueError(f"unknown predicate {pred!r}")


def matching_objects(scene: Scene, semantics: list[dict]) -> list[int]:
    return [o.id for o in scene.objects if all(satisfies(scene, o, p) for p in semantics)]


def identifies(scene: Scene, semantics: list[dict], target_id: int) -> bool:
    return matching_objects(scene, semantics) == [target_id]


# -- instructions ------------------------------------------------------------------

@dataclass
class Instruction:
    text: str
    level: str
    form: str
    polarity: str
    target_id: int
    semantics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Instruction:
        return cls(d["text"], d["level"], d["form"], d["polarity"], int(d["target_id"]),
                   [dict(p) for p in d.get("semantics", [])])


@dataclass
class DatasetRecord:
    scene: Scene
    target_id: int
    class_label: str
    concept_np: str
    positives: list[Instruction]
    negatives: list[Instruction]
    image_path: str = ""
    mask_path: str = ""

    def instructions(self, level: str, polarity: str = "positive") -> list[Instruction]:
        pool = self.positives if polarity == "positive" else self.negatives
        return [i for i in pool if i.level == level]

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "class_label": self.class_label,
            "concept_np": self.concept_np,
            "target_id": self.target_id,
            "positives": [i.to_dict() for i in self.positives],
            "negatives": [i.to_dict() for i in self.negatives],
            "scene": self.scene.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetRecord:
        return cls(
            scene=Scene.from_dict(d["scene"]),
            target_id=int(d["target_id"]),
            class_label=d["class_label"],
            concept_np=d["concept_np"],
            positives=[Instruction.from_dict(i) for i in d["positives"]],
            negatives=[Instruction.from_dict(i) for i in d["negatives"]],
            image_path=d.get("image_path", ""),
            mask_path=d.get("mask_path", ""),
        )


def _loc_phrase(p: dict) -> str:
    if p["attr"] == "hpos":
        return HPOS_PHRASE[p["value"]]
    if p["attr"] == "vpos":
        return VPOS_PHRASE[p["value"]]
    return f"{REL_PHRASE[p['value']]} {p['ref']}"


def instruction_text(semantics: list[dict], level: str, form: str) -> str:
    """Render predicate semantics with the closed template grammar."""
    get = {p["attr"]: p for p in semantics}
    locs = [_loc_phrase(p) for p in semantics if p["attr"] in ("hpos", "vpos", "rel")]
    if level == "concept":
        return f"{get['color']['value']} {get['shape']['value']}"
    if level == "simple":
        np_ = f"{get['color']['value']} {get['shape']['value']}"
        size = get.get("size", {}).get("value")
        if form == "declarative":
            head = f"the {size} {np_}" if size else f"the {np_}"
            return " ".join([head, " and ".join(locs)]).strip()
        clauses = ([size] if size else []) + locs
        return f"which {np_} is {' and '.join(clauses)}?"
    if level == "complex":
        role = ROLE_PHRASE[get["role"]["value"]]
        size = get.get("size", {}).get("value")
        color = get.get("color", {}).get("value")
        if form == "declarative":
            head = f"the {COMPLEX_SIZE[size]} thing" if size else "the thing"
            parts = [head] + locs + [f"that {role}"]
            if color:
                parts.append(f"and has {COLOR_PHRASE[color]}")
            return " ".join(parts)
        clauses = [role]
        if size:
            clauses.append(f"is {COMPLEX_SIZE[size]}")
        if color:
            clauses.append(f"has {COLOR_PHRASE[color]}")
        clauses += [f"is {loc}" for loc in locs]
        return f"which thing {' and '.join(clauses)}?"
    raise ValueError(f"unknown level {level!r}")


def grammar_words() -> list[str]:
    """Every word the template grammar can emit, sorted."""
    phrases = [*SHAPES, *COLORS, *SIZES, *TEMPLATE_WORDS, *ROLE_PHRASE.values(),
               *COLOR_PHRASE.values(), *COMPLEX_SIZE.values(), *HPOS_PHRASE.values(),
               *VPOS_PHRASE.values(), *REL_PHRASE.values()]
    return sorted({w for p in phrases for w in p.split()})


def _location_predicates(scene: Scene, target: SceneObject, with_relations: bool) -> list[dict]:
    preds = [{"attr": "hpos", "value": _hpos(target, scene.grid)},
             {"attr": "vpos", "value": _vpos(target, scene.grid)}]
    if with_relations:
        for shape in SHAPES:
            refs = [o for o in scene.objects if o.shape == shape]
            if shape == target.shape or len(refs) != 1:
                continue
            for rel in ("left_of", "right_of", "above", "below"):
                if _relation_holds(target, rel, refs[0]):
                    preds.append({"attr": "rel", "value": rel, "ref": shape})
    return preds


def _choose_semantics(scene, target, base, extras, min_extra, max_extra, rng) -> list[dict]:
    for k in range(min_extra, max_extra + 1):
        found = [list(c) for c in itertools.combinations(extras, k)
                 if identifies(scene, base + list(c), target.id)
                 and sum(p["attr"] == "rel" for p in c) <= 1]
        if found:
            pick = found[int(rng.integers(len(found)))]
            order = {"shape": 0, "color": 1, "role": 2, "size": 3, "hpos": 4, "vpos": 5, "rel": 6}
            return sorted(base + pick, key=lambda p: order[p["attr"]])
    raise AmbiguityError(f"object {target.id} cannot be singled out")


def flip_predicate(pred: dict, rng) -> dict:
    """Copy of ``pred`` with its value changed to one the original excludes."""
    kind, value = pred["attr"], pred["value"]
    if kind == "size":
        return dict(pred, value="large" if value == "small" else "small")
    if kind == "hpos":
        return dict(pred, value="right" if value == "left" else "left")
    if kind == "vpos":
        return dict(pred, value="bottom" if value == "top" else "top")
    if kind == "rel":
        return dict(pred, value=REL_OPPOSITE[value])
    pool = {"color": COLORS, "shape": SHAPES, "role": tuple(ROLE_PHRASE)}[kind]
    others = [v for v in pool if v != value]
    return dict(pred, value=others[int(rng.integers(len(others)))])


def negate(instr: Instruction, rng) -> Instruction:
    """Contradict one predicate of ``instr`` and re-render it."""
    sem = [dict(p) for p in instr.semantics]
    i = int(rng.integers(len(sem)))
    sem[i] = flip_predicate(sem[i], rng)
    polarity = "negative" if instr.polarity == "positive" else "positive"
    return Instruction(instruction_text(sem, instr.level, instr.form), instr.level, instr.form,
                       polarity, instr.target_id, sem)


def instructions_for(scene: Scene, target_id: int, seed: int) -> DatasetRecord:
    """Concept NP plus 4 positive and 4 negative instructions for one target."""
    target = scene.by_id(target_id)
    rng = np.random.default_rng(seed)
    positives = []
    for level in ("simple", "complex"):
        if level == "simple":
            base = [{"attr": "shape", "value": target.shape}, {"attr": "color", "value": target.color}]
            extras = [{"attr": "size", "value": target.size}] + _location_predicates(scene, target, True)
            lo, hi = 1, 2
        else:
            base = [{"attr": "role", "value": target.role}]
            extras = [{"attr": "color", "value": target.color}, {"attr": "size", "value": target.size}]
            extras += _location_predicates(scene, target, False)
            lo, hi = 0, 3
        for form in FORMS:
            sem = _choose_semantics(scene, target, base, extras, lo, hi, rng)
            positives.append(Instruction(instruction_text(sem, level, form), level, form,
                                         "positive", target_id, sem))
    negatives = [negate(p, rng) for p in positives]
    return DatasetRecord(scene, target_id, target.shape, target.concept, positives, negatives)


def concept_instruction(record: DatasetRecord) -> Instruction:
    t = record.scene.by_id(record.target_id)
    sem = [{"attr": "shape", "value": t.shape}, {"attr": "color", "value": t.color}]
    return Instruction(record.concept_np, "concept", "declarative", "positive", t.id, sem)


def make_record(seed: int, config: SceneConfig = SceneConfig(), max_attempts: int = 100) -> DatasetRecord:
    """Sample scenes from ``seed`` until one yields an unambiguous target."""
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        scene_seed = int(rng.integers(2**31))
        scene, _ = generate_scene(scene_seed, config)
        if config.ensure_duplicate_concepts:
            candidates = [0, 1]
        else:
            candidates = [o.id for o in scene.objects]
        target = candidates[int(rng.integers(len(candidates)))]
        try:
            return instructions_for(scene, target, int(rng.integers(2**31)))
        except AmbiguityError:
            continue
    raise AmbiguityError(f"no unambiguous scene after {max_attempts} attempts (seed {seed})")


# -- NP-collapse baseline ----------------------------------------------------------

_ATTRIBUTE_WORDS = set(SIZES) | set(COLORS)


def np_extract_baseline(instr: Instruction) -> str:
    """Collapse an instruction into a bare noun phrase (agent-pipeline stand-in).

    Simple instructions keep the first shape noun and the attribute adjectives
    directly before it; complex ones name no shape and collapse to "object".
    """
    if instr.level == "concept":
        return instr.text
    words = instr.text.rstrip("?").split()
    for i, w in enumerate(words):
        if w in SHAPES:
            j = i
            while j > 0 and words[j - 1] in _ATTRIBUTE_WORDS:
                j -= 1
            return " ".join(words[j:i + 1])
    return "object"

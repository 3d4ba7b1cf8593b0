"""Procedural scenes of colored shapes with exact per-object masks.

Scenes are symbolic (``SceneSpec``); ``render`` rasterizes them, and edits
are applied to the symbolic form and re-rendered, so every edit has exact
ground truth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "star")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 230),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
    "cyan": (40, 205, 215),
    "white": (245, 245, 245),
}
COLOR_NAMES = tuple(COLORS)
# BACKGROUND categories; kept darker than every object color
BACKGROUNDS = {
    "charcoal": (30, 30, 32),
    "slate": (70, 78, 90),
    "navy": (18, 24, 64),
    "brown": (72, 52, 36),
}
BACKGROUND_NAMES = tuple(BACKGROUNDS)
REGION_NAMES = (
    ("upper left", "upper middle", "upper right"),
    ("middle left", "center", "middle right"),
    ("lower left", "lower middle", "lower right"),
)
EDIT_KINDS = ("MODIFY", "SWAP", "DELETE", "ADD")


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    cx: float
    cy: float
    size: float
    z: int


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    background: int
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids {ids}")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ValueError(f"object {o.id}: unknown shape/color {o.shape}/{o.color}")
            if not (0 <= o.cx < self.width and 0 <= o.cy < self.height):
                raise ValueError(f"object {o.id}: center ({o.cx}, {o.cy}) outside canvas")
            if o.size <= 0:
                raise ValueError(f"object {o.id}: size must be > 0")

    def get(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(f"no object with id {obj_id}")

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "background": self.background,
                "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["width"], d["height"], d["background"],
                   tuple(SceneObject(**o) for o in d["objects"]))


@dataclass(frozen=True)
class ObjectMask:
    object_id: int
    grid: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class Raster:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"raster pixels {self.pixels.shape}/{self.pixels.dtype} do not match "
                             f"{self.height}x{self.width}x3 uint8")


@dataclass(frozen=True)
class EditOp:
    kind: str
    target_id: int | None = None
    pair_ids: tuple[int, int] | None = None
    new_object: SceneObject | None = None
    changes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target_id": self.target_id,
                "pair_ids": list(self.pair_ids) if self.pair_ids else None,
                "new_object": asdict(self.new_object) if self.new_object else None,
                "changes": dict(sorted(self.changes.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "EditOp":
        return cls(d["kind"], d.get("target_id"),
                   tuple(d["pair_ids"]) if d.get("pair_ids") else None,
                   SceneObject(**d["new_object"]) if d.get("new_object") else None,
                   dict(d.get("changes") or {}))


@dataclass(frozen=True)
class SceneConfig:
    n_objects_range: tuple[int, int] = (2, 4)
    canvas: tuple[int, int] = (64, 64)  # (width, height)
    size_range: tuple[int, int] = (6, 16)
    margin: int = 2
    max_attempts: int = 500


# ---------------------------------------------------------------------------
# rasterization


def _star_polygon(cx, cy, r_out, r_in, points=5):
    ang = -np.pi / 2 + np.arange(2 * points) * np.pi / points
    rad = np.where(np.arange(2 * points) % 2 == 0, r_out, r_in)
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)


def _inside_polygon(px, py, poly):
    # even-odd rule over pixel centers
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def shape_coverage(obj: SceneObject, width: int, height: int) -> np.ndarray:
    """Boolean (H, W) map of pixels whose centers fall inside ``obj``."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    h = obj.size / 2.0
    if obj.shape == "circle":
        return (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= h * h
    if obj.shape == "square":
        return (np.abs(px - obj.cx) <= h) & (np.abs(py - obj.cy) <= h)
    if obj.shape == "triangle":
        poly = np.array([[obj.cx, obj.cy - h], [obj.cx + h, obj.cy + h], [obj.cx - h, obj.cy + h]])
        return _inside_polygon(px, py, poly)
    if obj.shape == "star":
        return _inside_polygon(px, py, _star_polygon(obj.cx, obj.cy, h, 0.45 * h))
    raise ValueError(f"unknown shape {obj.shape!r}")


def ownership(scene: SceneSpec) -> np.ndarray:
    """(H, W) int map: id of the topmost object at each pixel, -1 for background."""
    owner = np.full((scene.height, scene.width), -1, dtype=np.int64)
    for o in sorted(scene.objects, key=lambda o: (o.z, o.id)):
        owner[shape_coverage(o, scene.width, scene.height)] = o.id
    return owner


def render(scene: SceneSpec) -> tuple[Raster, list[ObjectMask]]:
    owner = ownership(scene)
    bg = BACKGROUNDS[BACKGROUND_NAMES[scene.background]]
    pix = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    pix[:] = bg
    masks = []
    for o in sorted(scene.objects, key=lambda o: o.id):
        grid = owner == o.id
        pix[grid] = COLORS[o.color]
        masks.append(ObjectMask(o.id, grid))
    return Raster(scene.width, scene.height, pix), masks


# ---------------------------------------------------------------------------
# generation


def bbox(cx, cy, size):
    h = size / 2.0
    return cx - h, cy - h, cx + h, cy + h


def bbox_clear(box, boxes, margin):
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in boxes:
        if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
            return False
    return True


def gen_scene(seed: int, config: SceneConfig = SceneConfig()) -> SceneSpec:
    """Random non-overlapping scene; identical for identical (seed, config)."""
    lo, hi = config.n_objects_range
    if lo < 1 or hi < lo:
        raise ValueError(f"n_objects_range {config.n_objects_range} invalid (need 1 <= lo <= hi)")
    width, height = config.canvas
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    background = int(rng.integers(len(BACKGROUNDS)))
    combos = [(c, s) for c in COLOR_NAMES for s in SHAPES]
    picks = rng.permutation(len(combos))[:n]
    objects, boxes = [], []
    for i in range(n):
        color, shape = combos[picks[i]]
        for _ in range(config.max_attempts):
            size = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            h = size / 2.0
            if width < size + 2 or height < size + 2:
                break
            cx = float(rng.integers(int(np.ceil(h)) + 1, int(width - h)))
            cy = float(rng.integers(int(np.ceil(h)) + 1, int(height - h)))
            box = bbox(cx, cy, size)
            if bbox_clear(box, boxes, config.margin):
                boxes.append(box)
                objects.append(SceneObject(i, shape, color, cx, cy, float(size), 0))
                break
        else:
            raise ValueError(f"canvas {width}x{height} too small to place {n} objects without occlusion")
        if len(objects) != i + 1:
            raise ValueError(f"canvas {width}x{height} too small for object size {config.size_range}")
    # generated objects never overlap, so draw order follows reading order (left to right)
    # to keep it recoverable from pixels
    rank = sorted(range(n), key=lambda j: (objects[j].cx, objects[j].cy, j))
    objects = [replace(objects[j], z=r) for r, j in enumerate(rank)]
    objects.sort(key=lambda o: o.id)
    return SceneSpec(width, height, background, tuple(objects))


def background_area(scene: SceneSpec) -> int:
    return int((ownership(scene) == -1).sum())


# ---------------------------------------------------------------------------
# editing


def apply_edit(scene: SceneSpec, edit: EditOp) -> SceneSpec:
    objs = list(scene.objects)
    ids = [o.id for o in objs]
    if edit.kind == "DELETE":
        if edit.target_id not in ids:
            raise ValueError(f"DELETE: no object {edit.target_id}")
        objs = [o for o in objs if o.id != edit.target_id]
    elif edit.kind == "SWAP":
        if edit.pair_ids is None or len(set(edit.pair_ids)) != 2 or not set(edit.pair_ids) <= set(ids):
            raise ValueError(f"SWAP: invalid pair {edit.pair_ids}")
        a, b = scene.get(edit.pair_ids[0]), scene.get(edit.pair_ids[1])
        swapped = {a.id: replace(a, cx=b.cx, cy=b.cy), b.id: replace(b, cx=a.cx, cy=a.cy)}
        objs = [swapped.get(o.id, o) for o in objs]
    elif edit.kind == "MODIFY":
        if edit.target_id not in ids:
            raise ValueError(f"MODIFY: no object {edit.target_id}")
        bad = set(edit.changes) - {"color", "shape", "size"}
        if bad or not edit.changes:
            raise ValueError(f"MODIFY: invalid changes {edit.changes}")
        objs = [replace(o, **edit.changes) if o.id == edit.target_id else o for o in objs]
    elif edit.kind == "ADD":
        new = edit.new_object
        if new is None:
            raise ValueError("ADD: missing new_object")
        if new.id in ids:
            raise ValueError(f"ADD: id {new.id} already used")
        cover = shape_coverage(new, scene.width, scene.height)
        if not cover.any():
            raise ValueError("ADD: new object covers no pixels")
        if (ownership(scene)[cover] != -1).any():
            raise ValueError("ADD: no sufficient background region at the requested placement")
        objs.append(new)
    else:
        raise ValueError(f"unknown edit kind {edit.kind!r}")
    return SceneSpec(scene.width, scene.height, scene.background, tuple(objs))


def region_name(scene: SceneSpec, cx: float, cy: float) -> str:
    col = min(int(3 * cx / scene.width), 2)
    row = min(int(3 * cy / scene.height), 2)
    return REGION_NAMES[row][col]


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def describe_edit(edit: EditOp, before: SceneSpec) -> str:
    """Template sentence describing ``edit`` relative to the ``before`` scene."""
    if edit.kind == "DELETE":
        o = before.get(edit.target_id)
        return f"the {o.color} {o.shape} was removed"
    if edit.kind == "ADD":
        o = edit.new_object
        return f"{_article(o.color)} {o.color} {o.shape} was added in the {region_name(before, o.cx, o.cy)}"
    if edit.kind == "SWAP":
        # name the pair left to right so the sentence is recoverable from pixels
        a, b = sorted((before.get(i) for i in edit.pair_ids), key=lambda o: (o.cx, o.cy, o.id))
        return f"the {a.color} {a.shape} and the {b.color} {b.shape} swapped places"
    if edit.kind == "MODIFY":
        o = before.get(edit.target_id)
        if "color" in edit.changes:
            return f"the {o.color} {o.shape} became {edit.changes['color']}"
        if "shape" in edit.changes:
            return f"the {o.color} {o.shape} became {_article(edit.changes['shape'])} {edit.changes['shape']}"
        grew = edit.changes["size"] > o.size
        return f"the {o.color} {o.shape} became {'larger' if grew else 'smaller'}"
    raise ValueError(f"unknown edit kind {edit.kind!r}")


def caption(scene: SceneSpec) -> str:
    if not scene.objects:
        return "an empty scene"
    parts = [f"{_article(o.color)} {o.color} {o.shape}"
             for o in sorted(scene.objects, key=lambda o: (o.z, o.id))]
    return "a scene with " + " and ".join(parts)


def template_vocabulary() -> list[str]:
    """Every word the scene templates can emit."""
    words = {"the", "a", "an", "was", "removed", "added", "in", "and", "swapped", "places",
             "became", "larger", "smaller", "scene", "with", "empty"}
    words.update(COLOR_NAMES)
    words.update(SHAPES)
    for row in REGION_NAMES:
        for name in row:
            words.update(name.split())
    return sorted(words)


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, raster: Raster) -> None:
    header = f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.pixels.tobytes())


def read_ppm(path) -> Raster:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()
    return Raster(w, h, pix)


def write_scene_json(path, scene: SceneSpec) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), sort_keys=True) + "\n")


def read_scene_json(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))

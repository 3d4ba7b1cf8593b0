from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from vpgkit import scenegen as sg
from vpgkit.trainpipe import propose_edit
from vpgkit.vocab import default_vocab


def scene_n(n, seed=7):
    return sg.gen_scene(seed, sg.SceneConfig(n_objects_range=(n, n)))


def test_gen_scene_count_and_ids():
    s = scene_n(3)
    assert len(s.objects) == 3 and {o.id for o in s.objects} == {0, 1, 2}


def test_gen_scene_deterministic():
    assert sg.gen_scene(7) == sg.gen_scene(7)
    assert sg.gen_scene(7) != sg.gen_scene(8)


def test_gen_scene_background_area_positive():
    assert all(sg.background_area(sg.gen_scene(s)) > 0 for s in range(1000))


def test_gen_scene_canvas_too_small():
    with pytest.raises(ValueError, match="too small"):
        sg.gen_scene(0, sg.SceneConfig(n_objects_range=(6, 6), canvas=(16, 16), size_range=(8, 8)))


def test_gen_scene_z_follows_reading_order():
    for seed in range(50):
        objs = sorted(sg.gen_scene(seed).objects, key=lambda o: o.z)
        assert [o.cx for o in objs] == sorted(o.cx for o in objs)


def test_render_empty_scene():
    raster, masks = sg.render(sg.SceneSpec(16, 16, 1))
    assert masks == []
    assert np.all(raster.pixels == sg.BACKGROUNDS[sg.BACKGROUND_NAMES[1]])


def test_render_disk_area():
    r = 10
    s = sg.SceneSpec(64, 64, 0, (sg.SceneObject(0, "circle", "red", 32.0, 32.0, 2.0 * r, 0),))
    _, masks = sg.render(s)
    assert abs(masks[0].grid.sum() - math.pi * r * r) <= 0.05 * math.pi * r * r


def test_render_overlap_topmost_wins():
    a = sg.SceneObject(0, "square", "red", 20.0, 20.0, 16.0, 0)
    b = sg.SceneObject(1, "circle", "blue", 26.0, 26.0, 16.0, 1)
    raster, masks = sg.render(sg.SceneSpec(48, 48, 0, (a, b)))
    assert not np.any(masks[0].grid & masks[1].grid)
    both = sg.shape_coverage(a, 48, 48) & sg.shape_coverage(b, 48, 48)
    assert both.any() and np.all(masks[1].grid[both])
    assert np.all(raster.pixels[masks[1].grid] == sg.COLORS["blue"])


def test_scene_validation():
    with pytest.raises(ValueError):
        sg.SceneSpec(10, 10, 0, (sg.SceneObject(0, "circle", "red", 12.0, 5.0, 3.0, 0),))
    with pytest.raises(ValueError):
        sg.SceneSpec(10, 10, 0, (sg.SceneObject(0, "blob", "red", 5.0, 5.0, 3.0, 0),))


# --- edits -----------------------------------------------------------------


def test_delete():
    s = scene_n(3)
    out = sg.apply_edit(s, sg.EditOp("DELETE", target_id=1))
    assert [o.id for o in out.objects] == [0, 2]


def test_swap_involution():
    s = scene_n(3)
    e = sg.EditOp("SWAP", pair_ids=(0, 1))
    once = sg.apply_edit(s, e)
    assert (once.get(0).cx, once.get(0).cy) == (s.get(1).cx, s.get(1).cy)
    assert sg.apply_edit(once, e) == s


def test_modify_pixel_diff_inside_masks():
    s = scene_n(3)
    t = s.objects[0]
    new_color = next(c for c in sg.COLOR_NAMES if c != t.color)
    after = sg.apply_edit(s, sg.EditOp("MODIFY", target_id=t.id, changes={"color": new_color}))
    r0, m0 = sg.render(s)
    r1, m1 = sg.render(after)
    diff = np.any(r0.pixels != r1.pixels, axis=2)
    allowed = m0[0].grid | m1[0].grid
    assert diff.any() and not np.any(diff & ~allowed)


def test_add_rejects_overlap():
    s = scene_n(2)
    o = s.objects[0]
    clash = sg.SceneObject(99, "circle", "red", o.cx, o.cy, 6.0, 9)
    with pytest.raises(ValueError, match="background"):
        sg.apply_edit(s, sg.EditOp("ADD", new_object=clash))


def _check_postconditions(s, e, after):
    others = lambda sc, ids: {o.id: o for o in sc.objects if o.id not in ids}
    if e.kind == "DELETE":
        assert len(after.objects) == len(s.objects) - 1
        assert others(after, set()) == others(s, {e.target_id})
    elif e.kind == "ADD":
        assert len(after.objects) == len(s.objects) + 1
        cover = sg.shape_coverage(e.new_object, s.width, s.height)
        assert np.all(sg.ownership(s)[cover] == -1)
        assert others(after, {e.new_object.id}) == others(s, set())
    elif e.kind == "SWAP":
        a, b = e.pair_ids
        key = lambda o: (o.shape, o.color, o.size, o.z)
        assert sorted(map(key, after.objects)) == sorted(map(key, s.objects))
        assert (after.get(a).cx, after.get(a).cy) == (s.get(b).cx, s.get(b).cy)
        assert (after.get(b).cx, after.get(b).cy) == (s.get(a).cx, s.get(a).cy)
        assert others(after, {a, b}) == others(s, {a, b})
    else:
        before, now = s.get(e.target_id), after.get(e.target_id)
        changed = [f for f in ("shape", "color", "size", "cx", "cy", "z") if getattr(before, f) != getattr(now, f)]
        assert changed == list(e.changes)
        assert others(after, {e.target_id}) == others(s, {e.target_id})


def test_edit_postconditions_1000_cases():
    kinds = {k: 0 for k in sg.EDIT_KINDS}
    for seed in range(1000):
        s = sg.gen_scene(seed)
        t = s.objects[seed % len(s.objects)].id
        e = propose_edit(s, t, seed)
        _check_postconditions(s, e, sg.apply_edit(s, e))
        kinds[e.kind] += 1
    assert all(v > 150 for v in kinds.values()), kinds


# --- sentences --------------------------------------------------------------


def test_describe_templates():
    s = sg.SceneSpec(64, 64, 0, (sg.SceneObject(0, "circle", "red", 40.0, 40.0, 8.0, 0),
                                 sg.SceneObject(1, "square", "blue", 10.0, 10.0, 8.0, 1)))
    assert sg.describe_edit(sg.EditOp("DELETE", target_id=0), s) == "the red circle was removed"
    star = sg.SceneObject(2, "star", "blue", 8.0, 8.0, 8.0, 2)
    assert sg.describe_edit(sg.EditOp("ADD", new_object=star), s) == "a blue star was added in the upper left"
    # swap sentences name the pair left to right
    assert sg.describe_edit(sg.EditOp("SWAP", pair_ids=(0, 1)), s) == \
        "the blue square and the red circle swapped places"
    assert sg.describe_edit(sg.EditOp("MODIFY", target_id=0, changes={"color": "green"}), s) == \
        "the red circle became green"
    assert sg.describe_edit(sg.EditOp("MODIFY", target_id=0, changes={"shape": "triangle"}), s) == \
        "the red circle became a triangle"
    add_orange = sg.SceneObject(3, "circle", "orange", 32.0, 32.0, 6.0, 3)
    assert sg.describe_edit(sg.EditOp("ADD", new_object=add_orange), s).startswith("an orange circle")


def test_sentences_in_vocabulary():
    v = default_vocab()
    for seed in range(1000):
        s = sg.gen_scene(seed)
        e = propose_edit(s, s.objects[0].id, seed)
        assert v.covers(sg.describe_edit(e, s))
        assert v.covers(sg.caption(s))


def test_describe_injective():
    seen = {}
    s = sg.SceneSpec(64, 64, 0, tuple(
        sg.SceneObject(i, shape, color, 4.0 + 7 * (i % 8), 4.0 + 7 * (i // 8), 4.0, i)
        for i, (color, shape) in enumerate((c, sh) for c in sg.COLOR_NAMES for sh in sg.SHAPES)))
    for o in s.objects:
        sent = sg.describe_edit(sg.EditOp("DELETE", target_id=o.id), s)
        assert seen.setdefault(sent, (o.color, o.shape)) == (o.color, o.shape)
    assert len(seen) == len(s.objects)


def test_caption():
    assert sg.caption(sg.SceneSpec(8, 8, 0)) == "an empty scene"
    one = sg.SceneSpec(16, 16, 0, (sg.SceneObject(0, "star", "cyan", 8.0, 8.0, 4.0, 0),))
    assert sg.caption(one) == "a scene with a cyan star"
    for seed in range(200):
        s = sg.gen_scene(seed)
        parts = sg.caption(s)[len("a scene with "):].split(" and ")
        pairs = {tuple(p.split()[1:]) for p in parts}
        assert len(parts) == len(s.objects)
        assert pairs == {(o.color, o.shape) for o in s.objects}


# --- files ------------------------------------------------------------------


def test_ppm_and_json_roundtrip(tmp_path):
    s = sg.gen_scene(3)
    raster, _ = sg.render(s)
    sg.write_ppm(tmp_path / "a.ppm", raster)
    back = sg.read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(back.pixels, raster.pixels)
    sg.write_scene_json(tmp_path / "a.json", s)
    assert sg.read_scene_json(tmp_path / "a.json") == s
    e = sg.EditOp("ADD", new_object=replace(s.objects[0], id=9))
    assert sg.EditOp.from_dict(e.to_dict()) == e

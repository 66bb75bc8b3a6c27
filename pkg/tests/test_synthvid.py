import numpy as np
import pytest

from rfdm import synthvid as sv
from rfdm import tensorio
from rfdm.synthvid import ObjectSpec, Op, PromptSpec, SceneSpec

SMALL = sv.GeneratorConfig(H=32, W=32, T=7, radius_range=(3.0, 6.0))


def static_scene(**kw):
    obj = ObjectSpec("circle", sv.PALETTE[0], 4.0, start=(12.0, 12.0))
    base = dict(seed=0, H=32, W=32, T=5, bg_waves=(((0.05, 0.0, 0.0), 0.1, 0.05, 0.3),), objects=(obj,))
    base.update(kw)
    return SceneSpec(**base)


def test_render_deterministic():
    spec = sv.random_scene(3, SMALL)
    a, b = sv.render_scene(spec), sv.render_scene(spec)
    assert a.clip.tobytes() == b.clip.tobytes() and a.flow.tobytes() == b.flow.tobytes()
    assert sv.random_scene(3, SMALL) == spec


def test_static_scene_has_zero_flow():
    out = sv.render_scene(static_scene())
    assert not out.flow[..., :2].any()
    assert np.all(out.clip[1:] == out.clip[0])


def _centroid(mask):
    ys, xs = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
    w = mask.sum()
    return (xs * mask).sum() / w, (ys * mask).sum() / w


def test_mask_centroid_tracks_unit_motion():
    obj = ObjectSpec("circle", sv.PALETTE[1], 4.3, start=(8.2, 14.7), velocity=(1.0, 0.0))
    out = sv.render_scene(static_scene(objects=(obj,)))
    cx = [_centroid(out.masks[t, ..., 0])[0] for t in range(6)]
    assert np.allclose(np.diff(cx), 1.0, atol=1e-9)


def test_object_leaving_canvas_is_an_error():
    obj = ObjectSpec("square", sv.PALETTE[1], 4.0, start=(8.0, 8.0), velocity=(5.0, 0.0))
    with pytest.raises(sv.GenerationError):
        sv.render_scene(static_scene(objects=(obj,)))


def test_objects_stay_inside_canvas():
    for seed in range(20):
        spec = sv.random_scene(seed, SMALL)
        assert 1 <= len(spec.objects) <= 3
        for o in spec.objects:
            c = o.center(np.arange(spec.T + 1))
            assert (c - o.radius).min() >= 1 and (c[:, 0] + o.radius).max() <= spec.W - 1
            assert (c[:, 1] + o.radius).max() <= spec.H - 1


def test_remove_all_equals_background_render():
    spec = sv.random_scene(5, SMALL)
    trip = sv.apply_edit(spec, PromptSpec(Op.REMOVE, 0))
    bg = sv.render_scene(SceneSpec(**{**spec.__dict__, "objects": ()}))
    assert np.max(np.abs(trip.target - bg.clip)) == 0


def test_identity_style_is_noop():
    spec = sv.random_scene(6, SMALL)
    trip = sv.apply_edit(spec, PromptSpec(Op.GLOBAL_STYLE, 0))
    assert trip.target.tobytes() == trip.input.tobytes()


def test_grayscale_matches_scalar_luma():
    spec = sv.random_scene(7, SMALL)
    trip = sv.apply_edit(spec, PromptSpec(Op.GLOBAL_STYLE, sv.STYLE_NAMES.index("grayscale")))
    x = trip.input
    for t, i, j in [(0, 0, 0), (3, 10, 20), (7, 31, 31), (2, 17, 5)]:
        r, g, b = (float(v) for v in x[t, i, j])
        luma = 0.299 * r + 0.587 * g + 0.114 * b
        assert np.allclose(trip.target[t, i, j], [luma] * 3, atol=1e-6)


def test_local_style_only_changes_selected_objects():
    spec = sv.random_scene(11, SMALL)
    shape = spec.objects[0].shape
    sel = sv.SELECTORS.index(shape)
    trip = sv.apply_edit(spec, PromptSpec(Op.LOCAL_STYLE, sel, 2))
    cover = sum(trip.masks[..., i] for i in sv.select_objects(spec, sel))
    untouched = cover == 0
    assert np.array_equal(trip.target[untouched], trip.input[untouched])


def test_selector_without_match_is_invalid():
    obj = ObjectSpec("circle", sv.PALETTE[0], 4.0, start=(12.0, 12.0))
    spec = static_scene(objects=(obj,))
    with pytest.raises(sv.InvalidPromptError):
        sv.apply_edit(spec, PromptSpec(Op.REMOVE, sv.SELECTORS.index("square")))


def test_prompt_arity_checked():
    with pytest.raises(sv.InvalidPromptError):
        PromptSpec(Op.GLOBAL_STYLE, 1, 2)
    with pytest.raises(sv.InvalidPromptError):
        PromptSpec(Op.LOCAL_STYLE, 1, None)
    with pytest.raises(sv.InvalidPromptError):
        PromptSpec(Op.REMOVE, 99)
    assert len({sv.prompt_index(p) for p in sv.prompt_vocabulary()}) == sv.VOCAB_SIZE


def test_flow_correctness_and_temporal_redundancy():
    for seed in range(12):
        trip = sv.make_triplet(seed, 0, sv.GeneratorConfig(T=7) if seed % 3 == 0 else SMALL)
        clip = trip.target
        for t in range(clip.shape[0] - 1):
            m = trip.gt_flow[t, ..., 2] > 0
            assert m.mean() > 0.5
            warped = sv.warp_backward(clip[t], trip.gt_flow[t])
            assert np.abs(warped - clip[t + 1])[m].max() < 1e-3
        assert np.abs(np.diff(trip.input, axis=0)).mean() < 0.2


def test_scene_spec_roundtrip_through_json():
    import json
    spec = sv.random_scene(9, SMALL)
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_split_counts():
    labels = sv.assign_splits(10, (0.8, 0.15, 0.05), seed=3)
    counts = {k: labels.count(k) for k in ("train", "val", "test")}
    assert counts["train"] == 8 and 1 <= counts["val"] <= 2 and 0 <= counts["test"] <= 1
    assert labels == sv.assign_splits(10, (0.8, 0.15, 0.05), seed=3)
    with pytest.raises(ValueError):
        sv.assign_splits(10, (0.8, 0.15, 0.1), seed=3)


def test_build_dataset_deterministic_and_regenerable(tmp_path):
    cfg = sv.GeneratorConfig(H=16, W=16, T=3, radius_range=(2.0, 3.0))
    sv.build_dataset(6, tmp_path / "a", seed=4, cfg=cfg)
    sv.build_dataset(6, tmp_path / "b", seed=4, cfg=cfg)
    ma, mb = (tmp_path / "a" / "manifest.jsonl").read_bytes(), (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert ma == mb
    assert tensorio.validate_manifest(tmp_path / "a" / "manifest.jsonl", sv.check_prompt_ids) == []
    for rec in tensorio.read_manifest(tmp_path / "a" / "manifest.jsonl"):
        trip = sv.regenerate(rec)
        stored = tensorio.read_tensor(tmp_path / "a" / rec["target_path"])
        assert stored.tobytes() == trip.target.tobytes()
        assert (tmp_path / "b" / rec["input_path"]).read_bytes() == (tmp_path / "a" / rec["input_path"]).read_bytes()

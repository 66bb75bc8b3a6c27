"""Procedural paired edit videos with exact ground truth.

Scenes are a smooth sinusoidal background that pans at a constant velocity,
plus 1-3 flat-colored shapes on C1 trajectories. Frames are rendered with 2x2
supersampling so sub-pixel motion changes pixels smoothly. Every frame lies
in [0, 1] and is stored as [T+1, H, W, 3].

Flow convention: ``flow[t]`` is the backward field for the pair (t, t+1), i.e.
``frame[t+1](q) ~= frame[t](q - flow[t](q))`` wherever ``valid[t](q)`` is set.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio

SHAPES = ("circle", "square", "triangle")
SELECTORS = ("all",) + SHAPES

PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.15, 0.30, 0.90),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
)

_LUMA = (0.299, 0.587, 0.114)
STYLE_MATRICES = (
    np.eye(3),
    np.array([_LUMA, _LUMA, _LUMA]),
    np.array([[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]]) / 1.351,
    np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    np.array([[1.0, 0.0, 0.0], [0.1, 0.8, 0.0], [0.0, 0.1, 0.5]]),
    np.array([[0.5, 0.1, 0.0], [0.0, 0.8, 0.1], [0.0, 0.0, 1.0]]),
)
STYLE_NAMES = ("identity", "grayscale", "sepia", "channel_rotate", "warm", "cool")


class Op(enum.IntEnum):
    GLOBAL_STYLE = 0
    LOCAL_STYLE = 1
    REMOVE = 2


class GenerationError(RuntimeError):
    pass


class InvalidPromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    op: Op
    arg0: int
    arg1: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "op", Op(self.op))
        if self.op is Op.GLOBAL_STYLE:
            ok = 0 <= self.arg0 < len(STYLE_MATRICES) and self.arg1 is None
        elif self.op is Op.LOCAL_STYLE:
            ok = 0 <= self.arg0 < len(SELECTORS) and self.arg1 is not None and 0 <= self.arg1 < len(PALETTE)
        else:
            ok = 0 <= self.arg0 < len(SELECTORS) and self.arg1 is None
        if not ok:
            raise InvalidPromptError(f"invalid prompt ({self.op.name}, {self.arg0}, {self.arg1})")

    def to_list(self) -> list:
        return [int(self.op), int(self.arg0), None if self.arg1 is None else int(self.arg1)]

    @classmethod
    def from_list(cls, ids) -> "PromptSpec":
        if not isinstance(ids, (list, tuple)) or len(ids) != 3:
            raise InvalidPromptError(f"prompt must be [op_id, arg0, arg1], got {ids!r}")
        try:
            return cls(Op(ids[0]), int(ids[1]), None if ids[2] is None else int(ids[2]))
        except (ValueError, TypeError) as e:
            raise InvalidPromptError(str(e)) from None

    @property
    def task(self) -> str:
        return {Op.GLOBAL_STYLE: "global_style", Op.LOCAL_STYLE: "local_style", Op.REMOVE: "removal"}[self.op]


def prompt_vocabulary() -> list[PromptSpec]:
    """Every valid prompt, in a fixed order. Index == embedding row."""
    vocab = [PromptSpec(Op.GLOBAL_STYLE, i) for i in range(len(STYLE_MATRICES))]
    vocab += [PromptSpec(Op.LOCAL_STYLE, s, c) for s in range(len(SELECTORS)) for c in range(len(PALETTE))]
    vocab += [PromptSpec(Op.REMOVE, s) for s in range(len(SELECTORS))]
    return vocab


_VOCAB_INDEX = {p: i for i, p in enumerate(prompt_vocabulary())}
VOCAB_SIZE = len(_VOCAB_INDEX)


def prompt_index(prompt: PromptSpec) -> int:
    return _VOCAB_INDEX[prompt]


def check_prompt_ids(ids) -> None:
    PromptSpec.from_list(ids)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple[float, float, float]
    radius: float
    # center(t) = start + velocity * t + wobble_amp * sin(wobble_freq * t + wobble_phase)
    start: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    wobble_amp: tuple[float, float] = (0.0, 0.0)
    wobble_freq: float = 0.0
    wobble_phase: float = 0.0

    def center(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        s = np.array(self.start) + np.array(self.velocity) * t
        return s + np.array(self.wobble_amp) * np.sin(self.wobble_freq * t + self.wobble_phase)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    H: int = 64
    W: int = 64
    T: int = 15
    # background(u) = base + sum_k amp_k * sin(kx_k * ux + ky_k * uy + phase_k), amp_k is RGB
    bg_base: tuple[float, float, float] = (0.5, 0.5, 0.5)
    bg_waves: tuple = ()
    camera_pan: tuple[float, float] = (0.0, 0.0)
    objects: tuple[ObjectSpec, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["bg_base"] = tuple(d["bg_base"])
        d["bg_waves"] = tuple(
            (tuple(w[0]), float(w[1]), float(w[2]), float(w[3])) for w in d["bg_waves"]
        )
        d["camera_pan"] = tuple(d["camera_pan"])
        objs = []
        for o in d["objects"]:
            o = dict(o)
            for k in ("color", "start", "velocity", "wobble_amp"):
                o[k] = tuple(o[k])
            objs.append(ObjectSpec(**o))
        d["objects"] = tuple(objs)
        return cls(**d)


@dataclass
class RenderOutput:
    clip: np.ndarray  # [T+1, H, W, 3]
    flow: np.ndarray  # [T, H, W, 3]: (dx, dy, valid)
    masks: np.ndarray  # [T+1, H, W, n_objects], visible coverage in [0, 1]


@dataclass
class EditTriplet:
    input: np.ndarray
    target: np.ndarray
    prompt: PromptSpec
    gt_flow: np.ndarray  # flow of the *target* clip, same layout as RenderOutput.flow
    masks: np.ndarray
    scene: SceneSpec


# --- rendering -------------------------------------------------------------

_SS = 2  # supersampling factor per axis


def _subsample_grid(H, W):
    off = (np.arange(_SS) + 0.5) / _SS
    ys = (np.arange(H)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + off[None, :]).reshape(-1)
    return np.meshgrid(xs, ys)  # each [H*SS, W*SS]


def _inside(shape: str, ux, uy, cx, cy, r):
    dx, dy = ux - cx, uy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # upward-pointing isosceles triangle with apex at (cx, cy - r) and base at cy + r
        half = 0.5 * (dy + r)
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= half)
    raise GenerationError(f"unknown shape {shape!r}")


def _background(spec: SceneSpec, ux, uy):
    img = np.empty(ux.shape + (3,))
    img[:] = spec.bg_base
    for amp, kx, ky, ph in spec.bg_waves:
        img += np.asarray(amp) * np.sin(kx * ux + ky * uy + ph)[..., None]
    return img


def _check_inside_canvas(spec: SceneSpec):
    t = np.arange(spec.T + 1)
    for i, obj in enumerate(spec.objects):
        c = obj.center(t)
        lo, hi = c - obj.radius, c + obj.radius
        if lo.min() < 1.0 or hi[:, 0].max() > spec.W - 1 or hi[:, 1].max() > spec.H - 1:
            raise GenerationError(f"object {i} leaves the canvas")


def _render_frame(spec: SceneSpec, t: int, objects, ux, uy):
    """Return (supersampled rgb, supersampled labels); label 0 = background, k = objects[k-1]."""
    pan = np.asarray(spec.camera_pan) * t
    rgb = _background(spec, ux - pan[0], uy - pan[1])
    labels = np.zeros(ux.shape, dtype=np.int32)
    for k, obj in enumerate(objects, start=1):
        cx, cy = obj.center(t)
        m = _inside(obj.shape, ux, uy, cx, cy, obj.radius)
        rgb[m] = obj.color
        labels[m] = k
    return rgb, labels


def _downsample(a, H, W):
    return a.reshape(H, _SS, W, _SS, *a.shape[2:]).mean(axis=(1, 3))


def _pure_labels(labels, H, W):
    blk = labels.reshape(H, _SS, W, _SS).transpose(0, 2, 1, 3).reshape(H, W, -1)
    pure = np.all(blk == blk[..., :1], axis=-1)
    return np.where(pure, blk[..., 0], -1)


def _flow_pair(spec: SceneSpec, objects, t, lab_t, lab_t1):
    """Backward flow and validity for frames (t, t+1) from pure-label maps."""
    H, W = spec.H, spec.W
    flow = np.zeros((H, W, 3))
    flow[..., 0], flow[..., 1] = spec.camera_pan
    for k, obj in enumerate(objects, start=1):
        d = obj.center(t + 1) - obj.center(t)
        sel = lab_t1 == k
        flow[sel, 0], flow[sel, 1] = d
    qy, qx = np.mgrid[0:H, 0:W].astype(np.float64)
    # source position in index coordinates
    sx, sy = qx - flow[..., 0], qy - flow[..., 1]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    inb = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < W) & (y0 + 1 < H)
    valid = inb & (lab_t1 >= 0)
    x0c, y0c = np.clip(x0, 0, W - 2), np.clip(y0, 0, H - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            valid &= lab_t[y0c + dy, x0c + dx] == lab_t1
    flow[..., 2] = valid
    return flow


def render_scene(spec: SceneSpec, hide: frozenset = frozenset(), recolor: dict | None = None) -> RenderOutput:
    """Render a scene. ``hide`` drops object indices; ``recolor`` maps index -> RGB."""
    _check_inside_canvas(spec)
    recolor = recolor or {}
    objects = []
    for i, obj in enumerate(spec.objects):
        if i in hide:
            continue
        if i in recolor:
            obj = ObjectSpec(**{**asdict(obj), "color": tuple(recolor[i])})
        objects.append(obj)
    kept = [i for i in range(len(spec.objects)) if i not in hide]
    H, W = spec.H, spec.W
    ux, uy = _subsample_grid(H, W)
    clip = np.empty((spec.T + 1, H, W, 3))
    masks = np.zeros((spec.T + 1, H, W, len(spec.objects)))
    flow = np.zeros((spec.T, H, W, 3))
    prev_pure = None
    for t in range(spec.T + 1):
        rgb, labels = _render_frame(spec, t, objects, ux, uy)
        clip[t] = _downsample(rgb, H, W)
        for k, i in enumerate(kept, start=1):
            masks[t, ..., i] = _downsample((labels == k).astype(np.float64), H, W)
        pure = _pure_labels(labels, H, W)
        if t > 0:
            flow[t - 1] = _flow_pair(spec, objects, t - 1, prev_pure, pure)
        prev_pure = pure
    return RenderOutput(clip.astype(np.float32), flow.astype(np.float32), masks.astype(np.float32))


def apply_color_matrix(clip, matrix) -> np.ndarray:
    out = np.einsum("...c,dc->...d", np.asarray(clip, dtype=np.float64), np.asarray(matrix))
    return out.astype(np.float32)


def select_objects(spec: SceneSpec, selector: int) -> list[int]:
    name = SELECTORS[selector]
    return [i for i, o in enumerate(spec.objects) if name == "all" or o.shape == name]


def apply_edit(spec: SceneSpec, prompt: PromptSpec) -> EditTriplet:
    src = render_scene(spec)
    if prompt.op is Op.GLOBAL_STYLE:
        target = apply_color_matrix(src.clip, STYLE_MATRICES[prompt.arg0])
        return EditTriplet(src.clip, target, prompt, src.flow, src.masks, spec)
    chosen = select_objects(spec, prompt.arg0)
    if not chosen:
        raise InvalidPromptError(f"selector {SELECTORS[prompt.arg0]!r} matches no object")
    if prompt.op is Op.LOCAL_STYLE:
        out = render_scene(spec, recolor={i: PALETTE[prompt.arg1] for i in chosen})
    else:
        out = render_scene(spec, hide=frozenset(chosen))
    return EditTriplet(src.clip, out.clip, prompt, out.flow, src.masks, spec)


# --- random scenes ---------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    H: int = 64
    W: int = 64
    T: int = 15
    max_objects: int = 3
    radius_range: tuple[float, float] = (5.0, 10.0)
    max_speed: float = 1.5
    wobble_max: float = 3.0
    max_pan: float = 0.5
    bg_waves: int = 2
    bg_amp: float = 0.08
    bg_min_wavelength: float = 48.0
    tasks: tuple[str, ...] = ("global_style", "local_style", "removal")
    split_ratios: tuple[float, float, float] = (0.8, 0.15, 0.05)


def random_scene(seed: int, cfg: GeneratorConfig = GeneratorConfig(), max_tries: int = 200) -> SceneSpec:
    rng = np.random.default_rng(seed)
    waves = []
    for _ in range(cfg.bg_waves):
        lam = rng.uniform(cfg.bg_min_wavelength, 2 * cfg.bg_min_wavelength)
        theta = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / lam
        waves.append((tuple(rng.uniform(-cfg.bg_amp, cfg.bg_amp, 3).tolist()),
                      float(k * np.cos(theta)), float(k * np.sin(theta)), float(rng.uniform(0, 2 * np.pi))))
    base = tuple(rng.uniform(0.3, 0.7, 3).tolist())
    pan = tuple(rng.uniform(-cfg.max_pan, cfg.max_pan, 2).tolist())
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    for _ in range(max_tries):
        objs = []
        for _ in range(n_obj):
            r = float(rng.uniform(*cfg.radius_range))
            vel = rng.uniform(-cfg.max_speed, cfg.max_speed, 2)
            amp = rng.uniform(0, cfg.wobble_max, 2)
            freq = float(rng.uniform(0.1, 0.5))
            objs.append(ObjectSpec(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=PALETTE[int(rng.integers(len(PALETTE)))],
                radius=r,
                start=tuple(rng.uniform([r + 1, r + 1], [cfg.W - r - 1, cfg.H - r - 1]).tolist()),
                velocity=tuple(vel.tolist()),
                wobble_amp=tuple(amp.tolist()),
                wobble_freq=freq,
                wobble_phase=float(rng.uniform(0, 2 * np.pi)),
            ))
        spec = SceneSpec(seed=int(seed), H=cfg.H, W=cfg.W, T=cfg.T, bg_base=base,
                         bg_waves=tuple(waves), camera_pan=pan, objects=tuple(objs))
        try:
            _check_inside_canvas(spec)
            return spec
        except GenerationError:
            continue
    raise GenerationError(f"could not place objects for seed {seed}")


def random_prompt(spec: SceneSpec, rng: np.random.Generator, tasks=("global_style", "local_style", "removal")) -> PromptSpec:
    task = tasks[int(rng.integers(len(tasks)))]
    if task == "global_style":
        # identity is excluded from sampled edits
        return PromptSpec(Op.GLOBAL_STYLE, int(rng.integers(1, len(STYLE_MATRICES))))
    present = sorted({SELECTORS.index(o.shape) for o in spec.objects})
    selector = int(rng.choice([0] + present))
    if task == "local_style":
        return PromptSpec(Op.LOCAL_STYLE, selector, int(rng.integers(len(PALETTE))))
    if task == "removal":
        return PromptSpec(Op.REMOVE, selector)
    raise ValueError(f"unknown task {task!r}")


def _clip_seed(seed: int, clip_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(clip_id)]).generate_state(1, np.uint64)[0] >> 1)


def assign_splits(n_clips: int, ratios, seed: int) -> list[str]:
    """Deterministic split label per clip id; counts follow largest-remainder rounding."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"split_ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    raw = ratios * n_clips
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n_clips - counts.sum()]:
        counts[i] += 1
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5911])).permutation(n_clips)
    names = ("train", "val", "test")
    labels = [""] * n_clips
    pos = 0
    for name, c in zip(names, counts):
        for cid in order[pos:pos + c]:
            labels[cid] = name
        pos += c
    return labels


def make_triplet(seed: int, clip_id: int, cfg: GeneratorConfig) -> EditTriplet:
    cs = _clip_seed(seed, clip_id)
    spec = random_scene(cs, cfg)
    prompt = random_prompt(spec, np.random.default_rng([cs, 1]), cfg.tasks)
    return apply_edit(spec, prompt)


def build_dataset(n_clips: int, out_dir, seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> list[dict]:
    """Write clips under ``out_dir/clips/<id>/`` plus ``out_dir/manifest.jsonl``."""
    out_dir = Path(out_dir)
    splits = assign_splits(n_clips, cfg.split_ratios, seed)
    records = []
    for cid in range(n_clips):
        trip = make_triplet(seed, cid, cfg)
        name = f"clip{cid:06d}"
        rel = Path("clips") / name
        tensorio.write_tensor(out_dir / rel / "input.vt", trip.input)
        tensorio.write_tensor(out_dir / rel / "target.vt", trip.target)
        tensorio.write_tensor(out_dir / rel / "flow.vt", trip.gt_flow)
        records.append({
            "id": name,
            "input_path": str(rel / "input.vt"),
            "target_path": str(rel / "target.vt"),
            "flow_path": str(rel / "flow.vt"),
            "prompt": trip.prompt.to_list(),
            "meta": {"split": splits[cid], "task": trip.prompt.task, "scene": trip.scene.to_dict()},
        })
    tensorio.write_manifest(out_dir / "manifest.jsonl", records)
    return records


def regenerate(record: dict) -> EditTriplet:
    """Recompute a manifest record's triplet from its stored scene and prompt."""
    return apply_edit(SceneSpec.from_dict(record["meta"]["scene"]), PromptSpec.from_list(record["prompt"]))


def warp_backward(frame, flow):
    """Bilinear backward warp: out(q) = frame(q - flow(q)). Out-of-range samples clamp to the border."""
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape[:2]
    qy, qx = np.mgrid[0:H, 0:W].astype(np.float64)
    sx = np.clip(qx - flow[..., 0], 0, W - 1)
    sy = np.clip(qy - flow[..., 1], 0, H - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, W - 2)
    y0 = np.clip(np.floor(sy).astype(int), 0, H - 2)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    top = frame[y0, x0] * (1 - fx) + frame[y0, x0 + 1] * fx
    bot = frame[y0 + 1, x0] * (1 - fx) + frame[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy

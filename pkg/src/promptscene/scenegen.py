"""Procedural generation of labeled synthetic rooms and the five task types.

A scene is a floor plane plus axis-aligned boxes and spheres with
per-instance base colors. Tasks are built from templates over the closed
vocabulary, with referent uniqueness checked at generation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import CLASS_NAMES, COLOR_NAMES, Vocabulary

SPHERE_CLASSES = {"lamp", "ball", "plant"}
OBJECT_CLASSES = [c for c in CLASS_NAMES if c != "floor"]

COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
}
FLOOR_RGB = (0.55, 0.53, 0.50)


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed without overlap within the retry budget."""


@dataclass
class SceneConfig:
    n_points_min: int = 2000
    n_points_max: int = 6000
    n_objects_min: int = 4
    n_objects_max: int = 10
    room_extent: float = 6.0
    center_margin: float = 0.6
    max_place_retries: int = 200
    floor_fraction: float = 0.35
    color_noise: float = 0.03
    position_jitter: float = 0.004
    n_cameras: int = 4
    camera_width: int = 64
    camera_height: int = 48
    camera_fov: float = 60.0
    camera_height_m: float = 2.4
    absent_prompts_per_scene: int = 2


@dataclass
class Camera:
    position: np.ndarray  # (3,)
    look_at: np.ndarray  # (3,)
    fov: float  # horizontal, degrees
    resolution: tuple  # (w, h)

    def __post_init__(self):
        w, h = self.resolution
        if w < 8 or h < 8:
            raise ValueError("camera resolution must be at least 8x8")
        if not 10.0 < self.fov < 170.0:
            raise ValueError("camera fov must be in (10, 170) degrees")


@dataclass
class Instance:
    point_indices: np.ndarray  # sorted int array
    class_id: int
    bbox_center: np.ndarray  # (3,)
    bbox_size: np.ndarray  # (3,)
    color_name: str

    @property
    def class_name(self):
        return CLASS_NAMES[self.class_id]


@dataclass
class Scene:
    scene_id: int
    points: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    instances: list
    cameras: list
    segment_ids: np.ndarray | None = None  # filled by scene encoding

    @property
    def n_points(self):
        return self.points.shape[0]

    def instance_classes(self):
        return [inst.class_id for inst in self.instances]


@dataclass
class TaskSample:
    kind: str  # segment | ground | multiground | qa | caption
    prompt_kind: str  # text | numerical | visual
    scene_id: int
    prompt_tokens: list | None = None  # token ids, without [SOS]/[EOS]
    prompt_payload: list | None = None  # 3 or 6 floats for numerical prompts
    target_ids: list = field(default_factory=list)  # instance indices in the scene
    answer_tokens: list | None = None  # token ids, without [EOS]
    text: str = ""

    def __post_init__(self):
        if self.kind == "ground" and len(self.target_ids) != 1:
            raise ValueError("ground tasks need exactly one target")
        if self.kind in ("qa", "caption") and not self.answer_tokens:
            raise ValueError(f"{self.kind} tasks need a non-empty answer")


def _sample_box_surface(rng, center, size, n):
    """Uniform points on the five visible faces of an axis-aligned box (no bottom)."""
    hx, hy, hz = size / 2.0
    faces = [
        ("z+", size[0] * size[1]),
        ("x-", size[1] * size[2]), ("x+", size[1] * size[2]),
        ("y-", size[0] * size[2]), ("y+", size[0] * size[2]),
    ]
    areas = np.array([a for _, a in faces])
    picks = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.zeros((n, 3))
    for i, (f, _) in enumerate(faces):
        m = picks == i
        if not m.any():
            continue
        if f == "z+":
            pts[m] = np.column_stack([u[m, 0] * hx, u[m, 1] * hy, np.full(m.sum(), hz)])
        elif f in ("x-", "x+"):
            s = hx if f == "x+" else -hx
            pts[m] = np.column_stack([np.full(m.sum(), s), u[m, 0] * hy, u[m, 1] * hz])
        else:
            s = hy if f == "y+" else -hy
            pts[m] = np.column_stack([u[m, 0] * hx, np.full(m.sum(), s), u[m, 1] * hz])
    return pts + center


def _sample_sphere_surface(rng, center, radius, n):
    """Uniform points on a sphere, skipping the bottom cap that rests on the floor."""
    pts = np.zeros((n, 3))
    got = 0
    while got < n:
        v = rng.normal(size=(2 * (n - got) + 8, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v = v[v[:, 2] > -0.8][: n - got]
        pts[got:got + v.shape[0]] = v
        got += v.shape[0]
    return pts * radius + center


def generate_scene(seed, cfg=None, scene_id=None):
    """Deterministically build one labeled scene from (seed, cfg)."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(np.random.PCG64(seed))
    n_obj = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    n_points = int(rng.integers(cfg.n_points_min, cfg.n_points_max + 1))
    ext = cfg.room_extent

    # ---- place objects without interpenetration
    placed = []  # (class_name, color_name, center, size_or_radius, is_sphere)
    for _ in range(n_obj):
        cls = OBJECT_CLASSES[int(rng.integers(0, len(OBJECT_CLASSES)))]
        color = COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))]
        ok = False
        for _attempt in range(cfg.max_place_retries):
            if cls in SPHERE_CLASSES:
                radius = float(rng.uniform(0.22, 0.45))
                footprint = radius
                size = radius
            else:
                size = rng.uniform([0.35, 0.35, 0.3], [0.95, 0.95, 0.9])
                footprint = float(np.hypot(size[0], size[1]) / 2.0)
            lim = ext / 2.0 - footprint - 0.1
            cx, cy = rng.uniform(-lim, lim, size=2)
            cz = size if cls in SPHERE_CLASSES else size[2] / 2.0
            center = np.array([cx, cy, float(cz)])
            clear = True
            for _, _, c2, s2, sph2 in placed:
                fp2 = s2 if sph2 else float(np.hypot(s2[0], s2[1]) / 2.0)
                d = float(np.hypot(cx - c2[0], cy - c2[1]))
                if d < max(cfg.center_margin, footprint + fp2 + 0.05):
                    clear = False
                    break
            if clear:
                placed.append((cls, color, center, size, cls in SPHERE_CLASSES))
                ok = True
                break
        if not ok:
            raise PlacementError(
                f"could not place object {len(placed)} after {cfg.max_place_retries} retries")

    # ---- allocate the point budget
    n_floor = max(1, int(round(n_points * cfg.floor_fraction)))
    areas = []
    for cls, _, _, size, sph in placed:
        if sph:
            areas.append(4.0 * np.pi * size * size)
        else:
            areas.append(2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]))
    areas = np.array(areas) if placed else np.zeros(0)
    n_rest = n_points - n_floor
    alloc = np.zeros(len(placed), dtype=int)
    if len(placed):
        if n_rest < len(placed):
            raise ValueError("point budget too small for the object count")
        raw = areas / areas.sum() * n_rest
        alloc = np.maximum(min(8, n_rest // len(placed)), np.floor(raw).astype(int))
        # trim deterministically to honor the exact budget
        while alloc.sum() > n_rest:
            j = int(np.argmax(alloc))
            alloc[j] -= 1
        alloc[int(np.argmin(alloc))] += n_rest - alloc.sum()

    # ---- sample points: floor first, then one contiguous block per object
    lim = ext / 2.0
    floor_pts = np.column_stack([
        rng.uniform(-lim, lim, n_floor),
        rng.uniform(-lim, lim, n_floor),
        np.zeros(n_floor),
    ])
    blocks = [floor_pts]
    block_colors = [np.tile(FLOOR_RGB, (n_floor, 1))]
    instances = []
    cursor = n_floor
    for (cls, color, center, size, sph), k in zip(placed, alloc):
        k = int(k)
        if sph:
            pts = _sample_sphere_surface(rng, center, size, k)
        else:
            pts = _sample_box_surface(rng, center, size, k)
        blocks.append(pts)
        block_colors.append(np.tile(COLOR_RGB[color], (k, 1)))
        idx = np.arange(cursor, cursor + k)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        instances.append(Instance(
            point_indices=idx,
            class_id=CLASS_NAMES.index(cls),
            bbox_center=(lo + hi) / 2.0,
            bbox_size=hi - lo,
            color_name=color,
        ))
        cursor += k

    points = np.vstack(blocks)
    colors = np.vstack(block_colors)
    points = points + rng.normal(scale=cfg.position_jitter, size=points.shape)
    colors = np.clip(colors + rng.normal(scale=cfg.color_noise, size=colors.shape), 0.0, 1.0)
    # jitter moves bbox corners too; recompute so containment holds exactly
    for inst in instances:
        mem = points[inst.point_indices]
        lo, hi = mem.min(axis=0), mem.max(axis=0)
        inst.bbox_center = (lo + hi) / 2.0
        inst.bbox_size = hi - lo

    look = points.mean(axis=0)
    cameras = []
    for k in range(cfg.n_cameras):
        ang = 2.0 * np.pi * (k + 0.5) / cfg.n_cameras
        pos = np.array([np.cos(ang), np.sin(ang), 0.0]) * (0.62 * ext)
        pos[2] = cfg.camera_height_m
        cameras.append(Camera(position=pos, look_at=look.copy(), fov=cfg.camera_fov,
                              resolution=(cfg.camera_width, cfg.camera_height)))

    return Scene(
        scene_id=seed if scene_id is None else scene_id,
        points=points, colors=colors, instances=instances, cameras=cameras,
    )


# ---------------------------------------------------------------------------
# task construction


def _center_dist(a, b):
    return float(np.linalg.norm(a.bbox_center - b.bbox_center))


def resolve_nearest(scene, target_class_id, anchor_class_id):
    """Brute-force referent for "the <target> nearest the <anchor>".

    Returns the target instance index, or None when the anchor is not unique,
    no target exists, or the minimum distance is tied.
    """
    anchors = [i for i, inst in enumerate(scene.instances) if inst.class_id == anchor_class_id]
    targets = [i for i, inst in enumerate(scene.instances) if inst.class_id == target_class_id]
    if len(anchors) != 1 or not targets:
        return None
    anchor = scene.instances[anchors[0]]
    dists = [(_center_dist(scene.instances[t], anchor), t) for t in targets]
    dists.sort()
    if len(dists) > 1 and dists[1][0] - dists[0][0] < 1e-9:
        return None
    return dists[0][1]


def generate_tasks(scene, seed, cfg=None, vocab=None):
    """Emit the five task types for one scene; referents are verified unique."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    cfg = cfg or SceneConfig()
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(np.random.PCG64([seed, scene.scene_id, 0x7A5C5]))
    tasks = []
    present = sorted({inst.class_id for inst in scene.instances})
    by_class = {c: [i for i, inst in enumerate(scene.instances) if inst.class_id == c]
                for c in present}

    # (a) one segmentation prompt per present class
    for c in present:
        name = CLASS_NAMES[c]
        tasks.append(TaskSample(
            kind="segment", prompt_kind="text", scene_id=scene.scene_id,
            prompt_tokens=vocab.ids([name]), target_ids=list(by_class[c]),
            text=name))

    # (b) single-object grounding with verified-unique referents
    for i, inst in enumerate(scene.instances):
        same_pair = [j for j, o in enumerate(scene.instances)
                     if o.class_id == inst.class_id and o.color_name == inst.color_name]
        if same_pair == [i]:
            words = ["the", inst.color_name, inst.class_name]
            tasks.append(TaskSample(
                kind="ground", prompt_kind="text", scene_id=scene.scene_id,
                prompt_tokens=vocab.ids(words), target_ids=[i],
                text=" ".join(words)))
    for c_tgt in present:
        if len(by_class[c_tgt]) < 2:
            continue
        for c_anchor in present:
            if c_anchor == c_tgt or len(by_class[c_anchor]) != 1:
                continue
            ref = resolve_nearest(scene, c_tgt, c_anchor)
            if ref is None:
                continue
            words = ["the", CLASS_NAMES[c_tgt], "nearest", "the", CLASS_NAMES[c_anchor]]
            tasks.append(TaskSample(
                kind="ground", prompt_kind="text", scene_id=scene.scene_id,
                prompt_tokens=vocab.ids(words), target_ids=[ref],
                text=" ".join(words)))

    # (c) multi-object grounding, including zero-target classes
    absent = [CLASS_NAMES.index(n) for n in CLASS_NAMES
              if n != "floor" and CLASS_NAMES.index(n) not in by_class]
    picked_absent = [absent[int(j)] for j in
                     rng.choice(len(absent), size=min(cfg.absent_prompts_per_scene, len(absent)),
                                replace=False)] if absent else []
    for c in list(present) + sorted(picked_absent):
        words = ["all", CLASS_NAMES[c]]
        tasks.append(TaskSample(
            kind="multiground", prompt_kind="text", scene_id=scene.scene_id,
            prompt_tokens=vocab.ids(words), target_ids=list(by_class.get(c, [])),
            text=" ".join(words)))

    # (d) count QA, with zero-count questions
    for c in list(present) + sorted(picked_absent):
        words = ["how", "many", CLASS_NAMES[c]]
        count = len(by_class.get(c, []))
        tasks.append(TaskSample(
            kind="qa", prompt_kind="text", scene_id=scene.scene_id,
            prompt_tokens=vocab.ids(words), target_ids=list(by_class.get(c, [])),
            answer_tokens=vocab.encode_number(count),
            text=" ".join(words) + f" -> {count}"))

    # (e) captioning prompted by the instance's 3D box
    for i, inst in enumerate(scene.instances):
        others = [(_center_dist(o, inst), j) for j, o in enumerate(scene.instances) if j != i]
        if others:
            others.sort()
            near_cls = scene.instances[others[0][1]].class_name
            words = ["a", inst.color_name, inst.class_name, "near", "the", near_cls]
        else:
            words = ["a", inst.color_name, inst.class_name]
        payload = [float(v) for v in np.concatenate([inst.bbox_center, inst.bbox_size])]
        tasks.append(TaskSample(
            kind="caption", prompt_kind="numerical", scene_id=scene.scene_id,
            prompt_payload=payload, target_ids=[i],
            answer_tokens=vocab.ids(words), text=" ".join(words)))

    return tasks


def generate_dataset(seed, n_scenes, cfg=None, vocab=None):
    """Scenes plus their tasks; scene k uses sub-seed derived from (seed, k)."""
    cfg = cfg or SceneConfig()
    vocab = vocab or Vocabulary()
    scenes, tasks = [], []
    for k in range(n_scenes):
        sub = int(np.random.default_rng(np.random.PCG64([seed, k])).integers(0, 2**62))
        scene = generate_scene(sub, cfg, scene_id=k)
        scenes.append(scene)
        tasks.extend(generate_tasks(scene, seed, cfg, vocab))
    return scenes, tasks

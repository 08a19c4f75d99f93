"""Procedural houses, questions, episodes, and shortest-path supervision.

Houses are rows of rectangular rooms connected by doorways. Objects are
axis-aligned textured boxes sitting on per-room colored floors; navigation
runs on a uniform grid with 90-degree turns. All generators are pure
functions of (seed, config).
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

# ---------------------------------------------------------------- vocabulary

PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.80),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.60, 0.20, 0.70),
    "cyan": (0.10, 0.75, 0.75),
}

OBJECT_LABELS = ("crate", "lamp", "plant", "vase", "stool",
                 "chair", "table", "sofa", "shelf", "barrel")

ROOM_LABELS = ("kitchen", "bedroom", "livingroom", "bathroom")

# Hue-distinct floor colors chosen OFF the object palette axes: the room
# identity must be readable from the few floor pixels at the bottom of a
# cluttered egocentric frame without contaminating object-color answers.
ROOM_FLOOR_COLOR = {
    "kitchen": (0.80, 0.52, 0.22),     # orange
    "bedroom": (0.92, 0.58, 0.68),     # pink
    "livingroom": (0.48, 0.44, 0.18),  # olive
    "bathroom": (0.88, 0.90, 0.92),    # near-white
}

WALL_COLOR = (0.70, 0.70, 0.72)

# Direction-coded wall hues. The outer walls act as a visual compass: a
# policy trained by imitation can only generalize if its heading is
# observable, and bare same-colored walls would leave it unobservable.
# Interior partition walls (the ones with doorways) keep the neutral color.
WALL_COLOR_SOUTH = (0.78, 0.70, 0.58)  # z = 0 side
WALL_COLOR_NORTH = (0.56, 0.64, 0.78)  # z = max side
WALL_COLOR_WEST = (0.60, 0.74, 0.60)   # x = 0 side
WALL_COLOR_EAST = (0.74, 0.60, 0.74)   # x = max side


def wall_color(scene, wall) -> tuple:
    """Color of a wall panel, derived from its orientation in the house.

    Deterministic in the geometry, so it needs no storage in scene files.
    """
    if abs(wall.z1 - wall.z0) < 1e-9:  # runs along x
        return WALL_COLOR_SOUTH if wall.z0 < 1e-9 else WALL_COLOR_NORTH
    xmax = max(r.rect[2] for r in scene.rooms)
    if wall.x0 < 1e-9:
        return WALL_COLOR_WEST
    if abs(wall.x0 - xmax) < 1e-9:
        return WALL_COLOR_EAST
    return WALL_COLOR

# Lower wall band height fraction and tint factor. The band repeats the
# adjacent room's floor color on the walls so the room identity stays
# visible even when the floor is out of frame (e.g. close to an object).
WALL_BAND_FRACTION = 0.45
WALL_BAND_TINT = 0.85


def wall_panels(scene, wall):
    """Colored sub-quads of a wall: list of (x0, z0, x1, z1, y0, y1, color).

    Each wall is split at room boundaries along its run, and each segment is
    split vertically into a room-colored lower band (wainscot) and a
    direction-coded upper band. Interior partition walls keep the neutral
    color on both bands. Derived from geometry only; nothing is stored.
    """
    top = wall.height
    split = WALL_BAND_FRACTION * top
    upper = wall_color(scene, wall)
    out = []

    def room_at(x, z):
        for r in scene.rooms:
            x0, z0, x1, z1 = r.rect
            if x0 - 1e-9 <= x <= x1 + 1e-9 and z0 - 1e-9 <= z <= z1 + 1e-9:
                return r
        return None

    def band_color(room):
        if room is None:
            return upper
        return tuple(WALL_BAND_TINT * c for c in room.floor_color)

    if abs(wall.z1 - wall.z0) < 1e-9:  # runs along x: segment per room
        z = wall.z0
        lo, hi = min(wall.x0, wall.x1), max(wall.x0, wall.x1)
        cuts = sorted({lo, hi} | {r.rect[0] for r in scene.rooms
                                  if lo < r.rect[0] < hi})
        inward = 1e-6 if z < 1e-9 else -1e-6
        for a, b in zip(cuts[:-1], cuts[1:]):
            room = room_at((a + b) / 2, z + inward)
            out.append((a, z, b, z, 0.0, split, band_color(room)))
            out.append((a, z, b, z, split, top, upper))
    else:  # runs along z
        x = wall.x0
        xmax = max(r.rect[2] for r in scene.rooms)
        if x < 1e-9 or abs(x - xmax) < 1e-9:  # house boundary
            inward = 1e-6 if x < 1e-9 else -1e-6
            room = room_at(x + inward, (wall.z0 + wall.z1) / 2)
            out.append((x, wall.z0, x, wall.z1, 0.0, split, band_color(room)))
            out.append((x, wall.z0, x, wall.z1, split, top, upper))
        else:  # interior partition (doorway wall): neutral, unsplit
            out.append((x, wall.z0, x, wall.z1, 0.0, top, upper))
    return out

# One accent color per object label so label identity is visually recoverable.
ACCENT_COLORS = ((0.20, 0.10, 0.05), (0.95, 0.95, 0.90), (0.05, 0.25, 0.10),
                 (0.30, 0.30, 0.35), (0.85, 0.55, 0.10), (0.95, 0.40, 0.60),
                 (0.10, 0.10, 0.45), (0.50, 0.95, 0.50), (0.60, 0.60, 0.05),
                 (0.05, 0.50, 0.55))
ACCENT_PATTERNS = ("border", "vstripes", "hstripes", "checker", "dots")
# Label-coded object heights (metres): a silhouette cue that survives low
# render resolutions better than texture detail does.
LABEL_HEIGHTS = (0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.05, 1.15, 1.25, 1.35)

# Answer vocabulary: palette colors, then room labels, then object labels.
ANSWERS = tuple(PALETTE) + ROOM_LABELS + OBJECT_LABELS
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}

TEMPLATES = ("color", "location", "composition")

_TEMPLATE_WORDS = ("what", "color", "is", "the", "room", "located", "in", "near")
VOCAB = _TEMPLATE_WORDS + OBJECT_LABELS + ROOM_LABELS
VOCAB_INDEX = {w: i for i, w in enumerate(VOCAB)}

# Discrete actions, index order fixed across the project.
ACTIONS = ("forward", "turn-left", "turn-right", "stop")
FORWARD, TURN_LEFT, TURN_RIGHT, STOP = range(4)
_ACTION_LETTER = "FLRS"

# Heading h in {0..3}: yaw = h * pi/2, forward = (sin yaw, cos yaw) in (x, z).
_HEADING_DXZ = ((0, 1), (1, 0), (0, -1), (-1, 0))


class InvalidConfigError(ValueError):
    """Raised for generation configs that cannot produce a valid scene."""


class UnreachableTargetError(RuntimeError):
    """Raised when no walkable path reaches the requested object."""


class SceneFormatError(ValueError):
    """Raised for malformed scene-set or episode-manifest files."""


# ---------------------------------------------------------------- data types

@dataclass
class TexturedMesh:
    vertices: np.ndarray      # (n, 3) float64, meters
    triangles: np.ndarray     # (m, 3) int32 vertex indices
    uvs: np.ndarray           # (n, 2) float64 in [0, 1]
    texture: np.ndarray       # (H, W, 3) float32 in [0, 1]

    def validate(self):
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if self.uvs.size and (self.uvs.min() < 0 or self.uvs.max() > 1):
            raise ValueError("uv out of [0,1]")
        if self.texture.min() < 0 or self.texture.max() > 1:
            raise ValueError("texture out of [0,1]")


@dataclass
class SceneObject:
    id: int
    label: str
    room_label: str
    mesh: TexturedMesh
    base_position: np.ndarray  # (3,) float64
    size: np.ndarray = None    # (3,) box extents, kept for footprints

    def centroid(self) -> np.ndarray:
        v = self.mesh.vertices + self.base_position
        return v.mean(axis=0)


@dataclass
class Room:
    label: str
    rect: tuple  # (x0, z0, x1, z1) floor rectangle

    @property
    def floor_color(self):
        return ROOM_FLOOR_COLOR[self.label]


@dataclass
class Wall:
    # Thin vertical panel from (x0, z0) to (x1, z1), height h above floor.
    x0: float
    z0: float
    x1: float
    z1: float
    height: float


@dataclass
class Scene:
    objects: list
    rooms: list
    walkable: np.ndarray       # (gz, gx) bool
    background_color: tuple
    walls: list = field(default_factory=list)
    cell_size: float = 0.25
    grid_origin: tuple = (0.0, 0.0)
    eye_height: float = 0.6
    fov: float = np.deg2rad(90.0)

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def cell_center(self, ix: int, iz: int):
        ox, oz = self.grid_origin
        return (ox + (ix + 0.5) * self.cell_size, oz + (iz + 0.5) * self.cell_size)

    def cell_of(self, x: float, z: float):
        ox, oz = self.grid_origin
        return (int((x - ox) / self.cell_size), int((z - oz) / self.cell_size))

    def copy_with_textures(self, textures: dict) -> "Scene":
        """Shallow scene copy where listed object ids get replacement textures."""
        objs = []
        for o in self.objects:
            if o.id in textures:
                mesh = replace(o.mesh, texture=textures[o.id])
                objs.append(replace(o, mesh=mesh))
            else:
                objs.append(o)
        return replace(self, objects=objs)


@dataclass
class CameraPose:
    position: np.ndarray  # (3,)
    yaw: float
    pitch: float
    fov: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class Question:
    template: str
    target_object_id: int
    text_tokens: tuple
    answer: int

    def text(self):
        return " ".join(VOCAB[t] for t in self.text_tokens)


@dataclass
class Episode:
    scene: Scene
    question: Question
    start_pose: CameraPose
    shortest_path: tuple  # action indices, last one STOP
    difficulty: int       # 5 / 10 / 15 bucket
    scene_index: int = -1
    alt_start_pose: CameraPose = None  # for T-mode generalization


@dataclass
class GenerationConfig:
    rooms: int = 2                 # rooms per house, in [2, 4]
    objects_per_room: int = 2      # in [2, 6]
    room_size: float = 3.0         # meters, square rooms
    cell_size: float = 0.25
    wall_height: float = 1.4
    texture_size: int = 8
    eye_height: float = 0.6
    fov_deg: float = 90.0
    stop_radius_cells: int = 1     # goal = within this many cells of footprint
    door_width: float = 0.75
    # relative draw weights for (color, location, composition) questions
    template_weights: tuple = (6.0, 6.0, 1.0)

    def validate(self):
        if not 2 <= self.rooms <= 4:
            raise InvalidConfigError(f"rooms must be in [2,4], got {self.rooms}")
        if not 2 <= self.objects_per_room <= 6:
            raise InvalidConfigError(
                f"objects_per_room must be in [2,6], got {self.objects_per_room}")
        if self.room_size <= 4 * self.cell_size:
            raise InvalidConfigError("room too small for its grid")


# ---------------------------------------------------------------- meshes

def box_mesh(size, texture) -> TexturedMesh:
    """Axis-aligned box with base at y=0; every face maps the full texture."""
    sx, sy, sz = size
    hx, hz = sx / 2, sz / 2
    faces = [
        # (corner loop, ccw seen from outside); y in [0, sy]
        [(-hx, 0, -hz), (hx, 0, -hz), (hx, sy, -hz), (-hx, sy, -hz)],   # -z
        [(hx, 0, hz), (-hx, 0, hz), (-hx, sy, hz), (hx, sy, hz)],       # +z
        [(-hx, 0, hz), (-hx, 0, -hz), (-hx, sy, -hz), (-hx, sy, hz)],   # -x
        [(hx, 0, -hz), (hx, 0, hz), (hx, sy, hz), (hx, sy, -hz)],       # +x
        [(-hx, sy, -hz), (hx, sy, -hz), (hx, sy, hz), (-hx, sy, hz)],   # top
        [(-hx, 0, hz), (hx, 0, hz), (hx, 0, -hz), (-hx, 0, -hz)],       # bottom
    ]
    uv_loop = [(0, 0), (1, 0), (1, 1), (0, 1)]
    verts, uvs, tris = [], [], []
    for fi, loop in enumerate(faces):
        base = len(verts)
        verts.extend(loop)
        uvs.extend(uv_loop)
        tris.append((base, base + 1, base + 2))
        tris.append((base, base + 2, base + 3))
    return TexturedMesh(
        vertices=np.asarray(verts, dtype=np.float64),
        triangles=np.asarray(tris, dtype=np.int32),
        uvs=np.asarray(uvs, dtype=np.float64),
        texture=np.asarray(texture, dtype=np.float32),
    )


def make_object_texture(color_name: str, label: str, size: int = 8) -> np.ndarray:
    """Flat palette fill plus a label-coded accent pattern (minority of texels)."""
    base = np.array(PALETTE[color_name], dtype=np.float32)
    li = OBJECT_LABELS.index(label)
    accent = np.array(ACCENT_COLORS[li], dtype=np.float32)
    pattern = ACCENT_PATTERNS[li % len(ACCENT_PATTERNS)]
    tex = np.tile(base, (size, size, 1))
    ii, jj = np.mgrid[0:size, 0:size]
    # Accents cover ~25% of texels: visible enough to identify the label at
    # render resolution while the palette color stays clearly dominant.
    if pattern == "border":
        mask = (ii == 0) | (ii == size - 1)
    elif pattern == "vstripes":
        mask = jj % 4 == 0
    elif pattern == "hstripes":
        mask = ii % 4 == 0
    elif pattern == "checker":
        mask = (ii % 4 < 2) & (jj % 4 < 2)
    else:  # dots
        mask = (ii % 4 == 2) & (jj % 2 == 0)
    tex[mask] = accent
    return tex


def dominant_color(texture: np.ndarray) -> str:
    """Palette color nearest to the largest share of texels."""
    flat = texture.reshape(-1, 3).astype(np.float64)
    names = list(PALETTE)
    centers = np.array([PALETTE[n] for n in names])
    nearest = np.argmin(((flat[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    counts = np.bincount(nearest, minlength=len(names))
    return names[int(np.argmax(counts))]


# ---------------------------------------------------------------- generation

def generate_house(seed: int, cfg: GenerationConfig = None) -> Scene:
    """Deterministic procedural house; raises InvalidConfigError on bad cfg."""
    cfg = cfg or GenerationConfig()
    cfg.validate()
    for attempt in range(32):
        rng = np.random.default_rng((seed, attempt))
        scene = _try_generate(rng, cfg)
        if scene is not None:
            return scene
    raise InvalidConfigError(f"could not place objects for seed {seed}")


def _try_generate(rng, cfg: GenerationConfig):
    rs = cfg.room_size
    n_rooms = cfg.rooms
    room_labels = [str(x) for x in rng.choice(ROOM_LABELS, size=n_rooms, replace=False)]
    rooms = [Room(label=room_labels[i], rect=(i * rs, 0.0, (i + 1) * rs, rs))
             for i in range(n_rooms)]

    gx = int(round(n_rooms * rs / cfg.cell_size))
    gz = int(round(rs / cfg.cell_size))
    walkable = np.ones((gz, gx), dtype=bool)

    walls = []
    h = cfg.wall_height
    total_x = n_rooms * rs
    walls.append(Wall(0, 0, total_x, 0, h))
    walls.append(Wall(0, rs, total_x, rs, h))
    walls.append(Wall(0, 0, 0, rs, h))
    walls.append(Wall(total_x, 0, total_x, rs, h))
    door_half = cfg.door_width / 2
    for i in range(1, n_rooms):
        x = i * rs
        dz = float(rng.uniform(rs * 0.3, rs * 0.7))
        walls.append(Wall(x, 0, x, dz - door_half, h))
        walls.append(Wall(x, dz + door_half, x, rs, h))

    # Block grid cells overlapping any wall panel (walls are thin; block the
    # cells the panel's line passes through, minus the doorway gap).
    for w in walls:
        _block_wall_cells(walkable, w, cfg.cell_size)

    # Objects: unique labels scene-wide when possible, unique colors optional.
    n_objects = n_rooms * cfg.objects_per_room
    replace_labels = n_objects > len(OBJECT_LABELS)
    labels = [str(x) for x in
              rng.choice(OBJECT_LABELS, size=n_objects, replace=replace_labels)]
    replace_colors = n_objects > len(PALETTE)
    colors = [str(x) for x in
              rng.choice(list(PALETTE), size=n_objects, replace=replace_colors)]

    objects = []
    oid = 0
    for ri, room in enumerate(rooms):
        x0, z0, x1, z1 = room.rect
        for _ in range(cfg.objects_per_room):
            placed = False
            for _try in range(64):
                sx = float(rng.uniform(0.45, 0.65))
                sz = float(rng.uniform(0.45, 0.65))
                sy = LABEL_HEIGHTS[OBJECT_LABELS.index(labels[oid])]
                px = float(rng.uniform(x0 + 0.5 + sx / 2, x1 - 0.5 - sx / 2))
                pz = float(rng.uniform(z0 + 0.5 + sz / 2, z1 - 0.5 - sz / 2))
                cells = _footprint_cells(px, pz, sx, sz, cfg.cell_size,
                                         walkable.shape)
                margin = _footprint_cells(px, pz, sx + 2 * cfg.cell_size,
                                          sz + 2 * cfg.cell_size,
                                          cfg.cell_size, walkable.shape)
                if all(walkable[iz, ix] for ix, iz in margin):
                    placed = True
                    break
            if not placed:
                return None
            label = labels[oid]
            tex = make_object_texture(colors[oid], label, cfg.texture_size)
            mesh = box_mesh((sx, sy, sz), tex)
            objects.append(SceneObject(
                id=oid, label=label, room_label=room.label, mesh=mesh,
                base_position=np.array([px, 0.0, pz]),
                size=np.array([sx, sy, sz])))
            for ix, iz in cells:
                walkable[iz, ix] = False
            oid += 1

    if not _connected(walkable):
        return None
    return Scene(objects=objects, rooms=rooms, walkable=walkable,
                 background_color=(0.90, 0.93, 0.96), walls=walls,
                 cell_size=cfg.cell_size, grid_origin=(0.0, 0.0),
                 eye_height=cfg.eye_height, fov=np.deg2rad(cfg.fov_deg))


def _footprint_cells(px, pz, sx, sz, cell, shape):
    gz, gx = shape
    x0, x1 = px - sx / 2, px + sx / 2
    z0, z1 = pz - sz / 2, pz + sz / 2
    out = []
    for iz in range(max(0, int(z0 / cell)), min(gz, int(np.ceil(z1 / cell)))):
        for ix in range(max(0, int(x0 / cell)), min(gx, int(np.ceil(x1 / cell)))):
            out.append((ix, iz))
    return out


def _block_wall_cells(walkable, w: Wall, cell):
    gz, gx = walkable.shape
    eps = 1e-9
    if abs(w.z1 - w.z0) < eps:  # horizontal run along x
        iz_lo = max(0, int(w.z0 / cell - 1))
        iz_hi = min(gz - 1, int(w.z0 / cell))
        for ix in range(max(0, int(w.x0 / cell)),
                        min(gx, int(np.ceil(w.x1 / cell - eps)) + 1)):
            for iz in (iz_lo, iz_hi):
                if 0 <= iz < gz and ix < gx:
                    cx = (ix + 0.5) * cell
                    if w.x0 - cell / 2 <= cx <= w.x1 + cell / 2:
                        if abs((iz + 0.5) * cell - w.z0) < cell:
                            walkable[iz, ix] = False
    else:  # vertical run along z
        ix_lo = max(0, int(w.x0 / cell - 1))
        ix_hi = min(gx - 1, int(w.x0 / cell))
        for iz in range(max(0, int(w.z0 / cell)),
                        min(gz, int(np.ceil(w.z1 / cell - eps)) + 1)):
            for ix in (ix_lo, ix_hi):
                if 0 <= ix < gx and iz < gz:
                    cz = (iz + 0.5) * cell
                    if w.z0 - cell / 2 <= cz <= w.z1 + cell / 2:
                        if abs((ix + 0.5) * cell - w.x0) < cell:
                            walkable[iz, ix] = False


def _connected(walkable) -> bool:
    cells = np.argwhere(walkable)
    if len(cells) == 0:
        return False
    seen = np.zeros_like(walkable)
    q = deque([tuple(cells[0])])
    seen[tuple(cells[0])] = True
    while q:
        iz, ix = q.popleft()
        for dz, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nz, nx = iz + dz, ix + dx
            if (0 <= nz < walkable.shape[0] and 0 <= nx < walkable.shape[1]
                    and walkable[nz, nx] and not seen[nz, nx]):
                seen[nz, nx] = True
                q.append((nz, nx))
    return bool(seen.sum() == walkable.sum())


# ---------------------------------------------------------------- questions

def _unique_label_objects(scene: Scene):
    counts = {}
    for o in scene.objects:
        counts[o.label] = counts.get(o.label, 0) + 1
    return [o for o in scene.objects if counts[o.label] == 1]


def generate_question(scene: Scene, seed: int, template: str = None,
                      target_id: int = None,
                      template_weights=(6.0, 6.0, 1.0)) -> Question:
    """Question whose answer is consistent with scene ground truth."""
    if not scene.objects:
        raise ValueError("scene has no objects")
    rng = np.random.default_rng(seed)
    candidates = _unique_label_objects(scene) or scene.objects
    if target_id is None:
        target = candidates[int(rng.integers(len(candidates)))]
    else:
        target = scene.object_by_id(target_id)
    if template is None:
        w = np.asarray(template_weights, dtype=float)
        template = TEMPLATES[int(rng.choice(len(TEMPLATES), p=w / w.sum()))]
    return _build_question(scene, template, target)


def _build_question(scene: Scene, template: str, target: SceneObject) -> Question:
    if template == "color":
        tokens = ("what", "color", "is", "the", target.label)
        answer = dominant_color(target.mesh.texture)
    elif template == "location":
        tokens = ("what", "room", "is", "the", target.label, "located", "in")
        answer = target.room_label
    elif template == "composition":
        neighbors = [o for o in scene.objects
                     if o.id != target.id and o.room_label == target.room_label]
        if not neighbors:
            neighbors = [o for o in scene.objects if o.id != target.id]
        dists = [np.linalg.norm(o.base_position - target.base_position)
                 for o in neighbors]
        answer = neighbors[int(np.argmin(dists))].label
        tokens = ("what", "is", "near", "the", target.label, "in",
                  "the", target.room_label)
    else:
        raise ValueError(f"unknown template {template!r}")
    return Question(template=template,
                    target_object_id=target.id,
                    text_tokens=tuple(VOCAB_INDEX[t] for t in tokens),
                    answer=ANSWER_INDEX[answer])


# ---------------------------------------------------------------- navigation

def heading_of_yaw(yaw: float) -> int:
    return int(round(yaw / (np.pi / 2))) % 4


def pose_for(scene: Scene, ix: int, iz: int, heading: int) -> CameraPose:
    cx, cz = scene.cell_center(ix, iz)
    return CameraPose(position=np.array([cx, scene.eye_height, cz]),
                      yaw=heading * np.pi / 2, pitch=0.0, fov=scene.fov)


def _goal_states(scene: Scene, target: SceneObject, radius_cells: int):
    """(ix, iz, h) states adjacent to the target footprint and facing it."""
    gz, gx = scene.walkable.shape
    cells = _footprint_cells(target.base_position[0], target.base_position[2],
                             target.size[0], target.size[2],
                             scene.cell_size, (gz, gx))
    cset = set(cells)
    goals = set()
    cx, cz = target.base_position[0], target.base_position[2]
    for ix, iz in cset:
        for dz in range(-radius_cells, radius_cells + 1):
            for dx in range(-radius_cells, radius_cells + 1):
                nx, nz = ix + dx, iz + dz
                if not (0 <= nx < gx and 0 <= nz < gz):
                    continue
                if not scene.walkable[nz, nx]:
                    continue
                px, pz = scene.cell_center(nx, nz)
                ang = np.arctan2(cx - px, cz - pz)
                for h in range(4):
                    diff = (ang - h * np.pi / 2 + np.pi) % (2 * np.pi) - np.pi
                    if abs(diff) <= np.deg2rad(60):
                        goals.add((nx, nz, h))
    return goals


def shortest_path(scene: Scene, start: CameraPose, target_id: int) -> tuple:
    """Optimal action sequence over (cell, heading) states; ends with stop."""
    target = scene.object_by_id(target_id)
    ix, iz = scene.cell_of(start.position[0], start.position[2])
    h = heading_of_yaw(start.yaw)
    gz, gx = scene.walkable.shape
    if not (0 <= ix < gx and 0 <= iz < gz) or not scene.walkable[iz, ix]:
        raise UnreachableTargetError("start cell is not walkable")
    goals = _goal_states(scene, target, radius_cells=1)
    if not goals:
        raise UnreachableTargetError(f"object {target_id} has no reachable goal cell")

    start_state = (ix, iz, h)
    if start_state in goals:
        return (STOP,)
    prev = {start_state: None}
    q = deque([start_state])
    while q:
        state = q.popleft()
        cx, cz, ch = state
        dx, dz = _HEADING_DXZ[ch]
        moves = []
        nx, nz = cx + dx, cz + dz
        if 0 <= nx < gx and 0 <= nz < gz and scene.walkable[nz, nx]:
            moves.append(((nx, nz, ch), FORWARD))
        moves.append(((cx, cz, (ch - 1) % 4), TURN_LEFT))
        moves.append(((cx, cz, (ch + 1) % 4), TURN_RIGHT))
        for nstate, action in moves:
            if nstate in prev:
                continue
            prev[nstate] = (state, action)
            if nstate in goals:
                actions = [STOP]
                cur = nstate
                while prev[cur] is not None:
                    cur, act = prev[cur]
                    actions.append(act)
                return tuple(reversed(actions))
            q.append(nstate)
    raise UnreachableTargetError(f"no walkable path to object {target_id}")


def distance_field(scene: Scene, target_id: int) -> dict:
    """(ix, iz, h) -> optimal step count to the target's goal set."""
    target = scene.object_by_id(target_id)
    goals = _goal_states(scene, target, radius_cells=1)
    if not goals:
        raise UnreachableTargetError(f"object {target_id} has no reachable goal cell")
    gz, gx = scene.walkable.shape
    dist = {g: 0 for g in goals}
    q = deque(goals)
    while q:
        x, z, h = q.popleft()
        d = dist[(x, z, h)]
        preds = [(x, z, (h + 1) % 4), (x, z, (h - 1) % 4)]
        dx, dz = _HEADING_DXZ[h]
        px, pz = x - dx, z - dz
        if 0 <= px < gx and 0 <= pz < gz and scene.walkable[pz, px]:
            preds.append((px, pz, h))
        for p in preds:
            if p not in dist:
                dist[p] = d + 1
                q.append(p)
    return dist


def optimal_action(scene: Scene, state, field: dict) -> int:
    """Greedy action for (ix, iz, h) under a distance_field; stop at goals."""
    if field.get(state, None) == 0:
        return STOP
    x, z, h = state
    gz, gx = scene.walkable.shape
    moves = []
    dx, dz = _HEADING_DXZ[h]
    if 0 <= x + dx < gx and 0 <= z + dz < gz and scene.walkable[z + dz, x + dx]:
        moves.append(((x + dx, z + dz, h), FORWARD))
    moves.append(((x, z, (h - 1) % 4), TURN_LEFT))
    moves.append(((x, z, (h + 1) % 4), TURN_RIGHT))
    best, best_d = None, None
    for nstate, action in moves:
        d = field.get(nstate, None)
        if d is not None and (best_d is None or d < best_d):
            best, best_d = action, d
    if best is None:
        raise UnreachableTargetError(f"no path from state {state}")
    return best


def execute_actions(scene: Scene, start: CameraPose, actions) -> list:
    """Poses visited when executing actions; blocked forward moves no-op."""
    ix, iz = scene.cell_of(start.position[0], start.position[2])
    h = heading_of_yaw(start.yaw)
    poses = [pose_for(scene, ix, iz, h)]
    gz, gx = scene.walkable.shape
    for a in actions:
        if a == STOP:
            break
        if a == FORWARD:
            dx, dz = _HEADING_DXZ[h]
            nx, nz = ix + dx, iz + dz
            if 0 <= nx < gx and 0 <= nz < gz and scene.walkable[nz, nx]:
                ix, iz = nx, nz
        elif a == TURN_LEFT:
            h = (h - 1) % 4
        elif a == TURN_RIGHT:
            h = (h + 1) % 4
        poses.append(pose_for(scene, ix, iz, h))
    return poses


# ---------------------------------------------------------------- episodes

def generate_episode(scene: Scene, seed: int, cfg: GenerationConfig = None,
                     scene_index: int = -1) -> Episode:
    """Question plus a start pose whose optimal path fits a difficulty bucket."""
    cfg = cfg or GenerationConfig()
    rng = np.random.default_rng(seed)
    question = generate_question(scene, seed, template_weights=cfg.template_weights)
    cells = np.argwhere(scene.walkable)
    order = rng.permutation(len(cells))
    chosen = None
    for idx in order:
        iz, ix = cells[idx]
        h = int(rng.integers(4))
        pose = pose_for(scene, ix, iz, h)
        try:
            path = shortest_path(scene, pose, question.target_object_id)
        except UnreachableTargetError:
            continue
        if 2 <= len(path) <= 15:
            chosen = (pose, path)
            break
    if chosen is None:
        # fall back to any reachable start, however short
        for idx in order:
            iz, ix = cells[idx]
            pose = pose_for(scene, ix, iz, int(rng.integers(4)))
            try:
                path = shortest_path(scene, pose, question.target_object_id)
            except UnreachableTargetError:
                continue
            chosen = (pose, path)
            break
    if chosen is None:
        raise UnreachableTargetError("no valid start pose found")
    pose, path = chosen
    steps = len(path)
    difficulty = 5 if steps <= 5 else (10 if steps <= 10 else 15)

    alt = None
    for idx in order[::-1]:
        iz, ix = cells[idx]
        h = int(rng.integers(4))
        p2 = pose_for(scene, ix, iz, h)
        if np.allclose(p2.position, pose.position) and h == heading_of_yaw(pose.yaw):
            continue
        try:
            ap = shortest_path(scene, p2, question.target_object_id)
        except UnreachableTargetError:
            continue
        if 2 <= len(ap) <= 15:
            alt = p2
            break
    return Episode(scene=scene, question=question, start_pose=pose,
                   shortest_path=path, difficulty=difficulty,
                   scene_index=scene_index, alt_start_pose=alt)


# ---------------------------------------------------------------- file io

_F32 = struct.Struct("<f")


def _hex_f32_row(row: np.ndarray) -> str:
    return row.astype("<f4").tobytes().hex()


def _unhex_f32_row(s: str, width: int) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f4").reshape(width, 3)


def save_scenes(path, scenes, meta: dict = None):
    """Scene-set file: `EALSCENE v1` header, one record per scene."""
    lines = ["EALSCENE v1"]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    lines.append("answers " + " ".join(ANSWERS))
    for si, s in enumerate(scenes):
        lines.append(f"scene {si}")
        lines.append("background " + _fmt3(s.background_color))
        gz, gx = s.walkable.shape
        lines.append(f"grid {float(s.cell_size)!r} {float(s.grid_origin[0])!r} "
                     f"{float(s.grid_origin[1])!r} {gx} {gz}")
        for iz in range(gz):
            lines.append("gridrow " + "".join(
                "1" if s.walkable[iz, ix] else "0" for ix in range(gx)))
        lines.append(f"camera {float(s.eye_height)!r} {float(s.fov)!r}")
        for r in s.rooms:
            lines.append(f"room {r.label} " + " ".join(repr(float(v)) for v in r.rect))
        for w in s.walls:
            lines.append("wall " + " ".join(
                repr(float(v)) for v in (w.x0, w.z0, w.x1, w.z1, w.height)))
        for o in s.objects:
            lines.append(f"object {o.id} {o.label} {o.room_label} "
                         + _fmt3(o.base_position) + " " + _fmt3(o.size))
            m = o.mesh
            lines.append(f"verts {len(m.vertices)}")
            for v, uv in zip(m.vertices, m.uvs):
                lines.append("v " + " ".join(
                    repr(float(x)) for x in (v[0], v[1], v[2], uv[0], uv[1])))
            lines.append(f"tris {len(m.triangles)}")
            for t in m.triangles:
                lines.append(f"t {t[0]} {t[1]} {t[2]}")
            th, tw, _ = m.texture.shape
            lines.append(f"texture {th} {tw}")
            for row in m.texture:
                lines.append(_hex_f32_row(row))
            lines.append("endobject")
        lines.append("endscene")
    lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _fmt3(v):
    return " ".join(repr(float(x)) for x in v)


def load_scenes(path):
    """Returns (scenes, meta dict). Raises SceneFormatError on bad input."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "EALSCENE v1":
        raise SceneFormatError(f"{path}: missing EALSCENE v1 header")
    meta, scenes = {}, []
    i = 1
    cur = None
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        key = parts[0]
        if key == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif key == "answers":
            if tuple(parts[1:]) != ANSWERS:
                raise SceneFormatError("answer vocabulary mismatch")
        elif key == "scene":
            cur = {"objects": [], "rooms": [], "walls": [], "gridrows": []}
        elif key == "background":
            cur["background"] = tuple(float(x) for x in parts[1:4])
        elif key == "grid":
            cur["cell"] = float(parts[1])
            cur["origin"] = (float(parts[2]), float(parts[3]))
            cur["gx"], cur["gz"] = int(parts[4]), int(parts[5])
        elif key == "gridrow":
            cur["gridrows"].append([c == "1" for c in parts[1]])
        elif key == "camera":
            cur["eye"], cur["fov"] = float(parts[1]), float(parts[2])
        elif key == "room":
            cur["rooms"].append(Room(label=parts[1],
                                     rect=tuple(float(x) for x in parts[2:6])))
        elif key == "wall":
            cur["walls"].append(Wall(*[float(x) for x in parts[1:6]]))
        elif key == "object":
            oid, label, room_label = int(parts[1]), parts[2], parts[3]
            base = np.array([float(x) for x in parts[4:7]])
            size = np.array([float(x) for x in parts[7:10]])
            nv = int(lines[i].split()[1]); i += 1
            verts, uvs = [], []
            for _ in range(nv):
                p = lines[i].split(); i += 1
                verts.append([float(p[1]), float(p[2]), float(p[3])])
                uvs.append([float(p[4]), float(p[5])])
            nt = int(lines[i].split()[1]); i += 1
            tris = []
            for _ in range(nt):
                p = lines[i].split(); i += 1
                tris.append([int(p[1]), int(p[2]), int(p[3])])
            tp = lines[i].split(); i += 1
            th, tw = int(tp[1]), int(tp[2])
            tex = np.stack([_unhex_f32_row(lines[i + r], tw) for r in range(th)])
            i += th
            if lines[i].strip() != "endobject":
                raise SceneFormatError(f"{path}: expected endobject at line {i+1}")
            i += 1
            mesh = TexturedMesh(vertices=np.array(verts),
                                triangles=np.array(tris, dtype=np.int32),
                                uvs=np.array(uvs), texture=tex)
            cur["objects"].append(SceneObject(
                id=oid, label=label, room_label=room_label, mesh=mesh,
                base_position=base, size=size))
        elif key == "endscene":
            walkable = np.array(cur["gridrows"], dtype=bool)
            if walkable.shape != (cur["gz"], cur["gx"]):
                raise SceneFormatError("grid shape mismatch")
            scenes.append(Scene(
                objects=cur["objects"], rooms=cur["rooms"], walkable=walkable,
                background_color=cur["background"], walls=cur["walls"],
                cell_size=cur["cell"], grid_origin=cur["origin"],
                eye_height=cur["eye"], fov=cur["fov"]))
            cur = None
        elif key == "end":
            return scenes, meta
        else:
            raise SceneFormatError(f"{path}: unknown record {key!r} at line {i}")
    raise SceneFormatError(f"{path}: missing end record")


def save_episodes(path, episodes):
    """Episode manifest: one record per episode referencing its scene index."""
    lines = ["EALEPIS v1"]
    for e in episodes:
        lines.append(f"episode {e.scene_index} {e.difficulty}")
        q = e.question
        lines.append(f"question {q.template} {q.target_object_id} {q.answer} "
                     + " ".join(str(t) for t in q.text_tokens))
        lines.append("start " + _fmt_pose(e.start_pose))
        if e.alt_start_pose is not None:
            lines.append("altstart " + _fmt_pose(e.alt_start_pose))
        lines.append("path " + "".join(_ACTION_LETTER[a] for a in e.shortest_path))
        lines.append("endepisode")
    lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _fmt_pose(p: CameraPose) -> str:
    vals = (p.position[0], p.position[1], p.position[2], p.yaw, p.pitch, p.fov)
    return " ".join(repr(float(v)) for v in vals)


def _parse_pose(parts) -> CameraPose:
    vals = [float(x) for x in parts]
    return CameraPose(position=np.array(vals[:3]), yaw=vals[3],
                      pitch=vals[4], fov=vals[5])


def load_episodes(path, scenes):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "EALEPIS v1":
        raise SceneFormatError(f"{path}: missing EALEPIS v1 header")
    episodes = []
    i = 1
    cur = None
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        key = parts[0]
        if key == "episode":
            cur = {"scene_index": int(parts[1]), "difficulty": int(parts[2]),
                   "alt": None}
        elif key == "question":
            cur["question"] = Question(
                template=parts[1], target_object_id=int(parts[2]),
                answer=int(parts[3]),
                text_tokens=tuple(int(t) for t in parts[4:]))
        elif key == "start":
            cur["start"] = _parse_pose(parts[1:7])
        elif key == "altstart":
            cur["alt"] = _parse_pose(parts[1:7])
        elif key == "path":
            cur["path"] = tuple(_ACTION_LETTER.index(c) for c in parts[1])
        elif key == "endepisode":
            episodes.append(Episode(
                scene=scenes[cur["scene_index"]], question=cur["question"],
                start_pose=cur["start"], shortest_path=cur["path"],
                difficulty=cur["difficulty"], scene_index=cur["scene_index"],
                alt_start_pose=cur["alt"]))
        elif key == "end":
            return episodes
        else:
            raise SceneFormatError(f"{path}: unknown record {key!r}")
    raise SceneFormatError(f"{path}: missing end record")

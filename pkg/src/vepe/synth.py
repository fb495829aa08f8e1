"""Deterministic synthetic multi-person video clips.

Persons are 15-joint articulated stick figures with per-clip colors, walking
along reflected linear trajectories with swinging limbs. Rendering is
painter's-algorithm back to front with anti-aliased capsule strokes; joints
covered by a nearer person (or leaving the frame) are marked invisible.
Everything is a pure function of (config, seed).

Clip files use the VEPE-CLIP-1 layout:

    VEPE-CLIP-1\n
    clip <clip_id>\n
    seed <seed>\n
    shape <T> <H> <W>\n
    frame <t> <person-count>\n            (per frame, in order)
    person <track_id> <x y v> * 15\n      (per person; repr floats, v in {0,1})
    pixels\n
    <T*H*W*3 raw uint8 bytes, row-major RGB>
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import ceil, cos, pi, sin, sqrt

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import ConfigError

N_JOINTS = 15
JOINT_NAMES = (
    "nose", "head_bottom", "head_top",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)

# (joint, joint) limb segments; the head gets a thicker stroke.
LIMBS = (
    (2, 1), (1, 0),
    (1, 3), (1, 4),
    (3, 5), (5, 7), (4, 6), (6, 8),
    (3, 9), (4, 10), (9, 10),
    (9, 11), (11, 13), (10, 12), (12, 14),
)

SPLITS = ("clean", "occlusion", "blur", "fast")

BACKGROUND = 26  # dark gray, uint8
MARKER_COLOR = np.array([255.0, 255.0, 255.0])


@dataclass(frozen=True)
class SynthConfig:
    persons: tuple[int, int] = (2, 6)
    speed: tuple[float, float] = (0.005, 0.02)   # frame widths per frame
    occlusion_prob: float = 0.0
    blur: tuple[float, float] = (0.0, 0.0)       # gaussian sigma, pixels
    image_size: int = 128
    frames: int = 3

    def __post_init__(self):
        for name in ("persons", "speed", "blur"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} range ({lo}, {hi}) is empty or negative")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")


def split_config(base: SynthConfig, split: str) -> SynthConfig:
    """The four benchmark splits, each a targeted stressor on clean.

    The occlusion split also raises walking speed: crossings then start and
    resolve within a clip, so a covered joint is usually visible in a
    neighbouring frame instead of staying hidden for the whole window."""
    if split == "clean":
        return base
    if split == "occlusion":
        return replace(base, occlusion_prob=1.0, speed=(0.05, 0.10))
    if split == "blur":
        return replace(base, blur=(0.5, 1.6))
    if split == "fast":
        return replace(base, speed=(0.06, 0.12))
    raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")


@dataclass
class PersonAnnotation:
    track_id: int
    keypoints: np.ndarray   # [15, 2] normalized (x, y) in [0, 1]
    visible: np.ndarray     # [15] bool


@dataclass
class VideoClip:
    frames: list            # T arrays [H, W, 3] uint8
    annotations: list       # T lists of PersonAnnotation
    clip_id: str
    seed: int

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


# -- skeleton geometry -----------------------------------------------------


def _skeleton(root_x: float, root_y: float, h: float, phase: float,
              arm_amp: float, leg_amp: float) -> np.ndarray:
    """Joint positions [15, 2] in normalized units; pelvis midpoint at root.

    Angles are measured from straight down, so a segment from p with angle a
    and length r ends at (p_x + r*sin(a), p_y + r*cos(a)).
    """
    j = np.zeros((N_JOINTS, 2))
    shoulder_w = 0.12 * h
    hip_w = 0.07 * h
    neck_y = root_y - 0.30 * h

    j[1] = (root_x, neck_y)                         # head_bottom
    j[2] = (root_x, neck_y - 0.15 * h)              # head_top
    j[0] = (root_x + 0.05 * h, neck_y - 0.06 * h)   # nose
    j[3] = (root_x - shoulder_w, neck_y + 0.02 * h)
    j[4] = (root_x + shoulder_w, neck_y + 0.02 * h)
    j[9] = (root_x - hip_w, root_y)
    j[10] = (root_x + hip_w, root_y)

    upper, fore = 0.15 * h, 0.14 * h
    thigh, shin = 0.20 * h, 0.19 * h

    def chain(start, a1, r1, a2, r2):
        mid = start + np.array([r1 * sin(a1), r1 * cos(a1)])
        end = mid + np.array([r2 * sin(a2), r2 * cos(a2)])
        return mid, end

    # Arms swing in anti-phase with each other; elbows keep a soft bend.
    for sh, el, wr, ph in ((3, 5, 7, phase), (4, 6, 8, phase + pi)):
        a1 = arm_amp * sin(ph)
        a2 = a1 + 0.45 + 0.35 * sin(ph + 0.6)
        j[el], j[wr] = chain(j[sh], a1, upper, a2, fore)
    # Legs likewise; knees bend against the swing.
    for hip, kn, an, ph in ((9, 11, 13, phase + pi), (10, 12, 14, phase)):
        a1 = leg_amp * sin(ph)
        a2 = a1 - 0.25 - 0.35 * max(0.0, sin(ph + 0.9))
        j[kn], j[an] = chain(j[hip], a1, thigh, a2, shin)
    return j


# Root clearance needed so the whole body stays inside a box: measured from
# the pelvis midpoint, as fractions of body scale h.
_REACH_UP = 0.47
_REACH_DOWN = 0.43
_REACH_SIDE = 0.34


def _fold(x: float, lo: float, hi: float) -> float:
    """Reflect x into [lo, hi]."""
    span = hi - lo
    y = (x - lo) % (2.0 * span)
    return lo + (span - abs(y - span))


# -- rasterization ---------------------------------------------------------


def _draw_capsule(img, alpha_acc, pa, pb, halfwidth, color):
    """Anti-aliased thick segment from pa to pb (pixel coords, x right y down)."""
    H, W, _ = img.shape
    lo_x = max(0, int(np.floor(min(pa[0], pb[0]) - halfwidth - 1)))
    hi_x = min(W - 1, int(np.ceil(max(pa[0], pb[0]) + halfwidth + 1)))
    lo_y = max(0, int(np.floor(min(pa[1], pb[1]) - halfwidth - 1)))
    hi_y = min(H - 1, int(np.ceil(max(pa[1], pb[1]) + halfwidth + 1)))
    if lo_x > hi_x or lo_y > hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y + 1, lo_x:hi_x + 1]
    dx, dy = pb[0] - pa[0], pb[1] - pa[1]
    len2 = dx * dx + dy * dy
    if len2 < 1e-12:
        t = np.zeros_like(xs, dtype=float)
    else:
        t = np.clip(((xs - pa[0]) * dx + (ys - pa[1]) * dy) / len2, 0.0, 1.0)
    dist = np.hypot(xs - (pa[0] + t * dx), ys - (pa[1] + t * dy))
    alpha = np.clip(halfwidth + 0.5 - dist, 0.0, 1.0)
    region = img[lo_y:hi_y + 1, lo_x:hi_x + 1]
    region += alpha[:, :, None] * (color - region)
    np.maximum(alpha_acc[lo_y:hi_y + 1, lo_x:hi_x + 1], alpha,
               out=alpha_acc[lo_y:hi_y + 1, lo_x:hi_x + 1])


def _render_person(img, joints_px, halfwidth, marker_r, color):
    """Draw one person; returns the person's coverage mask."""
    alpha_acc = np.zeros(img.shape[:2])
    for a, b in LIMBS:
        w = halfwidth * (1.9 if (a, b) == (2, 1) else 1.0)
        _draw_capsule(img, alpha_acc, joints_px[a], joints_px[b], w, color)
    for p in joints_px:
        _draw_capsule(img, alpha_acc, p, p, marker_r, MARKER_COLOR)
    return alpha_acc > 0.5


def draw_skeleton(img: np.ndarray, keypoints: np.ndarray, color,
                  marker_color=None, halfwidth: float = 0.8,
                  marker_radius: float = 1.5) -> None:
    """Overlay one skeleton on a float image in 0..255 channel scale.

    ``keypoints`` is [K, 2] in normalized coordinates; limbs are stroked in
    ``color`` and, when given, a ``marker_color`` disk lands on every joint.
    """
    H, W, _ = img.shape
    px = np.asarray(keypoints, dtype=np.float64) * np.array([W, H]) - 0.5
    acc = np.zeros(img.shape[:2])
    col = np.asarray(color, dtype=np.float64)
    for a, b in LIMBS:
        _draw_capsule(img, acc, px[a], px[b], halfwidth, col)
    if marker_color is not None:
        mc = np.asarray(marker_color, dtype=np.float64)
        for p in px:
            _draw_capsule(img, acc, p, p, marker_radius, mc)


def generate_clip(config: SynthConfig, seed: int) -> VideoClip:
    rng = np.random.default_rng(seed)
    H = W = config.image_size
    n = int(rng.integers(config.persons[0], config.persons[1] + 1))
    free_roam = bool(rng.random() < config.occlusion_prob) if n > 0 else False

    # Confinement boxes: free roam shares the whole frame, otherwise each
    # person gets a disjoint grid cell so nobody can cover anybody.
    boxes = []
    if n > 0:
        if free_roam:
            boxes = [(0.0, 1.0, 0.0, 1.0)] * n
            scale_hi = 0.45
        else:
            gx = ceil(sqrt(n))
            gy = ceil(n / gx)
            order = rng.permutation(gx * gy)[:n]
            for cell in order:
                cx, cy = int(cell) % gx, int(cell) // gx
                boxes.append((cx / gx, (cx + 1) / gx, cy / gy, (cy + 1) / gy))
            scale_hi = min(0.45, (min(1.0 / gx, 1.0 / gy)) * 0.95)

    persons = []
    for i in range(n):
        x0, x1, y0, y1 = boxes[i]
        h = rng.uniform(min(0.30, scale_hi * 0.7), scale_hi)
        mx = (_REACH_SIDE + 0.02) * h
        my_up = (_REACH_UP + 0.02) * h
        my_dn = (_REACH_DOWN + 0.02) * h
        lo_x, hi_x = x0 + mx, x1 - mx
        lo_y, hi_y = y0 + my_up, y1 - my_dn
        speed = rng.uniform(*config.speed)
        angle = rng.uniform(0, 2 * pi)
        hue = rng.uniform(0, 1)
        persons.append({
            "track_id": i,
            "h": h,
            "pos": np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)]),
            "vel": np.array([speed * cos(angle), speed * sin(angle)]),
            "range": (lo_x, hi_x, lo_y, hi_y),
            "phase": rng.uniform(0, 2 * pi),
            "omega": rng.uniform(0.35, 0.9),
            "arm_amp": rng.uniform(0.4, 0.8),
            "leg_amp": rng.uniform(0.3, 0.6),
            "color": _hue_to_rgb(hue),
        })
    depth_order = list(rng.permutation(n))  # first = farthest

    frames = []
    annotations = []
    for t in range(config.frames):
        img = np.full((H, W, 3), float(BACKGROUND))
        joints_all = {}
        for p in persons:
            joints = _skeleton(p["pos"][0], p["pos"][1], p["h"],
                               p["phase"], p["arm_amp"], p["leg_amp"])
            joints_all[p["track_id"]] = joints
        masks = {}
        for idx in depth_order:
            p = persons[idx]
            joints_px = joints_all[p["track_id"]] * np.array([W, H]) - 0.5
            halfwidth = max(0.7, 0.020 * p["h"] * H)
            marker_r = max(1.3, 0.028 * p["h"] * H)
            masks[idx] = _render_person(img, joints_px, halfwidth, marker_r,
                                        p["color"])

        # Visibility from pre-blur geometry: nearer persons cover farther ones.
        cover = np.zeros((H, W), dtype=bool)
        covered_by_nearer = {}
        for idx in reversed(depth_order):
            p = persons[idx]
            joints = joints_all[p["track_id"]]
            px = np.clip(np.round(joints[:, 0] * W - 0.5).astype(int), 0, W - 1)
            py = np.clip(np.round(joints[:, 1] * H - 0.5).astype(int), 0, H - 1)
            covered_by_nearer[idx] = cover[py, px].copy()
            cover |= masks[idx]

        frame_annos = []
        for i, p in enumerate(persons):
            joints = joints_all[p["track_id"]]
            in_frame = ((joints[:, 0] >= 0.0) & (joints[:, 0] <= 1.0)
                        & (joints[:, 1] >= 0.0) & (joints[:, 1] <= 1.0))
            visible = in_frame & ~covered_by_nearer[i]
            frame_annos.append(PersonAnnotation(
                track_id=p["track_id"],
                keypoints=np.clip(joints, 0.0, 1.0),
                visible=visible))
        annotations.append(frame_annos)

        if config.blur[1] > 0:
            sigma = rng.uniform(*config.blur)
            if sigma > 1e-6:
                img = gaussian_filter(img, sigma=(sigma, sigma, 0.0))
        frames.append(np.clip(np.round(img), 0, 255).astype(np.uint8))

        for p in persons:
            p["phase"] += p["omega"]
            lo_x, hi_x, lo_y, hi_y = p["range"]
            nx, ny = p["pos"] + p["vel"]
            if nx < lo_x or nx > hi_x:
                p["vel"][0] = -p["vel"][0]
                nx = _fold(nx, lo_x, hi_x)
            if ny < lo_y or ny > hi_y:
                p["vel"][1] = -p["vel"][1]
                ny = _fold(ny, lo_y, hi_y)
            p["pos"] = np.array([nx, ny])

    return VideoClip(frames=frames, annotations=annotations,
                     clip_id=f"clip-{seed:08d}", seed=seed)


def _hue_to_rgb(hue: float) -> np.ndarray:
    """Saturated palette color, capped below the marker white."""
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    v, q, t = 0.9, 0.9 * (1 - 0.75 * f), 0.9 * (1 - 0.75 * (1 - f))
    rgb = [(v, t, 0.225), (q, v, 0.225), (0.225, v, t),
           (0.225, q, v), (t, 0.225, v), (v, 0.225, q)][i]
    return np.array(rgb) * 230.0


# -- clip files ------------------------------------------------------------


class ClipFormatError(ValueError):
    pass


def save_clip(clip: VideoClip, path: str) -> None:
    T = len(clip.frames)
    H, W = clip.size
    lines = ["VEPE-CLIP-1",
             f"clip {clip.clip_id}",
             f"seed {clip.seed}",
             f"shape {T} {H} {W}"]
    for t in range(T):
        annos = clip.annotations[t]
        lines.append(f"frame {t} {len(annos)}")
        for a in annos:
            parts = [f"person {a.track_id}"]
            for j in range(N_JOINTS):
                parts.append(f"{float(a.keypoints[j, 0])!r} "
                             f"{float(a.keypoints[j, 1])!r} {int(a.visible[j])}")
            lines.append(" ".join(parts))
    lines.append("pixels")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for frame in clip.frames:
            f.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def load_clip(path: str) -> VideoClip:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def fail(msg):
        raise ClipFormatError(f"{path}: {msg} at byte {pos}")

    def next_line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            fail("unexpected end of file")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    first = next_line()
    if first != "VEPE-CLIP-1":
        raise ClipFormatError(f"{path}: expected VEPE-CLIP-1 header, got {first!r}")
    clip_line = next_line()
    if not clip_line.startswith("clip "):
        fail(f"expected 'clip <id>', got {clip_line!r}")
    clip_id = clip_line[5:]
    seed_line = next_line()
    if not seed_line.startswith("seed "):
        fail(f"expected 'seed <n>', got {seed_line!r}")
    seed = int(seed_line[5:])
    shape_line = next_line().split()
    if len(shape_line) != 4 or shape_line[0] != "shape":
        fail(f"expected 'shape T H W', got {shape_line!r}")
    T, H, W = (int(v) for v in shape_line[1:])

    annotations = []
    for t in range(T):
        head = next_line().split()
        if len(head) != 3 or head[0] != "frame" or int(head[1]) != t:
            fail(f"expected 'frame {t} <count>', got {head!r}")
        count = int(head[2])
        frame_annos = []
        for _ in range(count):
            parts = next_line().split()
            if parts[0] != "person" or len(parts) != 2 + 3 * N_JOINTS:
                fail(f"malformed person line with {len(parts)} fields")
            track_id = int(parts[1])
            vals = parts[2:]
            kp = np.zeros((N_JOINTS, 2))
            vis = np.zeros(N_JOINTS, dtype=bool)
            for j in range(N_JOINTS):
                kp[j, 0] = float(vals[3 * j])
                kp[j, 1] = float(vals[3 * j + 1])
                vis[j] = vals[3 * j + 2] == "1"
            frame_annos.append(PersonAnnotation(track_id, kp, vis))
        annotations.append(frame_annos)

    marker = next_line()
    if marker != "pixels":
        fail(f"expected 'pixels' marker, got {marker!r}")
    need = T * H * W * 3
    if len(blob) - pos != need:
        fail(f"pixel payload is {len(blob) - pos} bytes, expected {need}")
    raw = np.frombuffer(blob[pos:], dtype=np.uint8)
    frames = [raw[t * H * W * 3:(t + 1) * H * W * 3].reshape(H, W, 3).copy()
              for t in range(T)]
    return VideoClip(frames=frames, annotations=annotations,
                     clip_id=clip_id, seed=seed)

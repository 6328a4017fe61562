"""Synthetic multi-agent clips with jointly spatial and temporal labels.

The interaction family is the workhorse: in each clip a hidden pair of
agents walks straight toward each other during one temporal half while
everyone else wanders. The pair shares a single action archetype, and the
group label is

    y_g = pairing_pattern * 2 + half

where ``pairing_pattern = shared_archetype mod (G_cls // 2)`` and ``half``
says when the approach happened. Recovering the label therefore needs both
WHO interacts (a relation among individuals within frames, since plenty of
bystanders carry archetypes too) and WHEN (ordering across frames): a
frame-pooled or order-agnostic model is structurally stuck near chance on
the half bit, which caps it at half the attainable accuracy.

All motion uses one step length, so per-frame speed reveals nothing; only
multi-frame directional persistence marks the pair.

The majority family labels a clip by the modal archetype, mirroring
datasets whose group label is "the largest number of the individual
actions".
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, GeneratorConfig, clip_seed, stream_rng

# scene rasterization constants (desk scale; not config knobs)
SCENE_SIDE = 4
_BUMP_SIGMA = 0.12


def scene_channels(cfg):
    """One channel per feature dimension: occupancy, velocity, archetypes."""
    return cfg.D_in

# motion constants
_STEP = 0.055
_HEADING_JITTER = 0.6
_PAIR_DIST_LO = 0.55
_PAIR_DIST_HI = 0.75
_REPEL_DIST = 0.55
_CONTACT_DIST = 0.08
_MARGIN = 0.04

DATASET_MAGIC = b"CSTT"
DATASET_VERSION = 1


class DatasetError(RuntimeError):
    """A dataset file is malformed or disagrees with its sidecar."""


@dataclass(frozen=True)
class SyntheticSample:
    """One clip: per-agent features, scene grids, positions, labels."""

    individuals: np.ndarray   # [T, N, D_in] float64
    scene: np.ndarray         # [T, D_in, SCENE_SIDE, SCENE_SIDE]
    boxes: np.ndarray         # [T, N, 4] centers and sizes in [0, 1]
    y_g: int
    y_a: np.ndarray           # [N] int64
    seed: int


def archetype_table(cfg):
    """Unit-norm archetype embeddings, shared by every clip of a config.

    Rows live in the feature tail (D_in - 4 dims). Derived from cfg.seed
    alone so train and val clips agree on what each archetype looks like.
    """
    rng = stream_rng(cfg.seed, "archetypes")
    table = rng.normal(size=(cfg.A_cls, cfg.D_in - 4))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def _active_steps(T, half):
    """Step indices (t -> t+1 transitions) belonging to the given half."""
    mid = (T - 1) // 2
    return range(0, mid) if half == 0 else range(mid, T - 1)


def _walk_step(pos, heading, rng):
    heading = heading + rng.normal(0.0, _HEADING_JITTER)
    nxt = pos + _STEP * np.array([np.cos(heading), np.sin(heading)])
    for axis in range(2):
        if nxt[axis] < _MARGIN or nxt[axis] > 1 - _MARGIN:
            nxt[axis] = np.clip(nxt[axis], _MARGIN, 1 - _MARGIN)
            heading = np.pi - heading if axis == 0 else -heading
    return nxt, heading


def _repel_step(pos_self, pos_other, rng):
    """Step away from the partner; keeps the pair apart off-duty so the
    later approach always has room to run at full speed."""
    away = pos_self - pos_other
    heading = np.arctan2(away[1], away[0]) + rng.normal(0.0, 0.3)
    nxt = pos_self + _STEP * np.array([np.cos(heading), np.sin(heading)])
    return np.clip(nxt, _MARGIN, 1 - _MARGIN)


def _simulate_paths(cfg, rng, pair, half):
    """Positions [T, N, 2]; the pair (if any) pursues during its half."""
    T, N = cfg.T, cfg.N
    pos = np.empty((T, N, 2))
    pos[0] = rng.uniform(0.15, 0.85, size=(N, 2))
    if pair is not None:
        i, j = pair
        # place the pair a controlled distance apart so the approach
        # neither finishes early nor runs out of room
        for _ in range(1000):
            center = rng.uniform(0.2, 0.8, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(_PAIR_DIST_LO, _PAIR_DIST_HI)
            offset = 0.5 * dist * np.array([np.cos(angle), np.sin(angle)])
            a, b = center + offset, center - offset
            if np.all((a > _MARGIN) & (a < 1 - _MARGIN) & (b > _MARGIN) & (b < 1 - _MARGIN)):
                pos[0, i], pos[0, j] = a, b
                break
    headings = rng.uniform(0, 2 * np.pi, size=N)
    active = set(_active_steps(T, half)) if pair is not None else set()
    for t in range(T - 1):
        for n in range(N):
            if pair is not None and n in pair:
                continue
            pos[t + 1, n], headings[n] = _walk_step(pos[t, n], headings[n], rng)
        if pair is None:
            continue
        i, j = pair
        gap = pos[t, j] - pos[t, i]
        d = np.linalg.norm(gap)
        if t in active:
            step = min(_STEP, max(0.0, 0.5 * (d - _CONTACT_DIST)))
            direction = gap / d if d > 0 else np.zeros(2)
            pos[t + 1, i] = pos[t, i] + step * direction
            pos[t + 1, j] = pos[t, j] - step * direction
        elif d < _REPEL_DIST:
            pos[t + 1, i] = _repel_step(pos[t, i], pos[t, j], rng)
            pos[t + 1, j] = _repel_step(pos[t, j], pos[t, i], rng)
        else:
            pos[t + 1, i], headings[i] = _walk_step(pos[t, i], headings[i], rng)
            pos[t + 1, j], headings[j] = _walk_step(pos[t, j], headings[j], rng)
    return pos


def _rasterize(pos, vel, embed):
    """Splat each agent onto a coarse grid, one channel per feature.

    Channels are occupancy, the two velocity components, speed, and the
    agent's archetype embedding, so the grid carries the same information
    as the individual features in a spatial layout.
    """
    T, N, _ = pos.shape
    centers = (np.arange(SCENE_SIDE) + 0.5) / SCENE_SIDE
    gy, gx = np.meshgrid(centers, centers, indexing="ij")
    grid = np.stack([gx, gy], axis=-1)                # [H, W, 2]
    channels = 4 + embed.shape[1]
    scene = np.zeros((T, channels, SCENE_SIDE, SCENE_SIDE))
    for t in range(T):
        diff = grid[None] - pos[t][:, None, None, :]  # [N, H, W, 2]
        bump = np.exp(-(diff ** 2).sum(-1) / (2 * _BUMP_SIGMA ** 2))
        speed = np.linalg.norm(vel[t], axis=-1)
        weights = np.concatenate(
            [np.ones((N, 1)), vel[t], speed[:, None], embed], axis=1)
        scene[t] = np.einsum("nc,nhw->chw", weights, bump)
    return scene


def generate_clip(cfg, index):
    """Build clip ``index`` of the stream rooted at cfg.seed; pure function."""
    cfg.validate()
    seed = clip_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    T, N = cfg.T, cfg.N
    table = archetype_table(cfg)

    if cfg.task_family == "interaction":
        n_patterns = cfg.G_cls // 2
        half = int(rng.integers(0, 2))
        pattern = int(rng.integers(0, n_patterns))
        i, j = map(int, rng.choice(N, size=2, replace=False))
        y_a = rng.integers(0, cfg.A_cls, size=N)
        # the pair shares an archetype drawn among those realizing the
        # pattern, so the label stays exactly uniform while archetypes vary
        candidates = [k for k in range(cfg.A_cls) if k % n_patterns == pattern]
        y_a[i] = y_a[j] = candidates[int(rng.integers(0, len(candidates)))]
        y_g = pattern * 2 + half
        pos = _simulate_paths(cfg, rng, (i, j), half)
    else:
        half, pair = 0, None
        y_a = rng.integers(0, cfg.A_cls, size=N)
        counts = np.bincount(y_a, minlength=cfg.A_cls)
        y_g = int(np.argmax(counts))  # ties resolve to the lowest label
        pos = _simulate_paths(cfg, rng, pair, half)

    steps = np.diff(pos, axis=0)                      # [T-1, N, 2]
    vel = np.concatenate([steps, steps[-1:]], axis=0) / _STEP

    feats = np.zeros((T, N, cfg.D_in))
    feats[:, :, 0:2] = pos
    feats[:, :, 2:4] = vel
    feats[:, :, 4:] = table[y_a]
    feats = feats + rng.normal(0.0, cfg.noise_sigma, size=feats.shape)

    boxes = np.concatenate([pos, np.full((T, N, 2), 0.05)], axis=-1)
    scene = _rasterize(pos, vel, table[y_a])
    return SyntheticSample(individuals=feats, scene=scene, boxes=boxes,
                           y_g=int(y_g), y_a=y_a.astype(np.int64), seed=seed)


def dataset(cfg, n_clips):
    """The first ``n_clips`` clips of the stream, in index order."""
    if n_clips < 2:
        raise ConfigError(f"n_clips must be >= 2, got {n_clips}")
    return [generate_clip(cfg, i) for i in range(n_clips)]


def train_val_split(samples):
    """Even indices train, odd indices validate."""
    return samples[0::2], samples[1::2]


# ---------------------------------------------------------------------------
# hand-coded oracles, used to calibrate and test the task


def decode_archetypes(sample, cfg, table=None):
    """Nearest archetype row to each agent's time-averaged feature tail."""
    if table is None:
        table = archetype_table(cfg)
    tail = sample.individuals[:, :, 4:].mean(axis=0)  # [N, D_in-4]
    d2 = ((tail[:, None, :] - table[None]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def trajectory_oracle(sample, cfg, table=None):
    """Classify y_g from pairwise-distance trajectories plus archetypes.

    The active pair closes distance at every step of its half by a margin
    no wandering pair sustains, so the (pair, half) with the largest
    worst-step closure wins. Works from the clean positions in ``boxes``.
    """
    if cfg.task_family == "majority":
        decoded = decode_archetypes(sample, cfg, table)
        return int(np.argmax(np.bincount(decoded, minlength=cfg.A_cls)))
    T, N = cfg.T, cfg.N
    pos = sample.boxes[:, :, 0:2]
    decoded = decode_archetypes(sample, cfg, table)
    best = (-np.inf, 0, 0, 0)
    for i in range(N):
        for j in range(i + 1, N):
            d = np.linalg.norm(pos[:, i] - pos[:, j], axis=1)
            closure = d[:-1] - d[1:]                  # per-step decrease
            for half in (0, 1):
                steps = list(_active_steps(T, half))
                score = closure[steps].min()
                if score > best[0]:
                    best = (score, i, j, half)
    _, i, j, half = best
    n_patterns = cfg.G_cls // 2
    # the pair members carry the same archetype; either one gives the pattern
    pattern = int(decoded[i]) % n_patterns
    return pattern * 2 + half


def shuffle_frames(sample, rng):
    """Permute the time axis of every per-frame field; labels unchanged."""
    perm = rng.permutation(sample.individuals.shape[0])
    return SyntheticSample(individuals=sample.individuals[perm],
                           scene=sample.scene[perm], boxes=sample.boxes[perm],
                           y_g=sample.y_g, y_a=sample.y_a, seed=sample.seed)


# ---------------------------------------------------------------------------
# binary export


def _header_struct():
    return struct.Struct("<4sIIIIII")


def _read_exact(fh, nbytes, path, what):
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise DatasetError(f"{path}: truncated while reading {what}")
    return raw


def write_dataset(path, cfg, samples):
    """Write clips to a little-endian binary file plus a JSON sidecar.

    Layout: header {magic, version, T, N, D_in, G_cls, A_cls}, then per
    clip: individuals f32, scene f32, boxes f32, y_g u16, y_a u16[N].
    Scene dimensions and per-clip seeds travel in the sidecar.
    """
    path = Path(path)
    header = _header_struct().pack(DATASET_MAGIC, DATASET_VERSION, cfg.T, cfg.N,
                                   cfg.D_in, cfg.G_cls, cfg.A_cls)
    with open(path, "wb") as fh:
        fh.write(header)
        for s in samples:
            fh.write(s.individuals.astype("<f4").tobytes())
            fh.write(s.scene.astype("<f4").tobytes())
            fh.write(s.boxes.astype("<f4").tobytes())
            fh.write(struct.pack("<H", s.y_g))
            fh.write(np.asarray(s.y_a, dtype="<u2").tobytes())
    sidecar = {
        "version": DATASET_VERSION,
        "n_clips": len(samples),
        "scene": {"channels": scene_channels(cfg), "height": SCENE_SIDE,
                  "width": SCENE_SIDE},
        "config": {"T": cfg.T, "N": cfg.N, "D_in": cfg.D_in, "G_cls": cfg.G_cls,
                   "A_cls": cfg.A_cls, "noise_sigma": cfg.noise_sigma,
                   "task_family": cfg.task_family, "seed": cfg.seed},
        "clip_seeds": [s.seed for s in samples],
    }
    sidecar_path = path.with_suffix(path.suffix + ".json")
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path, sidecar_path


def read_dataset(path):
    """Load a dataset written by :func:`write_dataset`.

    Returns (GeneratorConfig, list of samples). Features come back as
    float64 arrays holding the stored f32 values.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    hs = _header_struct()
    try:
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read sidecar {sidecar_path}: {e}") from None
    with open(path, "rb") as fh:
        raw = fh.read(hs.size)
        if len(raw) < hs.size:
            raise DatasetError(f"{path}: truncated header")
        magic, version, T, N, D_in, G_cls, A_cls = hs.unpack(raw)
        if magic != DATASET_MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        sc = sidecar["scene"]
        cfg = GeneratorConfig(T=T, N=N, D_in=D_in, G_cls=G_cls, A_cls=A_cls,
                              noise_sigma=sidecar["config"]["noise_sigma"],
                              task_family=sidecar["config"]["task_family"],
                              seed=sidecar["config"]["seed"])
        n_clips = sidecar["n_clips"]
        seeds = sidecar["clip_seeds"]
        if len(seeds) != n_clips:
            raise DatasetError(f"{sidecar_path}: {len(seeds)} seeds for {n_clips} clips")
        samples = []
        for k in range(n_clips):
            what = f"clip {k}"
            ind = np.frombuffer(_read_exact(fh, 4 * T * N * D_in, path, what),
                                dtype="<f4").reshape(T, N, D_in)
            scene_bytes = _read_exact(fh, 4 * T * sc["channels"] * sc["height"] * sc["width"], path, what)
            scene = np.frombuffer(scene_bytes, dtype="<f4").reshape(
                T, sc["channels"], sc["height"], sc["width"])
            boxes = np.frombuffer(_read_exact(fh, 4 * T * N * 4, path, what),
                                  dtype="<f4").reshape(T, N, 4)
            (y_g,) = struct.unpack("<H", _read_exact(fh, 2, path, what))
            y_a = np.frombuffer(_read_exact(fh, 2 * N, path, what), dtype="<u2")
            samples.append(SyntheticSample(
                individuals=ind.astype(np.float64), scene=scene.astype(np.float64),
                boxes=boxes.astype(np.float64), y_g=int(y_g),
                y_a=y_a.astype(np.int64), seed=int(seeds[k])))
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after {n_clips} clips")
    return cfg, samples

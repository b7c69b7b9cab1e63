"""Synthetic driving scenes from a particle kinematic model.

The ego drives along a lane centreline at constant speed.  Yaw rate is
``speed * curvature``; a change of curvature is blended linearly over
``blend_time`` seconds starting at the present instant, which falls
between the last history sample and the first future sample so both
2-second analysis windows see pure constant-curvature arcs.

Each map vertex is observed with noise whose principal axes follow the
local tangent: ``obs = true + R(tangent) diag(a f, c f) z`` where
``f = 1 + occlusion_gain * occlusion`` and ``z`` is standard normal.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidSpec, IoFailure
from .kinematics import N_BINS, Trajectory, bin_delta_theta, compute_delta_theta

SCHEMA_VERSION = "1.0"
KINDS = ("straight", "steady_turn", "straight_to_turn", "turn_to_straight", "lane_change")
CLASSES = ("divider", "boundary", "crossing")
MAX_YAW_RATE = 1.0  # rad/s
DT = 0.5
N_HISTORY = 5  # -2.0 s .. 0.0 s
N_FUTURE = 6  # 0.5 s .. 3.0 s
CONTEXT_WIDTH = 7  # distance, occlusion, 3 class one-hot, tangent (2)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    speed: float
    curvature_past: float = 0.0
    curvature_future: float = 0.0
    noise_along: float = 0.5
    noise_cross: float = 0.05
    occlusion_profile: tuple[float, ...] | None = None
    seed: int = 0
    occlusion_gain: float = 2.0
    lane_half_width: float = 1.75
    vertices_per_element: int = 20
    blend_time: float = 0.5
    map_t_start: float = -2.5
    map_t_end: float = 4.5
    random_pose: bool = True
    noise_corr_length: float = 0.0  # vertices; 0 -> independent draws per vertex
    occlusion_floor: float = 0.2  # background occlusion is uniform on [0, floor]
    occlusion_bump_prob: float = 0.6

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown scenario kind {self.kind!r}")
        if not self.speed > 0:
            raise InvalidSpec(f"speed must be positive, got {self.speed}")
        if self.noise_along < 0 or self.noise_cross < 0:
            raise InvalidSpec("noise scales must be non-negative")
        for k in (self.curvature_past, self.curvature_future):
            if abs(k) * self.speed > MAX_YAW_RATE + 1e-12:
                raise InvalidSpec(f"yaw rate |{k}|*{self.speed} exceeds {MAX_YAW_RATE} rad/s")
        if self.vertices_per_element < 2:
            raise InvalidSpec("elements need at least two vertices")
        if self.occlusion_profile is not None:
            occ = np.asarray(self.occlusion_profile, float)
            if occ.shape != (3 * self.vertices_per_element,) or np.any((occ < 0) | (occ > 1)):
                raise InvalidSpec("occlusion profile must hold one value in [0,1] per vertex")
        if self.blend_time < 0:
            raise InvalidSpec("blend time must be non-negative")


@dataclass
class MapElementData:
    cls: str
    true_pts: np.ndarray  # (n, 2)
    observed_xy: np.ndarray  # (n, 2)
    context: np.ndarray  # (n, CONTEXT_WIDTH)
    true_cov: np.ndarray  # (n, 3) sigma1, sigma2, rho

    @property
    def tangent(self) -> np.ndarray:
        return self.context[:, 5:7]

    @property
    def occlusion(self) -> np.ndarray:
        return self.context[:, 1]


@dataclass
class Scene:
    id: str
    dt: float
    history: np.ndarray
    future_gt: np.ndarray
    elements: list[MapElementData]
    delta_theta_gt: float
    meta: dict = field(default_factory=dict)

    @property
    def bin(self) -> int:
        return bin_delta_theta(self.delta_theta_gt)

    def vertices(self):
        """Stacked ``(observed, true, context, true_cov)`` over all elements."""
        return (np.concatenate([e.observed_xy for e in self.elements]),
                np.concatenate([e.true_pts for e in self.elements]),
                np.concatenate([e.context for e in self.elements]),
                np.concatenate([e.true_cov for e in self.elements]))

    def true_cov_matrices(self) -> np.ndarray:
        m = np.concatenate([e.true_cov for e in self.elements])
        out = np.empty((len(m), 2, 2))
        out[:, 0, 0] = m[:, 0] ** 2
        out[:, 1, 1] = m[:, 1] ** 2
        out[:, 0, 1] = out[:, 1, 0] = m[:, 2] * m[:, 0] * m[:, 1]
        return out

    def to_json(self) -> dict:
        els = []
        for e in self.elements:
            obs = [{"xy": xy.tolist(), "distance": float(c[0]), "occlusion": float(c[1]),
                    "class_onehot": c[2:5].tolist(), "tangent": c[5:7].tolist()}
                   for xy, c in zip(e.observed_xy, e.context)]
            els.append({"class": e.cls, "true_pts": e.true_pts.tolist(), "observed": obs,
                        "true_cov": e.true_cov.tolist()})
        return {"schema_version": SCHEMA_VERSION, "id": self.id, "dt": self.dt,
                "history": self.history.tolist(), "future_gt": self.future_gt.tolist(),
                "map": {"elements": els}, "delta_theta_gt": self.delta_theta_gt, "meta": self.meta}

    @classmethod
    def from_json(cls, doc: dict) -> "Scene":
        els = []
        for e in doc["map"]["elements"]:
            obs = e["observed"]
            ctx = np.array([[o["distance"], o["occlusion"], *o["class_onehot"], *o["tangent"]] for o in obs])
            els.append(MapElementData(e["class"], np.array(e["true_pts"], float),
                                      np.array([o["xy"] for o in obs], float), ctx,
                                      np.array(e["true_cov"], float)))
        return cls(doc["id"], float(doc["dt"]), np.array(doc["history"], float),
                   np.array(doc["future_gt"], float), els, float(doc["delta_theta_gt"]),
                   doc.get("meta", {}))


# ---------------------------------------------------------------------------
# Path integration


def _chord(h0, omega, tau, speed):
    # Exact displacement along a constant-yaw-rate arc; stable as omega -> 0.
    half = 0.5 * omega * tau
    s = np.sinc(half / np.pi)
    return speed * tau * s * np.cos(h0 + half), speed * tau * s * np.sin(h0 + half)


def ego_path(times, speed, omega_past, omega_future, blend_time=0.5):
    """Positions ``(N, 2)`` and headings ``(N,)`` with pose zero at ``t = 0``."""
    times = np.asarray(times, dtype=np.float64)
    pos = np.zeros((len(times), 2))
    head = np.zeros(len(times))
    b = blend_time
    dw = omega_future - omega_past

    def heading_blend(t):
        return omega_past * t + (dw * t * t / (2 * b) if b > 0 else 0.0)

    def blend_disp(t):
        if t <= 0:
            return 0.0, 0.0
        u = 0.5 * t * (_GL_NODES + 1.0)
        w = 0.5 * t * _GL_WEIGHTS
        hb = heading_blend(u)
        return speed * float(np.sum(w * np.cos(hb))), speed * float(np.sum(w * np.sin(hb)))

    hb_end = heading_blend(b) if b > 0 else 0.0
    xb, yb = blend_disp(b)
    for i, t in enumerate(times):
        if t <= 0:
            dx, dy = _chord(0.0, omega_past, t, speed)
            pos[i] = dx, dy
            head[i] = omega_past * t
        elif t <= b:
            pos[i] = blend_disp(t)
            head[i] = heading_blend(t)
        else:
            dx, dy = _chord(hb_end, omega_future, t - b, speed)
            pos[i] = xb + dx, yb + dy
            head[i] = hb_end + omega_future * (t - b)
    return pos, head


def _rot(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def correlated_normals(rng, n_el, n, length):
    """``(n_el * n, 2)`` draws, each marginally standard normal.

    Along each element the draws are correlated with a squared-exponential
    kernel of ``length`` vertices, so an occluded stretch is displaced
    coherently instead of jittered vertex by vertex.
    """
    z = rng.standard_normal((n_el, n, 2))
    if length > 0:
        idx = np.arange(n)
        kern = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / length) ** 2) + 1e-9 * np.eye(n)
        kern /= 1.0 + 1e-9
        L = np.linalg.cholesky(kern)
        z = np.einsum("ij,ejk->eik", L, z)
    return z.reshape(n_el * n, 2)


def _occlusion(rng, n_el, n, floor=0.2, bump_prob=0.6):
    occ = rng.uniform(0.0, floor, size=(n_el, n))
    idx = np.arange(n)
    for e in range(n_el):
        if rng.random() < bump_prob:
            c = rng.uniform(0, n - 1)
            w = rng.uniform(1.5, 4.0)
            occ[e] += rng.uniform(0.6, 1.0) * np.exp(-0.5 * ((idx - c) / w) ** 2)
    return np.clip(occ, 0.0, 1.0).ravel()


def generate_scene(spec: ScenarioSpec, scene_id: str = "scene") -> Scene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w_past = spec.speed * spec.curvature_past
    w_fut = spec.speed * spec.curvature_future
    if spec.random_pose:
        phi0 = rng.uniform(-math.pi, math.pi)
        origin = rng.uniform(-50.0, 50.0, size=2)
    else:
        phi0, origin = 0.0, np.zeros(2)
    R = _rot(phi0)

    def to_world(p):
        return p @ R.T + origin

    t_hist = DT * np.arange(-(N_HISTORY - 1), 1)
    t_fut = DT * np.arange(1, N_FUTURE + 1)
    hist, _ = ego_path(t_hist, spec.speed, w_past, w_fut, spec.blend_time)
    fut, _ = ego_path(t_fut, spec.speed, w_past, w_fut, spec.blend_time)

    n = spec.vertices_per_element
    t_map = np.linspace(spec.map_t_start, spec.map_t_end, n)
    centre, heading = ego_path(t_map, spec.speed, w_past, w_fut, spec.blend_time)
    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=1)
    tangent_local = np.stack([np.cos(heading), np.sin(heading)], axis=1)
    offsets = [("divider", 0.0), ("boundary", spec.lane_half_width), ("boundary", -spec.lane_half_width)]

    occ_all = (np.asarray(spec.occlusion_profile, float) if spec.occlusion_profile is not None
               else _occlusion(rng, len(offsets), n, spec.occlusion_floor, spec.occlusion_bump_prob))
    z_all = correlated_normals(rng, len(offsets), n, spec.noise_corr_length)
    elements = []
    for j, (cls, off) in enumerate(offsets):
        pts = to_world(centre + off * normal)
        tang = tangent_local @ R.T
        occ = occ_all[j * n:(j + 1) * n]
        f = 1.0 + spec.occlusion_gain * occ
        a, c = spec.noise_along * f, spec.noise_cross * f
        z = z_all[j * n:(j + 1) * n]
        # noise = a z0 * tangent + c z1 * normal
        nrm = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        obs = pts + (a * z[:, 0])[:, None] * tang + (c * z[:, 1])[:, None] * nrm
        sxx = a * a * tang[:, 0] ** 2 + c * c * nrm[:, 0] ** 2
        syy = a * a * tang[:, 1] ** 2 + c * c * nrm[:, 1] ** 2
        sxy = a * a * tang[:, 0] * tang[:, 1] + c * c * nrm[:, 0] * nrm[:, 1]
        s1, s2 = np.sqrt(sxx), np.sqrt(syy)
        denom = s1 * s2
        rho = np.divide(sxy, denom, out=np.zeros_like(sxy), where=denom > 0)
        ego_now = to_world(np.zeros((1, 2)))[0]
        ctx = np.zeros((n, CONTEXT_WIDTH))
        ctx[:, 0] = np.linalg.norm(pts - ego_now, axis=1)
        ctx[:, 1] = occ
        ctx[:, 2 + CLASSES.index(cls)] = 1.0
        ctx[:, 5:7] = tang
        elements.append(MapElementData(cls, pts, obs, ctx, np.stack([s1, s2, rho], axis=1)))

    history, future = to_world(hist), to_world(fut)
    summary = compute_delta_theta(Trajectory(history, DT), Trajectory(future, DT))
    meta = {"kind": spec.kind, "speed": spec.speed, "curvature_past": spec.curvature_past,
            "curvature_future": spec.curvature_future, "seed": spec.seed,
            "noise_along": spec.noise_along, "noise_cross": spec.noise_cross,
            "occlusion_gain": spec.occlusion_gain}
    return Scene(scene_id, DT, history, future, elements, summary.delta_theta, meta)


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class BenchmarkConfig:
    master_seed: int = 0
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    bin_quotas: tuple[float, ...] = (52.0, 28.0, 12.0, 8.0)
    speed_range: tuple[float, float] = (3.0, 8.0)
    noise_along: float = 0.5
    noise_cross: float = 0.05
    occlusion_gain: float = 2.0
    vertices_per_element: int = 20
    bin0_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)  # straight, steady turn, mild change
    noise_corr_length: float = 0.0
    occlusion_floor: float = 0.2
    occlusion_bump_prob: float = 0.6

    def validate(self):
        q = np.asarray(self.bin_quotas, float)
        if q.shape != (N_BINS,) or np.any(q < 0) or abs(q.sum() - 100.0) > 1e-9:
            raise InvalidSpec(f"bin quotas must be {N_BINS} non-negative percentages summing to 100")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test == 0:
            raise InvalidSpec("split sizes must be non-negative and not all zero")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise InvalidSpec(f"bad speed range {self.speed_range}")

    @property
    def splits(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def quota_counts(n: int, quotas: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` scenes to percentage quotas."""
    raw = np.asarray(quotas, float) * n / 100.0
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts.tolist()


def sample_spec(bin_index: int, rng: np.random.Generator, cfg: BenchmarkConfig, seed: int) -> ScenarioSpec:
    """A scenario whose heading change falls in ``bin_index``."""
    v = rng.uniform(*cfg.speed_range)
    sign = rng.choice([-1.0, 1.0])
    if bin_index == 0:
        kind = rng.choice(["straight", "steady_turn", "mild"], p=cfg.bin0_mix)
        if kind == "straight":
            w_p = w_f = 0.0
        elif kind == "steady_turn":
            w_p = w_f = sign * rng.uniform(0.05, 0.6)
        else:
            dw = rng.uniform(0.05, 0.49)
            if rng.random() < 0.5:
                kind, w_p, w_f = "straight_to_turn", 0.0, sign * dw
            else:
                kind, w_p, w_f = "turn_to_straight", sign * dw, 0.0
    else:
        lo, hi = (bin_index + 0.02) / 2.0, (min(bin_index + 0.98, 3.8)) / 2.0
        dw = rng.uniform(lo, hi)
        if bin_index == 1:
            kind = rng.choice(["straight_to_turn", "turn_to_straight", "lane_change"])
        else:
            kind = "lane_change"
        if kind == "straight_to_turn":
            w_p, w_f = 0.0, sign * dw
        elif kind == "turn_to_straight":
            w_p, w_f = sign * dw, 0.0
        else:
            a_lo, a_hi = max(0.05, dw - 0.95), min(0.95, dw - 0.05)
            a = rng.uniform(a_lo, a_hi)
            w_p, w_f = sign * a, -sign * (dw - a)
    return ScenarioSpec(kind=str(kind), speed=float(v), curvature_past=float(w_p / v),
                        curvature_future=float(w_f / v), noise_along=cfg.noise_along,
                        noise_cross=cfg.noise_cross, seed=seed, occlusion_gain=cfg.occlusion_gain,
                        vertices_per_element=cfg.vertices_per_element,
                        noise_corr_length=cfg.noise_corr_length, occlusion_floor=cfg.occlusion_floor,
                        occlusion_bump_prob=cfg.occlusion_bump_prob)


def benchmark_scenes(cfg: BenchmarkConfig):
    """Yield ``(split, Scene)`` for the whole benchmark, deterministically."""
    cfg.validate()
    offset = 0
    for s_idx, (split, n) in enumerate(cfg.splits.items()):
        counts = quota_counts(n, cfg.bin_quotas)
        bins = np.repeat(np.arange(N_BINS), counts)
        bins = np.random.default_rng([cfg.master_seed, s_idx]).permutation(bins)
        for i, b in enumerate(bins):
            seed = cfg.master_seed + offset + i
            rng = np.random.default_rng([seed, 7919])
            spec = sample_spec(int(b), rng, cfg, seed)
            scene = generate_scene(spec, f"{split}-{i:05d}")
            scene.meta["bin"] = int(b)
            yield split, scene
        offset += n


def generate_benchmark(cfg: BenchmarkConfig, out_dir) -> dict:
    """Write one JSON file per scene under ``out_dir/<split>/`` plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        hist = {s: [0] * N_BINS for s in cfg.splits}
        ids = {s: [] for s in cfg.splits}
        bins = {s: [] for s in cfg.splits}
        for split, scene in benchmark_scenes(cfg):
            d = out / split
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{scene.id}.json").write_text(json.dumps(scene.to_json(), sort_keys=True))
            hist[split][scene.bin] += 1
            ids[split].append(scene.id)
            bins[split].append(scene.bin)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "master_seed": cfg.master_seed,
            "config": _jsonable(asdict(cfg)),
            "splits": {s: {"n": len(ids[s]), "bin_counts": hist[s],
                           "bin_fractions": [c / max(len(ids[s]), 1) for c in hist[s]],
                           "scene_ids": ids[s], "scene_bins": bins[s]} for s in cfg.splits},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"writing benchmark to {out}: {exc}") from exc
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise IoFailure(f"no manifest at {path}")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[Scene]:
    manifest = load_manifest(root)
    base = Path(root) / split
    try:
        return [Scene.from_json(json.loads((base / f"{sid}.json").read_text()))
                for sid in manifest["splits"][split]["scene_ids"]]
    except (OSError, KeyError) as exc:
        raise IoFailure(f"reading split {split!r} from {root}: {exc}") from exc


def default_output_root() -> Path:
    return Path(os.environ.get("UNCGATE_OUT", "runs"))

"""Direct-lighting renderer for a normal-mapped plane at z = 0.

Each pixel shoots one ray through its center. The hit point and the ray
differentials define a footprint query on the normal map; materials then
integrate over that footprint analytically (P-NDF specular, aggregated
diffuse) or by sampling texture points inside it (naive normal-mapped
diffuse baseline).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import fields
from .hierarchy import DEFAULT_TAU, ClusterHierarchy, build_hierarchy, load_cache
from .imgio import ImageF32
from .kernels import GAUSSIAN, KINDS, FootprintQuery, kernel_sample
from .normal_field import NormalField, interpolate, unproject
from .pndf import ClampPolicy, FootprintNDF
from .shadow import (CORRELATED, SEPARABLE, GGXTable, diffuse_brdf, ggx_projected_area,
                     projected_area_ndf, smith_g, smith_lambda)

SPECULAR = "specular"
DIFFUSE = "diffuse"
NAIVE_DIFFUSE = "naive_diffuse"
STRATEGIES = ("light", "brdf", "mis")
AREA_MODES = ("analytic", "ggx", "none")
MIN_RADIUS = 1e-3


class SceneError(ValueError):
    pass


def _vec(v, n=3):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != n:
        raise SceneError(f"expected {n} components, got {v.tolist()}")
    return v


def _rgb(v):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return np.repeat(v, 3) if v.size == 1 else _vec(v)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    fov: float = 30.0
    width: int = 64
    height: int = 64
    up: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def basis(self):
        f = _normalize(self.look_at - self.position)
        right = np.cross(f, self.up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(f, np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 0.0, 1.0]))
        right = _normalize(right)
        up = np.cross(right, f)
        return f, right, up


@dataclass
class Light:
    kind: str = "directional"
    direction: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    position: np.ndarray | None = None
    radiance: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    angle: float = 0.0  # cone half-angle in degrees; 0 is a delta light

    @property
    def is_delta(self) -> bool:
        return self.kind == "point" or self.angle <= 0.0

    @property
    def cos_max(self) -> float:
        return math.cos(math.radians(self.angle))

    @property
    def cone_pdf(self) -> float:
        return 1.0 / (2.0 * math.pi * (1.0 - self.cos_max))


@dataclass
class Material:
    kind: str = SPECULAR
    f0: float = 1.0
    smith: str = SEPARABLE
    area_mode: str = "analytic"
    albedo: np.ndarray = dc_field(default_factory=lambda: np.full(3, 0.8))


@dataclass
class Scene:
    camera: Camera
    light: Light
    material: Material
    texels_per_unit: float = 256.0
    footprint_scale: float = 1.0
    kernel: str = GAUSSIAN
    spp: int = 1
    strategy: str = "mis"
    seed: int = 0
    epsilon: float = 1e-6
    tau: float = DEFAULT_TAU
    use_hierarchy: bool = True
    exposure: float = 1.0
    map: object = None
    cache: str | None = None
    ggx_table: str | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "Scene":
        try:
            cam = d["camera"]
            camera = Camera(_vec(cam["position"]), _vec(cam["look_at"]), float(cam.get("fov", 30.0)),
                            int(cam.get("width", 64)), int(cam.get("height", 64)),
                            _vec(cam.get("up", [0.0, 1.0, 0.0])))
            li = d.get("light", {})
            light = Light(li.get("type", "directional"),
                          _normalize(_vec(li.get("direction", [0.0, 0.0, 1.0]))),
                          None if li.get("position") is None else _vec(li["position"]),
                          _rgb(li.get("radiance", li.get("intensity", 1.0))),
                          float(li.get("angle", 0.0)))
            ma = d.get("material", {})
            material = Material(ma.get("type", SPECULAR), float(ma.get("f0", 1.0)),
                                ma.get("smith", SEPARABLE), ma.get("area_mode", "analytic"),
                                _rgb(ma.get("albedo", 0.8)))
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed scene: {exc}") from exc
        hier = d.get("hierarchy", {})
        scene = cls(camera, light, material,
                    texels_per_unit=float(d.get("plane", {}).get("texels_per_unit", 256.0)),
                    footprint_scale=float(d.get("footprint_scale", 1.0)),
                    kernel=d.get("kernel", GAUSSIAN), spp=int(d.get("spp", 1)),
                    strategy=d.get("strategy", "mis"), seed=int(d.get("seed", 0)),
                    epsilon=float(d.get("epsilon", 1e-6)),
                    tau=float(hier.get("tau", DEFAULT_TAU)),
                    use_hierarchy=bool(hier.get("enabled", True)),
                    exposure=float(d.get("exposure", 1.0)), map=d.get("map"),
                    cache=hier.get("cache"), ggx_table=d.get("ggx_table"))
        if base is not None:
            if isinstance(scene.map, str):
                scene.map = str(base / scene.map)
            if scene.cache:
                scene.cache = str(base / scene.cache)
            if scene.ggx_table:
                scene.ggx_table = str(base / scene.ggx_table)
        scene.validate()
        return scene

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def validate(self) -> None:
        if self.camera.position[2] <= 0:
            raise SceneError("camera must be above the plane")
        if self.light.kind not in ("directional", "point"):
            raise SceneError(f"unknown light type {self.light.kind!r}")
        if self.light.kind == "point" and self.light.position is None:
            raise SceneError("point lights need a position")
        if self.material.kind not in (SPECULAR, DIFFUSE, NAIVE_DIFFUSE):
            raise SceneError(f"unknown material {self.material.kind!r}")
        if self.material.smith not in (SEPARABLE, CORRELATED):
            raise SceneError(f"unknown Smith variant {self.material.smith!r}")
        if self.material.area_mode not in AREA_MODES:
            raise SceneError(f"unknown area mode {self.material.area_mode!r}")
        if self.strategy not in STRATEGIES:
            raise SceneError(f"unknown strategy {self.strategy!r}")
        if self.kernel not in KINDS:
            raise SceneError(f"unknown kernel {self.kernel!r}")
        if self.spp < 1:
            raise SceneError("spp must be >= 1")

    def load_field(self) -> NormalField:
        if isinstance(self.map, dict):
            desc = self.map
            return fields.make(desc.get("procedural", "isotropic"), int(desc.get("size", 256)),
                               int(desc.get("seed", 7)))
        if isinstance(self.map, str):
            return NormalField.load(self.map)
        raise SceneError("scene has no normal map")


# --------------------------------------------------------------------------
# Rays and footprints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PixelRays:
    """Per-pixel hit data, arrays shaped (H, W, ...)."""

    hit: np.ndarray
    uv: np.ndarray
    radius: np.ndarray
    omega_o: np.ndarray
    valid: np.ndarray


def trace_pixels(scene: Scene) -> PixelRays:
    """Center rays of every pixel, their plane hits and ray-differential footprints."""
    cam = scene.camera
    f, right, up = cam.basis()
    tan = math.tan(math.radians(cam.fov) / 2.0)
    aspect = cam.width / cam.height
    px = (2.0 * (np.arange(cam.width) + 0.5) / cam.width - 1.0) * tan * aspect
    py = (1.0 - 2.0 * (np.arange(cam.height) + 0.5) / cam.height) * tan
    d = f + px[None, :, None] * right + py[:, None, None] * up
    ddx = (2.0 / cam.width) * tan * aspect * right
    ddy = -(2.0 / cam.height) * tan * up
    o = cam.position
    dz = d[..., 2]
    valid = dz < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(valid, -o[2] / dz, 0.0)
        hit = o + t[..., None] * d
        dpdx = t[..., None] * (ddx - d * (ddx[2] / dz)[..., None])
        dpdy = t[..., None] * (ddy - d * (ddy[2] / dz)[..., None])
    tpu = scene.texels_per_unit
    uv = hit[..., :2] * tpu
    radius = 0.5 * scene.footprint_scale * tpu * (np.abs(dpdx[..., :2]) + np.abs(dpdy[..., :2]))
    radius = np.maximum(np.nan_to_num(radius), MIN_RADIUS)
    omega_o = _normalize(-d)
    return PixelRays(hit, uv, radius, omega_o, valid)


def pixel_footprint(scene: Scene, pixel) -> FootprintQuery | None:
    """Footprint query of pixel ``(px, py)``; None when its ray misses the plane."""
    rays = trace_pixels(scene)
    px, py = pixel
    if not rays.valid[py, px]:
        return None
    return FootprintQuery(tuple(rays.uv[py, px]), tuple(rays.radius[py, px]), scene.kernel)


# --------------------------------------------------------------------------
# Shading
# --------------------------------------------------------------------------

def schlick(f0: float, cos_theta):
    c = np.clip(cos_theta, 0.0, 1.0)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def _frame(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = _normalize(np.cross(n, a))
    return t, np.cross(n, t)


def sample_cone(light: Light, rng, n: int) -> np.ndarray:
    xi = rng.random((n, 2))
    cos_t = 1.0 - xi[:, 0] * (1.0 - light.cos_max)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t ** 2))
    phi = 2.0 * np.pi * xi[:, 1]
    t, b = _frame(light.direction)
    return (sin_t * np.cos(phi))[:, None] * t + (sin_t * np.sin(phi))[:, None] * b + cos_t[:, None] * light.direction


def in_cone(light: Light, w) -> np.ndarray:
    return (w @ light.direction) >= light.cos_max


def light_directions(light: Light, hit: np.ndarray, rng, n: int):
    """Incident directions, radiance weights (already divided by pdf) and pdfs."""
    if light.kind == "point":
        d = light.position - hit
        dist2 = float(d @ d)
        w = np.repeat(_normalize(d)[None], n, axis=0)
        return w, np.full(n, 1.0 / dist2), np.full(n, np.inf)
    if light.is_delta:
        return np.repeat(light.direction[None], n, axis=0), np.ones(n), np.full(n, np.inf)
    w = sample_cone(light, rng, n)
    return w, np.full(n, 1.0 / light.cone_pdf), np.full(n, light.cone_pdf)


class PixelShader:
    """Shading of one pixel footprint; holds the P-NDF evaluator and cached G terms."""

    def __init__(self, scene: Scene, field: NormalField, hier: ClusterHierarchy | None,
                 table: GGXTable | None, q: FootprintQuery, omega_o: np.ndarray):
        self.scene = scene
        self.q = q
        self.omega_o = omega_o
        self.table = table
        self.ndf = FootprintNDF(field, q, hier if scene.use_hierarchy else None, scene.tau,
                                ClampPolicy(scene.epsilon))
        self._lambda_o = None

    def area(self, w) -> np.ndarray:
        mode = self.scene.material.area_mode
        w = np.atleast_2d(w)
        if mode == "ggx":
            if self.table is None:
                raise SceneError("area mode 'ggx' needs a GGX table")
            Omega = self.table.lookup(self.q.x, self.q.r)
            return ggx_projected_area(Omega, w)
        return np.atleast_1d(projected_area_ndf(self.ndf, w))

    def lam(self, w) -> np.ndarray:
        if self.scene.material.area_mode == "none":
            return np.zeros(len(np.atleast_2d(w)))
        w = np.atleast_2d(w)
        return smith_lambda(self.area(w), w[:, 2])

    @property
    def lambda_o(self) -> float:
        if self._lambda_o is None:
            self._lambda_o = float(self.lam(self.omega_o)[0])
        return self._lambda_o

    def specular_f(self, wi: np.ndarray):
        """BRDF times cosine, f(wi, wo) * wi_z, and the BRDF-sampling pdf of wi."""
        wo = self.omega_o
        up = wi[:, 2] > 0
        h = _normalize(wi + wo)
        m = h[:, :2]
        dens, _, _ = self.ndf.evaluate(np.where(up[:, None], m, 0.0))
        mat = self.scene.material
        F = schlick(mat.f0, np.sum(wi * h, axis=-1))
        lam_i = np.zeros(len(wi))
        if np.any(up):
            lam_i[up] = self.lam(wi[up])
        G = np.array([smith_g(wi[k], wo, h[k], lam_i[k], self.lambda_o, mat.smith)
                      for k in range(len(wi))])
        val = F * G * dens / (4.0 * wo[2])
        pdf = dens * h[:, 2] / (4.0 * np.abs(np.sum(wo * h, axis=-1)))
        return np.where(up, val, 0.0), np.where(up, pdf, 0.0)

    def sample_specular(self, rng, n: int):
        """Reflect wo about P-NDF-sampled normals: directions and f * cos / pdf."""
        wo = self.omega_o
        m = self.ndf.sample(rng, n)
        h = unproject(m / np.maximum(1.0, np.hypot(m[:, 0], m[:, 1]))[:, None])
        cos_oh = np.sum(wo * h, axis=-1)
        wi = 2.0 * cos_oh[:, None] * h - wo
        up = (wi[:, 2] > 0) & (cos_oh > 0)
        mat = self.scene.material
        lam_i = np.zeros(n)
        if np.any(up):
            lam_i[up] = self.lam(wi[up])
        G = np.array([smith_g(wi[k], wo, h[k], lam_i[k], self.lambda_o, mat.smith) if up[k] else 0.0
                      for k in range(n)])
        F = schlick(mat.f0, cos_oh)
        weight = F * G * np.abs(cos_oh) / (wo[2] * np.maximum(h[:, 2], 1e-12))
        return wi, np.where(up, weight, 0.0)

    def specular(self, hit, rng) -> float:
        sc = self.scene
        light = sc.light
        n = sc.spp
        if light.is_delta:
            wi, scale, _ = light_directions(light, hit, rng, 1)
            val, _ = self.specular_f(wi)
            return float(val[0] * scale[0])
        strategy = sc.strategy
        total = 0.0
        if strategy in ("light", "mis"):
            wi, scale, p_light = light_directions(light, hit, rng, n)
            val, p_brdf = self.specular_f(wi)
            w = 1.0 if strategy == "light" else p_light / (p_light + p_brdf)
            total += float(np.sum(val * scale * w))
        if strategy in ("brdf", "mis"):
            wi, weight = self.sample_specular(rng, n)
            hit_light = in_cone(light, wi)
            if strategy == "mis":
                _, p_brdf = self.specular_f(wi)
                with np.errstate(invalid="ignore", divide="ignore"):
                    mis = np.where(hit_light, p_brdf / (light.cone_pdf + p_brdf), 0.0)
                weight = weight * np.nan_to_num(mis)
            total += float(np.sum(np.where(hit_light, weight, 0.0)))
        return total / n

    def diffuse(self, hit, rng) -> float:
        light = self.scene.light
        n = 1 if light.is_delta else self.scene.spp
        wi, scale, _ = light_directions(light, hit, rng, n)
        up = wi[:, 2] > 0
        if not np.any(up):
            return 0.0
        P = self.area(wi[up]) if self.scene.material.area_mode != "none" else wi[up, 2]
        val = diffuse_brdf(P, wi[up, 2]) * wi[up, 2]
        return float(np.sum(val * scale[up]) / n)


def naive_diffuse(field: NormalField, q: FootprintQuery, light: Light, hit, rng, n: int) -> float:
    """Normal-mapped Lambertian, kernel-sampled texture points, with the projection factor."""
    u = kernel_sample(q, rng, n)
    nrm = unproject(interpolate(field, u))
    wi, scale, _ = light_directions(light, hit, rng, n)
    cos = np.maximum(np.sum(nrm * wi, axis=-1), 0.0)
    return float(np.mean(cos / (math.pi * np.maximum(nrm[:, 2], 1e-12)) * scale))


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------

def thread_count(requested: int | None = None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("GLINT_THREADS")
    return max(1, int(env)) if env else 1


def pixel_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def render(scene: Scene, field: NormalField | None = None, hier: ClusterHierarchy | None = None,
           table: GGXTable | None = None, threads: int | None = None) -> ImageF32:
    """Render the scene to a linear RGB image; deterministic for a fixed seed."""
    field = field if field is not None else scene.load_field()
    mat = scene.material
    if mat.kind != NAIVE_DIFFUSE and scene.use_hierarchy and hier is None:
        hier = load_cache(scene.cache, field) if scene.cache else build_hierarchy(field, scene.epsilon)
    if mat.kind != NAIVE_DIFFUSE and mat.area_mode == "ggx" and table is None:
        table = GGXTable.load(scene.ggx_table) if scene.ggx_table else GGXTable.build(field)
    rays = trace_pixels(scene)
    h, w = rays.valid.shape
    out = np.zeros((h, w))

    def shade(index: int) -> float:
        py, px = divmod(index, w)
        if not rays.valid[py, px]:
            return 0.0
        rng = pixel_rng(scene.seed, index)
        q = FootprintQuery(tuple(rays.uv[py, px]), tuple(rays.radius[py, px]), scene.kernel)
        hit = rays.hit[py, px]
        if mat.kind == NAIVE_DIFFUSE:
            return naive_diffuse(field, q, scene.light, hit, rng, scene.spp)
        shader = PixelShader(scene, field, hier, table, q, rays.omega_o[py, px])
        if mat.kind == DIFFUSE:
            return shader.diffuse(hit, rng)
        return shader.specular(hit, rng)

    indices = range(h * w)
    n = thread_count(threads)
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            values = list(pool.map(shade, indices, chunksize=64))
    else:
        values = [shade(i) for i in indices]
    out[:] = np.asarray(values).reshape(h, w)
    color = scene.light.radiance * (mat.albedo if mat.kind != SPECULAR else 1.0)
    return ImageF32((out[..., None] * color).astype(np.float32))

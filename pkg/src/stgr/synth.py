"""Phantom scenes, the scene file schema, and dataset manifests.

A phantom scene stands in for one radiograph + instruction: elliptical
lesions, elongated vessel/rib confounders that may cross them, a pool of
jittered and spurious candidate masks, node features drawn around class
prototypes, and attribute vectors drawn around text prototypes. Everything
is a pure function of ``(PhantomConfig, seed)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write
from .errors import ConfigError, GenerationError, ParseError, ShapeError, ValidationError
from .labels import label_candidates
from .masks import Mask, ellipse_mask, mask_area, masked_pool

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 128
    width: int = 128
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (6.0, 12.0)
    confounder_count: tuple[int, int] = (1, 2)
    confounder_length: tuple[float, float] = (22.0, 40.0)
    confounder_width: tuple[float, float] = (2.0, 4.0)
    overlap: float = 0.3
    duplicates: tuple[int, int] = (1, 3)
    jitter: float = 1.0
    spurious_rate: float = 0.2
    spurious_radius: tuple[float, float] = (3.0, 6.0)
    min_candidates: int = 4
    max_candidates: int = 12
    d_v: int = 64
    d_t: int = 32
    attributes: tuple[int, int] = (1, 4)
    rho: float = 0.5
    feature_noise: float = 0.6
    structure_noise: float = 0.3
    attribute_noise: float = 0.1
    prototype_seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("height", "width", "min_candidates", "max_candidates", "d_v", "d_t", "prototype_seed",
                     "max_retries"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"phantom.{name} must be an integer, got {v!r}")
        for name in ("lesion_count", "confounder_count", "duplicates", "attributes"):
            if not all(isinstance(v, (int, np.integer)) for v in getattr(self, name)):
                raise ConfigError(f"phantom.{name} bounds must be integers, got {getattr(self, name)!r}")
        for name in ("lesion_count", "lesion_radius", "confounder_count", "confounder_length",
                     "confounder_width", "duplicates", "spurious_radius", "attributes"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"phantom.{name}: need 0 <= lo <= hi, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        for name in ("overlap", "spurious_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"phantom.{name} must lie in [0, 1], got {v}")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"phantom.rho must lie in [-1, 1], got {self.rho}")
        if self.lesion_count[0] < 1:
            raise ConfigError("phantom.lesion_count must allow at least one lesion")
        if self.attributes[0] < 1:
            raise ConfigError("phantom.attributes must allow at least one attribute")
        if not 1 <= self.min_candidates <= self.max_candidates:
            raise ConfigError("phantom: need 1 <= min_candidates <= max_candidates")
        if self.height < 16 or self.width < 16:
            raise ConfigError("phantom grid must be at least 16x16")
        for name in ("jitter", "feature_noise", "structure_noise", "attribute_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"phantom.{name} must be non-negative")
        if self.d_v < 2 or self.d_t < 1:
            raise ConfigError("phantom: d_v >= 2 and d_t >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown phantom config key: {key!r}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Scene:
    scene_id: str
    height: int
    width: int
    candidates: list[Mask]
    features: np.ndarray
    attributes: np.ndarray
    gt: list[Mask]
    seed: int = 0
    guidance: np.ndarray | None = None
    labels: np.ndarray | None = None
    true_iou: np.ndarray | None = None
    # provenance of each candidate for diagnostics; not serialized
    sources: list[str] = field(default_factory=list, repr=False, compare=False)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def validate(self) -> "Scene":
        if not self.candidates:
            raise ValidationError(f"scene {self.scene_id}: no candidates")
        for i, m in enumerate(self.candidates):
            if m.shape != (self.height, self.width):
                raise ValidationError(f"scene {self.scene_id}: candidates[{i}] grid {m.shape} "
                                      f"!= {(self.height, self.width)}")
        for i, m in enumerate(self.gt):
            if m.shape != (self.height, self.width):
                raise ValidationError(f"scene {self.scene_id}: gt[{i}] grid mismatch")
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != len(self.candidates):
            raise ValidationError(f"scene {self.scene_id}: features shape {f.shape} "
                                  f"does not match {len(self.candidates)} candidates")
        if not np.all(np.isfinite(f)):
            raise ValidationError(f"scene {self.scene_id}: non-finite features")
        a = np.asarray(self.attributes, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or not np.all(np.isfinite(a)):
            raise ValidationError(f"scene {self.scene_id}: attributes must be a non-empty finite matrix")
        if self.guidance is not None:
            g = np.asarray(self.guidance, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] != f.shape[1]:
                raise ValidationError(f"scene {self.scene_id}: guidance must be [K x {f.shape[1]}]")
        for name in ("labels", "true_iou"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.candidates):
                raise ValidationError(f"scene {self.scene_id}: {name} length {len(v)} "
                                      f"!= {len(self.candidates)}")
        if self.labels is not None and not np.isin(self.labels, (0, 1)).all():
            raise ValidationError(f"scene {self.scene_id}: labels must be 0/1")
        return self

    def with_labels(self, match_threshold: float = 0.5) -> "Scene":
        """Copy with labels and true IoU derived from the ground truth."""
        labels, true_iou = label_candidates(self.candidates, self.gt, match_threshold)
        return dataclasses.replace(self, labels=labels, true_iou=true_iou)

    def permuted(self, order: Sequence[int]) -> "Scene":
        """Copy with candidates (and per-candidate fields) reordered."""
        order = list(order)
        pick = lambda v: None if v is None else np.asarray(v)[order]  # noqa: E731
        return Scene(
            scene_id=self.scene_id, height=self.height, width=self.width,
            candidates=[self.candidates[i] for i in order],
            features=np.asarray(self.features)[order], attributes=self.attributes,
            gt=list(self.gt), seed=self.seed, guidance=self.guidance,
            labels=pick(self.labels), true_iou=pick(self.true_iou),
            sources=[self.sources[i] for i in order] if self.sources else [],
        )

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "height": self.height,
            "width": self.width,
            "candidates": [{"rle": m.to_text()} for m in self.candidates],
            "features": np.asarray(self.features, dtype=np.float64).tolist(),
            "attributes": np.asarray(self.attributes, dtype=np.float64).tolist(),
        }
        if self.guidance is not None:
            d["guidance"] = np.asarray(self.guidance, dtype=np.float64).tolist()
        d["gt"] = [{"rle": m.to_text()} for m in self.gt]
        if self.labels is not None:
            d["labels"] = [int(v) for v in self.labels]
        if self.true_iou is not None:
            d["true_iou"] = [float(v) for v in self.true_iou]
        d["seed"] = int(self.seed)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        def need(key):
            if key not in d:
                raise ParseError("missing required field", field=key)
            return d[key]

        if not isinstance(d, dict):
            raise ParseError("scene document must be an object")
        version = need("schema_version")
        if version != SCHEMA_VERSION:
            raise ParseError(f"unsupported schema version {version!r}", field="schema_version")
        height, width = need("height"), need("width")
        if not isinstance(height, int) or not isinstance(width, int):
            raise ParseError("grid dims must be integers", field="height/width")

        def masks(key):
            items = need(key)
            if not isinstance(items, list):
                raise ParseError("expected a list", field=key)
            out = []
            for i, item in enumerate(items):
                if not isinstance(item, dict) or "rle" not in item:
                    raise ParseError("expected object with 'rle'", field=f"{key}[{i}]")
                try:
                    out.append(Mask.from_text(item["rle"]))
                except ParseError as exc:
                    raise ParseError(str(exc), field=f"{key}[{i}].rle") from None
            return out

        def matrix(key, value):
            try:
                arr = np.asarray(value, dtype=np.float64)
            except (TypeError, ValueError):
                raise ParseError("expected a numeric matrix", field=key) from None
            if arr.ndim != 2:
                raise ParseError(f"expected a 2-D array, got {arr.ndim}-D", field=key)
            return arr

        scene = cls(
            scene_id=str(need("scene_id")),
            height=height,
            width=width,
            candidates=masks("candidates"),
            features=matrix("features", need("features")),
            attributes=matrix("attributes", need("attributes")),
            gt=masks("gt"),
            seed=int(need("seed")),
            guidance=matrix("guidance", d["guidance"]) if d.get("guidance") is not None else None,
            labels=np.asarray(d["labels"], dtype=np.int64) if d.get("labels") is not None else None,
            true_iou=np.asarray(d["true_iou"], dtype=np.float64) if d.get("true_iou") is not None else None,
        )
        return scene.validate()


def save_scene(scene: Scene, path) -> Path:
    return atomic_write(path, scene.to_json())


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed scene file ({exc.msg} at char {exc.pos})") from None
    return Scene.from_dict(doc)


def import_external(path, match_threshold: float = 0.5) -> Scene:
    """Build a scene from an external candidate dump.

    The dump is a JSON object with ``height``, ``width``, ``candidates[].rle``,
    ``attributes``, ``gt[].rle`` and either per-candidate ``features`` or a
    ``feature_map`` (nested ``[H][W][d]`` list, or a path to a ``.npy`` file
    relative to the dump) from which features are mask-average pooled. Labels
    and true IoU are always recomputed.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed dump ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ParseError("dump must be an object")
    doc = dict(doc)
    doc.setdefault("schema_version", SCHEMA_VERSION)
    doc.setdefault("scene_id", path.stem)
    doc.setdefault("seed", 0)
    doc.pop("labels", None)
    doc.pop("true_iou", None)
    if "features" not in doc:
        fmap = doc.pop("feature_map", None)
        if fmap is None:
            raise ParseError("dump needs 'features' or 'feature_map'", field="features")
        if isinstance(fmap, str):
            fmap = np.load(path.parent / fmap)
        fmap = np.asarray(fmap, dtype=np.float64)
        cands = [Mask.from_text(c["rle"]) for c in doc.get("candidates", [])]
        try:
            doc["features"] = [masked_pool(fmap, m).tolist() for m in cands]
        except ShapeError as exc:
            raise ValidationError(str(exc)) from None
    else:
        doc.pop("feature_map", None)
    scene = Scene.from_dict(doc)
    return scene.with_labels(match_threshold).validate()


# -- generation ------------------------------------------------------------

def derive_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def prototypes(config: PhantomConfig) -> dict[str, np.ndarray]:
    """Class and text prototypes; fixed across scenes for a given ``prototype_seed``."""
    rng = np.random.default_rng([config.prototype_seed, 0xC1A55])
    d = config.d_v
    lesion = _unit(rng.standard_normal(d))
    ortho = rng.standard_normal(d)
    ortho = _unit(ortho - (ortho @ lesion) * lesion)
    rho = config.rho
    confounder = rho * lesion + np.sqrt(max(0.0, 1.0 - rho * rho)) * ortho
    spurious = rng.standard_normal(d)
    spurious = _unit(spurious - (spurious @ lesion) * lesion)
    text = np.stack([_unit(rng.standard_normal(config.d_t)) for _ in range(config.attributes[1])])
    return {"lesion": lesion, "confounder": confounder, "spurious": spurious, "text": text}


@dataclass
class _Structure:
    kind: str
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def mask(self, h, w) -> Mask:
        return ellipse_mask(h, w, self.cy, self.cx, self.ry, self.rx, self.angle)


def _place_lesions(cfg: PhantomConfig, rng) -> list[_Structure]:
    n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    out: list[_Structure] = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.lesion_radius)
            margin = r + 2
            if 2 * margin >= min(cfg.height, cfg.width):
                raise GenerationError("lesion radius too large for the grid")
            cy = rng.uniform(margin, cfg.height - margin)
            cx = rng.uniform(margin, cfg.width - margin)
            if all(np.hypot(cy - o.cy, cx - o.cx) > r + o.ry + 3 for o in out):
                out.append(_Structure("lesion", cy, cx, r, r * rng.uniform(0.8, 1.2), rng.uniform(0, np.pi)))
                break
        else:
            raise GenerationError(
                f"could not place {n} non-overlapping lesions in {cfg.max_retries} attempts")
    return out


def _place_confounders(cfg: PhantomConfig, rng, lesions: list[_Structure]) -> list[_Structure]:
    n = int(rng.integers(cfg.confounder_count[0], cfg.confounder_count[1] + 1))
    out = []
    h, w = cfg.height, cfg.width
    lesion_masks = [les.mask(h, w) for les in lesions]
    for _ in range(n):
        length = rng.uniform(*cfg.confounder_length)
        width = rng.uniform(*cfg.confounder_width)
        angle = rng.uniform(0, np.pi)
        if rng.random() < cfg.overlap:
            anchor = lesions[int(rng.integers(len(lesions)))]
            # higher intensity pulls the vessel axis closer to the lesion centre
            reach = (1.0 - cfg.overlap) * (anchor.ry + width)
            phi = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0, reach)
            out.append(_Structure("confounder", anchor.cy + dist * np.sin(phi),
                                  anchor.cx + dist * np.cos(phi), width, length, angle))
            continue
        for _attempt in range(cfg.max_retries):
            cy = rng.uniform(0.1 * h, 0.9 * h)
            cx = rng.uniform(0.1 * w, 0.9 * w)
            s = _Structure("confounder", cy, cx, width, length, angle)
            m = s.mask(h, w)
            if mask_area(m) > 0 and all((m & lm).is_empty() for lm in lesion_masks):
                out.append(s)
                break
        else:
            raise GenerationError(
                f"could not place a free confounder clear of lesions in {cfg.max_retries} attempts")
    return out


def _jittered(s: _Structure, cfg: PhantomConfig, rng) -> _Structure:
    j = cfg.jitter
    if j == 0:
        return s
    return _Structure(
        s.kind,
        s.cy + rng.uniform(-j, j),
        s.cx + rng.uniform(-j, j),
        max(1.5, s.ry + rng.uniform(-j, j)),
        max(1.5, s.rx + rng.uniform(-j, j)),
        s.angle,
    )


def _spurious(cfg: PhantomConfig, rng) -> _Structure:
    r = rng.uniform(*cfg.spurious_radius)
    return _Structure("spurious", rng.uniform(r, cfg.height - r), rng.uniform(r, cfg.width - r),
                      r, r * rng.uniform(0.7, 1.3), rng.uniform(0, np.pi))


def generate_scene(config: PhantomConfig, seed: int, scene_id: str | None = None,
                   match_threshold: float = 0.5) -> Scene:
    cfg = config
    rng = np.random.default_rng(int(seed))
    h, w = cfg.height, cfg.width
    protos = prototypes(cfg)

    lesions = _place_lesions(cfg, rng)
    confounders = _place_confounders(cfg, rng, lesions)

    # (structure index, shape) for every candidate; spurious blobs get their own index
    structures: list[_Structure] = lesions + confounders
    cand_src: list[int] = []
    cand_shapes: list[_Structure] = []
    for idx, s in enumerate(structures):
        for _ in range(int(rng.integers(cfg.duplicates[0], cfg.duplicates[1] + 1))):
            cand_src.append(idx)
            cand_shapes.append(_jittered(s, cfg, rng))
        if rng.random() < cfg.spurious_rate:
            structures.append(_spurious(cfg, rng))
            cand_src.append(len(structures) - 1)
            cand_shapes.append(structures[-1])
    while len(cand_shapes) < cfg.min_candidates:
        structures.append(_spurious(cfg, rng))
        cand_src.append(len(structures) - 1)
        cand_shapes.append(structures[-1])
    if len(cand_shapes) > cfg.max_candidates:
        keep = np.sort(rng.choice(len(cand_shapes), cfg.max_candidates, replace=False))
        cand_src = [cand_src[i] for i in keep]
        cand_shapes = [cand_shapes[i] for i in keep]
    order = rng.permutation(len(cand_shapes))
    cand_src = [cand_src[i] for i in order]
    cand_shapes = [cand_shapes[i] for i in order]

    d = cfg.d_v
    shared = {i: rng.standard_normal(d) * (cfg.structure_noise / np.sqrt(d))
              for i in range(len(structures))}
    candidates, feats, sources = [], [], []
    for src, shape in zip(cand_src, cand_shapes):
        m = shape.mask(h, w)
        if m.is_empty():
            raise GenerationError(f"candidate from {shape.kind} rasterized to an empty mask")
        candidates.append(m)
        kind = structures[src].kind
        sources.append(f"{kind}:{src}")
        noise = rng.standard_normal(d) * (cfg.feature_noise / np.sqrt(d))
        feats.append(protos[kind] + shared[src] + noise)

    k = int(rng.integers(cfg.attributes[0], cfg.attributes[1] + 1))
    attrs = protos["text"][:k] + rng.standard_normal((k, cfg.d_t)) * (cfg.attribute_noise / np.sqrt(cfg.d_t))

    scene = Scene(
        scene_id=scene_id or f"scene-{int(seed) & 0xFFFFFFFF:08x}",
        height=h,
        width=w,
        candidates=candidates,
        features=np.asarray(feats),
        attributes=attrs,
        gt=[les.mask(h, w) for les in lesions],
        seed=int(seed),
        sources=sources,
    )
    return scene.with_labels(match_threshold).validate()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_dataset(config: PhantomConfig, n_scenes: int, seed: int, out_dir,
                     match_threshold: float = 0.5) -> dict:
    """Write ``n_scenes`` scene files plus ``manifest.json`` under ``out_dir``."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        sid = f"scene_{i:05d}"
        scene = generate_scene(config, derive_seed(seed, i), scene_id=sid, match_threshold=match_threshold)
        rel = f"scenes/{sid}.json"
        blob = scene.to_json().encode()
        try:
            atomic_write(out_dir / rel, blob)
        except OSError as exc:
            raise OSError(f"{out_dir / rel}: {exc.strerror or exc}") from exc
        entries.append({"id": sid, "path": rel, "digest": digest_bytes(blob)})
    manifest = {"schema_version": SCHEMA_VERSION, "scenes": entries}
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(path, verify: bool = True) -> list[Scene]:
    """Load every scene listed in a manifest (file or containing directory)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: malformed manifest ({exc.msg})") from None
    if manifest.get("schema_version") != SCHEMA_VERSION or "scenes" not in manifest:
        raise ParseError(f"{manifest_path}: not a v{SCHEMA_VERSION} manifest")
    scenes = []
    for entry in manifest["scenes"]:
        p = manifest_path.parent / entry["path"]
        blob = p.read_bytes()
        if verify and digest_bytes(blob) != entry["digest"]:
            raise ValidationError(f"{p}: digest mismatch with manifest")
        try:
            scenes.append(Scene.from_dict(json.loads(blob)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{p}: malformed scene file ({exc.msg})") from None
    return scenes

"""On-disk multi-view datasets.

Layout::

    <root>/<category>/manifest.json
    <root>/<category>/<instance_id>/view_<k>.png

Every instance of a category is rendered from the same viewpoint list, so
view ``k`` of instance ``i`` and view ``k`` of instance ``j`` share a camera
pose exactly. Shape-swap supervision relies on this.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import IMAGE_SIZE, render, to_uint8
from .scene import CameraViewpoint, ObjectSpec, camera_radius, check_category, sample_object, sample_viewpoints

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class DatasetConfig:
    root: str
    category: str = "bottle"
    instances: int = 15
    views: int = 64
    seed: int = 0
    hemisphere: str = "upper"
    overwrite: bool = False
    # offset added to instance ids, so held-out sets can use disjoint ids/seeds
    first_instance: int = 0


class DatasetExists(FileExistsError):
    pass


def instance_rng(seed, category, instance_id):
    cat = ("bottle", "bowl", "can", "mug").index(category)
    return np.random.default_rng([int(seed), cat, int(instance_id)])


def make_instances(category, n, seed, first_instance=0):
    ids = range(first_instance, first_instance + n)
    return [sample_object(category, instance_rng(seed, category, i), instance_id=i) for i in ids]


def make_views(category, n, seed, hemisphere="upper"):
    rng = np.random.default_rng([int(seed), 7919])
    return sample_viewpoints(rng, n, camera_radius(category), hemisphere)


def build_manifest(cfg, specs, views):
    return {
        "schema_version": SCHEMA_VERSION,
        "category": cfg.category,
        "seed": cfg.seed,
        "radius": camera_radius(cfg.category),
        "hemisphere": cfg.hemisphere,
        "image_size": IMAGE_SIZE,
        # view k of every instance uses views[k]
        "pairing": "shared_view_list",
        "views": [[float(x) for x in vp.to_vector()] for vp in views],
        "instances": [s.to_dict() for s in specs],
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def generate_dataset(cfg):
    """Render every (instance, view) pair and write the manifest. Returns the manifest path."""
    check_category(cfg.category)
    root = Path(cfg.root)
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory {root.parent} does not exist")
    cat_dir = root / cfg.category
    if cat_dir.exists():
        if not cfg.overwrite:
            raise DatasetExists(f"{cat_dir} already exists; pass overwrite to replace it")
        shutil.rmtree(cat_dir)
    cat_dir.mkdir(parents=True)
    specs = make_instances(cfg.category, cfg.instances, cfg.seed, cfg.first_instance)
    views = make_views(cfg.category, cfg.views, cfg.seed, cfg.hemisphere)
    for spec in specs:
        inst_dir = cat_dir / str(spec.instance_id)
        inst_dir.mkdir()
        for k, vp in enumerate(views):
            Image.fromarray(to_uint8(render(spec, vp))).save(inst_dir / f"view_{k}.png")
        log.info("rendered instance %d (%d views)", spec.instance_id, len(views))
    manifest_path = cat_dir / "manifest.json"
    manifest = build_manifest(cfg, specs, views)
    manifest["config"] = {k: v for k, v in asdict(cfg).items() if k not in ("root", "overwrite")}
    write_manifest(manifest_path, manifest)
    return manifest_path


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE} RGB, got {arr.shape}")
    return arr


class MultiViewDataset:
    """A category directory loaded into memory.

    Works for generated datasets and for externally produced renders placed in
    the same layout with a manifest (``instances`` entries then only need an
    ``instance_id``).
    """

    def __init__(self, category_dir, dtype=np.float32):
        self.root = Path(category_dir)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {self.manifest.get('schema_version')}")
        self.category = self.manifest["category"]
        self.seed = self.manifest.get("seed")
        self.view_vectors = np.asarray(self.manifest["views"], dtype=np.float64)
        self.instance_ids = [int(d["instance_id"]) for d in self.manifest["instances"]]
        self.specs = [ObjectSpec.from_dict(d) if "profile" in d else None for d in self.manifest["instances"]]
        n_i, n_v = len(self.instance_ids), len(self.view_vectors)
        self.images = np.empty((n_i, n_v, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=dtype)
        for a, iid in enumerate(self.instance_ids):
            for k in range(n_v):
                self.images[a, k] = load_image(self.root / str(iid) / f"view_{k}.png")

    @classmethod
    def from_root(cls, root, category, **kw):
        return cls(Path(root) / category, **kw)

    @property
    def n_instances(self):
        return self.images.shape[0]

    @property
    def n_views(self):
        return self.images.shape[1]

    def viewpoint(self, k):
        return CameraViewpoint.from_vector(self.view_vectors[k])

    def subset(self, instance_indices):
        """Shallow view restricted to some instances (by position, not id)."""
        out = object.__new__(type(self))
        out.__dict__.update(self.__dict__)
        idx = list(instance_indices)
        out.images = self.images[idx]
        out.instance_ids = [self.instance_ids[i] for i in idx]
        out.specs = [self.specs[i] for i in idx]
        return out

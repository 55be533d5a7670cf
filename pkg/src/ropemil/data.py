"""Bag serialization, dataset manifests, synthetic spatial bags, results files.

On-disk layout per bag is a directory holding three files:

* ``meta.txt`` -- key = value descriptor: bag_id, n_patches, feature_dim,
  patch_size_px
* ``features.bin`` -- little-endian float32, row-major (n_patches rows)
* ``coords.csv`` -- header ``x_pixel,y_pixel``, one integer row per patch

Pixel coordinates are quantized to grid cells at load time using the
descriptor's patch_size_px, so files written from raw pixel data and files
written from already-gridded bags (patch_size_px = 1) load identically.
A dataset is a ``manifest.csv`` (header ``bag_id,label,path``) plus bag
directories; paths are relative to the manifest.

The synthetic generator builds two bag-classification tasks at desk scale:

* ``arrangement`` -- every bag gets background instances plus exactly two
  motif instances with class-independent feature distributions; the label
  is carried only by the Chebyshev distance between the motif cells
  (close pair vs far pair, with an excluded margin band in between).
* ``cooccurrence`` -- label 1 bags contain motifs A and B, label 0 bags
  only one of them (as a duplicated pair, so both classes hold exactly two
  motif instances); positions are uniform and uninformative.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import params as ptree
from .errors import ConfigurationError, DataFormatError, DimensionError, ValidationError
from .grid import GridConfig, PatchBag, build_bag, quantize_coords
from .mil import ModelConfig, ModelParams, init_model_params

META_NAME = "meta.txt"
FEATURES_NAME = "features.bin"
COORDS_NAME = "coords.csv"
MANIFEST_HEADER = ["bag_id", "label", "path"]
_META_FIELDS = ("bag_id", "n_patches", "feature_dim", "patch_size_px")


# ---------------------------------------------------------------------------
# bag files

def write_bag_files(path, bag_id: str, features: np.ndarray,
                    pixel_coords: np.ndarray, patch_size_px: int) -> None:
    """Write one bag directory from raw pixel-space inputs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    features = np.asarray(features)
    pixel_coords = np.asarray(pixel_coords)
    if features.ndim != 2 or pixel_coords.shape != (features.shape[0], 2):
        raise DimensionError(
            f"features {features.shape} vs coords {pixel_coords.shape}")
    meta = (f"bag_id = {bag_id}\n"
            f"n_patches = {features.shape[0]}\n"
            f"feature_dim = {features.shape[1]}\n"
            f"patch_size_px = {patch_size_px}\n")
    (path / META_NAME).write_text(meta)
    (path / FEATURES_NAME).write_bytes(
        np.ascontiguousarray(features, dtype="<f4").tobytes())
    buf = io.StringIO()
    buf.write("x_pixel,y_pixel\n")
    for x, y in pixel_coords:
        buf.write(f"{int(x)},{int(y)}\n")
    (path / COORDS_NAME).write_text(buf.getvalue())


def save_bag(bag: PatchBag, path) -> None:
    """Serialize an already-gridded bag (written with patch_size_px = 1,
    grid coordinates stored directly as pixels)."""
    write_bag_files(path, bag.bag_id, bag.features, bag.grid_coords, 1)


def _parse_meta(path: Path) -> dict:
    meta_path = path / META_NAME
    if not meta_path.is_file():
        raise DataFormatError(f"{path}: missing {META_NAME}")
    fields: dict[str, str] = {}
    for lineno, line in enumerate(meta_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError(f"{meta_path}: line {lineno} is not 'key = value'")
        fields[key.strip()] = value.strip()
    for name in _META_FIELDS:
        if name not in fields:
            raise DataFormatError(f"{meta_path}: missing descriptor field {name!r}")
    out = {"bag_id": fields["bag_id"]}
    for name in ("n_patches", "feature_dim", "patch_size_px"):
        try:
            out[name] = int(fields[name])
        except ValueError:
            raise DataFormatError(
                f"{meta_path}: field {name!r} is not an integer: {fields[name]!r}")
    return out


def read_bag_files(path):
    """Parse one bag directory without quantizing.

    Returns (meta dict, features float32 N x F, pixel_coords int N x 2).
    """
    path = Path(path)
    meta = _parse_meta(path)
    n, d = meta["n_patches"], meta["feature_dim"]

    blob = (path / FEATURES_NAME).read_bytes() if (path / FEATURES_NAME).is_file() else None
    if blob is None:
        raise DataFormatError(f"{path}: missing {FEATURES_NAME}")
    expected = n * d * 4
    if len(blob) != expected:
        raise DataFormatError(
            f"{path / FEATURES_NAME}: expected {expected} bytes "
            f"({n} x {d} float32), got {len(blob)}")
    features = np.frombuffer(blob, dtype="<f4").reshape(n, d).copy()

    coords_path = path / COORDS_NAME
    if not coords_path.is_file():
        raise DataFormatError(f"{path}: missing {COORDS_NAME}")
    with coords_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x_pixel", "y_pixel"]:
            raise DataFormatError(
                f"{coords_path}: expected header x_pixel,y_pixel, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                raise DataFormatError(
                    f"{coords_path}: line {lineno} is not two integers: {row}")
    if len(rows) != n:
        raise DataFormatError(
            f"{coords_path}: descriptor says n_patches={n} but found {len(rows)} rows")
    pixel_coords = np.array(rows, dtype=np.int64).reshape(n, 2)
    return meta, features, pixel_coords


def load_bag(path, label: int | None = None) -> PatchBag:
    meta, features, pixel_coords = read_bag_files(path)
    try:
        grid = quantize_coords(pixel_coords,
                               GridConfig(patch_size_px=meta["patch_size_px"]))
        return build_bag(features, grid, bag_id=meta["bag_id"], label=label)
    except (ValidationError, DimensionError, ValueError) as exc:
        raise DataFormatError(f"{Path(path)}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    bag_id: str
    label: int
    path: Path


def write_manifest(path, rows: Sequence[tuple[str, str, str]]) -> None:
    """rows: (bag_id, label_name, relative path)."""
    path = Path(path)
    buf = io.StringIO()
    buf.write(",".join(MANIFEST_HEADER) + "\n")
    for bag_id, label, rel in rows:
        buf.write(f"{bag_id},{label},{rel}\n")
    path.write_text(buf.getvalue())


def load_manifest(path, label_names: Sequence[str] | None = None):
    """Returns (entries, label_names); labels map to contiguous indices in
    name-sorted order (or positions in the supplied label_names)."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataFormatError(
                f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        raw = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}: line {lineno} has {len(row)} fields")
            raw.append((lineno, row[0], row[1], row[2]))
    if not raw:
        raise DataFormatError(f"{path}: manifest has no entries")

    seen: set[str] = set()
    problems: list[str] = []
    for lineno, bag_id, _, rel in raw:
        if bag_id in seen:
            problems.append(f"line {lineno}: duplicate bag_id {bag_id!r}")
        seen.add(bag_id)
        if not (base / rel / META_NAME).is_file():
            problems.append(f"line {lineno}: bag {bag_id!r} missing at {base / rel}")
    if label_names is None:
        label_names = sorted({r[2] for r in raw})
    label_to_index = {name: i for i, name in enumerate(label_names)}
    for lineno, bag_id, label, _ in raw:
        if label not in label_to_index:
            problems.append(f"line {lineno}: unknown label {label!r} for bag {bag_id!r}")
    if problems:
        raise DataFormatError(f"{path}: " + "; ".join(problems))

    entries = [ManifestEntry(bag_id=bag_id, label=label_to_index[label],
                             path=base / rel)
               for _, bag_id, label, rel in raw]
    return entries, list(label_names)


def load_dataset(manifest_path, label_names: Sequence[str] | None = None):
    """Loads every bag in a manifest. Returns (bags, labels, label_names)."""
    entries, label_names = load_manifest(manifest_path, label_names)
    bags = [load_bag(e.path, label=e.label) for e in entries]
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return bags, labels, label_names


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SynthConfig:
    task: str = "arrangement"     # arrangement | cooccurrence
    n_bags: int = 400
    instances_min: int = 32
    instances_max: int = 64
    grid_extent: int = 12
    feature_dim: int = 32
    noise_std: float = 1.0
    motif_amplitude: float = 4.0
    distance_threshold: int = 2   # tau, in grid cells
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("arrangement", "cooccurrence"):
            raise ConfigurationError(f"unknown synth task {self.task!r}")
        if self.n_bags < 2 or self.n_bags % 2 != 0:
            raise ConfigurationError("n_bags must be even (balanced classes)")
        if not 3 <= self.instances_min <= self.instances_max:
            raise ConfigurationError("need 3 <= instances_min <= instances_max")
        if self.instances_max > self.grid_extent ** 2:
            raise ConfigurationError(
                f"instances_max {self.instances_max} exceeds "
                f"{self.grid_extent}x{self.grid_extent} grid capacity")
        if self.feature_dim < 4:
            raise ConfigurationError("feature_dim must be >= 4")
        if self.noise_std <= 0:
            raise ConfigurationError("noise_std must be positive")
        if not 1 <= self.distance_threshold < self.grid_extent:
            raise ConfigurationError(
                "distance_threshold must satisfy 1 <= tau < grid_extent")
        if self.task == "arrangement" and self.grid_extent - 1 < 3 * self.distance_threshold:
            raise ConfigurationError(
                f"grid_extent {self.grid_extent} cannot hold a motif pair at "
                f"Chebyshev distance >= {3 * self.distance_threshold}")


def chebyshev(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    return int(np.abs(a - b).max())


def _sample_motif_pair(rng, extent: int, tau: int, close: bool):
    # rejection sample a pair of distinct cells inside / outside the band
    for _ in range(100_000):
        cells = rng.integers(0, extent, size=(2, 2))
        d = chebyshev(cells[0], cells[1])
        if close and 1 <= d <= tau:
            return cells
        if not close and d >= 3 * tau:
            return cells
    raise ConfigurationError(
        f"could not place motif pair ({'close' if close else 'far'}) "
        f"in a {extent}x{extent} grid with tau={tau}")


def _sample_cells(rng, extent: int, count: int, taken: set[tuple[int, int]]):
    free = [(x, y) for x in range(extent) for y in range(extent)
            if (x, y) not in taken]
    picks = rng.choice(len(free), size=count, replace=False)
    return np.array([free[i] for i in picks], dtype=np.int64)


def _unit(rng, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def synth_generate(cfg: SynthConfig):
    """Returns (bags, labels, label_names). Deterministic per seed; classes
    exactly balanced."""
    rng = np.random.default_rng(cfg.seed)
    motif_a = _unit(rng, cfg.feature_dim)
    motif_b = _unit(rng, cfg.feature_dim)
    # orthogonalize so the two motifs are feature-separable from each other
    motif_b = motif_b - motif_a * (motif_a @ motif_b)
    motif_b /= np.linalg.norm(motif_b)

    labels = np.array([0, 1] * (cfg.n_bags // 2), dtype=np.int64)
    labels = rng.permutation(labels)

    bags: list[PatchBag] = []
    for i, label in enumerate(labels):
        n_inst = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
        if cfg.task == "arrangement":
            motif_cells = _sample_motif_pair(rng, cfg.grid_extent,
                                             cfg.distance_threshold,
                                             close=bool(label == 1))
            motif_dirs = [motif_a, motif_a]
        else:
            # both classes carry exactly two motif instances so neither count
            # nor total motif mass separates them; only the pairing does
            taken: set[tuple[int, int]] = set()
            motif_cells = _sample_cells(rng, cfg.grid_extent, 2, taken)
            if label == 1:
                motif_dirs = [motif_a, motif_b]
            else:
                same = motif_a if rng.integers(2) == 0 else motif_b
                motif_dirs = [same, same]
        taken = {(int(x), int(y)) for x, y in motif_cells}
        bg_cells = _sample_cells(rng, cfg.grid_extent, n_inst - len(taken), taken)

        coords = np.concatenate([np.asarray(motif_cells), bg_cells], axis=0)
        features = rng.normal(0.0, cfg.noise_std,
                              size=(n_inst, cfg.feature_dim))
        for j, direction in enumerate(motif_dirs):
            features[j] += cfg.motif_amplitude * direction
        order = rng.permutation(n_inst)
        bag = build_bag(features[order].astype(np.float32), coords[order],
                        bag_id=f"{cfg.task}-{i:04d}", label=int(label))
        bags.append(bag)
    return bags, labels, ["0", "1"]


def save_dataset(bags: Sequence[PatchBag], labels, out_dir,
                 label_names: Sequence[str]) -> Path:
    """Writes bag directories plus manifest.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for bag, label in zip(bags, labels, strict=True):
        rel = f"bags/{bag.bag_id}"
        save_bag(bag, out_dir / rel)
        rows.append((bag.bag_id, label_names[int(label)], rel))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


# ---------------------------------------------------------------------------
# results and snapshots

def format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    return str(value)


def write_results(path, items) -> None:
    """Key-value results file. `items` is an ordered mapping or pair list;
    no timestamps, so identical runs produce identical bytes."""
    pairs = items.items() if hasattr(items, "items") else items
    lines = [f"{key} = {format_value(value)}\n" for key, value in pairs]
    Path(path).write_text("".join(lines))


def write_fold_csv(path, records) -> None:
    buf = io.StringIO()
    buf.write("fold,stopped_epoch,best_epoch,test_auroc,test_ap\n")
    for r in records:
        buf.write(f"{r.fold},{r.stopped_epoch},{r.best_epoch},"
                  f"{format_value(r.test_auroc)},{format_value(r.test_ap)}\n")
    Path(path).write_text(buf.getvalue())


def write_attention_csv(path, bag: PatchBag, attention: np.ndarray) -> None:
    """Per-instance attention export; multi-head weights are head-averaged."""
    alpha = np.asarray(attention, dtype=np.float64)
    if alpha.ndim == 2:
        alpha = alpha.mean(axis=0)
    if alpha.shape != (bag.features.shape[0],):
        raise DimensionError(
            f"attention shape {attention.shape} vs {bag.features.shape[0]} instances")
    buf = io.StringIO()
    buf.write("instance_index,x_grid,y_grid,alpha\n")
    for i, ((x, y), a) in enumerate(zip(bag.grid_coords, alpha)):
        buf.write(f"{i},{int(x)},{int(y)},{repr(float(a))}\n")
    Path(path).write_text(buf.getvalue())


def save_model(path, params: ModelParams, model_cfg: ModelConfig,
               label_names: Sequence[str]) -> None:
    arrays = dict(ptree.tree_arrays(params))
    meta = json.dumps({"model": asdict(model_cfg),
                       "label_names": list(label_names)}, sort_keys=True)
    np.savez(path, __meta__=np.array(meta), **arrays)


def load_model(path):
    """Returns (params, model_cfg, label_names) from a snapshot file."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"model snapshot not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise DataFormatError(f"{path}: not a model snapshot (no __meta__)")
        meta = json.loads(str(z["__meta__"][()]))
        try:
            cfg = ModelConfig(**meta["model"])
        except (TypeError, KeyError) as exc:
            raise DataFormatError(f"{path}: bad model config: {exc}") from exc
        params = init_model_params(cfg, seed=0)
        for name, arr in ptree.tree_arrays(params):
            if name not in z:
                raise DataFormatError(f"{path}: missing array {name!r}")
            stored = z[name]
            if stored.shape != arr.shape:
                raise DataFormatError(
                    f"{path}: array {name!r} has shape {stored.shape}, "
                    f"expected {arr.shape}")
            arr[...] = stored
    return params, cfg, list(meta["label_names"])

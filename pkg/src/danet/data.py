"""Annotations, image files, dataset manifests and the synthetic defect generator."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .roi_align import Box


class DataError(ValueError):
    pass


@dataclass
class Annotation:
    image_id: str
    width: int
    height: int
    objects: list = field(default_factory=list)  # (class name, Box)

    def __post_init__(self) -> None:
        for name, box in self.objects:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.width or box.y2 > self.height:
                raise DataError(f"{self.image_id}: box {box.as_array().tolist()} for {name!r} outside the image")

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.stack([b.as_array() for _, b in self.objects])

    def labels(self, classes: Sequence[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(classes)}
        try:
            return np.array([index[n] for n, _ in self.objects], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{self.image_id}: class {exc.args[0]!r} not in vocabulary {list(classes)}") from None


# --- VOC XML ------------------------------------------------------------


def _child_number(elem: ET.Element, tag: str, where: str) -> float:
    node = elem.find(tag)
    if node is None or node.text is None:
        raise DataError(f"missing <{tag}> in <{where}>")
    try:
        return float(node.text.strip())
    except ValueError:
        raise DataError(f"<{where}/{tag}> is not a number: {node.text!r}") from None


def parse_voc_xml(data: bytes) -> Annotation:
    """Read a VOC annotation; 1-based pixel indices become zero-based real edges."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise DataError(f"malformed annotation XML: {exc}") from None
    size = root.find("size")
    if size is None:
        raise DataError("missing <size> element")
    width = _child_number(size, "width", "size")
    height = _child_number(size, "height", "size")
    filename = root.findtext("filename") or ""
    image_id = Path(filename.strip()).stem if filename.strip() else ""
    objects = []
    for obj in root.findall("object"):
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise DataError("object without <name>")
        bb = obj.find("bndbox")
        if bb is None:
            raise DataError(f"object {name!r} has no <bndbox>")
        xmin = _child_number(bb, "xmin", "bndbox")
        ymin = _child_number(bb, "ymin", "bndbox")
        xmax = _child_number(bb, "xmax", "bndbox")
        ymax = _child_number(bb, "ymax", "bndbox")
        # inclusive 1-based pixel indices: the box spans [xmin - 1, xmax]
        if xmin - 1 >= xmax or ymin - 1 >= ymax:
            raise DataError(f"object {name!r}: empty box, need xmin <= xmax and ymin <= ymax, got {(xmin, ymin, xmax, ymax)}")
        objects.append((name, Box(xmin - 1, ymin - 1, xmax, ymax)))
    return Annotation(image_id, int(width), int(height), objects)


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def write_voc_xml(ann: Annotation) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = ann.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "1"
    for name, box in ann.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = name
        bb = ET.SubElement(obj, "bndbox")
        ET.SubElement(bb, "xmin").text = _fmt(box.x1 + 1)
        ET.SubElement(bb, "ymin").text = _fmt(box.y1 + 1)
        ET.SubElement(bb, "xmax").text = _fmt(box.x2)
        ET.SubElement(bb, "ymax").text = _fmt(box.y2)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


# --- PGM / PPM ----------------------------------------------------------


def _read_header(data: bytes) -> tuple[bytes, list, int]:
    """Magic, [width, height, maxval] and the offset of the raster."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated image header")
        fields.append(data[start:pos])
    magic = fields[0]
    try:
        nums = [int(f) for f in fields[1:]]
    except ValueError:
        raise DataError("non-numeric image header field") from None
    return magic, nums, pos + 1  # one whitespace byte ends the header


def decode_image(data: bytes) -> np.ndarray:
    """``[C, H, W]`` float64 in [0, 1] from binary PGM (P5) or PPM (P6) bytes."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported image format {magic.decode('latin-1')!r}: only binary PGM (P5) and PPM (P6)")
    magic, (w, h, maxval), offset = _read_header(data)
    if not 0 < maxval < 65536:
        raise DataError(f"invalid maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * c
    raster = np.frombuffer(data, dtype=dtype, count=n, offset=offset) if len(data) - offset >= n * dtype.itemsize else None
    if raster is None:
        raise DataError("truncated image raster")
    return (raster.reshape(h, w, c).transpose(2, 0, 1) / maxval).astype(np.float64)


def encode_image(image: np.ndarray) -> bytes:
    """8-bit P5 (1 channel) or P6 (3 channels) bytes; values are clipped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise DataError(f"can only save 1- or 3-channel images, got {c}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def load_image(path: Union[str, Path]) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_image(image))


# --- manifests ----------------------------------------------------------


@dataclass
class DatasetManifest:
    classes: list
    train: list
    test: list

    def __post_init__(self) -> None:
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise DataError(f"train and test splits share ids: {sorted(overlap)[:5]}")
        for split in (self.train, self.test):
            if len(set(split)) != len(split):
                raise DataError("duplicate id within a split")

    def to_json(self) -> str:
        return json.dumps({"classes": self.classes, "train": self.train, "test": self.test}, indent=2)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    extra = set(doc) - {"classes", "train", "test"}
    if extra:
        raise DataError(f"{path}: unknown manifest key {sorted(extra)[0]!r}")
    try:
        return DatasetManifest(list(doc["classes"]), list(doc["train"]), list(doc["test"]))
    except KeyError as exc:
        raise DataError(f"{path}: manifest missing {exc.args[0]!r}") from None


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] in [0, 1]
    annotation: Annotation


def load_split(manifest: DatasetManifest, split: str, image_dir: Union[str, Path], annotation_dir: Union[str, Path]) -> list:
    """Samples for ``split`` read as ``<id>.pgm``/``<id>.ppm`` and ``<id>.xml``."""
    out = []
    for image_id in getattr(manifest, split):
        ann = parse_voc_xml((Path(annotation_dir) / f"{image_id}.xml").read_bytes())
        ann.image_id = image_id
        ann.labels(manifest.classes)
        candidates = [Path(image_dir) / f"{image_id}{ext}" for ext in (".pgm", ".ppm")]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise FileNotFoundError(f"no .pgm/.ppm image for {image_id!r} in {image_dir}")
        out.append(Sample(load_image(path), ann))
    return out


# --- synthetic defects --------------------------------------------------

SYNTHETIC_CLASSES = ("patches", "scratches")


@dataclass
class SyntheticSpec:
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 3
    min_side: int = 6
    max_side: int = 24
    noise: float = 0.05
    seed: int = 0
    classes: tuple = SYNTHETIC_CLASSES

    def __post_init__(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise DataError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.min_side <= self.max_side < self.image_size:
            raise DataError("need 2 <= min_side <= max_side < image_size")


def _draw_patch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Filled blob: a rectangle with randomly rounded-off corners."""
    mask = np.ones((h, w), dtype=bool)
    cut = int(rng.integers(0, max(1, min(h, w) // 4) + 1))
    for k in range(cut):
        n = cut - k
        mask[k, :n] = mask[k, w - n :] = False
        mask[h - 1 - k, :n] = mask[h - 1 - k, w - n :] = False
    return mask


def _draw_scratch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One- or two-pixel thick line joining opposite corners of the box."""
    mask = np.zeros((h, w), dtype=bool)
    thick = int(rng.integers(1, 3))
    steep = rng.random() < 0.5
    n = max(h, w) * 2
    t = np.linspace(0.0, 1.0, n)
    r = np.rint(t * (h - 1)).astype(int)
    c = np.rint(t * (w - 1)).astype(int)
    if rng.random() < 0.5:
        c = w - 1 - c
    for d in range(thick):
        if steep:
            mask[r, np.clip(c + d, 0, w - 1)] = True
        else:
            mask[np.clip(r + d, 0, h - 1), c] = True
    return mask


def render_synthetic(spec: SyntheticSpec, rng: np.random.Generator, image_id: str) -> tuple[np.ndarray, Annotation, np.ndarray]:
    """One image ``[1, S, S]``, its annotation and an instance map (0 = background)."""
    s = spec.image_size
    image = 0.2 + spec.noise * rng.standard_normal((s, s))
    instances = np.zeros((s, s), dtype=np.int32)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    first = int(rng.integers(0, len(spec.classes)))
    objects = []
    occupied = np.zeros((s, s), dtype=bool)
    for k in range(n_obj):
        cls = (first + k) % len(spec.classes)
        for _ in range(50):
            h = int(rng.integers(spec.min_side, spec.max_side + 1))
            w = int(rng.integers(spec.min_side, spec.max_side + 1))
            y = int(rng.integers(0, s - h + 1))
            x = int(rng.integers(0, s - w + 1))
            # keep a 2-pixel gap between objects so boxes stay separable
            if not occupied[max(0, y - 2) : y + h + 2, max(0, x - 2) : x + w + 2].any():
                break
        else:
            continue
        mask = _draw_patch(rng, h, w) if spec.classes[cls] == "patches" else _draw_scratch(rng, h, w)
        level = 0.75 + 0.15 * rng.random()
        region = image[y : y + h, x : x + w]
        region[mask] = level + spec.noise * rng.standard_normal(int(mask.sum()))
        instances[y : y + h, x : x + w][mask] = len(objects) + 1
        occupied[y : y + h, x : x + w] = True
        objects.append((spec.classes[cls], tight_box(instances == len(objects) + 1)))
    image = np.clip(image, 0.0, 1.0)
    # quantise so saved images reload exactly
    image = np.rint(image * 255) / 255
    return image[None], Annotation(image_id, s, s, objects), instances


def tight_box(mask: np.ndarray) -> Box:
    """Pixel-edge bounding box ``[min_col, min_row, max_col + 1, max_row + 1]`` of a mask."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def generate_synthetic(spec: SyntheticSpec, n: int, prefix: str = "syn") -> list:
    """``n`` seeded samples; identical ``(spec, n)`` give identical data."""
    if n < 0:
        raise DataError("n must be non-negative")
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(n):
        image, ann, _ = render_synthetic(spec, rng, f"{prefix}_{i:05d}")
        out.append(Sample(image, ann))
    return out


def write_dataset(samples: Sequence[Sample], image_dir: Union[str, Path], annotation_dir: Union[str, Path]) -> None:
    image_dir, annotation_dir = Path(image_dir), Path(annotation_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    annotation_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        ext = ".pgm" if s.image.shape[0] == 1 else ".ppm"
        save_image(s.image, image_dir / f"{s.annotation.image_id}{ext}")
        (annotation_dir / f"{s.annotation.image_id}.xml").write_bytes(write_voc_xml(s.annotation))


def flip_sample(sample: Sample) -> Sample:
    """Horizontal mirror of the image and its boxes."""
    w = sample.annotation.width
    objects = [(n, Box(w - b.x2, b.y1, w - b.x1, b.y2)) for n, b in sample.annotation.objects]
    ann = Annotation(sample.annotation.image_id, w, sample.annotation.height, objects)
    return Sample(sample.image[:, :, ::-1].copy(), ann)

"""Preprocessing, head-count labelling, manifests and the synthetic crowd set."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcnet.model import DensityLevel
from mcnet.pixmap import ImageBuffer, read_pixmap, write_pixmap

INPUT_SIZE = (227, 227)


# -- preprocessing ---------------------------------------------------------

def _axis_weights(n_in, n_out):
    """Source indices and blend weights for half-pixel-centred sampling."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def bilinear_resize(pixels, out_h, out_w):
    """Resize an H x W x C array; returns float64 in the input's value range."""
    src = np.asarray(pixels, dtype=np.float64)
    y0, y1, ty = _axis_weights(src.shape[0], out_h)
    x0, x1, tx = _axis_weights(src.shape[1], out_w)
    tx = tx[None, :, None]
    top = src[y0][:, x0] * (1 - tx) + src[y0][:, x1] * tx
    bot = src[y1][:, x0] * (1 - tx) + src[y1][:, x1] * tx
    ty = ty[:, None, None]
    return top * (1 - ty) + bot * ty


def preprocess(img, size=INPUT_SIZE, channels=3):
    """Stretch to ``size`` (H, W), scale samples to [0, 1], emit C x H x W float32."""
    img = img.to_rgb() if channels == 3 else img
    if img.channels != channels:
        raise ValueError(f"cannot produce {channels} channels from a {img.channels}-channel image")
    out_h, out_w = size
    if (img.height, img.width) == (out_h, out_w):
        arr = img.pixels.astype(np.float64)
    else:
        arr = bilinear_resize(img.pixels, out_h, out_w)
    arr = np.clip(arr / 255.0, 0.0, 1.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


# -- labels ----------------------------------------------------------------

@dataclass(frozen=True)
class LabelThresholds:
    low_max: int
    medium_max: int

    def __post_init__(self):
        if not 0 <= self.low_max < self.medium_max:
            raise ValueError(f"need 0 <= low_max < medium_max, got {self.low_max}, {self.medium_max}")


SH_METRO = LabelThresholds(6, 12)
PETS2009 = LabelThresholds(9, 19)
MALL = PETS2009
QUT = PETS2009


def count_to_level(count, t=SH_METRO):
    if count < 0:
        raise ValueError("count must be non-negative")
    if count <= t.low_max:
        return DensityLevel.LOW
    if count <= t.medium_max:
        return DensityLevel.MEDIUM
    return DensityLevel.HIGH


# -- synthetic crowd scenes ------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    thresholds: LabelThresholds = SH_METRO
    max_count: int = 25
    radius_far: float = 2.5   # blob radius at the top row, in pixels at 64x64
    radius_near: float = 3.5  # ... and at the bottom row
    min_spacing: float = 0.9  # min centre distance as a fraction of summed radii
    head_level: tuple = (170, 235)
    background_level: tuple = (10, 40)
    background_grid: int = 4
    pixel_noise: float = 3.0

    def count_range(self, level):
        t = self.thresholds
        return [(0, t.low_max), (t.low_max + 1, t.medium_max), (t.medium_max + 1, self.max_count)][level]


@dataclass
class SynthSample:
    image: ImageBuffer
    label: int
    count: int


def _background(h, w, rng, p):
    g = p.background_grid
    lo, hi = p.background_level
    coarse = rng.uniform(lo, hi, size=(g, g, 1))
    field_ = bilinear_resize(coarse, h, w)[:, :, 0]
    return field_ + rng.normal(0.0, p.pixel_noise, size=(h, w))


def _place_heads(n, h, w, rng, p, scale):
    """Centres and radii; radius grows toward the bottom of the frame (perspective)."""
    heads = []
    for _ in range(n):
        for attempt in range(200):
            cy = rng.uniform(0, h - 1)
            cx = rng.uniform(0, w - 1)
            r = scale * (p.radius_far + (p.radius_near - p.radius_far) * cy / max(h - 1, 1))
            ok = all((cy - y) ** 2 + (cx - x) ** 2 >= (p.min_spacing * (r + rr)) ** 2
                     for y, x, rr in heads)
            if ok:
                break
        # a crowded frame may leave no free spot: keep the last draw so the count stays exact
        heads.append((cy, cx, r))
    return heads


def render_scene(count, size, rng, p=SynthParams()):
    h, w = size
    scale = min(h, w) / 64.0
    if 2 * scale * max(p.radius_far, p.radius_near) >= min(h, w):
        raise ValueError(f"blob radius too large for a {h}x{w} image")
    img = _background(h, w, rng, p)
    yy, xx = np.mgrid[0:h, 0:w]
    for cy, cx, r in _place_heads(count, h, w, rng, p, scale):
        level = rng.uniform(*p.head_level)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        alpha = np.clip(r + 0.5 - d, 0.0, 1.0)
        img = img * (1 - alpha) + level * alpha
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(per_class, image_size=(64, 64), rng=None, params=SynthParams()):
    """``per_class`` scenes per density level, ordered low, medium, high.

    Head counts are drawn uniformly from each level's range, so every label
    equals ``count_to_level(count)`` by construction.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if rng is None:
        raise ValueError("an explicit rng is required for reproducible scenes")
    samples = []
    for level in DensityLevel:
        lo, hi = params.count_range(level)
        if lo > hi:
            raise ValueError(f"empty count range for {level.label}")
        for _ in range(per_class):
            n = int(rng.integers(lo, hi + 1))
            px = render_scene(n, image_size, rng, params)
            label = int(count_to_level(n, params.thresholds))
            samples.append(SynthSample(ImageBuffer.from_array(px), label, n))
    return samples


def write_synth(samples, out_dir):
    """Write ``img_<i>.pgm`` files plus ``manifest.txt`` (path, label, count)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# path\tlabel\tcount"]
    for i, s in enumerate(samples):
        name = f"img_{i:05d}.pgm"
        write_pixmap(out / name, s.image)
        lines.append(f"{name}\t{s.label}\t{s.count}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / "manifest.txt"


# -- manifests -------------------------------------------------------------

class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    count: int = None


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)


def parse_manifest(text, root=Path(".")):
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not parts[0].strip():
            raise ManifestError(f"line {lineno}: expected 'path<TAB>label[<TAB>count]'")
        try:
            label = int(parts[1])
        except ValueError:
            raise ManifestError(f"line {lineno}: label {parts[1]!r} is not an integer") from None
        if label not in (0, 1, 2):
            raise ManifestError(f"line {lineno}: unknown label {label}")
        count = None
        if len(parts) == 3:
            try:
                count = int(parts[2])
            except ValueError:
                raise ManifestError(f"line {lineno}: count {parts[2]!r} is not an integer") from None
        entries.append(ManifestEntry(parts[0].strip(), label, count))
    return DatasetManifest(entries, Path(root))


def load_manifest(path):
    p = Path(path)
    return parse_manifest(p.read_text(encoding="utf-8"), p.parent)


def split(manifest, ratio, rng):
    """Stratified shuffled split into (train, test) manifests.

    The train size is round(ratio * n). Classes with at least two samples
    keep at least one sample on each side; when both cannot hold, class
    presence wins and the train size moves toward it.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    labels = manifest.labels
    n = len(labels)
    n_train = int(round(ratio * n))
    by_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in sorted(set(labels.tolist()))}
    lo = {c: (1 if len(ix) >= 2 else 0) for c, ix in by_class.items()}
    hi = {c: (len(ix) - 1 if len(ix) >= 2 else len(ix)) for c, ix in by_class.items()}
    exact = {c: ratio * len(ix) for c, ix in by_class.items()}
    take = {c: min(max(int(np.floor(exact[c])), lo[c]), hi[c]) for c in by_class}
    # largest-remainder fill toward n_train within per-class bounds
    while sum(take.values()) != n_train:
        short = sum(take.values()) < n_train
        cands = [c for c in by_class if (take[c] < hi[c] if short else take[c] > lo[c])]
        if not cands:
            break
        key = (lambda c: exact[c] - take[c]) if short else (lambda c: take[c] - exact[c])
        c = max(cands, key=lambda c: (key(c), -c))
        take[c] += 1 if short else -1
    train_idx = np.concatenate([ix[:take[c]] for c, ix in by_class.items()]).astype(np.int64)
    test_idx = np.concatenate([ix[take[c]:] for c, ix in by_class.items()]).astype(np.int64)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    pick = lambda ix: DatasetManifest([manifest.entries[i] for i in ix], manifest.root)  # noqa: E731
    return pick(train_idx), pick(test_idx)


def load_images(manifest, size, channels=3):
    """Decode and preprocess every entry; returns (N x C x H x W float32, labels)."""
    xs = [preprocess(read_pixmap(manifest.resolve(e)), size, channels) for e in manifest.entries]
    return np.stack(xs), manifest.labels


def samples_to_arrays(samples, size=None, channels=3):
    size = size or (samples[0].image.height, samples[0].image.width)
    x = np.stack([preprocess(s.image, size, channels) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y

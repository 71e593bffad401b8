# data_toy.py
"""
Class-conditional toy images, paired augmentations and a patch-codebook tokenizer.

The tokenizer stands in for a VQ-GAN encoder: each patch_side x patch_side patch is
described by its mean colour and two gradient statistics, and mapped to the nearest
codebook entry. It reconstructs coarsely and has no invariance to crops or flips,
which is all the training losses and diagnostics need from it.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colors as mcolors
from matplotlib import image as mimage

from . import seeding
from .errors import ShapeMismatchError, UsageError

logger = logging.getLogger(__name__)

FEATURE_DIM = 5
SHAPES = ("disc", "square", "triangle", "ring", "cross")
GOLDEN = 0.6180339887498949


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    class_label: int
    sample_id: int

    @property
    def side(self):
        return self.pixels.shape[0]


@dataclass
class TokenSequence:
    tokens: np.ndarray  # length T, int64, raster order
    condition: int  # class id, or C for the null condition
    grid_side: int

    def __len__(self):
        return len(self.tokens)

    def validate(self, vocab_size, num_classes):
        if len(self.tokens) != self.grid_side * self.grid_side:
            raise ShapeMismatchError(
                f"token sequence of length {len(self.tokens)} does not fill a {self.grid_side}x{self.grid_side} grid")
        if len(self.tokens) and int(self.tokens.max()) >= vocab_size:
            raise UsageError(f"token {int(self.tokens.max())} is outside the vocabulary of {vocab_size}")
        if not 0 <= self.condition <= num_classes:
            raise UsageError(f"condition {self.condition} outside [0, {num_classes}]")
        return self


@dataclass
class AugmentedPair:
    views: list  # M ImageSamples of one source image
    source_id: int

    def __post_init__(self):
        if len(self.views) < 2:
            raise UsageError("an augmented pair needs at least 2 views")
        labels = {v.class_label for v in self.views}
        if len(labels) != 1:
            raise UsageError(f"views of source {self.source_id} disagree on the class label")

    @property
    def class_label(self):
        return self.views[0].class_label


def _class_scene(class_label):
    """Fixed scene parameters for one class: shape, hue and background texture."""
    return {
        "shape": SHAPES[class_label % len(SHAPES)],
        "hue": (class_label * GOLDEN) % 1.0,
        "stripe_angle": (class_label // len(SHAPES)) * (math.pi / 3.0) + (class_label % 3) * 0.35,
        "stripe_freq": 2.0 + (class_label % 4),
    }


def _shape_mask(shape, yy, xx, cy, cx, radius):
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "triangle":
        return (dy <= radius * 0.7) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if shape == "ring":
        r2 = dy ** 2 + dx ** 2
        return (r2 <= radius ** 2) & (r2 >= (radius * 0.55) ** 2)
    # cross
    arm = radius * 0.3
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))


def render_sample(class_label, sample_id, image_side, seed):
    rng = seeding.numpy_rng(seed, "sample", sample_id)
    scene = _class_scene(class_label)
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float64) / image_side

    phase = rng.uniform(0.0, 2.0 * math.pi)
    angle = scene["stripe_angle"] + rng.normal(0.0, 0.08)
    wave = np.sin(2.0 * math.pi * scene["stripe_freq"] * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    bg_hue = (scene["hue"] + 0.5 + rng.normal(0.0, 0.03)) % 1.0
    bg_value = 0.45 + 0.15 * wave
    background = mcolors.hsv_to_rgb(np.stack([
        np.full_like(wave, bg_hue), np.full_like(wave, 0.35), bg_value], axis=-1))

    hue = (scene["hue"] + rng.normal(0.0, 0.04)) % 1.0
    fg = mcolors.hsv_to_rgb(np.array([hue, rng.uniform(0.65, 0.95), rng.uniform(0.7, 1.0)]))
    radius = rng.uniform(0.2, 0.32)
    cy = rng.uniform(0.3, 0.7)
    cx = rng.uniform(0.3, 0.7)
    mask = _shape_mask(scene["shape"], yy, xx, cy, cx, radius)

    pixels = np.where(mask[..., None], fg[None, None, :], background)
    pixels = pixels + rng.normal(0.0, 0.03, size=pixels.shape)
    return ImageSample(np.clip(pixels, 0.0, 1.0).astype(np.float32), int(class_label), int(sample_id))


def synth_dataset(num_classes, per_class, image_side, seed, patch_side=4):
    """
    Renders per_class images for each of num_classes parametric scenes.

    :param num_classes: Number of classes (>= 2).
    :param per_class: Images per class.
    :param image_side: Side in pixels, a multiple of patch_side.
    :param seed: Global seed; each image is seeded from (seed, sample_id).
    """
    if num_classes < 2:
        raise UsageError("synth_dataset needs at least 2 classes")
    if image_side % patch_side:
        raise UsageError(f"image side {image_side} is not a multiple of patch side {patch_side}")
    samples = []
    for c in range(num_classes):
        for i in range(per_class):
            samples.append(render_sample(c, c * per_class + i, image_side, seed))
    logger.info("synthesized %d images (%d classes, side %d)", len(samples), num_classes, image_side)
    return samples


def augment(image, seed):
    """
    Random resized crop (area scale in [0.8, 1.0]), horizontal flip (p=0.5) and a
    small hue shift. Shape and label are preserved.
    """
    rng = np.random.default_rng(seed)
    side = image.side
    scale = rng.uniform(0.8, 1.0)
    crop = max(1, int(round(side * math.sqrt(scale))))
    top = int(rng.integers(0, side - crop + 1))
    left = int(rng.integers(0, side - crop + 1))
    patch = image.pixels[top:top + crop, left:left + crop]

    tensor = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)).permute(2, 0, 1)[None]
    resized = F.interpolate(tensor, size=(side, side), mode="bilinear", align_corners=False)
    pixels = resized[0].permute(1, 2, 0).numpy().astype(np.float64)

    if rng.uniform() < 0.5:
        pixels = pixels[:, ::-1]
    hsv = mcolors.rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-0.03, 0.03)) % 1.0
    pixels = mcolors.hsv_to_rgb(hsv)
    return ImageSample(np.clip(pixels, 0.0, 1.0).astype(np.float32), image.class_label, image.sample_id)


def make_pairs(images, views, seed, augmented=True):
    """Builds one AugmentedPair per image with `views` views each."""
    pairs = []
    for image in images:
        if augmented:
            members = [augment(image, seeding.derive_seed(seed, "view", image.sample_id, m)) for m in range(views)]
        else:
            members = [image for _ in range(views)]
        pairs.append(AugmentedPair(members, image.sample_id))
    return pairs


def patch_features(pixels, patch_side):
    """Mean RGB plus mean |dx| and |dy| of the grey level, per patch, raster order -> [T, 5]."""
    height, width, _ = pixels.shape
    if height % patch_side or width % patch_side:
        raise UsageError(f"image {height}x{width} is not divisible by patch side {patch_side}")
    gh, gw = height // patch_side, width // patch_side
    blocks = pixels.astype(np.float64).reshape(gh, patch_side, gw, patch_side, 3).transpose(0, 2, 1, 3, 4)
    mean_rgb = blocks.mean(axis=(2, 3))
    grey = blocks.mean(axis=-1)
    if patch_side > 1:
        grad_x = np.abs(np.diff(grey, axis=3)).mean(axis=(2, 3))
        grad_y = np.abs(np.diff(grey, axis=2)).mean(axis=(2, 3))
    else:
        grad_x = grad_y = np.zeros((gh, gw))
    features = np.concatenate([mean_rgb, grad_x[..., None], grad_y[..., None]], axis=-1)
    return features.reshape(gh * gw, FEATURE_DIM)


def nearest_entries(features, codebook):
    """Index of the closest codebook row (Euclidean, lowest index on ties) for every feature row."""
    cb = np.asarray(codebook, dtype=np.float64)
    dist = ((features[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1)
    return dist.argmin(axis=1)


def quantize(image, codebook, patch_side):
    """
    Tokenizes an image: nearest codebook entry per patch, raster order.

    :param image: ImageSample.
    :param codebook: [V, 5] array.
    :param patch_side: Patch side in pixels.
    """
    if len(codebook) < 2:
        raise UsageError("the codebook needs at least 2 entries")
    features = patch_features(image.pixels, patch_side)
    tokens = nearest_entries(features, codebook).astype(np.int64)
    return TokenSequence(tokens, int(image.class_label), image.side // patch_side)


def build_codebook(images, vocab_size, patch_side, seed, iterations=50):
    """
    k-means over the patch features of a seed corpus of images.

    Initial centroids are vocab_size distinct patches drawn with `seed`; an empty
    cluster keeps its previous centroid.
    """
    features = np.concatenate([patch_features(im.pixels, patch_side) for im in images], axis=0)
    if len(features) < vocab_size:
        raise UsageError(f"{len(features)} patches cannot seed a codebook of {vocab_size} entries")
    rng = np.random.default_rng(seed)
    centroids = features[rng.choice(len(features), size=vocab_size, replace=False)].copy()
    for _ in range(iterations):
        assign = nearest_entries(features, centroids)
        for k in range(vocab_size):
            members = features[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    logger.info("built codebook: %d entries over %d patches", vocab_size, len(features))
    return centroids.astype(np.float32)


def token_invariance(a, b):
    """Fraction of positions where two token sequences differ (0 = identical)."""
    ta = np.asarray(getattr(a, "tokens", a))
    tb = np.asarray(getattr(b, "tokens", b))
    if ta.shape != tb.shape:
        raise ShapeMismatchError(f"token sequences of length {len(ta)} and {len(tb)} cannot be compared")
    if len(ta) == 0:
        return 0.0
    return float((ta != tb).mean())


def dequantize(seq, codebook, patch_side):
    """Paints every patch with the mean colour of its codebook entry."""
    side = seq.grid_side
    rgb = np.asarray(codebook, dtype=np.float32)[np.asarray(seq.tokens), :3].reshape(side, side, 3)
    return np.clip(np.repeat(np.repeat(rgb, patch_side, axis=0), patch_side, axis=1), 0.0, 1.0)


def save_png(pixels, path):
    mimage.imsave(path, pixels)

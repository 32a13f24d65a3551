""" Image operation families used by the matching terms:

    semantic preserving (T_sp)    random augmentation and noise injection
    interpolation (T_beta)        mix-up of inputs and label distributions
    semantic transforming (T_st)  rotation, vertical flip, patch location

    Every per-sample random draw comes from a generator seeded by
    (master seed, sample index, family), so serial and parallel runs agree.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from instapbm.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

TASK_CLASS_COUNTS = {'rotate90': 4, 'vflip': 2, 'patch_location': 4}
RA_KINDS = ('shift', 'small_rotate', 'cutout', 'brightness', 'contrast')
NI_KINDS = ('gaussian_noise',)
SP_KIND_GROUPS = {'ra': RA_KINDS, 'ni': NI_KINDS, 'all': RA_KINDS + NI_KINDS}

FAMILY_SEMANTIC_PRESERVING = 'semantic_preserving'
FAMILY_INTERPOLATION = 'interpolation'
FAMILY_SEMANTIC_TRANSFORMING = 'semantic_transforming'
_STREAM_TAGS = {FAMILY_SEMANTIC_PRESERVING: 0, FAMILY_INTERPOLATION: 1, FAMILY_SEMANTIC_TRANSFORMING: 2}


def sample_rng(seed, index, family=FAMILY_SEMANTIC_PRESERVING, salt=0):
    return np.random.default_rng([int(seed), int(index), _STREAM_TAGS[family], int(salt)])


@dataclass
class ImageBatch:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError('ImageBatch needs [batch, H, W], got {}'.format(self.data.shape))
        if self.height < 4 or self.width < 4:
            raise ShapeError('ImageBatch needs H, W >= 4, got {}x{}'.format(self.height, self.width))

    @property
    def batch_size(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def flatten(self):
        return self.data.reshape(self.batch_size, self.height * self.width)

    @classmethod
    def from_flat(cls, flat, height, width):
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat.reshape(flat.shape[0], height, width))


@dataclass
class SemanticPreservingRanges:
    shift_max: int = 2
    rotate_max_deg: float = 15.0
    cutout_size: int = 4
    brightness_max: float = 0.2
    contrast_max: float = 0.3
    noise_sigma: float = 0.1

    def __post_init__(self):
        limits = {'shift_max': 2, 'rotate_max_deg': 15.0, 'noise_sigma': 0.15}
        for name, value in vars(self).items():
            if value < 0:
                raise ValidationError('{} must be >= 0, got {}'.format(name, value))
            if name in limits and value > limits[name]:
                raise ValidationError('{} must be <= {}, got {}'.format(name, limits[name], value))
        if self.contrast_max >= 1:
            raise ValidationError('contrast_max must be < 1, got {}'.format(self.contrast_max))


@dataclass
class TransformOp:
    family: str
    kind: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0


def resolve_sp_kinds(kinds):
    """ Accept a group name ('ra', 'ni', 'all') or an explicit list of kinds. """
    if isinstance(kinds, str):
        if kinds not in SP_KIND_GROUPS:
            raise ValidationError('Unknown augmentation group {!r}'.format(kinds))
        return SP_KIND_GROUPS[kinds]
    kinds = tuple(kinds)
    unknown = [kind for kind in kinds if kind not in SP_KIND_GROUPS['all']]
    if unknown or not kinds:
        raise ValidationError('Bad semantic-preserving kinds {}'.format(list(kinds)))
    return kinds


def _draw_sp_op(rng, kind, ranges, seed):
    if kind == 'shift':
        dy, dx = rng.integers(-ranges.shift_max, ranges.shift_max + 1, size=2)
        parameters = {'dy': int(dy), 'dx': int(dx)}
    elif kind == 'small_rotate':
        parameters = {'degrees': float(rng.uniform(-ranges.rotate_max_deg, ranges.rotate_max_deg))}
    elif kind == 'cutout':
        parameters = {'size': int(ranges.cutout_size), 'u': float(rng.random()), 'v': float(rng.random())}
    elif kind == 'brightness':
        parameters = {'delta': float(rng.uniform(-ranges.brightness_max, ranges.brightness_max))}
    elif kind == 'contrast':
        parameters = {'factor': float(rng.uniform(1 - ranges.contrast_max, 1 + ranges.contrast_max))}
    else:
        parameters = {'sigma': float(ranges.noise_sigma)}
    return TransformOp(FAMILY_SEMANTIC_PRESERVING, kind, parameters, seed)


def _shift(image, dy, dx):
    height, width = image.shape
    out = np.zeros_like(image)
    src_rows = slice(max(0, -dy), min(height, height - dy))
    dst_rows = slice(max(0, dy), min(height, height + dy))
    src_cols = slice(max(0, -dx), min(width, width - dx))
    dst_cols = slice(max(0, dx), min(width, width + dx))
    out[dst_rows, dst_cols] = image[src_rows, src_cols]
    return out


def _rotate_nearest(image, degrees):
    height, width = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.mgrid[0:height, 0:width]
    ry, rx = rows - cy, cols - cx
    # inverse map: which source pixel lands on each output pixel
    src_y = np.rint(np.cos(theta) * ry - np.sin(theta) * rx + cy).astype(int)
    src_x = np.rint(np.sin(theta) * ry + np.cos(theta) * rx + cx).astype(int)
    inside = (src_y >= 0) & (src_y < height) & (src_x >= 0) & (src_x < width)
    out = np.zeros_like(image)
    out[inside] = image[src_y[inside], src_x[inside]]
    return out


def _apply_sp_op(image, op, rng):
    p = op.parameters
    if op.kind == 'shift':
        return _shift(image, p['dy'], p['dx'])
    if op.kind == 'small_rotate':
        return _rotate_nearest(image, p['degrees'])
    if op.kind == 'cutout':
        size = min(p['size'], image.shape[0], image.shape[1])
        if size == 0:
            return image
        top = int(p['u'] * (image.shape[0] - size + 1))
        left = int(p['v'] * (image.shape[1] - size + 1))
        out = image.copy()
        out[top:top + size, left:left + size] = 0.0
        return out
    if op.kind == 'brightness':
        return image + p['delta']
    if op.kind == 'contrast':
        center = image.mean()
        return (image - center) * p['factor'] + center
    return image + p['sigma'] * rng.standard_normal(image.shape)


def apply_semantic_preserving(x, seed, kinds='all', ranges=None):
    """ Per sample, compose 1-2 randomly chosen semantic-preserving kinds.
        Inputs:
            x [ImageBatch]: images in [0, 1]
            seed [int]: master seed
            kinds [str or list]: 'ra', 'ni', 'all' or explicit kinds
            ranges [SemanticPreservingRanges]: magnitudes (defaults if None)
        Output:
            out [ImageBatch]: same shape, clamped to [0, 1]
    """
    kinds = resolve_sp_kinds(kinds)
    ranges = ranges or SemanticPreservingRanges()
    out = np.empty_like(x.data)
    for index in range(x.batch_size):
        rng = sample_rng(seed, index, FAMILY_SEMANTIC_PRESERVING)
        count = int(rng.integers(1, min(2, len(kinds)) + 1))
        chosen = rng.choice(len(kinds), size=count, replace=False)
        image = x.data[index]
        for kind_index in chosen:
            op = _draw_sp_op(rng, kinds[kind_index], ranges, seed)
            image = _apply_sp_op(image, op, rng)
        out[index] = np.clip(image, 0.0, 1.0)
    return ImageBatch(out)


def perturb_points(points, sigma, seed):
    """ Noise injection for non-image inputs (rows of a [n, d] array). """
    points = np.asarray(points, dtype=np.float64)
    out = np.empty_like(points)
    for index in range(points.shape[0]):
        rng = sample_rng(seed, index, FAMILY_SEMANTIC_PRESERVING)
        out[index] = points[index] + sigma * rng.standard_normal(points.shape[1:])
    return out


def sample_mixup_betas(n, alpha, seed):
    if not alpha > 0:
        raise ValidationError('Mix-up concentration must be > 0, got {}'.format(alpha))
    rng = np.random.default_rng([int(seed), _STREAM_TAGS[FAMILY_INTERPOLATION]])
    return rng.beta(alpha, alpha, size=n)


def _check_distribution_rows(y, name):
    sums = y.sum(axis=1)
    if np.any(y < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValidationError('{} rows must be probability vectors'.format(name))


def mixup_interpolate(x, x2, y, y2, beta):
    """ (beta x + (1 - beta) x', beta y + (1 - beta) y') with beta a scalar or
        one value per pair. Returns the same container type as x.
    """
    is_batch = isinstance(x, ImageBatch)
    xa = x.data if is_batch else np.asarray(x, dtype=np.float64)
    xb = x2.data if isinstance(x2, ImageBatch) else np.asarray(x2, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    yb = np.asarray(y2, dtype=np.float64)
    if xa.shape != xb.shape or ya.shape != yb.shape or ya.shape[0] != xa.shape[0]:
        raise ShapeError('mixup shapes differ: x {} / {}, y {} / {}'.format(xa.shape, xb.shape, ya.shape, yb.shape))
    _check_distribution_rows(ya, 'y')
    _check_distribution_rows(yb, 'y2')

    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 1):
        raise ValidationError('beta must lie in [0, 1]')
    if beta.ndim == 0:
        beta_x, beta_y = beta, beta
    else:
        if beta.shape != (xa.shape[0],):
            raise ShapeError('beta needs one value per pair, got {}'.format(beta.shape))
        beta_x = beta.reshape((-1,) + (1,) * (xa.ndim - 1))
        beta_y = beta.reshape(-1, 1)

    mixed_x = beta_x * xa + (1 - beta_x) * xb
    mixed_y = beta_y * ya + (1 - beta_y) * yb
    return (ImageBatch(mixed_x) if is_batch else mixed_x), mixed_y


def rotate_quarter_turns(images, k):
    """ k clockwise quarter-turns over the last two axes. """
    return np.rot90(images, -int(k) % 4, axes=(-2, -1))


def vertical_flip(images):
    return np.flip(images, axis=-2)


def extract_quadrant(image, quadrant):
    """ Copy quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
        to the canvas origin; everything else is zero.
    """
    height, width = image.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError('Patch location needs even H and W, got {}x{}'.format(height, width))
    half_h, half_w = height // 2, width // 2
    row, col = divmod(int(quadrant), 2)
    out = np.zeros_like(image)
    out[..., :half_h, :half_w] = image[..., row * half_h:(row + 1) * half_h, col * half_w:(col + 1) * half_w]
    return out


def apply_semantic_transforming(x, task, seed):
    """ Apply a pretext transformation with a uniformly drawn label per sample.
        Inputs:
            x [ImageBatch]: images
            task [str]: 'rotate90', 'vflip' or 'patch_location'
            seed [int]: master seed
        Outputs:
            out [ImageBatch]: transformed images
            labels [np.ndarray]: int64 self-supervised labels
    """
    if task not in TASK_CLASS_COUNTS:
        raise ValidationError('Unknown pretext task {!r}'.format(task))
    if task == 'patch_location' and (x.height % 2 or x.width % 2):
        raise ShapeError('Patch location needs even H and W, got {}x{}'.format(x.height, x.width))
    if task == 'rotate90' and x.height != x.width:
        raise ShapeError('Quarter-turns need square images, got {}x{}'.format(x.height, x.width))

    classes = TASK_CLASS_COUNTS[task]
    salt = sorted(TASK_CLASS_COUNTS).index(task)
    labels = np.empty(x.batch_size, dtype=np.int64)
    out = np.empty_like(x.data)
    for index in range(x.batch_size):
        label = int(sample_rng(seed, index, FAMILY_SEMANTIC_TRANSFORMING, salt).integers(classes))
        image = x.data[index]
        if task == 'rotate90':
            image = rotate_quarter_turns(image, label)
        elif task == 'vflip':
            image = vertical_flip(image) if label else image
        else:
            image = extract_quadrant(image, label)
        labels[index] = label
        out[index] = image
    return ImageBatch(out), labels

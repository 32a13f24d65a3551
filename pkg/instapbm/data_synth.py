""" Deterministic generators for desk-scale domain pairs.

    Glyphs are rendered from line-segment templates (one per class, with
    sub-style variants) onto a small canvas; the domain knobs (stroke
    thickness, background level, polarity, noise, jitter, offset) create the
    shift between source and target; a single severity in [0, 1] moves them
    together. Blob pairs are 2-D Gaussian clusters with identical
    class-conditionals and different label priors.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from instapbm.errors import ShapeError, ValidationError
from instapbm.transforms import ImageBatch

logger = logging.getLogger(__name__)

SOURCE = 'source'
TARGET = 'target'
OUTLIER_LABEL = -1
OUTLIER_STYLES = ('blank', 'checker', 'inverted_random')

# (row0, col0, row1, col1) in unit-square coordinates
GLYPH_TEMPLATES = [
    [(0.15, 0.25, 0.15, 0.75), (0.15, 0.75, 0.85, 0.75), (0.85, 0.75, 0.85, 0.25), (0.85, 0.25, 0.15, 0.25)],
    [(0.15, 0.5, 0.85, 0.5), (0.15, 0.5, 0.3, 0.35)],
    [(0.15, 0.25, 0.15, 0.75), (0.15, 0.75, 0.85, 0.25), (0.85, 0.25, 0.85, 0.75)],
    [(0.15, 0.25, 0.15, 0.75), (0.5, 0.35, 0.5, 0.75), (0.85, 0.25, 0.85, 0.75), (0.15, 0.75, 0.85, 0.75)],
    [(0.15, 0.25, 0.55, 0.25), (0.55, 0.25, 0.55, 0.8), (0.15, 0.65, 0.85, 0.65)],
    [(0.15, 0.2, 0.15, 0.8), (0.15, 0.5, 0.85, 0.5)],
    [(0.15, 0.3, 0.85, 0.3), (0.85, 0.3, 0.85, 0.8)],
    [(0.15, 0.2, 0.15, 0.8), (0.15, 0.8, 0.85, 0.4)],
    [(0.15, 0.2, 0.85, 0.8), (0.15, 0.8, 0.85, 0.2)],
    [(0.15, 0.2, 0.85, 0.5), (0.85, 0.5, 0.15, 0.8)],
]
MAX_SUBSTYLES = 3

META_FILE = 'meta.json'
IMAGES_FILE = 'images.f32le'
LABELS_FILE = 'labels.u32le'
SUBLABELS_FILE = 'sublabels.u32le'
IDS_FILE = 'ids.u32le'
UINT32_SENTINEL = 0xFFFFFFFF


@dataclass
class DomainDataset:
    """ samples is [N, H, W] for glyph images or [N, d] for point clouds.
        Outliers carry label OUTLIER_LABEL.
    """
    samples: np.ndarray
    labels: np.ndarray
    domain_role: str
    class_count: int
    sublabels: np.ndarray = None
    sample_ids: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sublabels is not None:
            self.sublabels = np.asarray(self.sublabels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.validate()

    def validate(self):
        count = self.samples.shape[0]
        if self.labels.shape != (count,) or self.sample_ids.shape != (count,):
            raise ShapeError('{} samples but {} labels / {} ids'.format(count, self.labels.shape, self.sample_ids.shape))
        if self.domain_role not in (SOURCE, TARGET):
            raise ValidationError('domain_role must be source or target, got {!r}'.format(self.domain_role))
        labeled = self.labels != OUTLIER_LABEL
        if np.any(self.labels[labeled] < 0) or np.any(self.labels[labeled] >= self.class_count):
            raise ValidationError('Labels must lie in [0, {})'.format(self.class_count))
        if self.sublabels is not None:
            if self.sublabels.shape != (count,):
                raise ShapeError('{} samples but {} sublabels'.format(count, self.sublabels.shape))
            parents = {}
            for sub, label in zip(self.sublabels[labeled], self.labels[labeled]):
                if parents.setdefault(int(sub), int(label)) != int(label):
                    raise ValidationError('Sublabel {} maps to more than one label'.format(sub))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def is_image(self):
        return self.samples.ndim == 3

    @property
    def geometry(self):
        return tuple(self.samples.shape[1:])

    @property
    def images(self):
        if not self.is_image:
            raise ValidationError('Dataset holds points, not images')
        return ImageBatch(self.samples)

    def flat(self):
        return self.samples.reshape(len(self), -1)

    @property
    def labeled_mask(self):
        return self.labels != OUTLIER_LABEL

    def counts(self):
        return np.bincount(self.labels[self.labeled_mask], minlength=self.class_count)

    def subset(self, indices, **changes):
        """ New dataset holding rows `indices`; keyword changes override fields. """
        indices = np.asarray(indices, dtype=np.int64)
        fields = {
            'samples': self.samples[indices],
            'labels': self.labels[indices],
            'domain_role': self.domain_role,
            'class_count': self.class_count,
            'sublabels': None if self.sublabels is None else self.sublabels[indices],
            'sample_ids': self.sample_ids[indices],
            'metadata': dict(self.metadata),
        }
        fields.update(changes)
        return DomainDataset(**fields)


@dataclass
class GlyphDomainSpec:
    num_classes: int = 4
    substyles: int = 2
    canvas: int = 16
    stroke_thickness: float = 1.5
    background: float = 0.0
    invert: bool = False
    noise: float = 0.05
    jitter: float = 1.0
    offset: float = 0.0
    samples_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        checks = [
            (2 <= self.num_classes <= len(GLYPH_TEMPLATES), 'num_classes must lie in [2, {}]'.format(len(GLYPH_TEMPLATES))),
            (1 <= self.substyles <= MAX_SUBSTYLES, 'substyles must lie in [1, {}]'.format(MAX_SUBSTYLES)),
            (self.canvas >= 8 and self.canvas % 2 == 0, 'canvas must be even and >= 8'),
            (0.5 <= self.stroke_thickness <= 4.0, 'stroke_thickness must lie in [0.5, 4]'),
            (0.0 <= self.background <= 0.6, 'background must lie in [0, 0.6]'),
            (0.0 <= self.noise <= 0.3, 'noise must lie in [0, 0.3]'),
            (0.0 <= self.jitter <= 3.0, 'jitter must lie in [0, 3]'),
            (0.0 <= self.offset <= 4.0, 'offset must lie in [0, 4]'),
            (self.samples_per_class >= 1, 'samples_per_class must be >= 1'),
            (self.seed >= 0, 'seed must be >= 0'),
        ]
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)


# knob -> (value at severity 0, value at severity 1); severity 0 is the source look
SEVERITY_KNOBS = {
    'stroke_thickness': (1.5, 3.0),
    'background': (0.0, 0.4),
    'noise': (0.05, 0.2),
    'jitter': (1.0, 2.0),
    'offset': (0.0, 3.0),
}
DEFAULT_SEVERITY = 0.7


def severity_knobs(severity):
    """ Target knob values for a shift severity in [0, 1], linear in every knob. """
    if not 0.0 <= severity <= 1.0:
        raise ValidationError('severity must lie in [0, 1], got {}'.format(severity))
    return {name: low + severity * (high - low) for name, (low, high) in SEVERITY_KNOBS.items()}


def shifted_target_spec(source_spec, severity, seed=None):
    """ Copy of source_spec with the target knobs of `severity`; seed defaults
        to the source seed + 1.
    """
    seed = source_spec.seed + 1 if seed is None else int(seed)
    return replace(source_spec, seed=seed, **severity_knobs(severity))


def _style_segments(segments, style):
    """ style 0 plain, 1 serif ticks at segment ends, 2 slanted """
    segments = np.asarray(segments, dtype=np.float64)
    if style == 1:
        ticks = []
        for r0, c0, r1, c1 in segments:
            for r, c in ((r0, c0), (r1, c1)):
                ticks.append((r, c - 0.08, r, c + 0.08))
        return np.vstack([segments, np.asarray(ticks)])
    if style == 2:
        slanted = segments.copy()
        slanted[:, 1] += 0.25 * (0.5 - segments[:, 0])
        slanted[:, 3] += 0.25 * (0.5 - segments[:, 2])
        return slanted
    return segments


def _segment_distance(rows, cols, segment):
    r0, c0, r1, c1 = segment
    dr, dc = r1 - r0, c1 - c0
    length_sq = dr * dr + dc * dc
    if length_sq == 0:
        t = np.zeros_like(rows)
    else:
        t = np.clip(((rows - r0) * dr + (cols - c0) * dc) / length_sq, 0.0, 1.0)
    return np.hypot(rows - (r0 + t * dr), cols - (c0 + t * dc))


def render_glyph(label, style, spec, rng):
    """ Render one glyph; rng supplies jitter and noise. """
    size = spec.canvas
    segments = _style_segments(GLYPH_TEMPLATES[label], style) * (size - 1)
    scale_factor = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-spec.jitter, spec.jitter, size=2) + spec.offset
    center = (size - 1) / 2.0
    segments = (segments - center) * scale_factor + center
    segments[:, [0, 2]] += shift[0]
    segments[:, [1, 3]] += shift[1]

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    distance = np.min([_segment_distance(rows, cols, segment) for segment in segments], axis=0)
    stroke = np.clip(spec.stroke_thickness / 2.0 + 0.5 - distance, 0.0, 1.0)
    image = spec.background + (1.0 - spec.background) * stroke
    image = image + spec.noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    if spec.invert:
        image = 1.0 - image
    return image


def generate_glyph_domain(spec, domain_role):
    count = spec.num_classes * spec.samples_per_class
    images = np.empty((count, spec.canvas, spec.canvas))
    labels = np.empty(count, dtype=np.int64)
    sublabels = np.empty(count, dtype=np.int64)
    for index in range(count):
        label = index % spec.num_classes
        style = (index // spec.num_classes) % spec.substyles
        rng = np.random.default_rng([spec.seed, index])
        images[index] = render_glyph(label, style, spec, rng)
        labels[index] = label
        sublabels[index] = label * spec.substyles + style
    # float32 grid so the on-disk format round-trips exactly
    images = images.astype(np.float32).astype(np.float64)
    metadata = {'generator': 'glyph', 'spec': asdict(spec), 'seed': spec.seed}
    return DomainDataset(images, labels, domain_role, spec.num_classes, sublabels, None, metadata)


def generate_glyph_pair(src_spec, tgt_spec):
    """ Render a (source, target) glyph pair.
        Inputs:
            src_spec [GlyphDomainSpec]: source knobs and seed
            tgt_spec [GlyphDomainSpec]: target knobs and seed
        Outputs:
            source [DomainDataset], target [DomainDataset]
    """
    if src_spec.num_classes != tgt_spec.num_classes:
        raise ValidationError('Class counts differ: {} vs {}'.format(src_spec.num_classes, tgt_spec.num_classes))
    if src_spec.substyles != tgt_spec.substyles:
        raise ValidationError('Sub-style counts differ: {} vs {}'.format(src_spec.substyles, tgt_spec.substyles))
    if src_spec.canvas != tgt_spec.canvas:
        raise ValidationError('Canvas sizes differ: {} vs {}'.format(src_spec.canvas, tgt_spec.canvas))
    logger.info('Generating glyph pair: K=%d, %d + %d samples', src_spec.num_classes,
                src_spec.num_classes * src_spec.samples_per_class, tgt_spec.num_classes * tgt_spec.samples_per_class)
    return generate_glyph_domain(src_spec, SOURCE), generate_glyph_domain(tgt_spec, TARGET)


def _blob_domain(K, priors, means, spread, n, seed, stream, role, params):
    rng = np.random.default_rng([seed, stream])
    labels = rng.choice(K, size=n, p=priors)
    points = means[labels] + spread * rng.standard_normal((n, means.shape[1]))
    points = points.astype(np.float32).astype(np.float64)
    metadata = {'generator': 'blob', 'params': params, 'seed': seed}
    return DomainDataset(points, labels, role, K, None, None, metadata)


def generate_blob_pair(K, source_priors, target_priors, means, spread, n, seed):
    """ Pure label shift: same Gaussian clusters, different label priors. """
    source_priors = np.asarray(source_priors, dtype=np.float64)
    target_priors = np.asarray(target_priors, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    if spread < 0:
        raise ValidationError('spread must be >= 0, got {}'.format(spread))
    for name, priors in (('source_priors', source_priors), ('target_priors', target_priors)):
        if priors.shape != (K,) or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValidationError('{} must be a probability vector of length {}'.format(name, K))
    if means.ndim != 2 or means.shape[0] != K:
        raise ValidationError('Need {} means, got shape {}'.format(K, means.shape))
    if n < 1:
        raise ValidationError('n must be >= 1')
    params = {'K': int(K), 'source_priors': source_priors.tolist(), 'target_priors': target_priors.tolist(),
              'means': means.tolist(), 'spread': float(spread), 'n': int(n), 'seed': int(seed)}
    source = _blob_domain(K, source_priors, means, spread, n, seed, 0, SOURCE, params)
    target = _blob_domain(K, target_priors, means, spread, n, seed, 1, TARGET, params)
    return source, target


def outlier_pool(style, n, seed, height=16, width=16):
    """ Images far from the glyph manifold, for the target-with-outliers benchmark. """
    if style not in OUTLIER_STYLES:
        raise ValidationError('Unknown outlier style {!r}'.format(style))
    if n < 1:
        raise ValidationError('Outlier pool needs n >= 1')
    rows, cols = np.mgrid[0:height, 0:width]
    images = np.empty((n, height, width))
    for index in range(n):
        rng = np.random.default_rng([seed, index, 99])
        if style == 'blank':
            images[index] = float(rng.integers(2))
        elif style == 'checker':
            images[index] = ((rows + cols + rng.integers(2)) % 2).astype(np.float64)
        else:
            images[index] = 1.0 - rng.random((height, width))
    return ImageBatch(images.astype(np.float32).astype(np.float64))


def regenerate(metadata, domain_role):
    """ Rebuild a generated dataset from its metadata. """
    generator = metadata.get('generator')
    if generator == 'glyph':
        return generate_glyph_domain(GlyphDomainSpec(**metadata['spec']), domain_role)
    if generator == 'blob':
        p = metadata['params']
        source, target = generate_blob_pair(p['K'], p['source_priors'], p['target_priors'], p['means'],
                                            p['spread'], p['n'], p['seed'])
        return source if domain_role == SOURCE else target
    raise ValidationError('Cannot regenerate dataset from generator {!r}'.format(generator))


def _u32_labels(values):
    values = np.asarray(values, dtype=np.int64)
    return np.where(values == OUTLIER_LABEL, UINT32_SENTINEL, values).astype('<u4')


def _labels_from_u32(raw):
    values = raw.astype(np.int64)
    return np.where(values == UINT32_SENTINEL, OUTLIER_LABEL, values)


def save_dataset(ds, path):
    """ Write ds as a dataset directory.
        Inputs:
            ds [DomainDataset]: dataset to write
            path [str]: directory, created if missing
        Files:
            meta.json, images.f32le (row-major, LE float32), labels.u32le,
            ids.u32le and sublabels.u32le when present. Label -1 is stored
            as 0xFFFFFFFF.
    """
    os.makedirs(path, exist_ok=True)
    meta = {
        'domain_role': ds.domain_role,
        'class_count': int(ds.class_count),
        'count': len(ds),
        'geometry': list(ds.geometry),
        'counts': ds.counts().tolist(),
        'outliers': int(np.sum(~ds.labeled_mask)),
        'has_sublabels': ds.sublabels is not None,
        'seed': ds.metadata.get('seed'),
        'metadata': ds.metadata,
    }
    with open(os.path.join(path, META_FILE), 'w') as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
    with open(os.path.join(path, IMAGES_FILE), 'wb') as handle:
        handle.write(ds.samples.astype('<f4').tobytes(order='C'))
    with open(os.path.join(path, LABELS_FILE), 'wb') as handle:
        handle.write(_u32_labels(ds.labels).tobytes())
    with open(os.path.join(path, IDS_FILE), 'wb') as handle:
        handle.write(ds.sample_ids.astype('<u4').tobytes())
    if ds.sublabels is not None:
        with open(os.path.join(path, SUBLABELS_FILE), 'wb') as handle:
            handle.write(_u32_labels(ds.sublabels).tobytes())
    logger.info('Wrote %d %s samples to %s', len(ds), ds.domain_role, path)


def _read_array(path, dtype, count):
    raw = np.fromfile(path, dtype=dtype)
    if raw.size != count:
        raise ValidationError('{} holds {} values, expected {}'.format(path, raw.size, count))
    return raw


def load_dataset(path):
    meta_path = os.path.join(path, META_FILE)
    if not os.path.isfile(meta_path):
        raise ValidationError('No dataset at {} (missing {})'.format(path, META_FILE))
    with open(meta_path) as handle:
        try:
            meta = json.load(handle)
        except json.JSONDecodeError as error:
            raise ValidationError('{} is not valid JSON: {}'.format(meta_path, error))
    try:
        count, geometry = int(meta['count']), tuple(int(extent) for extent in meta['geometry'])
        role, class_count = meta['domain_role'], int(meta['class_count'])
    except KeyError as error:
        raise ValidationError('{} is missing key {}'.format(meta_path, error))
    except (TypeError, ValueError) as error:
        raise ValidationError('{} has a malformed field: {}'.format(meta_path, error))
    samples = _read_array(os.path.join(path, IMAGES_FILE), '<f4', count * int(np.prod(geometry)))
    labels = _labels_from_u32(_read_array(os.path.join(path, LABELS_FILE), '<u4', count))
    sample_ids = _read_array(os.path.join(path, IDS_FILE), '<u4', count).astype(np.int64)
    sublabels = None
    if meta.get('has_sublabels'):
        sublabels = _labels_from_u32(_read_array(os.path.join(path, SUBLABELS_FILE), '<u4', count))
    return DomainDataset(samples.reshape((count,) + geometry).astype(np.float64), labels, role,
                         class_count, sublabels, sample_ids, meta.get('metadata', {}))

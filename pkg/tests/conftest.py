import numpy as np
import pytest

from instapbm.data_synth import GlyphDomainSpec, generate_glyph_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_glyph_specs():
    source = GlyphDomainSpec(num_classes=4, substyles=2, samples_per_class=12, seed=3)
    target = GlyphDomainSpec(num_classes=4, substyles=2, samples_per_class=12, seed=4,
                             stroke_thickness=2.2, background=0.25, noise=0.12)
    return source, target


@pytest.fixture
def glyph_pair(small_glyph_specs):
    return generate_glyph_pair(*small_glyph_specs)

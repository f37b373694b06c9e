# tests/conftest.py
import numpy as np
import pytest

from app.core import AcquisitionParams, SequenceKind
from app.phantom import brain2d_spec, make_phantom


@pytest.fixture
def mprage():
    return AcquisitionParams(SequenceKind.MPRAGE, te=0.003, tr=2.3, ti=0.9)


@pytest.fixture
def spin_echo():
    return AcquisitionParams(SequenceKind.SPIN_ECHO, te=0.08, tr=4.0)


@pytest.fixture
def flair():
    return AcquisitionParams(SequenceKind.FLAIR, te=0.1, tr=9.0, ti=2.4)


@pytest.fixture
def protocol(mprage, spin_echo, flair):
    """Protocolo de tres contrastes usado en los ajustes de ida y vuelta."""
    return [mprage, spin_echo, flair]


@pytest.fixture
def small_spec():
    return brain2d_spec((48, 40))


@pytest.fixture
def small_phantom(small_spec):
    return make_phantom(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

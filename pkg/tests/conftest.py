import numpy as np
import pytest

from bpdl.model import DispersalKernel, ModelSpec, ScalarField, SeparableKernel, TraitSpace


def logistic_model(b=2.0, d=1.0, alpha=1.0, n=1) -> ModelSpec:
    return ModelSpec(TraitSpace((0.0,), (1.0,)), ScalarField.constant(b), ScalarField.constant(d),
                     SeparableKernel.constant(alpha), DispersalKernel("point_mass"), scale=n)


def bump_model(n=1, family="truncated_gaussian", scale=0.1) -> ModelSpec:
    return ModelSpec(
        TraitSpace((0.0,), (1.0,)),
        ScalarField.gaussian_bump([0.5], 0.2, 1.0, 1.0),
        ScalarField.constant(0.5),
        SeparableKernel(((ScalarField.affine([0.5], 0.5), ScalarField.gaussian_bump([0.3], 0.3, 1.0, 0.2)),)),
        DispersalKernel(family, scale),
        scale=n,
    )


def planar_model(n=1, family="truncated_gaussian", scale=0.08) -> ModelSpec:
    return ModelSpec(
        TraitSpace((0.0, 0.0), (1.0, 1.0)),
        ScalarField.gaussian_bump([0.5, 0.5], 0.3, 1.0, 1.0),
        ScalarField.affine([0.2, 0.1], 0.3),
        SeparableKernel((
            (ScalarField.constant(1.0), ScalarField.gaussian_bump([0.4, 0.6], 0.25, 0.8, 0.2)),
            (ScalarField.affine([0.5, 0.0], 0.2), ScalarField.constant(0.5)),
        )),
        DispersalKernel(family, scale),
        scale=n,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def logistic():
    return logistic_model()


@pytest.fixture
def bump():
    return bump_model()


@pytest.fixture
def planar():
    return planar_model()

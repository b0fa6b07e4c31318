import numpy as np
import pytest

from xrecon.sim import (MDHSimSpec, PtychoSimSpec, TomoSimSpec, make_probe, mdh_model, poisson_noise,
                        raster_positions, simulate_mdh, simulate_ptycho, simulate_tomography, spokes, turbulence)
from xrecon.optics import PropagationSpec


def test_phantom_ranges(rng):
    s = spokes(64)
    assert s.min() >= 0.6 - 1e-12 and s.max() <= 1.0
    assert s[0, 0] == pytest.approx(1.0)
    t = turbulence(64, rng)
    assert t.min() == pytest.approx(-0.5) and t.max() == pytest.approx(0.5)


def test_mdh_noiseless_matches_model_and_keeps_reference_frame():
    spec = MDHSimSpec(n=32, photons=None, seed=2)
    ds, truth = simulate_mdh(spec)
    assert ds.data.shape == (1, 4, 32, 32)
    np.testing.assert_array_equal(truth["affine_params"][0], [0, 0, 0, 1, 1, 0, 0])
    assert np.all(np.abs(truth["affine_params"][1:, 5:]) <= spec.max_shift)
    preds = mdh_model(spec).forward(truth["object"], {"distances": truth["distances"],
                                                      "affine_params": truth["affine_params"]}, 0, [0, 1, 2, 3])
    np.testing.assert_allclose(np.stack(preds), ds.data[0])
    np.testing.assert_allclose(ds.metadata["distances"], spec.initial_distances)
    # unit optical thickness per slice: the transmission is magnitude * exp(i phase)
    assert spec.slice_thickness * 2 * np.pi / spec.wavelength == pytest.approx(1.0)


def test_mdh_noise_level_follows_photon_count():
    quiet, _ = simulate_mdh(MDHSimSpec(n=32, photons=None, distort=False))
    noisy, _ = simulate_mdh(MDHSimSpec(n=32, photons=400.0, distort=False))
    rel = np.std(noisy.data - quiet.data) / np.sqrt(np.mean(quiet.data) / 100.0)
    assert rel == pytest.approx(1.0, rel=0.1)


def test_poisson_noise_validation(rng):
    with pytest.raises(ValueError):
        poisson_noise(np.ones(3), 0.0, rng)


def test_probe_and_raster():
    p = make_probe(16, "annulus", modes=2)
    assert p.shape == (2, 16, 16, 2)
    spec = PropagationSpec(1e-10, 1e-8)
    p2 = make_probe(16, defocus=1e-6, spec=spec)
    assert np.sum(p2**2) == pytest.approx(np.sum(make_probe(16) ** 2))
    with pytest.raises(ValueError):
        make_probe(16, "square")
    pos = raster_positions(32, 16, 8)
    assert len(pos) == 9 and pos.max() == 16


def test_ptycho_and_tomography_shapes():
    ds, truth = simulate_ptycho(PtychoSimSpec(object_n=32, probe_n=16, step=8))
    assert ds.data.shape == (1, 9, 16, 16)
    assert np.all(np.abs(truth["position_errors"]) <= 2.0 + 1e-9)
    ds, truth = simulate_tomography(TomoSimSpec(shape=(4, 12, 12), n_angles=3))
    assert ds.data.shape == (3, 2, 4, 6)
    assert np.all(ds.data <= 1.0 + 1e-12)

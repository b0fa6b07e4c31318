import numpy as np
import pytest

from xrecon import autodiff as ad
from xrecon.models import (
    FootprintError,
    Geometry,
    MDHModel,
    ModelConfig,
    PtychographyModel,
    SparseMultisliceModel,
    TomographyModel,
    assemble_loss,
    loss_lsq,
    loss_poisson,
    make_model,
    multimode_intensity,
)
from xrecon.optics import PropagationSpec, fraunhofer_propagate, fresnel_propagate, fourier_shift, modulate
from xrecon.tensor import ComplexPair

LAM, PIX = 1e-10, 1e-8


def gaussian_probe(n=8, modes=1, rng=None):
    y, x = np.mgrid[:n, :n] - (n - 1) / 2
    amp = np.exp(-(x**2 + y**2) / 8.0)
    p = np.zeros((modes, n, n, 2))
    for m in range(modes):
        p[m, ..., 0] = amp * np.cos(0.1 * m * x)
        p[m, ..., 1] = amp * np.sin(0.3 * y + m)
    return p


def ptycho_setup(obj_n=12, probe_n=8, lz=2, modes=1):
    pos = np.array([[0, 0], [0, 4], [4, 0], [4, 4]], float)
    cfg = ModelConfig(LAM, PIX)
    model = PtychographyModel(cfg, Geometry(np.zeros(1), pos), (obj_n, obj_n, lz, 2), (modes, probe_n, probe_n, 2))
    return model, {"probe": gaussian_probe(probe_n, modes)}


def test_vacuum_ptycho_is_far_field_of_probe():
    model, params = ptycho_setup()
    out = model.forward(np.zeros(model.object_shape), params, 0, range(4))
    probe = ComplexPair(params["probe"][0, ..., 0], params["probe"][0, ..., 1])
    spec = PropagationSpec(LAM, PIX)
    # vacuum multislice is free-space propagation, invisible in the far field intensity
    ref = fraunhofer_propagate(fresnel_propagate(probe, spec.at(2 * PIX))).abs2()
    for i in out:
        np.testing.assert_allclose(i, ref, atol=1e-12)
        np.testing.assert_allclose(i, fraunhofer_propagate(probe).abs2(), atol=1e-12)


def test_ptycho_matches_compositional_script(rng):
    model, params = ptycho_setup(lz=2, modes=2)
    obj = rng.uniform(0, 1e-3, size=model.object_shape)
    params["probe_pos_correction"] = np.array([[0.3, -0.2], [0, 0], [0.1, 0.1], [-0.4, 0.3]])
    out = model.forward(obj, params, 0, [1, 3])
    spec = PropagationSpec(LAM, PIX)
    k = 2 * np.pi / LAM
    for i, t in enumerate([1, 3]):
        y0, x0 = model.geometry.positions[t].astype(int)
        chunk = obj[y0 : y0 + 8, x0 : x0 + 8]
        total = 0
        for m in range(2):
            psi = ComplexPair(params["probe"][m, ..., 0], params["probe"][m, ..., 1])
            psi = fourier_shift(psi, params["probe_pos_correction"][t])
            for j in range(2):
                psi = modulate(psi, (chunk[:, :, j, 0], chunk[:, :, j, 1]), "delta_beta", k, PIX)
                psi = fresnel_propagate(psi, spec.at(PIX))
            total = total + fraunhofer_propagate(psi).abs2()
        np.testing.assert_allclose(out[i], total, atol=1e-12)


def test_integer_positions_extract_by_slicing(rng):
    model, params = ptycho_setup(lz=1)
    obj = rng.uniform(0, 1e-3, size=model.object_shape)
    a = model.predict(obj, params, 0, [3])[0]
    b = model.predict(obj[4:12, 4:12], params, 0, [3], origin=(4, 4))[0]
    np.testing.assert_array_equal(a, b)


def test_footprint_outside_object_names_tile():
    model, params = ptycho_setup()
    with pytest.raises(FootprintError, match="tile 3"):
        model.predict(np.zeros((10, 10, 2, 2)), params, 0, [3])


def test_global_phase_invariance(rng):
    model, params = ptycho_setup(modes=2)
    obj = rng.uniform(0, 1e-3, size=model.object_shape)
    base = model.forward(obj, params, 0, range(4))
    z = params["probe"][..., 0] + 1j * params["probe"][..., 1]
    z = z * np.exp(0.7j)
    rotated = {"probe": np.stack([z.real, z.imag], -1)}
    for a, b in zip(base, model.forward(obj, rotated, 0, range(4))):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_multimode_intensity(rng):
    f = ComplexPair(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    np.testing.assert_allclose(multimode_intensity([f]), f.abs2())
    np.testing.assert_allclose(multimode_intensity([f, f]), 2 * f.abs2())
    modes = [ComplexPair(rng.normal(size=(2, 2)), rng.normal(size=(2, 2))) for _ in range(3)]
    loop = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for m in modes:
                loop[i, j] += m.re[i, j] ** 2 + m.im[i, j] ** 2
    np.testing.assert_allclose(multimode_intensity(modes), loop)


def test_lsq_values_and_gradient(rng):
    assert loss_lsq(np.full((3, 3), 2.0), np.full((3, 3), 2.0)) <= 1e-15
    assert loss_lsq(np.full((2, 2), 4.0), np.ones((2, 2))) == pytest.approx(1.0, abs=1e-8)
    i_pred = rng.uniform(0.5, 2, size=(3, 4))
    i_meas = rng.uniform(0.5, 2, size=(3, 4))
    tape = ad.Tape()
    p = tape.leaf("p", i_pred)
    g = ad.gradient(tape, loss_lsq(p, i_meas), ["p"])["p"]
    analytic = (np.sqrt(i_pred) - np.sqrt(i_meas)) / (12 * np.sqrt(i_pred))
    np.testing.assert_allclose(g, analytic, rtol=1e-7)
    with pytest.raises(ValueError):
        loss_lsq(np.ones(2), np.array([1.0, -1.0]))


def test_poisson_values_and_stationarity():
    assert loss_poisson(np.ones((2, 2)), np.ones((2, 2))) == pytest.approx(1.0)
    i_pred = np.array([[1.0, 2.0], [0.5, 3.0]])
    i_meas = np.array([[2.0, 1.0], [1.0, 0.0]])
    hand = np.mean(i_pred - i_meas * np.log(i_pred + 1e-9))
    assert loss_poisson(i_pred, i_meas) == pytest.approx(hand, abs=1e-14)
    tape = ad.Tape()
    p = tape.leaf("p", i_meas + 1.0)
    g = ad.gradient(tape, loss_poisson(p, i_meas + 1.0), ["p"])["p"]
    assert np.abs(g).max() < 1e-9


def test_assemble_loss():
    assert assemble_loss(1.0, [], None) == 1.0
    assert assemble_loss(1.0, [(0.0, lambda o: 0.5)], None) == 1.0
    assert assemble_loss(1.0, [(0.01, lambda o: 0.5)], None) == pytest.approx(1.005)
    with pytest.raises(ValueError):
        assemble_loss(1.0, [(-1.0, lambda o: 0.5)], None)


def mdh_setup(n=16, kappa=False):
    cfg = ModelConfig(7.08e-11, 1e-6, kappa_mode=kappa, dz=7.08e-11 / (2 * np.pi))
    shape = (n, n, 1, 1 if kappa else 2)
    model = MDHModel(cfg, Geometry(), shape, 3)
    params = {"distances": np.array([0.4, 0.6, 0.8])}
    return model, params


def test_mdh_vacuum_is_flat():
    model, params = mdh_setup()
    params["affine_params"] = np.tile([0.01, 0.0, 0.0, 1.01, 0.99, 0.5, -0.5], (3, 1))
    for i in model.forward(np.zeros(model.object_shape), params, 0, range(3)):
        np.testing.assert_allclose(i, 1.0, atol=1e-12)


def test_mdh_kappa_mode_matches_two_channel(rng):
    two, params = mdh_setup()
    one, _ = mdh_setup(kappa=True)
    kappa = 0.05
    beta = rng.uniform(0, 0.1, size=(16, 16, 1, 1))
    obj2 = np.concatenate([beta / kappa, beta], axis=-1)
    a = two.forward(obj2, params, 0, range(3))
    b = one.forward(beta, {**params, "kappa_log": np.array([np.log(kappa)])}, 0, range(3))
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_kappa_requires_delta_beta():
    with pytest.raises(ValueError):
        ModelConfig(LAM, PIX, representation="real_imag", kappa_mode=True)


def tomo_setup(n=4, pure=True):
    cfg = ModelConfig(LAM, PIX, pure_projection=pure)
    geo = Geometry(np.zeros(1), tile_windows=[(0, n, 0, n)])
    return TomographyModel(cfg, geo, (n, n, n, 2))


def test_tomo_vacuum_and_beer_lambert():
    model = tomo_setup()
    np.testing.assert_allclose(model.forward(np.zeros(model.object_shape), {}, 0, [0])[0], 1.0)
    obj = np.zeros(model.object_shape)
    obj[1, 2, :, 1] = [1e-6, 2e-6, 0.0, 3e-6]
    obj[1, 2, :, 0] = 5e-6
    i = model.forward(obj, {}, 0, [0])[0]
    k = 2 * np.pi / LAM
    assert abs(-np.log(i[1, 2]) / (2 * k * PIX) - 6e-6) < 1e-8 * 6e-6 * 1e3
    assert abs(i[0, 0] - 1.0) < 1e-15


def test_tomo_y_constant_phantom_rows_identical(rng):
    model = TomographyModel(ModelConfig(LAM, PIX, pure_projection=True),
                            Geometry(np.array([0.0, 0.6])), (5, 6, 6, 2))
    col = rng.uniform(0, 1e-4, size=(1, 6, 6, 2))
    obj = np.repeat(col, 5, axis=0)
    for angle in (0, 1):
        i = model.forward(obj, {}, angle, [0])[0]
        np.testing.assert_allclose(i, np.repeat(i[:1], 5, axis=0), atol=1e-14)


def sparse_setup():
    pos = np.array([[0, 0], [2, 2]], float)
    cfg = ModelConfig(LAM, PIX)
    model = SparseMultisliceModel(cfg, Geometry(np.zeros(1), pos), (10, 10, 2, 2), (1, 8, 8, 2))
    return model, {"probe": gaussian_probe(8), "slice_positions": np.array([0.0, 3e-6])}


def test_sparse_vacuum_second_slice(rng):
    model, params = sparse_setup()
    obj = np.zeros(model.object_shape)
    obj[..., 0, :] = rng.uniform(0, 1e-3, size=(10, 10, 2))
    out = model.forward(obj, params, 0, [1])[0]
    k = 2 * np.pi / LAM
    psi = ComplexPair(params["probe"][0, ..., 0], params["probe"][0, ..., 1])
    psi = modulate(psi, (obj[2:10, 2:10, 0, 0], obj[2:10, 2:10, 0, 1]), "delta_beta", k, PIX)
    psi = fresnel_propagate(psi, PropagationSpec(LAM, PIX, 3e-6))
    np.testing.assert_allclose(out, fraunhofer_propagate(psi).abs2(), atol=1e-12)


def test_sparse_needs_two_slices():
    with pytest.raises(ValueError):
        SparseMultisliceModel(ModelConfig(LAM, PIX), Geometry(np.zeros(1), np.zeros((1, 2))), (8, 8, 1, 2), (1, 8, 8, 2))


def test_model_registry():
    m = make_model("tomography", ModelConfig(LAM, PIX), Geometry(), (4, 4, 4, 2))
    assert m.name == "tomography"
    with pytest.raises(ValueError):
        make_model("bragg", ModelConfig(LAM, PIX), Geometry(), (4, 4, 4, 2))


def _loss(model, data, tiles):
    def f(p):
        obj = p["object"]
        params = {k: v for k, v in p.items() if k != "object"}
        preds = model.forward(obj, params, 0, tiles)
        return model.mismatch(preds, data, 0, tiles)
    return f


def test_tomo_tilt_gradient(rng):
    model = TomographyModel(ModelConfig(LAM, PIX, pure_projection=True), Geometry(np.array([0.3])), (4, 5, 5, 2))
    obj = rng.uniform(0, 1e-3, size=model.object_shape)
    data = rng.uniform(0.5, 1.5, size=(1, 1, 4, 5))
    # off-grid angles: at exactly zero the bilinear sampler has a kink
    point = {"object": obj, "tilts": np.array([[0.05], [0.02], [0.03]])}
    assert ad.grad_check(_loss(model, data, [0]), point, wrt=["tilts"], step=1e-7) < 1e-4

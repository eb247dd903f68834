"""Tangent-space estimation, projector algebra, and the basis cache."""

import struct

import numpy as np
import pytest

from fairwash.attack import FlatManifoldSpec, analytic_fairwash
from fairwash.dataio import CREDIT_NORMAL, CREDIT_OFFSET, credit_model, gen_credit
from fairwash.explain import ExplanationMap, IntGradConfig, intgrad_maps
from fairwash.manifold import (ProjFormatError, Projector, ProjectorCache,
                               build_hyperplane_cache, decoder_jacobian,
                               decoder_tangent, generalized_project,
                               hyperplane_tangent, knn_indices,
                               project_gradient_maps, reconstruction_sweep,
                               reorthonormalize, tsp_intgrad_maps, tsp_map,
                               write_projector_cache)
from fairwash.models import (AutoencoderModel, Layer, MlpModel, TrainConfig,
                             init_mlp, predict, train_autoencoder)
from fairwash.explain import gradient_maps
from fairwash.rng import RngState
from fairwash.tape import ContractError


def _plane_data(rng, n, dim, rank, noise=0.0):
    q, _ = np.linalg.qr(rng.normal(size=(dim, rank)))
    z = rng.normal(size=(n, rank)) * np.array([3.0, 1.5][:rank] + [1.0] * max(0, rank - 2))
    x = z @ q.T
    if noise:
        x = x + noise * rng.normal(size=x.shape)
    return x, q


# ---------------------------------------------------------------------------
# projector type
# ---------------------------------------------------------------------------


def test_projector_algebra():
    rng = RngState(1).stream("proj")
    q, _ = np.linalg.qr(rng.normal(size=(7, 3)))
    proj = Projector(q)
    p = proj.matrix()
    assert proj.dim == 7 and proj.rank == 3
    assert np.max(np.abs(p - p.T)) == 0.0
    assert np.max(np.abs(p @ p - p)) <= 1e-12
    assert np.trace(p) == pytest.approx(3.0, abs=1e-12)
    h = rng.normal(size=7)
    assert np.linalg.norm(proj.apply(h)) <= np.linalg.norm(h) + 1e-12
    batch = rng.normal(size=(5, 7))
    row_by_row = np.stack([proj.apply(r) for r in batch])
    assert np.max(np.abs(proj.apply(batch) - row_by_row)) <= 1e-12


def test_projector_rejects_non_orthonormal_bases():
    with pytest.raises(ContractError):
        Projector(np.ones((4, 2)))
    with pytest.raises(ContractError):
        Projector(np.ones((4,)))


def test_reorthonormalize_restores_f32_bases():
    rng = RngState(2).stream("reorth")
    q, _ = np.linalg.qr(rng.normal(size=(30, 8)))
    q32 = q.astype(np.float32).astype(np.float64)
    with pytest.raises(ContractError):
        Projector(q32)
    fixed = reorthonormalize(q32)
    proj = Projector(fixed)
    assert np.max(np.abs(proj.matrix() - q @ q.T)) <= 1e-5
    # already-orthonormal bases come back unchanged up to rounding
    assert np.max(np.abs(reorthonormalize(q) - q)) <= 1e-13


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------


def test_knn_finds_the_true_neighbours():
    base = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [5.0, 5.0]])
    idx = knn_indices(np.array([[0.1, 0.0]]), base, 2)
    assert idx.tolist() == [[0, 1]]
    idx_ex = knn_indices(np.array([[0.0, 0.0]]), base, 2, exclude=[0])
    assert idx_ex.tolist() == [[1, 2]]


def test_knn_breaks_ties_toward_lower_indices_and_chunks_agree():
    base = np.zeros((6, 3))  # all points identical: pure tie-breaking
    idx = knn_indices(np.ones((1, 3)), base, 4)
    assert idx.tolist() == [[0, 1, 2, 3]]
    rng = RngState(3).stream("knn")
    queries = rng.normal(size=(10, 4))
    big = rng.normal(size=(50, 4))
    a = knn_indices(queries, big, 7, chunk=3)
    b = knn_indices(queries, big, 7, chunk=256)
    assert np.array_equal(a, b)


def test_knn_contracts():
    base = np.zeros((5, 2))
    with pytest.raises(ContractError):
        knn_indices(np.zeros((1, 3)), base, 2)
    with pytest.raises(ContractError):
        knn_indices(np.zeros((1, 2)), base, 0)
    with pytest.raises(ContractError):
        knn_indices(np.zeros((1, 2)), base, 5, exclude=[0])


# ---------------------------------------------------------------------------
# hyperplane method
# ---------------------------------------------------------------------------


def test_hyperplane_tangent_recovers_an_exact_plane():
    rng = RngState(4).stream("plane")
    x, q = _plane_data(rng, 80, dim=9, rank=2)
    proj = hyperplane_tangent(x[0], x[1:], k=20, d=2)
    assert np.max(np.abs(proj.matrix() - q @ q.T)) <= 1e-10
    assert np.array_equal(proj.anchor, x[0])


def test_full_rank_tangent_is_the_identity():
    rng = RngState(5).stream("full")
    x = rng.normal(size=(40, 5))
    proj = hyperplane_tangent(x[0], x[1:], k=20, d=5)
    assert np.max(np.abs(proj.matrix() - np.eye(5))) <= 1e-10


def test_rank_deficient_neighbourhood_is_refused():
    rng = RngState(6).stream("rank")
    x, _ = _plane_data(rng, 30, dim=8, rank=2)
    with pytest.raises(ContractError, match="rank"):
        hyperplane_tangent(x[0], x[1:], k=10, d=5)
    with pytest.raises(ContractError):
        hyperplane_tangent(x[0], x[1:], k=1, d=2)  # k < d
    with pytest.raises(ContractError):
        hyperplane_tangent(x[0], x[1:], k=5, d=0)


def test_reconstruction_sweep_is_monotone_and_flat_past_the_rank():
    rng = RngState(7).stream("sweep")
    x, _ = _plane_data(rng, 60, dim=10, rank=2, noise=1e-8)
    curve = reconstruction_sweep(x[0], x[1:], k=25, d_max=6)
    assert curve.shape == (6,)
    assert np.all(np.diff(curve) <= 1e-12)
    assert curve[0] > 1.0  # one direction cannot explain the plane
    assert curve[1] <= 1e-10  # two directions explain it entirely


# ---------------------------------------------------------------------------
# autoencoder method
# ---------------------------------------------------------------------------


def test_linear_decoder_jacobian_is_the_weight_transpose():
    rng = RngState(8).stream("lin")
    w = rng.normal(size=(3, 8))
    dec = MlpModel([Layer(w, rng.normal(size=8), "none")])
    z = rng.normal(size=3)
    jac = decoder_jacobian(dec, z)
    assert np.array_equal(jac, w.T)
    ae = AutoencoderModel(MlpModel([Layer(rng.normal(size=(8, 3)), np.zeros(3), "none")]), dec)
    proj = decoder_tangent(ae, rng.normal(size=8), d=3)
    q, _ = np.linalg.qr(w.T)
    assert np.max(np.abs(proj.matrix() - q @ q.T)) <= 1e-10


def test_relu_decoder_jacobian_matches_finite_differences():
    dec = init_mlp([3, 10, 6], "relu", seed=9)
    z = RngState(9).stream("z").normal(size=3)
    jac = decoder_jacobian(dec, z)
    eps = 1e-6
    for j in range(3):
        zp, zm = z.copy(), z.copy()
        zp[j] += eps
        zm[j] -= eps
        col = (predict(dec, zp) - predict(dec, zm)) / (2 * eps)
        assert np.max(np.abs(jac[:, j] - col)) <= 1e-5


def test_trained_autoencoder_agrees_with_the_hyperplane_estimate():
    rng = RngState(10).stream("agree")
    x, q = _plane_data(rng, 300, dim=7, rank=2)
    enc = init_mlp([7, 2], "none", seed=10, tag="enc")
    dec = init_mlp([2, 7], "none", seed=10, tag="dec")
    cfg = TrainConfig(optimizer="adam", learning_rate=0.02, epochs=150,
                      batch_size=64, seed=10)
    ae, _ = train_autoencoder(AutoencoderModel(enc, dec), x, cfg)
    p_ae = decoder_tangent(ae, x[0], d=2).matrix()
    p_hp = hyperplane_tangent(x[0], x[1:], k=30, d=2).matrix()
    assert np.max(np.abs(p_hp - q @ q.T)) <= 1e-10
    assert np.max(np.abs(p_ae - p_hp)) <= 1e-2
    with pytest.raises(ContractError):
        decoder_tangent(ae, x[0], d=3)  # beyond the code dimension


# ---------------------------------------------------------------------------
# generalized projector and tsp maps
# ---------------------------------------------------------------------------


def test_generalized_projector_zeroes_dead_input_columns():
    rng = RngState(11).stream("gen")
    q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    proj = Projector(q)
    x = rng.normal(size=6)
    x[2] = 0.0
    h = rng.normal(size=6)
    out = generalized_project(proj, x, h)
    assert out[2] == 0.0
    h2 = h.copy()
    h2[2] = 123.0  # the dead column must not influence anything
    assert np.array_equal(out, generalized_project(proj, x, h2))
    # with strictly positive x it reduces to x * P (h / x)
    xp = np.abs(rng.normal(size=6)) + 0.5
    ref = xp * proj.apply(h / xp)
    assert np.max(np.abs(generalized_project(proj, xp, h) - ref)) <= 1e-12


def test_tsp_gradient_map_hides_any_fairwashing_coefficient():
    ds = gen_credit(500, seed=12)
    model = credit_model()
    spec = FlatManifoldSpec(CREDIT_NORMAL[None, :], [CREDIT_OFFSET])
    _, _, vh = np.linalg.svd(spec.normals, full_matrices=True)
    proj = Projector(np.ascontiguousarray(vh[1:].T))
    base = proj.apply(gradient_maps(model, ds.inputs[:50]))
    for lam in (1.0, 1e3, 1e6):
        attacked = analytic_fairwash(model, spec, [lam])
        tsp = proj.apply(gradient_maps(attacked, ds.inputs[:50]))
        assert np.max(np.abs(tsp - base)) <= 1e-9 * max(1.0, lam / 1e3)


def test_tsp_map_dispatch_and_contracts():
    rng = RngState(13).stream("tsp")
    model = init_mlp([6, 8, 3], "relu", seed=13)
    x = rng.normal(size=6)
    q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    proj = Projector(q, anchor=x)

    grad_map = ExplanationMap(rng.normal(size=6), "gradient", 1)
    out = tsp_map(grad_map, proj)
    assert out.method == "tsp-gradient"
    assert np.max(np.abs(out.values - proj.apply(grad_map.values))) <= 1e-12

    xg_map = ExplanationMap(rng.normal(size=6), "xgrad", 1)
    out_xg = tsp_map(xg_map, proj)  # anchor stands in for x
    assert np.max(np.abs(out_xg.values - generalized_project(proj, x, xg_map.values))) <= 1e-12

    lrp_map_ = ExplanationMap(rng.normal(size=6), "lrp_eps", 1)
    plain = tsp_map(lrp_map_, proj)
    assert np.max(np.abs(plain.values - proj.apply(lrp_map_.values))) <= 1e-12
    gen = tsp_map(lrp_map_, proj, lrp_generalized=True)
    assert np.max(np.abs(gen.values - generalized_project(proj, x, lrp_map_.values))) <= 1e-12

    ig_vals = intgrad_maps(model, x[None, :], np.array([1]), IntGradConfig(steps=8))[0]
    ig_map = ExplanationMap(ig_vals, "intgrad", 1)
    out_ig = tsp_map(ig_map, proj, model=model, intgrad_cfg=IntGradConfig(steps=8))
    assert out_ig.method == "tsp-intgrad"

    with pytest.raises(ContractError, match="normalize afterwards"):
        tsp_map(ExplanationMap(np.full(6, 1 / 6), "gradient", 0, "abs-sum-one"), proj)
    with pytest.raises(ContractError):
        tsp_map(ExplanationMap(np.ones(4), "gradient", 0), proj)  # dim
    with pytest.raises(ContractError):
        tsp_map(ig_map, proj)  # intgrad without the model
    with pytest.raises(ContractError):
        tsp_map(ExplanationMap(np.ones(6), "shap", 0), proj)
    bare = Projector(q)  # no anchor
    with pytest.raises(ContractError):
        tsp_map(xg_map, bare)


def test_tsp_intgrad_with_identity_projectors_matches_plain_intgrad():
    rng = RngState(14).stream("ig")
    model = init_mlp([5, 9, 3], "relu", seed=14)
    x = rng.normal(size=(4, 5))
    projs = [Projector(np.eye(5)) for _ in range(4)]
    cfg = IntGradConfig(steps=16)
    a = tsp_intgrad_maps(model, x, None, projs, cfg)
    b = intgrad_maps(model, x, None, cfg)
    assert np.max(np.abs(a - b)) <= 1e-12
    with pytest.raises(ContractError):
        tsp_intgrad_maps(model, x, None, projs[:2], cfg)


def test_project_gradient_maps_matches_per_row_projection():
    rng = RngState(15).stream("rows")
    bases = np.stack([np.linalg.qr(rng.normal(size=(6, 2)))[0] for _ in range(5)])
    maps = rng.normal(size=(5, 6))
    out = project_gradient_maps(maps, bases)
    for i in range(5):
        assert np.max(np.abs(out[i] - bases[i] @ (bases[i].T @ maps[i]))) <= 1e-12


# ---------------------------------------------------------------------------
# FWPROJ01 cache
# ---------------------------------------------------------------------------


def test_projector_cache_roundtrip(tmp_path):
    rng = RngState(16).stream("cache")
    bases = {}
    for i in (0, 3, 7):
        q, _ = np.linalg.qr(rng.normal(size=(10, 4)))
        bases[i] = q.astype(np.float32).astype(np.float64)
    path = tmp_path / "c.fwproj"
    write_projector_cache(path, bases)
    cache = ProjectorCache(path)
    assert cache.count == 3 and cache.dim == 10 and cache.rank == 4
    assert cache.indices() == [0, 3, 7]
    for i, q in bases.items():
        assert np.array_equal(cache.basis(i), q)  # f32-representable: lossless
    stacked = cache.basis_batch([0, 7])
    assert stacked.shape == (2, 10, 4)
    proj = cache.projector(3, anchor=np.zeros(10))
    assert proj.rank == 4
    with pytest.raises(ProjFormatError):
        cache.basis(5)
    # re-writing the loaded bases reproduces the file byte for byte
    path2 = tmp_path / "c2.fwproj"
    write_projector_cache(path2, {i: cache.basis(i) for i in cache.indices()})
    assert path.read_bytes() == path2.read_bytes()


def test_projector_cache_rejects_corrupt_files(tmp_path):
    rng = RngState(17).stream("bad")
    q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    path = tmp_path / "c.fwproj"
    write_projector_cache(path, {0: q, 1: q})
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.fwproj"
    bad_magic.write_bytes(b"XXPROJ01" + raw[8:])
    with pytest.raises(ProjFormatError):
        ProjectorCache(bad_magic)

    short = tmp_path / "short.fwproj"
    short.write_bytes(raw[:-7])
    with pytest.raises(ProjFormatError):
        ProjectorCache(short)

    dup = tmp_path / "dup.fwproj"
    body = raw[20:]
    rec = len(body) // 2
    first = body[:rec]
    dup.write_bytes(raw[:20] + first + first)  # same sample index twice
    with pytest.raises(ProjFormatError, match="duplicate"):
        ProjectorCache(dup)

    with pytest.raises(ContractError):
        write_projector_cache(tmp_path / "empty.fwproj", {})


def test_build_hyperplane_cache_matches_direct_estimates(tmp_path):
    rng = RngState(18).stream("hp")
    x, _ = _plane_data(rng, 120, dim=12, rank=3, noise=0.01)
    path = tmp_path / "train.fwproj"
    cache = build_hyperplane_cache(path, x[:5], x, k=15, d=3,
                                   exclude_self=True)
    for i in range(5):
        direct = hyperplane_tangent(x[i], x, k=15, d=3, exclude_index=i)
        assert np.max(np.abs(cache.basis(i) - direct.basis)) <= 1e-6  # f32 storage
        p_cache = cache.projector(i).matrix()
        assert np.max(np.abs(p_cache - direct.matrix())) <= 1e-5

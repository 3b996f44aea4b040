"""Adapter algebra: zero-at-init, merge equivalence, the entropy loss
against closed forms, delta ranks, and serialization."""

import numpy as np
import pytest

from conftest import check_gradients
from lorabench import adapters as A
from lorabench import model
from lorabench import tensor as T
from lorabench.errors import ContractError, ShapeError
from lorabench.tensor import Tensor


@pytest.fixture
def spec_lora():
    return A.AdapterSpec(variant="lora", rank=4, alpha=8.0, targets=("Wq", "Wv"))


@pytest.fixture
def spec_elora():
    return A.AdapterSpec(variant="elora", rank=4, alpha=8.0, targets=("Wq", "Wv"),
                         entropy_weight=0.1)


def _randomize(adapter, seed=0):
    # B starts at zero; give every factor real content for merge tests.
    rng = np.random.default_rng(seed)
    for la in adapter.layers.values():
        la.A.data = rng.normal(0, 0.1, la.A.shape).astype(np.float32)
        la.B.data = rng.normal(0, 0.1, la.B.shape).astype(np.float32)
        if la.E is not None:
            la.E.data = (np.eye(la.E.shape[0]) + rng.normal(0, 0.05, la.E.shape)).astype(np.float32)
    return adapter


def test_spec_validation():
    with pytest.raises(ContractError):
        A.AdapterSpec(variant="dora")
    with pytest.raises(ContractError):
        A.AdapterSpec(rank=0)
    with pytest.raises(ContractError):
        A.AdapterSpec(targets=("Wz",))
    with pytest.raises(ContractError):
        A.AdapterSpec(targets=())
    with pytest.raises(ContractError):
        A.AdapterSpec(entropy_weight=-0.5)
    assert A.AdapterSpec(rank=8, alpha=16.0).scaling == 2.0


def test_zero_at_init_bitwise(tiny_config, tiny_weights, spec_lora, spec_elora):
    rng = np.random.default_rng(8)
    ids = rng.integers(0, tiny_config.vocab_size, size=(2, 7))
    base = model.forward_batch(tiny_weights, ids, tiny_config).data
    for spec in (spec_lora, spec_elora):
        adapter = A.init_adapter(tiny_config, spec, seed=1)
        out = model.forward_batch(tiny_weights, ids, tiny_config, adapter=adapter).data
        assert out.tobytes() == base.tobytes(), f"{spec.variant} perturbs the model at init"


def test_rank_too_large_rejected(tiny_config):
    with pytest.raises(ContractError):
        A.init_adapter(tiny_config, A.AdapterSpec(rank=tiny_config.d_model + 1), seed=0)


def test_merge_matches_adapted_forward(tiny_config, tiny_weights, spec_lora, spec_elora):
    rng = np.random.default_rng(9)
    for spec in (spec_lora, spec_elora):
        adapter = _randomize(A.init_adapter(tiny_config, spec, seed=2), seed=3)
        merged = A.merge_all(tiny_weights, adapter)
        for li in range(tiny_config.n_layers):
            for tgt in spec.targets:
                d_in, _ = A.target_dims(tiny_config, tgt)
                x = Tensor(rng.normal(size=(100, d_in)).astype(np.float32))
                W = tiny_weights[f"layer{li}.{tgt}"]
                adapted = A.adapted_forward(x, W, adapter.layers[(li, tgt)], spec.scaling).data
                folded = T.matmul(x, merged[f"layer{li}.{tgt}"]).data
                scale = np.abs(adapted).max()
                assert np.abs(adapted - folded).max() / scale < 1e-5, (
                    f"{spec.variant} merge mismatch at layer{li}.{tgt}")


def test_merge_leaves_untargeted_weights_alone(tiny_config, tiny_weights, spec_lora):
    adapter = _randomize(A.init_adapter(tiny_config, spec_lora, seed=4))
    merged = A.merge_all(tiny_weights, adapter)
    assert set(merged) == set(tiny_weights)
    for name in tiny_weights:
        is_target = any(name.endswith("." + t) for t in spec_lora.targets)
        if not is_target:
            assert merged[name].data.tobytes() == tiny_weights[name].data.tobytes()


def test_elora_identity_e_equals_lora(tiny_config, tiny_weights):
    # With E = I the entropy variant computes exactly the plain low-rank path.
    lora = A.init_adapter(tiny_config, A.AdapterSpec(variant="lora", rank=4), seed=5)
    elora = A.init_adapter(tiny_config, A.AdapterSpec(variant="elora", rank=4), seed=5)
    rng = np.random.default_rng(10)
    for (key, la), (_, le) in zip(sorted(lora.layers.items()), sorted(elora.layers.items())):
        assert la.A.data.tobytes() == le.A.data.tobytes()
        la.B.data = rng.normal(0, 0.1, la.B.shape).astype(np.float32)
        le.B.data = la.B.data.copy()
    ids = rng.integers(0, tiny_config.vocab_size, size=(2, 6))
    out_l = model.forward_batch(tiny_weights, ids, tiny_config, adapter=lora).data
    out_e = model.forward_batch(tiny_weights, ids, tiny_config, adapter=elora).data
    assert np.allclose(out_l, out_e, atol=1e-6)


def test_delta_matrix_oracle(tiny_config, spec_elora):
    adapter = _randomize(A.init_adapter(tiny_config, spec_elora, seed=6), seed=7)
    for (li, tgt), la in adapter.layers.items():
        want = spec_elora.scaling * (la.E.data.astype(np.float64)
                                     @ la.A.data.astype(np.float64)
                                     @ la.B.data.astype(np.float64))
        got = A.delta_matrix(adapter, li, tgt)
        assert np.allclose(got, want, rtol=1e-5, atol=1e-7)


def test_delta_rank_bounded_by_r(tiny_config, spec_lora):
    adapter = _randomize(A.init_adapter(tiny_config, spec_lora, seed=8), seed=9)
    delta = A.delta_matrix(adapter, 0, "Wq")
    sigma = np.linalg.svd(delta.astype(np.float64), compute_uv=False)
    r = spec_lora.rank
    assert sigma[r] / sigma[0] < 1e-6, "delta exceeds the low-rank budget"


def test_entropy_loss_closed_forms():
    # Two balanced directions: normalized covariance has two eigenvalues
    # of 1/2, Frobenius^2 = 1/2, loss = log(1/2).
    z = Tensor(np.eye(2))
    assert float(A.entropy_loss(z).data) == pytest.approx(np.log(0.5), abs=1e-9)
    # rank-1: single direction, loss = 0
    z1 = Tensor(np.array([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]))
    assert float(A.entropy_loss(z1).data) == pytest.approx(0.0, abs=1e-9)
    # n balanced directions: log(1/n)
    z5 = Tensor(np.eye(5) * 3.7)
    assert float(A.entropy_loss(z5).data) == pytest.approx(np.log(1 / 5), abs=1e-9)


def test_entropy_loss_scale_invariance():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(12, 6))
    ref = float(A.entropy_loss(Tensor(z)).data)
    for c in (1e-3, 1.0, 1e3):
        got = float(A.entropy_loss(Tensor(z * c)).data)
        assert got == pytest.approx(ref, abs=1e-9)


def test_entropy_loss_bounds_random():
    rng = np.random.default_rng(12)
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9))
        z = rng.normal(size=(n, d))
        val = float(A.entropy_loss(Tensor(z)).data)
        lo = np.log(1.0 / min(n, d))
        assert lo - 1e-9 <= val <= 1e-9, f"loss {val} outside [{lo}, 0] for shape {(n, d)}"


def test_entropy_loss_unnormalized_mode():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(6, 4))
    raw = float(A.entropy_loss(Tensor(z), normalized=False).data)
    want = np.log((np.linalg.norm(z.T @ z, "fro") ** 2))
    assert raw == pytest.approx(want, rel=1e-9)
    # unnormalized mode is NOT scale invariant
    other = float(A.entropy_loss(Tensor(z * 10), normalized=False).data)
    assert abs(other - raw) > 1.0


def test_entropy_loss_contracts():
    with pytest.raises(ContractError):
        A.entropy_loss(Tensor(np.zeros((3, 3))))
    with pytest.raises(ShapeError):
        A.entropy_loss(Tensor(np.ones(3)))


def test_entropy_loss_gradient():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(5, 4))
    check_gradients(lambda ts: A.entropy_loss(ts[0]), [z], tol=1e-5)


def test_total_loss_combination():
    # Scalars must come off an op so they are true 0-d tensors.
    ce = T.sum_all(Tensor(np.array([2.0])))
    ent = T.sum_all(Tensor(np.array([-0.5])))
    combined = A.total_loss(ce, ent, 0.1)
    assert float(combined.data) == pytest.approx(2.0 + 0.1 * -0.5)
    assert float(A.total_loss(ce, None, 0.1).data) == 2.0
    assert float(A.total_loss(ce, ent, 0.0).data) == 2.0


def test_entropy_gradient_through_adapted_layer():
    # End to end: x -> E -> entropy loss; gradients reach E and x.
    rng = np.random.default_rng(15)
    x = rng.normal(size=(6, 4))
    e = np.eye(4) + rng.normal(0, 0.1, size=(4, 4))

    def build(ts):
        z = T.matmul(ts[0], ts[1])
        return A.entropy_loss(z)

    check_gradients(build, [x, e], tol=1e-5)


def test_named_tensors_and_capture(tiny_config, spec_elora):
    adapter = A.init_adapter(tiny_config, spec_elora, seed=16)
    names = adapter.named_tensors()
    assert f"layer0.Wq.A" in names and f"layer0.Wq.E" in names
    n_expected = tiny_config.n_layers * len(spec_elora.targets) * 3
    assert len(names) == n_expected
    assert [n for n, _ in adapter.trainable()] == sorted(names)

    x = Tensor(np.random.default_rng(17).normal(size=(2, 3, tiny_config.d_model)).astype(np.float32))
    captured = []
    W = Tensor(np.zeros((tiny_config.d_model, tiny_config.d_model), dtype=np.float32))
    A.adapted_forward(x, W, adapter.layers[(0, "Wq")], spec_elora.scaling, capture=captured)
    assert len(captured) == 1
    assert captured[0].shape == x.shape  # z = x @ E with identity E


def test_save_load_round_trip(tmp_path, tiny_config, spec_lora, spec_elora):
    for spec in (spec_lora, spec_elora):
        adapter = _randomize(A.init_adapter(tiny_config, spec, seed=18), seed=19)
        path = tmp_path / f"{spec.variant}.lrlb"
        A.save_adapter(adapter, path)
        loaded = A.load_adapter(path)
        assert loaded.spec.variant == spec.variant
        assert loaded.spec.rank == spec.rank
        assert loaded.spec.alpha == pytest.approx(spec.alpha)
        assert sorted(loaded.layers) == sorted(adapter.layers)
        for key in adapter.layers:
            assert loaded.layers[key].A.data.tobytes() == adapter.layers[key].A.data.tobytes()
            assert loaded.layers[key].B.data.tobytes() == adapter.layers[key].B.data.tobytes()


def test_load_rejects_malformed(tmp_path):
    from lorabench import checkpoint
    path = tmp_path / "junk.lrlb"
    checkpoint.save({"layer0.Wq.A": np.zeros((4, 2), dtype=np.float32)}, path)
    with pytest.raises(ContractError):
        A.load_adapter(path)  # B missing
    checkpoint.save({"what.is.this": np.zeros(3, dtype=np.float32)}, path)
    with pytest.raises(ContractError):
        A.load_adapter(path)

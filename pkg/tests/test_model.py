import numpy as np
import pytest

from xir.model import (
    AdamState,
    CheckpointFormatError,
    MlpTower,
    MlpTowerSpec,
    NonFiniteGradientError,
    TwoTowerModel,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    score_batch,
    tower_forward_backward,
)
from tests.util import max_rel_err


def make_model(m=5, n=8, k=4, seed=0, **kw):
    return TwoTowerModel.create(m, n, k, np.random.default_rng(seed), **kw)


class TestScoreBatch:
    def test_identity_and_orthogonal(self):
        model = make_model(m=2, n=2, k=2)
        model.query_emb[:] = [[1.0, 0.0], [1.0, 0.0]]
        model.item_emb[:] = [[1.0, 0.0], [0.0, 1.0]]
        s = score_batch(model, np.array([0, 1]), np.array([0, 1]))
        np.testing.assert_allclose(s, [[1.0, 0.0], [1.0, 0.0]])

    def test_matches_per_pair_dot_products(self):
        model = make_model(m=4, n=6, k=3, seed=5)
        users = np.array([0, 2])
        items = np.array([1, 3, 5])
        s = score_batch(model, users, items)
        for a, u in enumerate(users):
            for b, i in enumerate(items):
                assert s[a, b] == pytest.approx(float(model.query_emb[u] @ model.item_emb[i]), abs=1e-15)

    def test_out_of_range_index(self):
        model = make_model()
        with pytest.raises(IndexError):
            score_batch(model, np.array([99]), np.array([0]))
        with pytest.raises(IndexError):
            score_batch(model, np.array([0]), np.array([-1]))


class TestTower:
    def test_identity_layer(self):
        spec = MlpTowerSpec((3,))
        tower = MlpTower(3, spec, np.random.default_rng(0))
        tower.weights[0][:] = np.eye(3)
        tower.biases[0][:] = 0.0
        x = np.random.default_rng(1).normal(size=(4, 3))
        out, _ = tower.forward(x)
        np.testing.assert_allclose(out, x)

    def test_dead_relu_blocks_gradient(self):
        tower = MlpTower(2, MlpTowerSpec((2, 1)), np.random.default_rng(0))
        tower.weights[0][:] = -np.eye(2)
        tower.biases[0][:] = 0.0
        x = np.ones((3, 2))  # pre-activations all negative -> hidden all zero
        out, trace = tower.forward(x)
        grads, dx = tower.backward(trace, np.ones_like(out))
        np.testing.assert_allclose(grads[0][0], 0.0)  # dW of first layer
        np.testing.assert_allclose(dx, 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        tower = MlpTower(4, MlpTowerSpec((3, 2)), rng)
        x = rng.normal(size=(6, 4))
        up = rng.normal(size=(6, 2))
        _, pgrads, dx = tower_forward_backward(tower, x, up)

        def objective():
            y, _ = tower.forward(x)
            return float((y * up).sum())

        h = 1e-5
        for l, (dw, db) in enumerate(pgrads):
            for arr, g in ((tower.weights[l], dw), (tower.biases[l], db)):
                num = np.zeros_like(arr)
                for i in range(arr.size):
                    orig = arr.flat[i]
                    arr.flat[i] = orig + h
                    up_v = objective()
                    arr.flat[i] = orig - h
                    dn = objective()
                    arr.flat[i] = orig
                    num.flat[i] = (up_v - dn) / (2 * h)
                assert max_rel_err(g, num) < 1e-4
        num = np.zeros_like(x)
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + h
            up_v = objective()
            x.flat[i] = orig - h
            dn = objective()
            x.flat[i] = orig
            num.flat[i] = (up_v - dn) / (2 * h)
        assert max_rel_err(dx, num) < 1e-4

    def test_width_mismatch(self):
        tower = MlpTower(4, MlpTowerSpec((3,)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            tower.forward(np.zeros((2, 5)))

    def test_tower_output_must_match_k(self):
        with pytest.raises(ValueError):
            make_model(k=4, tower_spec=MlpTowerSpec((8, 3)))


class TestAdam:
    def test_zero_gradient_zero_decay_keeps_params(self):
        model = make_model()
        params = model.params()
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState(params, weight_decay=0.0)
        adam_step(state, params, {"query_emb": np.zeros_like(params["query_emb"])})
        np.testing.assert_array_equal(params["query_emb"], before["query_emb"])

    def test_first_step_closed_form(self):
        params = {"w": np.array([[0.5]])}
        state = AdamState(params, learning_rate=0.001, weight_decay=0.0)
        adam_step(state, params, {"w": np.array([[1.0]])})
        delta = params["w"][0, 0] - 0.5
        assert abs(delta + 0.001) < 1e-6

    def test_lr_decay_schedule(self):
        state = AdamState({"w": np.zeros(1)}, learning_rate=0.001, lr_decay=(0.95, 5))
        assert state.effective_lr(1) == pytest.approx(0.001)
        assert state.effective_lr(5) == pytest.approx(0.001)
        assert state.effective_lr(6) == pytest.approx(0.001 * 0.95)
        assert state.effective_lr(10) == pytest.approx(0.001 * 0.95)
        assert state.effective_lr(11) == pytest.approx(0.001 * 0.95**2)

    def test_sparse_equals_dense_with_zero_rows(self):
        # a sparse step must be bit-identical to a dense step whose gradient
        # is zero outside the touched rows (decay confined to touched rows)
        rng = np.random.default_rng(7)
        table_a = rng.normal(size=(10, 4))
        table_b = table_a.copy()
        rows = np.array([1, 4, 7])
        grad_rows = rng.normal(size=(3, 4))

        sparse_state = AdamState({"t": table_a}, weight_decay=0.0)
        dense_state = AdamState({"t": table_b}, weight_decay=0.0)
        for _ in range(3):
            adam_step(sparse_state, {"t": table_a}, {"t": (rows, grad_rows)})
            dense_grad = np.zeros_like(table_b)
            dense_grad[rows] = grad_rows
            adam_step(dense_state, {"t": table_b}, {"t": dense_grad})
        np.testing.assert_array_equal(table_a, table_b)

    def test_weight_decay_enters_gradient(self):
        params = {"w": np.array([2.0])}
        state = AdamState(params, learning_rate=0.001, weight_decay=0.5)
        adam_step(state, params, {"w": np.array([0.0])})
        # effective gradient is wd * w = 1.0 > 0, so the parameter must shrink
        assert params["w"][0] < 2.0

    def test_non_finite_gradient_aborts(self):
        params = {"w": np.zeros(2)}
        state = AdamState(params)
        with pytest.raises(NonFiniteGradientError):
            adam_step(state, params, {"w": np.array([1.0, np.nan])})

    def test_determinism(self):
        results = []
        for _ in range(2):
            model = make_model(seed=11)
            params = model.params()
            state = AdamState(params, learning_rate=0.01)
            rng = np.random.default_rng(3)
            for _ in range(5):
                grads = {name: rng.normal(size=p.shape) for name, p in params.items()}
                adam_step(state, params, grads)
            results.append({k: v.copy() for k, v in params.items()})
        for name in results[0]:
            np.testing.assert_array_equal(results[0][name], results[1][name])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = make_model(m=6, n=9, k=3, seed=2)
        p1 = tmp_path / "a.ttm"
        p2 = tmp_path / "b.ttm"
        save_checkpoint(model, p1)
        again = load_checkpoint(p1)
        save_checkpoint(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_with_tower(self, tmp_path):
        feats = np.random.default_rng(0).integers(0, 4, size=(9, 2))
        model = make_model(
            m=6, n=9, k=3, seed=2,
            tower_spec=MlpTowerSpec((5, 3)), item_features=feats,
            feature_vocab_sizes=[4, 4], id_dim=2,
        )
        p = tmp_path / "t.ttm"
        save_checkpoint(model, p)
        again = load_checkpoint(p, item_features=feats)
        save_checkpoint(again, tmp_path / "t2.ttm")
        assert p.read_bytes() == (tmp_path / "t2.ttm").read_bytes()
        assert again.tower.spec.layer_widths == (5, 3)

    def test_truncated_block_names_block(self, tmp_path):
        model = make_model()
        p = tmp_path / "c.ttm"
        save_checkpoint(model, p)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(CheckpointFormatError, match="item_emb"):
            load_checkpoint(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.ttm"
        p.write_bytes(b"not a checkpoint\n")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)


class TestEncodeCounter:
    def test_counts_only_recorded_calls(self):
        model = make_model()
        model.item_reprs(np.array([0, 1, 2]))
        assert model.item_encode_count == 0
        model.encode_items(np.array([0, 1, 2]))
        assert model.item_encode_count == 3

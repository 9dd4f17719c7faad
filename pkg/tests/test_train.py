import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsmn.autodiff import Tape, Tensor
from gsmn.config import TrainConfig
from gsmn.errors import CheckpointError, ConfigurationError, ContractError, NumericError
from gsmn.graphio import generate_synthetic, load_corpus
from gsmn.match import global_similarity
from gsmn.model import GsmnModel
from gsmn.train import (
    AdamState, adam_step, fit, hardest_negatives, learning_rate, load_checkpoint, save_checkpoint, train_epoch,
    triplet_loss_batch,
)
from tiny import random_image, random_text, tiny_config, tiny_vocab


def loss_of(S, margin=0.2, mask=None):
    return triplet_loss_batch(Tape(), Tensor(S), margin, mask).item()


def brute_force_loss(S, margin):
    """Enumerate every negative and keep the largest hinge per anchor and direction."""
    B = len(S)
    total = 0.0
    for i in range(B):
        best_row = max((S[i][j] for j in range(B) if j != i))
        best_col = max((S[k][i] for k in range(B) if k != i))
        total += max(0.0, margin - S[i][i] + best_row) + max(0.0, margin - S[i][i] + best_col)
    return total / B


class TestTripletLoss:
    def test_satisfied_margins(self):
        assert loss_of(10 * np.eye(4)) == 0.0

    def test_hand_fixture(self):
        assert loss_of(np.array([[0.1, 0.4], [0.3, 0.1]])) == pytest.approx(0.9, abs=1e-15)

    def test_deadzone_exact_zero(self):
        S = np.array([[1.0, 0.5, 0.75], [0.2, 1.0, 0.0], [0.7, 0.1, 1.0]])
        assert loss_of(S, margin=0.2) == 0.0

    def test_batch_of_one(self):
        with pytest.raises(ContractError):
            loss_of(np.array([[1.0]]))

    def test_ties_pick_lowest_index(self):
        rows, cols = hardest_negatives(np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]))
        assert rows.tolist() == [1, 0, 0] and cols.tolist() == [1, 0, 0]

    def test_positive_mask_excludes_same_image(self):
        S = np.array([[1.0, 0.95, 0.0], [0.95, 1.0, 0.0], [0.0, 0.0, 1.0]])
        same = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
        assert loss_of(S, mask=same) == 0.0
        assert loss_of(S) > 0.0

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)), st.floats(0.01, 1.0))
    def test_matches_brute_force_and_non_negative(self, S, margin):
        value = loss_of(S, margin)
        assert value >= 0.0
        assert value == pytest.approx(brute_force_loss(S.tolist(), margin), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(-2, 2)), st.permutations(range(5)))
    def test_relabeling_invariance(self, S, perm):
        p = np.asarray(perm)
        assert loss_of(S) == pytest.approx(loss_of(S[np.ix_(p, p)]), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)))
    def test_zero_iff_dominant_diagonal(self, S):
        B = len(S)
        off = S + np.diag(np.full(B, -np.inf))
        dominant = all(S[i, i] - max(off[i].max(), off[:, i].max()) >= 0.2 for i in range(B))
        assert (loss_of(S) == 0.0) == dominant

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2), unique=True))
    def test_gradient_only_on_diagonal_and_hardest(self, S):
        t = Tensor(S, requires_grad=True)
        tape = Tape()
        tape.backward(triplet_loss_batch(tape, t, 0.2))
        rows, cols = hardest_negatives(S)
        used = np.eye(4, dtype=bool)
        used[np.arange(4), rows] = True
        used[cols, np.arange(4)] = True
        assert np.all(t.grad[~used] == 0.0)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = AdamState()
        adam_step(p, {"w": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_closed_form(self):
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
        assert p["w"].data[0] - 0.5 == pytest.approx(-0.1, abs=1e-8)

    def test_identical_parameters_stay_identical(self):
        p = {"a": Tensor(np.ones(3), requires_grad=True), "b": Tensor(np.ones(3), requires_grad=True)}
        state = AdamState()
        rng = np.random.default_rng(0)
        for _ in range(5):
            g = rng.standard_normal(3)
            adam_step(p, {"a": g, "b": g.copy()}, state, 0.01)
        assert p["a"].data.tobytes() == p["b"].data.tobytes()

    def test_non_finite_gradient_aborts(self):
        p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        state = AdamState()
        with pytest.raises(NumericError, match="'b'"):
            adam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, 0.1)
        assert state.step == 0
        np.testing.assert_array_equal(p["a"].data, 1.0)

    def test_moment_shapes_mirror_parameters(self):
        p = {"w": Tensor(np.ones((2, 3)), requires_grad=True)}
        state = AdamState()
        adam_step(p, {"w": np.ones((2, 3))}, state, 0.1)
        assert state.m["w"].shape == (2, 3) and state.v["w"].shape == (2, 3)


def test_step_decay():
    cfg = TrainConfig(lr=2e-4, lr_decay_factor=0.9, lr_decay_every=15)
    assert learning_rate(cfg, 0) == 2e-4 and learning_rate(cfg, 14) == 2e-4
    assert learning_rate(cfg, 15) == pytest.approx(1.8e-4)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = generate_synthetic(tmp_path_factory.mktemp("c"), seed=3, n_images=10, feature_dim=8)
    return load_corpus(root)


SMALL = dict(region_dim=8, embed_dim=8, joint_dim=8, blocks=2, kernels=2, kernel_dim=2, mlp_hidden=4, lambda_attn=10.0)


class TestTrainEpoch:
    def test_zero_learning_rate_leaves_parameters(self, small_corpus):
        model = GsmnModel(tiny_config(**SMALL), small_corpus.vocab, seed=0)
        before = {k: v.data.tobytes() for k, v in model.params.items()}
        train_epoch(small_corpus, model, TrainConfig(lr=0.0, batch_size=8), AdamState(), np.random.default_rng(0))
        assert all(model[k].data.tobytes() == b for k, b in before.items())

    def test_same_seed_same_trajectory(self, small_corpus):
        def run():
            model = GsmnModel(tiny_config(**SMALL), small_corpus.vocab, seed=1)
            rng, state = np.random.default_rng(1), AdamState()
            cfg = TrainConfig(lr=0.01, batch_size=8)
            return [train_epoch(small_corpus, model, cfg, state, rng, e).mean_loss for e in range(3)]

        assert run() == run()

    def test_frozen_embeddings_untouched(self, small_corpus):
        model = GsmnModel(tiny_config(freeze_embeddings=True, **SMALL), small_corpus.vocab, seed=0)
        before = model["embed"].data.tobytes()
        train_epoch(small_corpus, model, TrainConfig(lr=0.05, batch_size=8), AdamState(), np.random.default_rng(0))
        assert model["embed"].data.tobytes() == before


class TestCheckpoint:
    def setup_model(self, **kw):
        return GsmnModel(tiny_config(**kw), tiny_vocab(), seed=4)

    def test_round_trip_bitwise(self, tmp_path):
        model = self.setup_model(kernels=2)
        path = save_checkpoint(tmp_path / "m.ckpt", model, TrainConfig(seed=3), epoch=7, val_rsum=512.5)
        ck = load_checkpoint(path)
        assert ck.match_config == model.config and ck.train_config == TrainConfig(seed=3)
        assert ck.epoch == 7 and ck.val_rsum == 512.5
        for k, v in model.params.items():
            assert ck.params[k].tobytes() == v.data.tobytes()
        rng = np.random.default_rng(0)
        img, txt = random_image(rng, 3, 5), random_text(rng, 4)
        again = ck.build_model()
        assert global_similarity(img, txt, again).item() == global_similarity(img, txt, model).item()

    def test_suffix_optional(self, tmp_path):
        save_checkpoint(tmp_path / "best.ckpt", self.setup_model())
        assert load_checkpoint(tmp_path / "best").epoch == 0

    def test_mismatched_dimension(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", self.setup_model())
        with pytest.raises(ConfigurationError):
            load_checkpoint(path, expect=tiny_config(joint_dim=6, blocks=2))
        ck = load_checkpoint(path)
        with pytest.raises(ConfigurationError):
            from gsmn.train import load_state
            load_state(GsmnModel(tiny_config(joint_dim=6), tiny_vocab()), ck.params)

    def test_missing_parameter_named(self, tmp_path):
        ck = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", self.setup_model()))
        del ck.params["proj.W"]
        with pytest.raises(CheckpointError, match="proj.W"):
            ck.build_model()

    def test_corrupt_and_version(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", self.setup_model())
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(tmp_path / "bad.ckpt")
        raw = bytearray(path.read_bytes())
        raw[8] = 99
        (tmp_path / "ver.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "ver.ckpt")
        (tmp_path / "junk.ckpt").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.ckpt")


def test_fit_writes_artifacts(small_corpus, tmp_path):
    cfg = TrainConfig(lr=0.01, batch_size=8, epochs=2)
    result = fit(small_corpus, tiny_config(**SMALL), cfg, tmp_path / "run", manifest={"seed": 0})
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert set(json.loads(lines[0])) == {"epoch", "loss", "lr", "val_r1_i2t", "val_r1_t2i", "val_rsum"}
    best = load_checkpoint(tmp_path / "run" / "best.ckpt")
    assert best.epoch == result.best_epoch and best.val_rsum == result.best_val_rsum
    assert best.val_rsum == max(h["val_rsum"] for h in result.history)
    assert (tmp_path / "run" / "last.ckpt").exists()
    assert json.loads((tmp_path / "run" / "manifest.json").read_text()) == {"seed": 0}

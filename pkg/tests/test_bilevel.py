import numpy as np
import pytest

from snapplan.cost_map import build_sdf, sdf_to_cost, single_pillar_scene
from snapplan.errors import ArgumentError, StateError
from snapplan.gradcheck import check_pipeline
from snapplan.losses import LossWeights
from snapplan.nn.bilevel import (
    METRIC_FIELDS,
    SceneItem,
    TrainConfig,
    TrainState,
    backward_planner,
    backward_tan,
    chord_points,
    forward_planner,
    init_state,
    load_checkpoint,
    make_planner_input,
    run_sample,
    sample_task,
    save_checkpoint,
    train,
)
from snapplan.nn.tape import Tape, square
from snapplan.time_alloc import tan_features


@pytest.fixture(scope="module")
def pillar():
    scene = single_pillar_scene()
    return SceneItem(scene, sdf_to_cost(build_sdf(scene, 0.1)))


def small_config(**kw):
    base = dict(planner_hidden=(16,), tan_hidden=(8,), batch_size=2, steps=3)
    base.update(kw)
    return TrainConfig(**base)


def perturbed_state(cfg, seed=0, scale=0.05):
    state = init_state(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    state.set_parameters([p + scale * rng.normal(size=p.shape) for p in state.parameters()])
    return state


def fixed_labels(n_seg, seed=0):
    fr = np.random.default_rng(seed).dirichlet(np.ones(n_seg))
    return lambda _xi: fr


def task(item, seed=0):
    return sample_task(item, np.random.default_rng(seed))


class TestForward:
    def test_zero_init_is_chord_with_even_odds(self, pillar):
        state = init_state(small_config(), 0)
        start, goal = task(pillar)
        xi, eta = forward_planner(state, make_planner_input(pillar.grid, start, goal, state.layout), start, goal)
        np.testing.assert_array_equal(xi, chord_points(start, goal, 5))
        assert eta == 0.5

    def test_offsets_are_bounded(self, pillar):
        cfg = small_config(offset_scale=0.7)
        state = perturbed_state(cfg, scale=50.0)
        start, goal = task(pillar, 1)
        xi, eta = forward_planner(state, make_planner_input(pillar.grid, start, goal, state.layout), start, goal)
        # saturated offsets: allow round-off from adding then subtracting the chord
        assert np.abs(xi - chord_points(start, goal, 5)).max() <= 0.7 + 1e-12
        assert 0.0 <= eta <= 1.0

    def test_input_width_checked(self, pillar):
        state = init_state(small_config(), 0)
        start, goal = task(pillar)
        inp = make_planner_input(pillar.grid, start, goal, state.layout)
        state.planner.weights[0] = np.zeros((5, 16))
        with pytest.raises(ArgumentError):
            forward_planner(state, inp, start, goal)


class TestGradients:
    def test_pipeline_matches_finite_differences(self):
        res = check_pipeline(n_coords=10, seed=1)
        assert res.passed, res

    def test_needs_recorded_forward(self):
        with pytest.raises(StateError):
            backward_planner(None)
        with pytest.raises(StateError):
            backward_tan(None)

    def test_escape_only_touches_eta_head(self, pillar):
        cfg = small_config(loss_weights=LossWeights(0.0, 0.0, 0.0, 1.0, 0.0))
        state = perturbed_state(cfg)
        start, goal = task(pillar)
        rec = run_sample(state, pillar.grid, start, goal, fixed_labels(4))
        gp, gt = backward_planner(rec), backward_tan(rec)
        W, b = gp[-2], gp[-1]
        assert np.all(W[:, :-1] == 0.0) and np.all(b[:-1] == 0.0)
        assert np.abs(W[:, -1]).max() > 0 and b[-1] != 0.0
        assert all(np.all(g == 0.0) for g in gt)

    def test_time_alloc_only_is_supervised_mse(self, pillar):
        cfg = small_config(loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0, 1.0))
        state = perturbed_state(cfg)
        start, goal = task(pillar)
        labels = fixed_labels(4, 3)
        rec = run_sample(state, pillar.grid, start, goal, labels)
        got = backward_tan(rec)
        tape = Tape()
        params = state.tan.bind(tape)
        pred = state.tan.forward(tan_features(rec.xi), params)
        loss = square(pred - labels(None)).mean()
        tape.backward(loss)
        for a, p in zip(got, params):
            np.testing.assert_allclose(a, p.grad, rtol=1e-12, atol=1e-15)

    def test_route_split(self, pillar):
        # full gradient = gradient with the allocation-network input cut + gradient through that input alone;
        # the escape weight is off because the eta head would appear in both partial runs
        cfg = small_config(loss_weights=LossWeights(escape=0.0))
        state = perturbed_state(cfg)
        start, goal = task(pillar)
        labels = fixed_labels(4)
        full = backward_planner(run_sample(state, pillar.grid, start, goal, labels))
        state_cut = TrainState(small_config(loss_weights=cfg.loss_weights, tan_live_xi=False), state.planner, state.tan, state.optimizer)
        direct = backward_planner(run_sample(state_cut, pillar.grid, start, goal, labels))
        via_tan = backward_planner(run_sample(state, pillar.grid, start, goal, labels, detach_direct=True))
        for f, d, v in zip(full, direct, via_tan):
            np.testing.assert_allclose(f, d + v, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(f).max()))


class TestTraining:
    def test_zero_weights_leave_parameters(self, pillar):
        cfg = small_config(loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0, 0.0), steps=2)
        state = perturbed_state(cfg)
        before = [p.copy() for p in state.parameters()]
        train(state, [pillar], labels=fixed_labels(4))
        for a, b in zip(before, state.parameters()):
            assert np.array_equal(a, b)

    def test_plain_sgd_update(self, pillar):
        cfg = small_config(optimizer="sgd", learning_rate=1e-3, batch_size=1, steps=1)
        state = perturbed_state(cfg)
        labels = fixed_labels(4)
        before = [p.copy() for p in state.parameters()]
        rng = np.random.default_rng([state.seed, 0])
        rng.integers(1)
        start, goal = sample_task(pillar, rng)
        rec = run_sample(state, pillar.grid, start, goal, labels)
        grads = backward_planner(rec) + backward_tan(rec)
        train(state, [pillar], labels=labels)
        for p0, g, p1 in zip(before, grads, state.parameters()):
            assert np.array_equal(p1, p0 - 1e-3 * g)

    def test_metrics_rows(self, pillar):
        state = init_state(small_config(steps=2), 0)
        rows = train(state, [pillar], labels=fixed_labels(4))
        assert [r["step"] for r in rows] == [0, 1]
        assert all(set(r) == set(METRIC_FIELDS) for r in rows)
        assert state.step == 2

    def test_deterministic(self, pillar):
        a, b = init_state(small_config(), 7), init_state(small_config(), 7)
        ra = train(a, [pillar], labels=fixed_labels(4))
        rb = train(b, [pillar], labels=fixed_labels(4))
        assert ra == rb
        for x, y in zip(a.parameters(), b.parameters()):
            assert x.tobytes() == y.tobytes()

    def test_resume_matches_uninterrupted(self, pillar, tmp_path):
        labels = fixed_labels(4)
        whole = init_state(small_config(steps=4), 3)
        rows_whole = train(whole, [pillar], labels=labels)
        part = init_state(small_config(steps=4), 3)
        rows = train(part, [pillar], steps=2, labels=labels)
        save_checkpoint(part, tmp_path / "ck.json")
        resumed = load_checkpoint(tmp_path / "ck.json")
        rows += train(resumed, [pillar], steps=2, labels=labels)
        assert rows == rows_whole
        for x, y in zip(whole.parameters(), resumed.parameters()):
            assert x.tobytes() == y.tobytes()

    def test_no_scenes(self):
        with pytest.raises(ArgumentError):
            train(init_state(small_config(), 0), [])


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        state = perturbed_state(small_config(), seed=4)
        save_checkpoint(state, tmp_path / "a.json")
        back = load_checkpoint(tmp_path / "a.json")
        assert back.config == state.config and back.step == state.step and back.seed == state.seed
        for x, y in zip(state.parameters(), back.parameters()):
            assert x.tobytes() == y.tobytes()

    def test_version_checked(self, tmp_path):
        data = perturbed_state(small_config()).to_json()
        data["version"] = 99
        with pytest.raises(ArgumentError):
            TrainState.from_json(data)

    def test_malformed_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ArgumentError):
            load_checkpoint(tmp_path / "bad.json")


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ArgumentError):
            TrainConfig.from_dict({"epochs_typo": 3})

    def test_round_trip(self):
        cfg = small_config(loss_weights=LossWeights(1, 2, 3, 4, 5))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kw", [{"n_keypoints": 2}, {"n_keypoints": 9}, {"mode": "rl"}, {"optimizer": "lbfgs"}])
    def test_invalid(self, kw):
        with pytest.raises(ArgumentError):
            TrainConfig(**kw)

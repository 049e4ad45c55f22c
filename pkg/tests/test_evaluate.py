import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxformer import evaluate as E
from auxformer import model as M
from auxformer import synth as S
from auxformer.model import MotionSequence


def loop_mpjpe(pred, gt, h):
    total = 0.0
    for j in range(pred.shape[1]):
        total += math.sqrt(sum((pred[h - 1, j, c] - gt[h - 1, j, c]) ** 2 for c in range(3)))
    return total / pred.shape[1]


def loop_fill(values, observed):
    """Scalar reference: fill one coordinate component of one joint."""
    n = len(values)
    known = [t for t in range(n) if observed[t]]
    out = list(values)
    if len(known) == 0:
        return [0.0] * n
    if len(known) == 1:
        return [values[known[0]]] * n
    for t in range(n):
        if observed[t]:
            continue
        left = [k for k in known if k < t]
        right = [k for k in known if k > t]
        if left and right:
            a, b = left[-1], right[0]
        elif right:
            a, b = known[0], known[1]
        else:
            a, b = known[-2], known[-1]
        slope = (values[b] - values[a]) / (b - a)
        out[t] = values[a] + slope * (t - a)
    return out


# ---------------------------------------------------------------------------
# MPJPE


def test_mpjpe_examples():
    z = np.zeros((1, 1, 3))
    assert E.mpjpe(z, z, 1) == 0.0
    assert E.mpjpe(np.array([[[3.0, 4.0, 0.0]]]), z, 1) == 5.0
    pred = np.array([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
    assert E.mpjpe(pred, np.zeros((1, 2, 3)), 1) == 1.5


def test_mpjpe_rejects_bad_horizon():
    z = np.zeros((3, 2, 3))
    for h in (0, 4):
        with pytest.raises(ValueError):
            E.mpjpe(z, z, h)


@pytest.mark.parametrize("trial", range(10))
def test_mpjpe_loop_oracle(trial):
    rng = np.random.default_rng(trial)
    pred, gt = rng.normal(size=(2, 5, 4, 3)) * 100
    for h in range(1, 6):
        assert abs(E.mpjpe(pred, gt, h) - loop_mpjpe(pred, gt, h)) < 1e-12 * 100


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mpjpe_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 3, 4, 3))
    shift = rng.normal(size=3)
    assert abs(E.mpjpe(pred + shift, gt + shift, 2) - E.mpjpe(pred, gt, 2)) < 1e-12


# ---------------------------------------------------------------------------
# baselines


def linear_motion(v, t_past=4, t_future=3, J=2, start=None):
    T = t_past + t_future
    start = np.zeros((J, 3)) if start is None else start
    coords = start[None] + np.arange(T)[:, None, None] * np.asarray(v)[None, None, :]
    return MotionSequence(coords, t_past, t_future)


def test_zero_velocity_examples(rng):
    x = MotionSequence(np.broadcast_to(rng.normal(size=(1, 2, 3)), (7, 2, 3)), 4, 3)
    pred = E.zero_velocity_baseline(x)
    assert all(E.mpjpe(pred, x.future, h) == 0.0 for h in (1, 2, 3))
    v = np.array([3.0, 4.0, 0.0])
    x = linear_motion(v)
    pred = E.zero_velocity_baseline(x)
    for h in (1, 2, 3):
        assert abs(E.mpjpe(pred, x.future, h) - 5.0 * h) < 1e-12


def test_zero_velocity_loop_oracle(rng):
    x = MotionSequence(rng.normal(size=(7, 3, 3)), 4, 3)
    pred = E.zero_velocity_baseline(x)
    for t in range(3):
        for j in range(3):
            assert pred[t, j].tolist() == x.coords[3, j].tolist()


def test_linear_extrapolation_examples(rng):
    x = linear_motion([1.0, -2.0, 0.5], start=rng.normal(size=(2, 3)))
    pred = E.linear_extrapolation_baseline(x)
    assert all(E.mpjpe(pred, x.future, h) < 1e-12 for h in (1, 2, 3))
    c = MotionSequence(np.broadcast_to(rng.normal(size=(1, 2, 3)), (7, 2, 3)), 4, 3)
    assert np.array_equal(E.linear_extrapolation_baseline(c), E.zero_velocity_baseline(c))


def test_linear_extrapolation_quadratic_closed_form():
    # x(t) = a t^2 along one axis; extrapolating the last velocity from t=T_p-1
    # misses by a * h * (h + 1) at future step h.
    a, t_past = 2.0, 4
    T = t_past + 3
    coords = np.zeros((T, 1, 3))
    coords[:, 0, 0] = a * np.arange(T) ** 2
    x = MotionSequence(coords, t_past, 3)
    pred = E.linear_extrapolation_baseline(x)
    for h in (1, 2, 3):
        assert abs(E.mpjpe(pred, x.future, h) - a * h * (h + 1)) < 1e-12


# ---------------------------------------------------------------------------
# gap filling


def test_fill_nothing_missing_is_identity(rng):
    x = MotionSequence(rng.normal(size=(6, 2, 3)), 4, 2)
    y = E.fill_missing_linear(x, np.ones((6, 2)))
    assert np.array_equal(y.coords, x.coords)


def test_fill_recovers_linear_interior():
    x = linear_motion([1.0, 2.0, 3.0], t_past=5)
    obs = np.ones((x.T, x.J))
    obs[2, 0] = 0.0
    y = E.fill_missing_linear(x, obs)
    np.testing.assert_allclose(y.coords, x.coords, atol=1e-12)


def test_fill_leaves_future_untouched(rng):
    x = MotionSequence(rng.normal(size=(6, 2, 3)), 3, 3)
    obs = M.past_mask(3, 3, 2)
    obs[0, 1] = 0.0
    y = E.fill_missing_linear(x, obs)
    assert np.array_equal(y.future, x.future)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fill_exact_on_affine_trajectories(seed):
    rng = np.random.default_rng(seed)
    t_past = int(rng.integers(2, 9))
    x = linear_motion(rng.normal(size=3) * 10, t_past=t_past, J=3, start=rng.normal(size=(3, 3)) * 100)
    obs = M.past_mask(t_past, 3, 3)
    for j in range(3):
        keep = rng.choice(t_past, size=int(rng.integers(2, t_past + 1)), replace=False)
        obs[:t_past, j] = 0.0
        obs[keep, j] = 1.0
    y = E.fill_missing_linear(x, obs)
    np.testing.assert_allclose(y.coords, x.coords, atol=1e-9)


@pytest.mark.parametrize("trial", range(20))
def test_fill_matches_scalar_reference(trial):
    rng = np.random.default_rng(trial)
    t_past = int(rng.integers(1, 9))
    x = MotionSequence(rng.normal(size=(t_past + 2, 3, 3)) * 100, t_past, 2)
    obs = M.past_mask(t_past, 2, 3)
    obs[:t_past][rng.random((t_past, 3)) < 0.5] = 0.0
    y = E.fill_missing_linear(x, obs)
    for j in range(3):
        for c in range(3):
            ref = loop_fill(list(x.coords[:t_past, j, c]), list(obs[:t_past, j] == 1))
            for t in range(t_past):
                assert abs(y.coords[t, j, c] - ref[t]) <= 1e-12 * max(1.0, abs(ref[t]))


# ---------------------------------------------------------------------------
# robustness sweep


def toy_testset():
    coords = np.zeros((3, 1, 3))
    coords[:, 0, 0] = (1.0, 3.0, 5.0)
    return [MotionSequence(coords, 2, 1)]


def test_sweep_hand_trace_missing():
    zv = E.BaselinePredictor(E.zero_velocity_baseline)
    lin = E.BaselinePredictor(E.linear_extrapolation_baseline)
    test = toy_testset()
    # ratio 0: zv repeats x=3 (error 2), lin continues to 5 (error 0);
    # ratio 1: both past frames are lost and filled with zeros (error 5).
    assert E.robustness_sweep(zv, test, "missing", [0.0, 1.0], 50.0, 0, [1]).mpjpe == {0.0: {1: 2.0}, 1.0: {1: 5.0}}
    assert E.robustness_sweep(lin, test, "missing", [0.0, 1.0], 50.0, 0, [1]).mpjpe == {0.0: {1: 0.0}, 1.0: {1: 5.0}}


def test_sweep_validation():
    zv = E.BaselinePredictor(E.zero_velocity_baseline)
    with pytest.raises(ValueError):
        E.robustness_sweep(zv, toy_testset(), "missing", [1.5], 50.0, 0, [1])
    with pytest.raises(ValueError):
        E.robustness_sweep(zv, toy_testset(), "blur", [0.5], 50.0, 0, [1])


@pytest.fixture(scope="module")
def small_testset():
    return S.generate_dataset(S.default_skeleton(), S.SynthConfig(), 40, 0, "eval-test")


def test_sweep_ratio_zero_equals_clean_eval(small_testset, rng):
    cfg = M.HyperConfig(F=8, L=1, H=2)
    model = E.ModelPredictor(M.init_params(cfg, 20, 9, rng), cfg, 0.01)
    clean = E.evaluate(model, small_testset, [1, 5, 10])
    for mode in ("missing", "noisy"):
        swept = E.robustness_sweep(model, small_testset, mode, [0.0, 0.3], 50.0, 4, [1, 5, 10])
        assert swept.mpjpe[0.0] == clean
    direct = E.predict_batch(model.params, cfg, small_testset, 0.01)
    assert clean == E.mpjpe_per_horizon(direct, small_testset, [1, 5, 10])


@pytest.mark.parametrize("mode", ["missing", "noisy"])
@pytest.mark.parametrize("fn", [E.zero_velocity_baseline, E.linear_extrapolation_baseline])
def test_baseline_sweep_monotone(small_testset, mode, fn):
    # Long horizons are excluded: once most past frames are lost, repair
    # degrades linear extrapolation towards a constant pose, which happens to
    # be the better long-range guess on this data.
    ratios = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    horizons = [1, 2, 5]
    per_seed = [E.robustness_sweep(E.BaselinePredictor(fn), small_testset, mode, ratios, 50.0, s, horizons).mpjpe
                for s in range(5)]
    for h in horizons:
        med = [float(np.median([r[ratio][h] for r in per_seed])) for ratio in ratios]
        assert all(b >= a for a, b in zip(med, med[1:])), (h, med)


def test_sweep_nested_corruption(small_testset):
    seen = []

    class Spy:
        def predict(self, seqs, observed):
            seen.append(observed.copy())
            return np.stack([E.zero_velocity_baseline(x) for x in seqs])

    E.robustness_sweep(Spy(), small_testset, "missing", [0.2, 0.5], 50.0, 1, [1])
    lost_small, lost_big = seen[0] == 0, seen[1] == 0
    assert np.all(lost_big[lost_small])


def test_model_gets_mask_under_missing(small_testset, rng):
    cfg = M.HyperConfig(F=8, L=1, H=2)
    p = M.init_params(cfg, 20, 9, rng)
    model = E.ModelPredictor(p, cfg, 0.01)
    res = E.robustness_sweep(model, small_testset[:5], "missing", [1.0], 50.0, 0, [1])
    # everything unobserved: output cannot depend on the (zeroed) inputs at all
    blank = [MotionSequence(np.zeros_like(x.coords), 10, 10) for x in small_testset[:5]]
    preds = E.predict_batch(p, cfg, blank, 0.01, observed=np.zeros((5, 20, 9)))
    assert res.mpjpe[1.0] == E.mpjpe_per_horizon(preds, small_testset[:5], [1])


def test_sweep_csv(tmp_path):
    zv = E.BaselinePredictor(E.zero_velocity_baseline)
    res = E.robustness_sweep(zv, toy_testset(), "missing", [0.0, 1.0], 50.0, 3, [1])
    path = tmp_path / "r.csv"
    res.to_csv(path, frame_rate=25.0)
    lines = path.read_text().splitlines()
    assert lines[0] == "ratio,horizon_ms,mpjpe,n_samples,seed"
    assert lines[1:] == ["0.0,40.0,2.0,1,3", "1.0,40.0,5.0,1,3"]

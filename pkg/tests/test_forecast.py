import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countycast.errors import ConfigError, DataError, NumericFault
from countycast.forecast import (
    PARAM_NAMES,
    WEIGHT_NAMES,
    DwlstmConfig,
    Normalizer,
    backward,
    forward,
    init_model,
    load_checkpoint,
    lstm_step,
    model_inputs,
    project,
    rollout,
    save_checkpoint,
    train,
    weighted_mse,
    window_loss,
    write_training_log,
    zero_params,
)
from countycast.windows import ForecastTask, WindowSet

# ---- helpers and scalar oracle ----------------------------------------------------


def tiny(seed=0, D=3, S=2, H=3, T=4, P=2, SP=2, **kw):
    cfg = DwlstmConfig(w_in=T, w_out=3, dynamic_size=D + 1, static_size=S, dyn_proj=P, static_proj=SP, hidden=H, **kw)
    return init_model(cfg, seed=seed, theta=kw.pop("theta", 0.3))


def windows(seed, N=5, D=3, S=2, T=4, w_out=3):
    rng = np.random.default_rng(seed)
    return WindowSet(
        np.arange(N), np.zeros(N, dtype=int), rng.normal(size=(N, T, D)), rng.normal(size=(N, T)),
        rng.normal(size=(N, S)), rng.normal(size=(N, T)), np.zeros((N, w_out)), T, w_out,
    )


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_forward(x_seq, s, p):
    """Step-by-step list-based evaluation of the network, returning per-step outputs and the final state."""
    Wd, bd, Ws, bs, W, b, Wr, br = (p[k].tolist() for k in PARAM_NAMES)
    H = len(b) // 4
    sp = [sum(Ws[r][j] * s[j] for j in range(len(s))) + bs[r] for r in range(len(bs))]
    h, c = [0.0] * H, [0.0] * H
    out = []
    for x in x_seq:
        xp = [sum(Wd[r][j] * x[j] for j in range(len(x))) + bd[r] for r in range(len(bd))]
        h, c = scalar_cell(xp, h, c, W, b)
        feats = h + sp
        out.append(sum(Wr[0][k] * feats[k] for k in range(len(feats))) + br[0])
    return out, h, c, sp


def scalar_cell(xp, h, c, W, b):
    H = len(h)
    v = xp + h
    z = [sum(W[r][k] * v[k] for k in range(len(v))) + b[r] for r in range(4 * H)]
    c2 = [sig(z[H + k]) * c[k] + sig(z[k]) * math.tanh(z[2 * H + k]) for k in range(H)]
    h2 = [sig(z[3 * H + k]) * math.tanh(c2[k]) for k in range(H)]
    return h2, c2


# ---- building blocks --------------------------------------------------------------


def test_project_examples():
    v = np.array([1.5, -2.0, 0.25])
    assert project(v, np.eye(3), np.zeros(3)).tolist() == v.tolist()
    assert project(v, np.zeros((2, 3)), np.array([4.0, -1.0])).tolist() == [4.0, -1.0]
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    loop = [sum(W[i, j] * x[j] for j in range(4)) + b[i] for i in range(3)]
    np.testing.assert_allclose(project(x, W, b), loop, rtol=0, atol=1e-12)
    with pytest.raises(DataError):
        project(np.ones(2), W, b)


def test_lstm_step_zero_params():
    params = {"W": np.zeros((8, 5)), "b": np.zeros(8)}
    h, c = lstm_step(np.ones(3), np.zeros(2), np.zeros(2), params)
    assert h.tolist() == [0.0, 0.0] and c.tolist() == [0.0, 0.0]
    c0 = np.array([0.8, -3.0])
    h, c = lstm_step(np.ones(3), np.zeros(2), c0, params)
    np.testing.assert_allclose(c, 0.5 * c0, atol=1e-15)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c0), atol=1e-15)
    with pytest.raises(DataError):
        lstm_step(np.ones(4), np.zeros(2), np.zeros(2), params)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 50))
def test_lstm_hidden_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    params = {"W": scale * rng.normal(size=(12, 5)), "b": scale * rng.normal(size=12)}
    h, c = lstm_step(rng.normal(size=2), rng.uniform(-1, 1, 3), scale * rng.normal(size=3), params)
    assert np.all(np.abs(h) <= 1.0)


def test_lstm_step_matches_scalar_cell():
    rng = np.random.default_rng(4)
    W, b = rng.normal(size=(12, 5)), rng.normal(size=12)
    x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    h2, c2 = lstm_step(x, h, c, {"W": W, "b": b})
    sh, sc = scalar_cell(x.tolist(), h.tolist(), c.tolist(), W.tolist(), b.tolist())
    np.testing.assert_allclose(h2, sh, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c2, sc, rtol=0, atol=1e-12)


# ---- forward and rollout -----------------------------------------------------------


def test_zero_model_predicts_bias():
    m = tiny()
    p = zero_params(m.config)
    p["br"] = np.array([0.7])
    fr = forward(windows(1), m.with_params(p))
    assert np.all(fr.pred == 0.7)


def test_static_vector_reaches_predictions():
    m = tiny(seed=2)
    ws = windows(2)
    base = forward(ws, m).pred
    bumped = WindowSet(ws.county, ws.start, ws.dyn, ws.hist, ws.static + 1.0, ws.step_targets, ws.future, 4, 3)
    assert not np.allclose(forward(bumped, m).pred, base)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_scalar_oracle(seed):
    m = tiny(seed=seed, H=3, T=4)
    ws = windows(seed + 10)
    fr = forward(ws, m)
    for n in range(len(ws)):
        x_seq = np.concatenate([ws.dyn[n], ws.hist[n][:, None]], axis=1).tolist()
        out, h, c, _ = scalar_forward(x_seq, ws.static[n].tolist(), m.params)
        np.testing.assert_allclose(fr.pred[n], out, rtol=0, atol=1e-12)
        np.testing.assert_allclose(fr.h[n], h, rtol=0, atol=1e-12)
        np.testing.assert_allclose(fr.c[n], c, rtol=0, atol=1e-12)


def test_rollout_matches_scalar_oracle():
    m = tiny(seed=5, clamp=False)
    ws = windows(6)
    got = rollout(m, ws, 5)
    p = {k: v.tolist() for k, v in m.params.items()}
    for n in range(len(ws)):
        x_seq = np.concatenate([ws.dyn[n], ws.hist[n][:, None]], axis=1).tolist()
        out, h, c, sp = scalar_forward(x_seq, ws.static[n].tolist(), m.params)
        y = out[-1]
        expected = [y]
        exog = x_seq[-1][:-1]
        for _ in range(4):
            x = exog + [y]
            xp = [sum(p["Wd"][r][j] * x[j] for j in range(len(x))) + p["bd"][r] for r in range(len(p["bd"]))]
            h, c = scalar_cell(xp, h, c, p["W"], p["b"])
            feats = h + sp
            y = sum(p["Wr"][0][k] * feats[k] for k in range(len(feats))) + p["br"][0]
            expected.append(y)
        np.testing.assert_allclose(got[n], expected, rtol=0, atol=1e-10)


def test_rollout_shapes_and_clamp():
    m = tiny(seed=1)
    ws = windows(1)
    assert rollout(m, ws[0], 0).shape == (0,)
    assert rollout(m, ws, 4).shape == (5, 4)
    p = zero_params(m.config)
    p["br"] = np.array([-2.0])
    assert np.all(rollout(m.with_params(p), ws, 3) == 0.0)
    p["br"] = np.array([1.25])
    assert rollout(m.with_params(p), ws[0], 6).tolist() == [1.25] * 6


def test_rollout_constant_without_recurrent_weights():
    # every LSTM parameter zero: h stays 0, so the head output is fixed by the static path
    m = tiny(seed=3)
    p = dict(m.params)
    p["W"] = np.zeros_like(p["W"])
    p["b"] = np.zeros_like(p["b"])
    out = rollout(m.with_params(p), windows(3), 8, clamp=False)
    assert np.all(out == out[:, :1])


def _log_model(seed):
    m = tiny(seed=seed, clamp=False)
    norm = Normalizer(
        np.array([0.1, -0.2, 0.3, 1.5]), np.array([1.2, 0.8, 2.0, 0.7]),
        np.array([0.5, -0.5]), np.array([1.5, 0.5]), 1.5, 0.7, "log1p",
    )
    return type(m)(m.config, m.params, norm, 2.0)


def _count_windows(seed):
    ws = windows(seed)
    rng = np.random.default_rng(seed)
    return WindowSet(ws.county, ws.start, ws.dyn, rng.poisson(8.0, ws.hist.shape).astype(float), ws.static,
                     ws.step_targets, ws.future, ws.w_in, ws.w_out)


def test_history_column_scaled_like_target():
    m = _log_model(1)
    ws = _count_windows(1)
    X, _ = model_inputs(m, ws)
    np.testing.assert_allclose(X[..., -1], m.norm.target(ws.hist), rtol=0, atol=1e-14)


def test_rollout_step_equals_forward_on_shifted_window():
    # feeding the first forecast back by hand, with the exogenous row carried forward,
    # must reproduce the second rollout step
    m = _log_model(2)
    ws = _count_windows(2)
    r = rollout(m, ws, 2)
    dyn = np.concatenate([ws.dyn, ws.dyn[:, -1:]], axis=1)
    hist = np.concatenate([ws.hist, r[:, :1]], axis=1)
    longer = WindowSet(ws.county, ws.start, dyn, hist, ws.static, np.zeros_like(hist), ws.future, 5, 3)
    fr = forward(longer, m)
    np.testing.assert_allclose(fr.predictions(m)[:, -1], r[:, 1], rtol=1e-12)
    np.testing.assert_allclose(fr.predictions(m)[:, -2], r[:, 0], rtol=1e-12)


def test_forward_reports_non_finite_step():
    m = tiny()
    ws = windows(0)
    ws.dyn[0, 2, 0] = np.nan
    with pytest.raises(NumericFault) as err:
        forward(ws, m)
    assert err.value.step == 2


# ---- loss ------------------------------------------------------------------------


def test_weighted_mse_examples():
    assert weighted_mse([1.0, 2.0], [1.0, 2.0], 0.0, 4.0, 0.0) == 0.0
    assert weighted_mse([0.0, 0.0], [0.0, 10.0], 5.0, 4.0, 0.0) == pytest.approx((1 * 0 + 5 * 100) / 6, abs=1e-12)
    rng = np.random.default_rng(0)
    pred, target = rng.normal(size=7), rng.normal(size=7)
    params = [rng.normal(size=(2, 3)), rng.normal(size=4)]
    naive = sum((a - b) ** 2 for a, b in zip(pred, target)) / 7 + 0.1 * sum(
        float(v) ** 2 for a in params for v in a.ravel()
    )
    assert abs(weighted_mse(pred, target, 0.0, 0.0, 0.1, params) - naive) <= 1e-12
    with pytest.raises(DataError):
        weighted_mse([1.0], [1.0, 2.0], 0.0, 0.0, 0.0)


def test_regularizer_skips_biases():
    m = tiny(seed=1)
    expected = sum(float(np.sum(m.params[k] ** 2)) for k in WEIGHT_NAMES)
    assert weighted_mse([0.0], [0.0], 0.0, 0.0, 1.0, m.params) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=10),
    st.floats(0, 10),
    st.floats(0, 10),
)
def test_monotone_weighting(resid, a1, a2):
    # the above-threshold points' weighted share of squared error never falls as alpha grows
    target = np.array([0.0, 1.0] * (len(resid) // 2) + [1.0] * (len(resid) % 2))
    e2 = np.asarray(resid) ** 2
    lo, hi = sorted((a1, a2))

    def above_share(alpha):
        w = 1 + alpha * (target > 0.5)
        return float(np.sum((w * e2)[target > 0.5]) / np.sum(w))

    assert above_share(hi) >= above_share(lo) - 1e-12


# ---- gradients --------------------------------------------------------------------


def numeric_grads(m, ws, eps=1e-5):
    out = {}
    for k in PARAM_NAMES:
        num = np.zeros_like(m.params[k])
        for idx in np.ndindex(num.shape):
            p = dict(m.params)
            a = p[k].copy()
            a[idx] += eps
            p[k] = a
            lp = window_loss(ws, m.with_params(p))
            a = a.copy()
            a[idx] -= 2 * eps
            p[k] = a
            lm = window_loss(ws, m.with_params(p))
            num[idx] = (lp - lm) / (2 * eps)
        out[k] = num
    return out


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    m = tiny(seed=seed, l2=0.01, weight_boost=4.0)
    ws = windows(100 + seed)
    grads, loss = backward(ws, m)
    assert loss == pytest.approx(window_loss(ws, m), rel=1e-14)
    num = numeric_grads(m, ws)
    for k in PARAM_NAMES:
        err = np.max(np.abs(num[k] - grads[k])) / max(np.max(np.abs(num[k])), 1e-8)
        assert err < 1e-4, k


def _fitted_windows(m, ws):
    # targets equal to the model's own predictions give zero data loss
    fr = forward(ws, m)
    y = m.norm.denormalize_target(fr.pred)
    return WindowSet(ws.county, ws.start, ws.dyn, ws.hist, ws.static, y, ws.future, ws.w_in, ws.w_out)


def test_zero_loss_window_has_zero_gradient():
    m = tiny(seed=7, l2=0.0)
    ws = _fitted_windows(m, windows(7))
    grads, loss = backward(ws, m)
    assert loss <= 1e-20
    for k in PARAM_NAMES:
        assert np.abs(grads[k]).max() <= 1e-10


def test_regularizer_only_gradient():
    m = tiny(seed=8, l2=0.05)
    ws = _fitted_windows(m, windows(8))
    grads, _ = backward(ws, m)
    for k in PARAM_NAMES:
        expected = 2 * 0.05 * m.params[k] if k in WEIGHT_NAMES else np.zeros_like(m.params[k])
        np.testing.assert_allclose(grads[k], expected, rtol=0, atol=1e-10)


# ---- config, normalization, persistence ------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        DwlstmConfig(hidden=0)
    with pytest.raises(ConfigError):
        DwlstmConfig(w_in=1)
    with pytest.raises(ConfigError):
        DwlstmConfig(l2=-1.0)
    with pytest.raises(ConfigError):
        DwlstmConfig.from_dict({"hiden": 4})
    cfg = DwlstmConfig(hidden=7)
    assert DwlstmConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e5), min_size=1, max_size=20), st.sampled_from(["log1p", "identity"]),
       st.floats(-3, 3), st.floats(0.1, 4))
def test_normalizer_round_trip(values, transform, mean, std):
    norm = Normalizer(np.zeros(1), np.ones(1), np.zeros(1), np.ones(1), mean, std, transform)
    y = np.asarray(values)
    np.testing.assert_allclose(norm.denormalize_target(norm.target(y)), y, rtol=1e-10, atol=1e-10)


def test_normalizer_fit_counts_cells_once(small_panel):
    from countycast.windows import build_windows

    y = small_panel.outcome("new_daily_deaths")
    ws = build_windows(small_panel, y, 10, 5, range(0, 20))
    norm = Normalizer.fit(ws, "identity")
    cells = small_panel.dynamic[:, :29]
    np.testing.assert_allclose(norm.dyn_mean[:-1], cells.reshape(-1, cells.shape[2]).mean(axis=0), rtol=1e-12)
    # the target also covers the step target after the last input day
    assert norm.target_mean == pytest.approx(y[:, :30].mean(), rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = tiny(seed=9)
    path = save_checkpoint(m, tmp_path / "model.json")
    back = load_checkpoint(path)
    for k in PARAM_NAMES:
        assert np.array_equal(back.params[k], m.params[k])
    assert back.config == m.config
    ws = windows(9)
    assert np.array_equal(rollout(back, ws, 4), rollout(m, ws, 4))
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_documents(tmp_path):
    path = save_checkpoint(tiny(), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "v.json")
    doc = json.loads(path.read_text())
    doc["params"]["W"]["shape"] = [1, 1]
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "s.json")


# ---- training ---------------------------------------------------------------------


QUICK = DwlstmConfig(hidden=4, dyn_proj=3, static_proj=2, epochs=3, batch_size=16, seed=1)


def test_train_is_deterministic(small_panel, tmp_path):
    task = ForecastTask(w_in=10, w_out=5)
    a = train(small_panel, task, QUICK)
    b = train(small_panel, task, QUICK)
    for k in PARAM_NAMES:
        assert np.array_equal(a.params[k], b.params[k])
    assert a.log == b.log
    assert [row[0] for row in a.log] == list(range(len(a.log)))
    assert a.meta["train_last_day"] < a.meta["test_start"]
    log = write_training_log(a, tmp_path / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_loss" and len(log) == len(a.log) + 1


def test_train_seed_changes_result(small_panel):
    task = ForecastTask(w_in=10, w_out=5)
    a = train(small_panel, task, QUICK)
    b = train(small_panel, task, DwlstmConfig(**{**QUICK.to_dict(), "seed": 2}))
    assert not np.array_equal(a.params["W"], b.params["W"])


def test_train_needs_enough_data(small_panel):
    with pytest.raises(DataError):
        train(small_panel, ForecastTask(w_in=30, w_out=25), QUICK)
    one = ForecastTask(w_in=10, w_out=5, exclude_counties=small_panel.fips[1:])
    with pytest.raises(DataError):
        train(small_panel, one, QUICK)

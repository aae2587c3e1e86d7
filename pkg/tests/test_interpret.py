import numpy as np
import pytest

from kamnet import autograd as ag
from kamnet.autograd import Tensor
from kamnet.interpret import (
    PTC_COLUMNS, alpha_sweep, default_alpha_grid, export_channel_weights, partial_dependence, ptc,
    write_alpha_sweep, write_ptc,
)
from kamnet.model import build
from kamnet.trainer import TrainConfig, train_fold

from conftest import tiny_config, tiny_data


@pytest.fixture(scope="module")
def trained():
    ep = tiny_data(n_per_class=30, seed=11)
    idx = np.arange(len(ep))
    tr, va, te = ep.subset(idx[:60]), ep.subset(idx[60:72]), ep.subset(idx[72:])
    report, model = train_fold(tiny_config("kam"), tr, va, TrainConfig(max_epochs=4, batch_size=16, seed=2), te)
    return report, model, te


# -- alpha sweep ----------------------------------------------------------------

def test_sweep_at_learned_alpha_reproduces_test_accuracy(trained):
    report, model, te = trained
    grid = default_alpha_grid(model)
    res = alpha_sweep(model, te, grid)
    at = int(np.flatnonzero(res.alpha == model.learned_alpha())[0])
    assert res.acc_overall[at] == report.test_acc
    assert res.learned_alpha == report.learned_alpha


def test_sweep_at_zero_matches_all_ones_oracle(trained):
    _, model, te = trained
    res = alpha_sweep(model, te, [0.0, 0.5])
    oracle = build(model.config, dtype=model.dtype)
    oracle.load_state(model.state_arrays())
    oracle.eval()
    oracle.kam.kernel_fn = lambda X, a: Tensor(np.ones(X.shape[:-1] + (X.shape[-2],), dtype=X.dtype))
    pred = oracle.predict(te.data).argmax(axis=1)
    assert res.acc_overall[0] == np.mean(pred == te.labels)
    for c in range(3):
        assert res.acc_per_label[0, c] == np.mean(pred[te.labels == c] == c)


def test_sweep_rejects_bad_grids_and_non_kam_models(trained):
    _, model, te = trained
    for grid in ([], [0.5, 0.2], [-0.1, 0.5], [np.inf]):
        with pytest.raises(ValueError):
            alpha_sweep(model, te, grid)
    with pytest.raises(ValueError):
        alpha_sweep(build(tiny_config("se")), te, [0.5])


def test_analyses_leave_the_model_untouched(trained, tmp_path):
    _, model, te = trained
    before = model.param_hash()
    alpha_sweep(model, te, [0.0, 1.0])
    partial_dependence(model, te.data[:2], [0.3])
    ptc(model, te.data[0], te.data[1], n_steps=5)
    assert model.param_hash() == before and not model.training


def test_sweep_csv(trained, tmp_path):
    _, model, te = trained
    write_alpha_sweep(tmp_path / "s.csv", alpha_sweep(model, te, [0.0, 1.0]))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "alpha,acc_overall,acc_pos,acc_neu,acc_neg" and len(lines) == 3


# -- partial dependence ---------------------------------------------------------------

def test_partial_dependence_matches_finite_differences(trained):
    _, model, te = trained
    grid = np.array([0.0, 0.05, 0.3, 1.0, 3.0])
    x = te.data[:3]
    grads = partial_dependence(model, x, grid)
    work = model.astype(np.float64)
    work.eval()
    h = 1e-6
    for gi, a in enumerate(grid):
        with ag.no_grad():
            up = work.logits(Tensor(x.astype(np.float64)), alpha=a + h).data
            dn = work.logits(Tensor(x.astype(np.float64)), alpha=a - h).data
        np.testing.assert_allclose(grads[gi], (up - dn) / (2 * h), rtol=1e-5, atol=1e-7)


def test_partial_dependence_vanishes_for_large_alpha(trained):
    _, model, te = trained
    assert np.abs(partial_dependence(model, te.data[:4], [1e3])).max() < 1e-8


# -- prediction transition curves ------------------------------------------------------

def test_ptc_endpoints_and_simplex(trained):
    _, model, te = trained
    rec = ptc(model, te.data[0], te.data[1])
    direct = model.predict(te.data[:2])
    np.testing.assert_allclose(rec.probs[0], direct[0], atol=1e-6)
    np.testing.assert_allclose(rec.probs[-1], direct[1], atol=1e-6)
    np.testing.assert_allclose(rec.probs.sum(axis=1), 1, atol=1e-6)
    assert rec.u[0] == 0 and rec.u[-1] == 1 and len(rec.u) == 51


def test_ptc_is_symmetric_under_endpoint_swap(trained):
    _, model, te = trained
    fwd = ptc(model, te.data[2], te.data[3])
    back = ptc(model, te.data[3], te.data[2])
    np.testing.assert_array_equal(fwd.probs, back.probs[::-1])
    np.testing.assert_allclose(fwd.u, 1 - back.u[::-1])


def test_ptc_between_identical_epochs_is_flat(trained, tmp_path):
    _, model, te = trained
    rec = ptc(model, te.data[4], te.data[4], n_steps=7)
    np.testing.assert_array_equal(rec.probs, np.repeat(rec.probs[:1], 7, axis=0))
    write_ptc(tmp_path / "p.csv", rec)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(PTC_COLUMNS)
    with pytest.raises(ValueError):
        ptc(model, te.data[0], te.data[0][:, :-1])


# -- channel weights -------------------------------------------------------------------

def test_channel_map_over_identical_models_has_zero_spread():
    cfg = tiny_config("kam")
    cmap = export_channel_weights([build(cfg, 1), build(cfg, 1), build(cfg, 1)])
    assert np.all(cmap.std == 0)
    np.testing.assert_allclose(cmap.mean, build(cfg, 1).first_depthwise_kernels()[0], rtol=1e-6)
    assert np.abs(cmap.mean_normalized).max() == pytest.approx(1.0)


def test_channel_map_mean_and_std_by_hand():
    cfg = tiny_config()
    models = [build(cfg, s) for s in range(4)]
    k = np.stack([m.first_depthwise_kernels()[2].astype(np.float64) for m in models])
    cmap = export_channel_weights(models, kernel_index=2)
    np.testing.assert_allclose(cmap.mean, k.mean(0))
    np.testing.assert_allclose(cmap.std, np.sqrt(((k - k.mean(0)) ** 2).mean(0)))
    np.testing.assert_allclose(cmap.std_normalized, cmap.std / cmap.std.max())
    assert len(cmap.rows()) == cfg.n_channels


def test_channel_map_rejects_mixed_configs():
    with pytest.raises(ValueError):
        export_channel_weights([build(tiny_config()), build(tiny_config("kam"))])
    with pytest.raises(ValueError):
        export_channel_weights([build(tiny_config())], kernel_index=99)

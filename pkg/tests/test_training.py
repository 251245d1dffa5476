import csv
import math

import numpy as np
import pytest

from sgat.autograd import Tape, Tensor
from sgat.data import karate_club
from sgat.errors import ConfigError, ContractError
from sgat.graph import from_edge_list
from sgat.hard_concrete import l0_penalty
from sgat.models import load_checkpoint, save_checkpoint
from sgat.training import (
    EPOCH_LOG_FIELDS,
    AdamState,
    TrainConfig,
    accuracy_from_logits,
    adam_step,
    build_model,
    cross_entropy,
    evaluate,
    fit,
    preset_config,
    regularized_loss,
    write_epoch_log,
)

from oracles import central_diff, rel_err


@pytest.fixture(scope="module")
def karate():
    return karate_club()


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(lam=-1.0), dict(dropout_input=1.0),
                                 dict(dropout_attn=-0.1), dict(model="mlp"), dict(patience=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig().updated(lambda_=1.0)


def test_preset_precedence():
    cfg = preset_config("karate", lam=0.5)
    assert cfg.lam == 0.5 and cfg.gate == "transductive"
    assert preset_config("no-such-dataset") == TrainConfig()


# -- loss -------------------------------------------------------------------------------


def test_uniform_logits_give_log_c():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.array([0, 1, 2, 3, 0]), np.ones(5, dtype=bool))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_empty_train_mask_is_a_contract_error():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((3, 2))), np.zeros(3, dtype=int), np.zeros(3, dtype=bool))


def test_loss_decomposes_additively():
    rng = np.random.default_rng(0)
    logits, la = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=(5, 1)))
    w = [Tensor(rng.normal(size=(3, 2)))]
    labels, mask = rng.integers(0, 3, 6), np.ones(6, dtype=bool)
    total = regularized_loss(logits, labels, mask, la, 0.1, 0.01, w).item()
    ce = cross_entropy(logits, labels, mask).item()
    expected = ce + 0.1 * l0_penalty(la).item() + 0.01 * float(np.sum(w[0].values ** 2))
    assert total == pytest.approx(expected, abs=1e-14)


def test_pushing_one_gate_down_lowers_loss_by_the_penalty_change():
    rng = np.random.default_rng(1)
    logits, labels, mask = Tensor(rng.normal(size=(4, 2))), rng.integers(0, 2, 4), np.ones(4, dtype=bool)
    la = rng.normal(size=(3, 1))
    lam = 0.2
    prev = regularized_loss(logits, labels, mask, Tensor(la), lam, 0.0, []).item()
    for step in range(1, 6):
        moved = la.copy()
        moved[1, 0] -= step
        cur = regularized_loss(logits, labels, mask, Tensor(moved), lam, 0.0, []).item()
        delta = lam * (l0_penalty(Tensor(moved)).item() - l0_penalty(Tensor(la)).item())
        assert cur < prev
        assert cur - regularized_loss(logits, labels, mask, Tensor(la), lam, 0.0, []).item() == \
            pytest.approx(delta, abs=1e-14)
        prev = cur


def test_log_alpha_gradient_with_frozen_noise(karate):
    cfg = TrainConfig(gate="transductive", lam=0.01, log_alpha_mean=0.0)
    m = build_model(karate, cfg)
    m.log_alpha.values[...] = np.random.default_rng(2).normal(size=m.log_alpha.shape)
    noise = np.random.default_rng(3).uniform(0.05, 0.95, size=m.log_alpha.shape)

    def loss():
        logits = m.forward(karate, training=True, noise=noise)
        return regularized_loss(logits, karate.labels, karate.train_mask, m.trace.log_alpha,
                                cfg.lam, cfg.l2_weight, m.weight_parameters())

    m.log_alpha.zero_grad()
    with Tape() as tape:
        out = loss()
    tape.backward(out)
    numeric = central_diff(lambda: loss().item(), m.log_alpha.values)
    assert rel_err(m.log_alpha.grad, numeric) < 1e-3


# -- Adam -------------------------------------------------------------------------------


def test_zero_gradient_leaves_parameters():
    p = np.array([[1.0, -2.0]])
    adam_step([p], [np.zeros_like(p)], AdamState(), 0.1)
    np.testing.assert_array_equal(p, [[1.0, -2.0]])


def test_first_step_matches_hand_computation():
    p, g = np.array([[0.5]]), np.array([[2.0]])
    adam_step([p], [g], AdamState(), 0.01)
    m_hat = (0.1 * 2.0) / (1 - 0.9)
    v_hat = (0.001 * 4.0) / (1 - 0.999)
    assert p[0, 0] == pytest.approx(0.5 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_constant_gradient_step_tends_to_lr():
    p, state = np.array([[0.0]]), AdamState()
    for _ in range(500):
        before = p.copy()
        adam_step([p], [np.array([[-3.0]])], state, 0.05)
    assert (p - before)[0, 0] == pytest.approx(0.05, rel=1e-6)


def test_quadratic_converges():
    w, state = np.array([[1.0]]), AdamState()
    for _ in range(200):
        adam_step([w], [2.0 * w], state, 0.1)
    assert abs(w[0, 0]) < 1e-3


# -- evaluation -------------------------------------------------------------------------


def test_accuracy_contracts():
    labels = np.array([0, 2, 1])
    assert accuracy_from_logits(np.eye(3)[labels], labels, np.ones(3, dtype=bool)) == 1.0
    # ties go to the lowest class id
    assert accuracy_from_logits(np.zeros((3, 3)), np.array([0, 0, 1]), np.ones(3, dtype=bool)) == 2 / 3
    with pytest.raises(ContractError):
        accuracy_from_logits(np.zeros((3, 3)), labels, np.zeros(3, dtype=bool))


def test_random_logits_hit_chance_level():
    rng = np.random.default_rng(4)
    acc = accuracy_from_logits(rng.normal(size=(20_000, 4)), rng.integers(0, 4, 20_000),
                               np.ones(20_000, dtype=bool))
    assert abs(acc - 0.25) < 0.02


# -- training loop ----------------------------------------------------------------------


def test_empty_train_mask_rejected():
    g = from_edge_list(3, [(0, 1)], labels=[0, 1, 0])
    with pytest.raises(ContractError):
        fit(g, TrainConfig(epochs=1))


@pytest.mark.parametrize("seed", range(5))
def test_open_gate_loss_never_rises_over_ten_epochs(karate, seed):
    r = fit(karate, TrainConfig(gate="open", lam=0.0, dropout_input=0.0, dropout_attn=0.0,
                                seed=seed, epochs=200))
    loss = np.array([rec.loss for rec in r.log[1:]])
    assert np.all(loss[10:] <= loss[:-10])


def test_same_seed_same_log(karate):
    cfg = preset_config("karate", epochs=60, seed=3)
    a, b = fit(karate, cfg), fit(karate, cfg)
    # repr so that the NaN validation column compares equal
    assert repr(a.log) == repr(b.log)
    np.testing.assert_array_equal(a.model.log_alpha.values, b.model.log_alpha.values)


def test_zero_epochs_returns_untrained_model(karate):
    r = fit(karate, preset_config("karate", epochs=0))
    assert len(r.log) == 1 and r.best_epoch == 0
    assert r.kept_edges == karate.n_non_self_edges


@pytest.mark.parametrize("seed", range(5))
def test_no_penalty_keeps_all_edges_and_fits_karate(karate, seed):
    r = fit(karate, preset_config("karate", lam=0.0, seed=seed))
    assert r.test_acc >= 31 / 32
    assert r.kept_edges == karate.n_non_self_edges


def test_kept_edges_shrink_as_lambda_grows(karate):
    grid = [0.0, 1e-4, 1e-3, 5e-3, 1e-2, 2e-2]
    kept = [fit(karate, preset_config("karate", lam=lam)).kept_edges for lam in grid]
    slack = 0.05 * karate.n_non_self_edges
    for lo, hi in zip(kept, kept[1:]):
        assert hi <= lo + slack
    assert kept[-1] < kept[0]


def test_validation_selection_keeps_best_epoch():
    from sgat.data import synth_graph
    g = synth_graph(120, 3, 0.8, 6, seed=0)
    r = fit(g, TrainConfig(epochs=40, patience=1000, seed=1))
    best_val = max(rec.val_acc for rec in r.log)
    assert r.val_acc == best_val
    # the latest epoch reaching the best validation accuracy wins
    assert r.best_epoch == max(rec.epoch for rec in r.log if rec.val_acc == best_val)
    assert evaluate(r.model, g) == r.test_acc


def test_early_stopping_honours_patience():
    from sgat.data import synth_graph
    g = synth_graph(120, 3, 0.8, 6, seed=0)
    r = fit(g, TrainConfig(epochs=500, patience=5, seed=1))
    assert len(r.log) - 1 < 500


def test_checkpoint_reproduces_accuracy(tmp_path, karate):
    r = fit(karate, preset_config("karate", epochs=50))
    save_checkpoint(r.model, tmp_path / "m.json")
    back, _ = load_checkpoint(tmp_path / "m.json")
    assert evaluate(back, karate) == evaluate(r.model, karate) == r.test_acc


def test_epoch_log_csv(tmp_path, karate):
    r = fit(karate, preset_config("karate", epochs=5))
    write_epoch_log(r.log, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == EPOCH_LOG_FIELDS
    assert len(rows) == 7
    assert float(rows[-1][1]) == r.log[-1].loss

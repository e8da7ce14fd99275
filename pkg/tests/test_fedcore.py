import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedchem.dataset import TargetScaler
from fedchem.fedcore import (
    EvalSet,
    FedConfig,
    LayoutMismatch,
    checkpoint_round,
    fed_avg_aggregate,
    load_round_checkpoint,
    run_federation,
    select_clients,
    server_init,
)
from fedchem.gradcheck import SMALL_MODEL
from fedchem.nnet import CheckpointFormatError, MpnnConfig, ParamVector, init_params
from fedchem.strategies import StrategyConfig, TrainConfig, client_seed, client_update

LAYOUT = (("w", (2, 3)), ("b", (2,)))


def pv(values):
    return ParamVector(np.asarray(values, dtype=np.float64), LAYOUT)


def hand_mean(vectors, counts):
    total = sum(counts)
    out = []
    for j in range(len(vectors[0])):
        acc = (counts[0] / total) * vectors[0][j]
        for v, n in zip(vectors[1:], counts[1:]):
            acc = acc + (n / total) * v[j]
        out.append(acc)
    return np.array(out)


def test_two_equal_clients_is_midpoint():
    p, q = np.arange(8.0), np.arange(8.0) * 3 + 1
    np.testing.assert_array_equal(fed_avg_aggregate([(pv(p), 5), (pv(q), 5)]).values, (p + q) / 2)


def test_weighted_example():
    out = fed_avg_aggregate([(pv(np.zeros(8)), 1), (pv(np.full(8, 4.0)), 3)])
    np.testing.assert_array_equal(out.values, np.full(8, 3.0))


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=8, max_size=8))
def test_single_client_identity(vals):
    p = pv(vals)
    assert fed_avg_aggregate([(p, 17)]).values.tobytes() == p.values.tobytes()


@given(st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.lists(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=8, max_size=8), min_size=k, max_size=k),
    st.lists(st.integers(1, 500), min_size=k, max_size=k))))
def test_matches_hand_weighted_mean(case):
    vecs, counts = case
    out = fed_avg_aggregate([(pv(v), n) for v, n in zip(vecs, counts)])
    assert out.values.tobytes() == hand_mean(vecs, counts).tobytes()
    assert np.isfinite(out.values).all() and out.layout == LAYOUT


def test_layout_mismatch():
    other = ParamVector(np.zeros(8), (("w", (8,)),))
    with pytest.raises(LayoutMismatch):
        fed_avg_aggregate([(pv(np.zeros(8)), 1), (other, 1)])
    with pytest.raises(ValueError):
        fed_avg_aggregate([])
    with pytest.raises(ValueError):
        fed_avg_aggregate([(pv(np.zeros(8)), 0)])


def test_config_invariants():
    for bad in (dict(comm_rounds=0), dict(local_steps=-1), dict(batch_size=0), dict(num_clients=0),
                dict(client_fraction=0.0), dict(client_fraction=1.5)):
        with pytest.raises(ValueError):
            FedConfig(**bad)
    assert FedConfig().comm_rounds == 30 and FedConfig().batch_size == 64


@pytest.mark.parametrize("L,frac", [(4, 1.0), (5, 0.5), (6, 0.34), (3, 0.01)])
def test_selection_size_and_determinism(L, frac):
    cfg = FedConfig(num_clients=L, client_fraction=frac, run_seed=9)
    for r in range(1, 6):
        chosen = select_clients(cfg, r)
        assert len(chosen) == math.ceil(frac * L) and len(set(chosen)) == len(chosen)
        assert chosen == sorted(chosen) and chosen == select_clients(cfg, r)


# ---------------------------------------------------------------- federation loop

@pytest.fixture(scope="module")
def setup(toy50):
    clients = [toy50.subset(range(k, 40, 3)) for k in range(3)]
    valid = EvalSet(toy50.subset(range(40, 50)), TargetScaler(np.zeros(1), np.ones(1)), "rmse")
    return clients, valid


def fcfg(**kw):
    base = dict(num_clients=3, comm_rounds=3, local_steps=4, batch_size=8, run_seed=5,
                strategy=StrategyConfig(kind="flit_plus"))
    base.update(kw)
    return FedConfig(**base)


def test_noop_round_returns_init(setup):
    clients, valid = setup
    cfg = fcfg(comm_rounds=1, local_steps=0)
    res = run_federation(cfg, SMALL_MODEL, clients, valid)
    # client weights 14/40, 13/40, 13/40 sum to 1 only up to rounding
    np.testing.assert_allclose(res.params.values, server_init(cfg, SMALL_MODEL).values, rtol=1e-15, atol=0)


def test_history_contract(setup):
    clients, valid = setup
    res = run_federation(fcfg(client_fraction=0.5), SMALL_MODEL, clients, valid)
    assert [r.round for r in res.history] == [1, 2, 3]
    assert all(len(r.clients) == 2 and len(r.client_losses) == 2 for r in res.history)
    vals = [r.val_metric for r in res.history]
    assert res.best_val == min(vals) and res.history[res.best_round - 1].val_metric == res.best_val
    assert len(res.diagnostics) == 6


def test_single_client_equals_centralized(toy50):
    valid = EvalSet(toy50.subset(range(40, 50)), TargetScaler(np.zeros(1), np.ones(1)), "rmse")
    data = toy50.subset(range(40))
    cfg = fcfg(num_clients=1, strategy=StrategyConfig())
    res = run_federation(cfg, SMALL_MODEL, [data], valid)
    p = server_init(cfg, SMALL_MODEL)
    for r in range(1, 4):
        p = client_update(p, SMALL_MODEL, data, cfg.strategy, TrainConfig(4, 8), client_seed(5, 0, r)).params
    assert res.params.values.tobytes() == p.values.tobytes()


def test_concurrent_equals_sequential(setup):
    clients, valid = setup
    seq, par = [], []
    run_federation(fcfg(max_workers=1), SMALL_MODEL, clients, valid,
                   on_round=lambda rec, p, _: seq.append(p.values.tobytes()))
    run_federation(fcfg(max_workers=3), SMALL_MODEL, clients, valid,
                   on_round=lambda rec, p, _: par.append(p.values.tobytes()))
    assert seq == par and len(seq) == 3


def test_identical_clients_aggregate_to_one_update(toy50):
    data = toy50.subset(range(30))
    valid = EvalSet(toy50.subset(range(40, 50)), TargetScaler(np.zeros(1), np.ones(1)), "rmse")
    cfg = fcfg(comm_rounds=1, strategy=StrategyConfig())
    res = run_federation(cfg, SMALL_MODEL, [data] * 3, valid)
    # full-batch steps make every client's update identical despite per-client seeds
    cfg = fcfg(comm_rounds=1, batch_size=64, strategy=StrategyConfig())
    res = run_federation(cfg, SMALL_MODEL, [data] * 3, valid)
    one = client_update(server_init(cfg, SMALL_MODEL), SMALL_MODEL, data, cfg.strategy, cfg.train,
                        client_seed(5, 0, 1)).params
    np.testing.assert_allclose(res.params.values, one.values, rtol=1e-15, atol=0)


def test_checkpoint_replay(setup, tmp_path):
    clients, valid = setup
    cfg = fcfg()
    saved = {}

    def save(rec, params, _):
        checkpoint_round(params, SMALL_MODEL, rec.round, tmp_path / f"r{rec.round}.ckpt")
        saved[rec.round] = rec

    full = run_federation(cfg, SMALL_MODEL, clients, valid, on_round=save)
    params, model, rnd, meta = load_round_checkpoint(tmp_path / "r1.ckpt")
    assert rnd == 1 and model == SMALL_MODEL and meta["round"] == 1
    rest = run_federation(cfg, SMALL_MODEL, clients, valid, initial=params, start_round=2,
                          best=(1, saved[1].val_metric, params))
    assert [r.payload() for r in rest.history] == [r.payload() for r in full.history[1:]]
    assert rest.params.values.tobytes() == full.params.values.tobytes()
    assert rest.best_round == full.best_round


def test_checkpoint_bad_magic(tmp_path):
    p = init_params(MpnnConfig(node_dim=4, head_hidden=4, edge_hidden=4), np.random.default_rng(0))
    path = checkpoint_round(p, MpnnConfig(node_dim=4, head_hidden=4, edge_hidden=4), 2, tmp_path / "c.ckpt")
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(CheckpointFormatError):
        load_round_checkpoint(path)


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(OSError, match="nope.ckpt"):
        load_round_checkpoint(tmp_path / "nope.ckpt")


def test_empty_client_rejected(setup):
    clients, valid = setup
    with pytest.raises(ValueError):
        run_federation(fcfg(), SMALL_MODEL, [clients[0], clients[1], clients[0].subset([])], valid)
    with pytest.raises(ValueError):
        run_federation(fcfg(num_clients=2), SMALL_MODEL, clients, valid)

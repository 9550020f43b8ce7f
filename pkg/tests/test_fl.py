import json

import numpy as np
import pytest

import shiftleak.fl as fl
from conftest import small_config
from shiftleak.attacker import RoundContext
from shiftleak.data import ShiftSpec, synth_blobs
from shiftleak.errors import ConfigError, InsufficientSamplesError, LayoutError
from shiftleak.experiments import (build_federation_data, build_model, first_flag, run_experiment)
from shiftleak.fl import (ExperimentConfig, FederationData, HookError, Seeds, client_order_seed,
                          fedavg_aggregate, final_params, load_config, run_centralized,
                          run_federation)
from shiftleak.nn import TrainState, dense, init_model, tabular_net_layers, train_epochs


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #

def _params(rng, k=3):
    m = init_model((4,), [dense(3, "none")])
    return [m.params.with_values(rng.standard_normal(m.num_params)) for _ in range(k)]


def test_fedavg_cases(rng):
    (w,) = _params(rng, 1)
    assert np.array_equal(fedavg_aggregate([w, w]).values, w.values)
    assert np.all(fedavg_aggregate([w, w.with_values(-w.values)]).values == 0)


def test_fedavg_scalar_loop_oracle(rng):
    ps = _params(rng, 3)
    out = fedavg_aggregate(ps).values
    for i in range(len(out)):
        acc = 0.0
        for p in ps:
            acc += p.values[i]
        assert out[i] == pytest.approx(acc / 3, abs=1e-15)


def test_fedavg_layout_mismatch(rng):
    a = init_model((4,), [dense(3, "none")]).params
    b = init_model((3,), [dense(4, "none")]).params
    with pytest.raises(LayoutError):
        fedavg_aggregate([a, b])


# --------------------------------------------------------------------------- #
# Config
# --------------------------------------------------------------------------- #

def test_config_violations_name_fields():
    v = ExperimentConfig(r=10, s=12).violations()
    assert any("shift round after end" in x for x in v)
    assert any(x.startswith("m:") for x in ExperimentConfig(n=2, m=2).violations())
    assert any(x.startswith("attacker:") for x in ExperimentConfig(n=3, m=1, attacker=2,
                                                                    ).violations()) is False
    assert ExperimentConfig(s=1).violations()
    assert ExperimentConfig(shift=ShiftSpec.even_odd(10, 0.7), client_ratios=[0.7, 0.8]).violations()
    assert ExperimentConfig().violations() == []


def test_attacker_never_shifts():
    cfg = ExperimentConfig(n=5, m=3, attacker=1)
    assert cfg.attacker not in cfg.shifting_clients
    assert cfg.shifting_clients == [2, 3, 4]


def test_config_round_trip_and_unknown_field(tmp_path):
    cfg = small_config()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"rounds": 3})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


# --------------------------------------------------------------------------- #
# Federation data
# --------------------------------------------------------------------------- #

def test_federation_data_sizes_and_disjoint_swaps():
    cfg = small_config(n=3, m=2, d=100, benign_swap=True)
    data = build_federation_data(cfg)
    assert [len(c) for c in data.clients] == [cfg.d] * 3
    swapped = [data.swaps[c][cfg.s] for c in range(3)]
    assert all(len(s) == cfg.d for s in swapped)
    rows = [{tuple(r) for r in ds.features} for ds in data.clients + swapped + [data.validation]]
    total = sum(len(r) for r in rows)
    assert len(set().union(*rows)) == total  # every sample used at most once
    for c in cfg.shifting_clients:
        assert swapped[c].fraction_in([0, 2]) == pytest.approx(0.8)
    assert len(data.probe) == cfg.probe_size


def test_client_ratios_independent_shifts():
    cfg = small_config(n=4, m=2, d=100, client_ratios=[0.6, 0.9])
    data = build_federation_data(cfg)
    assert data.swaps[1][cfg.s].fraction_in([0, 2]) == pytest.approx(0.6)
    assert data.swaps[2][cfg.s].fraction_in([0, 2]) == pytest.approx(0.9)


def test_federation_data_too_small():
    with pytest.raises(InsufficientSamplesError):
        build_federation_data(small_config(d=5000))


# --------------------------------------------------------------------------- #
# Simulation
# --------------------------------------------------------------------------- #

def test_one_client_federation_equals_centralized_training():
    cfg = small_config(mode="centralized", n=1, shift=None, r=4)
    data = build_federation_data(cfg)
    model = build_model(cfg, data.clients[0].feature_shape, 4)
    recs = run_centralized(cfg, data, model)
    state = TrainState.fresh(model, client_order_seed(cfg.seeds.order, 0))
    m = model
    for rec in recs:
        assert np.array_equal(rec.global_params.values, m.params.values)
        m = train_epochs(m, data.clients[0], 1, cfg.batch_size, cfg.lr, state=state)
        assert np.array_equal(rec.aggregate.values, m.params.values)


def test_identical_clients_global_equals_local(monkeypatch):
    monkeypatch.setattr(fl, "client_order_seed", lambda order, client: order)
    ds = synth_blobs(3, 40, 4, seed=0)
    cfg = small_config(shift=None, r=3)
    model = init_model((4,), tabular_net_layers(3), seed=0)
    data = FederationData([ds, ds], ds, ds.subset(range(8)))
    recs = run_federation(cfg, data, model)
    state = TrainState.fresh(model, cfg.seeds.order)
    m = model
    for rec in recs:
        m = train_epochs(m, ds, cfg.l, cfg.batch_size, cfg.lr, state=state)
        assert np.array_equal(rec.aggregate.values, m.params.values)
        assert rec.client_val_loss[0] == rec.client_val_loss[1]


def test_swap_happens_at_round_s_and_sizes_constant():
    cfg = small_config()
    res = run_experiment(cfg)
    for rec in res.records:
        assert rec.swapped == ([1] if rec.round == cfg.s else [])
    assert len(res.records) == cfg.r


def test_broadcast_precedes_training():
    cfg = small_config(r=3, s=2)
    res = run_experiment(cfg, keep_params=True)
    for prev, cur in zip(res.records, res.records[1:]):
        assert np.array_equal(prev.aggregate.values, cur.global_params.values)
    assert np.array_equal(final_params(res.records).values, res.records[-1].aggregate.values)


def test_run_is_deterministic():
    cfg = small_config()
    a, b = run_experiment(cfg, keep_params=True), run_experiment(cfg, keep_params=True)
    assert np.array_equal(final_params(a.records).values, final_params(b.records).values)
    for k, s in a.observer.series.items():
        assert s.series == b.observer.series[k].series


def test_hook_failure_keeps_partial_records():
    cfg = small_config(r=5)
    data = build_federation_data(cfg)
    model = build_model(cfg, data.clients[0].feature_shape, 4)

    def hook(ctx: RoundContext, rec):
        if ctx.round == 3:
            raise RuntimeError("boom")

    with pytest.raises(HookError) as info:
        run_federation(cfg, data, model, [hook])
    assert [r.round for r in info.value.records] == [1, 2, 3]


def test_hook_context_is_read_only():
    cfg = small_config(r=2)
    data = build_federation_data(cfg)
    model = build_model(cfg, data.clients[0].feature_shape, 4)

    def hook(ctx, rec):
        with pytest.raises(ValueError):
            ctx.global_params.values[0] = 1.0

    run_federation(cfg, data, model, [hook])


def test_immediate_shift_boundary():
    cfg = small_config(s=2)
    res = run_experiment(cfg)
    assert res.records[1].swapped == [1]
    assert all(np.all(np.isfinite(s.values)) for s in res.observer.series.values())


def test_reset_optimizer_changes_trajectory():
    a = run_experiment(small_config(r=3, s=2), keep_params=True)
    b = run_experiment(small_config(r=3, s=2, reset_optimizer=True), keep_params=True)
    assert not np.array_equal(final_params(a.records).values, final_params(b.records).values)


def test_repeats_use_offset_seeds():
    cfg = small_config(r=3, s=2)
    a, b = run_experiment(cfg, 0), run_experiment(cfg, 1)
    assert b.config.seeds == Seeds(1001, 1002, 1003)
    assert a.val_loss != b.val_loss


def test_first_flag_shape():
    res = run_experiment(small_config())
    flag = first_flag(res, threshold=0.0)
    assert flag is not None and flag[0] == res.config.e + 2

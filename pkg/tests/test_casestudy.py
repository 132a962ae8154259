import json

import numpy as np
import pytest

from nse.casestudy import (
    SampleLog,
    collinearity_residuals,
    containment_mask,
    export_log_csv,
    export_log_jsonl,
    geometry_report,
    nearest_row_distance,
    record_run,
    record_training_run,
)
from nse.dataset import build_graph
from nse.encoder import EmbeddingModel, propagate
from nse.samplers import SamplerConfig
from nse.synthetic import separable_toy
from nse.training import TrainConfig, Trainer


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(epochs=30, batch_size=64, learning_rate=1e-2, dim=16, seed=0,
                      encoder="lightgcn", num_layers=1, sampler=SamplerConfig("rns"))
    return Trainer(separable_toy(), cfg).fit()


def pair(trainer):
    u, i = trainer.dataset.train_edges[0]
    return int(u), int(i)


def test_single_record(trained):
    u, i = pair(trained)
    log = record_run(trained.snapshot(), SamplerConfig("dins", M=8), u, i, trained.dataset,
                     np.random.default_rng(0), draws=1)
    assert len(log) == 1 and log.negative.shape == (1, 16)


def test_rns_point_wise(trained):
    u, i = pair(trained)
    log = record_run(trained.snapshot(), SamplerConfig("rns"), u, i, trained.dataset, np.random.default_rng(1))
    rep = geometry_report(log)
    assert rep.samples == 10_000
    assert rep.nearest_item_distance_max < 1e-9
    assert rep.collinearity_mean is None and rep.containment_rate is None


def test_mixgcf_line_wise(trained):
    u, i = pair(trained)
    log = record_run(trained.snapshot(), SamplerConfig("mixgcf", M=8), u, i, trained.dataset,
                     np.random.default_rng(2))
    rep = geometry_report(log)
    assert rep.collinearity_max < 1e-9
    assert rep.containment_rate == 1.0


def test_dins_area_wise(trained):
    u, i = pair(trained)
    log = record_run(trained.snapshot(), SamplerConfig("dins", M=8, beta=1.0), u, i, trained.dataset,
                     np.random.default_rng(3))
    rep = geometry_report(log)
    assert rep.containment_rate == 1.0
    assert rep.off_line_fraction > 0.99


def test_dins_radius_below_rns(trained):
    u, i = pair(trained)
    stack = trained.snapshot()
    reps = {name: geometry_report(record_run(stack, SamplerConfig(name, M=8), u, i, trained.dataset,
                                             np.random.default_rng(4)))
            for name in ("rns", "dins")}
    assert reps["dins"].radius_mean < reps["rns"].radius_mean


def test_zero_radius_log():
    v = np.ones((3, 2))
    slots = np.ones((3, 1, 2))
    log = SampleLog("dins", 0, 0, np.zeros(3), v, v.copy(), np.zeros((3, 1), int), np.ones((3, 1, 2)),
                    slots, slots, slots)
    rep = geometry_report(log)
    assert rep.radius_mean == rep.radius_max == 0.0


def test_empty_log_rejected():
    e = np.zeros((0, 2))
    s = np.zeros((0, 1, 2))
    with pytest.raises(ValueError):
        geometry_report(SampleLog("rns", 0, 0, np.zeros(0), e, e, np.zeros((0, 1), int), s, s, s, s))


def test_residual_helpers():
    p, b = np.array([0.0, 0.0]), np.array([2.0, 0.0])
    assert collinearity_residuals(p, b, np.array([1.0, 0.0])) == 0.0
    assert collinearity_residuals(p, b, np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert containment_mask(p, b, np.array([1.0, 0.5])).tolist() == [True, False]
    table = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert nearest_row_distance(np.array([[3.0, 4.0], [0.0, 1.0]]), table).tolist() == [0.0, 1.0]


def test_training_run_log_and_exports(tmp_path):
    cfg = TrainConfig(epochs=0, batch_size=64, learning_rate=1e-2, dim=4, seed=0, sampler=SamplerConfig("dins", M=4))
    tr = Trainer(separable_toy(), cfg)
    u, i = pair(tr)
    log = record_training_run(tr, SamplerConfig("dins", M=4), u, i, epochs=3, draws_per_epoch=5)
    assert len(log) == 15 and log.epochs.tolist() == [1] * 5 + [2] * 5 + [3] * 5
    export_log_csv(tmp_path / "log.csv", log)
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["role", "epoch", "draw"] and len(rows) == 31
    export_log_jsonl(tmp_path / "log.jsonl", log)
    first = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[0])
    assert first["user"] == u and first["pos_item"] == i and len(first["boundary"]) == 1


def test_slot_geometry_multi_layer():
    rng = np.random.default_rng(0)
    ds = separable_toy()
    stack = propagate(build_graph(ds), EmbeddingModel.create(ds.num_users, ds.num_items, 6, rng, num_layers=2))
    u, i = ds.train_edges[0]
    log = record_run(stack, SamplerConfig("dins", M=8), int(u), int(i), ds, rng, draws=500)
    assert log.slot_mixed.shape == (500, 3, 6)
    assert geometry_report(log).containment_rate == 1.0

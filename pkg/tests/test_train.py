import numpy as np
import pytest

from ritseg.checkpoint import Checkpoint, read_checkpoint
from ritseg.data import AugmentConfig, DataError, DatasetSplit, Sample, synth_generate
from ritseg.train import TrainConfig, TrainState, evaluate, lr_plateau_step, train


@pytest.fixture(scope="module")
def tiny():
    return synth_generate(4, seed=1, height=32, width=32)


def run(data, **kw):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 2, "seed": 4, **kw})
    rows = []
    best = train(cfg, data, on_epoch=rows.append)
    return best, rows


# -- plateau rule ---------------------------------------------------------------------


def feed(values, **kw):
    state = TrainState(lr=1e-3)
    for v in values:
        lr_plateau_step(state, v, **kw)
    return state


def test_plateau_six_flat_epochs_cut_once():
    assert feed([1.0] + [1.0] * 6).lr == pytest.approx(1e-4)
    assert feed([1.0] + [1.0] * 5).lr == pytest.approx(1e-3)


def test_plateau_twelve_flat_epochs_cut_twice():
    state = feed([1.0] * 13)
    assert state.lr == pytest.approx(1e-5) and state.reductions == 2


def test_plateau_improvement_resets():
    state = feed([1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert state.lr == 1e-3 and state.plateau_count == 5
    assert feed([1.0, 0.99995] + [1.0] * 5).lr == pytest.approx(1e-4)  # below min_delta


def test_config_errors():
    for bad in ({"lr": 0}, {"batch_size": 0}, {"epochs": 0}, {"patience": 0}, {"plateau_factor": 1.0},
                {"select_by": "f1"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- loop -----------------------------------------------------------------------------


def test_deterministic_checkpoints(tiny):
    a, _ = run(tiny)
    b, _ = run(tiny)
    assert a.to_bytes() == b.to_bytes()
    c, _ = run(tiny, seed=5)
    assert c.to_bytes() != a.to_bytes()


def test_recorded_score_matches_evaluate(tiny):
    best, rows = run(tiny, epochs=3)
    assert best.epoch in [r["epoch"] for r in rows]
    recorded = next(r["val_miou"] for r in rows if r["epoch"] == best.epoch)
    assert best.best_score == pytest.approx(recorded, abs=1e-6)
    assert evaluate(best, tiny.validation).miou == pytest.approx(best.best_score, abs=1e-6)


def test_log_rows_and_files(tmp_path, tiny):
    best, rows = run(tiny, checkpoint_dir=tmp_path)
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[0]["weights"] == (1, 20, 1, 0)
    assert all(np.isfinite(r["train_loss"]) and 0 <= r["val_miou"] <= 1 for r in rows)
    assert read_checkpoint(tmp_path / "best.ritn").to_bytes() == best.to_bytes()
    assert read_checkpoint(tmp_path / "last.ritn").epoch == 1
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert lines[0].startswith("epoch\tlr") and len(lines) == 3


def test_early_stop(tiny):
    seen = []
    train(TrainConfig(epochs=5, batch_size=4), tiny, on_epoch=lambda r: seen.append(r) or True)
    assert len(seen) == 1


def test_select_by_loss(tiny):
    best, rows = run(tiny, select_by="loss", epochs=3)
    assert best.best_score == pytest.approx(min(r["val_loss"] for r in rows))


def test_no_augmentation_and_no_preprocess(tiny):
    best, _ = run(tiny, augment=AugmentConfig.disabled(), preprocess=False, epochs=1)
    assert isinstance(best, Checkpoint)


def test_resume_continues_epoch_count(tiny):
    first, _ = run(tiny, epochs=1)
    rows = []
    train(TrainConfig(epochs=2, batch_size=2), tiny, model=first.to_model(), on_epoch=rows.append,
          start_epoch=first.epoch + 1)
    assert [r["epoch"] for r in rows] == [1, 2]


def test_empty_and_indivisible_data(tiny):
    with pytest.raises(DataError):
        train(TrainConfig(epochs=1), DatasetSplit())
    odd = Sample("odd", np.zeros((30, 32)), np.zeros((30, 32), np.uint8))
    with pytest.raises(DataError):
        train(TrainConfig(epochs=1), DatasetSplit(train=[odd]))


def test_falls_back_to_train_split_for_validation(tiny):
    data = DatasetSplit(train=tiny.train)
    best, rows = run(data, epochs=1)
    assert evaluate(best, tiny.train).miou == pytest.approx(rows[0]["val_miou"], abs=1e-6)


def test_plateau_strictly_improving_keeps_lr():
    state = feed([1.0 - 0.1 * i for i in range(9)])
    assert state.lr == 1e-3 and state.reductions == 0


def test_lr_never_increases():
    rng = np.random.default_rng(0)
    state = TrainState(lr=1e-3)
    lrs = []
    for v in rng.random(60):
        lr_plateau_step(state, float(v))
        lrs.append(state.lr)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert state.lr == pytest.approx(1e-3 / 10**state.reductions)

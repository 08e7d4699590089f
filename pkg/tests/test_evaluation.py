import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from udaclr import ValidationError
from udaclr.config import TrainConfig
from udaclr.datasets import ArrayDataset, Sample, make_benchmark, stack_samples
from udaclr.evaluation import (GRIDS, TABLE2_GRID, TABLE3_GRID, AblationRow, dice, evaluate, evaluate_arrays,
                               full_grid, read_ablation_csv, run_ablation, summarize)
from udaclr.pseudo_uncertainty import reliability_mask

masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))


def test_dice_identical_and_disjoint():
    a = np.zeros((8, 8), np.uint8)
    a[:4] = 1
    assert dice(a, a) == 1.0
    assert dice(a, 1 - a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_half_overlap():
    a = np.zeros((20, 20), np.uint8)
    b = np.zeros((20, 20), np.uint8)
    a[:5] = 1  # 100 pixels, rows 0-4
    b[:5, :10] = 1
    b[5:10, :10] = 1  # 100 pixels, 50 shared
    assert a.sum() == b.sum() == 100 and (a & b).sum() == 50
    assert dice(a, b) == 0.5


def test_dice_validation():
    with pytest.raises(ValidationError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        dice(np.full((2, 2), 2), np.zeros((2, 2)))


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


@pytest.fixture(scope="module")
def test_set():
    return stack_samples(make_benchmark("mild", n_source=1, n_target=1, n_test=4, size=32, seed=1).target_test)


def test_ground_truth_passthrough_scores_one(test_set):
    lookup = {t.numpy().tobytes(): m for t, m in zip(torch.from_numpy(test_set.images), test_set.masks)}

    def oracle(x):
        return torch.stack([torch.from_numpy(lookup[xi.contiguous().numpy().tobytes()]) for xi in x])

    res = evaluate_arrays(oracle, test_set, 0.75)
    assert res.dice_disc == 1.0 and res.dice_cup == 1.0
    assert res.dice_cup == np.mean([r[2] for r in res.per_image])


def test_empty_prediction_scores_zero(test_set):
    res = evaluate_arrays(lambda x: torch.zeros(x.shape[0], 2, 32, 32), test_set, 0.75)
    assert res.dice_disc == 0.0 and res.dice_cup == 0.0


def test_unlabelled_dataset_rejected(test_set):
    with pytest.raises(ValidationError):
        evaluate_arrays(lambda x: x, ArrayDataset(test_set.images, None, None), 0.75)


def test_ablation_grids_mirror_component_table():
    assert len(TABLE2_GRID) == 8
    combos = {(r.src_reg, r.trg_reg, r.inter_reg) for r in TABLE2_GRID}
    assert combos == {(r.src_reg, r.trg_reg, r.inter_reg) for r in full_grid()}
    assert TABLE2_GRID[0].name == "baseline" and TABLE2_GRID[-1].name == "baseline+src_reg+trg_reg+inter_reg"
    assert [r.ugna for r in TABLE3_GRID] == [False, True]


def test_ablation_rows_differ_only_in_toggles():
    base = TrainConfig(input_size=32)
    cfgs = {r.name: r.apply(base) for r in TABLE2_GRID + TABLE3_GRID[:1]}
    keys = ("lambda2", "lambda3", "lambda4", "xi")
    ref = cfgs["baseline"].to_dict()
    for c in cfgs.values():
        diff = {k for k, v in c.to_dict().items() if v != ref[k]}
        assert diff <= set(keys)
    assert cfgs["baseline"].lambdas == (0.01, 0.0, 0.0, 0.0)
    assert cfgs["baseline+src_reg+trg_reg+inter_reg"].lambdas == (0.01, 0.01, 0.01, 0.01)


def test_ugna_off_keeps_every_pseudo_labelled_pixel():
    cfg = AblationRow("x", inter_reg=True, ugna=False).apply(TrainConfig())
    assert math.isinf(cfg.xi)
    S = torch.rand(2, 2, 8, 8) * 5
    assert torch.equal(reliability_mask(S, cfg.xi), torch.ones_like(S))


def test_baseline_only_grid(tmp_path):
    data = make_benchmark("mild", n_source=2, n_target=2, n_test=2, size=32, seed=2)
    base = TrainConfig(input_size=32, batch_size=2, epochs=1, mc_samples=2, deterministic=True)
    recs = run_ablation(base, GRIDS["baseline"], data, seeds=[0], out_dir=tmp_path)
    assert len(recs) == 1 and recs[0].name == "baseline"
    assert read_ablation_csv(tmp_path / "ablation.csv") == recs
    for f in ("summary.md", "results.json", "plots/ablation.png"):
        assert (tmp_path / f).exists()
    assert summarize(recs)["baseline"]["n"] == 1


def test_evaluate_checkpoint_and_dump(tmp_path):
    from udaclr.trainer import build_state, save_checkpoint

    data = make_benchmark("mild", n_source=1, n_target=1, n_test=3, size=32, seed=4)
    state = build_state(TrainConfig(input_size=32))
    save_checkpoint(state, tmp_path / "c.pt")
    res = evaluate(tmp_path / "c.pt", data.target_test, 0.75, out_dir=tmp_path / "ev", dump_masks=True)
    assert len(res.per_image) == 3
    assert (tmp_path / "ev/results.json").exists()
    assert len(list((tmp_path / "ev/masks").glob("*.png"))) == 3
    with pytest.raises(ValidationError):
        evaluate(state, [Sample(data.target[0].image, None)], 0.75)

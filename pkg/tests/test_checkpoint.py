import json
import struct
from dataclasses import replace

import pytest
import torch

from conftest import write_run_config
from occ4d.checkpoint import DENOISER_MAGIC, TOKENIZER_MAGIC, load_checkpoint, restore, save_checkpoint
from occ4d.config import load_config
from occ4d.errors import DataError
from occ4d.export import read_loss_csv
from occ4d.nn_utils import make_optimizer
from occ4d.tokenizer import OccupancyTokenizer, tokenizer_train_step
from occ4d.training import run_make_data, run_train_diffusion, run_train_tokenizer


@pytest.fixture
def trained(tiny_tokenizer_cfg, rng):
    model = OccupancyTokenizer(tiny_tokenizer_cfg)
    optimizer = make_optimizer(model.parameters(), 1e-3, 0.01)
    labels = torch.from_numpy(rng.integers(0, 8, size=(2, 4, 8, 8, 2)))
    tokenizer_train_step(labels, model, optimizer, 1e-3, 0)
    return model, optimizer


def test_roundtrip(tmp_path, tiny_tokenizer_cfg, trained):
    model, optimizer = trained
    generator = torch.Generator().manual_seed(5)
    path = save_checkpoint(
        tmp_path / "ckpt" / "tok.otk", TOKENIZER_MAGIC, model, {"name": "tiny"}, optimizer,
        meta={"step": 7}, generator=generator,
    )
    assert not path.with_suffix(".otk.tmp").exists()
    ckpt = load_checkpoint(path, TOKENIZER_MAGIC)
    assert ckpt.step == 7
    assert ckpt.config == {"name": "tiny"}

    fresh = OccupancyTokenizer(tiny_tokenizer_cfg)
    fresh_optimizer = make_optimizer(fresh.parameters(), 1e-3, 0.01)
    restored_gen = torch.Generator().manual_seed(99)
    restore(ckpt, fresh, fresh_optimizer, restored_gen)
    for (name, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), name
    assert fresh.codebook.usage_counts.dtype == torch.long
    before = optimizer.state_dict()
    after = fresh_optimizer.state_dict()
    # param groups travel through the JSON header
    assert after["param_groups"] == json.loads(json.dumps(before["param_groups"]))
    for idx, state in before["state"].items():
        for key, value in state.items():
            assert torch.equal(torch.as_tensor(after["state"][idx][key]), torch.as_tensor(value))
    assert torch.equal(torch.rand(3, generator=restored_gen), torch.rand(3, generator=generator))


def test_restores_global_rng(tmp_path, trained):
    model, _ = trained
    path = save_checkpoint(tmp_path / "a.otk", TOKENIZER_MAGIC, model, {})
    expected = torch.rand(4)
    torch.rand(10)
    restore(load_checkpoint(path, TOKENIZER_MAGIC), model, restore_rng=True)
    assert torch.equal(torch.rand(4), expected)


def test_load_errors(tmp_path, trained):
    model, _ = trained
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "missing.otk", TOKENIZER_MAGIC)
    path = save_checkpoint(tmp_path / "a.otk", TOKENIZER_MAGIC, model, {})
    with pytest.raises(DataError, match="expected magic"):
        load_checkpoint(path, DENOISER_MAGIC)

    truncated = tmp_path / "short.otk"
    truncated.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DataError, match="truncated tensor"):
        load_checkpoint(truncated, TOKENIZER_MAGIC)

    corrupt = tmp_path / "corrupt.otk"
    corrupt.write_bytes(struct.pack("<4sI", TOKENIZER_MAGIC, 5) + b"{oops")
    with pytest.raises(DataError, match="corrupt header"):
        load_checkpoint(corrupt, TOKENIZER_MAGIC)


def test_restore_rejects_other_architecture(tmp_path, tiny_tokenizer_cfg, trained):
    model, _ = trained
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "a.otk", TOKENIZER_MAGIC, model, {}), TOKENIZER_MAGIC)
    wider = OccupancyTokenizer(replace(tiny_tokenizer_cfg, codebook_size=16))
    with pytest.raises(DataError, match="Shape mismatch"):
        restore(ckpt, wider)


def _assert_same_curve(a, b):
    assert len(a) == len(b)
    for row_a, row_b in zip(a, b):
        assert row_a.keys() == row_b.keys()
        for key in row_a:
            if key == "stage":
                assert row_a[key] == row_b[key]
            else:
                assert float(row_a[key]) == pytest.approx(float(row_b[key]), abs=1e-6)


def test_resumed_training_matches_uninterrupted(tmp_path):
    full_dir = tmp_path / "full"
    split_dir = tmp_path / "split"
    full_dir.mkdir()
    split_dir.mkdir()

    full = load_config(write_run_config(full_dir, optim={"tokenizer_steps": 4, "diffusion_steps": 4}))
    run_make_data(full)
    run_train_tokenizer(full)
    run_train_diffusion(full)

    first = load_config(write_run_config(split_dir, optim={"tokenizer_steps": 2, "diffusion_steps": 2}))
    run_make_data(first)
    run_train_tokenizer(first)
    second = load_config(write_run_config(split_dir, optim={"tokenizer_steps": 4, "diffusion_steps": 2}))
    run_train_tokenizer(second, resume=True)
    run_train_diffusion(second)
    third = load_config(write_run_config(split_dir, optim={"tokenizer_steps": 4, "diffusion_steps": 4}))
    run_train_diffusion(third, resume=True)

    for name in ("tokenizer_loss.csv", "diffusion_loss.csv"):
        _assert_same_curve(
            read_loss_csv(full.paths.output_root / name), read_loss_csv(third.paths.output_root / name)
        )
    a = load_checkpoint(full.paths.denoiser_checkpoint, DENOISER_MAGIC)
    b = load_checkpoint(third.paths.denoiser_checkpoint, DENOISER_MAGIC)
    for name, tensor in a.model_state().items():
        torch.testing.assert_close(b.tensors[name], tensor, atol=1e-6, rtol=0)

"""Overfit sign-of-life run: a small denoiser memorises eight synthetic pairs.

Takes minutes on CPU; run with `pytest -m slow`.
"""
import numpy as np
import pytest
import torch

from dataset_pipeline import build_dataset, read_manifest, write_manifest
from diffusion_core import EditPairDataset, psnr, read_loss_log, restore_models, sample_edit, train
from run_config import RunConfig
from tools.make_synthetic_videos import make_fixture

pytestmark = pytest.mark.slow


def test_overfit_eight_pairs(tmp_path):
    frames_dir, poses_dir = make_fixture(tmp_path / 'data', include_frozen=False)
    manifest_path = str(tmp_path / 'out' / 'manifest.jsonl')
    records = build_dataset(frames_dir, poses_dir, manifest_path)
    captions = ["He steps to the right.", "She raises the left arm.", "They lean forward.", "He turns around."]
    records = [r.with_caption(captions[i % len(captions)]) for i, r in enumerate(records[:8])]
    write_manifest(manifest_path, records)

    config = RunConfig(variant='c4', image_size=32, epochs=200, batch_size=8, checkpoint_every=200,
                       learning_rate=2e-3, seed=0).validate()
    checkpoint_dir = tmp_path / 'ckpt'
    checkpoint = train(config, manifest_path, checkpoint_dir=str(checkpoint_dir))

    losses = read_loss_log(str(checkpoint_dir / 'loss_log.csv'))
    assert len(losses) == 200
    assert losses[-1][2] < 0.05

    _, encoder, denoiser, schedule = restore_models(checkpoint)
    records = read_manifest(manifest_path)
    item = EditPairDataset(records, manifest_path, encoder, config.image_size).load(0)
    with torch.no_grad():
        bundle = encoder.bundle_for(item['reference_crop'], item['caption'], item['target_pose'])
    edited = sample_edit(denoiser, item['masked_target'], item['mask'], bundle, schedule,
                         w=1.0, generator=torch.Generator().manual_seed(0))
    assert np.array_equal(edited[item['mask'] == 0], item['target'][item['mask'] == 0])
    assert psnr(edited, item['target'], item['mask']) >= 25.0

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
import torch

from voxdiff.grids import SceneSpec, generate_scene
from voxdiff.io import read_json
from voxdiff.training import (BaselineConfig, Dataset, TrainConfig, assert_disjoint_seeds,
                              load_baseline_checkpoint, load_diffusion_checkpoint, make_dataset,
                              sample_from_checkpoint, stream_seed, train_baseline,
                              train_diffusion)

SMALL_SPEC = SceneSpec(dims=(16, 16, 6), sensor=(8, 8, 4), max_range=12.0,
                       boxes=(1, 2), columns=(1, 2), slabs=(0, 1), scattered=(1, 3))

TINY_BASELINE = BaselineConfig(embed_dim=8, width=8, feature_dim=8, total_steps=40, seed=0)

TINY_DIFFUSION = dict(timesteps=8, embed_dim=8, widths=(8, 12, 16), time_dim=8,
                      time_hidden=16, total_steps=30, seed=0)


def small_dataset(out_dir, count=3, seed_start=100, flip_rate=0.1, workers=1) -> Path:
    return make_dataset(SMALL_SPEC, count, seed_start, flip_rate, 0.05, out_dir,
                        rays_per_axis=64, workers=workers)


@pytest.fixture(scope="module")
def shared(tmp_path_factory) -> dict:
    """One tiny dataset and baseline checkpoint reused across training tests."""
    root = tmp_path_factory.mktemp("train_shared")
    data_dir = small_dataset(root / "data")
    dataset = Dataset.from_dir(data_dir)
    baseline_path = train_baseline(TINY_BASELINE, dataset, root / "baseline.ckpt")
    return {"root": root, "data_dir": data_dir, "dataset": dataset,
            "baseline_path": baseline_path}


def test_make_dataset_layout_and_manifest(tmp_path):
    out = small_dataset(tmp_path / "ds", count=2)
    manifest = read_json(out / "manifest.json")
    assert manifest["count"] == 2
    assert manifest["seeds"] == [100, 101]
    assert manifest["flip_rate"] == pytest.approx(0.1)
    for i in range(2):
        for suffix in (".gt.voxg", ".labels.voxg", ".mask.voxm", ".obs.voxg"):
            assert (out / f"scene_{i:04d}{suffix}").exists()
    ds = Dataset.from_dir(out)
    assert len(ds) == 2
    assert ds.num_classes == 6
    assert ds.gt(0).dims == (16, 16, 6)
    assert ds.obs(0).num_classes == 7
    assert np.array_equal(ds.gt(0).labels, generate_scene(SMALL_SPEC, 100).labels)
    visible = ds.mask(1).flags.astype(bool)
    assert np.array_equal(ds.obs(1).labels[visible], ds.gt(1).labels[visible])
    assert np.all(ds.obs(1).labels[~visible] == 6)


def test_make_dataset_bytes_are_worker_independent(tmp_path):
    a = small_dataset(tmp_path / "a", count=4, workers=1)
    b = small_dataset(tmp_path / "b", count=4, workers=2)
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_disjoint_seed_guard(tmp_path):
    a = small_dataset(tmp_path / "a", count=3, seed_start=0)
    b = small_dataset(tmp_path / "b", count=3, seed_start=3)
    c = small_dataset(tmp_path / "c", count=3, seed_start=2)
    ma, mb, mc = (read_json(p / "manifest.json") for p in (a, b, c))
    assert_disjoint_seeds(ma, mb)
    with pytest.raises(ValueError, match="share scene seeds"):
        assert_disjoint_seeds(ma, mc)


def test_dataset_from_arrays_in_memory():
    rng = np.random.default_rng(0)
    K, dims = 4, (6, 6, 3)
    labels = [rng.integers(0, K, size=dims).astype(np.uint8) for _ in range(2)]
    masks = [rng.integers(0, 2, size=dims).astype(np.uint8) for _ in range(2)]
    obs = [np.where(m == 1, l, K).astype(np.uint8) for l, m in zip(labels, masks)]
    ds = Dataset.from_arrays(labels, masks, obs, num_classes=K, voxel_size=0.5)
    assert len(ds) == 2 and ds.num_classes == K and ds.voxel_size == 0.5
    assert np.array_equal(ds.labels(0).labels, labels[0])
    assert ds.obs(1).num_classes == K + 1
    with pytest.raises(KeyError):
        ds.gt(0)  # not provided
    with pytest.raises(ValueError):
        Dataset.from_arrays(labels, masks[:1], obs, num_classes=K)


def test_config_round_trips_and_defaults():
    cfg = TrainConfig(path="discrete")
    assert cfg.schedule == "cosine"
    assert TrainConfig(path="gaussian").schedule == "linear"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    explicit = TrainConfig(path="gaussian", schedule="cosine", widths=[8, 12, 16])
    assert explicit.schedule == "cosine" and explicit.widths == (8, 12, 16)
    with pytest.raises(ValueError):
        TrainConfig(path="bogus")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"path": "discrete", "mystery": 1})
    bcfg = BaselineConfig(width=16)
    assert BaselineConfig.from_dict(bcfg.to_dict()) == bcfg
    with pytest.raises(ValueError):
        BaselineConfig.from_dict({"mystery": 1})
    sched = TrainConfig(path="discrete", timesteps=12).make_schedule()
    assert sched.num_steps == 12 and sched.kind == "cosine"


def test_baseline_initial_loss_is_uniform_prediction(shared, tmp_path):
    config = BaselineConfig(embed_dim=8, width=8, feature_dim=8, total_steps=1)
    curve = tmp_path / "curve.csv"
    train_baseline(config, shared["dataset"], tmp_path / "b.ckpt", curve_path=curve)
    lines = curve.read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr"
    step, loss, lr = lines[1].split(",")
    assert step == "0"
    # The classifier head starts at zero, so the first loss is exactly ln K.
    assert float(loss) == pytest.approx(math.log(6), rel=1e-5)
    assert float(lr) == pytest.approx(config.learning_rate)


def test_baseline_overfits_one_clean_scene(tmp_path):
    data_dir = make_dataset(SMALL_SPEC, 1, 500, 0.0, 0.0, tmp_path / "ds", rays_per_axis=64)
    dataset = Dataset.from_dir(data_dir)
    config = BaselineConfig(embed_dim=16, width=16, feature_dim=16, total_steps=1200, seed=1)
    path = train_baseline(config, dataset, tmp_path / "overfit.ckpt")
    model, _ = load_baseline_checkpoint(path)
    obs = torch.from_numpy(dataset.obs(0).labels.astype(np.int64))[None]
    pred = model(obs)["pred"][0].numpy()
    visible = dataset.mask(0).flags.astype(bool)
    acc = (pred[visible] == dataset.labels(0).labels[visible]).mean()
    assert acc >= 0.99, f"visible-voxel accuracy {acc:.4f}"


def test_baseline_checkpoint_kind_guard(shared):
    with pytest.raises(ValueError, match="not a diffusion checkpoint"):
        load_diffusion_checkpoint(shared["baseline_path"])


def test_baseline_training_is_deterministic(shared, tmp_path):
    config = BaselineConfig(embed_dim=8, width=8, feature_dim=8, total_steps=5)
    p1 = train_baseline(config, shared["dataset"], tmp_path / "b1.ckpt")
    p2 = train_baseline(config, shared["dataset"], tmp_path / "b2.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_diffusion_training_discrete_deterministic(shared, tmp_path):
    config = TrainConfig(path="discrete", condition="features", **TINY_DIFFUSION)
    p1 = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                         tmp_path / "d1.ckpt", curve_path=tmp_path / "c1.csv")
    p2 = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                         tmp_path / "d2.ckpt", curve_path=tmp_path / "c2.csv")
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "c1.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()
    rows = (tmp_path / "c1.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss,lr" and len(rows) == 1 + config.total_steps
    denoiser, baseline, cfg, schedule, meta = load_diffusion_checkpoint(p1)
    assert cfg == config
    assert meta["step"] == config.total_steps
    assert meta["num_classes"] == 6
    assert schedule.num_steps == config.timesteps
    base_model, _ = load_baseline_checkpoint(shared["baseline_path"])
    for (name, p), (_, q) in zip(baseline.named_parameters(), base_model.named_parameters()):
        assert torch.equal(p, q), f"frozen baseline drifted at {name}"


def test_diffusion_training_gaussian_smoke(shared, tmp_path):
    config = TrainConfig(path="gaussian", condition="logits", **TINY_DIFFUSION)
    assert config.schedule == "linear"
    path = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                           tmp_path / "g.ckpt", curve_path=tmp_path / "g.csv")
    denoiser, _, cfg, schedule, _ = load_diffusion_checkpoint(path)
    assert denoiser.mode == "gaussian"
    losses = [float(r.split(",")[1]) for r in
              (tmp_path / "g.csv").read_text().strip().splitlines()[1:]]
    assert all(np.isfinite(losses))
    samples = sample_from_checkpoint(path, shared["dataset"].obs(0), num_steps=3,
                                     guidance_scale=1.0, seed=5, num_samples=2)
    assert len(samples) == 2
    assert samples[0].dims == (16, 16, 6)
    cg = sample_from_checkpoint(path, shared["dataset"].obs(0), num_steps=3,
                                guidance_scale=0.0, seed=5, cg_scale=0.5)
    assert cg[0].dims == (16, 16, 6)


def test_diffusion_resume_matches_straight_run(shared, tmp_path):
    config = TrainConfig(path="discrete", condition="labels", checkpoint_every=15,
                         **TINY_DIFFUSION)
    straight = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                               tmp_path / "straight.ckpt")
    mid = tmp_path / "straight.step15.ckpt"
    assert mid.exists()
    resumed = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                              tmp_path / "resumed.ckpt", resume_from=mid)
    assert straight.read_bytes() == resumed.read_bytes()


def test_diffusion_stop_after_chain_matches_straight_run(shared, tmp_path):
    config = TrainConfig(path="discrete", condition="labels", **TINY_DIFFUSION)
    straight = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                               tmp_path / "straight.ckpt")
    part = tmp_path / "part.ckpt"
    prev = None
    for end in (12, 24, config.total_steps):
        train_diffusion(config, shared["dataset"], shared["baseline_path"], part,
                        resume_from=prev, stop_after=end)
        assert load_diffusion_checkpoint(part)[4]["step"] == end
        prev = part
    assert straight.read_bytes() == part.read_bytes()
    with pytest.raises(ValueError, match="not past step"):
        train_diffusion(config, shared["dataset"], shared["baseline_path"],
                        tmp_path / "x.ckpt", resume_from=part, stop_after=24)


def test_diffusion_resume_validation(shared, tmp_path):
    config = TrainConfig(path="discrete", condition="labels", **TINY_DIFFUSION)
    final = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                            tmp_path / "a.ckpt")
    with pytest.raises(ValueError, match="not a diffusion checkpoint"):
        train_diffusion(config, shared["dataset"], shared["baseline_path"],
                        tmp_path / "b.ckpt", resume_from=shared["baseline_path"])
    other = TrainConfig(path="discrete", condition="labels",
                        **{**TINY_DIFFUSION, "seed": 9})
    with pytest.raises(ValueError, match="config differs"):
        train_diffusion(other, shared["dataset"], shared["baseline_path"],
                        tmp_path / "c.ckpt", resume_from=final)
    with pytest.raises(ValueError, match="not a baseline checkpoint"):
        load_baseline_checkpoint(final)


def test_sample_from_checkpoint_determinism(shared, tmp_path):
    config = TrainConfig(path="discrete", condition="features", **TINY_DIFFUSION)
    path = train_diffusion(config, shared["dataset"], shared["baseline_path"],
                           tmp_path / "d.ckpt")
    obs = shared["dataset"].obs(1)
    first = sample_from_checkpoint(path, obs, num_steps=4, guidance_scale=2.0,
                                   seed=3, num_samples=2)
    second = sample_from_checkpoint(path, obs, num_steps=4, guidance_scale=2.0,
                                    seed=3, num_samples=2)
    for a, b in zip(first, second):
        assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(first[0].labels, first[1].labels)
    other_seed = sample_from_checkpoint(path, obs, num_steps=4, guidance_scale=2.0, seed=4)
    assert not np.array_equal(first[0].labels, other_seed[0].labels)
    with pytest.raises(ValueError, match="discrete"):
        sample_from_checkpoint(path, obs, num_steps=2, cg_scale=1.0)


def test_train_config_dataset_mismatch(shared, tmp_path):
    bad = BaselineConfig(num_classes=5)
    with pytest.raises(ValueError, match="num_classes"):
        train_baseline(bad, shared["dataset"], tmp_path / "bad.ckpt")


def test_stream_seed_is_stable_and_distinct():
    seeds = [stream_seed(7, i) for i in range(20)]
    assert len(set(seeds)) == 20
    assert seeds == [stream_seed(7, i) for i in range(20)]
    assert stream_seed(8, 0) != stream_seed(7, 0)

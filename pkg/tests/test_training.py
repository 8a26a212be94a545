import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest
import torch

from stvsr import training
from stvsr.config import ModelConfig, PipelineConfig, TrainConfig
from stvsr.datagen import SceneSpec, Shape, generate_clip
from stvsr.degrade import DegradationConfig
from stvsr.pipeline import arm_config, baseline, restore
from stvsr.training import (CheckpointError, DiffSTToy, SyntheticCorpus, TrainingAborted, build_model,
                            keyframe_flows, load_checkpoint, make_batch, prepare_sample, save_checkpoint, train)
from stvsr.video import ScaleFactors

SMALL = ModelConfig(latent=4, vae_width=8, width=16, dim=16, blocks=2, fusion_hidden=4, n_keyframes=3)


def small_cfg(**train):
    t = TrainConfig(**{"iters": 2, "batch": 1, "crop_t": 5, "crop_h": 16, "crop_w": 16, "vae_steps": 0, **train})
    sc = ScaleFactors(2, 2)
    return PipelineConfig(sc, DegradationConfig(scales=sc), t, model=SMALL)


def test_keyframe_flows_constant_motion():
    clip = generate_clip(SceneSpec(T=5, H=16, W=16, C=1, background=0.3,
                                   shapes=[Shape("rectangle", 2, 2, 8, 8, (1, 1), (0.5,))]))
    kf, kb = keyframe_flows(clip.true_flow_fwd, clip.true_flow_bwd, ScaleFactors(2, 2))
    assert kf.shape == kb.shape == (2, 8, 8, 2)
    # shape covers LQ pixels 1..4 at t=0; composed motion 2 px in HQ is 1 px in LQ
    np.testing.assert_array_equal(kf[0, 1:5, 1:5], np.ones((4, 4, 2)))
    np.testing.assert_array_equal(kb[0, 2:6, 2:6], -np.ones((4, 4, 2)))


def test_make_batch_shapes():
    cfg = small_cfg(batch=2)
    batch = make_batch(SyntheticCorpus(0, 5, 16, 16), cfg, 0)
    assert batch["lq"].shape == (2, 3, 8, 8, 3)
    assert batch["hq"].shape == (2, 5, 16, 16, 3)
    assert batch["key_fwd"].shape == (2, 2, 8, 8, 2)
    assert batch["hq_fwd"].shape == (2, 4, 16, 16, 2)
    again = make_batch(SyntheticCorpus(0, 5, 16, 16), cfg, 0)
    assert all(torch.equal(batch[k], again[k]) for k in batch)


def test_forward_shapes_and_initial_identity():
    cfg = small_cfg()
    model = build_model(cfg)
    batch = make_batch(SyntheticCorpus(0, 5, 16, 16), cfg, 0)
    out = model(batch["lq"], batch["key_fwd"], batch["key_bwd"])
    assert out["i_st"].shape == batch["hq"].shape
    assert out["c"].shape == (1, SMALL.n_queries + SMALL.n_text, SMALL.dim)
    # zero-initialized velocity head: one step leaves the latent unchanged
    assert torch.equal(out["z_st"], out["z"])


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg()
    model = build_model(cfg)
    save_checkpoint(tmp_path / "a.ckpt", model, {"steps_done": 0})
    save_checkpoint(tmp_path / "b.ckpt", model, {"steps_done": 0})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back, manifest = load_checkpoint(tmp_path / "a.ckpt", expect=SMALL, scales=cfg.scales)
    assert manifest["schema_version"] == 1
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def test_checkpoint_errors(tmp_path):
    cfg = small_cfg()
    save_checkpoint(tmp_path / "a.ckpt", build_model(cfg), {})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt", expect=replace(SMALL, width=32))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt", scales=ScaleFactors(4, 4))
    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        manifest = json.loads(zf.read("manifest.json"))
    manifest["schema_version"] = 99
    with zipfile.ZipFile(tmp_path / "v99.ckpt", "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
    with pytest.raises(CheckpointError, match="schema version 99"):
        load_checkpoint(tmp_path / "v99.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_training_moves_only_trainable_parts(tmp_path):
    cfg = small_cfg(iters=3, lr=1e-3)
    model = build_model(cfg)
    vae_before = {k: v.clone() for k, v in model.vae.state_dict().items()}
    vel_before = model.velocity.out.weight.clone()
    model, records = train(cfg, SyntheticCorpus(0, 5, 16, 16), model, out=tmp_path / "m.ckpt",
                           log_path=tmp_path / "log.jsonl")
    assert len(records) == 3 and all(np.isfinite(r["total"]) for r in records)
    assert all(torch.equal(vae_before[k], v) for k, v in model.vae.state_dict().items())
    assert not torch.equal(vel_before, model.velocity.out.weight)
    _, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["steps_done"] == 3


def test_nan_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    import stvsr.training as training
    cfg = small_cfg(iters=3)
    calls = {"n": 0}
    real = training.latent_loss

    def flaky(a, b):
        calls["n"] += 1
        return real(a, b) if calls["n"] < 2 else torch.tensor(float("nan"))

    monkeypatch.setattr(training, "latent_loss", flaky)
    with pytest.raises(TrainingAborted) as e:
        train(cfg, SyntheticCorpus(0, 5, 16, 16), out=tmp_path / "m.ckpt")
    assert e.value.step == 1 and e.value.cause.term == "latent"
    _, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["steps_done"] == 1


def test_restore_shape_law_and_divisibility():
    cfg = replace(small_cfg(), scales=ScaleFactors(4, 4))
    model = DiffSTToy(SMALL, cfg.scales)
    lq = np.random.default_rng(0).random((3, 4, 4, 3)).astype(np.float32)
    z = np.zeros((2, 4, 4, 2), np.float32)
    assert restore(model, lq, z, z).shape == (9, 16, 16, 3)
    model2 = DiffSTToy(SMALL, ScaleFactors(1, 4))
    with pytest.raises(ValueError):
        restore(model2, lq[:, :3, :3], z[:, :3, :3], z[:, :3, :3])


class _IdentityVAE(torch.nn.Module):
    stride = 4

    def __init__(self, *args):
        super().__init__()

    def encode(self, x):
        return x

    def decode(self, z, clamp=True):
        return z.clamp(0, 1) if clamp else z


def test_restore_identity_scaling_passthrough(monkeypatch):
    # phi_s = phi_t = 1 and an identity backbone (VAE replaced by identity maps) returns the input
    monkeypatch.setattr(training, "TinyVAE", _IdentityVAE)
    model = DiffSTToy(replace(SMALL, latent=3), ScaleFactors(1, 1))
    lq = np.random.default_rng(1).random((3, 8, 8, 3)).astype(np.float32)
    z = np.zeros((2, 8, 8, 2), np.float32)
    np.testing.assert_array_equal(restore(model, lq, z, z), lq)


def test_baseline_shape():
    out = baseline(np.random.default_rng(2).random((5, 4, 4, 3)).astype(np.float32), ScaleFactors(4, 4))
    assert out.shape == (17, 16, 16, 3)


def test_arm_config():
    cfg = small_cfg()
    assert arm_config(cfg, "no_vrg").model == arm_config(cfg, "flow_multi").model
    assert arm_config(cfg, "full").model.use_vrg and not arm_config(cfg, "no_vrg").model.use_vrg
    assert arm_config(cfg, "interp").model.aggregation == "interp"
    with pytest.raises(ValueError):
        arm_config(cfg, "nope")


def test_keyframe_flows_majority_vote():
    fwd = np.zeros((1, 4, 4, 2), np.float32)
    fwd[0, 0, 1] = (2, 0)       # block (0, 0): three zeros, one (2, 0) -> zero
    fwd[0, 0, 2:4] = (4, 2)     # block (0, 1): 2-2 tie, (4, 2) comes first in raster order
    fwd[0, 2:4, 2:4] = (-2, 2)  # block (1, 1): uniform
    kf, _ = keyframe_flows(fwd, -fwd, ScaleFactors(2, 1))
    np.testing.assert_array_equal(kf[0, 0, 0], (0, 0))
    np.testing.assert_array_equal(kf[0, 0, 1], (2, 1))
    np.testing.assert_array_equal(kf[0, 1, 1], (-1, 1))
    np.testing.assert_array_equal(kf[0, 1, 0], (0, 0))


def test_warmup_cosine_factor():
    f = training._warmup_cosine(4, 20)
    assert [f(i) for i in range(3)] == [0.25, 0.5, 0.75]
    assert f(3) == pytest.approx(0.5 * (1 + np.cos(np.pi * 3 / 20)))
    assert f(10) == pytest.approx(0.5)
    assert f(20) == pytest.approx(0.0, abs=1e-12)
    assert all(f(i) >= f(i + 1) for i in range(3, 20))


def test_train_config_rejects_unknown_schedule():
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")

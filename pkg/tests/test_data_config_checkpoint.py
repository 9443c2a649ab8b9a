import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from flowtok import checkpoint as ckpt
from flowtok.config import CONFIG_SCHEMA, RunConfig, load_config, save_config
from flowtok.data import (
    folder_dataset,
    iterate_batches,
    synthetic_dataset,
    to_display,
    to_model_space,
    write_image_grid,
)
from flowtok.nets import DecoderConfig, EncoderConfig, Tokenizer


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestSyntheticDataset:
    def test_shapes_and_range(self):
        ds = synthetic_dataset(16, side=32, n_classes=4, seed=0)
        assert ds.images.shape == (16, 3, 32, 32)
        assert ds.labels.shape == (16,)
        assert (ds.images >= 0).all() and (ds.images <= 1).all()

    def test_deterministic(self):
        a = synthetic_dataset(8, side=32, seed=3)
        b = synthetic_dataset(8, side=32, seed=3)
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_seed_changes_images(self):
        a = synthetic_dataset(8, side=32, seed=3)
        b = synthetic_dataset(8, side=32, seed=4)
        assert not torch.allclose(a.images, b.images)

    def test_labels_cover_classes(self):
        ds = synthetic_dataset(16, side=32, n_classes=4, seed=0)
        assert set(ds.labels.tolist()) == {0, 1, 2, 3}

    def test_classes_visibly_differ(self):
        # same index modulo class rotation yields different renderings
        ds = synthetic_dataset(8, side=32, n_classes=4, seed=1)
        assert not torch.allclose(ds.images[0], ds.images[1])

    def test_model_space_roundtrip(self):
        imgs = torch.rand(4, 3, 8, 8, generator=gen(1))
        back = to_display(to_model_space(imgs))
        assert torch.allclose(back, imgs, atol=1e-6)


class TestFolderDataset:
    def test_roundtrip(self, tmp_path):
        for i in range(3):
            arr = (np.random.RandomState(i).rand(32, 32, 3) * 255).astype(np.uint8)
            Image.fromarray(arr).save(tmp_path / f"im{i}.png")
        (tmp_path / "labels.csv").write_text("im0.png,0\nim1.png,1\nim2.png,0\n")
        ds = folder_dataset(tmp_path)
        assert len(ds) == 3
        assert ds.n_classes == 2
        assert ds.ids == ["im0", "im1", "im2"]
        assert ds.images.shape == (3, 3, 32, 32)

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "labels.csv").write_text("")
        with pytest.raises(ValueError):
            folder_dataset(tmp_path)


class TestBatches:
    def test_covers_dataset(self):
        ds = synthetic_dataset(10, side=32, seed=0)
        seen = []
        for images, labels, ids in iterate_batches(ds, 4, gen(2)):
            assert images.shape[0] == labels.shape[0] == len(ids)
            seen += ids
        assert sorted(seen) == sorted(ds.ids)

    def test_shuffle_is_seeded(self):
        ds = synthetic_dataset(10, side=32, seed=0)
        a = [ids for _, _, ids in iterate_batches(ds, 4, gen(3))]
        b = [ids for _, _, ids in iterate_batches(ds, 4, gen(3))]
        assert a == b


class TestGrid:
    def test_writes_png(self, tmp_path):
        imgs = torch.rand(5, 3, 16, 16, generator=gen(4))
        path = tmp_path / "grid.png"
        write_image_grid(path, imgs, columns=3)
        with Image.open(path) as im:
            assert im.size[0] > 16 and im.size[1] > 16


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_yaml_roundtrip_fixed_point(self, tmp_path):
        cfg = RunConfig()
        save_config(cfg, tmp_path / "c.yaml")
        loaded = load_config(tmp_path / "c.yaml")
        save_config(loaded, tmp_path / "c2.yaml")
        assert (tmp_path / "c.yaml").read_text() == (tmp_path / "c2.yaml").read_text()
        assert loaded.to_dict() == cfg.to_dict()

    def test_partial_yaml_gets_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 7\ntrain:\n  total_epochs: 8\n")
        cfg = load_config(tmp_path / "c.yaml")
        assert cfg.seed == 7
        assert cfg.train.total_epochs == 8
        assert cfg.train.mf_start_epoch == 1
        assert cfg.train.interval_start_epoch == 4
        assert cfg.adaptive.c == 1e-3

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.yaml").write_text("sede: 7\n")
        with pytest.raises(Exception):
            load_config(tmp_path / "c.yaml")

    def test_schema_rejects_wrong_type(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: notanint\n")
        with pytest.raises(Exception):
            load_config(tmp_path / "c.yaml")

    def test_cross_section_validation(self):
        cfg = RunConfig()
        cfg.vfm.d_vfm = 32  # != encoder d_e
        with pytest.raises(ValueError):
            cfg.validate()

    def test_schema_is_publishable(self):
        assert CONFIG_SCHEMA["type"] == "object"
        assert "train" in CONFIG_SCHEMA["properties"]


class TestCheckpoint:
    def test_tensor_roundtrip(self, tmp_path):
        tensors = {
            "a.weight": torch.randn(4, 3, generator=gen(5)),
            "b.bias": torch.randn(7, generator=gen(6)).double(),
            "c.count": torch.tensor([3], dtype=torch.int64),
        }
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, {"seed": 1}, tensors, {"kind": "test", "step": 5})
        cfg, loaded, meta = ckpt.load_checkpoint(path)
        assert cfg == {"seed": 1}
        assert meta == {"kind": "test", "step": 5}
        for name, t in tensors.items():
            assert torch.equal(loaded[name], t)
            assert loaded[name].dtype == t.dtype

    def test_module_forward_bitwise_after_roundtrip(self, tmp_path):
        torch.manual_seed(7)
        tok = Tokenizer(
            EncoderConfig(image_side=16, patch_size=8, d_e=32, depth=2, heads=2,
                          K=16, d_token=16),
            DecoderConfig(latent_side=16, patch_size=8, d_model=32, depth=2,
                          heads=2, token_dim=16, n_tokens=16, repa_layer=1),
        )
        probe = torch.randn(2, 3, 16, 16, generator=gen(8))
        before = tok.encode(probe).tokens

        path = tmp_path / "tok.ckpt"
        ckpt.save_checkpoint(path, {}, ckpt.module_tensors(tok, "model"), {"kind": "test"})
        _, tensors, _ = ckpt.load_checkpoint(path)

        torch.manual_seed(99)  # different init; the load must overwrite it
        tok2 = Tokenizer(tok.enc_cfg, tok.dec_cfg)
        tok2.load_state_dict(ckpt.split_by_prefix(tensors, "model"))
        after = tok2.encode(probe).tokens
        assert torch.equal(before, after)

    def test_rng_state_roundtrip(self, tmp_path):
        rng = gen(9)
        torch.rand(5, generator=rng)
        state = ckpt.rng_state_tensor(rng)
        expected = torch.rand(5, generator=rng)

        rng2 = gen(0)
        ckpt.restore_rng(rng2, state)
        assert torch.equal(torch.rand(5, generator=rng2), expected)

    def test_optimizer_moments_roundtrip(self, tmp_path):
        torch.manual_seed(10)
        net = torch.nn.Linear(3, 3)
        opt = torch.optim.AdamW(net.parameters(), lr=1e-3)
        net(torch.randn(4, 3, generator=gen(11))).sum().backward()
        opt.step()
        names = [n for n, _ in net.named_parameters()]
        tensors = ckpt.optimizer_tensors(opt, names)
        assert any(k.endswith("exp_avg") for k in tensors)

        net2 = torch.nn.Linear(3, 3)
        net2.load_state_dict(net.state_dict())
        opt2 = torch.optim.AdamW(net2.parameters(), lr=1e-3)
        ckpt.load_optimizer_tensors(opt2, names, tensors)
        # both optimizers take the same next step
        g = torch.randn(3, 3, generator=gen(12))
        for o, n in ((opt, net), (opt2, net2)):
            for p in n.parameters():
                p.grad = g.clone() if p.ndim == 2 else g[0].clone()
            o.step()
        for p1, p2 in zip(net.parameters(), net2.parameters()):
            assert torch.allclose(p1, p2, atol=1e-9)

    def test_version_gate(self, tmp_path):
        path = tmp_path / "x.ckpt"
        ckpt.save_checkpoint(path, {}, {}, {})
        import json
        import zipfile

        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
        manifest["format_version"] = 999
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
        with pytest.raises(ValueError):
            ckpt.load_checkpoint(path)

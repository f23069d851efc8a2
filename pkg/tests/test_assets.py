import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gavatar.assets import (Checkpoint, SyntheticSpec, load_checkpoint,
                            load_dataset, load_pfm, load_png, make_synthetic,
                            read_ply, save_checkpoint, save_pfm, save_png,
                            write_ply, _srgb_decode, _srgb_encode)
from gavatar.animate import FrameStamp, RefinementNet
from gavatar.cloud import ColoredPointCloud, init_from_vertices
from gavatar.errors import (CorruptSection, MissingFile, ParseError,
                            SchemaVersionMismatch, UnsupportedPlyVariant,
                            VersionMismatch)
from gavatar.training import TrainConfig

RNG = np.random.default_rng(71)


class TestImages:
    def test_png_round_trip_within_quantization(self, tmp_path):
        img = RNG.uniform(0, 1, (32, 32, 3))
        path = tmp_path / 'x.png'
        save_png(path, img)
        back = load_png(path)
        # 8-bit sRGB quantization bound in linear space
        assert np.abs(back - img).max() < 0.006

    def test_png_idempotent_after_first_quantization(self, tmp_path):
        img = RNG.uniform(0, 1, (16, 16, 3))
        p1, p2 = tmp_path / 'a.png', tmp_path / 'b.png'
        save_png(p1, img)
        once = load_png(p1)
        save_png(p2, once)
        assert np.array_equal(load_png(p2), once)

    def test_srgb_transfer_inverts(self):
        x = np.linspace(0, 1, 1000)
        assert np.abs(_srgb_decode(_srgb_encode(x)) - x).max() < 1e-12

    def test_pfm_bit_exact(self, tmp_path):
        img = RNG.uniform(0, 1, (20, 30, 3)).astype(np.float32)
        path = tmp_path / 'x.pfm'
        save_pfm(path, img)
        assert np.array_equal(load_pfm(path), img)

    def test_pfm_grayscale(self, tmp_path):
        img = RNG.uniform(0, 1, (8, 8)).astype(np.float32)
        path = tmp_path / 'g.pfm'
        save_pfm(path, img)
        assert np.array_equal(load_pfm(path), img)


class TestPly:
    def _grid_cloud(self, n=1000, seed=0):
        rng = np.random.default_rng(seed)
        # payload representable exactly: f32 positions, u8 colors
        pos = rng.normal(0, 1, (n, 3)).astype(np.float32).astype(np.float64)
        col = rng.integers(0, 256, (n, 3)).astype(np.float64) / 255.0
        return ColoredPointCloud(pos, col)

    def test_binary_round_trip_bit_identical(self, tmp_path):
        pc = self._grid_cloud()
        path = tmp_path / 'x.ply'
        write_ply(path, pc)
        back = read_ply(path)
        assert np.array_equal(back.positions, pc.positions)
        assert np.array_equal(np.round(back.colors * 255), np.round(pc.colors * 255))

    def test_ascii_round_trip(self, tmp_path):
        pc = self._grid_cloud(100, seed=2)
        path = tmp_path / 'x.ply'
        write_ply(path, pc, binary=False)
        back = read_ply(path)
        assert np.array_equal(back.positions, pc.positions)

    @given(st.integers(1, 64), st.integers(0, 2 ** 31))
    @settings(max_examples=15, deadline=None)
    def test_round_trip_random_payloads(self, n, seed):
        import tempfile
        pc = self._grid_cloud(n, seed=seed)
        with tempfile.TemporaryDirectory() as tmp:
            path = f'{tmp}/x.ply'
            write_ply(path, pc)
            back = read_ply(path)
        assert np.array_equal(back.positions, pc.positions)

    def test_big_endian_rejected(self, tmp_path):
        path = tmp_path / 'big.ply'
        path.write_bytes(b"ply\nformat binary_big_endian 1.0\n"
                         b"element vertex 0\n"
                         b"property float x\nproperty float y\nproperty float z\n"
                         b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
                         b"end_header\n")
        with pytest.raises(UnsupportedPlyVariant, match='big-endian'):
            read_ply(path)

    def test_unexpected_properties_rejected(self, tmp_path):
        path = tmp_path / 'odd.ply'
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\n"
                         b"property float x\nproperty float y\n"
                         b"end_header\n")
        with pytest.raises(UnsupportedPlyVariant):
            read_ply(path)

    def test_large_cloud_reads_quickly(self, tmp_path):
        import time
        pc = self._grid_cloud(50000, seed=1)
        path = tmp_path / 'big.ply'
        write_ply(path, pc)
        t0 = time.perf_counter()
        back = read_ply(path)
        assert time.perf_counter() - t0 < 1.0
        assert len(back) == 50000


class TestCheckpoint:
    def _checkpoint(self, body):
        cloud = init_from_vertices(body)
        net = RefinementNet(joint_count=body.joint_count, seed=9)
        return Checkpoint(cloud=cloud, net=net, config=TrainConfig(seed=9),
                          iteration=42,
                          rng_state=np.random.default_rng(3).bit_generator.state)

    def test_round_trip_bit_exact(self, body, tmp_path):
        ckpt = self._checkpoint(body)
        path = tmp_path / 'c.gavc'
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert np.array_equal(back.cloud.positions, ckpt.cloud.positions)
        assert np.array_equal(back.cloud.sh, ckpt.cloud.sh)
        assert np.array_equal(back.cloud.bind_weights, ckpt.cloud.bind_weights)
        for key in ckpt.net.params:
            assert np.array_equal(back.net.params[key], ckpt.net.params[key])
        assert back.iteration == 42
        assert back.config == ckpt.config
        assert back.rng_state == ckpt.rng_state

    def test_save_load_save_byte_identical(self, body, tmp_path):
        ckpt = self._checkpoint(body)
        p1, p2 = tmp_path / 'a.gavc', tmp_path / 'b.gavc'
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_reports_corruption(self, body, tmp_path):
        ckpt = self._checkpoint(body)
        path = tmp_path / 'c.gavc'
        save_checkpoint(ckpt, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CorruptSection):
            load_checkpoint(path)

    def test_flipped_payload_fails_crc(self, body, tmp_path):
        ckpt = self._checkpoint(body)
        path = tmp_path / 'c.gavc'
        save_checkpoint(ckpt, path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptSection):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, body, tmp_path):
        ckpt = self._checkpoint(body)
        path = tmp_path / 'c.gavc'
        save_checkpoint(ckpt, path)
        data = bytearray(path.read_bytes())
        data[5] = 99  # version byte
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_full_size_checkpoint_below_size_budget(self, tmp_path):
        from gavatar.fixtures import make_smpl_sized_body
        body = make_smpl_sized_body()
        cloud = init_from_vertices(body)
        net = RefinementNet(joint_count=body.joint_count, seed=0)
        path = tmp_path / 'big.gavc'
        save_checkpoint(Checkpoint(cloud, net, TrainConfig(), 0), path)
        assert path.stat().st_size <= 5 * 1024 * 1024


class TestManifest:
    def test_loads_tiny_dataset(self, tiny_dataset):
        dataset, _ = tiny_dataset
        assert dataset.frame_count == 8
        assert len(dataset.cameras) == 1
        sample = dataset.sample(0)
        assert sample.image.shape == (48, 48, 3)
        assert sample.mask.dtype == bool

    def test_loading_is_idempotent(self, tiny_dataset):
        dataset, _ = tiny_dataset
        a = dataset.sample(3)
        manifest = dataset.root / 'manifest.json'
        again = load_dataset(manifest).sample(3)
        assert np.array_equal(a.image, again.image)

    def test_broken_fixture_corpus(self, tiny_dataset, tmp_path):
        """Twelve deliberately broken manifests each raise a validation error."""
        dataset, _ = tiny_dataset
        source = dataset.root

        def copy_to(name):
            dst = tmp_path / name
            shutil.copytree(source, dst)
            return dst, json.loads((dst / 'manifest.json').read_text())

        def write(dst, doc):
            (dst / 'manifest.json').write_text(json.dumps(doc))
            return dst / 'manifest.json'

        failures = []

        def expect(exc, mutate, name):
            dst, doc = copy_to(name)
            mutate(doc)  # mutations happen in place
            path = write(dst, doc)
            with pytest.raises(exc):
                load_dataset(path)
            failures.append(name)

        expect(SchemaVersionMismatch,
               lambda d: d.update(version=99), 'bad_version')
        expect(MissingFile,
               lambda d: d['frames'][0].update(image='images/absent.png'),
               'missing_image')
        expect(MissingFile,
               lambda d: d['frames'][1].update(mask='masks/absent.png'),
               'missing_mask')
        expect(MissingFile,
               lambda d: d.update(body='nowhere.json'), 'missing_body')
        expect(ParseError,
               lambda d: d['frames'][1].update(index=d['frames'][0]['index']),
               'duplicate_indices')
        expect(ParseError,
               lambda d: d['frames'][0].update(camera='ghost'), 'unknown_camera')
        expect(ParseError, lambda d: d.update(cameras={}), 'no_cameras')
        expect(ParseError, lambda d: d.pop('frames'), 'missing_frames_key')
        expect(ParseError, lambda d: d['frames'][0].pop('pose'), 'missing_pose')

        dst, _ = copy_to('invalid_json')
        (dst / 'manifest.json').write_text('{not json')
        with pytest.raises(ParseError):
            load_dataset(dst / 'manifest.json')
        failures.append('invalid_json')

        with pytest.raises(MissingFile):
            load_dataset(tmp_path / 'never_written' / 'manifest.json')
        failures.append('absent_manifest')

        dst, doc = copy_to('bad_camera')
        doc['cameras']['cam0']['fx'] = -5.0
        path = write(dst, doc)
        with pytest.raises(Exception):
            load_dataset(path).sample(0)
        failures.append('bad_camera')

        assert len(failures) == 12


class TestSynthetic:
    def test_rerender_reproduces_frames_bit_exactly(self, tiny_dataset, tmp_path):
        from gavatar.render import render
        dataset, ckpt_path = tiny_dataset
        body = dataset.load_body()
        gt = load_checkpoint(ckpt_path)
        frame = dataset.frames[2]
        from gavatar.assets import _pose_from_json
        pose = _pose_from_json(frame['pose'])
        result = render(gt.cloud, body, pose, gt.net,
                        FrameStamp(2, dataset.frame_count),
                        dataset.cameras[frame['camera']],
                        background=dataset.background)
        out = tmp_path / 'redo.png'
        save_png(out, result.image)
        original = (dataset.root / frame['image']).read_bytes()
        assert out.read_bytes() == original

    def test_pose_script_changes_silhouettes(self, tmp_path):
        spec = SyntheticSpec(frames=4, width=40, height=40, gaussians=100,
                             swing_joint=1, swing_amplitude_deg=90.0,
                             yaw_end_deg=0.0, seed=8)
        manifest, _ = make_synthetic(spec, tmp_path)
        ds = load_dataset(manifest)
        masks = [ds.sample(i).mask for i in range(4)]
        assert any(not np.array_equal(masks[0], m) for m in masks[1:])

    def test_turntable_supports_frame_selection(self, turntable_dataset):
        from gavatar.body import forward_kinematics
        from gavatar.cloud import select_frames
        dataset, _ = turntable_dataset
        body = dataset.load_body()
        rotations, joints = [], []
        for idx in dataset.frame_indices:
            pose = dataset.sample(idx).pose
            rotations.append(pose.root_rotation)
            g = forward_kinematics(body, pose, include_root=False)
            joints.append(np.einsum('nij,nj->ni', g.matrices[:, :3, :3], body.joints)
                          + g.matrices[:, :3, 3])
        sel = select_frames(np.stack(rotations), np.stack(joints), body.joints)
        off = ~np.eye(4, dtype=bool)
        assert (sel.pairwise_deg[off] > 80.0).all()
        spacing = np.diff(sel.indices)
        assert all(80 <= 3.6 * s <= 100 for s in spacing[:1])  # chained pairs

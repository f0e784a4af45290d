import numpy as np
import pytest

import semsplat.io as sio
from semsplat import (HashFeatureField, HashGridConfig, PerGaussianField,
                      look_at_camera)
from semsplat.errors import FormatError

from conftest import make_random_scene


class TestFeatureContainer:
    @pytest.mark.parametrize("dtype,np_dtype", [("f32", "<f4"), ("f16", "<f2")])
    def test_round_trip_bit_exact(self, tmp_path, dtype, np_dtype):
        rng = np.random.default_rng(0)
        fmap = rng.standard_normal((7, 5, 6)).astype(np_dtype)
        path = tmp_path / "map.fmfc"
        sio.write_feature_container(path, fmap, dtype)
        back = sio.read_feature_container(path)
        assert back.dtype == dtype
        assert back.feature_map.tobytes() == fmap.tobytes()

    def test_pyramid_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        fmap = rng.standard_normal((8, 8, 4)).astype("<f4")
        pyramid = [(0.05, rng.standard_normal((8, 8, 4)).astype("<f4")),
                   (0.2, rng.standard_normal((4, 4, 4)).astype("<f4")),
                   (0.5, rng.standard_normal((2, 2, 4)).astype("<f4"))]
        path = tmp_path / "pyr.fmfc"
        sio.write_feature_container(path, fmap, "f32", pyramid=pyramid)
        back = sio.read_feature_container(path)
        assert [f for f, _ in back.pyramid] == [0.05, 0.2, 0.5]
        for (_, a), (_, b) in zip(pyramid, back.pyramid):
            assert a.tobytes() == b.tobytes()

    def test_write_read_write_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(2)
        fmap = rng.standard_normal((4, 6, 3)).astype("<f2")
        p1, p2 = tmp_path / "a.fmfc", tmp_path / "b.fmfc"
        sio.write_feature_container(p1, fmap, "f16",
                                    pyramid=[(0.1, fmap), (0.3, fmap[:2, :3])])
        back = sio.read_feature_container(p1)
        sio.write_feature_container(p2, back.feature_map, back.dtype, back.pyramid)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.fmfc"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            sio.read_feature_container(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.fmfc"
        sio.write_feature_container(path, np.zeros((4, 4, 2), "<f4"), "f32")
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError):
            sio.read_feature_container(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            sio.write_feature_container(tmp_path / "x.fmfc",
                                        np.zeros((2, 2, 2)), "f64")


class TestScenePly:
    def test_save_load_save_identical(self, tmp_path):
        scene = make_random_scene(23, seed=3)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        sio.save_gaussian_scene(p1, scene)
        sio.save_gaussian_scene(p2, sio.load_gaussian_scene(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_reference_export_preserved_to_f32(self, tmp_path):
        # construct a file exactly as the reference implementation would
        rng = np.random.default_rng(4)
        n = 7
        fields = (["x", "y", "z", "nx", "ny", "nz"]
                  + [f"f_dc_{i}" for i in range(3)]
                  + [f"f_rest_{i}" for i in range(45)]
                  + ["opacity"] + [f"scale_{i}" for i in range(3)]
                  + [f"rot_{i}" for i in range(4)])
        payload = rng.standard_normal((n, len(fields))).astype("<f4")
        payload[:, 3:6] = 0.0
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        header += [f"property float {f}" for f in fields]
        header.append("end_header")
        src = tmp_path / "ref.ply"
        src.write_bytes(("\n".join(header) + "\n").encode() + payload.tobytes())

        scene = sio.load_gaussian_scene(src)
        dst = tmp_path / "resaved.ply"
        sio.save_gaussian_scene(dst, scene)
        assert dst.read_bytes() == src.read_bytes()

    def test_field_order_free_on_load(self, tmp_path):
        scene = make_random_scene(5, seed=5)
        ref = tmp_path / "ref.ply"
        sio.save_gaussian_scene(ref, scene)
        # shuffle property order in the file
        data = ref.read_bytes()
        end = data.find(b"end_header\n")
        header = data[:end].decode().splitlines()
        names = [ln.split()[-1] for ln in header if ln.startswith("property")]
        arr = np.frombuffer(data[end + 11:], "<f4").reshape(5, len(names))
        perm = np.random.default_rng(0).permutation(len(names))
        shuffled = tmp_path / "shuffled.ply"
        new_header = header[:3] + [f"property float {names[i]}" for i in perm] \
            + ["end_header"]
        shuffled.write_bytes(("\n".join(new_header) + "\n").encode()
                             + np.ascontiguousarray(arr[:, perm]).tobytes())
        back = sio.load_gaussian_scene(shuffled)
        np.testing.assert_array_equal(back.means, scene.means.astype("<f4"))
        np.testing.assert_array_equal(back.sh_coeffs,
                                      scene.sh_coeffs.astype("<f4").astype(float))

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        header = ["ply", "format binary_little_endian 1.0", "element vertex 1",
                  "property float x", "property float y", "property float z",
                  "end_header"]
        path.write_bytes(("\n".join(header) + "\n").encode() + b"\x00" * 12)
        with pytest.raises(FormatError):
            sio.load_gaussian_scene(path)


class TestCheckpoint:
    def _field(self):
        cfg = HashGridConfig(levels=3, table_size=128, feat_dim=2, n_min=4,
                             n_max=16, bounds_lo=(-1, -2, 0), bounds_hi=(1, 2, 3))
        field = HashFeatureField(cfg, clip_dim=6, dino_dim=4, hidden_width=8,
                                 hidden_layers=2, seed=9)
        field.tables[:] = np.random.default_rng(9).standard_normal(
            field.tables.shape).astype("<f4")
        return field

    def test_round_trip_bit_exact(self, tmp_path):
        field = self._field()
        sel = np.array([1, 4, 9], dtype=np.int64)
        p1, p2 = tmp_path / "a.fmgs", tmp_path / "b.fmgs"
        sio.save_field_checkpoint(p1, field, sel)
        loaded, sel_back = sio.load_field_checkpoint(p1)
        np.testing.assert_array_equal(sel_back, sel)
        sio.save_field_checkpoint(p2, loaded, sel_back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_field_matches(self, tmp_path):
        field = self._field()
        path = tmp_path / "f.fmgs"
        sio.save_field_checkpoint(path, field, np.arange(3))
        loaded, _ = sio.load_field_checkpoint(path)
        x = np.array([0.1, -0.5, 1.5])
        np.testing.assert_allclose(loaded.encode(x),
                                   field.encode(x).astype("<f4"), atol=1e-7)
        np.testing.assert_allclose(loaded.decode_semantic(loaded.encode(x)),
                                   field.decode_semantic(field.encode(x)),
                                   atol=1e-6)

    def test_per_gaussian_field_round_trip(self, tmp_path):
        field = PerGaussianField(11, encoding_dim=6, clip_dim=5, dino_dim=3,
                                 hidden_width=8, hidden_layers=1, seed=2)
        path = tmp_path / "pg.fmgs"
        sio.save_field_checkpoint(path, field, np.arange(11))
        loaded, _ = sio.load_field_checkpoint(path)
        assert isinstance(loaded, PerGaussianField)
        fa = field.forward_gaussians(None, np.array([3, 5]))
        fb = loaded.forward_gaussians(None, np.array([3, 5]))
        np.testing.assert_allclose(fa.semantic, fb.semantic, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fmgs"
        path.write_bytes(b"XXXX" + b"\x00" * 100)
        with pytest.raises(FormatError):
            sio.load_field_checkpoint(path)


class TestPoseSet:
    def _camera(self):
        return look_at_camera((0.5, -0.2, 3.0), (0, 0, 0), (0, 1, 0),
                              fx=50, fy=45, width=32, height=24)

    def test_round_trip(self, tmp_path):
        cam = self._camera()
        path = tmp_path / "poses.yaml"
        sio.save_pose_set(path, sio.PoseSet([sio.PoseFrame(camera=cam)], "world_to_camera_z_forward"))
        back = sio.load_pose_set(path).frames[0].camera
        np.testing.assert_allclose(back.rotation, cam.rotation, atol=1e-12)
        np.testing.assert_allclose(back.translation, cam.translation, atol=1e-12)
        assert (back.fx, back.fy, back.width, back.height) == (50, 45, 32, 24)

    @pytest.mark.parametrize("convention", ["camera_to_world_z_forward",
                                            "world_to_camera_z_backward"])
    def test_alternative_conventions_convert(self, tmp_path, convention):
        import yaml
        cam = self._camera()
        rot, trans = cam.rotation, cam.translation
        if convention == "camera_to_world_z_forward":
            rot, trans = rot.T, -rot.T @ trans
        else:  # stored looking down -z: undo the load-time flip
            flip = np.diag([1.0, -1.0, -1.0])
            rot, trans = flip @ rot, flip @ trans
        doc = {"convention": convention, "frames": [{
            "fx": 50.0, "fy": 45.0, "cx": 16.0, "cy": 12.0,
            "width": 32, "height": 24,
            "rotation": rot.tolist(), "translation": trans.tolist()}]}
        path = tmp_path / "poses.yaml"
        path.write_text(yaml.safe_dump(doc))
        back = sio.load_pose_set(path).frames[0].camera
        np.testing.assert_allclose(back.rotation, cam.rotation, atol=1e-12)
        np.testing.assert_allclose(back.translation, cam.translation, atol=1e-12)

    def test_missing_referenced_file(self, tmp_path):
        import yaml
        doc = {"frames": [{"fx": 50.0, "fy": 45.0, "cx": 16.0, "cy": 12.0,
                           "width": 32, "height": 24,
                           "rotation": np.eye(3).tolist(),
                           "translation": [0.0, 0.0, 0.0],
                           "clip_features": "missing.fmfc"}]}
        path = tmp_path / "poses.yaml"
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(FileNotFoundError):
            sio.load_pose_set(path)
        assert sio.load_pose_set(path, check_files=False).frames


class TestEmbeddingsAndAnnotations:
    def test_embedding_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        entries = [("red mug", rng.standard_normal(8).astype(np.float32)),
                   ("table", rng.standard_normal(8).astype(np.float32))]
        path = tmp_path / "q.emb"
        sio.write_embedding_file(path, entries)
        back = sio.read_embedding_file(path)
        assert [l for l, _ in back] == ["red mug", "table"]
        for (_, a), (_, b) in zip(entries, back):
            np.testing.assert_array_equal(a, b.astype(np.float32))

    def test_box_annotations_round_trip(self, tmp_path):
        boxes = [(0, "mug", (1, 2, 10, 12)), (3, "pot", (0, 0, 5, 5))]
        path = tmp_path / "boxes.txt"
        sio.write_box_annotations(path, boxes)
        assert sio.read_box_annotations(path) == boxes

    def test_mask_and_legend_round_trip(self, tmp_path):
        labels = np.random.default_rng(7).integers(0, 4, (16, 12))
        sio.write_label_mask(tmp_path / "m.png", labels)
        back = sio.read_label_mask(tmp_path / "m.png")
        np.testing.assert_array_equal(back, labels)
        sio.write_legend(tmp_path / "legend.txt", ["a", "b", "c", "background"])
        assert sio.read_legend(tmp_path / "legend.txt") == ["a", "b", "c", "background"]

    def test_png_rgb_round_trip(self, tmp_path):
        img = np.random.default_rng(8).uniform(size=(10, 14, 3))
        sio.save_png_rgb(tmp_path / "img.png", img)
        back = sio.load_png_rgb(tmp_path / "img.png")
        assert np.abs(back - img).max() <= 1.0 / 255.0

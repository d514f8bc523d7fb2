import numpy as np
import pytest

from xmpt.geometry import PointCloud, project_points
from xmpt.scenegen import (
    CLASS_NAMES,
    SceneConfig,
    SceneError,
    SceneIOError,
    generate_dataset,
    generate_scene,
    load_scene,
    read_cloud,
    read_depth,
    read_manifest,
    read_ppm,
    save_scene,
    write_cloud,
    write_depth,
    write_ppm,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3)


def test_scene_shapes_and_ranges(scene):
    h, w = scene.camera.height, scene.camera.width
    assert scene.image.shape == (h, w, 3) and scene.depth.shape == (h, w)
    assert scene.image.min() >= 0 and scene.image.max() <= 1
    assert scene.depth.min() >= 0
    labels = scene.cloud.labels
    assert labels.min() >= 0 and labels.max() < len(CLASS_NAMES)
    assert len(scene.cloud) == int((scene.depth > 0).sum())


def test_reprojection_round_trip(scene):
    u, v, z, valid = project_points(scene.cloud.points, scene.camera)
    assert valid.all()
    pu, pv = np.floor(u).astype(int), np.floor(v).astype(int)
    hit = np.argwhere(scene.depth > 0)
    # cloud points are emitted in row-major pixel order
    assert np.array_equal(np.stack([pv, pu], axis=1), hit)
    np.testing.assert_allclose(z, scene.depth[pv, pu], atol=1e-6)
    np.testing.assert_allclose(scene.cloud.colors, scene.image[pv, pu], atol=0)


def test_generate_deterministic(tmp_path):
    a = save_scene(generate_scene(11), tmp_path / "a")
    b = save_scene(generate_scene(11), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_class_coverage_census():
    counts = np.zeros(4, int)
    totals = np.zeros(4, int)
    for s in range(100):
        lab = generate_scene(s).cloud.labels
        counts += np.bincount(lab, minlength=4) > 0
        totals += np.bincount(lab, minlength=4)
    assert (counts >= 90).all(), counts
    assert (totals / totals.sum() <= 0.9).all()


def test_coverage_failure_raises():
    cfg = SceneConfig(min_coverage=1.01, max_tries=3)
    with pytest.raises(SceneError):
        generate_scene(0, cfg)


def test_scene_round_trip(tmp_path, scene):
    save_scene(scene, tmp_path / "s")
    back = load_scene(tmp_path / "s")
    assert back.cloud.points.tobytes() == scene.cloud.points.astype(np.float32).astype(np.float64).tobytes()
    assert back.depth.tobytes() == scene.depth.astype(np.float32).astype(np.float64).tobytes()
    assert np.abs(back.image - scene.image).max() <= 1 / 255
    assert np.abs(back.cloud.colors - scene.cloud.colors).max() <= 1 / 255
    assert np.array_equal(back.cloud.labels, scene.cloud.labels)
    assert back.camera == scene.camera


def test_byte_layouts(tmp_path):
    write_depth(tmp_path / "d.bin", np.array([[1.5, 2.0, 0.0]]))
    raw = (tmp_path / "d.bin").read_bytes()
    assert raw[:8] == b"\x03\x00\x00\x00\x01\x00\x00\x00"
    assert np.frombuffer(raw[8:], "<f4").tolist() == [1.5, 2.0, 0.0]

    write_cloud(tmp_path / "c.bin", PointCloud([[1.0, 2.0, 3.0]], [[1.0, 0.0, 0.5]], [258]))
    raw = (tmp_path / "c.bin").read_bytes()
    assert len(raw) == 4 + 12 + 3 + 2
    assert raw[:4] == b"\x01\x00\x00\x00"
    assert np.frombuffer(raw[4:16], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert list(raw[16:19]) == [255, 0, 128]
    assert raw[19:] == b"\x02\x01"

    write_ppm(tmp_path / "i.ppm", np.ones((1, 2, 3)))
    assert (tmp_path / "i.ppm").read_bytes() == b"P6\n2 1\n255\n" + b"\xff" * 6


def test_truncated_cloud_names_byte_counts(tmp_path, scene):
    write_cloud(tmp_path / "c.bin", scene.cloud)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-5])
    with pytest.raises(SceneIOError) as e:
        read_cloud(tmp_path / "c.bin")
    assert str(len(raw)) in str(e.value) and str(len(raw) - 5) in str(e.value)


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(SceneIOError, match="byte 0"):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(SceneIOError, match="expected 12"):
        read_ppm(tmp_path / "y.ppm")
    (tmp_path / "d.bin").write_bytes(b"\x02\x00\x00\x00\x02\x00\x00\x00" + b"\x00" * 4)
    with pytest.raises(SceneIOError, match="expected 24"):
        read_depth(tmp_path / "d.bin")


def test_dataset_and_manifest(tmp_path):
    man_path = generate_dataset(tmp_path / "data", 3, 7, SceneConfig(height=16, width=24))
    man = read_manifest(man_path)
    assert [e.scene_id for e in man.entries] == ["scene_0000", "scene_0001", "scene_0002"]
    assert man.seed == 7 and man.classes == CLASS_NAMES
    s = man.load(1)
    ref = generate_scene(8, SceneConfig(height=16, width=24))
    assert s.image.shape == (16, 24, 3)
    assert s.camera == ref.camera
    assert len(man.load_all(1)) == 2


def test_manifest_missing_file_named(tmp_path):
    man_path = generate_dataset(tmp_path / "data", 2, 0, SceneConfig(height=16, width=16))
    victim = tmp_path / "data" / "scene_0001" / "cloud.bin"
    victim.unlink()
    with pytest.raises(SceneIOError) as e:
        read_manifest(man_path)
    assert str(victim) in str(e.value)


def test_manifest_duplicate_ids_rejected(tmp_path):
    man_path = generate_dataset(tmp_path / "data", 1, 0, SceneConfig(height=16, width=16))
    lines = man_path.read_text().splitlines()
    man_path.write_text("\n".join(lines + [lines[-1]]) + "\n")
    with pytest.raises(SceneIOError, match="duplicate"):
        read_manifest(man_path)

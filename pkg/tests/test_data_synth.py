import json
import math
import warnings

import numpy as np
import pytest
from shapely.geometry import LineString, Polygon, box as shapely_box

from ftvp.data_synth import (
    Box,
    Camera,
    DatasetError,
    GenConfig,
    GridConfig,
    Road,
    Scene,
    boxes_overlap,
    class_counts,
    export_dataset,
    generate_samples,
    import_dataset,
    load_dataset,
    make_drive,
    rasterize_bev,
    read_poses,
    render_front_view,
    sample_world,
)


def _scene_key(scene):
    return (scene.road.centerline.tobytes(), scene.road.width, scene.road.crossings, scene.objects,
            scene.texture_seed)


def test_same_seed_same_scene():
    assert _scene_key(sample_world(5)) == _scene_key(sample_world(5))
    assert _scene_key(sample_world(5)) != _scene_key(sample_world(6))


def test_zero_vehicles_gives_road_only_scene():
    scene = sample_world(3, GenConfig(vehicle_count=(0, 0)))
    assert scene.objects == ()
    assert set(np.unique(rasterize_bev(scene))) <= {0, 1}


@pytest.mark.parametrize("classes", [3, 8])
def test_no_overlapping_objects_over_1000_seeds(classes):
    grid = GridConfig()
    cfg = GenConfig(num_classes=classes, vehicle_count=(4, 8))
    extent = shapely_box(grid.x_min, grid.y_min, grid.x_max, grid.y_max)
    pairs = 0
    for seed in range(1000):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            scene = sample_world(seed, cfg, grid)
        polys = [Polygon(b.corners()) for b in scene.objects]
        for b, p in zip(scene.objects, polys):
            assert extent.covers(p)
            assert -math.pi <= b.heading < math.pi
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                pairs += 1
                assert not polys[i].intersects(polys[j]), f"seed {seed}: objects {i} and {j} overlap"
    assert pairs > 1000


def test_separating_axis_agrees_with_shapely():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a, b = (Box(*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi), 2)
                for _ in range(2))
        want = Polygon(a.corners()).intersects(Polygon(b.corners()))
        assert boxes_overlap(a, b) == want


def test_placement_budget_warns_and_reduces_count():
    tight = GridConfig(0, 6, -3, 3, cells=8)
    with pytest.warns(RuntimeWarning, match="budget"):
        scene = sample_world(0, GenConfig(vehicle_count=(30, 30), attempts_per_object=20), tight)
    assert len(scene.objects) < 30


def test_vehicle_at_known_cell():
    grid = GridConfig()
    far = Road(np.array([[-10.0, 500.0], [100.0, 500.0]]), 3.5)
    # centre of row 10, column 20
    x = grid.x_max - 10.5 * grid.res
    y = grid.y_max - 20.5 * grid.res
    mask = rasterize_bev(Scene(far, (Box(x, y, 4.0, 1.8, 0.3, 2),)), grid)
    assert mask[10, 20] == 2
    assert (mask == 2).sum() > 10


def test_empty_scene_is_background():
    far = Road(np.array([[-10.0, 500.0], [100.0, 500.0]]), 3.5)
    assert not rasterize_bev(Scene(far)).any()


@pytest.mark.parametrize("seed", range(5))
def test_road_fraction_matches_polygon_area(seed):
    grid = GridConfig()
    scene = sample_world(seed, GenConfig(vehicle_count=(0, 0)), grid)
    frac = (rasterize_bev(scene, grid) == 1).mean()
    extent = shapely_box(grid.x_min, grid.y_min, grid.x_max, grid.y_max)
    road = LineString(scene.road.centerline).buffer(scene.road.width / 2, quad_segs=32)
    want = road.intersection(extent).area / extent.area
    assert abs(frac - want) <= 0.02 * want


def test_painters_order_in_eight_class_scenes():
    scene = sample_world(1, GenConfig(num_classes=8, vehicle_count=(3, 3)))
    mask = rasterize_bev(scene)
    gx, gy = GridConfig().centers()
    d = scene.road.lateral_distance(gx, gy)
    side = (d > scene.road.width / 2) & (d <= scene.road.width / 2 + scene.road.sidewalk)
    # sidewalk cells are either sidewalk or an object standing on it
    assert np.all(np.isin(mask[side], [3, 7, 2, 5, 6]))
    assert np.all(mask[d <= scene.road.width / 2] != 3)


# --- camera ---------------------------------------------------------------------------

def test_horizon_row_is_at_infinite_depth():
    cam = Camera(128)
    x, _ = cam.back_project(cam.cx, cam.horizon_v())
    assert np.isinf(x)
    x, _ = cam.back_project(cam.cx, cam.horizon_v() - 3)
    assert np.isinf(x)


def test_point_straight_ahead_is_on_centre_column():
    cam = Camera(256)
    u, v = cam.project([5.0, 12.0, 37.0], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(u, cam.cx, atol=1e-12)
    assert np.all(np.diff(v) < 0)


def test_ground_round_trip():
    cam = Camera(256)
    xs, ys = np.meshgrid(np.linspace(2, 60, 40), np.linspace(-15, 15, 31), indexing="ij")
    u, v = cam.project(xs, ys)
    bx, by = cam.back_project(u, v)
    assert np.hypot(bx - xs, by - ys).max() < 1e-6


def test_camera_that_never_sees_ground():
    with pytest.raises(ValueError, match="no ground"):
        render_front_view(sample_world(0), Camera(64, pitch=-1.0))
    with pytest.raises(ValueError):
        Camera(64, height=0.0)


def test_render_contract():
    scene = sample_world(2)
    cam = Camera(96)
    img = render_front_view(scene, cam)
    assert img.shape == (3, 96, 96)
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)
    assert img.tobytes() == render_front_view(scene, cam).tobytes()
    top = int(cam.horizon_v()) - 2
    # rows above the horizon are sky: blue dominant
    assert np.all(img[2, :top] > img[0, :top])


def test_vehicles_occlude_ground():
    far = Road(np.array([[-10.0, 500.0], [100.0, 500.0]]), 3.5)
    cam = Camera(64)
    truck = Box(10.0, 0.0, 4.0, 3.0, 0.0, 2, 2.0)
    bare = render_front_view(Scene(far), cam)
    with_truck = render_front_view(Scene(far, (truck,)), cam)
    u, v = cam.project(truck.x - truck.length / 2, 0.0, 0.5)
    r, c = int(v), int(u)
    assert not np.array_equal(bare[:, r, c], with_truck[:, r, c])
    assert with_truck[0, r, c] > with_truck[1, r, c]


# --- datasets -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_samples():
    return generate_samples(7, 5, image_size=64)


def test_generation_is_deterministic(small_samples):
    again = generate_samples(7, 5, image_size=64)
    for a, b in zip(small_samples, again):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert small_samples[0].mask.shape == (16, 16)


def test_export_import_round_trip(tmp_path, small_samples):
    export_dataset(small_samples, tmp_path, 3)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["samples"]) == 5 and len(manifest["classes"]) == 3
    back = import_dataset(tmp_path)
    for a, b in zip(small_samples, back):
        assert a.scene_id == b.scene_id
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.image.tobytes() == b.image.tobytes()
    counts = class_counts((s.mask for s in back), 3)
    np.testing.assert_allclose(manifest["class_frequencies"], counts / counts.sum())
    assert set(read_poses(tmp_path)) == {s.scene_id for s in small_samples}
    ds = load_dataset(tmp_path)
    assert ds.images.shape == (5, 3, 64, 64) and ds.masks.max() < 3


def test_corrupted_image_names_sample(tmp_path, small_samples):
    export_dataset(small_samples, tmp_path, 3)
    victim = small_samples[3].scene_id
    path = tmp_path / "images" / f"{victim}.png"
    data = bytearray(path.read_bytes())
    data[-20] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DatasetError) as info:
        import_dataset(tmp_path)
    assert info.value.sample_id == victim and victim in str(info.value)


def test_malformed_manifest(tmp_path, small_samples):
    export_dataset(small_samples, tmp_path, 3)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        import_dataset(tmp_path)
    with pytest.raises(DatasetError, match="manifest.json"):
        import_dataset(tmp_path / "nowhere")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_eight_class_palette(tmp_path):
    samples = generate_samples(1, 2, GenConfig(num_classes=8), image_size=64)
    export_dataset(samples, tmp_path, 8)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [c["name"] for c in manifest["classes"]][-1] == "pedestrian" and len(manifest["classes"]) == 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_export_rejects_ids_outside_palette(tmp_path):
    with pytest.raises(DatasetError):
        export_dataset(generate_samples(1, 1, GenConfig(num_classes=8, vehicle_count=(5, 5)), 64), tmp_path, 3)


def test_drive_poses_are_whole_cells():
    drive = make_drive(0, frames=5, step_cells=3, image_size=64)
    res = drive.grid.res
    for s in drive.samples:
        x, y, yaw = s.pose
        assert yaw == 0.0
        assert x / res == round(x / res) and y / res == round(y / res)
        np.testing.assert_array_equal(s.mask, rasterize_bev(drive.world, drive.grid, s.pose))

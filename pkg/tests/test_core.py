import json

import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Point, Polygon

from crowdsim.core import (HeadPoint, Manifest, ManifestError, ValidationError, load_manifest,
                           point_in_roi, polygon_area, save_manifest)
from crowdsim.synthgen import GeneratorSpec, generate_dataset

from .conftest import make_sample

UNIT = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))


def test_point_in_roi_basic():
    assert point_in_roi(HeadPoint(0.5, 0.5), UNIT)
    assert not point_in_roi(HeadPoint(-1.0, -1.0), UNIT)


@pytest.mark.parametrize("p", [(0.5, 0.0), (1.0, 0.5), (0.5, 1.0), (0.0, 0.5), (0.0, 0.0), (1.0, 1.0)])
def test_point_on_boundary_is_inside(p):
    # boundary-inclusive oracle from shapely
    assert Polygon(UNIT).covers(Point(*p))
    assert point_in_roi(HeadPoint(*p), UNIT)


def test_degenerate_polygon_rejected():
    with pytest.raises(ValidationError):
        point_in_roi(HeadPoint(0, 0), ((0, 0), (1, 1), (2, 2)))
    with pytest.raises(ValidationError):
        point_in_roi(HeadPoint(0, 0), ((0, 0), (1, 1)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 13), st.floats(-3, 13)), min_size=1, max_size=40))
def test_point_in_roi_matches_shapely(points):
    poly = ((0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (5.0, 4.0), (0.0, 10.0))
    shp = Polygon(poly)
    for x, y in points:
        # skip points within float noise of the boundary where conventions may differ
        if shp.exterior.distance(Point(x, y)) < 1e-6:
            continue
        assert point_in_roi(HeadPoint(x, y), poly) == shp.contains(Point(x, y))


def test_polygon_area():
    assert polygon_area(UNIT) == 1.0
    assert polygon_area(((0, 0), (2, 0), (0, 2))) == 2.0


def _write(tmp_path, doc):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    return p


def test_load_empty_manifest(tmp_path):
    m = load_manifest(_write(tmp_path, {"dataset_name": "x", "generation_seed": 3, "samples": []}))
    assert len(m) == 0 and m.generation_seed == 3


def test_malformed_manifest(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ManifestError):
        load_manifest(p)
    with pytest.raises(ManifestError):
        load_manifest(_write(tmp_path, {"dataset_name": "x", "samples": []}))


def _sample_json(**over):
    obj = {"image": "a.png", "width": 32, "height": 32, "heads": [[5.0, 5.0]], "count": 1,
           "time_minutes": 600, "weather": 0, "location_id": 0, "camera_id": 0, "level": 0,
           "roi": [[0, 0], [31, 0], [31, 31], [0, 31]]}
    obj.update(over)
    return obj


@pytest.mark.parametrize("over, needle", [
    ({"count": 2}, "count 2 != number of heads 1"),
    ({"heads": [[40.0, 5.0]], "roi": [[0, 0], [31, 0], [31, 31], [0, 31]]}, "outside image bounds"),
    ({"heads": [[20.0, 20.0]], "roi": [[0, 0], [10, 0], [10, 10], [0, 10]]}, "outside scene ROI"),
    ({"level": 9}, "level 9"),
    ({"weather": 7}, "weather 7"),
    ({"time_minutes": 1440}, "time_minutes"),
    ({"heads": [[1.0, 1.0]] * 11, "count": 11}, "outside level 0 range"),
])
def test_validation_names_sample_and_invariant(tmp_path, over, needle):
    doc = {"dataset_name": "x", "generation_seed": 0,
           "samples": [_sample_json(image="ok.png"), _sample_json(**over)]}
    with pytest.raises(ValidationError) as err:
        load_manifest(_write(tmp_path, doc))
    msg = str(err.value)
    assert msg.startswith("sample 1 (a.png)") and needle in msg


def test_duplicate_image_paths(tmp_path):
    doc = {"dataset_name": "x", "generation_seed": 0, "samples": [_sample_json(), _sample_json()]}
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(_write(tmp_path, doc))


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    spec = GeneratorSpec(n_locations=1, cameras_per_location=4, images_per_level={l: 3 for l in range(9)},
                         image_size=(48, 64), levels=(0, 1, 2), seed=5)
    generate_dataset(spec, out)
    return out


def test_round_trip_byte_identical(generated, tmp_path):
    src = generated / "manifest.json"
    m = load_manifest(src)
    assert len(m) >= 10
    first = src.read_bytes()
    save_manifest(m, src)
    assert src.read_bytes() == first
    # two saves of the same manifest elsewhere are identical too
    save_manifest(m, tmp_path / "a.json")
    save_manifest(m, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_save_elsewhere_rewrites_paths(generated, tmp_path):
    m = load_manifest(generated / "manifest.json")
    out = save_manifest(m, tmp_path / "sub" / "copy.json")
    m2 = load_manifest(out)
    assert m2.image_file(m2.samples[0]).resolve() == m.image_file(m.samples[0]).resolve()
    assert m2.samples[0].heads == m.samples[0].heads


def test_manifest_keys(generated):
    doc = json.loads((generated / "manifest.json").read_text())
    assert set(doc) == {"dataset_name", "generation_seed", "samples"}
    s = doc["samples"][0]
    for key in ("image", "width", "height", "heads", "time_minutes", "weather", "location_id",
                "camera_id", "level", "roi"):
        assert key in s


def test_domain_objects_are_immutable():
    s = make_sample()
    with pytest.raises(Exception):
        s.count = 3
    m = Manifest((s,), "x", 0)
    with pytest.raises(Exception):
        m.samples = ()

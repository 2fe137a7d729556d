import json

import numpy as np
import pytest

from src.engine.errors import DegenerateGeometry, NonPhysicalBase
from src.engine.generators import (
    ALUMINIUM,
    MANIFEST_COLUMNS,
    DatasetManifest,
    FamilyMix,
    GeneratorConfig,
    LevelSetFamily,
    LevelSetSpec,
    MaterialSample,
    StrutFamily,
    StrutSpec,
    TemplateId,
    TemplateSpec,
    build_dataset,
    generate,
    random_spec,
    sample_material,
    skeleton,
    spec_from_json,
    spec_to_json,
)
from src.engine.voxel_core import extract_eighth, volume_fraction


def _point_segment_distance(p, a, b):
    ab = b - a
    t = min(max(np.dot(p - a, ab) / np.dot(ab, ab), 0.0), 1.0)
    return np.linalg.norm(p - (a + t * ab))


def test_skeleton_segment_counts():
    assert skeleton(StrutFamily.BCC).shape == (4, 2, 3)
    assert skeleton(StrutFamily.OCTAHEDRAL).shape == (12, 2, 3)
    assert skeleton(StrutFamily.OCTET).shape == (24, 2, 3)


def test_bcc_struts_match_capsule_distance():
    edge, radius = 8, 1.3
    grid = generate(StrutSpec("bcc", radius), edge)
    diagonals = [
        (np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0])),
        (np.array([0.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.0])),
        (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 1.0])),
        (np.array([0.0, 1.0, 1.0]), np.array([1.0, 0.0, 0.0])),
    ]
    h = edge // 2
    expected = np.zeros((h, h, h))
    for i in range(h):
        for j in range(h):
            for k in range(h):
                p = (np.array([i, j, k]) + 0.5) / edge
                d = min(_point_segment_distance(p, a, b) for a, b in diagonals)
                expected[i, j, k] = float(d <= radius / edge)
    np.testing.assert_array_equal(extract_eighth(grid).occupancy, expected)


def test_generated_units_are_cubic_symmetric():
    for spec in (
        StrutSpec("octet", 1.0),
        LevelSetSpec("diamond", 0.3),
        TemplateSpec("hollow_tubes", (0.5, 0.5)),
    ):
        occ = generate(spec, 12).occupancy
        for axis in range(3):
            np.testing.assert_array_equal(occ, np.flip(occ, axis=axis))


def test_gyroid_zero_level_fills_half():
    grid = generate(LevelSetSpec(LevelSetFamily.GYROID, 0.0), 32)
    assert grid.binary_flag
    assert volume_fraction(grid) == pytest.approx(0.5, abs=0.02)


def test_schwarz_p_volume_falls_with_iso_level():
    vfs = [volume_fraction(generate(LevelSetSpec("schwarz_p", iso), 16)) for iso in (-1.0, 0.0, 1.0)]
    assert vfs[0] > vfs[1] > vfs[2]


def test_levelset_shell_is_thinner_than_solid():
    solid = volume_fraction(generate(LevelSetSpec("gyroid", 0.0), 16))
    shell = volume_fraction(generate(LevelSetSpec("gyroid", 0.0, True, 0.3), 16))
    assert 0 < shell < solid


def test_cross_plate_holes_remove_material():
    vfs = [volume_fraction(generate(TemplateSpec("cross_plates", (0.5, hole)), 16)) for hole in (0.0, 0.5, 1.0)]
    assert vfs[0] > vfs[1] > vfs[2]


def test_template_base_shapes_are_valid():
    for tid in TemplateId:
        grid = generate(TemplateSpec(tid, (0.0, 0.0)), 16)
        assert 0.0 < volume_fraction(grid) < 1.0


def test_degenerate_and_invalid_geometry():
    with pytest.raises(DegenerateGeometry):
        generate(LevelSetSpec("schwarz_p", 3.5), 8)
    with pytest.raises(ValueError):
        generate(StrutSpec("bcc", 4.0), 8)
    with pytest.raises(ValueError):
        generate(StrutSpec("bcc", 1.0), 7)
    with pytest.raises(ValueError):
        TemplateSpec("frame", (0.5,))
    with pytest.raises(ValueError):
        TemplateSpec("frame", (0.5, 1.5))


def test_spec_json_round_trip():
    for spec in (
        StrutSpec("octahedral", 1.25),
        LevelSetSpec("gyroid", -0.2, True, 0.4),
        TemplateSpec("cross_bars", (0.1, 0.9)),
    ):
        text = spec_to_json(spec)
        assert json.loads(text)["kind"] in {"strut", "levelset", "template"}
        assert spec_from_json(text) == spec


def test_material_sampling():
    assert sample_material(ALUMINIUM, 0, std_factor=0.0) is ALUMINIUM
    rng = np.random.default_rng(5)
    draws = [sample_material(ALUMINIUM, rng) for _ in range(2000)]
    e = np.array([m.youngs_modulus for m in draws])
    nu = np.array([m.poisson_ratio for m in draws])
    assert e.mean() == pytest.approx(68300.0, rel=0.002)
    assert e.std() == pytest.approx(683.0, rel=0.1)
    assert nu.std() == pytest.approx(0.003, rel=0.1)
    assert sample_material(ALUMINIUM, 9) == sample_material(ALUMINIUM, 9)


def test_non_physical_material_rejected():
    with pytest.raises(NonPhysicalBase):
        MaterialSample(-1.0, 0.3)
    with pytest.raises(NonPhysicalBase):
        MaterialSample(1000.0, 0.5)


def test_random_spec_honours_family_mix():
    rng = np.random.default_rng(0)
    specs = [random_spec(rng, 16, FamilyMix(1.0, 0.0, 0.0)) for _ in range(20)]
    assert all(isinstance(s, StrutSpec) for s in specs)
    with pytest.raises(ValueError):
        FamilyMix(0.5, 0.5, 0.5)


def test_build_dataset_is_reproducible(tmp_path):
    config = GeneratorConfig(edge_voxels=8, count=4, seed=1, workers=1)
    first = build_dataset(config, out_dir=tmp_path / "a")
    second = build_dataset(GeneratorConfig(edge_voxels=8, count=4, seed=1, workers=3), out_dir=tmp_path / "b")

    assert len(first) == 4
    assert list(first.frame.columns) == MANIFEST_COLUMNS
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for rel in first.frame["voxel_path"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert first.frame["volume_fraction"].between(config.vf_min, config.vf_max).all()

    reread = DatasetManifest.read_csv(tmp_path / "a" / "manifest.csv")
    assert reread.grid(0).edge_voxels == 8


def test_build_dataset_with_zero_count(tmp_path):
    manifest = build_dataset(GeneratorConfig(count=0), out_dir=tmp_path)
    assert len(manifest) == 0
    assert (tmp_path / "manifest.csv").read_text().strip() == ",".join(MANIFEST_COLUMNS)

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from stgr.errors import ConfigError, GenerationError, ParseError, ValidationError
from stgr.masks import Mask, mask_iou
from stgr.synth import (PhantomConfig, Scene, derive_seed, generate_dataset, generate_scene, import_external,
                        load_dataset, load_scene, prototypes, save_scene)

FIXTURES = Path(__file__).parent / "fixtures"


def corpus(cfg, n, seed=0):
    return [generate_scene(cfg, derive_seed(seed, i)) for i in range(n)]


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_generation_is_pure():
    cfg = PhantomConfig()
    assert generate_scene(cfg, 42).to_json() == generate_scene(cfg, 42).to_json()
    assert generate_scene(cfg, 42).to_json() != generate_scene(cfg, 43).to_json()


def test_derive_seed_is_stable():
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert len({derive_seed(0, i) for i in range(100)}) == 100
    assert 0 <= derive_seed(2**70, 5) < 2**63


def test_noiseless_copies_match_their_source():
    cfg = PhantomConfig(overlap=0.0, jitter=0.0, spurious_rate=0.0)
    for scene in corpus(cfg, 10):
        for m, src in zip(scene.candidates, scene.sources):
            kind, idx = src.split(":")
            if kind == "lesion":
                assert mask_iou(m, scene.gt[int(idx)]) == 1.0
        lesion_rows = [i for i, s in enumerate(scene.sources) if s.startswith("lesion")]
        assert np.all(scene.labels[lesion_rows] == 1)


def max_cross_structure_iou(scene):
    best = 0.0
    for i, (a, sa) in enumerate(zip(scene.candidates, scene.sources)):
        for b, sb in zip(scene.candidates[i + 1:], scene.sources[i + 1:]):
            if sa != sb:
                best = max(best, mask_iou(a, b))
    return best


def test_overlap_knob_raises_cross_structure_iou():
    low = np.mean([max_cross_structure_iou(s) for s in corpus(PhantomConfig(overlap=0.1), 100)])
    high = np.mean([max_cross_structure_iou(s) for s in corpus(PhantomConfig(overlap=0.8), 100)])
    assert high > low


@pytest.mark.slow
def test_default_class_balance():
    scenes = corpus(PhantomConfig(), 500, seed=1)
    labels = np.concatenate([s.labels for s in scenes])
    assert 0.40 <= labels.mean() <= 0.60


def test_feature_separability_is_honest():
    for rho in (0.0, 0.7, 0.95):
        cfg = PhantomConfig(rho=rho)
        lesion = prototypes(cfg)["lesion"]
        les, con = [], []
        for s in corpus(cfg, 40):
            for f, src in zip(s.features, s.sources):
                (les if src.startswith("lesion") else con if src.startswith("confounder") else []).append(
                    cosine(f, lesion))
        assert np.mean(les) > np.mean(con)


def test_prototype_geometry():
    p = prototypes(PhantomConfig(rho=0.7))
    assert cosine(p["lesion"], p["confounder"]) == pytest.approx(0.7, abs=1e-12)
    assert abs(cosine(p["lesion"], p["spurious"])) < 1e-12


def test_generated_scenes_respect_bounds():
    cfg = PhantomConfig()
    for s in corpus(cfg, 30):
        assert cfg.min_candidates <= s.n_candidates <= cfg.max_candidates
        assert s.features.shape == (s.n_candidates, cfg.d_v)
        assert cfg.attributes[0] <= s.attributes.shape[0] <= cfg.attributes[1]
        assert s.validate() is s


def test_infeasible_placement_is_generation_error():
    with pytest.raises(GenerationError, match="radius"):
        generate_scene(PhantomConfig(height=16, width=16, lesion_radius=(9.0, 10.0)), 0)
    cfg = PhantomConfig(height=24, width=24, lesion_count=(3, 3), lesion_radius=(7.0, 8.0), max_retries=5)
    with pytest.raises(GenerationError, match="lesions"):
        generate_scene(cfg, 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(overlap=1.5)
    with pytest.raises(ConfigError):
        PhantomConfig(lesion_count=(3, 1))
    with pytest.raises(ConfigError, match="max_candidates"):
        PhantomConfig(max_candidates=16.0)
    with pytest.raises(ConfigError, match="duplicates"):
        PhantomConfig(duplicates=(1.5, 2))
    with pytest.raises(ConfigError, match="bogus"):
        PhantomConfig.from_dict({"bogus": 1})
    cfg = PhantomConfig(rho=0.2)
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg


# -- files ------------------------------------------------------------------------

def test_scene_roundtrip(tmp_path):
    scene = generate_scene(PhantomConfig(), 5, "abc")
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.to_json() == scene.to_json()
    assert back.candidates == scene.candidates and back.gt == scene.gt
    assert np.array_equal(back.features, scene.features)
    assert np.array_equal(back.labels, scene.labels)


def test_schema_field_names():
    doc = json.loads(generate_scene(PhantomConfig(), 5).to_json())
    assert list(doc) == ["schema_version", "scene_id", "height", "width", "candidates", "features",
                         "attributes", "gt", "labels", "true_iou", "seed"]
    assert set(doc["candidates"][0]) == {"rle"}


def test_truncated_file_is_parse_error(tmp_path):
    text = generate_scene(PhantomConfig(), 5).to_json()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(ParseError):
        load_scene(tmp_path / "t.json")


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.pop("features"), "features"),
    (lambda d: d.__setitem__("schema_version", 9), "schema_version"),
    (lambda d: d["candidates"].__setitem__(1, {"rle": "4 4 3"}), "candidates[1].rle"),
    (lambda d: d["gt"].__setitem__(0, "oops"), "gt[0]"),
])
def test_parse_errors_name_the_field(mutate, field):
    doc = json.loads((FIXTURES / "two_candidates.json").read_text())
    mutate(doc)
    with pytest.raises(ParseError) as info:
        Scene.from_dict(doc)
    assert info.value.field == field


def test_invariant_violations_are_validation_errors():
    doc = json.loads((FIXTURES / "two_candidates.json").read_text())
    doc["features"] = [[0.5, -1.0]]
    with pytest.raises(ValidationError):
        Scene.from_dict(doc)
    doc = json.loads((FIXTURES / "two_candidates.json").read_text())
    doc["candidates"][0]["rle"] = "2 8 16"
    with pytest.raises(ValidationError):
        Scene.from_dict(doc)


def test_hand_written_fixture_values():
    s = load_scene(FIXTURES / "two_candidates.json")
    assert s.scene_id == "two-candidates" and (s.height, s.width) == (4, 4) and s.seed == 11
    bitmaps = [c.to_bitmap() for c in s.candidates]
    assert bitmaps[0][1:3, 1:3].all() and bitmaps[0].sum() == 4
    assert bitmaps[1][0:2, 0:2].all() and bitmaps[1].sum() == 4
    assert s.features.tolist() == [[0.5, -1.0], [2.0, 0.25]]
    assert s.attributes.tolist() == [[1.0, 0.0, 0.5]]
    g = s.gt[0].to_bitmap()
    oracle = (bitmaps[1] & g).sum() / (bitmaps[1] | g).sum()
    assert s.true_iou.tolist() == [1.0, oracle] and s.labels.tolist() == [1, 0]


def test_import_external_with_feature_map(tmp_path, rng):
    fmap = rng.standard_normal((4, 4, 3))
    np.save(tmp_path / "fmap.npy", fmap)
    doc = {"height": 4, "width": 4, "candidates": [{"rle": "4 4 5 2 2 2 5"}, {"rle": "4 4 0 2 2 2 10"}],
           "attributes": [[0.1, 0.2]], "gt": [{"rle": "4 4 0 2 2 2 10"}], "feature_map": "fmap.npy",
           "labels": [1, 1]}
    (tmp_path / "dump.json").write_text(json.dumps(doc))
    s = import_external(tmp_path / "dump.json")
    np.testing.assert_allclose(s.features[0], fmap[1:3, 1:3].reshape(-1, 3).mean(axis=0), atol=1e-15)
    assert s.labels.tolist() == [0, 1]
    assert s.scene_id == "dump"

    doc["feature_map"] = fmap[:3].tolist()
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        import_external(tmp_path / "bad.json")
    doc.pop("feature_map")
    (tmp_path / "nofeat.json").write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        import_external(tmp_path / "nofeat.json")


def test_dataset_manifest_and_digests(tmp_path):
    cfg = PhantomConfig(height=32, width=32, lesion_radius=(3.0, 5.0), confounder_length=(8.0, 12.0),
                        confounder_width=(1.0, 2.0), spurious_radius=(2.0, 3.0))
    a = generate_dataset(cfg, 3, 7, tmp_path / "a")
    b = generate_dataset(cfg, 3, 7, tmp_path / "b")
    assert a == b and len(a["scenes"]) == 3
    assert [e["id"] for e in a["scenes"]] == ["scene_00000", "scene_00001", "scene_00002"]
    scenes = load_dataset(tmp_path / "a")
    assert [s.scene_id for s in scenes] == ["scene_00000", "scene_00001", "scene_00002"]
    one = generate_dataset(cfg, 1, 7, tmp_path / "one")
    assert len(one["scenes"]) == 1
    with pytest.raises(ConfigError):
        generate_dataset(cfg, 0, 7, tmp_path / "none")
    path = tmp_path / "a" / "scenes" / "scene_00001.json"
    path.write_text(path.read_text().replace('"seed":', '"seed": '))
    with pytest.raises(ValidationError):
        load_dataset(tmp_path / "a")
    assert len(load_dataset(tmp_path / "a", verify=False)) == 3


def test_with_labels_returns_a_copy():
    s = load_scene(FIXTURES / "two_candidates.json")
    bare = replace(s, labels=None, true_iou=None)
    labelled = bare.with_labels()
    assert bare.labels is None and labelled.labels.tolist() == [1, 0]

from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stgr.errors import ArgumentError, ConfigError, ShapeError, ValidationError
from stgr.estimator import MaskSelector, check_config, check_scenes
from stgr.training import train_loop


@pytest.fixture(scope="module")
def fitted(tiny_config, tiny_scenes):
    return MaskSelector(config=tiny_config.replace(epochs=2, batch_size=4)).fit(tiny_scenes[:6])


def test_params_and_clone(tiny_config):
    est = MaskSelector(head="linear", config=tiny_config, seed=3)
    assert est.get_params() == {"head": "linear", "config": tiny_config, "seed": 3, "threads": 1}
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    twin.set_params(seed=9)
    assert twin.effective_config().seed == 9 and est.effective_config().seed == 3


def test_effective_config_precedence(tiny_config):
    cfg = MaskSelector(head="cosine", config=tiny_config.replace(head="stgr", seed=4), threads=2).effective_config()
    assert (cfg.head, cfg.seed, cfg.threads) == ("cosine", 4, 2)
    assert MaskSelector(config={"d_v": 16, "graph_heads": 4}).effective_config().d_v == 16
    with pytest.raises(ConfigError):
        MaskSelector(config={"nope": 1}).effective_config()
    with pytest.raises(ArgumentError):
        check_config(42)


def test_unfitted_raises(tiny_scenes):
    with pytest.raises(NotFittedError):
        MaskSelector().predict(tiny_scenes[:1])


def test_fit_matches_train_loop(fitted, tiny_scenes):
    direct = train_loop([s.with_labels() for s in tiny_scenes[:6]], fitted.config_).network.state_dict()
    mine = fitted.network_.state_dict()
    assert all(np.array_equal(direct[k], mine[k]) for k in direct)
    assert fitted.n_features_in_ == 8 and len(fitted.train_log_) == 2


def test_outputs_have_scene_shapes(fitted, tiny_scenes):
    scenes = tiny_scenes[6:]
    probs = fitted.predict_proba(scenes)
    states = fitted.transform(scenes)
    preds = fitted.predict(scenes)
    for s, p, h, r in zip(scenes, probs, states, preds):
        assert p.shape == (s.n_candidates,) and np.all((p > 0) & (p < 1))
        assert h.shape == (s.n_candidates, 8)
        assert r.scene_id == s.scene_id
        assert set(r.selected) == set(np.flatnonzero(p > fitted.config_.tau_sel))
    assert 0.0 <= fitted.score(scenes) <= 1.0


def test_linear_transform_is_identity_on_features(tiny_config, tiny_scenes):
    est = MaskSelector(head="linear", config=tiny_config.replace(epochs=1)).fit(tiny_scenes[:4])
    assert np.array_equal(est.transform(tiny_scenes[4:5])[0], tiny_scenes[4].features)


def test_check_scenes(tiny_scenes):
    with pytest.raises(ArgumentError):
        check_scenes([])
    with pytest.raises(ArgumentError):
        check_scenes("scenes")
    with pytest.raises(ArgumentError):
        check_scenes([object()])
    with pytest.raises(ShapeError):
        check_scenes(tiny_scenes[:2], d_v=5)
    with pytest.raises(ValidationError):
        check_scenes([tiny_scenes[0], tiny_scenes[0]])
    bare = replace(tiny_scenes[0], labels=None, true_iou=None)
    out = check_scenes([bare], require_labels=True)
    assert bare.labels is None and out[0].labels is not None


def test_fit_does_not_mutate_inputs(tiny_config, tiny_scenes):
    bare = [replace(s, labels=None, true_iou=None) for s in tiny_scenes[:3]]
    before = [s.to_json() for s in bare]
    MaskSelector(config=tiny_config.replace(epochs=1)).fit(bare)
    assert [s.to_json() for s in bare] == before

import numpy as np
import pytest
from sklearn.base import clone

from fcoskit import toy
from fcoskit.assignment import build_targets
from fcoskit.config import FpnConfig
from fcoskit.estimators import FCOSPostprocessor, FCOSTargetEncoder, LinearFCOSHead, NotFittedError
from fcoskit.geometry import Box, LabeledBox

SCENE = ((100, 80), [LabeledBox(Box(10, 10, 60, 50), 1), LabeledBox(Box(0, 0, 90, 70), 2, 1)])


def test_encoder_matches_function():
    enc = FCOSTargetEncoder(center_sampling=True).fit()
    (ts,) = enc.transform([SCENE])
    ref = build_targets(*SCENE, FpnConfig(center_sampling=True))
    np.testing.assert_array_equal(ts.class_label, ref.class_label)
    np.testing.assert_array_equal(ts.regression, ref.regression)


def test_encoder_params_and_clone():
    enc = FCOSTargetEncoder(single_level="P4", radius_factor=2.0)
    assert clone(enc).get_params() == enc.get_params()
    (ts,) = enc.fit_transform([SCENE])
    assert set(ts.level_index.tolist()) == {1}


def test_not_fitted():
    with pytest.raises(NotFittedError):
        FCOSTargetEncoder().transform([SCENE])
    with pytest.raises(NotFittedError):
        FCOSPostprocessor().predict([])


@pytest.mark.parametrize("bad", [[], [((0, 10), [])], [("oops",)], [((10, 10), [Box(0, 0, 1, 1)])]])
def test_scene_validation(bad):
    with pytest.raises((ValueError, TypeError)):
        FCOSTargetEncoder().fit().transform(bad)


def test_postprocessor_and_head():
    train = [toy.generate_scene(s) for s in range(3)]
    model = LinearFCOSHead(epochs=60).fit(train)
    assert model.report_.total_series[-1] < model.report_.total_series[0]
    assert 0.0 <= model.score(train) <= 1.0
    dets = model.predict(train[:1])[0]
    assert dets and all(d.final_score > 0.0 for d in dets)

    post = FCOSPostprocessor(normalize_targets=True).fit()
    scene = train[0]
    out = post.predict([(toy.level_outputs(model.head_, scene), scene.image_size)],
                       scales={i: s for i, s in enumerate(model.head_.scales)})
    assert [d.box for d in out[0]] == [d.box for d in dets]


def test_postprocessor_rejects_misaligned_outputs():
    from fcoskit.inference import LevelOutput

    bad = LevelOutput(np.zeros((2, 2, 3)), np.ones((3, 2, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FCOSPostprocessor().fit().predict([({0: bad}, (16, 16))])

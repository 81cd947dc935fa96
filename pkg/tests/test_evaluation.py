import hashlib

import numpy as np
import pytest
import torch

from semifss.episodes import sample_episode
from semifss.errors import EmptyMask, NonBinaryInput, ShapeMismatch
from semifss.evaluation import EvalReport, dsc, evaluate, predict_episode, save_overlays, summary_table
from semifss.network import TINY_CONFIG, FewShotSegNet


def dsc_oracle(a, b):
    """Three counters over a flat pixel loop."""
    both = only_a = only_b = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        if x and y:
            both += 1
        elif x:
            only_a += 1
        elif y:
            only_b += 1
    size_a, size_b = both + only_a, both + only_b
    if size_a + size_b == 0:
        return 1.0
    return 2 * both / (size_a + size_b)


def test_dsc_matches_oracle(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 12, size=2))
        a = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
        b = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
        assert dsc(a, b) == dsc_oracle(a, b)
        assert dsc(a, b) == dsc(b, a)
        assert 0.0 <= dsc(a, b) <= 1.0
        assert dsc(a, a) == 1.0


def test_dsc_examples():
    a = np.zeros(10, np.uint8)
    b = np.zeros(10, np.uint8)
    a[:4] = 1
    b[1:7] = 1
    assert dsc(a, b) == pytest.approx(0.6)
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    c = np.zeros(10, np.uint8)
    c[8:] = 1
    assert dsc(a, c) == 0.0


def test_dsc_errors():
    with pytest.raises(ShapeMismatch):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(NonBinaryInput):
        dsc(np.full((2, 2), 0.5), np.zeros((2, 2)))


def _checksum(model):
    h = hashlib.sha256()
    for t in model.state_dict().values():
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def model():
    return FewShotSegNet(TINY_CONFIG, seed=3)


def test_predict_contract(model, shapes):
    ep = sample_episode(shapes, shapes.classes, k=1, rng_seed=2)
    model.train()
    pred = predict_episode(model, ep)
    assert model.training  # mode flag restored
    assert pred.shape == ep.query_mask.shape and pred.dtype == np.uint8
    assert set(np.unique(pred)) <= {0, 1}
    np.testing.assert_array_equal(pred, predict_episode(model, ep))


def test_five_shot_uses_every_support(model, shapes):
    from semifss.trainer import episode_forward

    ep = sample_episode(shapes, shapes.classes, k=5, rng_seed=4)
    model.eval()
    with torch.no_grad():
        base = episode_forward(model, ep)
        for j in range(5):
            support = list(ep.support)
            support[j] = (support[j][0], np.zeros_like(support[j][1]))
            ep_j = sample_episode(shapes, shapes.classes, k=5, rng_seed=4)
            ep_j.support = support
            assert not torch.equal(episode_forward(model, ep_j), base)


def test_all_supports_empty_is_surfaced(model, shapes):
    ep = sample_episode(shapes, shapes.classes, k=2, rng_seed=5)
    ep.support = [(img, np.zeros_like(m)) for img, m in ep.support]
    with pytest.raises(EmptyMask):
        predict_episode(model, ep)


def test_evaluate_report(model, shapes):
    before = _checksum(model)
    report = evaluate(model, shapes, shapes.classes, k=1, n_episodes=12, seed=9, checkpoint_id="m")
    assert _checksum(model) == before
    assert len(report.per_episode) == report.n_episodes == 12
    assert [e["index"] for e in report.per_episode] == list(range(12))
    assert 0.0 <= report.mean_dsc <= 1.0
    scores = [e["dsc"] for e in report.per_episode if e["dsc"] is not None]
    assert abs(report.mean_dsc - sum(scores) / len(scores)) <= 1e-9
    again = evaluate(model, shapes, shapes.classes, k=1, n_episodes=12, seed=9, checkpoint_id="m")
    assert again.to_json() == report.to_json()
    threaded = evaluate(model, shapes, shapes.classes, k=1, n_episodes=12, seed=9, checkpoint_id="m", workers=3)
    assert threaded.to_json() == report.to_json()
    other = evaluate(model, shapes, shapes.classes, k=1, n_episodes=12, seed=10)
    assert other.per_episode != report.per_episode


def test_report_round_trip_and_table(model, shapes, tmp_path):
    report = evaluate(model, shapes, shapes.classes, k=1, n_episodes=4, seed=0)
    report.label = "1-shot"
    path = report.write(tmp_path / "r.json")
    assert EvalReport.from_json(path.read_text()) == report
    report.additional_samples = 10
    table = summary_table([report])
    assert "1-shot" in table and "Mean DSC" in table and " 10 " in table


def test_unscorable_excluded(shapes, monkeypatch):
    import semifss.evaluation as ev

    calls = iter(range(100))

    def flaky(model, ep):
        if next(calls) % 2:
            raise EmptyMask("vanished")
        return ep.query_mask

    monkeypatch.setattr(ev, "predict_episode", flaky)
    model = FewShotSegNet(TINY_CONFIG)
    report = ev.evaluate(model, shapes, shapes.classes, k=1, n_episodes=6)
    assert report.n_unscorable == 3 and len(report.per_episode) == 6
    assert report.mean_dsc == 1.0


def test_save_overlays(model, shapes, tmp_path):
    paths = save_overlays(model, shapes, shapes.classes, 1, 3, 0, tmp_path)
    assert len(paths) == 3
    from PIL import Image

    assert Image.open(paths[0]).size == (96, 32)

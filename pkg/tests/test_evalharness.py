import json
import os
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from eal import scenegraph as sg
from eal import agent as ag
from eal import attack as atk
from eal import evalharness as ev


@pytest.fixture(scope="module")
def house():
    return sg.generate_house(3)


@pytest.fixture(scope="module")
def episodes(house):
    return [sg.generate_episode(house, s) for s in (41, 42)]


@pytest.fixture(scope="module")
def model():
    return ag.init_agent("pacman", seed=0)


def _fake_episode(scene, offsets, answer, difficulty=5):
    """Episode/trajectory pair with poses at known offsets from the target."""
    target = scene.objects[0]
    c = target.centroid()
    q = SimpleNamespace(target_object_id=target.id, answer=answer,
                        template="color")

    def pose_at(dist):
        return SimpleNamespace(position=np.array([c[0] + dist, 0.6, c[2]]))

    episode = SimpleNamespace(scene=scene, question=q,
                              start_pose=pose_at(offsets[0]),
                              difficulty=difficulty)
    traj = SimpleNamespace(poses=[pose_at(d) for d in offsets[1:]],
                           answer=answer, actions=[0] * (len(offsets) - 1))
    return episode, traj


def test_metrics_hand_worked_oracle(house):
    # episode 1: start 3.0 away, visits 2.5 / 1.0 / 1.5; answer correct
    e1, t1 = _fake_episode(house, [3.0, 2.5, 1.0, 1.5], answer=2)
    # episode 2: start 2.0 away, only pose is 2.2 away; answer wrong
    e2, t2 = _fake_episode(house, [2.0, 2.2], answer=5)
    t2.answer = 6
    rec = ev.metrics([t1, t2], [e1, e2])
    assert rec.accuracy == pytest.approx(0.5)
    assert rec.d_T == pytest.approx((1.5 + 2.2) / 2)
    assert rec.d_delta == pytest.approx(((3.0 - 1.5) + (2.0 - 2.2)) / 2)
    assert rec.d_min == pytest.approx((1.0 + 2.0) / 2)
    assert rec.episode_count == 2


def test_metrics_alignment_error(house):
    e1, t1 = _fake_episode(house, [1.0, 0.5], answer=0)
    with pytest.raises(ev.AlignmentError):
        ev.metrics([t1], [e1, e1])


def test_d_min_bound_property(model, episodes):
    trajs = ev._rollouts(model, episodes)
    for t, e in zip(trajs, episodes):
        correct, d_init, d_T, d_delta, d_min = ev.episode_metrics(t, e)
        assert d_min <= min(d_init, d_T) + 1e-12
        assert d_delta == pytest.approx(d_init - d_T)


def test_bucketed_split(house):
    e1, t1 = _fake_episode(house, [3.0, 1.0], answer=2, difficulty=5)
    e2, t2 = _fake_episode(house, [2.0, 2.0], answer=5, difficulty=10)
    t2.answer = 4
    clean = ev._bucketed([t1, t2], [e1, e2])
    assert set(clean) == {"all", "5", "10"}
    assert clean["5"].accuracy == 1.0 and clean["5"].episode_count == 1
    assert clean["10"].accuracy == 0.0
    assert clean["all"].accuracy == 0.5


def test_degenerate_attack_identity(model, episodes):
    """epsilon=0 and max_iters=0 must reproduce the clean rollout exactly."""
    ep = episodes[0]
    clean = ag.rollout(model, ep)
    for cfg in (atk.AttackConfig(epsilon=0.0, max_iters=3),
                atk.AttackConfig(max_iters=0)):
        pscene, log = atk.run_attack(ep, model, cfg)
        adv = ag.rollout(model, ep, scene=pscene)
        assert adv.actions == clean.actions
        assert adv.answer == clean.answer
        np.testing.assert_array_equal(adv.answer_dist, clean.answer_dist)
        for fa, fc in zip(adv.frames, clean.frames):
            np.testing.assert_array_equal(fa.rgb, fc.rgb)


def test_white_box_eval_shapes(model, episodes):
    cfg = atk.AttackConfig(max_iters=1, eot_views=2)
    clean, attacked = ev.white_box_eval(model, episodes, cfg)
    assert "all" in clean and "all" in attacked
    assert clean["all"].episode_count == len(episodes)
    for rec in clean.values():
        assert 0.0 <= rec.accuracy <= 1.0


def test_transfer_matrix_keys(model, episodes):
    cfg = atk.AttackConfig(max_iters=1, eot_views=2)
    targets = {"nav-react": ag.init_agent("nav-react", 0)}
    tm = ev.transfer_eval(model, targets, episodes, cfg)
    assert tm.sources == ["pacman"]
    assert tm.targets == ["nav-react"]
    assert ("pacman", "nav-react") in tm.attacked
    assert "nav-react" in tm.clean


def test_renderer_transfer_shapes(model, episodes):
    cfg = atk.AttackConfig(max_iters=1, eot_views=2)
    out = ev.renderer_transfer_eval(model, episodes, cfg)
    assert set(out) == {"clean", "attacked"}
    for cond in out.values():
        assert set(cond) == {"diff", "reference"}


def test_generalization_modes(model, episodes):
    cfg = atk.AttackConfig(max_iters=1, eot_views=2)
    perturbed, _ = ev.attack_episodes(model, episodes, cfg)
    q = ev.generalization_eval(model, episodes, mode="Q", perturbed=perturbed)
    t = ev.generalization_eval(model, episodes, mode="T", perturbed=perturbed)
    assert q.episode_count == t.episode_count == len(episodes)
    with pytest.raises(ValueError):
        ev.generalization_eval(model, episodes, mode="X", perturbed=perturbed)


def test_paired_question_same_target(episodes):
    ep = episodes[0]
    q = ev._paired_question(ep, seed=7)
    assert q.target_object_id == ep.question.target_object_id
    assert q.template != ep.question.template


def test_gaussian_noised_scene_properties(house):
    rng = np.random.default_rng(5)
    noised = ev.gaussian_noised_scene(house, rng)
    changed = 0
    for obj in noised.objects:
        base = house.object_by_id(obj.id).mesh.texture
        assert obj.mesh.texture.min() >= 0.0
        assert obj.mesh.texture.max() <= 1.0
        if not np.array_equal(obj.mesh.texture, base):
            changed += 1
    assert changed == len(noised.objects)
    # original untouched
    for obj in house.objects:
        assert obj.mesh.texture.dtype == np.float32


def test_ablation_validation(model, episodes):
    with pytest.raises(ValueError):
        ev.ablation(model, episodes, "Z", [1])
    with pytest.raises(ValueError):
        ev.ablation(model, episodes, "K", [0])
    with pytest.raises(ValueError):
        ev.ablation(model, episodes, "M", [7])


def test_write_results_roundtrip(tmp_path, model, episodes):
    trajs = ev._rollouts(model, episodes)
    rows = ev.episode_rows(trajs, episodes, "clean")
    rec = ev.metrics(trajs, episodes)
    csv_path, json_path = ev.write_results(
        str(tmp_path), "whitebox", "pacman", 0, rows, {"clean": rec})
    assert os.path.basename(csv_path) == "whitebox_pacman_0.csv"
    with open(json_path) as f:
        summary = json.load(f)
    assert summary["clean"]["accuracy"] == pytest.approx(rec.accuracy)
    with open(csv_path) as f:
        lines = f.read().strip().splitlines()
    assert len(lines) == len(episodes) + 1
    assert lines[0].startswith("episode,condition,difficulty,correct")

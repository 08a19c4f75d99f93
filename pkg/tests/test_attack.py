import numpy as np
import pytest

from eal import scenegraph as sg
from eal import diffrender as dr
from eal import agent as ag
from eal import attack as atk
from eal import tensornet as tn


def randomized_model(seed, variant="pacman"):
    """Agent with non-degenerate heads so P(y|H) depends on the input."""
    model = ag.init_agent(variant, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name in ("qa.w", "nav.out.w"):
        p = model.params[name]
        p.data = rng.standard_normal(p.data.shape) * 0.5
    return model


def random_frames(rng, n, res=32):
    return [rng.random((res, res, 3)) for _ in range(n)]


@pytest.fixture(scope="module")
def house_episode():
    scene = sg.generate_house(3)
    return scene, sg.generate_episode(scene, 42)


# ------------------------------------------------------------- adv_loss

def test_adv_loss_uniform_model():
    model = ag.init_agent("pacman", seed=0)  # zero heads -> uniform
    rng = np.random.default_rng(0)
    tensors = [ag.frame_tensor(f) for f in random_frames(rng, 3)]
    loss, _ = atk.adv_loss(model, tensors, [0, 1], y=4)
    assert abs(float(loss.data) - 1.0 / len(sg.ANSWERS)) < 1e-12


def test_adv_loss_label_out_of_range():
    model = ag.init_agent("pacman", seed=0)
    rng = np.random.default_rng(0)
    tensors = [ag.frame_tensor(f) for f in random_frames(rng, 1)]
    with pytest.raises(IndexError):
        atk.adv_loss(model, tensors, [0], y=len(sg.ANSWERS))


def test_adv_loss_pixel_gradient_matches_fd():
    model = randomized_model(7)
    rng = np.random.default_rng(7)
    frames = random_frames(rng, 2)
    tensors = [ag.frame_tensor(f, requires_grad=True) for f in frames]
    loss, _ = atk.adv_loss(model, tensors, [2, 5], y=3)
    tn.backward(loss)
    g = tensors[-1].grad.copy()
    # check a few random pixels by central differences
    h = 1e-4
    for _ in range(6):
        c = rng.integers(0, 3)
        yy = rng.integers(0, 32)
        xx = rng.integers(0, 32)
        fp = [f.copy() for f in frames]
        fm = [f.copy() for f in frames]
        fp[-1][yy, xx, c] += h
        fm[-1][yy, xx, c] -= h
        lp, _ = atk.adv_loss(model, [ag.frame_tensor(f) for f in fp], [2, 5], 3)
        lm, _ = atk.adv_loss(model, [ag.frame_tensor(f) for f in fm], [2, 5], 3)
        fd = (float(lp.data) - float(lm.data)) / (2 * h)
        assert abs(g[0, c, yy, xx] - fd) < 1e-5 * max(1.0, abs(fd))


# ------------------------------------------------------------- attention

def test_attention_invariants_random_triples():
    rng = np.random.default_rng(11)
    for trial in range(100):
        model = randomized_model(trial % 7)
        frames = random_frames(rng, int(rng.integers(1, 6)))
        y = int(rng.integers(0, len(sg.ANSWERS)))
        attn = atk.trajectory_attention(model, frames, [0, 3], y)
        assert np.all(attn.raw >= 0.0)
        assert abs(attn.normalized.sum()) < 1e-6
        assert attn.view_count == len(frames)


def test_attention_zero_gradient_case():
    model = ag.init_agent("pacman", seed=0)  # qa head all-zero -> P constant
    rng = np.random.default_rng(1)
    attn = atk.trajectory_attention(model, random_frames(rng, 4), [1], 2)
    assert np.allclose(attn.raw, 0.0)
    assert np.allclose(attn.normalized, 0.0)


def test_attention_matches_closed_form_linear_head():
    """Independent oracle: with the QA head linear over spatially pooled
    features, d P(y)/d Z^n_ij = (softmax jacobian @ W)[slot, n] / (u*v), so
    the raw weight reduces to a closed form in W and the probabilities."""
    model = randomized_model(5)
    rng = np.random.default_rng(5)
    frames = random_frames(rng, ag.N_HISTORY)
    tokens = [2, 4]
    y = 7
    attn = atk.trajectory_attention(model, frames, tokens, y)

    probs, z_list = ag.forward_qa(model, [ag.frame_tensor(f) for f in frames],
                                  tokens)
    p = probs.data[0]
    W = model.params["qa.w"].data  # (answers, N*2r + qemb)
    r = model.z_channels
    u = v = model.z_spatial
    d = model.qa_slot_dim
    # d P_y / d logits = p_y * (delta - p); d logits_a / d slot feats = W.
    # A slot feature is [global, center-crop, bottom-rows mean]; summing its
    # gradient over all u*v positions gives (w_mean + w_center + w_bottom)
    # per channel, because each crop also averages over its own area, and
    # the attention then divides by u*v.
    dp_dlogit = -p[y] * p
    dp_dlogit[y] += p[y]
    for t in range(ag.N_HISTORY):
        # only the attention-layer columns of the slot block touch Z;
        # the trailing first-block columns act upstream of it
        cols_mean = W[:, t * d:t * d + r]
        cols_center = W[:, t * d + r:t * d + 2 * r]
        cols_bottom = W[:, t * d + 2 * r:t * d + 3 * r]
        dp_dpool = dp_dlogit @ (cols_mean + cols_center + cols_bottom)  # (r,)
        expected = max(0.0, dp_dpool.sum() / (u * v))
        assert abs(attn.raw[t] - expected) < 1e-9


def test_attention_identical_frames_symmetric():
    # tie the per-slot blocks of the QA head so it is permutation symmetric
    model = randomized_model(3)
    W = model.params["qa.w"].data
    d = model.qa_slot_dim
    for t in range(1, ag.N_HISTORY):
        W[:, t * d:(t + 1) * d] = W[:, :d]
    rng = np.random.default_rng(3)
    f = rng.random((32, 32, 3))
    attn = atk.trajectory_attention(model, [f.copy() for _ in range(5)], [1], 2)
    assert np.allclose(attn.raw, attn.raw[0])
    assert np.allclose(attn.normalized, 0.0, atol=1e-6)


# ------------------------------------------------------------- selection

def test_select_views_examples():
    attn = atk.AttentionWeights(raw=np.zeros(3),
                                normalized=np.array([0.9, 0.1, 0.5]))
    sel = atk.select_views(attn, 2)
    assert sel.indices == [0, 2]
    assert np.allclose(sel.weights, [0.9, 0.5])


def test_select_views_tie_breaks_recent():
    attn = atk.AttentionWeights(raw=np.zeros(5), normalized=np.zeros(5))
    sel = atk.select_views(attn, 2)
    assert sel.indices == [4, 3]


def test_select_views_k_all_and_too_large():
    attn = atk.AttentionWeights(raw=np.zeros(3),
                                normalized=np.array([0.2, 0.8, 0.5]))
    assert atk.select_views(attn, 3).indices == [1, 2, 0]
    with pytest.raises(atk.AttackConfigError):
        atk.select_views(attn, 4)


def _fake_fb(ids):
    ids = np.asarray(ids, dtype=np.int32)
    return dr.Framebuffer(rgb=np.zeros(ids.shape + (3,)), object_id=ids,
                          depth=np.full(ids.shape, np.inf), pose=None,
                          sampling="bilinear")


def test_collect_context_union_and_cap():
    f0 = _fake_fb([[5, 5], [-1, -2]])
    f1 = _fake_fb([[2] * 2] * 2)      # 4 px of object 2
    f2 = _fake_fb([[7, -3], [-1, -1]])
    sel = atk.ViewSelection(indices=[1, 2], weights=np.array([1.0, 0.5]))
    ctx = atk.collect_context(sel, [f0, f1, f2])
    assert ctx == [2, 7]              # union of selected, pixel-count order
    assert atk.collect_context(sel, [f0, f1, f2], m_cap=1) == [2]


def test_collect_context_matches_brute_force(house_episode):
    scene, ep = house_episode
    model = randomized_model(1)
    traj = ag.rollout(model, ep, forced_actions=ep.shortest_path,
                      max_steps=len(ep.shortest_path))
    frames = traj.history.frames
    sel = atk.ViewSelection(indices=list(range(len(frames))),
                            weights=np.ones(len(frames)))
    ctx = set(atk.collect_context(sel, frames))
    brute = set()
    for fb in frames:
        for val in fb.object_id.ravel():
            if val >= 0:
                brute.add(int(val))
    assert ctx == brute


# ------------------------------------------------------------- perturb_step

def _clean_context(model, scene, ep, cfg, selection, context_ids):
    traj = ag.rollout(model, ep, scene=scene,
                      forced_actions=ep.shortest_path,
                      max_steps=len(ep.shortest_path))
    frames, poses = traj.history.frames, traj.history.poses
    res = (model.resolution, model.resolution)
    eposes = atk.eot_poses(scene, context_ids, selection, poses, cfg)
    eot = [(p, dr.render(scene, p, res)[0].rgb.copy()) for p in eposes]
    clean = {
        "tokens": ep.question.text_tokens, "y": ep.question.answer,
        "frames": frames, "eot": eot,
        "pooled": [], "flats": [],
    }
    for f in frames:
        h1, z = ag.encode_stages(model, ag.frame_tensor(f))
        clean["pooled"].append(ag.slot_features_np(h1.data, z.data))
        clean["flats"].append(z.data.reshape(1, -1))
    return clean, poses


def test_perturb_step_collapse_equivalence(house_episode):
    """K=1, M=1, one EOT view, lambda=0, unit view weight: the pipeline's
    update must equal direct gradient descent on P(y|H) w.r.t. the texture."""
    scene, ep = house_episode
    model = randomized_model(2)
    cfg = atk.AttackConfig(k_views=1, m_cap=1, lam=0.0, eot_views=1,
                           learning_rate=0.05)
    traj = ag.rollout(model, ep, scene=scene,
                      forced_actions=ep.shortest_path,
                      max_steps=len(ep.shortest_path))
    frames = traj.history.frames
    t_sel, oid = None, None
    for t in range(len(frames) - 1, -1, -1):
        visible = sorted(dr.extract_objects(frames[t]))
        if visible:
            t_sel, oid = t, visible[0]
            break
    assert t_sel is not None, "no object visible anywhere in the history"
    selection = atk.ViewSelection(indices=[t_sel], weights=np.array([1.0]))
    clean, poses = _clean_context(model, scene, ep, cfg, selection, [oid])

    base = scene.object_by_id(oid).mesh.texture
    pset = atk.PerturbationSet(deltas={oid: np.zeros(base.shape)}, epsilon=1.0)
    state = tn.SgdState(learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay)

    # independent arm: plain momentum-SGD on the rendered P(y|H)
    delta_ref = np.zeros(base.shape)
    vel = np.zeros(base.shape)
    res = (model.resolution, model.resolution)
    pose_c = clean["eot"][0][0]
    for _ in range(3):
        tex = np.clip(base.astype(np.float64) + delta_ref, 0, 1).astype(np.float32)
        fb, tape = dr.render(scene.copy_with_textures({oid: tex}), pose_c, res)
        x = ag.frame_tensor(fb, requires_grad=True)
        items = [tn.Tensor(p) for p in clean["pooled"]]
        items[t_sel] = ag.slot_features(*ag.encode_stages(model, x))
        probs = ag.qa_probs_from_slots(model, items, clean["tokens"])
        loss = tn.tsum(tn.slice_cols(probs, clean["y"], clean["y"] + 1))
        tn.backward(loss)
        g = dr.backward_texture(tape, np.transpose(x.grad[0], (1, 2, 0)))[oid]
        vel = cfg.momentum * vel + g + cfg.weight_decay * delta_ref
        delta_ref = delta_ref - cfg.learning_rate * vel

        atk.perturb_step(scene, [oid], selection, model, clean, cfg, state, pset)
        denom = max(np.abs(delta_ref).max(), 1e-12)
        assert np.abs(pset.deltas[oid] - delta_ref).max() / denom < 1e-6


def test_perturb_step_empty_context_errors(house_episode):
    scene, ep = house_episode
    model = randomized_model(2)
    cfg = atk.AttackConfig()
    state = tn.SgdState(learning_rate=0.01, momentum=0.9, weight_decay=1e-4)
    pset = atk.PerturbationSet(deltas={}, epsilon=1.0)
    with pytest.raises(atk.EmptyContextError):
        atk.perturb_step(scene, [], None, model, {}, cfg, state, pset)


def test_object_weights_indicator():
    f0 = _fake_fb([[5]])
    f1 = _fake_fb([[9]])
    sel = atk.ViewSelection(indices=[0, 1], weights=np.array([0.7, 0.2]))
    w = atk._object_weights(sel, [f0, f1], [5, 9])
    assert abs(w[5] - 0.7) < 1e-12 and abs(w[9] - 0.2) < 1e-12


# ------------------------------------------------------------- run_attack

def test_run_attack_degenerate_configs(house_episode):
    scene, ep = house_episode
    model = randomized_model(4)
    for cfg in (atk.AttackConfig(max_iters=0),
                atk.AttackConfig(epsilon=0.0, max_iters=3)):
        out, log = atk.run_attack(ep, model, cfg)
        for a, b in zip(scene.objects, out.objects):
            assert np.array_equal(a.mesh.texture, b.mesh.texture)
        assert not log.flipped


def test_run_attack_budget_and_locality(house_episode):
    scene, ep = house_episode
    model = randomized_model(4)
    cfg = atk.AttackConfig(max_iters=6, learning_rate=5.0, early_stop=False)
    out, log = atk.run_attack(ep, model, cfg)
    traj = ag.rollout(model, ep)
    res = (model.resolution, model.resolution)
    # the budget guarantee covers the selected views
    for t in log.selected_views:
        fbp, _ = dr.render(out, traj.history.poses[t], res)
        dev = np.max(np.abs(fbp.rgb - traj.history.frames[t].rgb))
        assert dev <= cfg.epsilon + 1e-6
    for rec in log.records:
        assert rec["linf"] <= cfg.epsilon + 1e-6
    ctx = set(log.context_ids)
    for obj in scene.objects:
        if obj.id not in ctx:
            assert np.array_equal(obj.mesh.texture,
                                  out.object_by_id(obj.id).mesh.texture)


def test_run_attack_invalid_config(house_episode):
    scene, ep = house_episode
    model = randomized_model(4)
    with pytest.raises(atk.AttackConfigError):
        atk.run_attack(ep, model, atk.AttackConfig(epsilon=2.0))
    with pytest.raises(atk.AttackConfigError):
        atk.run_attack(ep, model, atk.AttackConfig(k_views=0))


def test_attack_log_roundtrip(tmp_path, house_episode):
    scene, ep = house_episode
    model = randomized_model(4)
    _, log = atk.run_attack(ep, model, atk.AttackConfig(max_iters=2,
                                                        early_stop=False))
    p = tmp_path / "log.jsonl"
    log.save(p)
    import json
    lines = [json.loads(l) for l in p.read_text().splitlines()]
    assert len(lines) == len(log.records)
    assert all("linf" in rec for rec in lines)


def test_estimator_roundtrip(house_episode):
    scene, ep = house_episode
    model = randomized_model(4)
    est = atk.SpatiotemporalAttack(max_iters=1)
    assert est.get_params()["max_iters"] == 1
    with pytest.raises(RuntimeError):
        est.transform([ep])
    est.fit([ep], model=model)
    results = est.transform([ep])
    assert len(results) == 1
    out, log = results[0]
    assert isinstance(log, atk.AttackLog)

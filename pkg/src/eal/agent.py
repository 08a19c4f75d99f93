"""Embodied navigation + QA agents and their desk-scale imitation training.

An agent is a small CNN encoder (the last conv output is the designated
attention layer Z), a bag-of-tokens question encoder, a navigation
controller (GRU or reactive), and a linear QA head over per-frame pooled
features. Four variants share the code and differ in encoder width /
controller, giving the transfer-study axes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import tensornet as tn
from . import diffrender as dr
from . import scenegraph as sg
from .scenegraph import ACTIONS, ANSWERS, STOP, VOCAB

N_HISTORY = 5
QEMB_DIM = 16

VARIANTS = {
    # channels per conv block, nav hidden size, recurrent controller?
    "pacman": dict(channels=(8, 16, 16), hidden=64, recurrent=True),
    "nav-gru": dict(channels=(8, 16, 16), hidden=32, recurrent=True),
    "nav-react": dict(channels=(8, 16, 16), hidden=64, recurrent=False),
    "vis-alt": dict(channels=(16, 32, 32), hidden=64, recurrent=True),
}


class EmptyHistoryError(ValueError):
    """Raised when act/answer_prob is called with no observed frames."""


@dataclass
class History:
    """Last N egocentric views, oldest first."""

    frames: list = field(default_factory=list)   # Framebuffers
    poses: list = field(default_factory=list)
    cached_z: list = field(default_factory=list)  # attention-layer activations

    def push(self, frame, pose):
        self.frames.append(frame)
        self.poses.append(pose)
        if len(self.frames) > N_HISTORY:
            self.frames.pop(0)
            self.poses.pop(0)
        self.cached_z = []  # stale after a new observation

    def __len__(self):
        return len(self.frames)


@dataclass
class AgentModel:
    variant_tag: str
    resolution: int
    params: dict                 # name -> tn.Tensor(requires_grad=True)
    train_report: dict = None

    @property
    def spec(self):
        return VARIANTS[self.variant_tag]

    @property
    def z_channels(self):
        return self.spec["channels"][-1]

    @property
    def z_spatial(self):
        return self.resolution // 8

    @property
    def qa_slot_dim(self):
        # global-mean, center-crop-mean, and bottom-rows-mean pooling of both
        # the attention layer and the first conv block, per slot
        return 3 * (self.z_channels + self.spec["channels"][0])


def init_agent(variant_tag: str, seed: int, resolution: int = 32) -> AgentModel:
    """Fresh agent; imitation/QA output layers start at zero (uniform policy)."""
    if variant_tag not in VARIANTS:
        raise ValueError(f"unknown variant {variant_tag!r}; "
                         f"options: {sorted(VARIANTS)}")
    spec = VARIANTS[variant_tag]
    rng = np.random.default_rng((zlib.crc32(variant_tag.encode()), seed))
    c1, c2, c3 = spec["channels"]
    hid = spec["hidden"]
    zs = resolution // 8
    feat_dim = c3 * zs * zs
    nav_in = feat_dim + QEMB_DIM
    p = {}

    def he(shape, fan_in):
        return tn.Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                         requires_grad=True)

    p["conv1.w"] = he((c1, 3, 3, 3), 27)
    p["conv1.b"] = tn.Tensor(np.zeros(c1), requires_grad=True)
    p["conv2.w"] = he((c2, c1, 3, 3), c1 * 9)
    p["conv2.b"] = tn.Tensor(np.zeros(c2), requires_grad=True)
    p["conv3.w"] = he((c3, c2, 3, 3), c2 * 9)
    p["conv3.b"] = tn.Tensor(np.zeros(c3), requires_grad=True)
    p["qemb"] = tn.Tensor(rng.standard_normal((len(VOCAB), QEMB_DIM)) * 0.1,
                          requires_grad=True)
    if spec["recurrent"]:
        p["nav.w_ih"] = he((3 * hid, nav_in), nav_in)
        p["nav.w_hh"] = he((3 * hid, hid), hid)
        p["nav.b_ih"] = tn.Tensor(np.zeros(3 * hid), requires_grad=True)
        p["nav.b_hh"] = tn.Tensor(np.zeros(3 * hid), requires_grad=True)
    else:
        p["nav.w1"] = he((hid, nav_in), nav_in)
        p["nav.b1"] = tn.Tensor(np.zeros(hid), requires_grad=True)
    p["nav.out.w"] = tn.Tensor(np.zeros((len(ACTIONS), hid)), requires_grad=True)
    p["nav.out.b"] = tn.Tensor(np.zeros(len(ACTIONS)), requires_grad=True)
    qa_in = N_HISTORY * 3 * (c3 + c1) + QEMB_DIM
    p["qa.w"] = tn.Tensor(np.zeros((len(ANSWERS), qa_in)), requires_grad=True)
    p["qa.b"] = tn.Tensor(np.zeros(len(ANSWERS)), requires_grad=True)
    return AgentModel(variant_tag=variant_tag, resolution=resolution, params=p)


# ---------------------------------------------------------------- forward

def frame_tensor(fb_or_rgb, requires_grad: bool = False) -> tn.Tensor:
    """(H, W, 3) rgb -> (1, 3, H, W) centered input tensor.

    Centering keeps conv gradients from co-varying across all-positive
    pixels, which otherwise drives the first layer's biases off a cliff.
    Pass requires_grad=True to get pixel gradients (attack use)."""
    rgb = fb_or_rgb.rgb if hasattr(fb_or_rgb, "rgb") else fb_or_rgb
    return tn.Tensor(np.transpose(rgb, (2, 0, 1))[None] - 0.5,
                     requires_grad=requires_grad)


def encode_stages(model: AgentModel, x: tn.Tensor):
    """Conv trunk; returns (first block output, attention layer Z).

    The first block keeps small receptive fields (a few pixels), which the
    answer head needs for fine color/pattern evidence; Z carries the coarse
    scene summary the controller runs on."""
    p = model.params
    act = tn.leaky_relu  # a dead-proof trunk: inactive channels keep a path
    h1 = tn.maxpool2x2(act(tn.conv2d(x, p["conv1.w"], p["conv1.b"], pad=1)))
    h = tn.maxpool2x2(act(tn.conv2d(h1, p["conv2.w"], p["conv2.b"], pad=1)))
    z = tn.maxpool2x2(act(tn.conv2d(h, p["conv3.w"], p["conv3.b"], pad=1)))
    return h1, z


def encode_frames(model: AgentModel, x: tn.Tensor) -> tn.Tensor:
    """Conv trunk; output is the attention layer Z: (B, r, u, v)."""
    return encode_stages(model, x)[1]


def _center_bounds(spatial: int):
    lo = spatial // 4
    return lo, spatial - lo


def _pool_map(m: tn.Tensor) -> list:
    s = m.shape[2]
    lo, hi = _center_bounds(s)
    bot = s - max(1, s // 4)
    return [tn.tmean(m, axis=(2, 3)),
            tn.tmean(tn.crop2d(m, lo, hi, lo, hi), axis=(2, 3)),
            tn.tmean(tn.crop2d(m, bot, s, 0, m.shape[3]), axis=(2, 3))]


def slot_features(h1: tn.Tensor, z: tn.Tensor) -> tn.Tensor:
    """QA slot features per frame: global, center-crop, and bottom-rows
    spatial means of the attention layer and of the first conv block,
    concatenated -> (B, 3(r + c1)). The bottom-rows pool reads the floor in
    front of the agent, which carries the room identity even when nearby
    objects fill the rest of the frame."""
    return tn.concat(_pool_map(z) + _pool_map(h1), axis=1)


def slot_features_np(h1data: np.ndarray, zdata: np.ndarray) -> np.ndarray:
    cols = []
    for m in (zdata, h1data):
        s = m.shape[2]
        lo, hi = _center_bounds(s)
        bot = s - max(1, s // 4)
        cols += [m.mean(axis=(2, 3)), m[:, :, lo:hi, lo:hi].mean(axis=(2, 3)),
                 m[:, :, bot:, :].mean(axis=(2, 3))]
    return np.concatenate(cols, axis=1)


def question_embedding(model: AgentModel, tokens, batch: int = 1) -> tn.Tensor:
    onehot = np.zeros((batch, len(VOCAB)))
    for t in tokens:
        onehot[:, t] += 1.0 / len(tokens)
    return tn.matmul(tn.Tensor(onehot), model.params["qemb"])


def _qa_logits_from_pooled(model, pooled_slots, qemb):
    """pooled_slots: list of N (B, r) tensors, oldest first."""
    return tn.linear(tn.concat(pooled_slots + [qemb], axis=1),
                     model.params["qa.w"], model.params["qa.b"])


def _as_slot(item):
    if isinstance(item, tn.Tensor):
        return item
    arr = np.asarray(item, dtype=np.float64)
    return tn.Tensor(arr[None] if arr.ndim == 1 else arr)


def qa_probs_from_slots(model: AgentModel, pooled_items, tokens) -> tn.Tensor:
    """Answer distribution from per-frame pooled features (oldest first).

    Items may be constant arrays or live Tensors; gradients flow through
    whichever slots are Tensors. Pads short histories by repeating the
    oldest slot.
    """
    slots = _pad_slots([_as_slot(p) for p in pooled_items])
    qemb = question_embedding(model, tokens)
    return tn.softmax(_qa_logits_from_pooled(model, slots, qemb), axis=1)


def nav_probs_from_feats(model: AgentModel, feat_items, tokens) -> tn.Tensor:
    """Action distribution from per-frame flattened features (oldest first)."""
    if not feat_items:
        raise EmptyHistoryError("history is empty")
    p = model.params
    spec = model.spec
    qemb = question_embedding(model, tokens)
    if spec["recurrent"]:
        h = tn.Tensor(np.zeros((1, spec["hidden"])))
        for f in feat_items[-N_HISTORY:]:
            x = tn.concat([_as_slot(f), qemb], axis=1)
            h = tn.gru_cell(x, h, p["nav.w_ih"], p["nav.w_hh"],
                            p["nav.b_ih"], p["nav.b_hh"])
    else:
        x = tn.concat([_as_slot(feat_items[-1]), qemb], axis=1)
        h = tn.relu(tn.linear(x, p["nav.w1"], p["nav.b1"]))
    logits = tn.linear(h, p["nav.out.w"], p["nav.out.b"])
    return tn.softmax(logits, axis=1)


def _pad_slots(items):
    """Left-pad to N_HISTORY slots by repeating the oldest item."""
    if not items:
        raise EmptyHistoryError("history is empty")
    while len(items) < N_HISTORY:
        items = [items[0]] + items
    return items[-N_HISTORY:]


def forward_qa(model: AgentModel, frame_tensors, tokens):
    """Answer distribution from raw frame tensors; returns (probs, z_list).

    Gradients flow to the frame pixels and to each frame's Z separately.
    """
    if not frame_tensors:
        raise EmptyHistoryError("history is empty")
    stages = [encode_stages(model, x) for x in frame_tensors]
    z_list = [z for _, z in stages]
    pooled = [slot_features(h1, z) for h1, z in stages]
    return qa_probs_from_slots(model, pooled, tokens), z_list


def forward_nav(model: AgentModel, frame_tensors, tokens):
    """Action distribution from raw frame tensors; returns (probs, z_list)."""
    if not frame_tensors:
        raise EmptyHistoryError("history is empty")
    if model.spec["recurrent"]:
        z_list = [encode_frames(model, x) for x in frame_tensors[-N_HISTORY:]]
    else:
        z_list = [encode_frames(model, frame_tensors[-1])]
    feats = [tn.reshape(z, (1, -1)) for z in z_list]
    return nav_probs_from_feats(model, feats, tokens), z_list


def act(model: AgentModel, history: History, question) -> np.ndarray:
    """Probability distribution over actions for the current history."""
    if len(history) == 0:
        raise EmptyHistoryError("history is empty")
    tensors = [frame_tensor(f) for f in history.frames]
    probs, z_list = forward_nav(model, tensors, question.text_tokens)
    history.cached_z = [z.data[0] for z in z_list]
    return probs.data[0]


def answer_prob(model: AgentModel, history: History, question) -> np.ndarray:
    """Answer distribution; P(y|H) is entry y."""
    if len(history) == 0:
        raise EmptyHistoryError("history is empty")
    tensors = [frame_tensor(f) for f in history.frames]
    probs, z_list = forward_qa(model, tensors, question.text_tokens)
    history.cached_z = [z.data[0] for z in z_list]
    return probs.data[0]


# ---------------------------------------------------------------- rollout

@dataclass
class Trajectory:
    poses: list
    frames: list          # Framebuffers, one per visited pose
    actions: list
    history: History      # final (last N frames)
    answer: int
    answer_dist: np.ndarray
    episode: object = None


def rollout(model: AgentModel, episode, max_steps: int = 25,
            renderer: str = "diff", scene=None,
            forced_actions=None) -> Trajectory:
    """Greedy rollout; stops on the stop action or after max_steps."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    scene = scene if scene is not None else episode.scene
    res = (model.resolution, model.resolution)

    def render_at(pose):
        if renderer == "reference":
            return dr.reference_render(scene, pose, res)
        fb, _ = dr.render(scene, pose, res)
        return fb

    ix, iz = scene.cell_of(episode.start_pose.position[0],
                           episode.start_pose.position[2])
    heading = sg.heading_of_yaw(episode.start_pose.yaw)
    pose = sg.pose_for(scene, ix, iz, heading)
    history = History()
    poses, frames, actions = [], [], []
    flats, pooleds = [], []  # per-frame encoder features, computed once
    tokens = episode.question.text_tokens
    gz, gx = scene.walkable.shape
    for step in range(max_steps):
        fb = render_at(pose)
        poses.append(pose)
        frames.append(fb)
        history.push(fb, pose)
        h1, z = encode_stages(model, frame_tensor(fb))
        flats.append(z.data.reshape(1, -1))
        pooleds.append(slot_features_np(h1.data, z.data))
        if len(flats) > N_HISTORY:
            flats.pop(0)
            pooleds.pop(0)
        if forced_actions is not None and step < len(forced_actions):
            a = forced_actions[step]
        else:
            probs = nav_probs_from_feats(model, flats, tokens)
            a = int(np.argmax(probs.data[0]))
        actions.append(a)
        if a == STOP:
            break
        if a == sg.FORWARD:
            dx, dz = sg._HEADING_DXZ[heading]
            nx, nz = ix + dx, iz + dz
            if 0 <= nx < gx and 0 <= nz < gz and scene.walkable[nz, nx]:
                ix, iz = nx, nz
        elif a == sg.TURN_LEFT:
            heading = (heading - 1) % 4
        elif a == sg.TURN_RIGHT:
            heading = (heading + 1) % 4
        pose = sg.pose_for(scene, ix, iz, heading)
    dist = qa_probs_from_slots(model, pooleds, tokens).data[0]
    return Trajectory(poses=poses, frames=frames, actions=actions,
                      history=history, answer=int(np.argmax(dist)),
                      answer_dist=dist, episode=episode)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 1e-4
    resolution: int = 32
    qa_loss_weight: float = 3.0
    # fraction of the nav gradient allowed into the conv trunk; the QA loss
    # owns most of the trunk so fine visual evidence is not overwritten by
    # the (far more numerous) imitation samples
    nav_trunk_grad_scale: float = 0.1
    holdout_fraction: float = 0.1
    min_episodes: int = 1
    dagger_rounds: int = 2
    dagger_epochs: int = 40
    # loss weight of off-path recovery samples; they outnumber the on-path
    # demonstrations ~3:1 and are turn-heavy, so unweighted they flip the
    # action prior from "mostly forward" to "mostly turn"
    recovery_weight: float = 0.3
    # learning-rate multiplier for the controller head: the recurrent cell
    # needs a larger step size than the conv trunk tolerates
    nav_head_lr_scale: float = 3.0
    # frozen-trunk head refinement after the joint phase (cheap epochs)
    head_epochs: int = 80
    head_learning_rate: float = 0.05


class InsufficientDataError(ValueError):
    """Raised when the training corpus is smaller than cfg.min_episodes."""


def _episode_arrays(episodes, resolution, recovery_weight=0.3):
    """Render supervision frames once; returns flat arrays plus indices.

    Besides the demonstration steps, each on-path state contributes recovery
    samples: take one wrong action, land off the demonstration, and supervise
    with the optimal action there (computed from the BFS distance field).
    This counters the compounding error of pure behavior cloning.
    """
    all_frames = []
    samples = []   # (episode idx, frame indices window (N,), action, weight)
    qa_samples = []  # (episode idx, slot frame indices (N,), answer)
    ep_tokens = []
    fields = []    # per-episode BFS distance field, reused by aggregation
    res = (resolution, resolution)
    for ei, ep in enumerate(episodes):
        scene = ep.scene
        poses = sg.execute_actions(scene, ep.start_pose, ep.shortest_path)
        base = len(all_frames)
        for pose in poses:
            fb, _ = dr.render(scene, pose, res)
            all_frames.append(np.transpose(fb.rgb, (2, 0, 1)))
        t_count = len(poses)
        for t in range(t_count):
            window = [base + max(t - k, 0) for k in range(N_HISTORY - 1, -1, -1)]
            samples.append((ei, window, ep.shortest_path[t], 1.0))
        final_t = t_count - 1
        # QA on the arrival history plus slightly-early endpoints, so answers
        # stay robust when rollouts stop a step or two short of the goal
        for back in range(min(3, t_count)):
            slots = [base + max(final_t - back - k, 0)
                     for k in range(N_HISTORY - 1, -1, -1)]
            qa_samples.append((ei, slots, ep.question.answer))
        ep_tokens.append(ep.question.text_tokens)

        field = sg.distance_field(scene, ep.question.target_object_id)
        # vantage augmentation: a couple of independent near-goal viewpoints
        # (2-3 steps out) so the answer readout keys on what is visible near
        # the target instead of memorizing the demonstration's approach
        vantage = [st for st, dv in sorted(field.items()) if 1 <= dv <= 3]
        if vantage:
            stride = max(1, len(vantage) // 2)
            for st in vantage[::stride][:2]:
                fb, _ = dr.render(scene, sg.pose_for(scene, *st), res)
                fi = len(all_frames)
                all_frames.append(np.transpose(fb.rgb, (2, 0, 1)))
                qa_samples.append((ei, [fi] * N_HISTORY, ep.question.answer))
        gz, gx = scene.walkable.shape
        states = []
        ix, iz = scene.cell_of(ep.start_pose.position[0], ep.start_pose.position[2])
        h = sg.heading_of_yaw(ep.start_pose.yaw)
        states.append((ix, iz, h))
        for a in ep.shortest_path:
            if a == STOP:
                break
            if a == sg.FORWARD:
                dx, dz = sg._HEADING_DXZ[h]
                ix, iz = ix + dx, iz + dz
            elif a == sg.TURN_LEFT:
                h = (h - 1) % 4
            else:
                h = (h + 1) % 4
            states.append((ix, iz, h))
        for t, (sx, sz, sh) in enumerate(states):
            # one wrong step in every direction, plus the about-face heading
            # (reachable by two turns) so wall-facing states are covered too
            for a in (sg.FORWARD, sg.TURN_LEFT, sg.TURN_RIGHT, "about-face"):
                if a == ep.shortest_path[t]:
                    continue
                nx, nz, nh = sx, sz, sh
                if a == sg.FORWARD:
                    dx, dz = sg._HEADING_DXZ[sh]
                    if not (0 <= sx + dx < gx and 0 <= sz + dz < gz
                            and scene.walkable[sz + dz, sx + dx]):
                        continue  # blocked forward is a no-op
                    nx, nz = sx + dx, sz + dz
                elif a == sg.TURN_LEFT:
                    nh = (sh - 1) % 4
                elif a == sg.TURN_RIGHT:
                    nh = (sh + 1) % 4
                else:
                    nh = (sh + 2) % 4
                if (nx, nz, nh) not in field:
                    continue
                fb, _ = dr.render(scene, sg.pose_for(scene, nx, nz, nh), res)
                fi = len(all_frames)
                all_frames.append(np.transpose(fb.rgb, (2, 0, 1)))
                window = [base + max(t - k, 0)
                          for k in range(N_HISTORY - 2, -1, -1)] + [fi]
                label = sg.optimal_action(scene, (nx, nz, nh), field)
                samples.append((ei, window, label, recovery_weight))
        fields.append(field)
    return all_frames, samples, qa_samples, ep_tokens, fields


def _token_matrix(ep_tokens, ep_idx):
    onehot = np.zeros((len(ep_idx), len(VOCAB)))
    for row, ei in enumerate(ep_idx):
        toks = ep_tokens[ei]
        for t in toks:
            onehot[row, t] += 1.0 / len(toks)
    return onehot


def _batched_nav_loss(model, feats, qemb, windows, targets, weights=None):
    p = model.params
    spec = model.spec
    bsz = len(targets)
    if spec["recurrent"]:
        h = tn.Tensor(np.zeros((bsz, spec["hidden"])))
        for k in range(N_HISTORY):
            xk = tn.concat([tn.gather_rows(feats, windows[:, k]), qemb], axis=1)
            h = tn.gru_cell(xk, h, p["nav.w_ih"], p["nav.w_hh"],
                            p["nav.b_ih"], p["nav.b_hh"])
    else:
        x = tn.concat([tn.gather_rows(feats, windows[:, -1]), qemb], axis=1)
        h = tn.relu(tn.linear(x, p["nav.w1"], p["nav.b1"]))
    logits = tn.linear(h, p["nav.out.w"], p["nav.out.b"])
    return tn.cross_entropy(logits, targets, weights), logits


def _batched_qa_loss(model, pooled, qemb, slots, targets):
    cols = [tn.gather_rows(pooled, slots[:, k]) for k in range(N_HISTORY)]
    logits = tn.linear(tn.concat(cols + [qemb], axis=1),
                       model.params["qa.w"], model.params["qa.b"])
    return tn.cross_entropy(logits, targets), logits


def _run_epochs(model, cfg, rng, state, frames, nav_samples, qa_samples,
                ep_tokens, epochs):
    """Minibatch SGD over episode blocks.

    Batches group whole episodes so consecutive history windows share frames;
    each unique frame in a block is pushed through the encoder exactly once
    and reused by both the navigation and the QA loss.
    """
    params = model.params
    # constant input bank, centered like frame_tensor
    frames_x = tn.Tensor(np.asarray(frames) - 0.5)
    nav_windows = np.array([s[1] for s in nav_samples])
    nav_targets = np.array([s[2] for s in nav_samples])
    nav_weights = _nav_class_balance(nav_targets,
                                     np.array([s[3] for s in nav_samples]))
    nav_ep = np.array([s[0] for s in nav_samples])
    qa_slots = np.array([s[1] for s in qa_samples])
    qa_targets = np.array([s[2] for s in qa_samples])
    qa_ep = np.array([s[0] for s in qa_samples])

    n_eps = max(nav_ep.max(), qa_ep.max()) + 1
    nav_by_ep = [np.flatnonzero(nav_ep == e) for e in range(n_eps)]
    qa_by_ep = [np.flatnonzero(qa_ep == e) for e in range(n_eps)]

    for _epoch in range(epochs):
        order = rng.permutation(n_eps)
        lo = 0
        while lo < n_eps:
            block, count = [], 0
            while lo < n_eps and (count < cfg.batch_size or not block):
                block.append(order[lo])
                count += len(nav_by_ep[order[lo]])
                lo += 1
            sel = np.concatenate([nav_by_ep[e] for e in block])
            qsel = np.concatenate([qa_by_ep[e] for e in block])
            frame_idx = np.unique(np.concatenate(
                [nav_windows[sel].ravel(), qa_slots[qsel].ravel()]))
            local = {int(f): i for i, f in enumerate(frame_idx)}
            x = tn.gather_rows(frames_x, frame_idx)
            h1, z = encode_stages(model, x)
            # same forward values, but only a fraction of the nav gradient
            # reaches the trunk: alpha*z + (1-alpha)*constant(z)
            alpha = cfg.nav_trunk_grad_scale
            z_nav = tn.add(tn.mul(z, tn.Tensor(np.array(alpha))),
                           tn.Tensor((1.0 - alpha) * z.data))
            feats = tn.reshape(z_nav, (len(frame_idx), -1))
            win = np.vectorize(local.get)(nav_windows[sel])
            qemb = tn.matmul(tn.Tensor(_token_matrix(ep_tokens, nav_ep[sel])),
                             params["qemb"])
            loss, _ = _batched_nav_loss(model, feats, qemb, win,
                                        nav_targets[sel], nav_weights[sel])

            pooled = slot_features(h1, z)
            qslots_local = np.vectorize(local.get)(qa_slots[qsel])
            qqemb = tn.matmul(tn.Tensor(_token_matrix(ep_tokens, qa_ep[qsel])),
                              params["qemb"])
            qa_loss, _ = _batched_qa_loss(model, pooled, qqemb, qslots_local,
                                          qa_targets[qsel])

            total = tn.add(loss, tn.mul(qa_loss,
                                        tn.Tensor(np.array(cfg.qa_loss_weight))))
            for p in params.values():
                p.zero_grad()
            tn.backward(total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            for k in grads:
                if k.startswith("nav."):
                    grads[k] = grads[k] * cfg.nav_head_lr_scale
            tn.sgd_step(params, _clip_grads(grads), state)


def _clip_grads(grads, max_norm=5.0):
    """Global-norm gradient clipping; the recurrent controller explodes on
    long schedules without it."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return grads


def _encode_bank(model, frames, chunk=256):
    """Frozen-trunk features for a frame bank: (nav flats, QA slot pools)."""
    flats, pooled = [], []
    for lo in range(0, len(frames), chunk):
        x = tn.Tensor(np.asarray(frames[lo:lo + chunk]) - 0.5)
        h1, z = encode_stages(model, x)
        flats.append(z.data.reshape(len(z.data), -1))
        pooled.append(slot_features_np(h1.data, z.data))
    return np.concatenate(flats), np.concatenate(pooled)


def _nav_class_balance(targets, weights):
    """Square-root-tempered inverse-frequency multiplier per sample: a missed
    turn or stop strands a rollout against a wall, so the rare classes must
    not be traded away for the abundant forward label."""
    counts = np.bincount(targets, weights=weights, minlength=len(ACTIONS))
    bal = np.sqrt(weights.sum() / (len(ACTIONS) * np.maximum(counts, 1e-9)))
    return weights * bal[targets]


def _train_heads(model, cfg, rng, frames, nav_samples, qa_samples, ep_tokens,
                 epochs):
    """Head-only phase on a frozen trunk.

    The recurrent controller needs an order of magnitude more SGD steps than
    the conv trunk tolerates; with the trunk frozen the features are
    precomputed once and the heads train to convergence cheaply."""
    params = model.params
    flats, pooled = _encode_bank(model, frames)
    flats_t, pooled_t = tn.Tensor(flats), tn.Tensor(pooled)
    nav_windows = np.array([s[1] for s in nav_samples])
    nav_targets = np.array([s[2] for s in nav_samples])
    nav_weights = _nav_class_balance(nav_targets,
                                     np.array([s[3] for s in nav_samples]))
    nav_ep = np.array([s[0] for s in nav_samples])
    qa_slots = np.array([s[1] for s in qa_samples])
    qa_targets = np.array([s[2] for s in qa_samples])
    qa_ep = np.array([s[0] for s in qa_samples])
    head_params = {k: p for k, p in params.items()
                   if k.startswith(("nav.", "qa."))}
    state = tn.SgdState(learning_rate=cfg.head_learning_rate,
                        momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n_nav, n_qa = len(nav_samples), len(qa_samples)
    for _epoch in range(epochs):
        order = rng.permutation(n_nav)
        qorder = rng.permutation(n_qa)
        for lo in range(0, n_nav, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            qemb = tn.matmul(tn.Tensor(_token_matrix(ep_tokens, nav_ep[sel])),
                             params["qemb"])
            loss, _ = _batched_nav_loss(model, flats_t, qemb,
                                        nav_windows[sel], nav_targets[sel],
                                        nav_weights[sel])
            # QA minibatch proportional to the nav one
            qlo = (lo * n_qa) // max(1, n_nav)
            qsel = qorder[qlo:qlo + max(1, (cfg.batch_size * n_qa)
                                        // max(1, n_nav))]
            if len(qsel):
                qqemb = tn.matmul(
                    tn.Tensor(_token_matrix(ep_tokens, qa_ep[qsel])),
                    params["qemb"])
                qa_loss, _ = _batched_qa_loss(model, pooled_t, qqemb,
                                              qa_slots[qsel], qa_targets[qsel])
                loss = tn.add(loss, tn.mul(
                    qa_loss, tn.Tensor(np.array(cfg.qa_loss_weight))))
            for p in head_params.values():
                p.zero_grad()
            tn.backward(loss)
            grads = {k: (p.grad if p.grad is not None
                         else np.zeros_like(p.data))
                     for k, p in head_params.items()}
            tn.sgd_step(head_params, _clip_grads(grads), state)


def _aggregate_policy_states(model, episodes, fields, frames, nav_samples,
                             qa_samples, max_steps=25):
    """DAgger round: roll the current policy and label visited states with
    the BFS-optimal action. Keeps the dataset lean by aggregating only the
    policy's mistakes (plus all stop states, which are rare and critical).
    Rollouts that end near the target also contribute QA samples on the
    exact history the evaluation would see."""
    for ei, ep in enumerate(episodes):
        scene = ep.scene
        field = fields[ei]
        traj = rollout(model, ep, max_steps=max_steps)
        base = len(frames)
        for fb in traj.frames:
            frames.append(np.transpose(fb.rgb, (2, 0, 1)))
        for t, pose in enumerate(traj.poses):
            ix, iz = scene.cell_of(pose.position[0], pose.position[2])
            st = (ix, iz, sg.heading_of_yaw(pose.yaw))
            if st not in field:
                continue
            label = sg.optimal_action(scene, st, field)
            if label == traj.actions[t] and label != STOP:
                continue
            window = [base + max(t - k, 0) for k in range(N_HISTORY - 1, -1, -1)]
            nav_samples.append((ei, window, label, 1.0))
        target = scene.object_by_id(ep.question.target_object_id)
        c = target.centroid()
        p = traj.poses[-1].position
        if np.hypot(p[0] - c[0], p[2] - c[2]) <= 1.0:
            final_t = len(traj.frames) - 1
            slots = [base + max(final_t - k, 0)
                     for k in range(N_HISTORY - 1, -1, -1)]
            qa_samples.append((ei, slots, ep.question.answer))


def train_agent(episodes, variant_tag: str, train_cfg: TrainConfig = None,
                seed: int = 0) -> AgentModel:
    """Imitation + recovery supervision + DAgger rounds, with supervised QA
    on final histories. Deterministic for a fixed seed; attaches a held-out
    report to the model.
    """
    cfg = train_cfg or TrainConfig()
    if len(episodes) < cfg.min_episodes:
        raise InsufficientDataError(
            f"need >= {cfg.min_episodes} episodes, got {len(episodes)}")
    model = init_agent(variant_tag, seed=seed, resolution=cfg.resolution)
    rng = np.random.default_rng((seed, 17))

    n_hold = int(len(episodes) * cfg.holdout_fraction)
    perm = rng.permutation(len(episodes))
    hold_idx = set(perm[:n_hold].tolist())
    train_eps = [episodes[i] for i in range(len(episodes)) if i not in hold_idx]
    hold_eps = [episodes[i] for i in sorted(hold_idx)]
    if not train_eps:
        train_eps = list(episodes)

    frames, nav_samples, qa_samples, ep_tokens, fields = _episode_arrays(
        train_eps, cfg.resolution, cfg.recovery_weight)
    state = tn.SgdState(learning_rate=cfg.learning_rate,
                        momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    _run_epochs(model, cfg, rng, state, frames, nav_samples, qa_samples,
                ep_tokens, cfg.epochs)
    _train_heads(model, cfg, rng, frames, nav_samples, qa_samples, ep_tokens,
                 cfg.head_epochs)
    for _round in range(cfg.dagger_rounds):
        _aggregate_policy_states(model, train_eps, fields, frames, nav_samples,
                                 qa_samples)
        _train_heads(model, cfg, rng, frames, nav_samples, qa_samples,
                     ep_tokens, cfg.dagger_epochs)

    model.train_report = evaluate_agent(model, hold_eps or train_eps[:10])
    return model


def evaluate_agent(model: AgentModel, episodes, max_steps: int = 25,
                   renderer: str = "diff"):
    """Held-out QA accuracy and navigation success (reaching the goal set)."""
    qa_hits, nav_hits = 0, 0
    for ep in episodes:
        traj = rollout(model, ep, max_steps=max_steps, renderer=renderer)
        if traj.answer == ep.question.answer:
            qa_hits += 1
        target = ep.scene.object_by_id(ep.question.target_object_id)
        c = target.centroid()
        p = traj.poses[-1].position
        if np.hypot(p[0] - c[0], p[2] - c[2]) <= 0.75:
            nav_hits += 1
    n = max(1, len(episodes))
    return {"qa_accuracy": qa_hits / n, "nav_success": nav_hits / n,
            "episodes": len(episodes)}


# ---------------------------------------------------------------- persistence

def save_agent(path, model: AgentModel):
    tag = f"{model.variant_tag}|res={model.resolution}"
    tn.save_weights(path, model.params, header_tag=tag)


def load_agent(path) -> AgentModel:
    tag, arrays = tn.load_weights(path)
    variant, _, res = tag.partition("|res=")
    model = init_agent(variant, seed=0, resolution=int(res))
    for name, arr in arrays.items():
        if model.params[name].data.shape != arr.shape:
            raise tn.WeightsFormatError(
                f"{path}: shape mismatch for {name}: "
                f"{arr.shape} vs {model.params[name].data.shape}")
        model.params[name].data = arr
    return model


# ---------------------------------------------------------------- estimator

class AgentTrainer(BaseEstimator):
    """sklearn-style wrapper: fit(episodes) trains, predict(episodes) answers."""

    def __init__(self, variant_tag="pacman", epochs=30, batch_size=64,
                 learning_rate=0.08, resolution=32, seed=0):
        self.variant_tag = variant_tag
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.resolution = resolution
        self.seed = seed

    def fit(self, episodes, y=None):
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate,
                          resolution=self.resolution)
        self.model_ = train_agent(episodes, self.variant_tag, cfg,
                                  seed=self.seed)
        self.report_ = self.model_.train_report
        return self

    def predict(self, episodes):
        if not hasattr(self, "model_"):
            raise RuntimeError("AgentTrainer is not fitted")
        return np.array([rollout(self.model_, ep).answer for ep in episodes])

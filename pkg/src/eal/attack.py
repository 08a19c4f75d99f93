"""Spatiotemporal texture attack on embodied navigation/QA agents.

Pipeline: run a clean rollout, score each historical view by trajectory
attention (gradient of P(y|H) pooled over the attention layer), select the
top-K views, collect the contextual objects visible in them, and optimize
texture deltas on those objects with SGD under an expectation over nearby
viewpoints (EOT), a perceptual penalty, and a rendered L-infinity budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import tensornet as tn
from . import diffrender as dr
from . import scenegraph as sg
from . import agent as ag
from .scenegraph import STOP

EPS_NORM = 1e-5

QA_UNTARGETED = "qa-untargeted"
NAV_STOP = "nav-stop"


class AttackConfigError(ValueError):
    """Raised for out-of-range attack configuration values."""


class EmptyContextError(ValueError):
    """Raised when no contextual object is visible in the selected views."""


class MissingActivationError(ValueError):
    """Raised when attention is requested without cached activations."""


@dataclass
class AttackConfig:
    k_views: int = 3
    m_cap: int = None              # None: all contextual objects
    lam: float = 1.0               # perceptual weight
    epsilon: float = 32.0 / 255.0  # rendered L-inf budget, color units
    max_iters: int = 60
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eot_views: int = 5
    eot_azimuth_range: tuple = (0.0, np.pi)
    eot_distance: float = 1.0
    target: str = QA_UNTARGETED
    early_stop: bool = True

    def validate(self):
        if self.k_views < 1:
            raise AttackConfigError(f"k_views must be >= 1, got {self.k_views}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.max_iters < 0:
            raise AttackConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.eot_views < 1:
            raise AttackConfigError(f"eot_views must be >= 1, got {self.eot_views}")
        if self.target not in (QA_UNTARGETED, NAV_STOP):
            raise AttackConfigError(f"unknown target {self.target!r}")
        if self.m_cap is not None and self.m_cap < 1:
            raise AttackConfigError(f"m_cap must be >= 1, got {self.m_cap}")


@dataclass
class AttentionWeights:
    raw: np.ndarray          # (N,) non-negative
    normalized: np.ndarray   # (N,) zero-mean

    @property
    def view_count(self):
        return len(self.raw)


@dataclass
class ViewSelection:
    indices: list     # view positions in the history, descending weight
    weights: np.ndarray  # normalized weights of those views


@dataclass
class PerturbationSet:
    deltas: dict              # object id -> (TH, TW, 3) float64 delta
    epsilon: float
    applied: bool = False

    def apply(self, scene: sg.Scene) -> sg.Scene:
        textures = {}
        for oid, delta in self.deltas.items():
            base = scene.object_by_id(oid).mesh.texture.astype(np.float64)
            textures[oid] = np.clip(base + delta, 0.0, 1.0).astype(np.float32)
        self.applied = True
        return scene.copy_with_textures(textures)

    def scale(self, factor: float):
        for oid in self.deltas:
            self.deltas[oid] = self.deltas[oid] * factor


@dataclass
class AttackLog:
    records: list = field(default_factory=list)
    flipped: bool = False
    iterations: int = 0
    context_ids: list = field(default_factory=list)
    selected_views: list = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def save(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- attention

def _history_probs(model, frame_tensors, tokens, target):
    """Forward pass returning (probs tensor, per-frame Z list)."""
    if target == NAV_STOP:
        return ag.forward_nav(model, frame_tensors, tokens)
    return ag.forward_qa(model, frame_tensors, tokens)


def adv_loss(model, frame_tensors, tokens, y, target=QA_UNTARGETED):
    """Differentiable L_adv: P(y|H) for QA; -P(stop|H) for the nav target."""
    probs, z_list = _history_probs(model, frame_tensors, tokens, target)
    if target == NAV_STOP:
        picked = tn.slice_cols(probs, STOP, STOP + 1)
        loss = tn.mul(tn.tsum(picked), tn.Tensor(np.array(-1.0)))
    else:
        if not 0 <= y < probs.data.shape[1]:
            raise IndexError(f"label {y} outside [0, {probs.data.shape[1]})")
        loss = tn.tsum(tn.slice_cols(probs, y, y + 1))
    return loss, z_list


def trajectory_attention(model, frames, tokens, y,
                         target=QA_UNTARGETED) -> AttentionWeights:
    """Per-view importance weights from the pooled gradient of P(y|H).

    frames: list of Framebuffers (or rgb arrays), oldest first; the returned
    weights align with this list.
    """
    if not frames:
        raise MissingActivationError("no frames to attribute")
    tensors = [ag.frame_tensor(f) for f in frames]
    probs, z_list = _history_probs(model, tensors, tokens, target)
    if target == NAV_STOP:
        score = tn.tsum(tn.slice_cols(probs, STOP, STOP + 1))
    else:
        score = tn.tsum(tn.slice_cols(probs, y, y + 1))
    tn.backward(score)
    raw = np.zeros(len(frames))
    # reactive controllers only encode the newest frame; earlier views get 0
    offset = len(frames) - len(z_list)
    for i, z in enumerate(z_list):
        if z.grad is None:
            raise MissingActivationError("attention layer has no gradient")
        g = z.grad[0]                       # (r, u, v)
        raw[offset + i] = max(0.0, g.mean(axis=(1, 2)).sum())
    mu = raw.mean()
    var = raw.var()
    normalized = (raw - mu) / (var + EPS_NORM)
    return AttentionWeights(raw=raw, normalized=normalized)


def select_views(attn: AttentionWeights, k: int) -> ViewSelection:
    """Top-k views by normalized weight; ties favor the more recent view."""
    n = attn.view_count
    if k > n:
        raise AttackConfigError(f"k={k} exceeds view count {n}")
    order = sorted(range(n), key=lambda t: (-attn.normalized[t], -t))
    idx = order[:k]
    return ViewSelection(indices=idx, weights=attn.normalized[idx])


def collect_context(selection: ViewSelection, frames, m_cap=None) -> list:
    """Contextual object ids visible in the selected views.

    Returns ids ordered by descending total visible-pixel count (ties by
    ascending id), truncated to m_cap. Structural surfaces are excluded.
    """
    counts = {}
    for t in selection.indices:
        for oid, c in dr.visible_pixel_counts(frames[t]).items():
            counts[oid] = counts.get(oid, 0) + c
    ordered = sorted(counts, key=lambda o: (-counts[o], o))
    if m_cap is not None:
        ordered = ordered[:m_cap]
    return ordered


# ---------------------------------------------------------------- EOT poses

def _context_centroid(scene, context_ids):
    return np.mean([scene.object_by_id(o).centroid() for o in context_ids],
                   axis=0)


def eot_poses(scene, context_ids, selection, window_poses, cfg) -> list:
    """Deterministic orbit of eot_views poses around the context centroid.

    Azimuths form a stratified grid spanning eot_azimuth_range, centered on
    the bearing from the centroid to the mean selected-view position; every
    pose looks at the centroid from eot_distance away at eye height.
    """
    c = _context_centroid(scene, context_ids)
    mean_pos = np.mean([window_poses[t].position for t in selection.indices],
                       axis=0)
    base = np.arctan2(mean_pos[0] - c[0], mean_pos[2] - c[2])
    lo, hi = cfg.eot_azimuth_range
    span = hi - lo
    if cfg.eot_views == 1:
        offsets = np.array([0.0])
    else:
        offsets = np.linspace(-span / 2.0, span / 2.0, cfg.eot_views)
    poses = []
    eye = window_poses[0].position[1]
    fov = window_poses[0].fov
    for off in offsets:
        az = base + off
        pos = np.array([c[0] + cfg.eot_distance * np.sin(az), eye,
                        c[2] + cfg.eot_distance * np.cos(az)])
        look = c - pos
        dist = np.linalg.norm(look)
        pitch = float(np.arcsin(np.clip(look[1] / max(dist, 1e-9), -1, 1)))
        poses.append(sg.CameraPose(position=pos, yaw=float(az + np.pi),
                                   pitch=pitch, fov=fov))
    return poses


# ---------------------------------------------------------------- optimization

def _object_weights(selection: ViewSelection, frames, context_ids) -> dict:
    """Eq-style indicator weighting: sum of selected-view weights over the
    views where each object is visible."""
    weights = {oid: 0.0 for oid in context_ids}
    for k, t in enumerate(selection.indices):
        visible = dr.extract_objects(frames[t])
        for oid in context_ids:
            if oid in visible:
                weights[oid] += float(selection.weights[k])
    return weights


def _slot_items(clean_pooled, live_slot_tensor, selection, model):
    """History slots for L_adv: clean pooled features with the selected
    positions replaced by the live (perturbed-render) slot."""
    items = list(clean_pooled)
    h1, z = live_slot_tensor
    live = ag.slot_features(h1, z)
    for t in selection.indices:
        items[t] = live
    return items


def perturb_step(scene, context_ids, selection, model, clean, cfg, sgd_state,
                 pset: PerturbationSet):
    """One EOT-averaged SGD update of the texture deltas.

    clean: dict with keys tokens, y, pooled (per-slot clean features),
    eot (list of (pose, clean rgb)), and frames (clean window Framebuffers).
    Returns (mean L_adv, mean L_per).
    """
    if not context_ids:
        raise EmptyContextError("context object set is empty")
    perturbed = pset.apply(scene)
    obj_w = _object_weights(selection, clean["frames"], context_ids)
    res = (model.resolution, model.resolution)

    grad_acc = {oid: np.zeros_like(pset.deltas[oid]) for oid in context_ids}
    adv_total, per_total = 0.0, 0.0
    for pose, clean_rgb in clean["eot"]:
        fb, tape = dr.render(perturbed, pose, res)
        x = ag.frame_tensor(fb, requires_grad=True)
        h1, z = ag.encode_stages(model, x)
        if cfg.target == NAV_STOP:
            feats = list(clean["flats"])
            live = tn.reshape(z, (1, -1))
            for t in selection.indices:
                feats[t] = live
            probs = ag.nav_probs_from_feats(model, feats, clean["tokens"])
            loss = tn.mul(tn.tsum(tn.slice_cols(probs, STOP, STOP + 1)),
                          tn.Tensor(np.array(-1.0)))
        else:
            items = _slot_items(clean["pooled"], (h1, z), selection, model)
            probs = ag.qa_probs_from_slots(model, items, clean["tokens"])
            loss = tn.tsum(tn.slice_cols(probs, clean["y"], clean["y"] + 1))
        tn.backward(loss)
        d_rgb = np.transpose(x.grad[0], (1, 2, 0))
        adv_total += float(loss.data)

        diff = fb.rgb - clean_rgb
        l_per = float(np.mean(diff * diff))
        per_total += l_per
        d_rgb = d_rgb + cfg.lam * 2.0 * diff / diff.size

        tex_grads = dr.backward_texture(tape, d_rgb)
        for oid in context_ids:
            if oid in tex_grads:
                grad_acc[oid] += tex_grads[oid]

    n = len(clean["eot"])
    params = {oid: tn.Tensor(pset.deltas[oid], requires_grad=True)
              for oid in context_ids}
    grads = {oid: obj_w[oid] * grad_acc[oid] / n for oid in context_ids}
    tn.sgd_step(params, grads, sgd_state)
    for oid in context_ids:
        pset.deltas[oid] = params[oid].data
    return adv_total / n, per_total / n


def _project_budget(scene, pset, window_poses, selection, clean_frames, cfg,
                    resolution, max_rounds=8):
    """Project deltas into the budget.

    First clip each texel delta to [-eps, eps]: bilinear sampling renders a
    convex combination of texels, so this alone bounds *every* view's pixel
    deviation by eps. Then rescale until the selected views' rendered L-inf
    deviation fits; clamping makes a single rescale inexact, so iterate."""
    for oid in pset.deltas:
        np.clip(pset.deltas[oid], -cfg.epsilon, cfg.epsilon,
                out=pset.deltas[oid])
    res = (resolution, resolution)
    for _ in range(max_rounds):
        dev = 0.0
        for t in selection.indices:
            fb, _ = dr.render(pset.apply(scene), window_poses[t], res)
            dev = max(dev, float(np.max(np.abs(fb.rgb - clean_frames[t].rgb))))
        if dev <= cfg.epsilon + 1e-9:
            return dev
        if dev == 0.0:
            return 0.0
        pset.scale(cfg.epsilon / dev if cfg.epsilon > 0 else 0.0)
    return dev


def _flip_state(model, scene, window_poses, tokens, y, cfg, resolution):
    """Evaluate the agent on the fully re-rendered perturbed window; returns
    (flipped, prediction)."""
    res = (resolution, resolution)
    frames = [dr.render(scene, p, res)[0] for p in window_poses]
    tensors = [ag.frame_tensor(f) for f in frames]
    if cfg.target == NAV_STOP:
        probs, _ = ag.forward_nav(model, tensors, tokens)
        pred = int(np.argmax(probs.data[0]))
        return pred == STOP, pred
    probs, _ = ag.forward_qa(model, tensors, tokens)
    pred = int(np.argmax(probs.data[0]))
    return pred != y, pred


def run_attack(episode, model, cfg: AttackConfig = None, scene=None):
    """Full attack on one episode; returns (perturbed Scene, AttackLog)."""
    cfg = cfg or AttackConfig()
    cfg.validate()
    scene = scene if scene is not None else episode.scene
    log = AttackLog()
    traj = ag.rollout(model, episode, scene=scene)
    window_frames = traj.history.frames
    window_poses = traj.history.poses
    tokens = episode.question.text_tokens
    y = episode.question.answer if cfg.target == QA_UNTARGETED else STOP

    attn = trajectory_attention(model, window_frames, tokens,
                                episode.question.answer, target=cfg.target)
    k = min(cfg.k_views, attn.view_count)
    selection = select_views(attn, k)
    context_ids = collect_context(selection, window_frames, cfg.m_cap)
    log.selected_views = list(selection.indices)
    log.context_ids = list(context_ids)
    if not context_ids or cfg.max_iters == 0 or cfg.epsilon == 0.0:
        log.append(iter=0, l_adv=None, l_per=None, linf=0.0, flipped=False,
                   note="degenerate" if context_ids else "no-context")
        return scene, log

    pset = PerturbationSet(
        deltas={oid: np.zeros_like(
            scene.object_by_id(oid).mesh.texture, dtype=np.float64)
            for oid in context_ids},
        epsilon=cfg.epsilon)
    sgd_state = tn.SgdState(learning_rate=cfg.learning_rate,
                            momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay)

    res = (model.resolution, model.resolution)
    poses = eot_poses(scene, context_ids, selection, window_poses, cfg)
    eot = [(p, dr.render(scene, p, res)[0].rgb.copy()) for p in poses]
    clean = {
        "tokens": tokens, "y": y, "frames": window_frames, "eot": eot,
        "pooled": [], "flats": [],
    }
    for f in window_frames:
        h1, z = ag.encode_stages(model, ag.frame_tensor(f))
        clean["pooled"].append(ag.slot_features_np(h1.data, z.data))
        clean["flats"].append(z.data.reshape(1, -1))

    for it in range(cfg.max_iters):
        l_adv, l_per = perturb_step(scene, context_ids, selection, model,
                                    clean, cfg, sgd_state, pset)
        linf = _project_budget(scene, pset, window_poses, selection,
                               window_frames, cfg, model.resolution)
        perturbed = pset.apply(scene)
        flipped, pred = _flip_state(model, perturbed, window_poses, tokens,
                                    episode.question.answer, cfg,
                                    model.resolution)
        log.append(iter=it, l_adv=l_adv, l_per=l_per, linf=linf,
                   flipped=bool(flipped), pred=pred,
                   delta_norms={str(o): float(np.abs(d).max())
                                for o, d in pset.deltas.items()})
        log.iterations = it + 1
        if flipped and cfg.early_stop:
            log.flipped = True
            break
    return pset.apply(scene), log


# ---------------------------------------------------------------- estimator

class SpatiotemporalAttack(BaseEstimator):
    """sklearn-style wrapper: fit stores the frozen victim model; transform
    maps episodes to (perturbed scene, log) pairs."""

    def __init__(self, k_views=3, m_cap=None, lam=1.0, epsilon=32.0 / 255.0,
                 max_iters=60, learning_rate=0.01, eot_views=5,
                 target=QA_UNTARGETED):
        self.k_views = k_views
        self.m_cap = m_cap
        self.lam = lam
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.learning_rate = learning_rate
        self.eot_views = eot_views
        self.target = target

    def _config(self):
        return AttackConfig(k_views=self.k_views, m_cap=self.m_cap,
                            lam=self.lam, epsilon=self.epsilon,
                            max_iters=self.max_iters,
                            learning_rate=self.learning_rate,
                            eot_views=self.eot_views, target=self.target)

    def fit(self, episodes, model=None):
        if model is None:
            raise ValueError("fit requires the victim model")
        self._config().validate()
        self.model_ = model
        return self

    def transform(self, episodes):
        if not hasattr(self, "model_"):
            raise RuntimeError("SpatiotemporalAttack is not fitted")
        return [run_attack(ep, self.model_, self._config()) for ep in episodes]

"""Experiment protocol: metrics, white-box / transfer / renderer-transfer
evaluation, Q/T generalization, adversarial training, and K/M ablations.

Every evaluation is full-process: the agent is re-rolled from the episode's
start inside the (possibly perturbed) scene, and QA is answered from the
history that rollout produced.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import scenegraph as sg
from . import agent as ag
from . import attack as atk

GAUSSIAN_SIGMA = 0.38
NAV_SUCCESS_RADIUS = 0.75


class AlignmentError(ValueError):
    """Raised when trajectories and episodes do not pair up 1:1."""


class NoPairedQuestionError(ValueError):
    """Raised in Q-mode generalization when no alternate question exists."""


@dataclass
class MetricRecord:
    accuracy: float
    d_T: float
    d_delta: float
    d_min: float
    episode_count: int
    difficulty: str = "all"

    def as_dict(self):
        return asdict(self)


@dataclass
class TransferMatrix:
    sources: list
    targets: list
    clean: dict      # target tag -> MetricRecord
    attacked: dict   # (source tag, target tag) -> MetricRecord


def _target_distance(episode, position):
    target = episode.scene.object_by_id(episode.question.target_object_id)
    c = target.centroid()
    return float(np.hypot(position[0] - c[0], position[2] - c[2]))


def episode_metrics(trajectory, episode):
    """Per-episode scalars: (correct, d_init, d_T, d_delta, d_min)."""
    d_init = _target_distance(episode, episode.start_pose.position)
    ds = [_target_distance(episode, p.position) for p in trajectory.poses]
    d_T = ds[-1]
    d_min = min([d_init] + ds)
    correct = int(trajectory.answer == episode.question.answer)
    return correct, d_init, d_T, d_init - d_T, d_min


def metrics(trajectories, episodes, difficulty="all") -> MetricRecord:
    """Aggregate MetricRecord; d_delta is averaged per episode (d_init - d_T)."""
    if len(trajectories) != len(episodes):
        raise AlignmentError(
            f"{len(trajectories)} trajectories vs {len(episodes)} episodes")
    rows = [episode_metrics(t, e) for t, e in zip(trajectories, episodes)]
    arr = np.array(rows, dtype=np.float64)
    return MetricRecord(accuracy=float(arr[:, 0].mean()),
                        d_T=float(arr[:, 2].mean()),
                        d_delta=float(arr[:, 3].mean()),
                        d_min=float(arr[:, 4].mean()),
                        episode_count=len(episodes),
                        difficulty=str(difficulty))


def _bucketed(trajectories, episodes):
    out = {"all": metrics(trajectories, episodes)}
    buckets = sorted({e.difficulty for e in episodes})
    for b in buckets:
        pairs = [(t, e) for t, e in zip(trajectories, episodes)
                 if e.difficulty == b]
        out[str(b)] = metrics([p[0] for p in pairs], [p[1] for p in pairs],
                              difficulty=b)
    return out


def _rollouts(model, episodes, scenes=None, renderer="diff", max_steps=25):
    scenes = scenes or [None] * len(episodes)
    return [ag.rollout(model, ep, scene=sc, renderer=renderer,
                       max_steps=max_steps)
            for ep, sc in zip(episodes, scenes)]


# ----------------------------------------------------------------- white box

def attack_episodes(model, episodes, config):
    """Run the attack per episode; returns (perturbed scenes, logs)."""
    scenes, logs = [], []
    for ep in episodes:
        pscene, log = atk.run_attack(ep, model, config)
        scenes.append(pscene)
        logs.append(log)
    return scenes, logs


def white_box_eval(model, episodes, attack_config=None, perturbed=None):
    """(clean, attacked) bucketed MetricRecords; optional precomputed scenes."""
    clean_tr = _rollouts(model, episodes)
    if perturbed is None:
        perturbed, _ = attack_episodes(model, episodes, attack_config)
    attacked_tr = _rollouts(model, episodes, scenes=perturbed)
    return _bucketed(clean_tr, episodes), _bucketed(attacked_tr, episodes)


# ----------------------------------------------------------------- transfer

def transfer_eval(source_model, target_models: dict, episodes,
                  config=None, perturbed=None) -> TransferMatrix:
    """Perturbations generated against the source, evaluated by each target."""
    if perturbed is None:
        perturbed, _ = attack_episodes(source_model, episodes, config)
    clean, attacked = {}, {}
    src = source_model.variant_tag
    for tag, model in target_models.items():
        clean[tag] = metrics(_rollouts(model, episodes), episodes)
        attacked[(src, tag)] = metrics(
            _rollouts(model, episodes, scenes=perturbed), episodes)
    return TransferMatrix(sources=[src], targets=list(target_models),
                          clean=clean, attacked=attacked)


def renderer_transfer_eval(model, episodes, config=None, perturbed=None):
    """Same perturbed scenes rolled under both renderers.

    Returns {"clean": {...}, "attacked": {...}} keyed by renderer name.
    """
    if perturbed is None:
        perturbed, _ = attack_episodes(model, episodes, config)
    out = {"clean": {}, "attacked": {}}
    for renderer in ("diff", "reference"):
        out["clean"][renderer] = metrics(
            _rollouts(model, episodes, renderer=renderer), episodes)
        out["attacked"][renderer] = metrics(
            _rollouts(model, episodes, scenes=perturbed, renderer=renderer),
            episodes)
    return out


# ----------------------------------------------------------------- generalization

def _paired_question(episode, seed):
    """Alternate question about the same target object (different template
    where possible)."""
    templates = [t for t in sg.TEMPLATES if t != episode.question.template]
    for tpl in templates:
        try:
            q = sg.generate_question(episode.scene, seed, template=tpl,
                                     target_id=episode.question.target_object_id)
            return q
        except Exception:
            continue
    raise NoPairedQuestionError(
        f"no alternate question for target {episode.question.target_object_id}")


def generalization_eval(model, episodes, config=None, mode="Q",
                        perturbed=None, seed=0):
    """Attack under the original setting, evaluate under a swapped question
    (Q) or swapped start pose (T)."""
    if mode not in ("Q", "T"):
        raise ValueError(f"mode must be 'Q' or 'T', got {mode!r}")
    if perturbed is None:
        perturbed, _ = attack_episodes(model, episodes, config)
    swapped = []
    for i, ep in enumerate(episodes):
        if mode == "Q":
            swapped.append(replace(ep, question=_paired_question(ep, seed + i)))
        else:
            alt = ep.alt_start_pose if ep.alt_start_pose is not None else ep.start_pose
            swapped.append(replace(ep, start_pose=alt))
    trajs = _rollouts(model, swapped, scenes=perturbed)
    return metrics(trajs, swapped)


# ----------------------------------------------------------------- defenses

def gaussian_noised_scene(scene, rng, sigma=GAUSSIAN_SIGMA):
    """Scene copy with zero-mean Gaussian texture noise, clamped to [0, 1]."""
    textures = {}
    for obj in scene.objects:
        base = obj.mesh.texture.astype(np.float64)
        noised = np.clip(base + rng.normal(0.0, sigma, base.shape), 0.0, 1.0)
        textures[obj.id] = noised.astype(np.float32)
    return scene.copy_with_textures(textures)


def adversarial_training(train_episodes, eval_episodes, variant_tag="pacman",
                         train_cfg=None, attack_cfg=None, seed=0,
                         augment_count=None, vanilla=None):
    """Vanilla / Gaussian-augmented (GT) / attack-augmented (AT) models plus
    a robustness table under fresh white-box attacks and Gaussian noise.

    A pre-trained vanilla model may be passed in to avoid retraining it; it
    must match variant_tag and the training seed for the comparison to be
    apples-to-apples."""
    attack_cfg = attack_cfg or atk.AttackConfig()
    rng = np.random.default_rng((seed, 99))
    n_aug = augment_count or len(train_episodes) // 2

    if vanilla is None:
        vanilla = ag.train_agent(train_episodes, variant_tag, train_cfg,
                                 seed=seed)
    elif vanilla.variant_tag != variant_tag:
        raise ValueError(f"vanilla model is {vanilla.variant_tag!r}, "
                         f"expected {variant_tag!r}")

    gt_aug = [replace(ep, scene=gaussian_noised_scene(ep.scene, rng))
              for ep in train_episodes[:n_aug]]
    gt = ag.train_agent(list(train_episodes) + gt_aug, variant_tag,
                        train_cfg, seed=seed)

    at_aug = []
    for ep in train_episodes[:n_aug]:
        pscene, _ = atk.run_attack(ep, vanilla, attack_cfg)
        at_aug.append(replace(ep, scene=pscene))
    at = ag.train_agent(list(train_episodes) + at_aug, variant_tag,
                        train_cfg, seed=seed)

    models = {"Vanilla": vanilla, "GT": gt, "AT": at}
    table = {}
    for name, model in models.items():
        clean, attacked = white_box_eval(model, eval_episodes, attack_cfg)
        noise_scenes = [gaussian_noised_scene(ep.scene, rng)
                        for ep in eval_episodes]
        gauss = metrics(_rollouts(model, eval_episodes, scenes=noise_scenes),
                        eval_episodes)
        table[name] = {"clean": clean["all"], "attacked": attacked["all"],
                       "gaussian": gauss}
    return models, table


# ----------------------------------------------------------------- ablation

def ablation(model, episodes, axis, values, base_config=None):
    """Attacked MetricRecord per value of K (selected views) or M (object cap)."""
    if axis not in ("K", "M"):
        raise ValueError(f"axis must be 'K' or 'M', got {axis!r}")
    base = base_config or atk.AttackConfig()
    out = {}
    for v in values:
        if axis == "K":
            if not 1 <= v <= ag.N_HISTORY:
                raise ValueError(f"K={v} outside [1, {ag.N_HISTORY}]")
            cfg = replace(base, k_views=int(v))
        else:
            if not 1 <= v <= 6:
                raise ValueError(f"M={v} outside [1, 6]")
            cfg = replace(base, m_cap=int(v))
        perturbed, _ = attack_episodes(model, episodes, cfg)
        out[v] = metrics(_rollouts(model, episodes, scenes=perturbed),
                         episodes)
    return out


# ----------------------------------------------------------------- reporting

def result_basename(experiment, variant, seed):
    return f"{experiment}_{variant}_{seed}"


def write_results(out_dir, experiment, variant, seed, rows, summary):
    """Per-episode CSV plus a JSON summary, deterministic file naming."""
    os.makedirs(out_dir, exist_ok=True)
    base = result_basename(experiment, variant, seed)
    csv_path = os.path.join(out_dir, base + ".csv")
    json_path = os.path.join(out_dir, base + ".json")
    if rows:
        keys = list(rows[0])
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_jsonable)
    return csv_path, json_path


def _jsonable(obj):
    if isinstance(obj, MetricRecord):
        return obj.as_dict()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def episode_rows(trajectories, episodes, label=""):
    rows = []
    for i, (t, e) in enumerate(zip(trajectories, episodes)):
        correct, d_init, d_T, d_delta, d_min = episode_metrics(t, e)
        rows.append({"episode": i, "condition": label,
                     "difficulty": e.difficulty, "correct": correct,
                     "d_init": round(d_init, 6), "d_T": round(d_T, 6),
                     "d_delta": round(d_delta, 6), "d_min": round(d_min, 6),
                     "steps": len(t.actions),
                     "answer": t.answer, "truth": e.question.answer})
    return rows

"""Batch command-line pipeline: gen / train / attack / eval / advtrain /
ablate / render.

Every run is seeded from its configuration and writes the resolved config
next to its outputs, so a pinned config file reproduces byte-identical
artifacts on one machine. Errors are single-line and machine parsable:
``eal: error: <kind>: <detail>`` with a per-kind exit code.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import scenegraph as sg
from . import agent as ag
from . import attack as atk
from . import evalharness as ev

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_FILE = 2
EXIT_INVALID_CONFIG = 3
EXIT_FAILED_ACCEPTANCE = 4


class CliError(Exception):
    kind = "error"
    code = EXIT_ERROR


class MissingFileError(CliError):
    kind = "missing-file"
    code = EXIT_MISSING_FILE


class InvalidConfigError(CliError):
    kind = "invalid-config"
    code = EXIT_INVALID_CONFIG


class FailedAcceptanceError(CliError):
    kind = "failed-acceptance"
    code = EXIT_FAILED_ACCEPTANCE


# ------------------------------------------------------------------ config

# Section -> key -> default. Types are inferred from the defaults; unknown
# sections or keys in a config file are rejected.
DEFAULTS = {
    "corpus": {
        "train_houses": 40,
        "eval_houses": 8,
        "train_episodes": 200,
        "eval_episodes": 48,
        "rooms": 2,
        "objects_per_room": 2,
        "house_seed": 0,
        "eval_house_seed": 100,
        "episode_seed": 1000,
        "eval_episode_seed": 5000,
    },
    "train": {
        "variant": "pacman",
        "epochs": 12,
        "batch_size": 128,
        "learning_rate": 0.04,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "resolution": 32,
        "qa_loss_weight": 3.0,
        "nav_trunk_grad_scale": 0.1,
        "holdout_fraction": 0.1,
        "dagger_rounds": 2,
        "dagger_epochs": 6,
    },
    "attack": {
        "k_views": 3,
        "m_cap": 0,            # 0 = no cap
        "lam": 1.0,
        "epsilon": 32.0 / 255.0,
        "max_iters": 60,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "eot_views": 5,
        "eot_distance": 1.0,
        "target": "qa-untargeted",
        "early_stop": True,
    },
    "run": {
        "seed": 0,
        "out": "",
        "jobs": 1,
    },
}


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except (TypeError, ValueError):
        raise InvalidConfigError(
            f"[{section}] {key} = {raw!r} is not a valid "
            f"{type(default).__name__}")


def load_config(path=None):
    """Resolved configuration dict; unknown sections/keys are rejected."""
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise MissingFileError(path)
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise InvalidConfigError(f"{path}: {exc}".replace("\n", " "))
    for section in parser.sections():
        if section not in cfg:
            raise InvalidConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise InvalidConfigError(f"unknown key [{section}] {key}")
            cfg[section][key] = _coerce(section, key, raw,
                                        DEFAULTS[section][key])
    return cfg


def write_resolved_config(cfg, out_dir, command):
    parser = configparser.ConfigParser()
    for section, kv in cfg.items():
        parser[section] = {k: str(v) for k, v in kv.items()}
    parser["meta"] = {"tool_version": __version__, "command": command}
    path = os.path.join(out_dir, "resolved_config.ini")
    with open(path, "w") as f:
        parser.write(f)
    return path


def resolve_out_dir(args, cfg):
    out = args.out or cfg["run"]["out"] or os.environ.get("EAL_OUT", "")
    if not out:
        raise InvalidConfigError("no output directory (--out, [run] out, "
                                 "or EAL_OUT)")
    os.makedirs(out, exist_ok=True)
    return out


def train_config(cfg):
    t = cfg["train"]
    return ag.TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        learning_rate=t["learning_rate"], momentum=t["momentum"],
        weight_decay=t["weight_decay"], resolution=t["resolution"],
        qa_loss_weight=t["qa_loss_weight"],
        nav_trunk_grad_scale=t["nav_trunk_grad_scale"],
        holdout_fraction=t["holdout_fraction"],
        dagger_rounds=t["dagger_rounds"], dagger_epochs=t["dagger_epochs"])


def attack_config(cfg, max_iters=None):
    a = cfg["attack"]
    return atk.AttackConfig(
        k_views=a["k_views"], m_cap=a["m_cap"] or None, lam=a["lam"],
        epsilon=a["epsilon"],
        max_iters=a["max_iters"] if max_iters is None else max_iters,
        learning_rate=a["learning_rate"], momentum=a["momentum"],
        weight_decay=a["weight_decay"], eot_views=a["eot_views"],
        eot_distance=a["eot_distance"], target=a["target"],
        early_stop=a["early_stop"])


# ------------------------------------------------------------------ corpus

def generate_corpus(cfg, seed):
    """Deterministic desk corpus from the config's corpus section."""
    c = cfg["corpus"]
    gen = sg.GenerationConfig(rooms=c["rooms"],
                              objects_per_room=c["objects_per_room"])
    train_scenes = [sg.generate_house(seed + c["house_seed"] + i, gen)
                    for i in range(c["train_houses"])]
    eval_scenes = [sg.generate_house(seed + c["eval_house_seed"] + i, gen)
                   for i in range(c["eval_houses"])]
    train_eps = [sg.generate_episode(train_scenes[i % len(train_scenes)],
                                     seed + c["episode_seed"] + i, gen,
                                     scene_index=i % len(train_scenes))
                 for i in range(c["train_episodes"])]
    eval_eps = [sg.generate_episode(eval_scenes[i % len(eval_scenes)],
                                    seed + c["eval_episode_seed"] + i, gen,
                                    scene_index=i % len(eval_scenes))
                for i in range(c["eval_episodes"])]
    return train_scenes, train_eps, eval_scenes, eval_eps


def save_corpus(out_dir, train_scenes, train_eps, eval_scenes, eval_eps,
                seed):
    meta = {"seed": seed, "tool_version": __version__}
    paths = {}
    for tag, scenes, eps in (("train", train_scenes, train_eps),
                             ("eval", eval_scenes, eval_eps)):
        sp = os.path.join(out_dir, f"scenes_{tag}.eal")
        ep = os.path.join(out_dir, f"episodes_{tag}.eal")
        sg.save_scenes(sp, scenes, meta=meta)
        sg.save_episodes(ep, eps)
        paths[tag] = (sp, ep)
    return paths


def load_corpus(corpus_dir, tag):
    sp = os.path.join(corpus_dir, f"scenes_{tag}.eal")
    ep = os.path.join(corpus_dir, f"episodes_{tag}.eal")
    for p in (sp, ep):
        if not os.path.exists(p):
            raise MissingFileError(p)
    scenes, _meta = sg.load_scenes(sp)
    episodes = sg.load_episodes(ep, scenes)
    return scenes, episodes


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ frames

def write_ppm(path, rgb):
    """Binary P6 dump of a float [0,1] (H, W, 3) image."""
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def write_id_sidecar(path, object_id):
    with open(path, "w") as f:
        for row in np.asarray(object_id):
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def heatmap_overlay(rgb, weight, lo, hi):
    """Tint a frame red in proportion to its normalized attention weight."""
    span = max(hi - lo, 1e-12)
    a = float(np.clip((weight - lo) / span, 0.0, 1.0)) * 0.6
    out = np.asarray(rgb, dtype=np.float64).copy()
    out[..., 0] = (1 - a) * out[..., 0] + a * 1.0
    out[..., 1] *= (1 - a)
    out[..., 2] *= (1 - a)
    return out


def composite(left, right):
    gap = np.ones((left.shape[0], 2, 3))
    return np.concatenate([left, gap, right], axis=1)


# ------------------------------------------------------------------ attack

def _attack_one(payload):
    model, ep, cfg = payload
    pscene, log = atk.run_attack(ep, model, cfg)
    textures = {o.id: o.mesh.texture for o in pscene.objects}
    return textures, log


def attack_episodes_jobs(model, episodes, cfg, jobs=1):
    """Per-episode attacks, optionally fanned out across processes."""
    if jobs <= 1 or len(episodes) <= 1:
        return ev.attack_episodes(model, episodes, cfg)
    import multiprocessing as mp
    with mp.Pool(processes=min(jobs, len(episodes))) as pool:
        results = pool.map(_attack_one, [(model, ep, cfg) for ep in episodes])
    scenes = [ep.scene.copy_with_textures(tex)
              for ep, (tex, _log) in zip(episodes, results)]
    return scenes, [log for _tex, log in results]


def save_attacked(out_dir, episodes, scenes, logs, seed, variant):
    base = ev.result_basename("attack", variant, seed)
    sp = os.path.join(out_dir, base + "_scenes.eal")
    sg.save_scenes(sp, scenes, meta={"seed": seed, "variant": variant})
    lp = os.path.join(out_dir, base + "_logs.jsonl")
    with open(lp, "w") as f:
        for i, log in enumerate(logs):
            rec = {"episode": i, "flipped": log.flipped,
                   "iterations": log.iterations,
                   "context_ids": list(log.context_ids),
                   "selected_views": list(log.selected_views),
                   "records": log.records}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return sp, lp


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    corpus = generate_corpus(cfg, seed)
    paths = save_corpus(out, *corpus, seed)
    write_resolved_config(cfg, out, "gen")
    for tag, (sp, ep) in sorted(paths.items()):
        print(f"{tag} scenes {file_checksum(sp)} {sp}")
        print(f"{tag} episodes {file_checksum(ep)} {ep}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    _scenes, episodes = load_corpus(args.corpus, "train")
    variant = args.variant or cfg["train"]["variant"]
    model = ag.train_agent(episodes, variant, train_config(cfg), seed=seed)
    path = os.path.join(out, f"model_{variant}_{seed}.eal")
    ag.save_agent(path, model)
    write_resolved_config(cfg, out, "train")
    print(f"model {variant} seed {seed} report {model.train_report} -> {path}")
    return EXIT_OK


def _load_model(path):
    if not os.path.exists(path):
        raise MissingFileError(path)
    return ag.load_agent(path)


def cmd_attack(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    model = _load_model(args.model)
    _scenes, episodes = load_corpus(args.corpus, "eval")
    acfg = attack_config(cfg, max_iters=args.max_iters)
    scenes, logs = attack_episodes_jobs(model, episodes, acfg,
                                        jobs=args.jobs or cfg["run"]["jobs"])
    sp, lp = save_attacked(out, episodes, scenes, logs, seed,
                           model.variant_tag)
    write_resolved_config(cfg, out, "attack")
    flips = sum(1 for l in logs if l.flipped)
    print(f"attacked {len(episodes)} episodes, {flips} flipped -> {sp}")
    return EXIT_OK


def cmd_eval(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    model = _load_model(args.model)
    _scenes, episodes = load_corpus(args.corpus, "eval")
    acfg = attack_config(cfg)
    variant = model.variant_tag
    jobs = args.jobs or cfg["run"]["jobs"]
    perturbed, logs = attack_episodes_jobs(model, episodes, acfg, jobs=jobs)

    if args.mode == "white-box":
        clean, attacked = ev.white_box_eval(model, episodes, perturbed=perturbed)
        rows = (ev.episode_rows(ev._rollouts(model, episodes), episodes, "clean")
                + ev.episode_rows(ev._rollouts(model, episodes,
                                               scenes=perturbed),
                                  episodes, "attacked"))
        summary = {"clean": clean, "attacked": attacked}
        ev.write_results(out, "whitebox", variant, seed, rows, summary)
        write_resolved_config(cfg, out, "eval white-box")
        ca, aa = clean["all"].accuracy, attacked["all"].accuracy
        print(f"clean accuracy {ca:.4f} attacked accuracy {aa:.4f}")
        if args.check and not aa <= 0.5 * ca:
            raise FailedAcceptanceError(
                f"attacked {aa:.4f} > 0.5 * clean {ca:.4f}")
        return EXIT_OK

    if args.mode == "transfer":
        targets = {}
        for path in args.target_model or []:
            m = _load_model(path)
            targets[m.variant_tag] = m
        if not targets:
            raise InvalidConfigError("transfer mode needs --target-model")
        tm = ev.transfer_eval(model, targets, episodes, perturbed=perturbed)
        summary = {"clean": {k: v for k, v in tm.clean.items()},
                   "attacked": {f"{s}->{t}": v
                                for (s, t), v in tm.attacked.items()}}
        ev.write_results(out, "transfer", variant, seed, [], summary)
        write_resolved_config(cfg, out, "eval transfer")
        for key, rec in summary["attacked"].items():
            print(f"{key} attacked accuracy {rec.accuracy:.4f}")
        return EXIT_OK

    if args.mode == "renderer-transfer":
        res = ev.renderer_transfer_eval(model, episodes, perturbed=perturbed)
        ev.write_results(out, "renderer", variant, seed, [], res)
        write_resolved_config(cfg, out, "eval renderer-transfer")
        for cond, d in res.items():
            for r, rec in d.items():
                print(f"{cond} {r} accuracy {rec.accuracy:.4f}")
        return EXIT_OK

    # generalization: Q and T modes against the same perturbations
    recq = ev.generalization_eval(model, episodes, mode="Q",
                                  perturbed=perturbed, seed=seed)
    rect = ev.generalization_eval(model, episodes, mode="T",
                                  perturbed=perturbed)
    ev.write_results(out, "generalization", variant, seed, [],
                     {"Q": recq, "T": rect})
    write_resolved_config(cfg, out, "eval generalization")
    print(f"Q-mode accuracy {recq.accuracy:.4f} "
          f"T-mode accuracy {rect.accuracy:.4f}")
    return EXIT_OK


def cmd_advtrain(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    _s, train_eps = load_corpus(args.corpus, "train")
    _s2, eval_eps = load_corpus(args.corpus, "eval")
    variant = args.variant or cfg["train"]["variant"]
    models, table = ev.adversarial_training(
        train_eps, eval_eps, variant, train_config(cfg), attack_config(cfg),
        seed=seed)
    for name, model in models.items():
        ag.save_agent(os.path.join(out, f"model_{name}_{variant}_{seed}.eal"),
                      model)
    ev.write_results(out, "advtrain", variant, seed, [], table)
    write_resolved_config(cfg, out, "advtrain")
    for name, recs in table.items():
        print(f"{name} clean {recs['clean'].accuracy:.4f} "
              f"attacked {recs['attacked'].accuracy:.4f} "
              f"gaussian {recs['gaussian'].accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg):
    out = resolve_out_dir(args, cfg)
    seed = cfg["run"]["seed"]
    model = _load_model(args.model)
    _s, episodes = load_corpus(args.corpus, "eval")
    values = [int(v) for v in args.values.split(",")]
    try:
        table = ev.ablation(model, episodes, args.axis, values,
                            attack_config(cfg))
    except ValueError as exc:
        raise InvalidConfigError(str(exc))
    ev.write_results(out, f"ablate{args.axis}", model.variant_tag, seed, [],
                     {str(k): v for k, v in table.items()})
    write_resolved_config(cfg, out, f"ablate {args.axis}")
    for v in values:
        print(f"{args.axis}={v} attacked accuracy {table[v].accuracy:.4f}")
    return EXIT_OK


def cmd_render(args, cfg):
    from . import diffrender as dr
    out = resolve_out_dir(args, cfg)
    scenes, episodes = load_corpus(args.corpus, args.split)
    if not 0 <= args.episode < len(episodes):
        raise InvalidConfigError(f"episode index {args.episode} out of range")
    ep = episodes[args.episode]
    model = _load_model(args.model) if args.model else None
    res = (args.resolution, args.resolution)

    if model is not None:
        traj = ag.rollout(model, ep)
        frames = traj.history.frames
        attn = atk.trajectory_attention(
            model, [f.rgb for f in frames], ep.question.text_tokens,
            ep.question.answer)
        lo, hi = float(attn.normalized.min()), float(attn.normalized.max())
        for t, f in enumerate(frames):
            write_ppm(os.path.join(out, f"view_{args.episode}_{t}.ppm"), f.rgb)
            write_id_sidecar(
                os.path.join(out, f"view_{args.episode}_{t}.ids.txt"),
                f.object_id)
            overlay = heatmap_overlay(f.rgb, attn.normalized[t], lo, hi)
            write_ppm(os.path.join(out, f"attn_{args.episode}_{t}.ppm"),
                      overlay)
        print(f"wrote {len(frames)} views with attention overlays to {out}")
    else:
        poses = sg.execute_actions(ep.scene, ep.start_pose, ep.shortest_path)
        for t, pose in enumerate(poses):
            fb = dr.reference_render(ep.scene, pose, res)
            write_ppm(os.path.join(out, f"view_{args.episode}_{t}.ppm"),
                      fb.rgb)
            write_id_sidecar(
                os.path.join(out, f"view_{args.episode}_{t}.ids.txt"),
                fb.object_id)
        print(f"wrote {len(poses)} views to {out}")
    write_resolved_config(cfg, out, "render")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="eal", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--jobs", type=int, default=None)

    s = sub.add_parser("gen", help="generate the scene/episode corpus")
    common(s)

    s = sub.add_parser("train", help="train an agent variant")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--variant", default=None)

    s = sub.add_parser("attack", help="attack the eval episode set")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--max-iters", type=int, default=None)

    s = sub.add_parser("eval", help="run an evaluation experiment")
    common(s)
    s.add_argument("mode", choices=["white-box", "transfer",
                                    "renderer-transfer", "generalization"])
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--target-model", action="append", default=None)
    s.add_argument("--check", action="store_true")

    s = sub.add_parser("advtrain", help="Vanilla/GT/AT defense comparison")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--variant", default=None)

    s = sub.add_parser("ablate", help="sweep K or M at fixed budget")
    common(s)
    s.add_argument("axis", choices=["K", "M"])
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 1,2,3")

    s = sub.add_parser("render", help="dump frames / attention heatmaps")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", choices=["train", "eval"], default="eval")
    s.add_argument("--episode", type=int, default=0)
    s.add_argument("--model", default=None)
    s.add_argument("--resolution", type=int, default=32)

    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "advtrain": cmd_advtrain,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.jobs is not None:
            cfg["run"]["jobs"] = args.jobs
        if getattr(args, "max_iters", None) is not None:
            cfg["attack"]["max_iters"] = args.max_iters
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"eal: error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (sg.SceneFormatError, atk.AttackConfigError) as exc:
        print(f"eal: error: invalid-config: {exc}", file=sys.stderr)
        return EXIT_INVALID_CONFIG
    except FileNotFoundError as exc:
        print(f"eal: error: missing-file: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE


if __name__ == "__main__":
    sys.exit(main())

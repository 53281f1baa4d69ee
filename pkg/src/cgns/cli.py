"""Command line: ``cgns {synth,train,predict,eval,verify}``.

Exit codes: 0 success, 1 usage/IO/data error or failed verification,
2 non-finite loss during training, 3 incompatible checkpoint.
The output directory defaults to ``$CGNS_OUT_DIR`` (then ``./cgns_out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from .config import MODEL_KEYS, ConfigError, RunConfig
from .data import TrajectoryFormatError, concat_sets, load_map, load_trajectory_file, prepare, write_trajectory_file
from .feasibility import violation_rate
from .metrics import cvm_predict, lr_predict, min_of_k, write_report_csv, write_report_json
from .synth import ScenarioSpec, synth_generate
from .training import TrainingDiverged, build_model, make_checkpoint, restore, rollout, sample_futures, to_world, train

log = logging.getLogger("cgns")

OUT_ENV = "CGNS_OUT_DIR"
EXIT_ERROR, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 1, 2, 3


class CliError(Exception):
    pass


def out_dir(args):
    path = args.out or os.environ.get(OUT_ENV) or "cgns_out"
    os.makedirs(path, exist_ok=True)
    return path


def stamp(config_hash, seed):
    return f"cgns format_version={FORMAT_VERSION} config_hash={config_hash} seed={seed}"


# ------------------------------------------------------------------ configs


def read_config(path, **overrides):
    """A RunConfig from a plain config or from an emitted effective_config.json."""
    with open(path) as fh:
        doc = json.load(fh)
    if "config" in doc and "config_hash" in doc:
        doc = doc["config"]
    base = os.path.dirname(os.path.abspath(path))
    for section in ("train_data", "test_data"):
        doc[section] = _absolute_paths(doc.get(section) or {}, base)
    return RunConfig(doc, **overrides)


def _absolute_paths(section, base):
    out = dict(section)
    if "files" in out:
        out["files"] = [os.path.join(base, f) for f in out["files"]]
    if out.get("map"):
        out["map"] = os.path.join(base, out["map"])
    return out


def write_effective_config(path, config):
    doc = {"format_version": FORMAT_VERSION, "config_hash": config.model_hash(),
           "seed": config.seed, "config": config.doc}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_scenes(section, config):
    """Scenes named by a dataset section: ``{"synth": spec}`` or ``{"files": [...], "map": path}``."""
    if not section:
        raise CliError("the config names no dataset for this command")
    if "synth" in section:
        scenes = [synth_generate(ScenarioSpec.from_dict(section["synth"]))]
    elif section.get("files"):
        area = load_map(section["map"]) if section.get("map") else None
        scenes = []
        for path in sorted(section["files"]):
            scene = load_trajectory_file(path, config.frame_duration)
            scene.drivable = area
            scenes.append(scene)
    else:
        raise CliError("dataset section needs 'synth' or 'files'")
    for scene in scenes:
        if abs(scene.dt - config.dt) > 1e-9:
            raise CliError(f"scene step {scene.dt:g} s does not match the configured dt {config.dt:g} s")
    return scenes


def load_dataset(section, config):
    raster = config.raster_size if config.context else None
    sets = [
        prepare(scene, config.t_hist, config.t_fut, config.max_agents, config.stride, config.rotate,
                config.scale, raster, config.raster_extent)
        for scene in load_scenes(section, config)
    ]
    return concat_sets(sets)


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    with open(args.config) as fh:
        spec = ScenarioSpec.from_dict(json.load(fh))
    seed = args.seed if args.seed is not None else (spec.seed if spec.seed is not None else 0)
    spec.seed = seed
    scene = synth_generate(spec, seed)
    out = out_dir(args)
    traj = os.path.join(out, f"{spec.scenario}.txt")
    write_trajectory_file(traj, scene, header=f"cgns synth format_version={FORMAT_VERSION} seed={seed}")
    doc = {"format_version": FORMAT_VERSION, "seed": seed, "spec": spec.to_dict(), "dt": scene.dt,
           "drivable": scene.drivable.to_json() if scene.drivable else None}
    with open(os.path.join(out, f"{spec.scenario}.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(f"wrote {traj} ({len(scene)} agents)")
    return 0


def cmd_train(args):
    overrides = {} if args.seed is None else {"seed": args.seed}
    config = read_config(args.config, **overrides)
    out = out_dir(args)
    write_effective_config(os.path.join(out, "effective_config.json"), config)
    resume = None
    model = build_model(config)
    if args.checkpoint:
        resume = load_checkpoint(args.checkpoint, config.model_hash(), args.override_hash_check)
        model.load_state_dict(resume.params)
    data = load_dataset(config.train_data, config)
    ckpt_dir = None
    if config.checkpoint_every:
        ckpt_dir = os.path.join(out, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
    try:
        result = train(model, data, config, os.path.join(out, "metrics.csv"), ckpt_dir, resume,
                       log_comment=stamp(config.model_hash(), config.seed))
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.log[-1]["iteration"] if result.log else (resume.iteration if resume else 0)
    final = make_checkpoint(model, config, last, result.adam_g, result.adam_d, result.state)
    path = os.path.join(out, "model.ckpt")
    save_checkpoint(path, final)
    print(f"trained {len(result.log)} iterations on {len(data)} windows -> {path}")
    return 0


def _restore(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    config = read_config(args.config) if args.config else None
    model, ckpt_config, ckpt = restore(args.checkpoint, config, args.override_hash_check)
    if config is None:
        return model, ckpt_config, ckpt
    # the checkpoint fixes the model layout; data, sampling and seed come from --config
    doc = dict(config.doc)
    doc.update({k: ckpt_config.doc[k] for k in MODEL_KEYS})
    return model, RunConfig(doc), ckpt


def _samples(args, config):
    k = args.samples if args.samples is not None else config.samples
    if k < 1:
        raise CliError("--samples must be at least 1")
    return k


def cmd_predict(args):
    model, config, ckpt = _restore(args)
    data = load_dataset(config.test_data, config)
    k = _samples(args, config)
    seed = args.seed if args.seed is not None else config.seed
    segments = int(config.long_horizon_rollout or 1)
    if segments > 1:
        world = np.stack([
            np.stack([rollout(model, data.window(i), segments, seed=seed * 100003 + j, rotate=config.rotate)
                      for i in range(len(data))])
            for j in range(k)
        ])
    else:
        world = to_world(sample_futures(model, data, k, seed), data)
    out = out_dir(args)
    path = os.path.join(out, "predictions.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# {stamp(ckpt.config_hash, seed)}\n")
        writer = csv.writer(fh)
        writer.writerow(["window_id", "sample_id", "agent", "step", "x", "y"])
        for w in range(world.shape[1]):
            for n in np.flatnonzero(data.valid[w]):
                agent = int(data.agent_ids[w, n]) if data.agent_ids is not None else int(n)
                for j in range(k):
                    for t in range(world.shape[3]):
                        x, y = world[j, w, n, t]
                        writer.writerow([w, j, agent, t + 1, repr(float(x)), repr(float(y))])
    print(f"wrote {k} samples for {len(data)} windows -> {path}")
    return 0


def evaluate(model, config, data, k, seed):
    """Model, CVM and LR reports on the same windows, in world units."""
    world = to_world(sample_futures(model, data, k, seed), data)
    truth, obs = data.world_future(), data.world_obs()
    limits = config.limits
    last = obs[:, :, -1, :]

    def viol(samples):
        hist = np.broadcast_to(last, samples.shape[:-2] + (2,))
        return violation_rate(samples, limits, hist, np.broadcast_to(data.valid, samples.shape[:-2]))

    reports = {"model": min_of_k(world, truth, data.valid, data.dt, viol(world))}
    for name, fn in (("cvm", cvm_predict), ("lr", lr_predict)):
        pred = fn(obs, config.t_fut)[None]
        reports[name] = min_of_k(pred, truth, data.valid, data.dt, viol(pred))
    return reports


def cmd_eval(args):
    model, config, ckpt = _restore(args)
    data = load_dataset(config.test_data, config)
    k = _samples(args, config)
    seed = args.seed if args.seed is not None else config.seed
    reports = evaluate(model, config, data, k, seed)
    out = out_dir(args)
    write_report_csv(os.path.join(out, "report.csv"), reports)
    meta = {"format_version": FORMAT_VERSION, "config_hash": ckpt.config_hash, "seed": seed,
            "samples": k, "windows": len(data), "protocol": "best_of_k and mean_of_k",
            "checkpoint_iteration": ckpt.iteration}
    write_report_json(os.path.join(out, "report.json"), reports, meta)
    for name, rep in reports.items():
        print(f"{name:6s} best ADE {rep.best_ade:.4f} FDE {rep.best_fde:.4f} "
              f"mean ADE {rep.mean_ade:.4f} violation {rep.violation_rate:.4f}")
    return 0


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks(seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else EXIT_ERROR


# -------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="cgns", description="Conditional generative trajectory prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True, checkpoint=False, samples=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=name in ("synth", "train"),
                           help="JSON config (scenario spec for synth)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file")
            p.add_argument("--override-hash-check", action="store_true",
                           help="accept a checkpoint whose config hash differs")
        if samples:
            p.add_argument("--samples", type=int, help="number of latent samples K")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./cgns_out)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic scene")
    add("train", cmd_train, "train a model (--checkpoint resumes)", checkpoint=True)
    add("predict", cmd_predict, "dump sampled futures", checkpoint=True, samples=True)
    add("eval", cmd_eval, "ADE/FDE report with CVM and LR baselines", checkpoint=True, samples=True)
    add("verify", cmd_verify, "run the oracle self-checks", config=False)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on bad usage, which would read as a diverged run
        return EXIT_ERROR if err.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (CliError, ConfigError, TrajectoryFormatError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

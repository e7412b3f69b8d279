"""Command-line pipeline: data generation through serving and reports.

Every subcommand takes --config FILE and repeatable --set key=value
overrides (defaults < file < flags) and, when --run-dir is given, echoes
the effective config there so the run is reproducible.  Missing or
unknown arguments exit 2 (usage); runtime failures log the error and
exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import (
    echo_config,
    load_config_file,
    merge_config,
    parse_assignments,
    section,
)
from .filtering import filter_keysteps_csv, filter_remote, filter_stub
from .keysteps import extract_keysteps, keysteps_from_rows, read_keysteps_csv, \
    write_keysteps_csv
from .metrics import MetricsWriter, render_report
from .model import (
    load_checkpoint,
    policy_step,
    rollout_token_accuracy,
    save_checkpoint,
    train_model,
)
from .sequences import (
    build_planner_samples,
    build_policy_samples,
    load_sequences,
    save_sequences,
)
from .server import create_app, run_server
from .sim import TaskSpec, evaluate_policy, reset, save_event_logs, \
    scripted_expert
from .tokens import CodecBundle, fit_codec_bundle, tokenize_episode
from .trajectory import load_episodes, save_episodes

logger = logging.getLogger("planact.cli")


def _load_cfg(args) -> dict:
    layers = []
    if args.config:
        layers.append(load_config_file(args.config))
    layers.append(parse_assignments(args.set or []))
    return merge_config(*layers)


def _prepare_run_dir(cfg, args) -> str | None:
    run_dir = getattr(args, "run_dir", None)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        echo_config(cfg, os.path.join(run_dir, "config.echo"))
    return run_dir


# ------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, args) -> int:
    task = TaskSpec.from_name(cfg["data.task"])
    expert = section(cfg, "expert")
    expert = dataclasses.replace(expert, sigma=cfg["data.noise"])
    sim_cfg = section(cfg, "sim")
    n = cfg["data.episodes"]
    seed0 = cfg["data.seed0"]
    episodes, logs = [], []
    for i in range(n):
        state, instr = reset(task, seed0 + i, sim_cfg)
        ep, log = scripted_expert(state, instr, task, noise_seed=seed0 + i,
                                  expert=expert, cfg=sim_cfg)
        episodes.append(ep)
        logs.append(log)
    save_episodes(episodes, args.out)
    if args.events:
        save_event_logs(logs, args.events)
    logger.info("wrote %d episodes to %s", n, args.out)
    return 0


def cmd_extract(cfg, args) -> int:
    ecfg = section(cfg, "extract")
    episodes = load_episodes(args.inp)
    items = [(ep, extract_keysteps(ep, ecfg)) for ep in episodes]
    n = write_keysteps_csv(items, args.out)
    logger.info("wrote %d keystep rows to %s", n, args.out)
    return 0


def cmd_filter(cfg, args) -> int:
    episodes = {ep.id: ep for ep in load_episodes(args.episodes)}
    mode = cfg["filter.mode"]
    if mode == "stub":
        threshold = cfg["filter.threshold"]

        def decide(req):
            return filter_stub(req, near_dup_threshold=threshold)

    elif mode == "remote":

        def decide(req):
            return filter_remote(req, endpoint=args.endpoint)

    else:
        raise ValueError(f"filter.mode must be stub or remote, got {mode!r}")
    resp = filter_keysteps_csv(args.inp, episodes, args.out, decide)
    logger.info("kept %d rows -> %s", len(resp.kept_rows), args.out)
    return 0


def cmd_fit_codecs(cfg, args) -> int:
    episodes = load_episodes(args.inp)
    bundle = fit_codec_bundle(
        episodes,
        lang_size=cfg["codec.lang_size"],
        vision_k=cfg["codec.vision_k"],
        vision_iters=cfg["codec.vision_iters"],
        max_frames=cfg["codec.vision_frames"],
        quant_levels=cfg["codec.quant_levels"],
        horizon=cfg["build.horizon"],
        chunk_stride=cfg["codec.chunk_stride"],
        seed=cfg["codec.seed"],
    )
    bundle.save(args.out)
    logger.info("fitted codecs (vocab %d) -> %s",
                bundle.space.vocab_size, args.out)
    return 0


def cmd_tokenize(cfg, args) -> int:
    bundle = CodecBundle.load(args.codecs)
    episodes = load_episodes(args.inp)
    with open(args.out, "w") as f:
        for ep in episodes:
            f.write(json.dumps(tokenize_episode(bundle, ep)) + "\n")
    logger.info("tokenized %d episodes -> %s", len(episodes), args.out)
    return 0


def cmd_build_seq(cfg, args) -> int:
    bundle = CodecBundle.load(args.codecs)
    build_cfg = section(cfg, "build")
    episodes = load_episodes(args.inp)
    seqs = []
    if args.stage == "planner":
        if not args.keysteps:
            raise ValueError("planner sequences need --keysteps")
        ks_map = keysteps_from_rows(read_keysteps_csv(args.keysteps))
        for ep in episodes:
            ks = ks_map.get(ep.id)
            if ks is None:
                logger.warning("episode %s has no keysteps; skipped", ep.id)
                continue
            seqs.extend(build_planner_samples(ep, ks, build_cfg, bundle))
    else:
        for ep in episodes:
            seqs.extend(build_policy_samples(ep, build_cfg, bundle))
    if not seqs:
        raise ValueError("no sequences built")
    save_sequences(seqs, args.out)
    logger.info("built %d %s sequences -> %s", len(seqs), args.stage,
                args.out)
    return 0


def cmd_train(cfg, args) -> int:
    run_dir = getattr(args, "run_dir", None)
    bundle = CodecBundle.load(args.codecs)
    train_cfg = section(cfg, "train")
    seqs = load_sequences(args.inp)
    params_in = None
    if args.init:
        params_in, init_cfg, _ = load_checkpoint(args.init)
        if init_cfg.d_model != train_cfg.d_model \
                or init_cfg.n_layers != train_cfg.n_layers:
            raise ValueError(
                "checkpoint geometry does not match train config"
            )
    on_step = None
    writer = None
    if run_dir:
        writer = MetricsWriter(os.path.join(run_dir, "metrics.jsonl"),
                               run_id=os.path.basename(run_dir.rstrip("/")),
                               seed=train_cfg.seed)
        on_step = writer.log_step
    try:
        params = train_model(seqs, train_cfg, bundle.space.vocab_size,
                             bundle.space.pad, args.stage, params=params_in,
                             on_step=on_step)
    finally:
        if writer is not None:
            writer.close()
    save_checkpoint(args.out, params, train_cfg,
                    meta={"stage": args.stage, "n_sequences": len(seqs)})
    logger.info("trained %s for %d steps -> %s", args.stage, train_cfg.steps,
                args.out)
    return 0


def cmd_rollout(cfg, args) -> int:
    params, train_cfg, _ = load_checkpoint(args.model)
    seqs = load_sequences(args.inp)
    stats = rollout_token_accuracy(params, train_cfg, seqs)
    with open(args.out, "w") as f:
        json.dump(stats, f, indent=2)
        f.write("\n")
    logger.info("rollout accuracy %.4f over %d sequences",
                stats["token_accuracy"], stats["n_sequences"])
    return 0


def cmd_eval(cfg, args) -> int:
    run_dir = getattr(args, "run_dir", None)
    params, train_cfg, _ = load_checkpoint(args.model)
    bundle = CodecBundle.load(args.codecs)
    build_cfg = section(cfg, "build")
    sim_cfg = section(cfg, "sim")

    def policy(instruction, observations, actions):
        return policy_step(params, bundle, build_cfg, train_cfg,
                           instruction, observations, actions)

    res = evaluate_policy(
        policy,
        [TaskSpec.from_name(cfg["eval.task"])],
        trials=cfg["eval.trials"],
        exec_k=cfg["eval.exec_k"],
        cfg=sim_cfg,
        seed0=cfg["eval.seed0"],
        max_steps=cfg["eval.max_steps"],
    )
    res["seed0"] = cfg["eval.seed0"]
    with open(args.out, "w") as f:
        json.dump(res, f, indent=2)
        f.write("\n")
    if run_dir and os.path.abspath(args.out) != os.path.abspath(
        os.path.join(run_dir, "eval.json")
    ):
        with open(os.path.join(run_dir, "eval.json"), "w") as f:
            json.dump(res, f, indent=2)
            f.write("\n")
    logger.info("mean success %.3f -> %s", res["mean_success"], args.out)
    return 0


def cmd_serve(cfg, args) -> int:
    params, train_cfg, meta = load_checkpoint(args.model)
    bundle = CodecBundle.load(args.codecs)
    build_cfg = section(cfg, "build")
    app = create_app(
        params, train_cfg, build_cfg, bundle,
        image_hw=(cfg["serve.image_h"], cfg["serve.image_w"]),
        meta=meta,
    )
    port = args.port or int(os.environ.get("PLANACT_SERVE_PORT", 0)) \
        or cfg["serve.port"]
    logger.info("serving on port %d", port)
    run_server(app, port)
    return 0


def cmd_report(cfg, args) -> int:
    out = render_report(args.run_dir)
    logger.info("report -> %s (%d plots)", out["csv"], len(out["plots"]))
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--run-dir", dest="run_dir",
                   help="directory for config echo and metrics")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planact",
        description="toy pipeline: structured keystep planning to actions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate scripted expert episodes")
    p.add_argument("--out", required=True, help="episodes JSONL path")
    p.add_argument("--events", help="optional event log JSONL path")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="extract keystep candidates to CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("filter", help="drop low-quality keystep candidates")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", help="remote filter endpoint URL")
    _add_common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("fit-codecs", help="fit language/vision/action codecs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fit_codecs)

    p = sub.add_parser("tokenize", help="tokenize episodes with a bundle")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--codecs", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("build-seq", help="build training sequences")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--codecs", required=True)
    p.add_argument("--stage", choices=("planner", "policy"), required=True)
    p.add_argument("--keysteps", help="filtered keysteps CSV (planner)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_seq)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--codecs", required=True)
    p.add_argument("--stage", choices=("planner", "policy"), required=True)
    p.add_argument("--init", help="warm-start checkpoint")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="greedy token accuracy on sequences")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="closed-loop success evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--codecs", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the policy over HTTP")
    p.add_argument("--model", required=True)
    p.add_argument("--codecs", required=True)
    p.add_argument("--port", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="render metrics to CSV and plots")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = _load_cfg(args)
        _prepare_run_dir(cfg, args)
        if args.command == "report" and not args.run_dir:
            raise ValueError("report needs --run-dir")
        return args.func(cfg, args)
    except Exception as exc:
        logger.error("command %s failed: %s", args.command, exc,
                     exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

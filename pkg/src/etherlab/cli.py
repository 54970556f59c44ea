"""Command-line surface: train, eval, refgame (standalone game), plot."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, derive_seed, dump_config, load_config
from .gridworld import PickupRoom, random_policy_factory
from .metriclog import MetricLogError, MetricLogger, read_metrics
from .metrics import alignment_report, success_ratio
from .nets import PooledAdapter, VisualEncoder
from .refgame import (
    Listener,
    Speaker,
    StgsChannel,
    play_game_step,
    sample_stimulus_batch,
)
from .trainer import TrainingRun, game_config_from


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("runs/run"),
                        help="run directory")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    logger = MetricLogger(out / "metrics.jsonl", cfg.seed)
    run = TrainingRun(cfg, sink=logger.log)

    def save(step: int) -> None:
        ckpt.save_checkpoint(
            run.bundle.store.named_tensors(), step, out / "checkpoints",
            version=run.bundle.store.version,
        )

    try:
        summary = run.run(checkpoint_fn=save)
    finally:
        logger.close()
    print(
        f"trained variant={cfg.variant} seed={cfg.seed} "
        f"steps={summary['total_steps']} episodes={summary['episodes']} "
        f"updates={summary['updates']}"
    )
    for name, value in sorted(summary["final"].items()):
        print(f"  {name}: {value:.4g}")
    return 0


def cmd_eval(args) -> int:
    run_dir: Path = args.out
    config_path = args.config or run_dir / "config.yaml"
    if not Path(config_path).exists():
        print(f"error: no config at {config_path}", file=sys.stderr)
        return 1
    cfg = load_config(config_path, args.overrides, args.seed)
    try:
        tensors = ckpt.load_checkpoint(run_dir / "checkpoints", args.step)
    except ckpt.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run = TrainingRun(cfg)
    run.bundle.store.load(tensors)

    sr = success_ratio(
        run.greedy_policy(),
        n_envs=cfg.n_eval_envs,
        seed=derive_seed(cfg.seed, "cli-eval"),
        env_kwargs=run._env_kwargs(),
    )
    print(f"success_ratio: {sr:.2f}")
    if cfg.uses_speaker:
        pairs = _collect_alignment_pairs(cfg, n_episodes=32)
        speaker = run.bundle.speaker
        speaker.eval()

        def speak(observations):
            return speaker.describe(torch.stack(list(observations)))

        report = alignment_report(speak, [p[0] for p in pairs], [p[1] for p in pairs])
        for mode, value in report.accuracies.items():
            print(f"alignment_{mode}: {value:.2f}")
    return 0


def _collect_alignment_pairs(cfg, n_episodes: int):
    pairs = []
    policy = random_policy_factory(derive_seed(cfg.seed, "cli-eval-walk"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "cli-eval-envs"))
    for _ in range(n_episodes):
        env = PickupRoom(
            room_size=cfg.env.room_size, n_distractors=cfg.env.n_distractors,
            allow_colorless_goals=cfg.env.allow_colorless_goals,
            max_steps=cfg.env.max_steps, reward_free=cfg.env.reward_free,
        )
        obs, goal = env.reset(int(rng.integers(2**31)))
        while not env.done:
            pairs.append((torch.as_tensor(obs, dtype=torch.float32), env.symbolic_view()))
            action, _ = policy(env, obs, goal, None)
            obs, _, _, _ = env.step(action)
    return pairs


def cmd_refgame(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    try:
        dump = np.load(args.stimuli)
    except OSError as exc:
        print(f"error: cannot read stimulus dump: {exc}", file=sys.stderr)
        return 1
    if "stimuli" not in dump:
        print("error: stimulus dump must contain a 'stimuli' array", file=sys.stderr)
        return 1
    stimuli = torch.from_numpy(dump["stimuli"]).float()

    torch.manual_seed(derive_seed(cfg.seed, "nets"))
    game_cfg = game_config_from(cfg)
    if stimuli.dim() == 4:
        def make_encoder():
            return torch.nn.Sequential(
                VisualEncoder(stimuli.shape[1]), PooledAdapter(64, cfg.nets.rg_hidden)
            )
        encoder = make_encoder()
        speaker_enc = listener_enc = encoder  # shared, as in the full agent
    else:
        speaker_enc = torch.nn.Sequential(
            torch.nn.Linear(stimuli.shape[-1], cfg.nets.rg_hidden), torch.nn.ReLU(),
            torch.nn.Linear(cfg.nets.rg_hidden, cfg.nets.rg_hidden),
        )
        listener_enc = speaker_enc
    speaker = Speaker(speaker_enc, game_cfg.vocab_size, cfg.nets.rg_hidden,
                      game_cfg.max_len)
    listener = Listener(listener_enc, game_cfg.vocab_size, cfg.nets.rg_hidden,
                        game_cfg.descriptive)
    params = {id(p): p for p in list(speaker.parameters()) + list(listener.parameters())}
    optimizer = torch.optim.Adam(list(params.values()), lr=game_cfg.lr)
    channel = StgsChannel(game_cfg.tau0)
    rng = np.random.default_rng(derive_seed(cfg.seed, "rg"))
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stgs"))

    logger = MetricLogger(out / "metrics.jsonl", cfg.seed)
    try:
        for step in range(1, args.steps + 1):
            batch = sample_stimulus_batch(stimuli, game_cfg.batch_size, game_cfg, rng)
            result = play_game_step(speaker, listener, batch, game_cfg, optimizer,
                                    channel, gen)
            if step % args.log_every == 0 or step == args.steps:
                logger.log(step, "rg_accuracy", result.accuracy)
                logger.log(step, "rg_lazy_loss", result.lazy)
                logger.log(step, "rg_impatient_loss", result.impatient)
                logger.log(step, "rg_mean_length", result.mean_length)
                print(
                    f"step {step}: acc={result.accuracy:.3f} lazy={result.lazy:.4f} "
                    f"impatient={result.impatient:.4f} len={result.mean_length:.2f}"
                )
    finally:
        logger.close()
    ckpt.save_checkpoint(
        {**{f"speaker/{k}": v for k, v in speaker.state_dict().items()},
         **{f"listener/{k}": v for k, v in listener.state_dict().items()}},
        args.steps, out / "checkpoints",
    )
    return 0


def cmd_plot(args) -> int:
    run_dir: Path = args.out
    log_path = run_dir / "metrics.jsonl"
    if not log_path.exists():
        print(f"error: no metric log at {log_path}", file=sys.stderr)
        return 1
    try:
        records = read_metrics(log_path)
    except MetricLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not records:
        print(f"error: metric log {log_path} is empty", file=sys.stderr)
        return 1

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = run_dir / "plots"
    plots_dir.mkdir(exist_ok=True)
    written = []

    curves = [r for r in records if r.name == "success_ratio"]
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        by_seed: dict[int, list] = {}
        for r in curves:
            by_seed.setdefault(r.seed, []).append(r)
        for seed, rows in sorted(by_seed.items()):
            rows.sort(key=lambda r: r.step)
            ax.plot([r.step for r in rows], [r.value for r in rows],
                    marker="o", label=f"seed {seed}")
        ax.set_xlabel("environment steps")
        ax.set_ylabel("success ratio (%)")
        ax.legend()
        fig.tight_layout()
        path = plots_dir / "success_ratio.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    alignment = {}
    for r in records:
        if r.name.startswith("alignment_"):
            alignment[r.name.removeprefix("alignment_")] = r.value  # keeps latest
    if alignment:
        fig, ax = plt.subplots(figsize=(6, 4))
        names = list(alignment)
        ax.bar(names, [alignment[n] for n in names])
        ax.set_ylabel("accuracy (%)")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        path = plots_dir / "alignment.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    if not written:
        print("error: log holds no plottable metrics", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="etherlab",
        description="Train and evaluate hindsight-relabelling agents whose "
                    "relabelling and predicate functions come from an "
                    "emergent-communication referential game.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one variant")
    _add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint from a run directory")
    _add_common(p_eval)
    p_eval.add_argument("--step", type=int, default=None,
                        help="checkpoint step (latest when omitted)")

    p_rg = sub.add_parser("refgame", help="train the referential game standalone")
    _add_common(p_rg)
    p_rg.add_argument("--stimuli", type=Path, required=True,
                      help=".npz stimulus dump with a 'stimuli' array")
    p_rg.add_argument("--steps", type=int, default=2000)
    p_rg.add_argument("--log-every", type=int, default=50)

    p_plot = sub.add_parser("plot", help="render curves from a run's metric log")
    _add_common(p_plot)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "refgame":
            return cmd_refgame(args)
        if args.command == "plot":
            return cmd_plot(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: collect, train, eval, reproduce, config.

Exit codes
    0  success
    2  configuration error (bad YAML, unknown key, invalid value, kind mismatch)
    3  data error (missing or unreadable buffer / OOD episode)
    4  training failure
    5  evaluation failure
    6  reproduce finished but the acceptance thresholds were not met

Output layout under the output root (``$QUADWM_OUTPUT`` or ``output_dir``)::

    data/buffer/{episodes.jsonl,manifest.json}
    data/ood.jsonl
    checkpoints/{kind}/{init,best,last,update_N}.json, train_log.csv
    reports/{run_id}/rmse_{dataset}_{model}.csv, table_{dataset}_{model}.txt
                     (dataset: id-buffer, id-heldout, ood{horizon}),
                     series_ood_{model}.csv (first OOD horizon),
                     series_ood{horizon}_{model}.csv (other horizons),
                     summary.json, summary.txt
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import DEFAULT_CONFIG_YAML, ConfigError, ExperimentConfig, load_config
from .evaluation import emit_report, evaluate_id, evaluate_ood
from .excitation import load_buffer
from .nn import load_checkpoint, named_rng, save_checkpoint
from .replay import NoEligibleEpisode, ReplayBuffer
from .simulator import fly_hover_to_forward
from .training import split_holdout, train_world_model
from .types import GROUPS, Tag, read_episodes, write_episodes
from .worldmodel import OracleModel, model_from_payload

log = logging.getLogger("quadwm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4
EXIT_EVAL = 5
EXIT_ACCEPTANCE = 6


class StageError(Exception):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    root = cfg.output_root()
    return {
        "root": root,
        "data": root / "data",
        "buffer": root / "data" / "buffer",
        "ood": root / "data" / "ood.jsonl",
        "checkpoints": root / "checkpoints",
        "reports": root / "reports" / cfg.run_id,
    }


# ---------------------------------------------------------------------------
# stages


def cmd_collect(cfg: ExperimentConfig, data_dir: str | Path | None = None) -> Path:
    """Fill the replay buffer with chirp flight and record one OOD episode."""
    data = Path(data_dir) if data_dir is not None else _paths(cfg)["data"]
    env = cfg.make_env()
    env.reset()
    buf = load_buffer(env, cfg.excitation.chirp(), named_rng(cfg.seed, "collect.chirp"), ReplayBuffer(cfg.replay.capacity))
    buf.save(data / "buffer")
    ood_env = cfg.make_env()
    ood_env.reset()
    ev = cfg.evaluation
    ood = fly_hover_to_forward(
        ood_env, ev.ood_cruise, ev.ood_duration, ev.ood_hover_time, ev.ood_ramp_time, rng=named_rng(cfg.seed, "collect.ood")
    )
    write_episodes(data / "ood.jsonl", [ood])
    log.info("collected %d steps in %d episodes, OOD episode of %d steps", buf.size, len(buf), len(ood))
    return data


def load_data(data_dir: str | Path) -> tuple[ReplayBuffer, object]:
    data = Path(data_dir)
    try:
        buf = ReplayBuffer.load(data / "buffer")
        ood = read_episodes(data / "ood.jsonl")
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("data", EXIT_DATA, f"cannot read data in {data}: {exc}") from exc
    if len(buf) == 0:
        raise StageError("data", EXIT_DATA, f"empty replay buffer in {data}")
    if len(ood) != 1 or ood[0].tag != Tag.HOVER_TO_FORWARD:
        raise StageError("data", EXIT_DATA, f"{data / 'ood.jsonl'} must hold one HoverToForward episode")
    return buf, ood[0]


def cmd_train(cfg: ExperimentConfig, data_dir: str | Path, kind: str, out_dir: str | Path | None = None) -> Path:
    """Train one model kind; returns the checkpoint directory."""
    if kind not in ("physics", "rnn"):
        raise StageError("config", EXIT_CONFIG, f"unknown model kind {kind!r}; expected physics or rnn")
    buf, _ = load_data(data_dir)
    out = Path(out_dir) if out_dir is not None else _paths(cfg)["checkpoints"] / kind
    try:
        train_world_model(buf, kind, cfg.train_config(kind), cfg.nominal_body(), cfg.model_config(kind), out)
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        raise StageError("train", EXIT_TRAIN, str(exc)) from exc
    return out


def write_oracle_checkpoint(path: str | Path) -> Path:
    """A checkpoint that evaluates the true plant from the config."""
    save_checkpoint(path, {"kind": "oracle"})
    return Path(path)


def _load_model(cfg: ExperimentConfig, checkpoint: str | Path, kind: str | None):
    try:
        payload = load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise StageError("eval", EXIT_DATA, f"cannot read checkpoint {checkpoint}: {exc}") from exc
    expected = kind or cfg.model.kind
    if payload["kind"] != expected:
        raise StageError("config", EXIT_CONFIG, f"checkpoint kind {payload['kind']!r} does not match {expected!r}")
    if payload["kind"] == "oracle":
        env = cfg.make_env()
        return OracleModel(env.plant, env.rate_gains, env.dt, env.substeps)
    return model_from_payload(payload)


def evaluate_model(cfg: ExperimentConfig, model, buf: ReplayBuffer, ood, reports: Path) -> dict:
    """ID (whole buffer and held-out block) and OOD reports for one model."""
    ev = cfg.evaluation
    hist = cfg.replay.history
    _, held = split_holdout(buf, cfg.training.holdout_fraction)
    try:
        out = {}
        for name, b in (("id-buffer", buf), ("id-heldout", held)):
            rep = evaluate_id(model, b, ev.id_horizon, ev.n_rollouts, named_rng(cfg.seed, f"eval.{name}"), hist, name)
            emit_report(rep, None, reports)
            out[name] = {"rmse": rep.overalls(), "truncated": rep.truncated}
        for h in ev.ood_horizons:
            rep, series = evaluate_ood(model, ood, h, hist)
            name = "series_ood_{}.csv".format(model.kind) if h == ev.ood_horizons[0] else f"series_ood{h}_{model.kind}.csv"
            emit_report(rep, series, reports, name)
            out[f"ood{h}"] = {"rmse": rep.overalls(), "divergence": series.divergences(), "truncated": rep.truncated}
    except (ValueError, NoEligibleEpisode, ArithmeticError) as exc:
        raise StageError("eval", EXIT_EVAL, str(exc)) from exc
    return out


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | Path, data_dir: str | Path, kind: str | None = None) -> dict:
    model = _load_model(cfg, checkpoint, kind)
    buf, ood = load_data(data_dir)
    return evaluate_model(cfg, model, buf, ood, _paths(cfg)["reports"])


def check_acceptance(cfg: ExperimentConfig, results: dict) -> dict:
    """Held-out ID thresholds and OOD divergence for every model in ``results``."""
    ev = cfg.evaluation
    main = f"ood{ev.ood_horizons[0]}"
    verdict = {}
    for kind, res in results.items():
        held = res["id-heldout"]["rmse"]
        ood = res[main]["rmse"]
        id_ok = all(held[g] < ev.id_thresholds[g] for g in GROUPS) and res["id-heldout"]["truncated"] == 0
        ratios = {g: ood[g] / held[g] if held[g] > 0 else float("inf") for g in GROUPS}
        diverges = any(d >= ev.divergence_threshold for d in res[main]["divergence"].values())
        ratio_ok = sum(r >= ev.ood_ratio_threshold for r in ratios.values()) >= ev.ood_ratio_min_groups
        verdict[kind] = {"id_fit": id_ok, "ood_divergence": diverges, "ood_ratio": ratio_ok, "ood_over_id": ratios}
    verdict["passed"] = all(v["id_fit"] and v["ood_divergence"] and v["ood_ratio"] for v in verdict.values())
    return verdict


def summary_text(results: dict, verdict: dict) -> str:
    lines = []
    for kind, res in results.items():
        lines.append(f"== {kind}")
        for name, r in res.items():
            row = "  ".join(f"{g}={r['rmse'][g]:.4f}" for g in GROUPS)
            lines.append(f"  {name:<11} rmse  {row}")
            if "divergence" in r:
                row = "  ".join(f"{g}={r['divergence'][g]:.2f}" for g in GROUPS)
                lines.append(f"  {name:<11} D     {row}")
        v = verdict[kind]
        row = "  ".join(f"{g}={v['ood_over_id'][g]:.2f}" for g in GROUPS)
        lines.append(f"  ood/id ratio      {row}")
        lines.append(f"  id_fit={v['id_fit']} ood_divergence={v['ood_divergence']} ood_ratio={v['ood_ratio']}")
    lines.append(f"acceptance: {'PASS' if verdict['passed'] else 'FAIL'}")
    return "\n".join(lines) + "\n"


def cmd_reproduce(cfg: ExperimentConfig, skip_collect: bool = False) -> tuple[dict, dict]:
    """collect, train both kinds, evaluate both, write the summary."""
    paths = _paths(cfg)
    if skip_collect:
        if not (paths["buffer"] / "manifest.json").exists():
            raise StageError("data", EXIT_DATA, f"--skip-collect but no buffer at {paths['buffer']}")
    else:
        cmd_collect(cfg, paths["data"])
    buf, ood = load_data(paths["data"])
    results = {}
    for kind in ("physics", "rnn"):
        ckpt = cmd_train(cfg, paths["data"], kind, paths["checkpoints"] / kind)
        model = model_from_payload(load_checkpoint(ckpt / "best.json"))
        results[kind] = evaluate_model(cfg, model, buf, ood, paths["reports"])
    verdict = check_acceptance(cfg, results)
    paths["reports"].mkdir(parents=True, exist_ok=True)
    (paths["reports"] / "summary.json").write_text(json.dumps({"results": results, "acceptance": verdict}, indent=2) + "\n")
    (paths["reports"] / "summary.txt").write_text(summary_text(results, verdict))
    return results, verdict


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadwm", description="Quadcopter world-model reproduction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output", help="override the output root")

    sp = sub.add_parser("collect", help="fill the replay buffer and record the OOD episode")
    common(sp)
    sp = sub.add_parser("train", help="train one world model")
    common(sp)
    sp.add_argument("--kind", help="physics or rnn (default: config model.kind)")
    sp.add_argument("--data", help="data directory (default: <output>/data)")
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", help="expected checkpoint kind (default: config model.kind)")
    sp.add_argument("--data", help="data directory (default: <output>/data)")
    sp = sub.add_parser("reproduce", help="collect, train and evaluate both models")
    common(sp)
    sp.add_argument("--skip-collect", action="store_true", help="reuse the data already on disk")
    sp = sub.add_parser("config", help="configuration helpers")
    csub = sp.add_subparsers(dest="config_command", required=True)
    csub.add_parser("print-default", help="print the default config with comments")
    return p


def _configure(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output is not None:
        cfg.output_dir = args.output
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        sys.stdout.write(DEFAULT_CONFIG_YAML)
        return EXIT_OK
    try:
        cfg = _configure(args)
        if args.command == "collect":
            print(cmd_collect(cfg))
        elif args.command == "train":
            data = args.data or _paths(cfg)["data"]
            print(cmd_train(cfg, data, args.kind or cfg.model.kind))
        elif args.command == "eval":
            res = cmd_eval(cfg, args.checkpoint, args.data or _paths(cfg)["data"], args.kind)
            print(json.dumps(res, indent=2))
        elif args.command == "reproduce":
            results, verdict = cmd_reproduce(cfg, args.skip_collect)
            sys.stdout.write(summary_text(results, verdict))
            return EXIT_OK if verdict["passed"] else EXIT_ACCEPTANCE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{exc.stage} failed: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
